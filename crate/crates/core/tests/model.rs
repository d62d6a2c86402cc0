use dsdf_core::fusion::Label;
use dsdf_core::gradcheck::{by_group, check_model, STEP};
use dsdf_core::model::{ModelConfig, Prepared};
use dsdf_core::synth;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reduced_model_gradients_match_finite_differences() {
    let cfg = ModelConfig::reduced();
    let params = cfg.init_params(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, fake) = synth::pair(&mut rng, cfg.image_size).unwrap();
    let input = Prepared::from_image(&fake, &cfg).unwrap();
    let reports = check_model(&params, &cfg, &input, Label::Fake, STEP).unwrap();
    for g in by_group(&reports) {
        assert!(g.max_rel_err < 1e-3, "{}: rel err {}", g.name, g.max_rel_err);
        assert_eq!(g.unresolved, 0, "{}: unresolved kinks", g.name);
    }
}
