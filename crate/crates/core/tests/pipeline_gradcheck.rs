use umif_core::gradcheck::check_pipeline;
use umif_core::model::{MergerKind, ModelConfig, Rectification};

#[test]
fn toy_pipeline_gradients_match_finite_differences() {
    let config = ModelConfig::toy();
    for seed in 0..20 {
        let r = check_pipeline(&config, seed, 3, 24).unwrap();
        assert!(r.passes(1e-3), "seed {seed}: {r:?}");
    }
}

#[test]
fn every_merger_and_rectification_passes() {
    for merger in MergerKind::ALL {
        for rect in Rectification::ALL {
            let mut config = ModelConfig::toy();
            config.encoder.merger = merger;
            config.encoder.rectification = rect;
            let r = check_pipeline(&config, 100, 2, 16).unwrap();
            assert!(r.passes(1e-3), "{merger}/{rect}: {r:?}");
        }
    }
}
