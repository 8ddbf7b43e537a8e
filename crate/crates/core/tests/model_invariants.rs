use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umif_core::model::{Decoder, Encoder, Ivdb, MergerKind, Model, ModelConfig, Rectification};
use umif_core::{Graph, ParamStore, Tensor};

fn random_images(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, side, side, 1], |_| rng.gen_range(0.0..1.0))
}

fn views_in_order(images: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let per = images.numel() / images.shape()[0];
    let mut data = Vec::with_capacity(images.numel());
    for &v in order {
        data.extend_from_slice(&images.data()[v * per..(v + 1) * per]);
    }
    Tensor::new(images.shape().to_vec(), data).unwrap()
}

#[test]
fn encoder_output_shape_is_independent_of_view_count() {
    for merger in MergerKind::ALL {
        let mut config = ModelConfig::toy().encoder;
        config.merger = merger;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&config, &mut store, &mut rng).unwrap();
        for n in 1..=8 {
            let mut g = Graph::inference(&store);
            let x = g.constant(random_images(&mut rng, n, 32));
            let (f, trace) = enc.encode(&mut g, x).unwrap();
            assert_eq!(g.shape(f), &[config.output_tokens(), config.dim], "{merger} n={n}");
            let expected_ivdbs = if n >= 2 { config.ivdb_positions().len() } else { 0 };
            assert_eq!(trace.ivdb.len(), expected_ivdbs);
            for t in &trace.ivdb {
                assert_eq!(t.neighbors.per_anchor(), config.k * (n - 1));
            }
        }
    }
}

#[test]
fn model_output_invariant_to_view_order() {
    for merger in MergerKind::ALL {
        let mut config = ModelConfig::toy();
        config.encoder.merger = merger;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(&config, &mut store, &mut rng).unwrap();
        // wake the zero-initialized heads so the check is not vacuous
        for p in store.iter_mut() {
            let d = p.tensor.data_mut();
            if d.iter().all(|&x| x == d[0]) {
                d.iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
            }
        }
        let images = random_images(&mut rng, 5, 32);
        let base = model.predict(&store, &images).unwrap();
        let spread = base.data().iter().fold(0.0f64, |m, &p| m.max((p - 0.5).abs()));
        assert!(spread > 1e-3, "prediction is constant");
        let mut order: Vec<usize> = (0..5).collect();
        for _ in 0..20 {
            order.shuffle(&mut rng);
            let p = model.predict(&store, &views_in_order(&images, &order)).unwrap();
            for (a, b) in base.data().iter().zip(p.data()) {
                assert!((a - b).abs() < 1e-6, "{merger} order {order:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn untrained_model_predicts_one_half_everywhere() {
    let config = ModelConfig::toy();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&config, &mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let images = Tensor::from_fn(&[3, 32, 32, 1], |i| (i % 7) as f32 / 7.0);
    let p = model.predict(&store, &images).unwrap();
    assert_eq!(p.shape(), &[16, 16, 16]);
    assert!(p.data().iter().all(|&x| x == 0.5));
}

#[test]
fn decoder_invariant_to_feature_row_order() {
    let config = ModelConfig::toy().decoder;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dec = Decoder::new(&config, &mut store, &mut rng).unwrap();
    for p in store.iter_mut() {
        if p.name.starts_with("decoder.head") {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
    }
    let feature: Vec<f64> = (0..16 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut rows: Vec<usize> = (0..16).collect();
    rows.shuffle(&mut rng);
    let permuted: Vec<f64> = rows.iter().flat_map(|&r| feature[r * 64..(r + 1) * 64].iter().copied()).collect();
    let mut g = Graph::inference(&store);
    let a = g.constant(Tensor::new(vec![16, 64], feature).unwrap());
    let b = g.constant(Tensor::new(vec![16, 64], permuted).unwrap());
    let pa = dec.decode(&mut g, a).unwrap();
    let pb = dec.decode(&mut g, b).unwrap();
    for (x, y) in g.value(pa).iter().zip(g.value(pb)) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn offset_weight_is_bounded_by_the_token() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ivdb = Ivdb::new(&mut store, "b", 16, 3, Rectification::OffsetWeight, &mut rng).unwrap();
    // large random head weights push tanh towards saturation
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
    }
    let x = Tensor::from_fn(&[4, 250, 16], |_| rng.gen_range(-5.0..5.0));
    let mut g = Graph::inference(&store);
    let xv = g.constant(x.clone());
    let out = ivdb.forward(&mut g, xv).unwrap();
    let o = g.value(out.offset.unwrap());
    assert_eq!(o.len(), 1000 * 16);
    let mut saturated = 0;
    for (oi, xi) in o.iter().zip(x.data()) {
        assert!(oi.abs() <= xi.abs(), "{oi} vs {xi}");
        if oi.abs() > 0.99 * xi.abs() {
            saturated += 1;
        }
    }
    assert!(saturated > 0, "bound never approached");
}

#[test]
fn offset_heads_start_as_identity_inside_the_encoder() {
    for rect in [Rectification::Offset, Rectification::OffsetWeight] {
        let mut with = ModelConfig::toy().encoder;
        with.rectification = rect;
        let mut without = with.clone();
        without.ivdb_period = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let images = random_images(&mut rng, 3, 32);
        let encode = |config| {
            let mut store = ParamStore::<f64>::new();
            let enc = Encoder::new(config, &mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            // copy the shared (non-IVDB) parameters from a fixed source so
            // both encoders hold identical weights
            let mut src = ParamStore::<f64>::new();
            Encoder::new(&without, &mut src, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
            for p in store.iter_mut() {
                if let Some(id) = src.find(&p.name) {
                    p.tensor = src.get(id).tensor.clone();
                }
            }
            let mut g = Graph::inference(&store);
            let x = g.constant(images.clone());
            let (f, _) = enc.encode(&mut g, x).unwrap();
            g.value(f).to_vec()
        };
        assert_eq!(encode(&with), encode(&without), "{rect}");
    }
}

#[test]
fn full_configuration_is_consistent() {
    let c = ModelConfig::full();
    c.validate().unwrap();
    assert_eq!(c.encoder.tokens_per_view(), 196);
    assert_eq!(c.encoder.ivdb_positions(), vec![3, 6, 9, 12]);
    let mut once = c.encoder.clone();
    once.ivdb_once = true;
    assert_eq!(once.ivdb_positions(), vec![3]);
}

#[test]
fn inconsistent_configurations_are_rejected() {
    let mut c = ModelConfig::toy();
    c.decoder.upsample_stages = 2;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::toy();
    c.encoder.merger = MergerKind::Pbm;
    c.encoder.groups = 8;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::toy();
    c.decoder.queries = 9;
    assert!(c.validate().is_err());
}
