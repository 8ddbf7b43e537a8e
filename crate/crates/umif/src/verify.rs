//! Verification suites: gradient checks, brute-force oracle comparisons and
//! model invariants. Each check yields one [`CheckResult`].

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umif_core::geometry::{dpc_knn_cluster, inter_view_knn, TokenSet};
use umif_core::gradcheck::{check_op, check_pipeline};
use umif_core::loss::dice_loss_value;
use umif_core::metrics::{f_score, f_score_brute, iou};
use umif_core::model::{Attention, Encoder, Ivdb, MergerKind, Model, ModelConfig, Rectification};
use umif_core::oracle::{dpc_oracle, knn_oracle};
use umif_core::voxel::{PointCloud, VoxelGrid};
use umif_core::{Graph, OpKind, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Oracles,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Gradcheck, Suite::Oracles, Suite::Invariants];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Oracles => "oracles",
            Suite::Invariants => "invariants",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            format!("unknown suite {s:?}; valid suites: {}", Self::ALL.map(Suite::name).join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

fn result(suite: Suite, check: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { suite, check: check.into(), passed, detail: detail.into() }
}

pub const OP_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_SEEDS: u64 = 20;
pub const ORACLE_INSTANCES: u64 = 500;

pub fn run(suite: Suite, mutant: Option<OpKind>) -> Vec<CheckResult> {
    match suite {
        Suite::Gradcheck => gradcheck(mutant),
        Suite::Oracles => oracles(),
        Suite::Invariants => invariants(),
    }
}

/// Every op over 20 seeds, then the composed toy pipeline over 20 seeds.
/// `mutant` negates one op's backward rule.
pub fn gradcheck(mutant: Option<OpKind>) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let mut worst = 0.0f64;
        let mut err = None;
        for seed in 0..GRADCHECK_SEEDS {
            match check_op(kind, seed, mutant) {
                Ok(r) => worst = worst.max(if r.checked == 0 { f64::INFINITY } else { r.max_error }),
                Err(e) => err = Some(e.to_string()),
            }
        }
        let passed = err.is_none() && worst < OP_TOLERANCE;
        out.push(result(Suite::Gradcheck, format!("op/{}", kind.name()), passed, err.unwrap_or(format!("max_rel_error={worst:e}"))));
    }
    let config = ModelConfig::toy();
    let mut worst = 0.0f64;
    let mut err = None;
    for seed in 0..GRADCHECK_SEEDS {
        match check_pipeline(&config, seed, 3, 24) {
            Ok(r) => worst = worst.max(r.max_error),
            Err(e) => err = Some(e.to_string()),
        }
    }
    let passed = err.is_none() && worst < PIPELINE_TOLERANCE;
    out.push(result(Suite::Gradcheck, "pipeline/encoder+decoder+dice", passed, err.unwrap_or(format!("max_rel_error={worst:e}"))));
    out
}

fn random_tokens(rng: &mut ChaCha8Rng) -> TokenSet {
    let n = rng.gen_range(2..=4);
    let t = rng.gen_range(1..=32);
    let d = rng.gen_range(1..=16);
    let v = (0..n * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TokenSet::new(n, t, d, v).expect("valid sizes")
}

/// Fast KNN against the sort-everything oracle.
pub fn knn_oracle_mismatches(instances: u64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..instances {
        let ts = random_tokens(&mut rng);
        let k = rng.gen_range(1..=ts.tokens_per_view());
        match inter_view_knn(&ts, k) {
            Ok(idx) if idx == knn_oracle(&ts, k) => {}
            Ok(_) => bad.push(format!("instance {i}: result differs")),
            Err(e) => bad.push(format!("instance {i}: {e}")),
        }
    }
    bad
}

/// Fast DPC-KNN against the direct oracle.
pub fn dpc_oracle_mismatches(instances: u64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for i in 0..instances {
        let ts = random_tokens(&mut rng);
        let n = ts.len();
        let k = rng.gen_range(1..n);
        let g = rng.gen_range(1..=n);
        let imp: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        match dpc_knn_cluster(ts.values(), ts.dim(), k, g, &imp) {
            Ok(c) => {
                let o = dpc_oracle(ts.values(), ts.dim(), k, g, &imp);
                if c.centers != o.centers || c.assignment != o.assignment {
                    bad.push(format!("instance {i}: centers or assignment differ"));
                }
            }
            Err(e) => bad.push(format!("instance {i}: {e}")),
        }
    }
    bad
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()).expect("unit cube")
}

pub fn oracles() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let summarize = |name: &str, bad: Vec<String>| {
        result(Suite::Oracles, name, bad.is_empty(), match bad.first() {
            None => format!("{ORACLE_INSTANCES} instances match"),
            Some(b) => format!("{} mismatches; first: {b}", bad.len()),
        })
    };
    out.push(summarize("inter_view_knn", knn_oracle_mismatches(ORACLE_INSTANCES, 1)));
    out.push(summarize("dpc_knn_cluster", dpc_oracle_mismatches(ORACLE_INSTANCES, 2)));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (a, b) = (random_cloud(&mut rng, 200), random_cloud(&mut rng, 150));
        let d = rng.gen_range(0.01..0.2);
        let fast = f_score(&a, &b, d).unwrap_or(f64::NAN);
        worst = worst.max((fast - f_score_brute(&a, &b, d)).abs());
    }
    out.push(result(Suite::Oracles, "f_score", worst == 0.0, format!("max |grid - brute| = {worst:e}")));
    out
}

fn randomize_constant_params(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, spread: f64) {
    for p in store.iter_mut() {
        let d = p.tensor.data_mut();
        if d.iter().all(|&x| x == d[0]) {
            d.iter_mut().for_each(|x| *x += rng.gen_range(-spread..spread));
        }
    }
}

fn reorder_views(images: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let per = images.numel() / images.shape()[0];
    let data = order.iter().flat_map(|&v| images.data()[v * per..(v + 1) * per].iter().copied()).collect();
    Tensor::new(images.shape().to_vec(), data).expect("same shape")
}

pub fn invariants() -> Vec<CheckResult> {
    let s = Suite::Invariants;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let config = ModelConfig::toy();

    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&config.encoder, &mut store, &mut rng).expect("toy encoder");
    let mut shapes_ok = true;
    for n in 1..=8 {
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::from_fn(&[n, 32, 32, 1], |_| rng.gen_range(0.0..1.0)));
        let ok = enc.encode(&mut g, x).map(|(f, _)| g.shape(f) == [config.encoder.output_tokens(), config.encoder.dim]);
        shapes_ok &= ok.unwrap_or(false);
    }
    out.push(result(s, "encoder_shape_n1_to_8", shapes_ok, format!("[{}, {}] for every n", config.encoder.output_tokens(), config.encoder.dim)));

    for merger in MergerKind::ALL {
        let mut c = config.clone();
        c.encoder.merger = merger;
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(&c, &mut store, &mut rng).expect("toy model");
        randomize_constant_params(&mut store, &mut rng, 0.3);
        let images = Tensor::from_fn(&[4, 32, 32, 1], |_| rng.gen_range(0.0..1.0));
        let base = model.predict(&store, &images).expect("forward");
        let mut order: Vec<usize> = (0..4).collect();
        let mut worst = 0.0f64;
        for _ in 0..20 {
            order.shuffle(&mut rng);
            let p = model.predict(&store, &reorder_views(&images, &order)).expect("forward");
            for (a, b) in base.data().iter().zip(p.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        out.push(result(s, format!("view_permutation/{merger}"), worst < 1e-6, format!("max |diff| = {worst:e} over 20 permutations")));
    }

    for rect in [Rectification::Offset, Rectification::OffsetWeight] {
        let mut store = ParamStore::<f64>::new();
        let ivdb = Ivdb::new(&mut store, "ivdb", 16, 3, rect, &mut rng).expect("ivdb");
        let x = Tensor::from_fn(&[3, 8, 16], |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let same = ivdb.forward(&mut g, xv).map(|o| g.value(o.tokens) == x.data()).unwrap_or(false);
        out.push(result(s, format!("ivdb_identity_at_init/{rect}"), same, "zero-initialized offset head"));
    }

    let mut store = ParamStore::<f64>::new();
    let ivdb = Ivdb::new(&mut store, "ivdb", 16, 3, Rectification::OffsetWeight, &mut rng).expect("ivdb");
    for p in store.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
    }
    let x = Tensor::from_fn(&[4, 250, 16], |_| rng.gen_range(-5.0..5.0));
    let mut g = Graph::inference(&store);
    let xv = g.constant(x.clone());
    let bounded = ivdb
        .forward(&mut g, xv)
        .ok()
        .and_then(|o| o.offset)
        .map(|o| g.value(o).iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()))
        .unwrap_or(false);
    out.push(result(s, "offset_weight_bound", bounded, "|o| <= |x| on 1000 tokens"));

    let mut store = ParamStore::<f64>::new();
    let attn = Attention::new(&mut store, "attn", 16, 4, &mut rng).expect("attention");
    let mut g = Graph::inference(&store);
    let q = g.constant(Tensor::from_fn(&[1, 5, 16], |_| rng.gen_range(-1.0..1.0)));
    let kv = g.constant(Tensor::from_fn(&[1, 9, 16], |_| rng.gen_range(-1.0..1.0)));
    let zero = g.constant(Tensor::zeros(&[1, 9]));
    let diff = match (attn.forward(&mut g, q, kv, None), attn.forward(&mut g, q, kv, Some(zero))) {
        (Ok(a), Ok(b)) => g.value(a).iter().zip(g.value(b)).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())),
        _ => f64::INFINITY,
    };
    out.push(result(s, "weighted_attention_zero_bias", diff <= 1e-9, format!("max |diff| = {diff:e}")));

    let gt = VoxelGrid::from_fn(8, |x, y, z| f64::from(u8::from((x + 2 * y + z) % 3 == 0)));
    let inv = VoxelGrid::from_fn(8, |x, y, z| 1.0 - gt.get(x, y, z));
    let d0 = dice_loss_value(&gt, &gt).unwrap_or(f64::NAN);
    let d1 = dice_loss_value(&inv, &gt).unwrap_or(f64::NAN);
    out.push(result(s, "dice_exact_cases", d0 == 0.0 && d1 == 1.0, format!("dice(gt,gt)={d0}, dice(1-gt,gt)={d1}")));
    let i = iou(&gt, &gt, 0.5).unwrap_or(f64::NAN);
    out.push(result(s, "iou_identical", i == 1.0, format!("iou={i}")));
    let cloud = random_cloud(&mut rng, 500);
    let f = f_score(&cloud, &cloud, 0.01).unwrap_or(f64::NAN);
    out.push(result(s, "fscore_identical", f == 1.0, format!("fscore={f}")));
    out
}

pub fn write_csv<W: std::io::Write>(w: W, results: &[CheckResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["suite", "check", "passed", "detail"])?;
    for r in results {
        w.write_record([r.suite.name(), &r.check, if r.passed { "true" } else { "false" }, &r.detail])?;
    }
    w.flush()?;
    Ok(())
}
