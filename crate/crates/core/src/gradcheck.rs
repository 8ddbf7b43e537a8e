//! Central finite-difference gradient checks (64-bit only).
//!
//! The error for one coordinate is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)`: relative for ordinary gradients, absolute for
//! gradients near zero where finite-difference noise dominates. Single-op
//! checks use `floor = 1e-3` and step `h = 1e-6 * max(1, |x|)`.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::data::{gen_shape, render_views, stack_views, view_directions, ViewRender};
use crate::loss::dice_loss;
use crate::model::{Model, ModelConfig};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub worst: Option<Probe>,
    /// Denominator floor used for `max_error`.
    pub floor: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    fn from_probes(probes: Vec<Probe>, floor: f64) -> Self {
        let mut r = Self { checked: probes.len(), floor, ..Self::default() };
        for p in &probes {
            let err = (p.analytic - p.numeric).abs() / p.analytic.abs().max(p.numeric.abs()).max(floor);
            if !(err <= r.max_error) {
                r.max_error = err;
                r.worst = Some(*p);
            }
        }
        r.probes = probes;
        r
    }

    /// Recomputes the errors with the floor set to `ERROR_FLOOR` times the
    /// largest numeric gradient magnitude, for losses whose gradients are
    /// uniformly small.
    pub fn scaled_to_largest(self) -> Self {
        let scale = self.probes.iter().map(|p| p.numeric.abs()).fold(0.0, f64::max);
        Self::from_probes(self.probes, ERROR_FLOOR * scale)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_error < tolerance
    }
}

/// Relative finite-difference step.
pub const STEP: f64 = 1e-6;

fn step(x: f64, rel: f64) -> f64 {
    rel * x.abs().max(1.0)
}

/// Checks `d f / d inputs` for every input element (or the listed
/// `(input, element)` coordinates).
pub fn check_inputs<F>(
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    flip: Option<OpKind>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let rel_step = STEP;
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };
    let mut g = Graph::new();
    if let Some(k) = flip {
        g.inject_backward_sign_flip(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e))).collect();
            &all
        }
    };
    let mut probes = Vec::with_capacity(coords.len());
    let mut work = inputs.to_vec();
    for &(i, e) in coords {
        let x = inputs[i].data()[e];
        let h = step(x, rel_step);
        work[i].data_mut()[e] = x + h;
        let up = eval(&work)?;
        work[i].data_mut()[e] = x - h;
        let down = eval(&work)?;
        work[i].data_mut()[e] = x;
        probes.push(Probe { input: i, element: e, analytic: analytic[i][e], numeric: (up - down) / (2.0 * h) });
    }
    Ok(GradCheckReport::from_probes(probes, ERROR_FLOOR))
}

/// Checks `d f / d params` at the listed `(param, element)` coordinates.
pub fn check_params<F>(store: &ParamStore<f64>, coords: &[(ParamId, usize)], rel_step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let out = f(&mut g)?;
        Ok(g.value(out)[0])
    };
    let mut g = Graph::with_params(store);
    let out = f(&mut g)?;
    g.backward(out)?;
    let mut grads: Vec<Option<Vec<f64>>> = alloc::vec![None; store.len()];
    for (id, gr) in g.param_grads() {
        grads[id.0] = Some(gr.to_vec());
    }
    drop(g);
    let mut probes = Vec::with_capacity(coords.len());
    let mut work = store.clone();
    for &(id, e) in coords {
        let x = store.get(id).tensor.data()[e];
        let h = step(x, rel_step);
        work.get_mut(id).tensor.data_mut()[e] = x + h;
        let up = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[e] = x - h;
        let down = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[e] = x;
        let a = grads[id.0].as_ref().map_or(0.0, |gr| gr[e]);
        probes.push(Probe { input: id.0, element: e, analytic: a, numeric: (up - down) / (2.0 * h) });
    }
    Ok(GradCheckReport::from_probes(probes, ERROR_FLOOR))
}

/// Step for [`check_pipeline`]: the loss is an average over every voxel, so
/// its gradients are small and a smaller step drowns them in rounding noise.
pub const PIPELINE_STEP: f64 = 1e-4;

/// End-to-end check of images -> encoder -> decoder -> Dice loss.
///
/// Parameters keep their initial values except that constant tensors
/// (zero-initialized heads and biases, unit norm scales) are perturbed so
/// every block receives gradient. `coords` parameter coordinates are
/// sampled, each by first choosing a parameter uniformly. Errors use the
/// floor of [`GradCheckReport::scaled_to_largest`].
pub fn check_pipeline(config: &ModelConfig, seed: u64, n_views: usize, coords: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(config, &mut store, &mut rng)?;
    for p in store.iter_mut() {
        let d = p.tensor.data_mut();
        if d.iter().all(|&x| x == d[0]) {
            d.iter_mut().for_each(|x| *x += rng.gen_range(-0.5..0.5));
        }
    }
    let side = config.decoder.voxel_size;
    let shape = gen_shape(seed, side)?;
    let dirs = view_directions();
    let picked: Vec<[f64; 3]> = dirs.choose_multiple(&mut rng, n_views).copied().collect();
    let views = render_views(&shape.voxel, &picked, config.encoder.image_size, config.encoder.image_size)?;
    let refs: Vec<&ViewRender> = views.iter().collect();
    let images: Tensor<f64> = stack_views(&refs)?;
    let gt: Vec<f64> = shape.voxel.values().to_vec();
    let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
    let sample: Vec<(ParamId, usize)> = (0..coords)
        .map(|_| {
            let id = *ids.choose(&mut rng).expect("model has parameters");
            (id, rng.gen_range(0..store.get(id).tensor.numel()))
        })
        .collect();
    let report = check_params(&store, &sample, PIPELINE_STEP, |g| {
        let x = g.constant(images.clone());
        let (p, _) = model.forward(g, x)?;
        dice_loss(g, p, &gt)
    })?;
    Ok(report.scaled_to_largest())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Random-input gradient check of a single operation kind.
///
/// Each case reduces the op output with a fixed random weighting so that
/// shift-invariant ops (softmax, layer norm) still receive informative
/// gradients.
pub fn check_op(kind: OpKind, seed: u64, flip: Option<OpKind>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let rank = rng.gen_range(1..=3);
    let shape = dims(&mut rng, rank);
    let axis = rng.gen_range(0..rank);
    let mut inputs: Vec<Tensor<f64>> = Vec::new();
    let mut indices: Vec<usize> = Vec::new();
    let mut target: Vec<usize> = Vec::new();
    let mut perm: Vec<usize> = (0..rank).collect();
    let s: f64 = rng.gen_range(-2.0..2.0);
    match kind {
        OpKind::MatMul => {
            let nb = rng.gen_range(0..=1);
            let batch = dims(&mut rng, nb);
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let mut sa = batch.clone();
            sa.extend([m, k]);
            let mut sb = batch;
            sb.extend([k, n]);
            inputs.push(rand_tensor(&mut rng, &sa, -1.0, 1.0));
            inputs.push(rand_tensor(&mut rng, &sb, -1.0, 1.0));
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            inputs.push(rand_tensor(&mut rng, &shape, -1.0, 1.0));
            inputs.push(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        }
        OpKind::Div => {
            inputs.push(rand_tensor(&mut rng, &shape, -1.0, 1.0));
            let sign = if rng.gen() { 1.0 } else { -1.0 };
            inputs.push(Tensor::from_fn(&shape, |_| sign * rng.gen_range(0.5..2.0)));
        }
        OpKind::Log => inputs.push(rand_tensor(&mut rng, &shape, 0.5, 3.0)),
        OpKind::Exp => inputs.push(rand_tensor(&mut rng, &shape, -2.0, 2.0)),
        OpKind::Max => {
            // distinct, well-separated values along every slice
            let n: usize = shape.iter().product();
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            vals.shuffle(&mut rng);
            inputs.push(Tensor::new(shape.clone(), vals)?);
        }
        OpKind::Reshape => {
            let n: usize = shape.iter().product();
            target = alloc::vec![n];
            inputs.push(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        }
        OpKind::Permute => {
            perm.shuffle(&mut rng);
            inputs.push(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        }
        OpKind::Concat => {
            for _ in 0..rng.gen_range(2..=3) {
                let mut sh = shape.clone();
                sh[axis] = rng.gen_range(1..=3);
                inputs.push(rand_tensor(&mut rng, &sh, -1.0, 1.0));
            }
        }
        OpKind::Gather => {
            indices = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..shape[axis])).collect();
            inputs.push(rand_tensor(&mut rng, &shape, -1.0, 1.0));
        }
        OpKind::Broadcast => {
            let mut src = shape.clone();
            src[axis] = 1;
            target = shape.clone();
            target.insert(0, rng.gen_range(1..=3));
            inputs.push(rand_tensor(&mut rng, &src, -1.0, 1.0));
        }
        OpKind::Upsample3d => {
            let sh = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3)];
            inputs.push(rand_tensor(&mut rng, &sh, -1.0, 1.0));
        }
        OpKind::Conv3dPointwise => {
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let sh = [rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=2), cin];
            inputs.push(rand_tensor(&mut rng, &sh, -1.0, 1.0));
            inputs.push(rand_tensor(&mut rng, &[cin, cout], -1.0, 1.0));
            inputs.push(rand_tensor(&mut rng, &[cout], -1.0, 1.0));
        }
        OpKind::LayerNorm => {
            let mut sh = shape.clone();
            sh[axis] = rng.gen_range(2..=5);
            inputs.push(rand_tensor(&mut rng, &sh, -2.0, 2.0));
        }
        OpKind::Leaf | OpKind::Param => {
            return Err(crate::error::contract("leaves have no backward rule".into()));
        }
        _ => inputs.push(rand_tensor(&mut rng, &shape, -3.0, 3.0)),
    }
    // weighting tensor for the output is drawn lazily from a derived seed
    let weight_seed: u64 = rng.gen();
    check_inputs(&inputs, None, flip, move |g, v| {
        let out = match kind {
            OpKind::MatMul => g.matmul(v[0], v[1]),
            OpKind::Add => g.add(v[0], v[1]),
            OpKind::Sub => g.sub(v[0], v[1]),
            OpKind::Mul => g.mul(v[0], v[1]),
            OpKind::Div => g.div(v[0], v[1]),
            OpKind::Scale => g.scale(v[0], s),
            OpKind::Exp => g.exp(v[0]),
            OpKind::Log => g.log(v[0]),
            OpKind::Tanh => g.tanh(v[0]),
            OpKind::Gelu => g.gelu(v[0]),
            OpKind::Sigmoid => g.sigmoid(v[0]),
            OpKind::Softmax => g.softmax(v[0], axis),
            OpKind::LayerNorm => g.layer_norm(v[0], axis),
            OpKind::Sum => g.sum(v[0], axis),
            OpKind::Mean => g.mean(v[0], axis),
            OpKind::Max => g.max(v[0], axis),
            OpKind::Reshape => g.reshape(v[0], &target),
            OpKind::Permute => g.permute(v[0], &perm),
            OpKind::Concat => g.concat(v, axis),
            OpKind::Gather => g.gather(v[0], axis, &indices),
            OpKind::Broadcast => g.broadcast(v[0], &target),
            OpKind::Upsample3d => g.upsample3d(v[0], 2),
            OpKind::Conv3dPointwise => g.conv3d_pointwise(v[0], v[1], v[2]),
            OpKind::Leaf | OpKind::Param => unreachable!(),
        }?;
        // the reduction must not use the op under test, or a flipped rule
        // would be applied twice and cancel
        if kind == OpKind::MatMul {
            weighted_sum_elementwise(g, out, weight_seed)
        } else {
            weighted_sum(g, out, weight_seed)
        }
    })
}

fn weights(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut wr = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| wr.gen_range(-1.0..1.0))
}

/// `sum(out * w)` with `w` uniform in `[-1, 1]` drawn from `seed`, computed
/// as a `[1, n] x [n, 1]` product.
pub fn weighted_sum(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let n = g.value(out).len();
    let w = weights(seed, g.shape(out));
    let w = g.constant(Tensor::new(alloc::vec![n, 1], w.into_data())?);
    let row = g.reshape(out, &[1, n])?;
    let prod = g.matmul(row, w)?;
    g.reshape(prod, &[])
}

fn weighted_sum_elementwise(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let w = weights(seed, g.shape(out));
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    g.sum_all(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_twenty_seeds() {
        for kind in OpKind::DIFFERENTIABLE {
            for seed in 0..20 {
                let r = check_op(kind, seed, None).unwrap();
                assert!(r.passes(1e-4), "{kind:?} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn sign_flip_mutant_is_caught() {
        for kind in OpKind::DIFFERENTIABLE {
            let caught = (0..5).any(|seed| !check_op(kind, seed, Some(kind)).unwrap().passes(1e-4));
            assert!(caught, "{kind:?} mutant survived");
        }
    }
}
