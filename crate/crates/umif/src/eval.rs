//! Per-sample IoU, F-Score and Dice across view counts.

use anyhow::{bail, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use umif_core::loss::dice_loss_value;
use umif_core::metrics::{binarize, extract_surface_points, f_score, iou};
use umif_core::model::Model;
use umif_core::voxel::VoxelGrid;
use umif_core::ParamStore;

use crate::config::RunConfig;
use crate::dataset::Sample;
use crate::train::images;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub sample_id: u64,
    pub n_views: usize,
    pub iou: f64,
    pub fscore: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n_views: usize,
    pub count: usize,
    pub iou: f64,
    pub fscore: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub iou: f64,
    pub fscore: f64,
    pub dice: f64,
}

/// Scores a probability grid against a binary target. Both surfaces are
/// sampled with the same `seed`, so identical grids give identical clouds;
/// an empty binarized prediction has F-Score 0.
pub fn score(pred: &VoxelGrid, gt: &VoxelGrid, config: &RunConfig, seed: u64) -> Result<Scores> {
    let t = config.threshold;
    let bin = binarize(pred, t);
    let fscore = if bin.occupied() == 0 || gt.occupied() == 0 {
        0.0
    } else {
        let r = extract_surface_points(&bin, config.fscore_points, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let g = extract_surface_points(gt, config.fscore_points, &mut ChaCha8Rng::seed_from_u64(seed))?;
        f_score(&r, &g, config.fscore_distance)?
    };
    Ok(Scores { iou: iou(pred, gt, t)?, fscore, dice: dice_loss_value(pred, gt)? })
}

pub fn predict(model: &Model, params: &ParamStore<f32>, s: &Sample, n: usize) -> Result<VoxelGrid> {
    let x = images(s, &s.eval_view_order()[..n])?;
    let p = model.predict(params, &x)?;
    Ok(VoxelGrid::new(model.config.decoder.voxel_size, p.data().iter().map(|&v| f64::from(v)).collect())?)
}

/// Usage errors for an evaluation request.
pub fn check_view_counts(n_list: &[usize], stored: usize) -> Result<()> {
    if n_list.is_empty() {
        bail!("no view counts given");
    }
    if let Some(&n) = n_list.iter().find(|&&n| n == 0 || n > stored) {
        bail!("view count {n} outside 1..={stored}");
    }
    Ok(())
}

pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    samples: &[&Sample],
    n_list: &[usize],
    config: &RunConfig,
) -> Result<Vec<EvalRow>> {
    let stored = samples.iter().map(|s| s.views.len()).min().unwrap_or(0);
    check_view_counts(n_list, stored)?;
    let mut rows = Vec::with_capacity(samples.len() * n_list.len());
    for s in samples {
        for &n in n_list {
            let pred = predict(model, params, s, n)?;
            let sc = score(&pred, &s.voxel, config, s.seed)?;
            rows.push(EvalRow { sample_id: s.seed, n_views: n, iou: sc.iou, fscore: sc.fscore, dice: sc.dice });
        }
    }
    Ok(rows)
}

/// Means per view count, in order of first appearance.
pub fn summarize(rows: &[EvalRow]) -> Vec<Summary> {
    let mut out: Vec<Summary> = Vec::new();
    for r in rows {
        let i = match out.iter().position(|s| s.n_views == r.n_views) {
            Some(i) => i,
            None => {
                out.push(Summary { n_views: r.n_views, count: 0, iou: 0.0, fscore: 0.0, dice: 0.0 });
                out.len() - 1
            }
        };
        let s = &mut out[i];
        s.count += 1;
        s.iou += r.iou;
        s.fscore += r.fscore;
        s.dice += r.dice;
    }
    for s in &mut out {
        let c = s.count as f64;
        s.iou /= c;
        s.fscore /= c;
        s.dice /= c;
    }
    out
}

pub fn write_rows<W: std::io::Write>(w: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["sample_id", "n_views", "iou", "fscore", "dice"])?;
    for r in rows {
        w.write_record([r.sample_id.to_string(), r.n_views.to_string(), r.iou.to_string(), r.fscore.to_string(), r.dice.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: std::io::Write>(w: W, rows: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["n_views", "count", "mean_iou", "mean_fscore", "mean_dice"])?;
    for s in rows {
        w.write_record([s.n_views.to_string(), s.count.to_string(), s.iou.to_string(), s.fscore.to_string(), s.dice.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
