//! Correspondence and clustering reports for one sample: the neighbors each
//! IVDB selected for every anchor token, and the STM group of every token.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use umif_core::geometry::{ClusterAssignment, NeighborIndex};
use umif_core::model::{EncodeTrace, Model};
use umif_core::{Graph, ParamStore};

use crate::dataset::Sample;
use crate::train::images;

/// Runs the encoder on the first `n` views of the sample's evaluation order.
pub fn trace(model: &Model, params: &ParamStore<f32>, s: &Sample, n: usize) -> Result<EncodeTrace> {
    let order = s.eval_view_order();
    anyhow::ensure!((1..=order.len()).contains(&n), "view count {n} outside 1..={}", order.len());
    let x = images(s, &order[..n])?;
    let mut g = Graph::inference(params);
    let xv = g.constant(x);
    let (_, t) = model.encoder.encode(&mut g, xv)?;
    Ok(t)
}

fn grid(token: usize, side: usize) -> (usize, usize) {
    (token / side, token % side)
}

/// One row per (anchor, neighbor) pair; `rank` orders the neighbors of an
/// anchor within one target view.
pub fn write_neighbors<W: std::io::Write>(w: W, nb: &NeighborIndex, grid_side: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "anchor_view", "anchor_token", "anchor_row", "anchor_col", "rank", "neighbor_view", "neighbor_token",
        "neighbor_row", "neighbor_col", "distance",
    ])?;
    for view in 0..nb.views {
        for token in 0..nb.tokens_per_view {
            let (ar, ac) = grid(token, grid_side);
            for (i, e) in nb.neighbors(view, token).iter().enumerate() {
                let (nr, nc) = grid(e.token, grid_side);
                w.write_record([
                    view.to_string(),
                    token.to_string(),
                    ar.to_string(),
                    ac.to_string(),
                    (i % nb.k).to_string(),
                    e.view.to_string(),
                    e.token.to_string(),
                    nr.to_string(),
                    nc.to_string(),
                    format!("{:e}", e.dist2.sqrt()),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per token of every view with its group id.
pub fn write_clusters<W: std::io::Write>(w: W, c: &ClusterAssignment, tokens_per_view: usize, grid_side: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["view", "token", "row", "col", "group", "is_center", "importance"])?;
    for (i, &group) in c.assignment.iter().enumerate() {
        let (view, token) = (i / tokens_per_view, i % tokens_per_view);
        let (r, col) = grid(token, grid_side);
        w.write_record([
            view.to_string(),
            token.to_string(),
            r.to_string(),
            col.to_string(),
            group.to_string(),
            c.centers.contains(&i).to_string(),
            format!("{:e}", c.importance[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `ivdb{after_block}_neighbors.csv` for every IVDB and, for the STM
/// merger, `clusters.csv` into `dir`. Returns the written paths.
pub fn write_reports(dir: &Path, model: &Model, t: &EncodeTrace) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cfg = &model.config.encoder;
    let side = cfg.image_size / cfg.patch_size;
    let mut out = Vec::new();
    let create = |p: &Path| std::fs::File::create(p).with_context(|| format!("creating {}", p.display()));
    for iv in &t.ivdb {
        let p = dir.join(format!("ivdb{}_neighbors.csv", iv.after_block));
        write_neighbors(std::io::BufWriter::new(create(&p)?), &iv.neighbors, side)?;
        out.push(p);
    }
    if let Some(c) = &t.clusters {
        let p = dir.join("clusters.csv");
        write_clusters(std::io::BufWriter::new(create(&p)?), c, cfg.tokens_per_view(), side)?;
        out.push(p);
    }
    Ok(out)
}
