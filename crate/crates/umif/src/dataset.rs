//! On-disk synthetic dataset: a manifest plus VOXG grids and IMGF views.
//!
//! `manifest.tsv` has a header row and one line per sample with the columns
//! `seed`, `recipe`, `voxel` and `views` (comma-separated view paths, one per
//! direction of [`view_directions`]). Paths are relative to the dataset
//! directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use umif_core::data::{gen_shape, is_train_seed, render_views, sample_seed, view_directions, ViewRender};
use umif_core::voxel::VoxelGrid;

use crate::formats::{read_imgf, read_voxg, write_imgf, write_voxg, Image};

/// Views rendered per shape.
pub const STORED_VIEWS: usize = 24;
pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub recipe: String,
    pub voxel: VoxelGrid,
    pub views: Vec<ViewRender>,
}

impl Sample {
    pub fn is_train(&self) -> bool {
        is_train_seed(self.seed)
    }

    /// Fixed view order used for validation and evaluation; the first `n`
    /// entries form the `n`-view input, so smaller sets are nested in larger.
    pub fn eval_view_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.views.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_0F_71E5));
        order
    }
}

pub fn generate_sample(seed: u64, side: usize, image_size: usize) -> Result<Sample> {
    let shape = gen_shape(seed, side)?;
    let views = render_views(&shape.voxel, &view_directions(), image_size, image_size)?;
    Ok(Sample { seed, recipe: shape.recipe.to_text(), voxel: shape.voxel, views })
}

/// Generates `count` samples from `master_seed`.
pub fn generate(master_seed: u64, count: usize, side: usize, image_size: usize) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_sample(sample_seed(master_seed, i), side, image_size)).collect()
}

pub fn split(samples: &[Sample]) -> (Vec<&Sample>, Vec<&Sample>) {
    samples.iter().partition(|s| s.is_train())
}

fn voxel_path(seed: u64) -> PathBuf {
    PathBuf::from("voxels").join(format!("{seed}.voxg"))
}

fn view_path(seed: u64, j: usize) -> PathBuf {
    PathBuf::from("views").join(format!("{seed}_{j:02}.imgf"))
}

/// Writes the dataset; existing files for the same seeds are overwritten
/// with identical bytes.
pub fn write(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("voxels"))?;
    fs::create_dir_all(dir.join("views"))?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(dir.join(MANIFEST))?;
    w.write_record(["seed", "recipe", "voxel", "views"])?;
    for s in samples {
        let vp = voxel_path(s.seed);
        fs::write(dir.join(&vp), write_voxg(&s.voxel))?;
        let mut views = Vec::with_capacity(s.views.len());
        for (j, v) in s.views.iter().enumerate() {
            let p = view_path(s.seed, j);
            let img = Image { height: v.height, width: v.width, data: v.image.iter().map(|&x| x as f32).collect() };
            fs::write(dir.join(&p), write_imgf(&img))?;
            views.push(p.display().to_string());
        }
        w.write_record([s.seed.to_string(), s.recipe.clone(), vp.display().to_string(), views.join(",")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = dir.join(MANIFEST);
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(&manifest)
        .with_context(|| format!("opening {}", manifest.display()))?;
    let dirs = view_directions();
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        ensure!(rec.len() == 4, "{}: row {} has {} columns", manifest.display(), line + 2, rec.len());
        let seed: u64 = rec[0].parse().with_context(|| format!("row {}: bad seed", line + 2))?;
        let vpath = dir.join(&rec[2]);
        let voxel = read_voxg(&fs::read(&vpath).with_context(|| format!("reading {}", vpath.display()))?)
            .with_context(|| vpath.display().to_string())?;
        let paths: Vec<&str> = rec[3].split(',').collect();
        if paths.len() != dirs.len() {
            bail!("row {}: {} views, expected {}", line + 2, paths.len(), dirs.len());
        }
        let mut views = Vec::with_capacity(paths.len());
        for (p, d) in paths.iter().zip(&dirs) {
            let path = dir.join(p);
            let img = read_imgf(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)
                .with_context(|| path.display().to_string())?;
            views.push(ViewRender {
                direction: *d,
                height: img.height,
                width: img.width,
                image: img.data.into_iter().map(f64::from).collect(),
            });
        }
        out.push(Sample { seed, recipe: rec[1].to_string(), voxel, views });
    }
    ensure!(!out.is_empty(), "{} lists no samples", manifest.display());
    Ok(out)
}
