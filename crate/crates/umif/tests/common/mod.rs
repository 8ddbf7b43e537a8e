//! Hand-assembled format fixtures shared by the integration tests.
#![allow(dead_code)]

use umif::formats::{
    read_binvox, read_checkpoint, read_imgf, read_voxg, write_binvox, write_checkpoint, write_imgf, write_voxg,
    Checkpoint, Image, TrainState,
};
use umif_core::optim::{AdamW, AdamWConfig};
use umif_core::voxel::VoxelGrid;
use umif_core::{ParamStore, Tensor};

fn f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn u32le(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub const VOXG_VALUES: [f32; 8] = [1.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.25, 1.0];

pub fn voxg_fixture() -> (Vec<u8>, VoxelGrid) {
    let mut b = b"VOXG".to_vec();
    u32le(&mut b, 2);
    f32s(&mut b, &VOXG_VALUES);
    (b, VoxelGrid::new(2, VOXG_VALUES.iter().map(|&x| f64::from(x)).collect()).unwrap())
}

pub fn imgf_fixture() -> (Vec<u8>, Image) {
    let data = vec![0.0, 1.0, 0.5, 0.125, 1.0, 0.0];
    let mut b = b"IMGF".to_vec();
    u32le(&mut b, 2);
    u32le(&mut b, 3);
    f32s(&mut b, &data);
    (b, Image { height: 2, width: 3, data })
}

/// 2^3 grid, binvox order (x, z, y) runs: 3 empty, 2 filled, 3 empty.
pub fn binvox_fixture() -> (Vec<u8>, VoxelGrid) {
    let mut b = b"#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n".to_vec();
    b.extend_from_slice(&[0, 3, 1, 2, 0, 3]);
    // binvox indices 3 and 4: (x=0, z=1, y=1) and (x=1, z=0, y=0)
    let mut v = VoxelGrid::empty(2);
    v.set(0, 1, 1, 1.0);
    v.set(1, 0, 0, 1.0);
    (b, v)
}

pub fn checkpoint_fixture() -> (Vec<u8>, Checkpoint) {
    let mut params = ParamStore::<f32>::new();
    params.register("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
    params.register("b", Tensor::new(vec![1], vec![0.75]).unwrap()).unwrap();
    let mut optimizer = AdamW::new(AdamWConfig::default(), &params);
    optimizer.step_count = 7;
    optimizer.m = vec![vec![0.1, 0.2, 0.3, 0.4], vec![-0.5]];
    optimizer.v = vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.25]];
    let config_text = "epochs = 3\n".to_string();

    let mut b = b"UMIF".to_vec();
    u32le(&mut b, 1);
    u32le(&mut b, 2);
    u32le(&mut b, 3);
    b.extend_from_slice(b"a.w");
    u32le(&mut b, 2);
    b.extend_from_slice(&2u64.to_le_bytes());
    b.extend_from_slice(&2u64.to_le_bytes());
    f32s(&mut b, &[1.0, -2.0, 0.5, 3.0]);
    u32le(&mut b, 1);
    b.extend_from_slice(b"b");
    u32le(&mut b, 1);
    b.extend_from_slice(&1u64.to_le_bytes());
    f32s(&mut b, &[0.75]);
    u32le(&mut b, config_text.len() as u32);
    b.extend_from_slice(config_text.as_bytes());
    b.push(1);
    b.extend_from_slice(&5u64.to_le_bytes());
    b.extend_from_slice(&7u64.to_le_bytes());
    f32s(&mut b, &[0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0]);
    f32s(&mut b, &[-0.5, 0.25]);
    (b, Checkpoint { params, config_text, state: Some(TrainState { epoch: 5, optimizer }) })
}

/// `(format, decoded as expected, re-encoded byte-exact)` per fixture.
pub fn format_round_trips() -> Vec<(&'static str, bool, bool)> {
    let mut out = Vec::new();
    let (b, v) = voxg_fixture();
    let r = read_voxg(&b);
    out.push(("VOXG", r.as_ref().ok() == Some(&v), r.map(|x| write_voxg(&x) == b).unwrap_or(false)));
    let (b, img) = imgf_fixture();
    let r = read_imgf(&b);
    out.push(("IMGF", r.as_ref().ok() == Some(&img), r.map(|x| write_imgf(&x) == b).unwrap_or(false)));
    let (b, v) = binvox_fixture();
    let r = read_binvox(&b);
    out.push(("binvox", r.as_ref().ok() == Some(&v), r.map(|x| write_binvox(&x) == b).unwrap_or(false)));
    let (b, c) = checkpoint_fixture();
    let r = read_checkpoint(&b, AdamWConfig::default());
    out.push(("checkpoint", r.as_ref().ok() == Some(&c), r.map(|x| write_checkpoint(&x) == b).unwrap_or(false)));
    out
}
