//! Binary file formats. All integers and floats are little-endian.
//!
//! * `VOXG`: magic, `u32` side, then `side^3` `f32` values (`x` slowest).
//! * `IMGF`: magic, `u32` height, `u32` width, then `height * width` `f32`.
//! * binvox: the published text header plus `(value, count)` run-length
//!   pairs, `x` slowest, then `z`, then `y` fastest.
//! * checkpoint: see [`Checkpoint`].

use std::fmt;

use umif_core::optim::AdamW;
use umif_core::voxel::VoxelGrid;
use umif_core::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub format: &'static str,
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} parse error at byte {}: {}", self.format, self.offset, self.message)
    }
}

impl std::error::Error for FormatError {}

type Parse<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    format: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(format: &'static str, bytes: &'a [u8]) -> Self {
        Self { format, bytes, pos: 0 }
    }

    fn err<T>(&self, message: impl Into<String>) -> Parse<T> {
        Err(FormatError { format: self.format, offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize) -> Parse<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.err(format!("need {n} bytes, {} left", self.bytes.len() - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8]) -> Parse<()> {
        let at = self.pos;
        if self.take(m.len())? != m {
            self.pos = at;
            return self.err(format!("bad magic, expected {:?}", String::from_utf8_lossy(m)));
        }
        Ok(())
    }

    fn u8(&mut self) -> Parse<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Parse<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Parse<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Parse<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| FormatError {
            format: self.format,
            offset: self.pos,
            message: format!("element count {n} overflows"),
        })?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self) -> Parse<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| FormatError { format: self.format, offset: at, message: "string is not UTF-8".into() })
    }

    fn finish(&self) -> Parse<()> {
        if self.pos != self.bytes.len() {
            return self.err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&u32::try_from(x).expect("fits in u32").to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn write_voxg(v: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * v.values().len());
    out.extend_from_slice(b"VOXG");
    put_u32(&mut out, v.side());
    put_f32s(&mut out, &v.values().iter().map(|&x| x as f32).collect::<Vec<_>>());
    out
}

pub fn read_voxg(bytes: &[u8]) -> Parse<VoxelGrid> {
    let mut r = Reader::new("VOXG", bytes);
    r.magic(b"VOXG")?;
    let side = r.u32()? as usize;
    if side == 0 || side > 1024 {
        return r.err(format!("implausible side {side}"));
    }
    let at = r.pos;
    let vals = r.f32s(side * side * side)?;
    r.finish()?;
    VoxelGrid::new(side, vals.into_iter().map(f64::from).collect())
        .map_err(|e| FormatError { format: "VOXG", offset: at, message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub fn write_imgf(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * img.data.len());
    out.extend_from_slice(b"IMGF");
    put_u32(&mut out, img.height);
    put_u32(&mut out, img.width);
    put_f32s(&mut out, &img.data);
    out
}

pub fn read_imgf(bytes: &[u8]) -> Parse<Image> {
    let mut r = Reader::new("IMGF", bytes);
    r.magic(b"IMGF")?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let data = r.f32s(height * width)?;
    r.finish()?;
    Ok(Image { height, width, data })
}

/// Encodes a binary grid (values > 0.5 count as filled) in binvox format
/// with unit scale and zero translation.
pub fn write_binvox(v: &VoxelGrid) -> Vec<u8> {
    let s = v.side();
    let mut out = format!("#binvox 1\ndim {s} {s} {s}\ntranslate 0 0 0\nscale 1\ndata\n").into_bytes();
    let mut run: Option<(u8, u8)> = None;
    for x in 0..s {
        for z in 0..s {
            for y in 0..s {
                let b = u8::from(v.get(x, y, z) > 0.5);
                run = match run {
                    Some((val, n)) if val == b && n < 255 => Some((val, n + 1)),
                    Some((val, n)) => {
                        out.extend_from_slice(&[val, n]);
                        Some((b, 1))
                    }
                    None => Some((b, 1)),
                };
            }
        }
    }
    if let Some((val, n)) = run {
        out.extend_from_slice(&[val, n]);
    }
    out
}

fn header_line<'a>(r: &mut Reader<'a>) -> Parse<&'a str> {
    let rest = &r.bytes[r.pos..];
    let Some(end) = rest.iter().position(|&b| b == b'\n') else {
        return r.err("unterminated header line");
    };
    let line = std::str::from_utf8(&rest[..end]).or_else(|_| r.err("header is not text"))?;
    r.pos += end + 1;
    Ok(line.trim_end_matches('\r'))
}

/// Decodes a cubic binvox grid into `x, y, z` order.
pub fn read_binvox(bytes: &[u8]) -> Parse<VoxelGrid> {
    let mut r = Reader::new("binvox", bytes);
    if header_line(&mut r)? != "#binvox 1" {
        r.pos = 0;
        return r.err("bad magic, expected \"#binvox 1\"");
    }
    let mut dim = None;
    loop {
        let at = r.pos;
        let line = header_line(&mut r)?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("data") => break,
            Some("dim") => {
                let d: Vec<usize> = parts.map(|p| p.parse().ok()).collect::<Option<_>>().unwrap_or_default();
                if d.len() != 3 || d[0] == 0 {
                    r.pos = at;
                    return r.err(format!("bad dim line {line:?}"));
                }
                if d[0] != d[1] || d[1] != d[2] {
                    r.pos = at;
                    return r.err(format!("dim mismatch: {} {} {} is not a cube", d[0], d[1], d[2]));
                }
                dim = Some(d[0]);
            }
            Some("translate") | Some("scale") => {}
            _ => {
                r.pos = at;
                return r.err(format!("unexpected header line {line:?}"));
            }
        }
    }
    let Some(s) = dim else {
        return r.err("header has no dim line");
    };
    let data = &bytes[r.pos..];
    if data.len() % 2 != 0 {
        r.pos = bytes.len() - 1;
        return r.err("odd number of run-length bytes");
    }
    let total = s * s * s;
    let mut flat = Vec::with_capacity(total);
    for pair in data.chunks_exact(2) {
        let (val, n) = (pair[0], pair[1] as usize);
        if val > 1 {
            return r.err(format!("run value {val} is not 0 or 1"));
        }
        if flat.len() + n > total {
            return r.err(format!("runs exceed {total} voxels"));
        }
        flat.extend(std::iter::repeat(f64::from(val)).take(n));
        r.pos += 2;
    }
    if flat.len() != total {
        return r.err(format!("truncated data: {} of {total} voxels", flat.len()));
    }
    // binvox index = (x * s + z) * s + y
    Ok(VoxelGrid::from_fn(s, |x, y, z| flat[(x * s + z) * s + y]))
}

/// A saved training state.
///
/// Layout: `"UMIF"`, `u32` version, `u32` parameter count; per parameter a
/// length-prefixed UTF-8 name, `u32` rank, `u64` dims and `f32` values; the
/// length-prefixed run configuration text; then a `u8` flag and, if set, the
/// `u64` epoch, `u64` optimizer step and the `f32` first and second moments
/// of every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub config_text: String,
    pub state: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: u64,
    pub optimizer: AdamW<f32>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"UMIF");
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, c.params.len());
    for p in c.params.iter() {
        put_string(&mut out, &p.name);
        put_u32(&mut out, p.tensor.rank());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f32s(&mut out, p.tensor.data());
    }
    put_string(&mut out, &c.config_text);
    match &c.state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.epoch.to_le_bytes());
            out.extend_from_slice(&s.optimizer.step_count.to_le_bytes());
            for (m, v) in s.optimizer.m.iter().zip(&s.optimizer.v) {
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
        }
    }
    out
}

/// Reads a checkpoint; optimizer hyperparameters are not stored and are
/// taken from `adam`.
pub fn read_checkpoint(bytes: &[u8], adam: umif_core::optim::AdamWConfig) -> Parse<Checkpoint> {
    let mut r = Reader::new("checkpoint", bytes);
    r.magic(b"UMIF")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return r.err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut params = ParamStore::<f32>::new();
    for _ in 0..count {
        let at = r.pos;
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError { format: "checkpoint", offset: at, message: e.to_string() })?;
        params
            .register(name, t)
            .map_err(|e| FormatError { format: "checkpoint", offset: at, message: e.to_string() })?;
    }
    let config_text = r.string()?;
    let state = match r.u8()? {
        0 => None,
        1 => {
            let epoch = r.u64()?;
            let mut optimizer = AdamW::new(adam, &params);
            optimizer.step_count = r.u64()?;
            for (i, p) in params.iter().enumerate() {
                optimizer.m[i] = r.f32s(p.tensor.numel())?;
                optimizer.v[i] = r.f32s(p.tensor.numel())?;
            }
            Some(TrainState { epoch, optimizer })
        }
        f => {
            r.pos -= 1;
            return r.err(format!("bad optimizer flag {f}"));
        }
    };
    r.finish()?;
    Ok(Checkpoint { params, config_text, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_encoded_binvox_all_ones() {
        let mut bytes = b"#binvox 1\ndim 2 2 2\ntranslate 0 0 0\nscale 1\ndata\n".to_vec();
        bytes.extend_from_slice(&[1, 8]);
        let v = read_binvox(&bytes).unwrap();
        assert_eq!(v, VoxelGrid::filled(2, 1.0));
        assert_eq!(write_binvox(&v), bytes);
    }

    #[test]
    fn binvox_axis_order() {
        // single filled voxel at binvox index (x=1, z=0, y=1) of a 2^3 grid
        let mut bytes = b"#binvox 1\ndim 2 2 2\ndata\n".to_vec();
        bytes.extend_from_slice(&[0, 5, 1, 1, 0, 2]);
        let v = read_binvox(&bytes).unwrap();
        assert_eq!(v.occupied(), 1);
        assert_eq!(v.get(1, 1, 0), 1.0);
    }

    #[test]
    fn binvox_errors_carry_offsets() {
        let e = read_binvox(b"#binvax 1\n").unwrap_err();
        assert_eq!(e.offset, 0);
        let mut odd = b"#binvox 1\ndim 2 2 2\ndata\n".to_vec();
        let data_at = odd.len();
        odd.extend_from_slice(&[1, 8, 0]);
        let e = read_binvox(&odd).unwrap_err();
        assert!(e.message.contains("odd"), "{e}");
        assert_eq!(e.offset, data_at + 2);
        let mut short = b"#binvox 1\ndim 2 2 2\ndata\n".to_vec();
        short.extend_from_slice(&[1, 7]);
        assert!(read_binvox(&short).unwrap_err().message.contains("truncated"));
        let mut bad_dim = b"#binvox 1\ndim 2 3 2\ndata\n".to_vec();
        bad_dim.extend_from_slice(&[1, 12]);
        let e = read_binvox(&bad_dim).unwrap_err();
        assert_eq!(e.offset, 10);
    }

    #[test]
    fn voxg_and_imgf_reject_truncation() {
        let v = VoxelGrid::filled(2, 1.0);
        let b = write_voxg(&v);
        assert_eq!(b.len(), 8 + 32);
        assert_eq!(read_voxg(&b).unwrap(), v);
        assert_eq!(read_voxg(&b[..b.len() - 1]).unwrap_err().offset, 8);
        let img = Image { height: 2, width: 3, data: vec![0.0, 1.0, 0.5, 0.25, 0.0, 1.0] };
        let b = write_imgf(&img);
        assert_eq!(b.len(), 12 + 24);
        assert_eq!(read_imgf(&b).unwrap(), img);
        assert!(read_imgf(b"IMGX").is_err());
    }
}
