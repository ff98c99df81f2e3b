//! Versioned binary model file.
//!
//! ```text
//! magic "DBLK" | version u32 | objective u32 | layer count u32
//! per layer:  kh u32 | kw u32 | cin u32 | cout u32 | skip i32 (-1 = none) | flags u32 | lr_mult f64
//! per layer:  weights (cout, cin, kh, kw) f32 | biases (cout) f32
//! ```
//!
//! Everything is little-endian. Flag bit 0 marks a ReLU after the layer.

use std::path::Path;

use crate::arch::{LayerSpec, Network, NetworkSpec, Objective};
use crate::error::{Error, Result};
use crate::nn::{ConvParams, Tensor};

pub const MAGIC: [u8; 4] = *b"DBLK";
pub const VERSION: u32 = 1;
const FLAG_RELU: u32 = 1;

pub fn encode_model(net: &Network<f32>) -> Vec<u8> {
    let spec = net.spec();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, spec.objective.code(), spec.layers.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, l) in spec.layers.iter().enumerate() {
        for v in [l.kernel.0, l.kernel.1, spec.in_channels(i), l.out_channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let skip = l.skip_from.map_or(-1, |s| s as i32);
        out.extend_from_slice(&skip.to_le_bytes());
        let flags = if l.has_relu { FLAG_RELU } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&l.lr_mult.to_le_bytes());
    }
    for p in net.layers() {
        for v in p.weights.data().iter().chain(&p.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::InvalidModel(format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length is N"))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(what)?))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(what)?))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Network<f32>> {
    let bad = |m: String| Error::InvalidModel(m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take::<4>("magic")? != MAGIC {
        return Err(bad("bad magic, not a model file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported model version {version}")));
    }
    let code = r.u32("objective")?;
    let objective = Objective::from_code(code).ok_or_else(|| bad(format!("unknown objective code {code}")))?;
    let n = r.u32("layer count")? as usize;
    if n == 0 || n > 1024 {
        return Err(bad(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    let mut cins = Vec::with_capacity(n);
    for i in 0..n {
        let kh = r.u32("kernel height")? as usize;
        let kw = r.u32("kernel width")? as usize;
        let cin = r.u32("input channels")? as usize;
        let cout = r.u32("output channels")? as usize;
        let skip = r.i32("skip source")?;
        let flags = r.u32("flags")?;
        let lr_mult = r.f64("lr multiplier")?;
        if skip < -1 || flags & !FLAG_RELU != 0 || !lr_mult.is_finite() {
            return Err(bad(format!("layer {}: malformed header", i + 1)));
        }
        layers.push(LayerSpec {
            kernel: (kh, kw),
            out_channels: cout,
            skip_from: (skip >= 0).then_some(skip as usize),
            has_relu: flags & FLAG_RELU != 0,
            lr_mult,
        });
        cins.push(cin);
    }
    let spec = NetworkSpec {
        layers,
        objective,
        input_channels: cins[0],
    };
    spec.validate().map_err(|e| bad(e.to_string()))?;
    for (i, &cin) in cins.iter().enumerate() {
        if spec.in_channels(i) != cin {
            return Err(bad(format!("layer {}: channel counts do not chain", i + 1)));
        }
    }
    let expected = spec.parameter_count() * 4;
    if bytes.len() - r.pos != expected {
        return Err(bad(format!(
            "body holds {} bytes, the header implies {expected}",
            bytes.len() - r.pos
        )));
    }
    let mut params = Vec::with_capacity(n);
    for (i, l) in spec.layers.iter().enumerate() {
        let shape = [l.out_channels, cins[i], l.kernel.0, l.kernel.1];
        let w = (0..shape.iter().product::<usize>())
            .map(|_| r.f32("weights"))
            .collect::<Result<Vec<_>>>()?;
        let b = (0..l.out_channels).map(|_| r.f32("biases")).collect::<Result<Vec<_>>>()?;
        let mut p = ConvParams::from_parts(Tensor::from_vec(shape, w)?, b)?;
        p.lr_mult = l.lr_mult;
        params.push(p);
    }
    Network::from_parts(spec, params).map_err(|e| bad(e.to_string()))
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn save_model(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_model(net)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
