//! Model checkpoints.
//!
//! Layout, all little-endian: `GCDM`, u32 version, u32 flags (bit 0 ReLU on
//! the encoder output, bit 1 frozen encoder), u64 encoder layer count, u64
//! projection layer count, one `(u64 in, u64 out)` pair per layer, u64
//! class count, u64 feature dim, then every parameter as f64 in
//! declaration order.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Linear, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"GCDM";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = c.relu_output as u32 | (c.freeze_encoder_except_last as u32) << 1;
    out.extend_from_slice(&flags.to_le_bytes());
    let mut put = |v: usize| out.extend_from_slice(&(v as u64).to_le_bytes());
    put(model.encoder.len());
    put(model.projection.len());
    for l in model.encoder.iter().chain(&model.projection) {
        put(l.input_dim());
        put(l.output_dim());
    }
    put(c.num_classes);
    put(c.feature_dim);
    for v in model.flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v)
            .ok()
            .filter(|&v| v < 1 << 32)
            .ok_or_else(|| Error::format(self.path, format!("implausible size {v}")))
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { path, bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let flags = r.u32()?;
    let (n_enc, n_proj) = (r.usize()?, r.usize()?);
    if n_enc == 0 || n_proj == 0 {
        return Err(Error::format(path, "encoder and projection need at least one layer"));
    }
    let mut dims = Vec::with_capacity(n_enc + n_proj);
    for _ in 0..n_enc + n_proj {
        dims.push((r.usize()?, r.usize()?));
    }
    let (classes, feature_dim) = (r.usize()?, r.usize()?);

    let outs = |ds: &[(usize, usize)]| ds[..ds.len() - 1].iter().map(|d| d.1).collect::<Vec<_>>();
    let (enc, proj) = dims.split_at(n_enc);
    let config = ModelConfig {
        input_dim: enc[0].0,
        encoder_hidden: outs(enc),
        feature_dim: enc[n_enc - 1].1,
        projection_hidden: outs(proj),
        projection_dim: proj[n_proj - 1].1,
        num_classes: classes,
        relu_output: flags & 1 != 0,
        freeze_encoder_except_last: flags & 2 != 0,
    };
    let layers = |ds: &[(usize, usize)]| ds.iter().map(|&(i, o)| Linear::zeros(i, o)).collect();
    let mut model = Model::from_parts(
        config,
        layers(enc),
        layers(proj),
        Tensor::zeros(&[classes, feature_dim]),
    )
    .map_err(|e| Error::format(path, e.to_string()))?;

    let n = model.num_params();
    let values: Vec<f64> = r
        .take(n * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite parameter"));
    }
    model.load_flat(&values)?;
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = ModelConfig::new(5, 4);
        cfg.encoder_hidden = vec![7];
        cfg.relu_output = true;
        let m = Model::new(cfg, &mut seeded(1, 0)).unwrap();
        let back = decode(Path::new("m"), &encode(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_files() {
        let m = Model::new(ModelConfig::new(3, 2), &mut seeded(1, 0)).unwrap();
        let good = encode(&m);
        let p = Path::new("m");
        assert!(decode(p, &good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode(p, &extra).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode(p, &magic).is_err());
        assert!(decode(p, b"GC").is_err());
    }
}
