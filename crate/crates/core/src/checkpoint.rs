//! Versioned little-endian checkpoint format.
//!
//! ```text
//! "MNETCKPT"  u32 version=1
//! config      7 × u32 (scales, channels, res_blocks, latent_channels, mixtures, bins, kernel)
//! quantizer   f64 temperature, bins × f64 centers
//! metadata    u32 epoch, f64 loss, u64 seed
//! params      u32 count, then per parameter: u16 name length, name, u32 rows, u32 cols, rows·cols × f64
//! digest      8 bytes (must equal Model::digest of the decoded model)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, TrainingMetadata};
use crate::nn::ModelConfig;
use crate::quantizer::QuantizerConfig;

const MAGIC: &[u8; 8] = b"MNETCKPT";
const VERSION: u32 = 1;

pub(crate) fn config_bytes(cfg: &ModelConfig, q: &QuantizerConfig) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [
        cfg.num_scales,
        cfg.channels,
        cfg.res_blocks,
        cfg.latent_channels,
        cfg.mixtures,
        cfg.num_bins,
        cfg.kernel_size,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&q.temperature.to_le_bytes());
    for c in &q.centers {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_bytes(&model.config, &model.quantizer));
    out.extend_from_slice(&model.metadata.epoch.to_le_bytes());
    out.extend_from_slice(&model.metadata.loss.to_le_bytes());
    out.extend_from_slice(&model.metadata.seed.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&model.digest());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::InvalidCheckpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::InvalidCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::InvalidCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut vals = [0usize; 7];
    for v in &mut vals {
        *v = r.u32()? as usize;
    }
    let config = ModelConfig {
        num_scales: vals[0],
        channels: vals[1],
        res_blocks: vals[2],
        latent_channels: vals[3],
        mixtures: vals[4],
        num_bins: vals[5],
        kernel_size: vals[6],
    };
    config.validate()?;
    let temperature = r.f64()?;
    let centers = (0..config.num_bins)
        .map(|_| r.f64())
        .collect::<Result<Vec<_>>>()?;
    let quantizer = QuantizerConfig {
        num_bins: config.num_bins,
        centers,
        temperature,
    };
    quantizer.validate()?;
    let metadata = TrainingMetadata {
        epoch: r.u32()?,
        loss: r.f64()?,
        seed: r.u64()?,
    };
    let mut model = Model::random(config, 0)?;
    model.quantizer = quantizer;
    model.metadata = metadata;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::InvalidCheckpoint(format!(
            "{count} parameters, architecture needs {}",
            model.params.len()
        )));
    }
    for p in model.params.iter_mut() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::InvalidCheckpoint("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(Error::InvalidCheckpoint(format!(
                "expected `{}`, found `{name}`",
                p.name
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != p.value.shape() {
            return Err(Error::InvalidCheckpoint(format!(
                "`{name}` has shape {rows}x{cols}"
            )));
        }
        let data = (0..rows * cols)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        p.value = Matrix::from_vec(rows, cols, data);
    }
    let stored = r.take(8)?;
    if r.pos != bytes.len() {
        return Err(Error::InvalidCheckpoint("trailing bytes".into()));
    }
    if stored != model.digest() {
        return Err(Error::InvalidCheckpoint(
            "digest does not match contents".into(),
        ));
    }
    model.network.check(&model.params)?;
    Ok(model)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            channels: 3,
            res_blocks: 1,
            mixtures: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_deterministic() {
        let mut m = Model::random(cfg(), 9).unwrap();
        m.metadata.epoch = 4;
        m.metadata.loss = 7.25;
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.digest(), m.digest());
        assert_eq!(back.metadata, m.metadata);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corruption_detected() {
        let m = Model::random(cfg(), 9).unwrap();
        let mut bytes = to_bytes(&m);
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::InvalidCheckpoint(_))
        ));
        assert!(from_bytes(&bytes[..n - 1]).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::random(cfg(), 2).unwrap();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap().digest(), m.digest());
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }
}
