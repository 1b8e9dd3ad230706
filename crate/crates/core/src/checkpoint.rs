//! Versioned binary checkpoints: named little-endian f64 tensors plus
//! optimizer moments, RNG state, and a config echo.
//!
//! Layout (all little-endian): magic `FGCK`, version u32, kind u32,
//! config-echo string, model dims (9 x u64), rng state u64, step u64,
//! optimizer step u64, then three tensor tables (parameters, first moments,
//! second moments; the moment tables reuse the parameter names).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"FGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint file holds, independent of which stage produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    /// 1 = stage-1 model, 2 = fine-tune parameters.
    pub kind: u32,
    pub config_echo: String,
    pub model_cfg: ModelConfig,
    pub rng_state: u64,
    pub step: u64,
    pub opt_t: u64,
    /// Stage-specific float hyperparameters, fixed order per kind.
    pub hyper_f: Vec<f64>,
    /// Stage-specific integer hyperparameters, fixed order per kind.
    pub hyper_u: Vec<u64>,
    pub tensors: Vec<(String, Tensor)>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

pub const KIND_STAGE1: u32 = 1;
pub const KIND_FINETUNE: u32 = 2;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, data: &[f64]) {
    put_u64(out, data.len() as u64);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Malformed {
                path: self.path.to_path_buf(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed {
            path: self.path.to_path_buf(),
            msg: "invalid UTF-8 in string field".into(),
        })
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, data.kind);
    put_string(&mut out, &data.config_echo);
    for v in [
        data.model_cfg.d,
        data.model_cfg.n_phi,
        data.model_cfg.n_c,
        data.model_cfg.n_g,
        data.model_cfg.heads,
        data.model_cfg.attn_layers,
        data.model_cfg.mamba_layers,
        data.model_cfg.state_width,
        data.model_cfg.k,
    ] {
        put_u64(&mut out, v as u64);
    }
    put_u64(&mut out, data.rng_state);
    put_u64(&mut out, data.step);
    put_u64(&mut out, data.opt_t);
    put_floats(&mut out, &data.hyper_f);
    put_u64(&mut out, data.hyper_u.len() as u64);
    for &v in &data.hyper_u {
        put_u64(&mut out, v);
    }

    put_u64(&mut out, data.tensors.len() as u64);
    for (name, t) in &data.tensors {
        put_string(&mut out, name);
        put_u64(&mut out, t.rank() as u64);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_floats(&mut out, t.data());
    }
    for table in [&data.m, &data.v] {
        put_u64(&mut out, table.len() as u64);
        for buf in table {
            put_floats(&mut out, buf);
        }
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut buf = Vec::new();
    let mut f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: "bad magic".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let kind = r.u32()?;
    let config_echo = r.string()?;
    let dims: Vec<usize> = (0..9)
        .map(|_| r.u64().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let model_cfg = ModelConfig {
        d: dims[0],
        n_phi: dims[1],
        n_c: dims[2],
        n_g: dims[3],
        heads: dims[4],
        attn_layers: dims[5],
        mamba_layers: dims[6],
        state_width: dims[7],
        k: dims[8],
    };
    let rng_state = r.u64()?;
    let step = r.u64()?;
    let opt_t = r.u64()?;
    let hyper_f = r.floats()?;
    let n_hyper_u = r.u64()? as usize;
    let hyper_u: Vec<u64> = (0..n_hyper_u).map(|_| r.u64()).collect::<Result<_>>()?;

    let n_tensors = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u64()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let data = r.floats()?;
        let tensor = Tensor::from_vec(shape, data).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("tensor {name}: {e}"),
        })?;
        tensors.push((name, tensor.with_grad()));
    }
    let mut tables = Vec::new();
    for _ in 0..2 {
        let n = r.u64()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            table.push(r.floats()?);
        }
        tables.push(table);
    }
    let v = tables.pop().unwrap();
    let m = tables.pop().unwrap();
    if r.pos != buf.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(CheckpointData {
        kind,
        config_echo,
        model_cfg,
        rng_state,
        step,
        opt_t,
        hyper_f,
        hyper_u,
        tensors,
        m,
        v,
    })
}

/// Overwrite a parameter struct's tensors from a named table, by exact name
/// and shape. Errors on any mismatch.
pub fn restore_named<'a>(
    tensors: &[(String, Tensor)],
    visit: impl FnOnce(&mut dyn FnMut(String, &mut Tensor)),
    path: &'a Path,
) -> Result<()> {
    let mut result = Ok(());
    let mut count = 0usize;
    visit(&mut |name, t| {
        if result.is_err() {
            return;
        }
        match tensors.iter().find(|(n, _)| *n == name) {
            Some((_, stored)) if stored.shape() == t.shape() => {
                t.data_mut().copy_from_slice(stored.data());
                count += 1;
            }
            Some((_, stored)) => {
                result = Err(Error::Malformed {
                    path: path.to_path_buf(),
                    msg: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                });
            }
            None => {
                result = Err(Error::Malformed {
                    path: path.to_path_buf(),
                    msg: format!("missing tensor {name}"),
                });
            }
        }
    });
    result?;
    if count != tensors.len() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("{} stored tensors but {count} expected", tensors.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::rng::Rng;

    fn sample_data() -> CheckpointData {
        let cfg = ModelConfig {
            d: 2,
            n_phi: 4,
            n_c: 4,
            n_g: 8,
            heads: 2,
            attn_layers: 1,
            mamba_layers: 1,
            state_width: 4,
            k: 2,
        };
        let mut rng = Rng::new(3);
        let params = ModelParams::init(&mut rng, &cfg);
        let tensors: Vec<(String, Tensor)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let m: Vec<Vec<f64>> = tensors.iter().map(|(_, t)| vec![0.25; t.numel()]).collect();
        let v: Vec<Vec<f64>> = tensors.iter().map(|(_, t)| vec![0.5; t.numel()]).collect();
        CheckpointData {
            kind: KIND_STAGE1,
            config_echo: "train.lr = 0.001\n".into(),
            model_cfg: cfg,
            rng_state: 42,
            step: 17,
            opt_t: 17,
            hyper_f: vec![0.001, 0.9],
            hyper_u: vec![100, 1, 7],
            tensors,
            m,
            v,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let data = sample_data();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &data).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.kind, data.kind);
        assert_eq!(back.config_echo, data.config_echo);
        assert_eq!(back.model_cfg, data.model_cfg);
        assert_eq!(back.rng_state, 42);
        assert_eq!(back.step, 17);
        assert_eq!(back.m, data.m);
        assert_eq!(back.v, data.v);
        assert_eq!(back.hyper_f, data.hyper_f);
        assert_eq!(back.hyper_u, data.hyper_u);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&data.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u8> = t1.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let b2: Vec<u8> = t2.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            assert_eq!(b1, b2, "tensor {n1} bytes differ");
        }
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let data = sample_data();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &data).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn corrupt_file_is_malformed() {
        let data = sample_data();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &data).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Malformed { .. })
        ));
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Malformed { .. })
        ));
    }
}
