//! Named-tensor checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! "VELC" | version u16 | reserved u16 | n_meta u32 | n_tensors u32
//! n_meta    × { key_len u32 | key utf8 | val_len u32 | val utf8 }
//! n_tensors × { name_len u32 | name utf8 | rank u32 | dims u32×rank | f32 payload }
//! ```
//!
//! Adam moments are stored as tensors `adam.m/<param>` and `adam.v/<param>`
//! with the step counter in metadata key `adam.step`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::adam::{Adam, AdamConfig};
use crate::error::{AdError, Result};
use crate::param::ParamSet;
use crate::real::Real;

const MAGIC: &[u8; 4] = b"VELC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

fn to_f32<T: Real>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f64_lossy() as f32).collect()
}

fn from_f32<T: Real>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ParamSet<T>, adam: Option<&Adam<T>>) -> Self {
        let mut ck = Checkpoint::default();
        for p in params.iter() {
            ck.tensors.push(NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: to_f32(&p.value),
            });
        }
        if let Some(adam) = adam {
            ck.meta.insert("adam.step".into(), adam.step.to_string());
            for (i, p) in params.iter().enumerate() {
                for (prefix, buf) in [("adam.m/", &adam.m[i]), ("adam.v/", &adam.v[i])] {
                    ck.tensors.push(NamedTensor {
                        name: format!("{prefix}{}", p.name),
                        shape: p.shape.clone(),
                        data: to_f32(buf),
                    });
                }
            }
        }
        ck
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Overwrites the values of `params` from same-named tensors.
    pub fn restore_params<T: Real>(&self, params: &mut ParamSet<T>, path: &str) -> Result<()> {
        for p in params.iter_mut() {
            let t = self.tensor(&p.name).ok_or_else(|| AdError::Checkpoint {
                path: path.into(),
                msg: format!("missing parameter `{}`", p.name),
            })?;
            if t.shape != p.shape {
                return Err(AdError::Checkpoint {
                    path: path.into(),
                    msg: format!("`{}` has shape {:?}, model expects {:?}", p.name, t.shape, p.shape),
                });
            }
            p.value = from_f32(&t.data);
        }
        Ok(())
    }

    /// Optimizer state for `params`, if the checkpoint carries one.
    pub fn restore_adam<T: Real>(&self, params: &ParamSet<T>, config: AdamConfig) -> Option<Adam<T>> {
        let step = self.meta.get("adam.step")?.parse().ok()?;
        let mut adam = Adam::for_params(config, params);
        adam.step = step;
        for (i, p) in params.iter().enumerate() {
            adam.m[i] = from_f32(&self.tensor(&format!("adam.m/{}", p.name))?.data);
            adam.v[i] = from_f32(&self.tensor(&format!("adam.v/{}", p.name))?.data);
        }
        Some(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let err = |msg: &str| AdError::Checkpoint {
            path: path.into(),
            msg: msg.into(),
        };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| err("truncated header"))? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = r.u16().ok_or_else(|| err("truncated header"))?;
        if version != VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        r.u16().ok_or_else(|| err("truncated header"))?;
        let n_meta = r.u32().ok_or_else(|| err("truncated header"))?;
        let n_tensors = r.u32().ok_or_else(|| err("truncated header"))?;
        let mut ck = Checkpoint::default();
        for _ in 0..n_meta {
            let k = r.string().ok_or_else(|| err("truncated metadata"))?;
            let v = r.string().ok_or_else(|| err("truncated metadata"))?;
            ck.meta.insert(k, v);
        }
        for _ in 0..n_tensors {
            let name = r.string().ok_or_else(|| err("truncated tensor record"))?;
            let rank = r.u32().ok_or_else(|| err("truncated tensor record"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("truncated tensor record"))?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4).ok_or_else(|| err(&format!("truncated payload for `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            ck.tensors.push(NamedTensor { name, shape, data });
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| AdError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| AdError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}
