//! FPCM v1 model files.
//!
//! ```text
//! "FPCM" | u32 version=1 | str oracle_version | u8 role | f64 adam_epsilon
//! u32 blocks | per block: u32 in, u32 out, u8 activation, f64 activation_param,
//!                         u8 batch_norm, f64 bn_momentum, f64 bn_epsilon
//! parameters: per block W (in·out, row-major), b, then γ, β if batch norm
//! running statistics: per batch-norm block mean, var
//! u32 extras | per extra: str name, u32 len, len × f64
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8; all numbers are
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::ADAM_EPSILON;
use super::matrix::Matrix;
use super::network::{Activation, BatchNormLayer, Block, DenseLayer, Network};
use crate::checksum::fnv1a64;
use crate::error::{Error, Result};

pub const FPCM_MAGIC: &[u8; 4] = b"FPCM";
pub const FPCM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    Generic = 0,
    Generator = 1,
    Critic = 2,
    Mlp = 3,
    Cnn = 4,
}

impl ModelRole {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => ModelRole::Generic,
            1 => ModelRole::Generator,
            2 => ModelRole::Critic,
            3 => ModelRole::Mlp,
            4 => ModelRole::Cnn,
            _ => return Err(Error::format("FPCM", format!("unknown role {v}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Generic => "generic",
            ModelRole::Generator => "generator",
            ModelRole::Critic => "critic",
            ModelRole::Mlp => "mlp",
            ModelRole::Cnn => "cnn",
        }
    }
}

/// A network plus the named side tensors a model needs at inference
/// (normalisation statistics, convolution kernels, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub role: ModelRole,
    pub oracle_version: String,
    pub adam_epsilon: f64,
    pub network: Network,
    pub extras: Vec<(String, Vec<f64>)>,
}

impl ModelFile {
    pub fn new(role: ModelRole, oracle_version: &str, network: Network) -> Self {
        ModelFile {
            role,
            oracle_version: oracle_version.to_string(),
            adam_epsilon: ADAM_EPSILON,
            network,
            extras: Vec::new(),
        }
    }

    pub fn with_extra(mut self, name: &str, values: Vec<f64>) -> Self {
        self.extras.push((name.to_string(), values));
        self
    }

    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extras
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(FPCM_MAGIC);
        put_u32(&mut b, FPCM_VERSION);
        put_str(&mut b, &self.oracle_version);
        b.push(self.role as u8);
        put_f64(&mut b, self.adam_epsilon);
        let net = &self.network;
        put_u32(&mut b, net.blocks.len() as u32);
        for blk in &net.blocks {
            put_u32(&mut b, blk.dense.in_dim() as u32);
            put_u32(&mut b, blk.dense.out_dim() as u32);
            let (code, param) = blk.activation.code();
            b.push(code);
            put_f64(&mut b, param);
            b.push(u8::from(blk.norm.is_some()));
            let (m, e) = blk.norm.as_ref().map_or((0.0, 0.0), |n| (n.momentum, n.epsilon));
            put_f64(&mut b, m);
            put_f64(&mut b, e);
        }
        for blk in &net.blocks {
            put_f64s(&mut b, blk.dense.weights.data());
            put_f64s(&mut b, &blk.dense.bias);
            if let Some(n) = &blk.norm {
                put_f64s(&mut b, &n.gamma);
                put_f64s(&mut b, &n.beta);
            }
        }
        for n in net.blocks.iter().filter_map(|blk| blk.norm.as_ref()) {
            put_f64s(&mut b, &n.running_mean);
            put_f64s(&mut b, &n.running_var);
        }
        put_u32(&mut b, self.extras.len() as u32);
        for (name, values) in &self.extras {
            put_str(&mut b, name);
            put_u32(&mut b, values.len() as u32);
            put_f64s(&mut b, values);
        }
        let sum = fnv1a64(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::format("FPCM", "file too short"));
        }
        let (payload, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a64(payload) != stored {
            return Err(Error::format("FPCM", "checksum mismatch"));
        }
        let mut r = Cursor { buf: payload, pos: 0 };
        if r.take(4)? != FPCM_MAGIC {
            return Err(Error::format("FPCM", "bad magic"));
        }
        let version = r.u32()?;
        if version != FPCM_VERSION {
            return Err(Error::format("FPCM", format!("unsupported version {version}")));
        }
        let oracle_version = r.string()?;
        let role = ModelRole::from_u8(r.u8()?)?;
        let adam_epsilon = r.f64()?;
        let n_blocks = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let (i, o) = (r.u32()? as usize, r.u32()? as usize);
            let act = Activation::from_code(r.u8()?, r.f64()?)?;
            let bn = r.u8()? != 0;
            let (m, e) = (r.f64()?, r.f64()?);
            shapes.push((i, o, act, bn, m, e));
        }
        for w in shapes.windows(2) {
            if w[0].1 != w[1].0 {
                return Err(Error::Architecture("block widths do not chain".into()));
            }
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for &(i, o, activation, bn, momentum, epsilon) in &shapes {
            let weights = Matrix::from_vec(i, o, r.f64s(i * o)?)?;
            let bias = r.f64s(o)?;
            let norm = if bn {
                let mut n = BatchNormLayer::new(o);
                n.gamma = r.f64s(o)?;
                n.beta = r.f64s(o)?;
                n.momentum = momentum;
                n.epsilon = epsilon;
                Some(n)
            } else {
                None
            };
            blocks.push(Block {
                dense: DenseLayer { weights, bias },
                norm,
                activation,
            });
        }
        for n in blocks.iter_mut().filter_map(|b| b.norm.as_mut()) {
            n.running_mean = r.f64s(n.dim())?;
            n.running_var = r.f64s(n.dim())?;
        }
        let n_extras = r.u32()? as usize;
        let mut extras = Vec::with_capacity(n_extras);
        for _ in 0..n_extras {
            let name = r.string()?;
            let len = r.u32()? as usize;
            extras.push((name, r.f64s(len)?));
        }
        if r.pos != payload.len() {
            return Err(Error::format("FPCM", "trailing bytes before checksum"));
        }
        if blocks.is_empty() {
            return Err(Error::Architecture("model has no blocks".into()));
        }
        Ok(ModelFile {
            role,
            oracle_version,
            adam_epsilon,
            network: Network { blocks },
            extras,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(b: &mut Vec<u8>, v: f64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, vs: &[f64]) {
    vs.iter().for_each(|&v| put_f64(b, v));
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("FPCM", "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("FPCM", "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("FPCM", "string is not utf-8"))
    }
}
