//! Binary model checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic       4 bytes  "FODE"
//! version     u8       1
//! kind        u8       0 = fode, 1 = node
//! window_len  u32
//! channels    u32
//! hidden      u32
//! use_filter  u8
//! k_init      u8       0 zeros, 1 ones, 2 uniform, 3 xavier
//! time_input  u8
//! classes     u32      0 = no classification head
//! normalized  u8       if 1: channels × f64 means, then channels × f64 stds
//! n_tensors   u32
//! per tensor: name_len u16, name (utf-8), rows u32, cols u32, rows·cols × f64
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::autodiff::MlpParams;
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;
use crate::model::{ClassifierHead, FieldKind, FilterInit, FodeModel, ModelConfig, Normalizer};

pub const MAGIC: &[u8; 4] = b"FODE";
pub const VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> FodeError {
    FodeError::Checkpoint(msg.into())
}

pub fn to_bytes(model: &FodeModel) -> Result<Vec<u8>> {
    model.validate()?;
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match cfg.kind {
        FieldKind::Fode => 0,
        FieldKind::Node => 1,
    });
    for v in [cfg.window_len, cfg.channels, cfg.hidden] {
        out.extend_from_slice(&u32::try_from(v).map_err(|_| bad("dimension overflow"))?.to_le_bytes());
    }
    out.push(u8::from(cfg.use_filter));
    out.push(cfg.k_init.code());
    out.push(u8::from(cfg.time_input));
    out.extend_from_slice(&(cfg.classes.unwrap_or(0) as u32).to_le_bytes());
    match &model.normalizer {
        None => out.push(0),
        Some(n) => {
            out.push(1);
            for v in n.mean.iter().chain(&n.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let names = model.param_names();
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(params) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(bad(format!("invalid {what} flag {v}"))),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<FodeModel> {
    let mut r = Reader(Cursor::new(bytes));
    if &r.bytes::<4>()? != MAGIC {
        return Err(bad("not a model checkpoint (bad magic)"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = match r.u8()? {
        0 => FieldKind::Fode,
        1 => FieldKind::Node,
        v => return Err(bad(format!("unknown model kind {v}"))),
    };
    let (window_len, channels, hidden) = (r.u32()?, r.u32()?, r.u32()?);
    let use_filter = r.flag("use_filter")?;
    let code = r.u8()?;
    let k_init = FilterInit::from_code(code).ok_or_else(|| bad(format!("unknown filter scheme {code}")))?;
    let time_input = r.flag("time_input")?;
    let classes = match r.u32()? {
        0 => None,
        k => Some(k),
    };
    let config = ModelConfig {
        kind,
        window_len,
        channels,
        hidden,
        use_filter,
        k_init,
        time_input,
        classes,
    };
    config.validate()?;
    if window_len.saturating_mul(channels) > 1 << 24 {
        return Err(bad("implausible dimensions"));
    }
    let normalizer = if r.flag("normalized")? {
        let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Some(Normalizer { mean, std })
    } else {
        None
    };

    let count = r.u32()?;
    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let mut name = vec![0u8; len];
        r.0.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
        if n.saturating_mul(8) > bytes.len() {
            return Err(bad(format!("tensor {name} exceeds file size")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if (r.0.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes after tensors"));
    }
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")));
    let mlp = MlpParams {
        w1: take("mlp.w1")?,
        b1: take("mlp.b1")?,
        w2: take("mlp.w2")?,
        b2: take("mlp.b2")?,
        w3: take("mlp.w3")?,
        b3: take("mlp.b3")?,
    };
    let filter_k = take("filter_k")?;
    let head = match classes {
        Some(_) => Some(ClassifierHead {
            w: take("head.w")?,
            b: take("head.b")?,
        }),
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    let model = FodeModel {
        config,
        mlp,
        filter_k,
        head,
        normalizer,
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &FodeModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FodeModel> {
    from_bytes(&fs::read(path)?)
}
