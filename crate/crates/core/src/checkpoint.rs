//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "IMVCKPT\0"
//! version
//! config length, config text (`key=value` lines)
//! tensor count
//! per tensor: name length, name, rank, dims..., values
//! ```
//!
//! Values are stored little-endian at the precision named by the `dtype`
//! config key, so a same-precision save/load round trip is bit-exact.
//! Optimizer moments are stored as tensors `opt.m.<name>` and `opt.v.<name>`.

use std::io::{Read, Write};
use std::path::Path;

use crate::model::{Model, ModelConfig};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::params::ParamSet;
use crate::{Error, Real, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"IMVCKPT\0";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "opt.m.";
const MOMENT_V: &str = "opt.v.";

/// A loaded checkpoint.
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub optimizer: Option<Optimizer<T>>,
}

fn optimizer_pairs(cfg: &OptimizerConfig, step: u64) -> Vec<(String, String)> {
    [
        ("opt.kind", cfg.kind.to_string()),
        ("opt.lr", format!("{:?}", cfg.lr)),
        ("opt.beta1", format!("{:?}", cfg.beta1)),
        ("opt.beta2", format!("{:?}", cfg.beta2)),
        ("opt.eps", format!("{:?}", cfg.eps)),
        (
            "opt.clip_norm",
            cfg.clip_norm.map_or("none".to_string(), |c| format!("{c:?}")),
        ),
        ("opt.warmup_steps", cfg.warmup_steps.to_string()),
        (
            "opt.decay_steps",
            cfg.decay_steps.map_or("none".to_string(), |d| d.to_string()),
        ),
        ("opt.weight_decay", format!("{:?}", cfg.weight_decay)),
        ("opt.step", step.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn optimizer_from_pairs(pairs: &[(String, String)]) -> Result<Option<(OptimizerConfig, u64)>> {
    let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let Some(kind) = get("opt.kind") else {
        return Ok(None);
    };
    let f = |k: &str| -> Result<f64> {
        get(k)
            .ok_or_else(|| Error::CorruptHeader(format!("missing {k}")))?
            .parse()
            .map_err(|_| Error::CorruptHeader(format!("bad value for {k}")))
    };
    let clip_norm = match get("opt.clip_norm") {
        None | Some("none") => None,
        Some(v) => Some(
            v.parse()
                .map_err(|_| Error::CorruptHeader("bad value for opt.clip_norm".into()))?,
        ),
    };
    let decay_steps = match get("opt.decay_steps") {
        None | Some("none") => None,
        Some(v) => Some(
            v.parse()
                .map_err(|_| Error::CorruptHeader("bad value for opt.decay_steps".into()))?,
        ),
    };
    let warmup_steps = get("opt.warmup_steps")
        .unwrap_or("0")
        .parse()
        .map_err(|_| Error::CorruptHeader("bad value for opt.warmup_steps".into()))?;
    let cfg = OptimizerConfig {
        kind: kind.parse::<OptimizerKind>()?,
        lr: f("opt.lr")?,
        beta1: f("opt.beta1")?,
        beta2: f("opt.beta2")?,
        eps: f("opt.eps")?,
        clip_norm,
        warmup_steps,
        decay_steps,
        weight_decay: f("opt.weight_decay")?,
    };
    let step = get("opt.step")
        .unwrap_or("0")
        .parse()
        .map_err(|_| Error::CorruptHeader("bad value for opt.step".into()))?;
    Ok(Some((cfg, step)))
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit the checkpoint format")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor<T: Real>(w: &mut impl Write, name: &str, t: &Tensor<T>) -> Result<()> {
    put_u32(w, name.len())?;
    w.write_all(name.as_bytes())?;
    put_u32(w, t.rank())?;
    for &d in t.shape() {
        put_u32(w, d)?;
    }
    let mut buf = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    for &x in t.data() {
        if T::NAME == "f32" {
            buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&x.f64().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes model parameters and, when given, optimizer state.
pub fn save_to<T: Real>(w: &mut impl Write, model: &Model<T>, optimizer: Option<&Optimizer<T>>) -> Result<()> {
    let mut pairs = vec![("dtype".to_string(), T::NAME.to_string())];
    pairs.extend(model.config.to_pairs());
    if let Some(opt) = optimizer {
        pairs.extend(optimizer_pairs(&opt.config, opt.steps()));
    }
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(w, text.len())?;
    w.write_all(text.as_bytes())?;

    let moments: Vec<_> = optimizer.map(|o| o.state().collect()).unwrap_or_default();
    put_u32(w, model.params.len() + 2 * moments.len())?;
    for p in model.params.iter() {
        put_tensor(w, &p.name, &p.tensor)?;
    }
    for (name, m, v) in moments {
        put_tensor(w, &format!("{MOMENT_M}{name}"), m)?;
        put_tensor(w, &format!("{MOMENT_V}{name}"), v)?;
    }
    Ok(())
}

pub fn save<T: Real>(path: impl AsRef<Path>, model: &Model<T>, optimizer: Option<&Optimizer<T>>) -> Result<()> {
    let mut buf = Vec::new();
    save_to(&mut buf, model, optimizer)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }
}

/// Parses a checkpoint, converting values to `T` if saved at another
/// precision.
pub fn load_from<T: Real>(r: &mut impl Read) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { bytes: &bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptHeader("not a checkpoint (bad magic)".into()));
    }
    rd.pos = MAGIC.len();
    let version = rd.u32("version")?;
    if version as u32 != VERSION {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            expected: VERSION.to_string(),
        });
    }
    let n = rd.u32("config length")?;
    let text = std::str::from_utf8(rd.take(n, "config")?)
        .map_err(|_| Error::CorruptHeader("config is not UTF-8".into()))?;
    let mut pairs = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::CorruptHeader(format!("bad config line {line:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let dtype = pairs
        .iter()
        .find(|(k, _)| k == "dtype")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::CorruptHeader("missing dtype".into()))?;
    let width = match dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::CorruptHeader(format!("unknown dtype {other:?}"))),
    };
    let config = ModelConfig::from_pairs(&pairs)?;
    let opt_cfg = optimizer_from_pairs(&pairs)?;

    let count = rd.u32("tensor count")?;
    let mut params = ParamSet::new();
    let mut m_state = Vec::new();
    let mut v_state = Vec::new();
    for _ in 0..count {
        let len = rd.u32("tensor name")?;
        let name = std::str::from_utf8(rd.take(len, "tensor name")?)
            .map_err(|_| Error::CorruptHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = rd.u32("tensor rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(rd.u32("tensor shape")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::CorruptHeader(format!("tensor {name:?} is too large")))?;
        let raw = rd.take(bytes_needed, "tensor data")?;
        let data: Vec<T> = if width == 4 {
            raw.chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()
        };
        let tensor = Tensor::new(&shape, data)?;
        if let Some(p) = name.strip_prefix(MOMENT_M) {
            m_state.push((p.to_string(), tensor));
        } else if let Some(p) = name.strip_prefix(MOMENT_V) {
            v_state.push((p.to_string(), tensor));
        } else {
            params.insert(name, tensor)?;
        }
    }
    if rd.pos != bytes.len() {
        return Err(Error::CorruptHeader("trailing bytes after last tensor".into()));
    }
    let model = Model::from_params(config, params)?;
    let optimizer = match opt_cfg {
        None => None,
        Some((cfg, step)) => {
            if m_state.len() != v_state.len() {
                return Err(Error::CorruptHeader("unpaired optimizer moments".into()));
            }
            let mut moments = Vec::with_capacity(m_state.len());
            for ((mn, m), (vn, v)) in m_state.into_iter().zip(v_state) {
                if mn != vn {
                    return Err(Error::CorruptHeader(format!("moment order mismatch at {mn:?}")));
                }
                moments.push((mn, m, v));
            }
            Some(Optimizer::restore(cfg, step, moments))
        }
    };
    Ok(Checkpoint { model, optimizer })
}

/// Precision (`"f32"` or `"f64"`) a checkpoint was saved at, read from the
/// header alone.
pub fn stored_dtype(path: impl AsRef<Path>) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head[..MAGIC.len() + 8])
        .map_err(|_| Error::Truncated("checkpoint header".into()))?;
    if &head[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptHeader("not a checkpoint (bad magic)".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("four bytes"));
    if word(MAGIC.len()) != VERSION {
        return Err(Error::VersionMismatch {
            found: word(MAGIC.len()).to_string(),
            expected: VERSION.to_string(),
        });
    }
    let mut text = vec![0u8; word(MAGIC.len() + 4) as usize];
    f.read_exact(&mut text)
        .map_err(|_| Error::Truncated("checkpoint config".into()))?;
    String::from_utf8_lossy(&text)
        .lines()
        .find_map(|l| l.strip_prefix("dtype=").map(str::to_string))
        .ok_or_else(|| Error::CorruptHeader("missing dtype".into()))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let mut f = std::fs::File::open(path)?;
    load_from(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk(3, 5);
        c.dim = 8;
        c.heads = 2;
        c.ffn_dim = 16;
        c.encoder_layers = 1;
        c.decoder_layers = 1;
        c.predictor = PredictorConfig::new(8);
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::<f32>::new(tiny()).unwrap();
        let mut buf = Vec::new();
        save_to(&mut buf, &model, None).unwrap();
        let back = load_from::<f32>(&mut buf.as_slice()).unwrap();
        assert!(back.optimizer.is_none());
        assert_eq!(back.model.config, model.config);
        for (a, b) in model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        let mut again = Vec::new();
        save_to(&mut again, &back.model, None).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn corrupt_inputs_are_reported() {
        let model = Model::<f64>::new(tiny()).unwrap();
        let mut buf = Vec::new();
        save_to(&mut buf, &model, None).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(load_from::<f64>(&mut bad.as_slice()), Err(Error::CorruptHeader(_))));

        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(load_from::<f64>(&mut bad.as_slice()), Err(Error::VersionMismatch { .. })));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(load_from::<f64>(&mut &cut[..]), Err(Error::Truncated(_))));
    }
}
