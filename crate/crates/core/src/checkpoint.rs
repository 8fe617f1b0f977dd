//! Versioned binary checkpoint.
//!
//! ```text
//! magic      8 bytes  "PMILMCKP"
//! version    u32 LE
//! header_len u32 LE, then header_len bytes of UTF-8 `key = value` lines:
//!            format_version, vocab_hash, epoch, optimizer_step, best_valid_ppl,
//!            a `[config]` line, then the full config
//! n_tensors  u32 LE
//! tensor     u32 name_len, name, u32 ndim, ndim × u64 dims, f32 LE data
//! ```
//!
//! Parameter tensors come first in `ModelParams::layout` order, followed by
//! `adam.m.<name>` / `adam.v.<name>` when the run uses Adam. Every shape is
//! checked against the config on load.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::config::{Config, Optimizer};
use crate::model::{LstmLayer, ModelParams};
use crate::optim::AdamState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PMILMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid_ppl: Option<f64>,
    pub params: ModelParams,
    pub adam: Option<AdamState>,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { name, dims, data })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        writeln!(header, "format_version = {FORMAT_VERSION}").unwrap();
        writeln!(header, "vocab_hash = {}", self.vocab_hash).unwrap();
        writeln!(header, "epoch = {}", self.epoch).unwrap();
        writeln!(
            header,
            "optimizer_step = {}",
            self.adam.as_ref().map_or(0, |a| a.step)
        )
        .unwrap();
        match self.best_valid_ppl {
            Some(p) => writeln!(header, "best_valid_ppl = {p}").unwrap(),
            None => writeln!(header, "best_valid_ppl = none").unwrap(),
        }
        header.push_str("[config]\n");
        header.push_str(&self.config.to_kv_string());

        let layout = ModelParams::layout(&self.params.config);
        let tensors = self.params.tensors();
        let n_tensors = layout.len() * if self.adam.is_some() { 3 } else { 1 };

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, n_tensors as u32);
        for ((name, dims), data) in layout.iter().zip(&tensors) {
            put_tensor(&mut out, name, dims, data);
        }
        if let Some(adam) = &self.adam {
            for ((name, dims), m) in layout.iter().zip(&adam.m) {
                put_tensor(&mut out, &format!("adam.m.{name}"), dims, m);
            }
            for ((name, dims), v) in layout.iter().zip(&adam.v) {
                put_tensor(&mut out, &format!("adam.v.{name}"), dims, v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let (meta, config_text) = header
            .split_once("[config]\n")
            .ok_or_else(|| Error::Checkpoint("header has no [config] section".into()))?;

        let mut vocab_hash = None;
        let mut epoch = None;
        let mut step = 0u64;
        let mut best = None;
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            let bad = || Error::Checkpoint(format!("bad value for {k}: {v:?}"));
            match k {
                "format_version" => {}
                "vocab_hash" => vocab_hash = Some(v.to_string()),
                "epoch" => epoch = Some(v.parse().map_err(|_| bad())?),
                "optimizer_step" => step = v.parse().map_err(|_| bad())?,
                "best_valid_ppl" => {
                    best = if v == "none" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| bad())?)
                    }
                }
                _ => return Err(Error::Checkpoint(format!("unknown header key {k:?}"))),
            }
        }
        let config = Config::parse(config_text)?;
        config.validate()?;

        let n_tensors = r.u32()? as usize;
        let tensors = (0..n_tensors)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let layout = ModelParams::layout(&config.model);
        let with_adam = config.train.optimizer == Optimizer::Adam && n_tensors == 3 * layout.len();
        if n_tensors != layout.len() && !with_adam {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {n_tensors}",
                layout.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut take_group = |prefix: &str| -> Result<Vec<Vec<f64>>> {
            layout
                .iter()
                .map(|(name, dims)| {
                    let t = it.next().expect("count checked");
                    let expected_name = format!("{prefix}{name}");
                    if t.name != expected_name || &t.dims != dims {
                        return Err(Error::ShapeMismatch {
                            name: format!("{} (expected {expected_name})", t.name),
                            expected: dims.clone(),
                            found: t.dims,
                        });
                    }
                    Ok(t.data.into_iter().map(f64::from).collect())
                })
                .collect()
        };
        let values = take_group("")?;
        let adam = if with_adam {
            Some(AdamState {
                step,
                m: take_group("adam.m.")?,
                v: take_group("adam.v.")?,
            })
        } else {
            None
        };

        Ok(Checkpoint {
            params: params_from_tensors(&config, values),
            vocab_hash: vocab_hash.ok_or_else(|| Error::Checkpoint("missing vocab_hash".into()))?,
            epoch: epoch.ok_or_else(|| Error::Checkpoint("missing epoch".into()))?,
            best_valid_ppl: best,
            adam,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                found: vocab_hash.to_string(),
            });
        }
        Ok(())
    }
}

fn params_from_tensors(config: &Config, values: Vec<Vec<f64>>) -> ModelParams {
    let m = &config.model;
    let (v, d, h) = (m.vocab_size, m.embed_dim, m.hidden);
    let mut it = values.into_iter();
    let mut matrix = |rows, cols| Array2::from_shape_vec((rows, cols), it.next().unwrap()).unwrap();
    let input_embed = matrix(v, d);
    let mut layers = Vec::with_capacity(m.layers);
    for l in 0..m.layers {
        let input = if l == 0 { d } else { h };
        let weights = matrix(input + h, 4 * h);
        let bias = matrix(1, 4 * h).into_shape_with_order(4 * h).unwrap();
        layers.push(LstmLayer { weights, bias });
    }
    let output_embed = matrix(v, h);
    let nce_bias: Option<Array1<f64>> = it.next().map(Array1::from);
    ModelParams {
        config: m.clone(),
        input_embed,
        layers,
        output_embed,
        nce_bias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(mode: Mode, opt: Optimizer) -> Config {
        let mut c = Config::default();
        c.model.mode = mode;
        c.model.vocab_size = 7;
        c.model.embed_dim = 3;
        c.model.hidden = 3;
        c.model.layers = 2;
        c.train.optimizer = opt;
        c
    }

    fn checkpoint(mode: Mode, opt: Optimizer) -> Checkpoint {
        let cfg = config(mode, opt);
        let params = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let adam = (opt == Optimizer::Adam).then(|| {
            let mut a = AdamState::new(&params);
            a.step = 17;
            a.m[1][2] = 0.5;
            a.v[0][0] = 0.25;
            a
        });
        Checkpoint {
            config: cfg,
            vocab_hash: "abc123".into(),
            epoch: 4,
            best_valid_ppl: Some(123.5),
            params,
            adam,
        }
    }

    fn round_f32(p: &ModelParams) -> ModelParams {
        let mut q = p.clone();
        for t in q.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        q
    }

    #[test]
    fn round_trip_all_variants() {
        for mode in [Mode::Pmi, Mode::Nce] {
            for opt in [Optimizer::Sgd, Optimizer::Adam] {
                let ck = checkpoint(mode, opt);
                let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
                assert_eq!(back.config, ck.config);
                assert_eq!(back.epoch, 4);
                assert_eq!(back.best_valid_ppl, Some(123.5));
                assert_eq!(back.params, round_f32(&ck.params));
                assert_eq!(back.adam.is_some(), opt == Optimizer::Adam);
                if let Some(a) = back.adam {
                    assert_eq!(a.step, 17);
                    assert_eq!(a.m[1][2], 0.5);
                }
                // serialization of the reloaded checkpoint is a fixed point
                let again = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
                assert_eq!(again.to_bytes(), ck.to_bytes());
            }
        }
    }

    #[test]
    fn header_is_readable() {
        let bytes = checkpoint(Mode::Nce, Optimizer::Sgd).to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        assert!(header.contains("vocab_hash = abc123"));
        assert!(header.contains("mode = nce"));
        assert!(header.starts_with("format_version = 1\n"));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ck = checkpoint(Mode::Pmi, Optimizer::Sgd);
        let mut wrong = ck.clone();
        wrong.config.model.hidden = 4;
        wrong.config.model.embed_dim = 4;
        // header claims hidden 4 while tensors are hidden 3
        let err = Checkpoint::from_bytes(&wrong.to_bytes()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = checkpoint(Mode::Pmi, Optimizer::Sgd).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn vocab_check() {
        let ck = checkpoint(Mode::Pmi, Optimizer::Sgd);
        ck.check_vocab("abc123").unwrap();
        assert!(matches!(ck.check_vocab("zzz"), Err(Error::VocabMismatch { .. })));
    }
}
