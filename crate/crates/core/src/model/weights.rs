//! Seeded weight initialization and a flat binary weight file.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "FCWT" | version u32 | entry count u32
//! per entry: layer i32 (-1 = global) | name len u16 | name utf-8 | rows u32 | cols u32 | rows*cols f64
//! ```

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"FCWT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S> {
    pub ln1_gain: Mat<S>,
    pub ln1_bias: Mat<S>,
    pub w_q: Mat<S>,
    pub w_k: Mat<S>,
    pub w_v: Mat<S>,
    pub w_o: Mat<S>,
    pub ln2_gain: Mat<S>,
    pub ln2_bias: Mat<S>,
    pub w_gate: Mat<S>,
    pub w_up: Mat<S>,
    pub w_down: Mat<S>,
}

impl<S: Scalar> LayerWeights<S> {
    const NAMES: [&'static str; 11] = [
        "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_gate",
        "w_up", "w_down",
    ];

    fn matrices(&self) -> [&Mat<S>; 11] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn matrices_mut(&mut self) -> [&mut Mat<S>; 11] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<S> {
    pub embed: Mat<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub lnf_gain: Mat<S>,
    pub lnf_bias: Mat<S>,
    pub head: Mat<S>,
}

fn gaussian<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat<S> {
    Mat::from_fn(rows, cols, |_, _| {
        S::of(scale * rng.sample::<f64, _>(StandardNormal))
    })
}

fn ones<S: Scalar>(n: usize) -> Mat<S> {
    Mat::from_fn(1, n, |_, _| S::one())
}

impl<S: Scalar> Weights<S> {
    /// Gaussian init with standard deviation `cfg.init_scale()`; norm gains 1, biases 0.
    pub fn init(cfg: &ModelConfig) -> Self {
        let (d, f, s) = (cfg.d, cfg.d_ff, cfg.init_scale());
        let mut r = rng::stream(cfg.seed, "weights");
        let embed = gaussian(&mut r, cfg.vocab, d, s);
        let rho = cfg.qk_tie;
        let layers = (0..cfg.layers)
            .map(|_| {
                let w_q: Mat<S> = gaussian(&mut r, d, d, s);
                let noise: Mat<S> = gaussian(&mut r, d, d, s);
                let (a, b) = (S::of(rho), S::of((1.0 - rho * rho).sqrt()));
                let w_k = Mat::from_fn(d, d, |i, j| a * w_q.get(i, j) + b * noise.get(i, j));
                LayerWeights {
                    ln1_gain: ones(d),
                    ln1_bias: Mat::zeros(1, d),
                    w_q,
                    w_k,
                    w_v: gaussian(&mut r, d, d, s),
                    w_o: gaussian(&mut r, d, d, s),
                    ln2_gain: ones(d),
                    ln2_bias: Mat::zeros(1, d),
                    w_gate: gaussian(&mut r, d, f, s),
                    w_up: gaussian(&mut r, d, f, s),
                    w_down: gaussian(&mut r, f, d, s),
                }
            })
            .collect();
        let head = gaussian(&mut r, d, cfg.vocab, s);
        Self {
            embed,
            layers,
            lnf_gain: ones(d),
            lnf_bias: Mat::zeros(1, d),
            head,
        }
    }

    /// All matrices keyed by `(layer, name)`; global entries have no layer.
    pub fn entries(&self) -> Vec<(Option<usize>, &'static str, &Mat<S>)> {
        let mut out = vec![(None, "embed", &self.embed)];
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, m) in LayerWeights::<S>::NAMES.iter().zip(lw.matrices()) {
                out.push((Some(l), *name, m));
            }
        }
        out.push((None, "lnf_gain", &self.lnf_gain));
        out.push((None, "lnf_bias", &self.lnf_bias));
        out.push((None, "head", &self.head));
        out
    }

    fn entry_mut(&mut self, layer: Option<usize>, name: &str) -> Option<&mut Mat<S>> {
        match layer {
            None => match name {
                "embed" => Some(&mut self.embed),
                "lnf_gain" => Some(&mut self.lnf_gain),
                "lnf_bias" => Some(&mut self.lnf_bias),
                "head" => Some(&mut self.head),
                _ => None,
            },
            Some(l) => {
                let idx = LayerWeights::<S>::NAMES.iter().position(|n| *n == name)?;
                let lw = self.layers.get_mut(l)?;
                lw.matrices_mut().into_iter().nth(idx)
            }
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let entries = self.entries();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (layer, name, m) in entries {
            let layer = layer.map_or(-1i32, |l| l as i32);
            w.write_all(&layer.to_le_bytes())?;
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a weight file, checking every matrix against the shapes `cfg` implies.
    pub fn read_from(cfg: &ModelConfig, mut r: impl Read) -> Result<Self> {
        let mut out = Self::init(&ModelConfig {
            seed: 0,
            ..cfg.clone()
        });
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("not a weight file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported weight file version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let expected = out.entries().len();
        if count != expected {
            return Err(Error::Parse(format!(
                "weight file has {count} entries, expected {expected}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            let layer = i32::from_le_bytes(b4);
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
            let (rows, cols) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
            let mut data = Vec::with_capacity(rows * cols);
            let mut b8 = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut b8)?;
                data.push(S::of(f64::from_le_bytes(b8)));
            }
            let key = (
                if layer < 0 {
                    None
                } else {
                    Some(layer as usize)
                },
                name,
            );
            let slot = out
                .entry_mut(key.0, &key.1)
                .ok_or_else(|| Error::Parse(format!("unknown weight entry {key:?}")))?;
            if slot.rows() != rows || slot.cols() != cols {
                return Err(Error::Parse(format!(
                    "entry {key:?} is {rows}x{cols}, expected {}x{}",
                    slot.rows(),
                    slot.cols()
                )));
            }
            *slot = Mat::from_vec(rows, cols, data)?;
            if !seen.insert(key.clone()) {
                return Err(Error::Parse(format!("duplicate weight entry {key:?}")));
            }
        }
        Ok(out)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 8,
            d_ff: 12,
            heads: 2,
            layers: 2,
            vocab: 10,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Weights::<f64>::init(&small());
        let b = Weights::<f64>::init(&small());
        assert_eq!(a, b);
        let c = Weights::<f64>::init(&ModelConfig { seed: 8, ..small() });
        assert_ne!(a, c);
    }

    #[test]
    fn full_tie_makes_keys_equal_queries() {
        let w = Weights::<f64>::init(&ModelConfig {
            qk_tie: 1.0,
            ..small()
        });
        assert_eq!(w.layers[0].w_q, w.layers[0].w_k);
    }

    #[test]
    fn binary_round_trip() {
        let w = Weights::<f64>::init(&small());
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        let back = Weights::<f64>::read_from(&small(), buf.as_slice()).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn rejects_wrong_shapes_and_magic() {
        let w = Weights::<f64>::init(&small());
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        let other = ModelConfig {
            d_ff: 16,
            ..small()
        };
        assert!(Weights::<f64>::read_from(&other, buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(matches!(
            Weights::<f64>::read_from(&small(), buf.as_slice()),
            Err(Error::Parse(_))
        ));
    }
}
