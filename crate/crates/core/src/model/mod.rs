//! Toy autoregressive decoder over frame-structured token sequences.
//!
//! Pre-norm blocks: `h ← h + W_O·Attn(LN₁(h))`, then `h ← h + MLP(LN₂(h))`, where the
//! MLP site may replay a cached output. Decoding is greedy and KV-cached.

mod config;
mod kv_cache;
mod weights;

pub use config::{FrameLayout, GridPos, ModelConfig};
pub use kv_cache::KvCache;
pub use weights::{LayerWeights, Weights};

use rand::Rng;

use crate::accounting::{
    FlopLedger, Meter, Module, Phase, Timings, NORM_FLOPS_PER_ELEM, SCORE_ELEMWISE_FLOPS,
};
use crate::error::{Error, Result};
use crate::fastcar::{
    replay_or_compute, tas_from_logits, tas_from_vectors, MlpCache, ReplayPolicy, ReplayStats,
    TasRecord,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::sparse_attn::{allowed_positions, AttentionMask};
use crate::tensor::{layer_norm_into, silu, softmax_in_place, vec_mat, vec_mat_into, Mat};

/// Result of attending from one query position.
#[derive(Clone, Debug)]
pub struct AttnStep<S> {
    /// Concatenated per-head outputs, before the output projection.
    pub out: Vec<S>,
    pub q: Vec<S>,
    /// Per head: scaled pre-softmax scores over the attended key positions.
    pub logits: Vec<Vec<S>>,
}

/// A temporal score together with the decision taken on it.
#[derive(Clone, Debug, PartialEq)]
pub struct TasEntry<S> {
    pub record: TasRecord<S>,
    pub replayed: bool,
}

/// Per-layer intermediate rows for every processed position (row = absolute position).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerArtifacts<S> {
    /// Residual stream entering the block.
    pub h_in: Mat<S>,
    /// Attention sublayer output after the output projection.
    pub attn: Mat<S>,
    /// MLP operand, `LN₂(h_in + attn)`.
    pub z: Mat<S>,
    /// MLP output (computed or replayed).
    pub y: Mat<S>,
    pub q: Mat<S>,
    pub k: Mat<S>,
}

#[derive(Clone, Debug, Default)]
pub struct DecodeOptions {
    /// Keep every intermediate row (see [`LayerArtifacts`]).
    pub record_artifacts: bool,
    /// Time each kernel with a monotonic clock.
    pub timed: bool,
}

#[derive(Clone, Debug)]
pub struct DecodeTrace<S> {
    pub layout: FrameLayout,
    /// Generated token ids, one per video position.
    pub tokens: Vec<usize>,
    /// Logits each token was picked from.
    pub logits: Vec<Vec<S>>,
    pub tas: Vec<TasEntry<S>>,
    pub stats: ReplayStats,
    /// Per layer: MLP output of each generated token (`T·N × d`).
    pub mlp_outputs: Vec<Mat<S>>,
    pub flops: FlopLedger,
    pub timings: Option<Timings>,
    pub artifacts: Option<Vec<LayerArtifacts<S>>>,
}

impl<S: Scalar> DecodeTrace<S> {
    pub fn replay_ratio(&self) -> f64 {
        self.stats.ratio()
    }
}

/// Everything a teacher-forced pass exposes for similarity analysis.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts<S> {
    pub layout: FrameLayout,
    pub layers: Vec<LayerArtifacts<S>>,
    pub tas: Vec<TasRecord<S>>,
}

#[derive(Clone, Debug)]
pub struct Transformer<S> {
    cfg: ModelConfig,
    weights: Weights<S>,
    root_head_dim: S,
    eps: S,
}

impl<S: Scalar> Transformer<S> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = Weights::init(&cfg);
        Self::from_weights(cfg, weights)
    }

    pub fn from_weights(cfg: ModelConfig, weights: Weights<S>) -> Result<Self> {
        cfg.validate()?;
        if weights.layers.len() != cfg.layers
            || weights.embed.rows() != cfg.vocab
            || weights.embed.cols() != cfg.d
        {
            return Err(Error::Config(
                "weights do not match the model config".into(),
            ));
        }
        let root_head_dim = S::of(cfg.head_dim() as f64).sqrt();
        let eps = S::of(cfg.ln_eps);
        Ok(Self {
            cfg,
            weights,
            root_head_dim,
            eps,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights<S> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<S> {
        &mut self.weights
    }

    /// Token embedding, plus a scaled sinusoidal code when positional encoding is on.
    pub fn embed(&self, token: usize, pos: usize) -> Vec<S> {
        let mut x = self.weights.embed.row(token).to_vec();
        if self.cfg.positional {
            let d = self.cfg.d as f64;
            let scale = self.cfg.init_scale();
            for (c, v) in x.iter_mut().enumerate() {
                let freq = 1.0 / 10000f64.powf((c - c % 2) as f64 / d);
                let angle = pos as f64 * freq;
                let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                *v = *v + S::of(scale * pe);
            }
        }
        x
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.cfg.layers {
            return Err(Error::Input(format!(
                "layer {layer} out of range ({} layers)",
                self.cfg.layers
            )));
        }
        Ok(())
    }

    /// One attention step for query input `x` (already normalized).
    ///
    /// Projects `x`, appends its key and value to `kv` at the next position, and
    /// attends over `keys` (ascending positions, ending at the new one). Without a
    /// mask pass all positions `0..=len`.
    pub fn attention_step(
        &self,
        x: &[S],
        layer: usize,
        kv: &mut KvCache<S>,
        keys: &[usize],
    ) -> Result<AttnStep<S>> {
        self.check_layer(layer)?;
        if x.len() != self.cfg.d {
            return Err(Error::shape(format!(
                "attention input has {} values, expected {}",
                x.len(),
                self.cfg.d
            )));
        }
        let pos = kv.len(layer);
        if keys.last() != Some(&pos) || keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "key positions must ascend and end at the query position {pos}"
            )));
        }
        let mut meter = Meter::default();
        Ok(self.attend(x, layer, kv, keys, &mut meter, Phase::Decode))
    }

    fn attend(
        &self,
        x: &[S],
        layer: usize,
        kv: &mut KvCache<S>,
        keys: &[usize],
        meter: &mut Meter,
        phase: Phase,
    ) -> AttnStep<S> {
        let lw = &self.weights.layers[layer];
        let (d, heads, dh) = (self.cfg.d, self.cfg.heads, self.cfg.head_dim());

        let t = meter.start();
        let q = vec_mat(x, &lw.w_q);
        let k = vec_mat(x, &lw.w_k);
        let v = vec_mat(x, &lw.w_v);
        meter.stop(phase, Module::AttentionProj, t);
        meter.count(phase, Module::AttentionProj, 3 * 2 * (d * d) as u64);
        kv.append(layer, &k, &v);

        let t = meter.start();
        let mut out = vec![S::zero(); d];
        let mut logits = Vec::with_capacity(heads);
        let mut weights = vec![S::zero(); keys.len()];
        // maximal runs of consecutive key positions: (offset in `keys`, first position, length)
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        for (o, &p) in keys.iter().enumerate() {
            match runs.last_mut() {
                Some((_, start, len)) if *start + *len == p => *len += 1,
                _ => runs.push((o, p, 1)),
            }
        }
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            // each score accumulates over c in order, exactly like `dot`
            let mut row = vec![S::zero(); keys.len()];
            for (c, &qc) in qh.iter().enumerate() {
                let col = kv.key_column(layer, h, c);
                for &(o, start, len) in &runs {
                    for (r, &k) in row[o..o + len].iter_mut().zip(&col[start..start + len]) {
                        *r = *r + qc * k;
                    }
                }
            }
            for r in row.iter_mut() {
                *r = *r / self.root_head_dim;
            }
            weights.copy_from_slice(&row);
            softmax_in_place(&mut weights).expect("key set is never empty");
            let oh = &mut out[h * dh..(h + 1) * dh];
            for (&p, &w) in keys.iter().zip(&weights) {
                for (o, &val) in oh.iter_mut().zip(kv.value(layer, h, p)) {
                    *o = *o + w * val;
                }
            }
            logits.push(row);
        }
        meter.stop(phase, Module::AttentionScore, t);
        let ctx = keys.len() as u64;
        meter.count(
            phase,
            Module::AttentionScore,
            4 * d as u64 * ctx + SCORE_ELEMWISE_FLOPS * heads as u64 * ctx,
        );
        AttnStep { out, q, logits }
    }

    /// Gated MLP: `(SiLU(z·W_G) ∘ (z·W_U))·W_D`.
    pub fn gated_mlp(&self, z: &[S], layer: usize) -> Vec<S> {
        let lw = &self.weights.layers[layer];
        gated_mlp_with(z, &lw.w_gate, &lw.w_up, &lw.w_down)
    }

    fn final_logits(&self, h: &[S], meter: &mut Meter, phase: Phase) -> Vec<S> {
        let d = self.cfg.d;
        let t = meter.start();
        let mut n = vec![S::zero(); d];
        layer_norm_into(
            h,
            self.weights.lnf_gain.as_slice(),
            self.weights.lnf_bias.as_slice(),
            self.eps,
            &mut n,
        );
        meter.stop(phase, Module::Norm, t);
        meter.count(phase, Module::Norm, NORM_FLOPS_PER_ELEM * d as u64);
        let t = meter.start();
        let logits = vec_mat(&n, &self.weights.head);
        meter.stop(phase, Module::Head, t);
        meter.count(phase, Module::Head, 2 * (d * self.cfg.vocab) as u64);
        logits
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(bad) = tokens.iter().find(|t| **t >= self.cfg.vocab) {
            return Err(Error::Input(format!(
                "token {bad} is outside the vocabulary of {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    /// Greedy KV-cached generation of `layout.video_len()` tokens after `prompt`.
    pub fn decode(
        &self,
        layout: &FrameLayout,
        prompt: &[usize],
        policy: Option<&ReplayPolicy>,
        mask: Option<&AttentionMask>,
        opts: &DecodeOptions,
    ) -> Result<DecodeTrace<S>> {
        layout.validate()?;
        if prompt.len() != layout.prefill_len {
            return Err(Error::Input(format!(
                "prompt has {} tokens, layout expects {}",
                prompt.len(),
                layout.prefill_len
            )));
        }
        self.check_tokens(prompt)?;
        if let Some(p) = policy {
            p.validate(self.cfg.layers)?;
        }
        if let Some(m) = mask {
            m.validate()?;
        }
        let mut run = Run::new(self, *layout, policy, mask, opts);
        let n = layout.video_len();

        let started = run.meter.start();
        let mut last = Vec::new();
        for (pos, &tok) in prompt.iter().enumerate() {
            last = run.step(pos, tok, Phase::Prefill)?;
        }
        let mut logits = self.final_logits(&last, &mut run.meter, Phase::Prefill);
        run.meter.stop_phase(Phase::Prefill, started);

        let started = run.meter.start();
        let mut tokens = Vec::with_capacity(n);
        let mut all_logits = Vec::with_capacity(n);
        for j in 0..n {
            let tok = argmax(&logits);
            tokens.push(tok);
            let h = run.step(layout.position(j), tok, Phase::Decode)?;
            let next = if j + 1 < n {
                self.final_logits(&h, &mut run.meter, Phase::Decode)
            } else {
                Vec::new()
            };
            all_logits.push(std::mem::replace(&mut logits, next));
        }
        run.meter.stop_phase(Phase::Decode, started);

        let d = self.cfg.d;
        let mlp_outputs = run
            .mlp_rows
            .into_iter()
            .map(|rows| Mat::from_vec(n, d, rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecodeTrace {
            layout: *layout,
            tokens,
            logits: all_logits,
            tas: run.tas,
            stats: run.stats,
            mlp_outputs,
            flops: run.meter.flops,
            timings: run.meter.timings,
            artifacts: run.recorder.map(|r| r.finish(d)),
        })
    }

    /// Dense forward pass over a fixed token stream (prompt followed by video).
    pub fn teacher_forced_forward(
        &self,
        layout: &FrameLayout,
        tokens: &[usize],
    ) -> Result<ForwardArtifacts<S>> {
        layout.validate()?;
        if tokens.len() != layout.total_len() {
            return Err(Error::Input(format!(
                "teacher forcing needs {} tokens, got {}",
                layout.total_len(),
                tokens.len()
            )));
        }
        self.check_tokens(tokens)?;
        let opts = DecodeOptions {
            record_artifacts: true,
            timed: false,
        };
        let mut run = Run::new(self, *layout, None, None, &opts);
        for (pos, &tok) in tokens.iter().enumerate() {
            let phase = if pos < layout.prefill_len {
                Phase::Prefill
            } else {
                Phase::Decode
            };
            run.step(pos, tok, phase)?;
        }
        let layers = run
            .recorder
            .take()
            .expect("recording enabled")
            .finish(self.cfg.d);
        Ok(ForwardArtifacts {
            layout: *layout,
            layers,
            tas: run.tas.into_iter().map(|e| e.record).collect(),
        })
    }

    /// Uniform random prompt drawn from the `prompt` stream of `seed`.
    pub fn random_prompt(&self, seed: u64, layout: &FrameLayout) -> Vec<usize> {
        let mut r = rng::stream(seed, "prompt");
        (0..layout.prefill_len)
            .map(|_| r.random_range(0..self.cfg.vocab))
            .collect()
    }
}

/// Gated MLP over explicit weights.
pub fn gated_mlp_with<S: Scalar>(
    z: &[S],
    w_gate: &Mat<S>,
    w_up: &Mat<S>,
    w_down: &Mat<S>,
) -> Vec<S> {
    let mut gate = vec![S::zero(); w_gate.cols()];
    let mut up = vec![S::zero(); w_up.cols()];
    vec_mat_into(z, w_gate, &mut gate);
    vec_mat_into(z, w_up, &mut up);
    for (g, u) in gate.iter_mut().zip(&up) {
        *g = silu(*g) * *u;
    }
    vec_mat(&gate, w_down)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Default)]
struct Recorder<S> {
    layers: Vec<[Vec<S>; 6]>,
    rows: usize,
}

impl<S: Scalar> Recorder<S> {
    fn new(layers: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| Default::default()).collect(),
            rows: 0,
        }
    }

    fn finish(self, d: usize) -> Vec<LayerArtifacts<S>> {
        let rows = self.rows;
        self.layers
            .into_iter()
            .map(|[h_in, attn, z, y, q, k]| {
                let m =
                    |v: Vec<S>| Mat::from_vec(rows, d, v).expect("recorded rows are full width");
                LayerArtifacts {
                    h_in: m(h_in),
                    attn: m(attn),
                    z: m(z),
                    y: m(y),
                    q: m(q),
                    k: m(k),
                }
            })
            .collect()
    }
}

/// Mutable state of one generation run.
struct Run<'a, S> {
    model: &'a Transformer<S>,
    layout: FrameLayout,
    policy: Option<&'a ReplayPolicy>,
    mask: Option<&'a AttentionMask>,
    kv: KvCache<S>,
    cache: MlpCache<S>,
    stats: ReplayStats,
    meter: Meter,
    tas: Vec<TasEntry<S>>,
    mlp_rows: Vec<Vec<S>>,
    recorder: Option<Recorder<S>>,
}

impl<'a, S: Scalar> Run<'a, S> {
    fn new(
        model: &'a Transformer<S>,
        layout: FrameLayout,
        policy: Option<&'a ReplayPolicy>,
        mask: Option<&'a AttentionMask>,
        opts: &DecodeOptions,
    ) -> Self {
        let cfg = &model.cfg;
        Self {
            model,
            layout,
            policy,
            mask,
            kv: KvCache::new(cfg.layers, cfg.heads, cfg.head_dim()),
            cache: MlpCache::new(cfg.layers, layout.tokens_per_frame),
            stats: ReplayStats::new(cfg.layers),
            meter: Meter::new(opts.timed),
            tas: Vec::new(),
            mlp_rows: vec![Vec::with_capacity(layout.video_len() * cfg.d); cfg.layers],
            recorder: opts.record_artifacts.then(|| Recorder::new(cfg.layers)),
        }
    }

    /// Runs position `pos` through every block; returns the final residual stream.
    fn step(&mut self, pos: usize, token: usize, phase: Phase) -> Result<Vec<S>> {
        let model = self.model;
        let cfg = &model.cfg;
        let d = cfg.d;
        let keys = allowed_positions(pos, self.mask);
        let generated = self.layout.generated_index(pos);
        let mut h = model.embed(token, pos);
        let mut buf = vec![S::zero(); d];
        for layer in 0..cfg.layers {
            let lw = &model.weights.layers[layer];

            let t = self.meter.start();
            layer_norm_into(
                &h,
                lw.ln1_gain.as_slice(),
                lw.ln1_bias.as_slice(),
                model.eps,
                &mut buf,
            );
            self.meter.stop(phase, Module::Norm, t);
            self.meter
                .count(phase, Module::Norm, NORM_FLOPS_PER_ELEM * d as u64);

            let att = model.attend(&buf, layer, &mut self.kv, &keys, &mut self.meter, phase);

            let t = self.meter.start();
            let attn = vec_mat(&att.out, &lw.w_o);
            self.meter.stop(phase, Module::AttentionProj, t);
            self.meter
                .count(phase, Module::AttentionProj, 2 * (d * d) as u64);

            let h_in = self.recorder.as_ref().map(|_| h.clone());
            for (x, a) in h.iter_mut().zip(&attn) {
                *x = *x + *a;
            }

            let t = self.meter.start();
            let mut z = vec![S::zero(); d];
            layer_norm_into(
                &h,
                lw.ln2_gain.as_slice(),
                lw.ln2_bias.as_slice(),
                model.eps,
                &mut z,
            );
            self.meter.stop(phase, Module::Norm, t);
            self.meter
                .count(phase, Module::Norm, NORM_FLOPS_PER_ELEM * d as u64);

            let rec = match generated {
                Some(j) if self.layout.aligned(j).is_some() => {
                    Some(self.temporal_score(layer, j, &att, &keys, phase)?)
                }
                _ => None,
            };

            let meter = &mut self.meter;
            let mut mlp = |z: &[S]| {
                let t = meter.start();
                let y = model.gated_mlp(z, layer);
                meter.stop(phase, Module::Mlp, t);
                meter.count(phase, Module::Mlp, 2 * 3 * (d * cfg.d_ff) as u64);
                y
            };
            let y = match generated {
                Some(j) => {
                    let slot = self.layout.grid(j).i;
                    let outcome = replay_or_compute(
                        &z,
                        rec.as_ref(),
                        &mut self.cache,
                        self.policy,
                        layer,
                        slot,
                        mlp,
                    )?;
                    if outcome.replayed {
                        self.meter.flops.replay_savings += 2 * 3 * (d * cfg.d_ff) as u64;
                    }
                    if let Some(r) = rec {
                        self.stats.record(layer, outcome.replayed);
                        self.tas.push(TasEntry {
                            record: r,
                            replayed: outcome.replayed,
                        });
                    }
                    self.mlp_rows[layer].extend_from_slice(&outcome.output);
                    outcome.output
                }
                None => mlp(&z),
            };

            if let (Some(r), Some(h_in)) = (self.recorder.as_mut(), h_in) {
                let k = self.kv.key_row(layer, pos);
                for (dst, src) in r.layers[layer]
                    .iter_mut()
                    .zip([&h_in, &attn, &z, &y, &att.q, &k])
                {
                    dst.extend_from_slice(src);
                }
            }
            for (x, v) in h.iter_mut().zip(&y) {
                *x = *x + *v;
            }
        }
        if let Some(r) = self.recorder.as_mut() {
            r.rows += 1;
        }
        Ok(h)
    }

    /// Reads the score from the logit row, or from the cached key when the mask hides it.
    fn temporal_score(
        &mut self,
        layer: usize,
        j: usize,
        att: &AttnStep<S>,
        keys: &[usize],
        phase: Phase,
    ) -> Result<TasRecord<S>> {
        match tas_from_logits(layer, &att.logits, keys, j, &self.layout) {
            Ok(rec) => Ok(rec),
            Err(Error::Missing(_)) => {
                let cfg = &self.model.cfg;
                let t = self.meter.start();
                let aligned = self.layout.position(j - self.layout.tokens_per_frame);
                let k = self.kv.key_row(layer, aligned);
                let heads = tas_from_vectors(&att.q, &k, cfg.heads);
                self.meter.stop(phase, Module::AttentionScore, t);
                self.meter.count(
                    phase,
                    Module::AttentionScore,
                    (2 * cfg.d + cfg.heads) as u64,
                );
                let g = self.layout.grid(j);
                Ok(TasRecord::new(layer, g.t, g.i, heads))
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 4,
            d_ff: 8,
            heads: 1,
            layers: 2,
            vocab: 11,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn first_position_returns_its_value() {
        let m = Transformer::<f64>::new(tiny()).unwrap();
        let mut kv = KvCache::new(2, 1, 4);
        let x = [0.3, -1.2, 0.5, 0.4];
        let step = m.attention_step(&x, 0, &mut kv, &[0]).unwrap();
        assert_eq!(step.out, vec_mat(&x, &m.weights().layers[0].w_v));
        assert_eq!(step.logits.len(), 1);
        assert_eq!(step.logits[0].len(), 1);
    }

    #[test]
    fn zero_input_attends_uniformly() {
        let m = Transformer::<f64>::new(tiny()).unwrap();
        let mut kv = KvCache::new(2, 1, 4);
        let xs = [[1.0, 0.0, -1.0, 0.5], [0.2, 0.9, -0.4, 0.1]];
        for (p, x) in xs.iter().enumerate() {
            let keys: Vec<usize> = (0..=p).collect();
            m.attention_step(x, 1, &mut kv, &keys).unwrap();
        }
        let step = m.attention_step(&[0.0; 4], 1, &mut kv, &[0, 1, 2]).unwrap();
        assert!(step.logits[0].iter().all(|l| *l == 0.0));
        let wv = &m.weights().layers[1].w_v;
        let vals: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| vec_mat(x, wv))
            .chain([vec![0.0; 4]])
            .collect();
        for c in 0..4 {
            let mean = vals.iter().map(|v| v[c]).sum::<f64>() / 3.0;
            assert!((step.out[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_step_rejects_bad_layer_and_keys() {
        let m = Transformer::<f64>::new(tiny()).unwrap();
        let mut kv = KvCache::new(2, 1, 4);
        assert!(m.attention_step(&[0.0; 4], 2, &mut kv, &[0]).is_err());
        assert!(m.attention_step(&[0.0; 4], 0, &mut kv, &[1]).is_err());
        assert!(m.attention_step(&[0.0; 3], 0, &mut kv, &[0]).is_err());
    }

    #[test]
    fn mlp_zero_cases() {
        let mut m = Transformer::<f64>::new(tiny()).unwrap();
        assert_eq!(m.gated_mlp(&[0.0; 4], 0), vec![0.0; 4]);
        m.weights_mut().layers[0].w_down = Mat::zeros(8, 4);
        assert_eq!(m.gated_mlp(&[1.0, -2.0, 3.0, 0.5], 0), vec![0.0; 4]);
    }

    #[test]
    fn mlp_matches_scalar_loops() {
        let cfg = ModelConfig {
            d: 4,
            d_ff: 8,
            heads: 1,
            layers: 1,
            vocab: 5,
            seed: 11,
            ..Default::default()
        };
        let m = Transformer::<f64>::new(cfg).unwrap();
        let lw = &m.weights().layers[0];
        let z = [0.7, -0.3, 1.1, 0.05];
        let mut hidden = [0.0; 8];
        for (k, hk) in hidden.iter_mut().enumerate() {
            let (mut g, mut u) = (0.0, 0.0);
            for c in 0..4 {
                g += z[c] * lw.w_gate.get(c, k);
                u += z[c] * lw.w_up.get(c, k);
            }
            *hk = g / (1.0 + (-g).exp()) * u;
        }
        let got = m.gated_mlp(&z, 0);
        for c in 0..4 {
            let want: f64 = (0..8).map(|k| hidden[k] * lw.w_down.get(k, c)).sum();
            assert!((got[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, -1.0]), 1);
        assert_eq!(argmax(&[2.0f32]), 0);
    }

    #[test]
    fn argmax_shift_invariant() {
        let v = [0.25, -1.0, 0.75, 0.5];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.0).collect();
        assert_eq!(argmax(&v), argmax(&shifted));
    }

    #[test]
    fn decode_validates_inputs() {
        let m = Transformer::<f64>::new(tiny()).unwrap();
        let lay = FrameLayout {
            frames: 2,
            tokens_per_frame: 2,
            prefill_len: 2,
        };
        let opts = DecodeOptions::default();
        assert!(matches!(
            m.decode(&lay, &[1], None, None, &opts),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            m.decode(&lay, &[1, 11], None, None, &opts),
            Err(Error::Input(_))
        ));
        let bad = ReplayPolicy::Inconsistent { taus: vec![0.0] };
        assert!(matches!(
            m.decode(&lay, &[1, 2], Some(&bad), None, &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_frame_has_no_temporal_records() {
        let m = Transformer::<f64>::new(tiny()).unwrap();
        let lay = FrameLayout {
            frames: 1,
            tokens_per_frame: 3,
            prefill_len: 2,
        };
        let art = m.teacher_forced_forward(&lay, &[1, 2, 3, 4, 5]).unwrap();
        assert!(art.tas.is_empty());
        assert_eq!(art.layers[0].y.rows(), 5);
    }

    #[test]
    fn f32_model_decodes() {
        let m = Transformer::<f32>::new(tiny()).unwrap();
        let lay = FrameLayout {
            frames: 2,
            tokens_per_frame: 3,
            prefill_len: 2,
        };
        let tr = m
            .decode(
                &lay,
                &[1, 2],
                Some(&ReplayPolicy::consistent(f64::NEG_INFINITY)),
                None,
                &Default::default(),
            )
            .unwrap();
        assert_eq!(tr.tokens.len(), 6);
        assert_eq!(tr.stats.ratio(), 1.0);
    }
}
