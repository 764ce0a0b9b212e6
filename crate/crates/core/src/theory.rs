//! Numeric checks of the similarity bounds that justify replay.
//!
//! Everything here is analysis over finished runs; nothing feeds back into decoding.
//! Where a bound holds only up to an unspecified constant, the constant is fitted on
//! one half of the aligned pairs and checked on the other half.
//!
//! The model is pre-norm, so the operand of the MLP is `LN₂(X + Attn)`. Lipschitz
//! certificates therefore cover the composite `z ↦ MLP(LN₂(z))`: a bound for the MLP
//! on the ball that contains every layer-norm output, times a bound for the layer norm
//! along the segment between the two inputs. Query/key normalization for the score
//! is applied here, per head, and never inside the model.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodeOptions, ForwardArtifacts, FrameLayout, LayerArtifacts, Transformer};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{dist2, dot, layer_norm_into, norm2, spectral_norm, spectral_norm_upper, Mat};

/// Squarings used for certified spectral bounds (overestimate ≤ rank^(1/512)).
const CERT_SQUARINGS: u32 = 8;
const POWER_ITERS: usize = 500;
/// Upper bound on `|SiLU′|` over the reals (the true supremum is ≈ 1.0998).
pub const SILU_GRAD_BOUND: f64 = 1.1;

/// Per-layer constants of the bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub layer: usize,
    /// Largest norm of a projection input (`LN₁` output) seen in the runs.
    pub m: f64,
    /// `max(‖W_Q‖₂, ‖W_K‖₂)`.
    pub lambda: f64,
    /// `‖W_Q − W_K‖₂`.
    pub gamma: f64,
    /// Certified MLP Lipschitz bound on the layer-norm output ball.
    pub l_hat: f64,
    /// Fitted composite constant, once a fit has been made.
    pub c: Option<f64>,
}

/// Both sides of `‖q − k‖² = 2(1 − ⟨q, k⟩)` for unit vectors.
pub fn check_unit_cosine_law(q: &[f64], k: &[f64]) -> Result<(f64, f64)> {
    if q.len() != k.len() {
        return Err(Error::shape(format!(
            "vectors of length {} and {}",
            q.len(),
            k.len()
        )));
    }
    for (name, v) in [("q", q), ("k", k)] {
        let n = norm2(v);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "{name} has norm {n}, expected 1"
            )));
        }
    }
    let lhs = dist2(q, k).powi(2);
    let rhs = 2.0 * (1.0 - dot(q, k));
    Ok((lhs, rhs))
}

fn random_unit(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        let n = norm2(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Largest `|lhs − rhs|` of the cosine law over `pairs` random unit pairs in
/// dimensions drawn from 2..=256.
pub fn cosine_law_sweep(pairs: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "cosine-law");
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let dim = r.random_range(2..=256);
        let q = random_unit(&mut r, dim);
        let k = random_unit(&mut r, dim);
        let (lhs, rhs) = check_unit_cosine_law(&q, &k)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Certified Lipschitz bound of `z ↦ (SiLU(z·W_G) ∘ (z·W_U))·W_D` on `‖z‖ ≤ r`.
///
/// Bounds the Jacobian norm by
/// `‖W_D‖·(r·max‖W_G col‖·‖W_U‖ + 1.1·r·max‖W_U col‖·‖W_G‖)`, with spectral norms
/// replaced by certified upper bounds.
pub fn mlp_lipschitz_bound_with<S: Scalar>(
    w_gate: &Mat<S>,
    w_up: &Mat<S>,
    w_down: &Mat<S>,
    r: f64,
) -> f64 {
    let sg = spectral_norm_upper(w_gate, CERT_SQUARINGS);
    let su = spectral_norm_upper(w_up, CERT_SQUARINGS);
    let sd = spectral_norm_upper(w_down, CERT_SQUARINGS);
    let silu_sup = r * w_gate.max_col_norm().as_f64();
    let grad_sup = SILU_GRAD_BOUND * r * w_up.max_col_norm().as_f64();
    sd * (silu_sup * su + grad_sup * sg)
}

/// [`mlp_lipschitz_bound_with`] for one layer of `model`.
pub fn mlp_lipschitz_bound<S: Scalar>(model: &Transformer<S>, layer: usize, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::Input(format!(
            "domain radius must be positive, got {r}"
        )));
    }
    let lw = model
        .weights()
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?;
    Ok(mlp_lipschitz_bound_with(
        &lw.w_gate, &lw.w_up, &lw.w_down, r,
    ))
}

/// Radius of a ball containing every output of a layer norm with this gain and bias.
pub fn ln_output_radius<S: Scalar>(gain: &[S], bias: &[S]) -> f64 {
    let gmax = gain.iter().map(|g| g.as_f64().abs()).fold(0.0, f64::max);
    let b: Vec<f64> = bias.iter().map(|v| v.as_f64()).collect();
    gmax * (gain.len() as f64).sqrt() + norm2(&b)
}

fn centered(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// Lipschitz bound of a layer norm along the segment from `a` to `b`.
///
/// The Jacobian norm at `z` is at most `max|gain| / sqrt(var(z) + eps)`, and the
/// variance along the segment is a convex quadratic whose minimum is found exactly.
pub fn ln_segment_lipschitz(a: &[f64], b: &[f64], gain: &[f64], eps: f64) -> f64 {
    let n = a.len() as f64;
    let pa = centered(a);
    let delta: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let pd = centered(&delta);
    let dd = dot(&pd, &pd);
    let s = if dd > 0.0 {
        (-dot(&pa, &pd) / dd).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let point: Vec<f64> = pa.iter().zip(&pd).map(|(x, d)| x + s * d).collect();
    let var_min = dot(&point, &point) / n;
    let gmax = gain.iter().map(|g| g.abs()).fold(0.0, f64::max);
    gmax / (var_min + eps).sqrt()
}

/// Outcome of sampling pairs against a Lipschitz bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSample {
    pub pairs: usize,
    pub violations: usize,
    pub max_ratio: f64,
    pub bound: f64,
}

/// Checks `bound` on every pair among `2·centers` points inside the ball of radius `r`.
///
/// Half the points are uniform in the ball; each has a partner at a random distance
/// between `10⁻⁴·r` and `0.1·r` so that close pairs, where the local slope dominates,
/// are well represented.
pub fn sample_lipschitz<S: Scalar>(
    w_gate: &Mat<S>,
    w_up: &Mat<S>,
    w_down: &Mat<S>,
    r: f64,
    bound: f64,
    centers: usize,
    seed: u64,
) -> LipschitzSample {
    let d = w_gate.rows();
    let mut g = rng::stream(seed, "lipschitz");
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(2 * centers);
    for _ in 0..centers {
        let dir = random_unit(&mut g, d);
        let rad = r * g.random::<f64>().powf(1.0 / d as f64);
        let c: Vec<f64> = dir.iter().map(|x| x * rad).collect();
        let step = r * 10f64.powf(-1.0 - 3.0 * g.random::<f64>());
        let pert = random_unit(&mut g, d);
        let mut p: Vec<f64> = c.iter().zip(&pert).map(|(x, e)| x + step * e).collect();
        let pn = norm2(&p);
        if pn > r {
            p.iter_mut().for_each(|x| *x *= r / pn);
        }
        points.push(c);
        points.push(p);
    }
    let outs: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let z: Vec<S> = p.iter().map(|x| S::of(*x)).collect();
            crate::model::gated_mlp_with(&z, w_gate, w_up, w_down)
                .iter()
                .map(|v| v.as_f64())
                .collect()
        })
        .collect();
    let inputs: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().map(|x| S::of(*x).as_f64()).collect())
        .collect();
    let mut res = LipschitzSample {
        pairs: 0,
        violations: 0,
        max_ratio: 0.0,
        bound,
    };
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            let din = dist2(&inputs[a], &inputs[b]);
            if din == 0.0 {
                continue;
            }
            let ratio = dist2(&outs[a], &outs[b]) / din;
            res.pairs += 1;
            res.max_ratio = res.max_ratio.max(ratio);
            if ratio > bound {
                res.violations += 1;
            }
        }
    }
    res
}

fn row64<S: Scalar>(m: &Mat<S>, r: usize) -> Vec<f64> {
    m.row(r).iter().map(|v| v.as_f64()).collect()
}

fn check_artifacts<S: Scalar>(model: &Transformer<S>, art: &ForwardArtifacts<S>) -> Result<()> {
    let rows = art.layout.total_len();
    if art.layers.len() != model.config().layers {
        return Err(Error::Missing(format!(
            "artifacts cover {} layers, model has {}",
            art.layers.len(),
            model.config().layers
        )));
    }
    if art
        .layers
        .iter()
        .any(|l| l.y.rows() < rows || l.q.rows() < rows)
    {
        return Err(Error::Missing(format!(
            "artifacts hold fewer than {rows} positions"
        )));
    }
    Ok(())
}

/// Features of one aligned pair `(j, j⁻)` at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub layer: usize,
    pub t: usize,
    pub i: usize,
    /// Mean over heads of `cos(q_j, k_{j⁻})`.
    pub s_norm: f64,
    /// `‖X_j − X_{j⁻}‖` for the block input.
    pub x_dist: f64,
    /// `‖Attn_j − Attn_{j⁻}‖` after the output projection.
    pub attn_dist: f64,
    /// `‖Y_j − Y_{j⁻}‖` for the MLP output.
    pub y_dist: f64,
    /// `cos(Y_j, Y_{j⁻})`.
    pub y_cos: f64,
    /// `‖Y_j‖ + ‖Y_{j⁻}‖`, the scale of rounding in `y_dist`.
    pub y_scale: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return if dist2(a, b) == 0.0 { 1.0 } else { 0.0 };
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean over heads of the cosine between per-head query and key slices.
pub fn normalized_tas(q: &[f64], k: &[f64], heads: usize) -> f64 {
    let dh = q.len() / heads;
    (0..heads)
        .map(|h| cosine(&q[h * dh..(h + 1) * dh], &k[h * dh..(h + 1) * dh]))
        .sum::<f64>()
        / heads as f64
}

/// Every aligned pair of generated tokens, layer by layer.
pub fn aligned_pairs<S: Scalar>(
    model: &Transformer<S>,
    art: &ForwardArtifacts<S>,
) -> Result<Vec<AlignedPair>> {
    check_artifacts(model, art)?;
    let lay = &art.layout;
    let heads = model.config().heads;
    let mut out = Vec::new();
    for (layer, la) in art.layers.iter().enumerate() {
        for j in 0..lay.video_len() {
            let Some(prev) = lay.aligned(j) else { continue };
            let (p, pp) = (lay.position(j), lay.position(prev));
            let g = lay.grid(j);
            let (y, yp) = (row64(&la.y, p), row64(&la.y, pp));
            out.push(AlignedPair {
                layer,
                t: g.t,
                i: g.i,
                s_norm: normalized_tas(&row64(&la.q, p), &row64(&la.k, pp), heads),
                x_dist: dist2(&row64(&la.h_in, p), &row64(&la.h_in, pp)),
                attn_dist: dist2(&row64(&la.attn, p), &row64(&la.attn, pp)),
                y_dist: dist2(&y, &yp),
                y_cos: cosine(&y, &yp),
                y_scale: norm2(&y) + norm2(&yp),
            });
        }
    }
    Ok(out)
}

/// Both sides of the MLP-similarity bound for one pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBound {
    pub lhs: f64,
    pub rhs: f64,
    /// Rounding allowance on `lhs`.
    pub tol: f64,
}

impl PairBound {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + self.tol
    }
}

/// `‖Y_j − Y_{j⁻}‖ ≤ L·(‖X_j − X_{j⁻}‖ + ‖Attn_j − Attn_{j⁻}‖)` for generated token `j`.
///
/// `L` is the certified MLP bound on the layer-norm output ball times the layer-norm
/// bound along the segment between the two MLP pre-norm inputs.
pub fn similarity_bound_pair<S: Scalar>(
    model: &Transformer<S>,
    art: &ForwardArtifacts<S>,
    layer: usize,
    j: usize,
    l_hat: f64,
) -> Result<PairBound> {
    let lay = &art.layout;
    let g = lay.grid(j);
    let prev = lay.aligned(j).ok_or(Error::NotEligible { frame: g.t })?;
    let la: &LayerArtifacts<S> = art
        .layers
        .get(layer)
        .ok_or_else(|| Error::Missing(format!("layer {layer}")))?;
    let (p, pp) = (lay.position(j), lay.position(prev));
    let (x, xp) = (row64(&la.h_in, p), row64(&la.h_in, pp));
    let (a, ap) = (row64(&la.attn, p), row64(&la.attn, pp));
    let (y, yp) = (row64(&la.y, p), row64(&la.y, pp));
    let pre: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
    let pre_p: Vec<f64> = xp.iter().zip(&ap).map(|(u, v)| u + v).collect();
    let lw = &model.weights().layers[layer];
    let gain: Vec<f64> = lw.ln2_gain.as_slice().iter().map(|v| v.as_f64()).collect();
    let ln = ln_segment_lipschitz(&pre, &pre_p, &gain, model.config().ln_eps);
    let lhs = dist2(&y, &yp);
    let rhs = l_hat * ln * (dist2(&x, &xp) + dist2(&a, &ap));
    let tol = 16.0 * S::epsilon().as_f64() * (norm2(&y) + norm2(&yp));
    Ok(PairBound { lhs, rhs, tol })
}

/// Counts of a bound checked over many pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `lhs / rhs` over pairs with `rhs > 0`.
    pub max_slack: f64,
}

impl BoundReport {
    fn add(&mut self, b: PairBound) {
        self.pairs += 1;
        if !b.holds() {
            self.violations += 1;
        }
        if b.rhs > 0.0 {
            self.max_slack = self.max_slack.max(b.lhs / b.rhs);
        }
    }

    fn merge(&mut self, o: &BoundReport) {
        self.pairs += o.pairs;
        self.violations += o.violations;
        self.max_slack = self.max_slack.max(o.max_slack);
    }
}

/// Certified MLP bound for `layer` on the ball holding every `LN₂` output.
pub fn layer_l_hat<S: Scalar>(model: &Transformer<S>, layer: usize) -> Result<f64> {
    let lw = model
        .weights()
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?;
    let r = ln_output_radius(lw.ln2_gain.as_slice(), lw.ln2_bias.as_slice());
    mlp_lipschitz_bound(model, layer, r)
}

/// Checks the MLP-similarity bound on every aligned pair of every layer.
pub fn verify_similarity_bound<S: Scalar>(
    model: &Transformer<S>,
    art: &ForwardArtifacts<S>,
) -> Result<BoundReport> {
    check_artifacts(model, art)?;
    let mut rep = BoundReport::default();
    for layer in 0..model.config().layers {
        let l_hat = layer_l_hat(model, layer)?;
        for j in 0..art.layout.video_len() {
            if art.layout.aligned(j).is_some() {
                rep.add(similarity_bound_pair(model, art, layer, j, l_hat)?);
            }
        }
    }
    Ok(rep)
}

/// Constants of `layer` measured over `runs`.
pub fn bound_constants<S: Scalar>(
    model: &Transformer<S>,
    runs: &[ForwardArtifacts<S>],
    layer: usize,
) -> Result<BoundConstants> {
    let lw = model
        .weights()
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?;
    let d = model.config().d;
    let eps = S::of(model.config().ln_eps);
    let mut m = 0.0f64;
    let mut buf = vec![S::zero(); d];
    for art in runs {
        check_artifacts(model, art)?;
        let h = &art.layers[layer].h_in;
        for r in 0..h.rows() {
            layer_norm_into(
                h.row(r),
                lw.ln1_gain.as_slice(),
                lw.ln1_bias.as_slice(),
                eps,
                &mut buf,
            );
            m = m.max(norm2(&buf).as_f64());
        }
    }
    let lambda = spectral_norm(&lw.w_q, POWER_ITERS)
        .as_f64()
        .max(spectral_norm(&lw.w_k, POWER_ITERS).as_f64());
    let gamma = spectral_norm(&lw.w_q.sub(&lw.w_k)?, POWER_ITERS).as_f64();
    Ok(BoundConstants {
        layer,
        m,
        lambda,
        gamma,
        l_hat: layer_l_hat(model, layer)?,
        c: None,
    })
}

/// A constant fitted on one split of the pairs and checked on the other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub layer: usize,
    pub calibration: usize,
    pub held_out: usize,
    /// Smallest constant satisfying every calibration pair.
    pub c: f64,
    pub violations: usize,
    /// Largest held-out `ratio / c`; at most 1 means no violation.
    pub slack: f64,
}

/// Splits `ratios` with a seeded shuffle, fits `c = max` on the first half and
/// measures the second half against it.
pub fn fit_and_hold_out(layer: usize, ratios: &[f64], seed: u64) -> Result<FitReport> {
    if ratios.len() < 4 {
        return Err(Error::Precondition(format!(
            "{} pairs are too few to split",
            ratios.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ratios.len()).collect();
    idx.shuffle(&mut rng::stream(seed, "holdout"));
    let (cal, held) = idx.split_at(ratios.len() / 2);
    let c = cal.iter().map(|&i| ratios[i]).fold(0.0, f64::max);
    if !(c > 0.0) {
        return Err(Error::Precondition(
            "calibration split has no positive ratio".into(),
        ));
    }
    let worst = held.iter().map(|&i| ratios[i]).fold(0.0, f64::max);
    Ok(FitReport {
        layer,
        calibration: cal.len(),
        held_out: held.len(),
        c,
        violations: held.iter().filter(|&&i| ratios[i] > c).count(),
        slack: worst / c,
    })
}

/// Which composite bound to fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FittedBound {
    /// `‖Attn_j − Attn_{j⁻}‖ ≤ C(√(1 − s) + γM)`.
    Attention,
    /// `‖Y_j − Y_{j⁻}‖ ≤ C(‖X_j − X_{j⁻}‖ + √(1 − s) + γM)`.
    Mlp,
}

/// Fits the constant of `bound` per layer over the pooled pairs of `runs`.
pub fn fit_bound<S: Scalar>(
    model: &Transformer<S>,
    runs: &[ForwardArtifacts<S>],
    bound: FittedBound,
    seed: u64,
) -> Result<Vec<(BoundConstants, FitReport)>> {
    let mut pairs = Vec::new();
    for art in runs {
        pairs.extend(aligned_pairs(model, art)?);
    }
    (0..model.config().layers)
        .map(|layer| {
            let mut k = bound_constants(model, runs, layer)?;
            let offset = k.gamma * k.m;
            let ratios: Vec<f64> = pairs
                .iter()
                .filter(|p| p.layer == layer)
                .map(|p| {
                    let base = (1.0 - p.s_norm).max(0.0).sqrt() + offset;
                    match bound {
                        FittedBound::Attention => p.attn_dist / base,
                        FittedBound::Mlp => p.y_dist / (p.x_dist + base),
                    }
                })
                .collect();
            let fit = fit_and_hold_out(layer, &ratios, seed ^ layer as u64)?;
            k.c = Some(fit.c);
            Ok((k, fit))
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
///
/// Returns `None` when either input is constant (range within `1e-12` relative).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || is_constant(x) || is_constant(y) {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn is_constant(v: &[f64]) -> bool {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1e-300)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            out[k] = avg;
        }
        start = end;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub pairs: usize,
    /// Spearman correlation of normalized TAS with `−‖Y_j − Y_{j⁻}‖`, pooled over layers.
    pub spearman: Option<f64>,
    pub per_layer: Vec<Option<f64>>,
    /// Per layer, per frame `t ≥ 2`: mean cosine of MLP outputs with the previous frame.
    pub similarity: Vec<Vec<f64>>,
    /// Pooled correlation after a seeded shuffle of the pairing.
    pub control: Option<f64>,
    /// Noise band for the control, `4/√pairs`.
    pub control_band: f64,
}

/// Rank correlation between normalized TAS and MLP output similarity.
pub fn tas_similarity_correlation<S: Scalar>(
    model: &Transformer<S>,
    art: &ForwardArtifacts<S>,
    seed: u64,
) -> Result<SimilarityStats> {
    let pairs = aligned_pairs(model, art)?;
    if pairs.len() < 50 {
        return Err(Error::Precondition(format!(
            "{} aligned pairs, need at least 50",
            pairs.len()
        )));
    }
    let layers = model.config().layers;
    let frames = art.layout.frames;
    // distances at rounding level everywhere carry no ordering
    let corr = |ps: &[&AlignedPair]| {
        if ps.iter().all(|p| p.y_dist <= 1e-9 * p.y_scale) {
            return None;
        }
        let s: Vec<f64> = ps.iter().map(|p| p.s_norm).collect();
        let y: Vec<f64> = ps.iter().map(|p| -p.y_dist).collect();
        spearman(&s, &y)
    };
    let all: Vec<&AlignedPair> = pairs.iter().collect();
    let per_layer = (0..layers)
        .map(|l| corr(&pairs.iter().filter(|p| p.layer == l).collect::<Vec<_>>()))
        .collect();
    let mut similarity = vec![vec![0.0; frames.saturating_sub(1)]; layers];
    let mut counts = vec![vec![0usize; frames.saturating_sub(1)]; layers];
    for p in &pairs {
        similarity[p.layer][p.t - 2] += p.y_cos;
        counts[p.layer][p.t - 2] += 1;
    }
    for (row, cnt) in similarity.iter_mut().zip(&counts) {
        for (v, c) in row.iter_mut().zip(cnt) {
            *v /= (*c).max(1) as f64;
        }
    }
    let s: Vec<f64> = pairs.iter().map(|p| p.s_norm).collect();
    let mut y: Vec<f64> = pairs.iter().map(|p| -p.y_dist).collect();
    y.shuffle(&mut rng::stream(seed, "permutation"));
    Ok(SimilarityStats {
        pairs: pairs.len(),
        spearman: corr(&all),
        per_layer,
        similarity,
        control: spearman(&s, &y),
        control_band: 4.0 / (pairs.len() as f64).sqrt(),
    })
}

/// Token stream whose even frames repeat the previous frame and whose odd frames
/// (after the first) are fresh random tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub layout: FrameLayout,
    /// Prompt followed by the video tokens.
    pub tokens: Vec<usize>,
    /// Per frame (index 0 is frame 1): whether it repeats the previous frame.
    pub duplicated: Vec<bool>,
}

pub fn duplicated_frame_fixture<S: Scalar>(
    model: &Transformer<S>,
    layout: &FrameLayout,
    seed: u64,
) -> Fixture {
    let vocab = model.config().vocab;
    let mut r = rng::stream(seed, "fixture");
    let mut tokens: Vec<usize> = (0..layout.prefill_len)
        .map(|_| r.random_range(0..vocab))
        .collect();
    let n = layout.tokens_per_frame;
    let duplicated: Vec<bool> = (1..=layout.frames).map(|t| t >= 2 && t % 2 == 0).collect();
    for dup in &duplicated {
        if *dup {
            let start = tokens.len() - n;
            for k in 0..n {
                tokens.push(tokens[start + k]);
            }
        } else {
            tokens.extend((0..n).map(|_| r.random_range(0..vocab)));
        }
    }
    Fixture {
        layout: *layout,
        tokens,
        duplicated,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureStats {
    pub duplicated_pairs: usize,
    pub random_pairs: usize,
    pub duplicated_mean_tas: f64,
    pub random_mean_tas: f64,
    pub correlation: SimilarityStats,
}

/// Mean normalized TAS over duplicated versus fresh frames, plus the correlation stats.
pub fn fixture_trend<S: Scalar>(
    model: &Transformer<S>,
    layout: &FrameLayout,
    seed: u64,
) -> Result<FixtureStats> {
    let fx = duplicated_frame_fixture(model, layout, seed);
    let art = model.teacher_forced_forward(layout, &fx.tokens)?;
    let pairs = aligned_pairs(model, &art)?;
    let (mut dup, mut rnd) = (Vec::new(), Vec::new());
    for p in &pairs {
        if fx.duplicated[p.t - 1] {
            dup.push(p.s_norm);
        } else {
            rnd.push(p.s_norm);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(FixtureStats {
        duplicated_pairs: dup.len(),
        random_pairs: rnd.len(),
        duplicated_mean_tas: mean(&dup),
        random_mean_tas: mean(&rnd),
        correlation: tas_similarity_correlation(model, &art, seed)?,
    })
}

/// Dense decode from a seeded random prompt, replayed teacher-forced to collect artifacts.
pub fn seeded_run<S: Scalar>(
    model: &Transformer<S>,
    layout: &FrameLayout,
    seed: u64,
) -> Result<ForwardArtifacts<S>> {
    let prompt = model.random_prompt(seed, layout);
    let tr = model.decode(layout, &prompt, None, None, &DecodeOptions::default())?;
    let tokens: Vec<usize> = prompt.into_iter().chain(tr.tokens).collect();
    model.teacher_forced_forward(layout, &tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub seed: u64,
    pub cosine_pairs: usize,
    /// Sampled centers per layer; all pairs among the `2·centers` points are checked.
    pub lipschitz_centers: usize,
    /// Number of seeded runs for the pair-based checks.
    pub runs: usize,
    /// Held-out slack accepted for fitted constants.
    pub max_slack: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            seed: 7,
            cosine_pairs: 10_000,
            lipschitz_centers: 224,
            runs: 5,
            max_slack: 1.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Whether the outcome counts toward the overall verdict.
    pub gating: bool,
    pub count: usize,
    pub violations: usize,
    pub max_slack: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub constants: Vec<BoundConstants>,
    pub fixture: Option<FixtureStats>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || !c.gating)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Runs every check on `model` and collects the outcomes.
pub fn verify_all<S: Scalar>(
    model: &Transformer<S>,
    layout: &FrameLayout,
    settings: &VerifySettings,
) -> Result<VerificationReport> {
    let mut rep = VerificationReport::default();
    let layers = model.config().layers;

    let worst = cosine_law_sweep(settings.cosine_pairs, settings.seed)?;
    rep.checks.push(Check {
        name: "unit-cosine-law".into(),
        passed: worst <= 1e-9,
        gating: true,
        count: settings.cosine_pairs,
        violations: usize::from(worst > 1e-9),
        max_slack: worst,
        detail: "max |lhs - rhs|".into(),
    });

    let mut lip = LipschitzSample {
        pairs: 0,
        violations: 0,
        max_ratio: 0.0,
        bound: 0.0,
    };
    let mut min_pairs = usize::MAX;
    for layer in 0..layers {
        let lw = &model.weights().layers[layer];
        let r = ln_output_radius(lw.ln2_gain.as_slice(), lw.ln2_bias.as_slice());
        let bound = mlp_lipschitz_bound(model, layer, r)?;
        let s = sample_lipschitz(
            &lw.w_gate,
            &lw.w_up,
            &lw.w_down,
            r,
            bound,
            settings.lipschitz_centers,
            settings.seed ^ layer as u64,
        );
        min_pairs = min_pairs.min(s.pairs);
        lip.pairs += s.pairs;
        lip.violations += s.violations;
        lip.max_ratio = lip.max_ratio.max(s.max_ratio / bound);
    }
    rep.checks.push(Check {
        name: "mlp-lipschitz".into(),
        passed: lip.violations == 0,
        gating: true,
        count: lip.pairs,
        violations: lip.violations,
        max_slack: lip.max_ratio,
        detail: format!("fewest pairs in one layer: {min_pairs}; slack = sampled ratio / bound"),
    });

    let runs = (0..settings.runs as u64)
        .map(|k| seeded_run(model, layout, settings.seed.wrapping_add(k)))
        .collect::<Result<Vec<_>>>()?;
    let mut t2 = BoundReport::default();
    for art in &runs {
        t2.merge(&verify_similarity_bound(model, art)?);
    }
    rep.checks.push(Check {
        name: "mlp-similarity-bound".into(),
        passed: t2.violations == 0 && t2.pairs > 0,
        gating: true,
        count: t2.pairs,
        violations: t2.violations,
        max_slack: t2.max_slack,
        detail: format!("{} seeded runs; slack = lhs / rhs", runs.len()),
    });

    for (name, bound) in [
        ("attention-fit", FittedBound::Attention),
        ("tas-mlp-fit", FittedBound::Mlp),
    ] {
        let fits = fit_bound(model, &runs, bound, settings.seed)?;
        let slack = fits.iter().map(|(_, f)| f.slack).fold(0.0, f64::max);
        let cs: Vec<String> = fits.iter().map(|(_, f)| format!("{:.4}", f.c)).collect();
        rep.checks.push(Check {
            name: name.into(),
            passed: slack <= settings.max_slack,
            gating: bound == FittedBound::Mlp,
            count: fits.iter().map(|(_, f)| f.held_out).sum(),
            violations: fits.iter().map(|(_, f)| f.violations).sum(),
            max_slack: slack,
            detail: format!(
                "held-out slack limit {}; fitted C per layer [{}]",
                settings.max_slack,
                cs.join(", ")
            ),
        });
        if bound == FittedBound::Mlp {
            rep.constants = fits.into_iter().map(|(k, _)| k).collect();
        }
    }

    let fx = fixture_trend(model, layout, settings.seed)?;
    let rho = fx.correlation.spearman;
    rep.checks.push(Check {
        name: "tas-similarity-trend".into(),
        passed: fx.duplicated_mean_tas > fx.random_mean_tas && rho.is_some_and(|r| r > 0.0),
        gating: true,
        count: fx.correlation.pairs,
        violations: 0,
        max_slack: rho.unwrap_or(f64::NAN),
        detail: format!(
            "mean TAS duplicated {:.6} vs fresh {:.6}; spearman {:?}; control {:?} (band {:.4})",
            fx.duplicated_mean_tas,
            fx.random_mean_tas,
            rho,
            fx.correlation.control,
            fx.correlation.control_band
        ),
    });
    rep.fixture = Some(fx);
    Ok(rep)
}
