//! Coupling-tightening loss: disparity-inconsistency-aware cross-entropy
//! (DIA), deep-supervision consistency (DSCC), a semantic-consistency term
//! (SCG, photometric substitute) and the stereo smooth-L1 (SM).
//!
//! Every term is a tape op, so gradients reach both the class probabilities
//! and the disparities that produce the per-pixel weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to this before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub enable_dia: bool,
    pub enable_dscc: bool,
    pub enable_scg: bool,
    pub enable_sm: bool,
    /// Use the printed (negated) sign of the consistency term.
    pub paper_literal_sign: bool,
    pub dscc_reduction: DsccReduction,
}

/// How the pairwise KL terms are combined. `Sum` grows with `L(L-1)`, so the
/// same `beta` means a much stronger pull on a five-head decoder than on a
/// two-head one; `PairMean` divides by the number of ordered pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsccReduction {
    Sum,
    #[default]
    PairMean,
}

impl DsccReduction {
    /// Factor applied to `beta` for `branches` heads.
    pub fn scale(self, branches: usize) -> f64 {
        match self {
            Self::Sum => 1.0,
            Self::PairMean if branches > 1 => 1.0 / (branches * (branches - 1)) as f64,
            Self::PairMean => 1.0,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            beta: 1.0,
            enable_dia: true,
            enable_dscc: true,
            enable_scg: true,
            enable_sm: true,
            paper_literal_sign: false,
            dscc_reduction: DsccReduction::PairMean,
        }
    }
}

/// Left-right consistency residual and its sigmoid normalisation.
#[derive(Clone, Debug)]
pub struct WeightMap {
    /// `D^L(p) - D^R(p - (D^L(p), 0))`, zero where the correspondence is invalid.
    pub raw: Var,
    /// `sigmoid(|raw|)`, in `[0.5, 1)`.
    pub normalized: Var,
    pub valid: Vec<bool>,
}

fn mask_tensor<T: Real>(h: usize, w: usize, mask: &[bool]) -> Tensor<T> {
    Tensor::from_fn(&[1, h, w], |i| if mask[i] { T::one() } else { T::zero() })
}

/// Weight map from left/right disparities (`[1, H, W]` each). `valid` marks
/// pixels allowed to contribute; out-of-frame correspondences are removed too
/// and every removed pixel ends up with the neutral weight 0.5.
pub fn lr_consistency_weight<T: Real>(tape: &mut Tape<T>, d_left: Var, d_right: Var, valid: &[bool]) -> Result<WeightMap> {
    let (c, h, w) = tape.chw(d_left);
    if c != 1 || tape.shape(d_right) != tape.shape(d_left) || valid.len() != h * w {
        return Err(Error::Shape(format!(
            "consistency weight: left {:?}, right {:?}, mask {}",
            tape.shape(d_left),
            tape.shape(d_right),
            valid.len()
        )));
    }
    let (sampled, in_frame) = tape.warp_horizontal(d_right, d_left)?;
    let diff = tape.sub(d_left, sampled)?;
    let keep: Vec<bool> = valid.iter().zip(&in_frame).map(|(&a, &b)| a && b).collect();
    let raw = tape.mul_const(diff, &mask_tensor(h, w, &keep))?;
    let mag = tape.abs(raw);
    let normalized = tape.sigmoid(mag);
    Ok(WeightMap { raw, normalized, valid: keep })
}

fn check_labels<T: Real>(tape: &Tape<T>, prob: Var, labels: &[u8]) -> Result<(usize, usize)> {
    let (c, h, w) = tape.chw(prob);
    if labels.len() != h * w {
        return Err(Error::Shape(format!("{} labels for a {h}x{w} map", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::LabelOutOfRange { label: bad as usize, classes: c });
    }
    Ok((c, h * w))
}

impl<T: Real> Tape<T> {
    /// `-(1/N) Σ_p w(p) log max(prob[y_p](p), floor)` over `N` pixels.
    /// Without `weight` every pixel counts with weight 1.
    pub fn weighted_nll(&mut self, prob: Var, labels: &[u8], weight: Option<Var>) -> Result<Var> {
        let (_, hw) = check_labels(self, prob, labels)?;
        if let Some(wv) = weight {
            if self.value(wv).len() != hw {
                return Err(Error::Shape(format!("weight map {:?} for {hw} pixels", self.shape(wv))));
            }
        }
        let floor = T::c(PROB_FLOOR);
        let n = T::c(hw as f64);
        let pv = self.value(prob).data();
        let wv = weight.map(|v| self.value(v).data());
        let mut acc = T::zero();
        for (p, &y) in labels.iter().enumerate() {
            let q = pv[y as usize * hw + p].max(floor);
            acc += wv.map_or(T::one(), |w| w[p]) * q.ln();
        }
        let out = Tensor::scalar(-acc / n);
        let labels = labels.to_vec();
        let mut parents = vec![prob];
        parents.extend(weight);
        Ok(self.op(out, &parents, move |g, vals, grads| {
            let pv = vals[prob.0].data();
            let scale = g[0] / n;
            if grads.wants(prob) {
                let wv = weight.map(|v| vals[v.0].data());
                let d = grads.slot(prob);
                for (p, &y) in labels.iter().enumerate() {
                    let i = y as usize * hw + p;
                    if pv[i] > floor {
                        d[i] -= scale * wv.map_or(T::one(), |w| w[p]) / pv[i];
                    }
                }
            }
            if let Some(wv) = weight {
                if grads.wants(wv) {
                    let d = grads.slot(wv);
                    for (p, &y) in labels.iter().enumerate() {
                        d[p] -= scale * pv[y as usize * hw + p].max(floor).ln();
                    }
                }
            }
        }))
    }

    /// `sign · Σ_r Σ_{s≠r} (1/N) Σ_p Σ_k q_r log(q_r / q_s)` with `q = max(p, floor)`.
    pub fn pairwise_kl(&mut self, probs: &[Var], sign: T) -> Result<Var> {
        if probs.len() < 2 {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        }
        let shape = self.shape(probs[0]).to_vec();
        if probs.iter().any(|&p| self.shape(p) != shape.as_slice()) {
            return Err(Error::Shape("branch probability maps differ in shape".into()));
        }
        let (_, h, w) = self.chw(probs[0]);
        let n = T::c((h * w) as f64);
        let floor = T::c(PROB_FLOOR);
        let vals: Vec<&[T]> = probs.iter().map(|&p| self.value(p).data()).collect();
        let mut acc = T::zero();
        for (r, pr) in vals.iter().enumerate() {
            for (s, ps) in vals.iter().enumerate() {
                if r == s {
                    continue;
                }
                for (&a, &b) in pr.iter().zip(ps.iter()) {
                    let (a, b) = (a.max(floor), b.max(floor));
                    acc += a * (a / b).ln();
                }
            }
        }
        let out = Tensor::scalar(sign * acc / n);
        let probs = probs.to_vec();
        let parents = probs.clone();
        Ok(self.op(out, &parents, move |g, vals, grads| {
            let scale = sign * g[0] / n;
            let len = vals[probs[0].0].len();
            let mut dq = vec![vec![T::zero(); len]; probs.len()];
            for r in 0..probs.len() {
                for s in 0..probs.len() {
                    if r == s {
                        continue;
                    }
                    let (pr, ps) = (vals[probs[r].0].data(), vals[probs[s].0].data());
                    for i in 0..len {
                        let (a, b) = (pr[i].max(floor), ps[i].max(floor));
                        dq[r][i] += (a / b).ln() + T::one();
                        dq[s][i] -= a / b;
                    }
                }
            }
            for (k, &pv) in probs.iter().enumerate() {
                if !grads.wants(pv) {
                    continue;
                }
                let raw = vals[pv.0].data();
                let d = grads.slot(pv);
                for i in 0..len {
                    if raw[i] > floor {
                        d[i] += scale * dq[k][i];
                    }
                }
            }
        }))
    }

    /// Mean smooth-L1 (`0.5x²` below 1, `|x| - 0.5` above) over `valid` pixels.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, valid: &[bool]) -> Result<Var> {
        if self.shape(pred) != target.shape() || valid.len() != target.len() {
            return Err(Error::Shape(format!(
                "smooth-L1: prediction {:?}, target {:?}, mask {}",
                self.shape(pred),
                target.shape(),
                valid.len()
            )));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            log::warn!("smooth-L1 over an empty mask; term is 0");
            return Ok(self.constant(Tensor::scalar(T::zero())));
        }
        let n = T::c(count as f64);
        let half = T::c(0.5);
        let diff: Vec<T> = self.value(pred).data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let mut acc = T::zero();
        for (x, _) in diff.iter().zip(valid).filter(|(_, &v)| v) {
            let a = x.abs();
            acc += if a < T::one() { half * a * a } else { a - half };
        }
        let valid = valid.to_vec();
        Ok(self.op(Tensor::scalar(acc / n), &[pred], move |g, _, grads| {
            let d = grads.slot(pred);
            for ((di, &x), _) in d.iter_mut().zip(&diff).zip(&valid).filter(|(_, &v)| v) {
                let slope = if x.abs() < T::one() { x } else { x.signum() };
                *di += g[0] * slope / n;
            }
        }))
    }
}

/// Disparity-weighted term: `alpha · Σ_branches weighted_nll(branch, labels, W^N)`.
pub fn dia_loss<T: Real>(tape: &mut Tape<T>, branch_probs: &[Var], labels: &[u8], weight: Var, alpha: f64) -> Result<Var> {
    let terms = branch_probs
        .iter()
        .map(|&p| Ok((tape.weighted_nll(p, labels, Some(weight))?, T::c(alpha))))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(&terms)
}

/// Unweighted cross-entropy summed over branches.
pub fn branch_cross_entropy<T: Real>(tape: &mut Tape<T>, branch_probs: &[Var], labels: &[u8]) -> Result<Var> {
    let terms =
        branch_probs.iter().map(|&p| Ok((tape.weighted_nll(p, labels, None)?, T::one()))).collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(&terms)
}

/// `beta · Σ_r Σ_{s≠r} KL(p_r ‖ p_s)` averaged over pixels; 0 for one branch.
pub fn dscc_loss<T: Real>(tape: &mut Tape<T>, branch_probs: &[Var], beta: f64, paper_literal_sign: bool) -> Result<Var> {
    let sign = if paper_literal_sign { -beta } else { beta };
    tape.pairwise_kl(branch_probs, T::c(sign))
}

pub fn sm_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, valid: &[bool]) -> Result<Var> {
    tape.smooth_l1(pred, target, valid)
}

/// Semantic-consistency term. The interface takes everything a view-consistency
/// loss could need so alternative formulations can be swapped in.
pub trait SemanticConsistency<T: Real> {
    fn loss(
        &self,
        tape: &mut Tape<T>,
        probs: Var,
        labels: &[u8],
        left: Var,
        right: Var,
        d_left: Var,
    ) -> Result<Var>;
}

/// Cross-entropy weighted by `sigmoid(|I_L - warp(I_R, D^L)|)`, the channel-mean
/// photometric error; pixels without a correspondence weigh 0.5.
#[derive(Clone, Copy, Debug, Default)]
pub struct PhotometricScg;

impl PhotometricScg {
    pub fn weight<T: Real>(&self, tape: &mut Tape<T>, left: Var, right: Var, d_left: Var) -> Result<Var> {
        let (_, h, w) = tape.chw(left);
        let (warped, in_frame) = tape.warp_horizontal(right, d_left)?;
        let diff = tape.sub(left, warped)?;
        let err = tape.abs(diff);
        let err = tape.channel_mean(err);
        let err = tape.mul_const(err, &mask_tensor(h, w, &in_frame))?;
        Ok(tape.sigmoid(err))
    }
}

impl<T: Real> SemanticConsistency<T> for PhotometricScg {
    fn loss(&self, tape: &mut Tape<T>, probs: Var, labels: &[u8], left: Var, right: Var, d_left: Var) -> Result<Var> {
        let w = self.weight(tape, left, right, d_left)?;
        tape.weighted_nll(probs, labels, Some(w))
    }
}

/// Per-term values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dia: f64,
    pub dscc: f64,
    pub scg: f64,
    pub sm: f64,
    /// Plain cross-entropy used when the DIA term is disabled.
    pub ce: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Sum of the parts; a non-finite part is rejected by name.
    pub fn from_parts(dia: f64, dscc: f64, scg: f64, sm: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::with_ce(dia, dscc, scg, sm, 0.0, alpha, beta)
    }

    pub fn with_ce(dia: f64, dscc: f64, scg: f64, sm: f64, ce: f64, alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("dia", dia), ("dscc", dscc), ("scg", scg), ("sm", sm), ("ce", ce)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {v}")));
            }
        }
        Ok(Self { dia, dscc, scg, sm, ce, total: dia + dscc + scg + sm + ce, alpha, beta })
    }
}

/// Tape handles of the enabled terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct CtParts {
    pub dia: Option<Var>,
    pub dscc: Option<Var>,
    pub scg: Option<Var>,
    pub sm: Option<Var>,
    pub ce: Option<Var>,
}

/// Sum of the enabled terms and its breakdown.
pub fn ct_total<T: Real>(tape: &mut Tape<T>, parts: &CtParts, alpha: f64, beta: f64) -> Result<(Var, LossBreakdown)> {
    let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().f64());
    let breakdown =
        LossBreakdown::with_ce(val(parts.dia), val(parts.dscc), val(parts.scg), val(parts.sm), val(parts.ce), alpha, beta)?;
    let terms: Vec<(Var, T)> =
        [parts.dia, parts.dscc, parts.scg, parts.sm, parts.ce].into_iter().flatten().map(|v| (v, T::one())).collect();
    let total = if terms.is_empty() { tape.constant(Tensor::scalar(T::zero())) } else { tape.weighted_sum(&terms)? };
    Ok((total, breakdown))
}
