//! The full finite-difference suite: every tape op and every loss term on
//! small random instances. Inputs that meet a kink (ReLU, |x|, clamp, the
//! integer knots of linear interpolation) are kept away from it so central
//! differences are meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};
use crate::encoder::Remap;
use crate::error::Result;
use crate::loss::{
    ct_total, dia_loss, dscc_loss, lr_consistency_weight, sm_loss, CtParts, PhotometricScg, SemanticConsistency,
};
use crate::ops::NormStats;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct CaseResult {
    pub name: &'static str,
    pub outcome: Result<GradCheckReport>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(r) if r.passed())
    }
}

type Case = (&'static str, fn(&mut ChaCha8Rng) -> Result<GradCheckReport>);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::random_uniform(shape, lo, hi, rng)
}

/// Uniform in ±[0.1, 1]: away from the kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Nonnegative disparities in `[0, max)` with fractional part in [0.15, 0.85].
fn fractional_disparity(rng: &mut ChaCha8Rng, shape: &[usize], max: usize) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(0..max) as f64 + rng.random_range(0.15..0.85))
}

fn probabilities(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    let raw = uniform(rng, &[c, h, w], 0.05, 1.0);
    let mut p = raw.clone();
    for i in 0..h * w {
        let z: f64 = (0..c).map(|k| raw.data()[k * h * w + i]).sum();
        for k in 0..c {
            p.data_mut()[k * h * w + i] = raw.data()[k * h * w + i] / z;
        }
    }
    p
}

fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..c) as u8).collect()
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output element matters.
fn project(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let r = Tensor::random_uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let m = t.mul_const(out, &r)?;
    Ok(t.sum(m))
}

fn check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check(f, inputs, DEFAULT_EPS, DEFAULT_TOL)
}

fn binary(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[2])?;
            let c = t.mul(b, v[1])?;
            project(t, c, s)
        },
        &[uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 3, 4], -1.0, 1.0)],
    )
}

fn broadcast_and_scale(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    let k = uniform(rng, &[2, 3, 4], -1.0, 1.0);
    check(
        |t, v| {
            let a = t.mul_broadcast(v[0], v[1])?;
            let b = t.scale(a, v[2])?;
            let c = t.mul_const(b, &k)?;
            let d = t.affine(c, 0.7, -0.3);
            project(t, d, s)
        },
        &[uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[1, 3, 4], -1.0, 1.0), uniform(rng, &[1], 0.5, 2.0)],
    )
}

fn pointwise(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let a = t.relu(v[0]);
            let b = t.abs(v[1]);
            let c = t.sigmoid(v[2]);
            let d = t.clamp(v[3], -0.5, 0.5);
            let ab = t.add(a, b)?;
            let cd = t.add(c, d)?;
            let e = t.mul(ab, cd)?;
            project(t, e, s)
        },
        &[
            off_zero(rng, &[2, 3, 3]),
            off_zero(rng, &[2, 3, 3]),
            uniform(rng, &[2, 3, 3], -3.0, 3.0),
            // Values near ±0.5 would straddle the clamp bounds.
            Tensor::from_fn(&[2, 3, 3], |i| [-0.9, -0.3, 0.1, 0.35, 0.8, -0.05][i % 6] + 0.01 * (i as f64).sin()),
        ],
    )
}

fn reductions(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    check(
        |t, v| {
            let a = t.sum(v[0]);
            let b = t.mean(v[1]);
            let c = t.channel_mean(v[0]);
            let cs = t.mul(c, c)?;
            let d = t.sum(cs);
            t.weighted_sum(&[(a, 0.3), (b, -1.2), (d, 0.8)])
        },
        &[uniform(rng, &[3, 2, 4], -1.0, 1.0), uniform(rng, &[2, 2, 2], -1.0, 1.0)],
    )
}

fn layout(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let a = t.concat_channels(&[v[0], v[1]])?;
            let b = t.flip_horizontal(a);
            project(t, b, s)
        },
        &[uniform(rng, &[2, 3, 5], -1.0, 1.0), uniform(rng, &[1, 3, 5], -1.0, 1.0)],
    )
}

fn convolution(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let a = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
            let b = t.conv2d(a, v[3], None, 2)?;
            project(t, b, s)
        },
        &[
            uniform(rng, &[2, 5, 6], -1.0, 1.0),
            uniform(rng, &[3, 2, 3, 3], -0.5, 0.5),
            uniform(rng, &[3], -0.5, 0.5),
            uniform(rng, &[2, 3, 3, 3], -0.5, 0.5),
        ],
    )
}

fn batch_norm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    let (mean, var) = ([0.2, -0.1], [0.7, 1.6]);
    check(
        |t, v| {
            let (a, _) = t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
            let (b, _) = t.batch_norm(v[0], v[1], v[2], NormStats::Running { mean: &mean, var: &var }, 1e-5)?;
            let c = t.add(a, b)?;
            project(t, c, s)
        },
        &[uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2], 0.5, 1.5), uniform(rng, &[2], -0.5, 0.5)],
    )
}

fn resize(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let a = t.resize_bilinear(v[0], 7, 5)?;
            let b = t.resize_bilinear(a, 3, 2)?;
            let c = t.upsample_bilinear(b, 2)?;
            project(t, c, s)
        },
        &[uniform(rng, &[2, 4, 3], -1.0, 1.0)],
    )
}

fn softmax(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let p = t.softmax_channels(v[0]);
            project(t, p, s)
        },
        &[uniform(rng, &[4, 2, 3], -3.0, 3.0)],
    )
}

fn warp(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let (y, _) = t.warp_horizontal(v[0], v[1])?;
            project(t, y, s)
        },
        &[uniform(rng, &[2, 3, 7], -1.0, 1.0), fractional_disparity(rng, &[1, 3, 7], 4)],
    )
}

fn correlation(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let (c, _) = t.correlation(v[0], v[1], 3)?;
            project(t, c, s)
        },
        &[uniform(rng, &[3, 2, 6], -1.0, 1.0), uniform(rng, &[3, 2, 6], -1.0, 1.0)],
    )
}

fn soft_argmin(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let d = t.soft_argmin(v[0], 2.0)?;
            project(t, d, s)
        },
        &[uniform(rng, &[5, 3, 4], -2.0, 2.0)],
    )
}

fn sig_combine(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let s = rng.random();
    check(
        |t, v| {
            let y = t.sig_combine(v[0], v[1], v[2], v[3])?;
            project(t, y, s)
        },
        &[
            uniform(rng, &[3, 2, 4], -1.0, 1.0),
            uniform(rng, &[3, 2, 4], -1.0, 1.0),
            uniform(rng, &[1, 2, 4], 0.0, 1.0),
            uniform(rng, &[1, 2, 4], 0.0, 1.0),
        ],
    )
}

fn remap(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    // The 1x1 remap that aligns the previous layer before the gate combine.
    let s = rng.random();
    let mut store = crate::nn::ParamStore::<f64>::new(rng.random());
    let remap = Remap::new(&mut store, "remap", 2, 3, true);
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let x = uniform(rng, &[2, 6, 4], -1.0, 1.0);
    super::grad_check_model(&store, &ids, &[x], DEFAULT_EPS, DEFAULT_TOL, |sess, v| {
        let y = remap.forward(sess, v[0], 3, 2)?;
        project(&mut sess.tape, y, s)
    })
}

fn dia(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (c, h, w) = (3, 3, 6);
    let lab = labels(rng, h * w, c);
    let valid: Vec<bool> = (0..h * w).map(|i| i % 5 != 0).collect();
    check(
        |t, v| {
            let wm = lr_consistency_weight(t, v[2], v[3], &valid)?;
            dia_loss(t, &[v[0], v[1]], &lab, wm.normalized, 1.5)
        },
        &[
            probabilities(rng, c, h, w),
            probabilities(rng, c, h, w),
            fractional_disparity(rng, &[1, h, w], 3),
            fractional_disparity(rng, &[1, h, w], 3),
        ],
    )
}

fn consistency_weight(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (h, w) = (3, 7);
    let s = rng.random();
    let valid = vec![true; h * w];
    check(
        |t, v| {
            let wm = lr_consistency_weight(t, v[0], v[1], &valid)?;
            let r = project(t, wm.raw, s)?;
            let n = project(t, wm.normalized, s ^ 1)?;
            t.add(r, n)
        },
        &[fractional_disparity(rng, &[1, h, w], 4), fractional_disparity(rng, &[1, h, w], 4)],
    )
}

fn dscc(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (c, h, w) = (3, 2, 3);
    let inputs = [probabilities(rng, c, h, w), probabilities(rng, c, h, w), probabilities(rng, c, h, w)];
    let plus = check(|t, v| dscc_loss(t, v, 1.0, false), &inputs)?;
    let minus = check(|t, v| dscc_loss(t, v, 0.5, true), &inputs)?;
    Ok(if plus.max_rel_err >= minus.max_rel_err { plus } else { minus })
}

fn scg(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (c, h, w) = (3, 3, 6);
    let lab = labels(rng, h * w, c);
    check(
        |t, v| PhotometricScg.loss(t, v[0], &lab, v[1], v[2], v[3]),
        &[
            probabilities(rng, c, h, w),
            uniform(rng, &[3, h, w], 0.0, 1.0),
            uniform(rng, &[3, h, w], 0.0, 1.0),
            fractional_disparity(rng, &[1, h, w], 3),
        ],
    )
}

fn sm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (h, w) = (3, 5);
    // Residuals land on both sides of the quadratic/linear switch at 1.
    let target = Tensor::from_fn(&[1, h, w], |i| [0.0, 1.0, 2.5, 4.0, 0.3][i % 5]);
    let valid: Vec<bool> = (0..h * w).map(|i| i % 4 != 3).collect();
    let pred = Tensor::from_fn(&[1, h, w], |i| {
        let off: f64 = rng.random_range(0.1..0.8);
        target.data()[i] + if i % 2 == 0 { off } else { -(off + 1.5) }
    });
    check(|t, v| sm_loss(t, v[0], &target, &valid), &[pred])
}

fn ct_combine(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    check(
        |t, v| {
            let parts: Vec<Var> = (0..4)
                .map(|i| {
                    let m = t.mul(v[i], v[i])?;
                    Ok(t.mean(m))
                })
                .collect::<Result<_>>()?;
            let ct = CtParts { dia: Some(parts[0]), dscc: Some(parts[1]), scg: Some(parts[2]), sm: Some(parts[3]), ce: None };
            Ok(ct_total(t, &ct, 1.5, 1.0)?.0)
        },
        &[
            uniform(rng, &[1, 2, 2], -1.0, 1.0),
            uniform(rng, &[1, 2, 2], -1.0, 1.0),
            uniform(rng, &[1, 2, 2], -1.0, 1.0),
            uniform(rng, &[1, 2, 2], -1.0, 1.0),
        ],
    )
}

const CASES: [Case; 21] = [
    ("add/sub/mul", binary),
    ("mul_broadcast/scale/mul_const/affine", broadcast_and_scale),
    ("relu/abs/sigmoid/clamp", pointwise),
    ("sum/mean/channel_mean/weighted_sum", reductions),
    ("concat/flip", layout),
    ("conv2d", convolution),
    ("batch_norm", batch_norm),
    ("resize_bilinear/upsample", resize),
    ("softmax_channels", softmax),
    ("warp_horizontal", warp),
    ("correlation", correlation),
    ("soft_argmin", soft_argmin),
    ("sig_combine", sig_combine),
    ("remap", remap),
    ("lr_consistency_weight", consistency_weight),
    ("dia_loss", dia),
    ("dscc_loss", dscc),
    ("scg_loss", scg),
    ("sm_loss", sm),
    ("ct_total", ct_combine),
    ("weighted_nll", weighted_nll),
];

fn weighted_nll(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (c, h, w) = (4, 2, 3);
    let lab = labels(rng, h * w, c);
    check(|t, v| t.weighted_nll(v[0], &lab, Some(v[1])), &[probabilities(rng, c, h, w), uniform(rng, &[1, h, w], 0.5, 1.0)])
}

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|c| c.0).collect()
}

/// Run every case; each draws its instance from `seed` and its own index.
pub fn run_suite(seed: u64) -> Vec<CaseResult> {
    CASES
        .iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64 + 1) << 32));
            CaseResult { name, outcome: f(&mut rng) }
        })
        .collect()
}
