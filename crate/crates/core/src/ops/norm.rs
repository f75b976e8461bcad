use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which statistics normalise the input.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Per-channel mean and (biased) variance of the current input.
    Batch,
    /// Stored running statistics; the op is then affine in `x`.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics observed during a [`NormStats::Batch`] forward.
#[derive(Clone, Debug)]
pub struct ObservedStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> Tape<T> {
    /// Per-channel normalisation of `[C, H, W]` with affine `gamma`, `beta` (`[C]` each).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<ObservedStats<T>>)> {
        let (c, h, w) = self.chw(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("batch norm over {c} channels needs [{c}] affine params")));
        }
        let hw = h * w;
        let n = T::c(hw as f64);
        let xv = self.value(x).data();
        let (mean, var, observed) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let s = &xv[ch * hw..(ch + 1) * hw];
                    let m = s.iter().copied().sum::<T>() / n;
                    let v = s.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / n;
                    mean[ch] = m;
                    var[ch] = v;
                }
                (mean.clone(), var.clone(), Some(ObservedStats { mean, var }))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("running statistics length".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for i in 0..hw {
                let xh = (xv[ch * hw + i] - mean[ch]) * inv_std[ch];
                out[ch * hw + i] = gv[ch] * xh + bv[ch];
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        let batch = observed.is_some();
        let y = self.op(t, &[x, gamma, beta], move |dy, vals, grads| {
            let xv = vals[x.0].data();
            let gv = vals[gamma.0].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let want_x = grads.wants(x);
            let mut dx = if want_x { vec![T::zero(); c * hw] } else { Vec::new() };
            for ch in 0..c {
                let mut sdy = T::zero();
                let mut sdyx = T::zero();
                for i in 0..hw {
                    let xh = (xv[ch * hw + i] - mean[ch]) * inv_std[ch];
                    sdy += dy[ch * hw + i];
                    sdyx += dy[ch * hw + i] * xh;
                }
                dgamma[ch] = sdyx;
                dbeta[ch] = sdy;
                if want_x {
                    let k = gv[ch] * inv_std[ch];
                    for i in 0..hw {
                        let idx = ch * hw + i;
                        dx[idx] = if batch {
                            let xh = (xv[idx] - mean[ch]) * inv_std[ch];
                            k * (dy[idx] - sdy / n - xh * sdyx / n)
                        } else {
                            k * dy[idx]
                        };
                    }
                }
            }
            if want_x {
                grads.accumulate(x, &dx);
            }
            grads.accumulate(gamma, &dgamma);
            grads.accumulate(beta, &dbeta);
        });
        Ok((y, observed))
    }
}
