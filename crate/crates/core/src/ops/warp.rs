use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Sampling position of one output pixel: left tap, right tap, fraction.
#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    frac: f64,
}

fn taps<T: Real>(disp: &[T], h: usize, w: usize) -> Vec<Option<Tap>> {
    let mut out = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let x = u as f64 - disp[v * w + u].f64();
            if !(0.0..=(w - 1) as f64).contains(&x) {
                out.push(None);
                continue;
            }
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let frac = if x1 == x0 { 0.0 } else { x - x0 as f64 };
            out.push(Some(Tap { x0, x1, frac }));
        }
    }
    out
}

/// Direct (non-differentiable) warp used by data checks and metrics.
pub fn warp_tensor<T: Real>(img: &Tensor<T>, disp: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    let mut tape = Tape::new();
    let i = tape.constant(img.clone());
    let d = tape.constant(disp.clone());
    let (o, valid) = tape.warp_horizontal(i, d)?;
    Ok((tape.value(o).clone(), valid))
}

impl<T: Real> Tape<T> {
    /// `out(c, v, u) = img(c, v, u - disp(v, u))` with linear interpolation
    /// along the row. Samples that leave the frame are zero and flagged
    /// `false` in the returned mask. `disp` is `[1, H, W]` and nonnegative.
    pub fn warp_horizontal(&mut self, img: Var, disp: Var) -> Result<(Var, Vec<bool>)> {
        let (c, h, w) = self.chw(img);
        let (dc, dh, dw) = self.chw(disp);
        if dc != 1 || (dh, dw) != (h, w) {
            return Err(Error::Shape(format!("warp: disparity [{dc},{dh},{dw}] vs image [{c},{h},{w}]")));
        }
        let dv = self.value(disp).data();
        if let Some(bad) = dv.iter().find(|d| !(**d >= T::zero())) {
            return Err(Error::Invalid(format!("negative or non-finite disparity {bad}")));
        }
        let taps = taps(dv, h, w);
        let hw = h * w;
        let iv = self.value(img).data();
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for (p, tap) in taps.iter().enumerate() {
                if let Some(t) = tap {
                    let row = &iv[ch * hw + (p / w) * w..][..w];
                    let f = T::c(t.frac);
                    out[ch * hw + p] = row[t.x0] * (T::one() - f) + row[t.x1] * f;
                }
            }
        }
        let valid = taps.iter().map(Option::is_some).collect();
        let t = Tensor::new(&[c, h, w], out)?;
        let y = self.op(t, &[img, disp], move |g, vals, grads| {
            if grads.wants(img) {
                let di = grads.slot(img);
                for ch in 0..c {
                    for (p, tap) in taps.iter().enumerate() {
                        if let Some(t) = tap {
                            let base = ch * hw + (p / w) * w;
                            let f = T::c(t.frac);
                            di[base + t.x0] += g[ch * hw + p] * (T::one() - f);
                            di[base + t.x1] += g[ch * hw + p] * f;
                        }
                    }
                }
            }
            if grads.wants(disp) {
                let iv = vals[img.0].data();
                let dd = grads.slot(disp);
                for (p, tap) in taps.iter().enumerate() {
                    let Some(t) = tap else { continue };
                    if t.x1 == t.x0 {
                        continue;
                    }
                    let mut s = T::zero();
                    for ch in 0..c {
                        let base = ch * hw + (p / w) * w;
                        // d out / d x = I[x1] - I[x0]; x = u - disp.
                        s += g[ch * hw + p] * (iv[base + t.x1] - iv[base + t.x0]);
                    }
                    dd[p] -= s;
                }
            }
        });
        Ok((y, valid))
    }
}
