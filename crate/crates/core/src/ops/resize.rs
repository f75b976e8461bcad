use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Half-pixel-centre source taps for one axis: `(i0, i1, frac)`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { s - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn resize_tensor<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let xv = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &xv[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::c(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::c(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).expect("shape")
}

impl<T: Real> Tape<T> {
    /// Bilinear resize of `[C, H, W]` to `[C, oh, ow]` (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape("resize to an empty map".into()));
        }
        if (oh, ow) == (h, w) {
            // Identity; still a node so callers can treat the result uniformly.
            let t = self.value(x).clone();
            return Ok(self.op(t, &[x], move |g, _, grads| grads.accumulate(x, g)));
        }
        let t = resize_tensor(self.value(x), oh, ow);
        let ty = axis_taps(h, oh);
        let tx = axis_taps(w, ow);
        Ok(self.op(t, &[x], move |g, _, grads| {
            let dx = grads.slot(x);
            for ch in 0..c {
                let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = T::c(fy);
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = T::c(fx);
                        let d = g[(ch * oh + oy) * ow + ox];
                        let dt = d * (T::one() - fy);
                        let db = d * fy;
                        plane[y0 * w + x0] += dt * (T::one() - fx);
                        plane[y0 * w + x1] += dt * fx;
                        plane[y1 * w + x0] += db * (T::one() - fx);
                        plane[y1 * w + x1] += db * fx;
                    }
                }
            }
        }))
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (_, h, w) = self.chw(x);
        self.resize_bilinear(x, h * factor, w * factor)
    }
}
