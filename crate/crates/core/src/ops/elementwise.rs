use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    /// Elementwise sum, the `⊕` fusion operator.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.op(t, &[a, b], move |g, _, grads| {
            grads.accumulate(a, g);
            grads.accumulate(b, g);
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.op(t, &[a, b], move |g, _, grads| {
            grads.accumulate(a, g);
            if grads.wants(b) {
                for (d, &s) in grads.slot(b).iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.op(t, &[a, b], move |g, vals, grads| {
            if grads.wants(a) {
                let bv = vals[b.0].data();
                for ((d, &s), &y) in grads.slot(a).iter_mut().zip(g).zip(bv) {
                    *d += s * y;
                }
            }
            if grads.wants(b) {
                let av = vals[a.0].data();
                for ((d, &s), &x) in grads.slot(b).iter_mut().zip(g).zip(av) {
                    *d += s * x;
                }
            }
        }))
    }

    /// `x ⊙ m` with a `[1, H, W]` map broadcast over the channels of `x`.
    pub fn mul_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x);
        let (mc, mh, mw) = self.chw(m);
        if mc != 1 || mh != h || mw != w {
            return Err(Error::Shape(format!("broadcast [1,{h},{w}] expected, got [{mc},{mh},{mw}]")));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mv = self.value(m).data();
        let out = (0..c * hw).map(|i| xv[i] * mv[i % hw]).collect();
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.op(t, &[x, m], move |g, vals, grads| {
            if grads.wants(x) {
                let mv = vals[m.0].data();
                let dx = grads.slot(x);
                for i in 0..c * hw {
                    dx[i] += g[i] * mv[i % hw];
                }
            }
            if grads.wants(m) {
                let xv = vals[x.0].data();
                let dm = grads.slot(m);
                for i in 0..c * hw {
                    dm[i % hw] += g[i] * xv[i];
                }
            }
        }))
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        self.op(t, &[x], move |g, _, grads| {
            if grads.wants(x) {
                for (d, &s) in grads.slot(x).iter_mut().zip(g) {
                    *d += s * scale;
                }
            }
        })
    }

    /// `s · x` with a scalar node `s` of one element.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("scale factor must be a scalar, got {:?}", self.shape(s))));
        }
        let k = self.value(s).item();
        let t = self.value(x).map(|v| k * v);
        Ok(self.op(t, &[x, s], move |g, vals, grads| {
            if grads.wants(x) {
                for (d, &gi) in grads.slot(x).iter_mut().zip(g) {
                    *d += gi * k;
                }
            }
            if grads.wants(s) {
                let dot: T = g.iter().zip(vals[x.0].data()).map(|(&a, &b)| a * b).sum();
                grads.slot(s)[0] += dot;
            }
        }))
    }

    /// Multiply by a constant tensor (typically a 0/1 mask).
    pub fn mul_const(&mut self, x: Var, k: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != k.shape() {
            return Err(Error::Shape(format!("mul_const: {:?} vs {:?}", self.shape(x), k.shape())));
        }
        let out = self.value(x).data().iter().zip(k.data()).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(self.shape(x), out)?;
        let k = k.data().to_vec();
        Ok(self.op(t, &[x], move |g, _, grads| {
            if grads.wants(x) {
                for ((d, &s), &m) in grads.slot(x).iter_mut().zip(g).zip(&k) {
                    *d += s * m;
                }
            }
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.op(t, &[x], move |g, vals, grads| {
            let xv = vals[x.0].data();
            for ((d, &s), &v) in grads.slot(x).iter_mut().zip(g).zip(xv) {
                if v > T::zero() {
                    *d += s;
                }
            }
        })
    }

    /// Clamp into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        self.op(t, &[x], move |g, vals, grads| {
            let xv = vals[x.0].data();
            for ((d, &s), &v) in grads.slot(x).iter_mut().zip(g).zip(xv) {
                if v > lo && v < hi {
                    *d += s;
                }
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let y = self.len();
        self.op(t, &[x], move |g, vals, grads| {
            let yv = vals[y].data();
            for ((d, &s), &o) in grads.slot(x).iter_mut().zip(g).zip(yv) {
                *d += s * o * (T::one() - o);
            }
        })
    }

    /// Elementwise `|x|`, with subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        self.op(t, &[x], move |g, vals, grads| {
            let xv = vals[x.0].data();
            for ((d, &s), &v) in grads.slot(x).iter_mut().zip(g).zip(xv) {
                if v > T::zero() {
                    *d += s;
                } else if v < T::zero() {
                    *d -= s;
                }
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.op(Tensor::scalar(s), &[x], move |g, _, grads| {
            for d in grads.slot(x).iter_mut() {
                *d += g[0];
            }
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::c(self.value(x).len() as f64);
        let s = self.sum(x);
        self.affine(s, T::one() / n, T::zero())
    }

    /// Weighted sum of scalars, `Σ w_i x_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        for (v, _) in terms {
            if self.value(*v).len() != 1 {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
        }
        let s = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let terms = terms.to_vec();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.op(Tensor::scalar(s), &parents, move |g, _, grads| {
            for &(v, w) in &terms {
                if grads.wants(v) {
                    grads.slot(v)[0] += g[0] * w;
                }
            }
        }))
    }

    /// Concatenate `[C_i, H, W]` maps along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Invalid("concat of zero tensors".into()));
        };
        let (_, h, w) = self.chw(first);
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let (c, xh, xw) = self.chw(x);
            if (xh, xw) != (h, w) {
                return Err(Error::Shape(format!("concat: {xh}x{xw} vs {h}x{w}")));
            }
            chans.push(c);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(total * h * w);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let t = Tensor::new(&[total, h, w], out)?;
        let xs = xs.to_vec();
        Ok(self.op(t, &xs.clone(), move |g, _, grads| {
            let mut off = 0;
            for (&x, &c) in xs.iter().zip(&chans) {
                let n = c * h * w;
                grads.accumulate(x, &g[off..off + n]);
                off += n;
            }
        }))
    }

    /// Mirror a `[C, H, W]` map left to right.
    pub fn flip_horizontal(&mut self, x: Var) -> Var {
        let (c, h, w) = self.chw(x);
        let t = flip_tensor(self.value(x));
        self.op(t, &[x], move |g, _, grads| {
            let dx = grads.slot(x);
            for row in 0..c * h {
                for u in 0..w {
                    dx[row * w + u] += g[row * w + (w - 1 - u)];
                }
            }
        })
    }

    /// Average over channels, `[C, H, W] -> [1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (c, h, w) = self.chw(x);
        let hw = h * w;
        let xv = self.value(x).data();
        let inv = T::one() / T::c(c as f64);
        let mut out = vec![T::zero(); hw];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&xv[ch * hw..(ch + 1) * hw]) {
                *o += v * inv;
            }
        }
        let t = Tensor::new(&[1, h, w], out).expect("shape");
        self.op(t, &[x], move |g, _, grads| {
            let dx = grads.slot(x);
            for ch in 0..c {
                for i in 0..hw {
                    dx[ch * hw + i] += g[i] * inv;
                }
            }
        })
    }
}

pub fn flip_tensor<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = t.chw();
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for row in 0..c * h {
        for u in 0..w {
            out.push(d[row * w + (w - 1 - u)]);
        }
    }
    Tensor::new(&[c, h, w], out).expect("shape")
}
