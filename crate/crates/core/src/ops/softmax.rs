use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub fn softmax_channels_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let hw = h * w;
    let xv = x.data();
    let mut out = vec![T::zero(); c * hw];
    for p in 0..hw {
        let m = (0..c).map(|k| xv[k * hw + p]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for k in 0..c {
            let e = (xv[k * hw + p] - m).exp();
            out[k * hw + p] = e;
            z += e;
        }
        for k in 0..c {
            out[k * hw + p] = out[k * hw + p] / z;
        }
    }
    Tensor::new(&[c, h, w], out).expect("shape")
}

impl<T: Real> Tape<T> {
    /// Per-pixel softmax across the channel axis.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (c, h, w) = self.chw(x);
        let hw = h * w;
        let t = softmax_channels_tensor(self.value(x));
        let y = self.len();
        self.op(t, &[x], move |g, vals, grads| {
            let yv = vals[y].data();
            let dx = grads.slot(x);
            for p in 0..hw {
                let dot: T = (0..c).map(|k| g[k * hw + p] * yv[k * hw + p]).sum();
                for k in 0..c {
                    dx[k * hw + p] += yv[k * hw + p] * (g[k * hw + p] - dot);
                }
            }
        })
    }
}
