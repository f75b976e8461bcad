//! 2-D convolution through im2col and GEMM. Kernels are square and odd-sized
//! with "same" padding `k / 2`, so the output side is `ceil(side / stride)`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }
}

pub fn conv_out_side(side: usize, stride: usize) -> usize {
    side.div_ceil(stride)
}

fn im2col<T: Real>(x: &[T], g: Geometry) -> Vec<T> {
    let n = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * n];
    let pad = g.pad();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: Geometry, dx: &mut [T]) {
    let n = g.ho * g.wo;
    let pad = g.pad();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// `x: [C, H, W]`, `weight: [O, C, k, k]`, optional `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (c, h, w) = self.chw(x);
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(Error::Shape(format!("conv weight must be [O, C, k, k] with odd k, got {ws:?}")));
        }
        if ws[1] != c {
            return Err(Error::Shape(format!("conv expects {} input channels, got {c}", ws[1])));
        }
        if stride == 0 || stride > 2 {
            return Err(Error::Invalid(format!("conv stride {stride} not in {{1, 2}}")));
        }
        let (o, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.value(b).len() != o {
                return Err(Error::Shape(format!("conv bias needs {o} entries")));
            }
        }
        let g = Geometry { c, h, w, k, stride, ho: conv_out_side(h, stride), wo: conv_out_side(w, stride) };
        let n = g.ho * g.wo;
        let ckk = c * k * k;
        let direct = k == 1 && stride == 1;

        let xv = self.value(x).data();
        let cols_owned;
        let cols: &[T] = if direct {
            xv
        } else {
            cols_owned = im2col(xv, g);
            &cols_owned
        };
        let mut out = vec![T::zero(); o * n];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (oc, row) in out.chunks_mut(n).enumerate() {
                row.fill(bv[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            o, ckk, n, T::one(),
            self.value(weight).data(), ckk as isize, 1,
            cols, n as isize, 1,
            beta, &mut out, n as isize, 1,
        );
        let t = Tensor::new(&[o, g.ho, g.wo], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.op(t, &parents, move |dy, vals, grads| {
            let xv = vals[x.0].data();
            let wv = vals[weight.0].data();
            let cols_owned;
            let cols: &[T] = if direct {
                xv
            } else if grads.wants(weight) {
                cols_owned = im2col(xv, g);
                &cols_owned
            } else {
                &[]
            };
            if grads.wants(weight) {
                // dW = dY · colsᵀ
                T::gemm(
                    o, n, ckk, T::one(),
                    dy, n as isize, 1,
                    cols, 1, n as isize,
                    T::one(), grads.slot(weight), ckk as isize, 1,
                );
            }
            if let Some(b) = bias {
                if grads.wants(b) {
                    let db = grads.slot(b);
                    for (oc, row) in dy.chunks(n).enumerate() {
                        db[oc] += row.iter().copied().sum();
                    }
                }
            }
            if grads.wants(x) {
                if direct {
                    T::gemm(
                        ckk, o, n, T::one(),
                        wv, 1, ckk as isize,
                        dy, n as isize, 1,
                        T::one(), grads.slot(x), n as isize, 1,
                    );
                } else {
                    let mut dcols = vec![T::zero(); ckk * n];
                    T::gemm(
                        ckk, o, n, T::one(),
                        wv, 1, ckk as isize,
                        dy, n as isize, 1,
                        T::zero(), &mut dcols, n as isize, 1,
                    );
                    col2im(&dcols, g, grads.slot(x));
                }
            }
        }))
    }
}
