//! Correlation cost volume with soft-argmin regression over the shared
//! extractor features. The right-view disparity is obtained by running the
//! same head on the mirrored, view-swapped pair.

use serde::{Deserialize, Serialize};

use crate::encoder::{str_enum, Extractor};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnAct, ParamId, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Cost assigned to candidates whose match falls outside the right image.
pub const OUT_OF_FRAME_COST: f64 = 1e4;

const NORM_EPS: f64 = 1e-6;

/// Where the right-view disparity in the consistency weight comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightSource {
    Predicted,
    GroundTruth,
}

str_enum!(RightSource { Predicted => "predicted", GroundTruth => "ground_truth" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoConfig {
    pub d_max: usize,
    /// Feature stride of the cost volume; a power of two, at least 2.
    pub cost_stride: usize,
    pub match_channels: usize,
    /// Hidden width of the residual cost aggregation; 0 disables it.
    pub aggregation_hidden: usize,
    /// Hidden width of the full-resolution residual refinement; 0 disables it.
    pub refine_hidden: usize,
    pub init_temperature: f64,
    pub right_source: RightSource,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self {
            d_max: 192,
            cost_stride: 4,
            match_channels: 16,
            aggregation_hidden: 32,
            refine_hidden: 16,
            init_temperature: 10.0,
            right_source: RightSource::Predicted,
        }
    }
}

impl StereoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_max == 0 {
            return Err(Error::Config("d_max must be positive".into()));
        }
        if self.cost_stride < 2 || !self.cost_stride.is_power_of_two() {
            return Err(Error::Config(format!("cost_stride must be a power of two >= 2, got {}", self.cost_stride)));
        }
        Ok(())
    }

    pub fn candidates(&self) -> usize {
        self.d_max / self.cost_stride + 1
    }

    /// Extractor stage whose output feeds the matching features.
    pub fn matching_stage(&self) -> usize {
        let k = self.cost_stride.trailing_zeros() as usize;
        if k == 1 {
            2
        } else {
            2 * k - 1
        }
    }
}

/// `[D, h, w]` matching costs; candidate `k` stands for `k · spacing` pixels.
#[derive(Clone, Debug)]
pub struct CostVolume {
    pub cost: Var,
    pub valid: Vec<bool>,
    pub spacing: f64,
}

impl<T: Real> Tape<T> {
    /// Cosine similarity between `fl(v, u)` and `fr(v, u - k)` for
    /// `k < candidates`, as `[candidates, h, w]`. Entries whose match leaves
    /// the frame are 0 and `false` in the returned mask.
    pub fn correlation(&mut self, fl: Var, fr: Var, candidates: usize) -> Result<(Var, Vec<bool>)> {
        if self.shape(fl) != self.shape(fr) {
            return Err(Error::Shape(format!("matching features {:?} vs {:?}", self.shape(fl), self.shape(fr))));
        }
        if candidates == 0 {
            return Err(Error::Invalid("cost volume needs at least one candidate".into()));
        }
        let (c, h, w) = self.chw(fl);
        let hw = h * w;
        let eps = T::c(NORM_EPS);
        let unit = |x: &[T]| -> (Vec<T>, Vec<T>) {
            let mut norms = vec![T::zero(); hw];
            for ch in 0..c {
                for p in 0..hw {
                    norms[p] += x[ch * hw + p] * x[ch * hw + p];
                }
            }
            let norms: Vec<T> = norms.into_iter().map(|n| n.sqrt().max(eps)).collect();
            let u = (0..c * hw).map(|i| x[i] / norms[i % hw]).collect();
            (u, norms)
        };
        let (ua, na) = unit(self.value(fl).data());
        let (ub, nb) = unit(self.value(fr).data());
        let mut out = vec![T::zero(); candidates * hw];
        let mut valid = vec![false; candidates * hw];
        for k in 0..candidates {
            for v in 0..h {
                for u in k..w {
                    let (p, q) = (v * w + u, v * w + u - k);
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc += ua[ch * hw + p] * ub[ch * hw + q];
                    }
                    out[k * hw + p] = acc;
                    valid[k * hw + p] = true;
                }
            }
        }
        let t = Tensor::new(&[candidates, h, w], out)?;
        let mask = valid.clone();
        let y = self.op(t, &[fl, fr], move |g, _, grads| {
            // Per-pixel sums of g·(other unit vector) and g·similarity.
            let mut ga = vec![T::zero(); c * hw];
            let mut gb = vec![T::zero(); c * hw];
            let mut sa = vec![T::zero(); hw];
            let mut sb = vec![T::zero(); hw];
            for k in 0..candidates {
                for v in 0..h {
                    for u in k..w {
                        let (p, q) = (v * w + u, v * w + u - k);
                        let gi = g[k * hw + p];
                        if gi == T::zero() {
                            continue;
                        }
                        let mut sim = T::zero();
                        for ch in 0..c {
                            sim += ua[ch * hw + p] * ub[ch * hw + q];
                            ga[ch * hw + p] += gi * ub[ch * hw + q];
                            gb[ch * hw + q] += gi * ua[ch * hw + p];
                        }
                        sa[p] += gi * sim;
                        sb[q] += gi * sim;
                    }
                }
            }
            // d(â·b̂)/da = (b̂ - (â·b̂) â) / |a| away from the norm floor, b̂ / eps on it.
            let back = |gx: &[T], s: &[T], unit: &[T], norms: &[T], d: &mut [T]| {
                for ch in 0..c {
                    for p in 0..hw {
                        let i = ch * hw + p;
                        let radial = if norms[p] > eps { s[p] * unit[i] } else { T::zero() };
                        d[i] += (gx[i] - radial) / norms[p];
                    }
                }
            };
            if grads.wants(fl) {
                back(&ga, &sa, &ua, &na, grads.slot(fl));
            }
            if grads.wants(fr) {
                back(&gb, &sb, &ub, &nb, grads.slot(fr));
            }
        });
        Ok((y, mask))
    }

    /// `Σ_k softmax(-cost)_k · k · spacing` per pixel, `[D,h,w] → [1,h,w]`.
    pub fn soft_argmin(&mut self, cost: Var, spacing: T) -> Result<Var> {
        let (d, h, w) = self.chw(cost);
        if d == 0 {
            return Err(Error::Shape("empty cost volume".into()));
        }
        let hw = h * w;
        let cv = self.value(cost).data();
        if !cv.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("cost volume".into()));
        }
        let mut prob = vec![T::zero(); d * hw];
        let mut out = vec![T::zero(); hw];
        for p in 0..hw {
            let m = (0..d).map(|k| -cv[k * hw + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..d {
                let e = (-cv[k * hw + p] - m).exp();
                prob[k * hw + p] = e;
                z += e;
            }
            let mut acc = T::zero();
            for k in 0..d {
                prob[k * hw + p] = prob[k * hw + p] / z;
                acc += prob[k * hw + p] * T::c(k as f64) * spacing;
            }
            out[p] = acc;
        }
        let t = Tensor::new(&[1, h, w], out.clone())?;
        Ok(self.op(t, &[cost], move |g, _, grads| {
            let dc = grads.slot(cost);
            for p in 0..hw {
                for k in 0..d {
                    let dk = T::c(k as f64) * spacing;
                    dc[k * hw + p] -= g[p] * prob[k * hw + p] * (dk - out[p]);
                }
            }
        }))
    }
}

/// Cost volume `-cos(fl, fr)` with out-of-frame candidates at [`OUT_OF_FRAME_COST`].
pub fn build_cost_volume<T: Real>(tape: &mut Tape<T>, fl: Var, fr: Var, d_max: usize, stride: usize) -> Result<CostVolume> {
    if d_max == 0 || stride == 0 {
        return Err(Error::Invalid(format!("d_max {d_max} and stride {stride} must be positive")));
    }
    let (corr, valid) = tape.correlation(fl, fr, d_max / stride + 1)?;
    let neg = tape.affine(corr, -T::one(), T::zero());
    let cost = mask_out_of_frame(tape, neg, &valid)?;
    Ok(CostVolume { cost, valid, spacing: stride as f64 })
}

fn mask_out_of_frame<T: Real>(tape: &mut Tape<T>, cost: Var, valid: &[bool]) -> Result<Var> {
    let shape = tape.shape(cost).to_vec();
    let keep = Tensor::from_fn(&shape, |i| if valid[i] { T::one() } else { T::zero() });
    let fill = Tensor::from_fn(&shape, |i| if valid[i] { T::zero() } else { T::c(OUT_OF_FRAME_COST) });
    let kept = tape.mul_const(cost, &keep)?;
    let f = tape.constant(fill);
    tape.add(kept, f)
}

#[derive(Clone, Debug)]
pub struct StereoHead {
    pub cfg: StereoConfig,
    pub proj: Conv,
    pub temperature: ParamId,
    pub aggregation: Option<(ConvBnAct, Conv)>,
    pub refine: Option<(ConvBnAct, ConvBnAct, Conv)>,
}

impl StereoHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &StereoConfig, feat_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.candidates();
        let proj = Conv::new(store, &format!("{name}.proj"), feat_channels, cfg.match_channels, 1, 1, true);
        let temperature = store.constant(&format!("{name}.temperature"), &[1], cfg.init_temperature);
        let aggregation = (cfg.aggregation_hidden > 0).then(|| {
            let a = ConvBnAct::new(store, &format!("{name}.agg1"), d, cfg.aggregation_hidden, 3, 1);
            let b = Conv::new(store, &format!("{name}.agg2"), cfg.aggregation_hidden, d, 3, 1, true);
            // Residual branch starts silent so training begins from raw correlation.
            store.get_mut(b.weight).data_mut().fill(T::zero());
            (a, b)
        });
        let refine = (cfg.refine_hidden > 0).then(|| {
            let h = cfg.refine_hidden;
            let a = ConvBnAct::new(store, &format!("{name}.refine1"), 4, h, 3, 1);
            let b = ConvBnAct::new(store, &format!("{name}.refine2"), h, h, 3, 1);
            let c = Conv::new(store, &format!("{name}.refine3"), h, 1, 3, 1, true);
            store.get_mut(c.weight).data_mut().fill(T::zero());
            (a, b, c)
        });
        Ok(Self { cfg: cfg.clone(), proj, temperature, aggregation, refine })
    }

    /// Disparity of the reference view at its full resolution, clamped to
    /// `[0, d_max]`, plus the cost volume.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        feat_left: Var,
        feat_right: Var,
        reference: Var,
    ) -> Result<(Var, CostVolume)> {
        let (_, out_h, out_w) = s.tape.chw(reference);
        let fl = self.proj.forward(s, feat_left)?;
        let fr = self.proj.forward(s, feat_right)?;
        let (corr, valid) = s.tape.correlation(fl, fr, self.cfg.candidates())?;
        let tau = s.param(self.temperature);
        let mut x = s.tape.scale(corr, tau)?;
        if let Some((a, b)) = &self.aggregation {
            let hdn = a.forward(s, x)?;
            let r = b.forward(s, hdn)?;
            x = s.tape.add(x, r)?;
        }
        let neg = s.tape.affine(x, -T::one(), T::zero());
        let cost = mask_out_of_frame(&mut s.tape, neg, &valid)?;
        let spacing = self.cfg.cost_stride as f64;
        let low = s.tape.soft_argmin(cost, T::c(spacing))?;
        let mut disp = s.tape.resize_bilinear(low, out_h, out_w)?;
        let d_max = T::c(self.cfg.d_max as f64);
        if let Some((a, b, c)) = &self.refine {
            let scaled = s.tape.affine(disp, T::one() / d_max, T::zero());
            let x = s.tape.concat_channels(&[scaled, reference])?;
            let x = a.forward(s, x)?;
            let x = b.forward(s, x)?;
            let r = c.forward(s, x)?;
            disp = s.tape.add(disp, r)?;
        }
        let disp = s.tape.clamp(disp, T::zero(), d_max);
        Ok((disp, CostVolume { cost, valid, spacing }))
    }
}

#[derive(Clone, Debug)]
pub struct StereoOutput {
    /// `[1, H, W]` left-view disparity in pixels.
    pub d_left: Var,
    /// `[1, H, W]` right-view disparity in pixels.
    pub d_right: Var,
    /// Extractor stage outputs of the left image, stage 1 first.
    pub left_stages: Vec<Var>,
    pub cost_left: CostVolume,
}

/// Both disparities from one rectified pair with shared weights. The right
/// view is the left-view estimate of the mirrored pair (mirrored right image
/// as reference), mirrored back.
pub fn estimate_both_views<T: Real>(
    s: &mut Session<'_, T>,
    extractor: &Extractor,
    head: &StereoHead,
    left: Var,
    right: Var,
) -> Result<StereoOutput> {
    if s.tape.shape(right) != s.tape.shape(left) {
        return Err(Error::Shape(format!("stereo pair {:?} vs {:?}", s.tape.shape(left), s.tape.shape(right))));
    }
    let stage = head.cfg.matching_stage();
    let features = |s: &mut Session<'_, T>, img: Var| -> Result<Vec<Var>> {
        let mut out = Vec::new();
        extractor.extend(s, img, &mut out, stage)?;
        Ok(out)
    };
    let left_stages = features(s, left)?;
    let right_stages = features(s, right)?;
    let (d_left, cost_left) = head.forward(s, left_stages[stage - 1], right_stages[stage - 1], left)?;

    let mirrored_right = s.tape.flip_horizontal(right);
    let mirrored_left = s.tape.flip_horizontal(left);
    let mr = features(s, mirrored_right)?;
    let ml = features(s, mirrored_left)?;
    let (d_mirror, _) = head.forward(s, mr[stage - 1], ml[stage - 1], mirrored_right)?;
    let d_right = s.tape.flip_horizontal(d_mirror);
    Ok(StereoOutput { d_left, d_right, left_stages, cost_left })
}
