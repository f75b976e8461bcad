//! U-shaped segmentation decoder with hierarchical deep supervision.
//!
//! Decoded features `x_i` live at stride `2^i`: `x_n` is the deepest fused
//! encoder map, `x_i = CBR([up(x_{i+1}), F^F_i])` for `i < n` and `x_0` is the
//! full-resolution map built from `x_1` and an image stem. Classifiers:
//!
//! * main: `x_0`, always present;
//! * SDS: `x_1`, the highest-resolution decoded features;
//! * FDS side heads: `x_i` for `i = 2..=n`, one per resolution.
//!
//! In HDS mode every auxiliary head also sees a guidance tap: the guidance
//! feature pushed through `i - g` FDA downsampling units, where `g` is the
//! guidance layer.

use serde::{Deserialize, Serialize};

use crate::encoder::{str_enum, EncoderPyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnAct, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdsMode {
    None,
    Sds,
    Fds,
    SdsFds,
    Hds,
}

str_enum!(HdsMode { None => "none", Sds => "sds", Fds => "fds", SdsFds => "sds+fds", Hds => "hds" });

impl HdsMode {
    pub fn has_sds(self) -> bool {
        matches!(self, Self::Sds | Self::SdsFds | Self::Hds)
    }

    pub fn has_fds(self) -> bool {
        matches!(self, Self::Fds | Self::SdsFds | Self::Hds)
    }

    pub fn guided(self) -> bool {
        self == Self::Hds
    }

    /// Number of classifiers for an `n`-layer encoder.
    pub fn num_heads(self, n: usize) -> usize {
        1 + usize::from(self.has_sds()) + if self.has_fds() { n - 1 } else { 0 }
    }
}

/// Which encoder pyramid supplies the guidance feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceSource {
    #[serde(rename = "GF")]
    Geometric,
    #[serde(rename = "CF")]
    Contextual,
    #[serde(rename = "FF")]
    Fused,
}

str_enum!(GuidanceSource { Geometric => "GF", Contextual => "CF", Fused => "FF" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_classes: usize,
    pub hds_mode: HdsMode,
    pub guidance_source: GuidanceSource,
    pub guidance_layer: usize,
    pub stem_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            hds_mode: HdsMode::Hds,
            guidance_source: GuidanceSource::Fused,
            guidance_layer: 1,
            stem_channels: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if !(1..=3).contains(&self.guidance_layer) || self.guidance_layer > n_layers {
            return Err(Error::Config(format!(
                "guidance_layer must be in 1..={}, got {}",
                n_layers.min(3),
                self.guidance_layer
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchRole {
    Main,
    Sds,
    /// FDS side head at decoder depth `i` (stride `2^i`).
    Side(usize),
}

#[derive(Clone, Debug)]
pub struct BranchOutputs {
    /// `[C, H, W]` logits; main first, then SDS, then side heads by depth.
    pub logits: Vec<Var>,
    pub roles: Vec<BranchRole>,
}

impl BranchOutputs {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn main(&self) -> Var {
        self.logits[0]
    }
}

/// Stack of stride-2 Conv-BN-ReLU units; `taps[u]` is the output of `u` units.
#[derive(Clone, Debug)]
pub struct FdaChain {
    pub units: Vec<ConvBnAct>,
}

impl FdaChain {
    /// `channels[u]` is the width of tap `u + 1`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, channels: &[usize]) -> Self {
        let mut c = cin;
        let units = channels
            .iter()
            .enumerate()
            .map(|(u, &cout)| {
                let unit = ConvBnAct::new(store, &format!("{name}.unit{}", u + 1), c, cout, 3, 2);
                c = cout;
                unit
            })
            .collect();
        Self { units }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn taps<T: Real>(&self, s: &mut Session<'_, T>, guidance: Var) -> Result<Vec<Var>> {
        let mut taps = vec![guidance];
        for unit in &self.units {
            let next = unit.forward(s, *taps.last().expect("non-empty"))?;
            taps.push(next);
        }
        Ok(taps)
    }
}

/// `concat(deep, tap) → 1×1 conv → bilinear resize to (h, w)`.
#[derive(Clone, Debug)]
pub struct SideHead {
    pub classifier: Conv,
    pub feat_channels: usize,
    pub tap_channels: usize,
}

impl SideHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, feat: usize, tap: usize, classes: usize) -> Self {
        Self { classifier: Conv::new(store, name, feat + tap, classes, 1, 1, true), feat_channels: feat, tap_channels: tap }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, deep: Var, tap: Option<Var>, h: usize, w: usize) -> Result<Var> {
        let check = |v: Var, c: usize, what: &str, s: &Session<'_, T>| {
            let got = s.tape.shape(v)[0];
            if got == c {
                Ok(())
            } else {
                Err(Error::Shape(format!("side head {what}: expected {c} channels, got {got}")))
            }
        };
        check(deep, self.feat_channels, "features", s)?;
        let x = match tap {
            Some(t) => {
                check(t, self.tap_channels, "guidance", s)?;
                if s.tape.shape(t)[1..] != s.tape.shape(deep)[1..] {
                    return Err(Error::Shape(format!(
                        "guidance {:?} not aligned with features {:?}",
                        s.tape.shape(t),
                        s.tape.shape(deep)
                    )));
                }
                s.tape.concat_channels(&[deep, t])?
            }
            None if self.tap_channels == 0 => deep,
            None => return Err(Error::Shape("side head expects a guidance tap".into())),
        };
        let logits = self.classifier.forward(s, x)?;
        s.tape.resize_bilinear(logits, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub channels: Vec<usize>,
    pub stem: ConvBnAct,
    /// `ups[i-1]` produces `x_i` for `i = 1..n`.
    pub ups: Vec<ConvBnAct>,
    pub top: ConvBnAct,
    pub main: Conv,
    pub sds: Option<SideHead>,
    /// Side heads for depths `2..=n`.
    pub sides: Vec<SideHead>,
    pub fda: Option<FdaChain>,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: &[usize], cfg: &DecoderConfig) -> Result<Self> {
        let n = channels.len();
        if n < 2 {
            return Err(Error::Config("decoder needs at least two encoder layers".into()));
        }
        cfg.validate(n)?;
        let k = cfg.num_classes;
        let g = cfg.guidance_layer;
        let guided = cfg.hds_mode.guided();
        let stem = ConvBnAct::new(store, &format!("{name}.stem"), 3, cfg.stem_channels, 3, 1);
        let ups = (1..n)
            .map(|i| ConvBnAct::new(store, &format!("{name}.up{i}"), channels[i] + channels[i - 1], channels[i - 1], 3, 1))
            .collect();
        let top = ConvBnAct::new(store, &format!("{name}.top"), channels[0] + cfg.stem_channels, cfg.stem_channels, 3, 1);
        let main = Conv::new(store, &format!("{name}.main"), cfg.stem_channels, k, 1, 1, true);
        let tap_width = |i: usize| if guided && i >= g { channels[i - 1] } else { 0 };
        let sds = cfg
            .hds_mode
            .has_sds()
            .then(|| SideHead::new(store, &format!("{name}.sds"), channels[0], tap_width(1), k));
        let sides = if cfg.hds_mode.has_fds() {
            (2..=n).map(|i| SideHead::new(store, &format!("{name}.side{i}"), channels[i - 1], tap_width(i), k)).collect()
        } else {
            Vec::new()
        };
        let fda = guided.then(|| FdaChain::new(store, &format!("{name}.fda"), channels[g - 1], &channels[g..]));
        Ok(Self { cfg: cfg.clone(), channels: channels.to_vec(), stem, ups, top, main, sds, sides, fda })
    }

    fn guidance(&self, pyramid: &EncoderPyramid) -> Var {
        let g = self.cfg.guidance_layer - 1;
        match self.cfg.guidance_source {
            GuidanceSource::Geometric => pyramid.geometric[g],
            GuidanceSource::Contextual => pyramid.fused_context[g],
            GuidanceSource::Fused => pyramid.fused[g],
        }
    }

    /// Decoded features `x_0..=x_n`.
    pub fn decode_main<T: Real>(&self, s: &mut Session<'_, T>, image: Var, pyramid: &EncoderPyramid) -> Result<Vec<Var>> {
        let n = self.channels.len();
        if pyramid.n() != n {
            return Err(Error::Shape(format!("decoder built for {n} layers, pyramid has {}", pyramid.n())));
        }
        let mut xs = vec![pyramid.fused[n - 1]];
        for i in (1..n).rev() {
            let skip = pyramid.fused[i - 1];
            let (_, h, w) = s.tape.chw(skip);
            let up = s.tape.resize_bilinear(*xs.last().expect("non-empty"), h, w)?;
            let cat = s.tape.concat_channels(&[up, skip])?;
            xs.push(self.ups[i - 1].forward(s, cat)?);
        }
        let (_, h, w) = s.tape.chw(image);
        let stem = self.stem.forward(s, image)?;
        let up = s.tape.resize_bilinear(*xs.last().expect("non-empty"), h, w)?;
        let cat = s.tape.concat_channels(&[up, stem])?;
        xs.push(self.top.forward(s, cat)?);
        xs.reverse();
        Ok(xs)
    }

    /// All classifier outputs. `zero_taps` replaces every guidance tap by
    /// zeros, which turns an HDS decoder into its SDS+FDS counterpart.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        image: Var,
        pyramid: &EncoderPyramid,
        zero_taps: bool,
    ) -> Result<BranchOutputs> {
        let xs = self.decode_main(s, image, pyramid)?;
        let (_, h, w) = s.tape.chw(image);
        let main = self.main.forward(s, xs[0])?;
        let mut out = BranchOutputs { logits: vec![main], roles: vec![BranchRole::Main] };

        let g = self.cfg.guidance_layer;
        let taps = match &self.fda {
            Some(chain) => {
                let taps = chain.taps(s, self.guidance(pyramid))?;
                if zero_taps {
                    taps.into_iter()
                        .map(|t| {
                            let z = crate::tensor::Tensor::zeros(s.tape.shape(t));
                            s.tape.constant(z)
                        })
                        .collect()
                } else {
                    taps
                }
            }
            None => Vec::new(),
        };
        let tap_at = |i: usize| (i >= g).then(|| taps.get(i - g).copied()).flatten();

        if let Some(head) = &self.sds {
            out.logits.push(head.forward(s, xs[1], tap_at(1), h, w)?);
            out.roles.push(BranchRole::Sds);
        }
        for (k, head) in self.sides.iter().enumerate() {
            let i = k + 2;
            out.logits.push(head.forward(s, xs[i], tap_at(i), h, w)?);
            out.roles.push(BranchRole::Side(i));
        }
        Ok(out)
    }
}
