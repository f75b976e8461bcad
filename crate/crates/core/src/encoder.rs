//! Duplex encoder: a geometric branch over the estimated disparity and a
//! fused branch over the contextual features, both propagated through
//! selective inheritance gates.
//!
//! Layer `i` (1-based) runs at `1/2^i` of the input resolution with
//! `channels[i-1]` channels. The contextual pyramid comes from the shared
//! extractor, whose stage `j` halves the resolution when `j` is odd, so stage
//! `2i-1` is the first one at layer `i`'s resolution.


use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnAct, ParamStore, Session};
use crate::ops::conv_out_side;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextIndexMode {
    /// Middle layers inherit extractor stage `2i-1`.
    Paper2iMinus1,
    /// Middle layers inherit extractor stage `i`, resampled to layer `i`.
    IdentityI,
}

/// Where the gated inheritance is applied. `Sum` keeps only the current-layer
/// encoding in both branches, i.e. plain element-wise fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Sum,
    TgfGeometric,
    TgfFused,
    Tgf,
}

impl FusionMode {
    pub fn gates_geometric(self) -> bool {
        matches!(self, FusionMode::Tgf | FusionMode::TgfGeometric)
    }

    pub fn gates_fused(self) -> bool {
        matches!(self, FusionMode::Tgf | FusionMode::TgfFused)
    }
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl ::std::str::FromStr for $t {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($s => Ok(<$t>::$v),)+
                    _ => Err($crate::error::Error::Config(format!(
                        "unknown {} '{}' (expected one of: {})",
                        stringify!($t),
                        s,
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
        impl ::std::fmt::Display for $t {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                f.write_str(match self { $(<$t>::$v => $s,)+ })
            }
        }
    };
}
pub(crate) use str_enum;

str_enum!(ContextIndexMode { Paper2iMinus1 => "paper_2i_minus_1", IdentityI => "identity_i" });
str_enum!(FusionMode { Sum => "sum", TgfGeometric => "tgf_geometric", TgfFused => "tgf_fused", Tgf => "tgf" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub channels: Vec<usize>,
    pub context_index_mode: ContextIndexMode,
    pub fusion_mode: FusionMode,
    pub gate_bias_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            channels: vec![16, 32, 64, 128],
            context_index_mode: ContextIndexMode::Paper2iMinus1,
            fusion_mode: FusionMode::Tgf,
            gate_bias_init: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!("encoder needs at least 2 layers, got {}", self.n_layers)));
        }
        if self.channels.len() != self.n_layers || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "{} layers need {} nonzero channel counts, got {:?}",
                self.n_layers, self.n_layers, self.channels
            )));
        }
        Ok(())
    }

    /// Layers taking the middle case (contextual inheritance): `1 < i <= (n+1)/2`.
    pub fn is_middle(&self, i: usize) -> bool {
        i > 1 && 2 * i <= self.n_layers + 1
    }

    /// Extractor stage feeding layer `i` (1-based), for `i == 1` or middle layers.
    pub fn context_stage(&self, i: usize) -> usize {
        match self.context_index_mode {
            ContextIndexMode::Paper2iMinus1 => 2 * i - 1,
            ContextIndexMode::IdentityI => i,
        }
    }

    /// Number of extractor stages the encoder reads.
    pub fn context_stages_needed(&self) -> usize {
        (1..=self.n_layers).filter(|&i| i == 1 || self.is_middle(i)).map(|i| self.context_stage(i)).max().unwrap_or(1)
    }
}

/// Channels of extractor stage `j` (1-based).
pub fn stage_channels(channels: &[usize], j: usize) -> usize {
    channels[(j.div_ceil(2) - 1).min(channels.len() - 1)]
}

/// Resolution level (`log2` of the stride) of extractor stage `j`.
pub fn stage_level(j: usize) -> usize {
    j.div_ceil(2)
}

/// Half-stride contextual extractor; stages 1-3 double as the stereo features.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub stages: Vec<ConvBnAct>,
}

impl Extractor {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: &[usize], num_stages: usize) -> Self {
        let mut cin = 3;
        let stages = (1..=num_stages)
            .map(|j| {
                let cout = stage_channels(channels, j);
                let stride = if j % 2 == 1 { 2 } else { 1 };
                let st = ConvBnAct::new(store, &format!("{name}.stage{j}"), cin, cout, 3, stride);
                cin = cout;
                st
            })
            .collect();
        Self { stages }
    }

    /// Extends `outputs` (stage results so far, starting from stage 1) up to `upto` stages.
    pub fn extend<T: Real>(&self, s: &mut Session<'_, T>, image: Var, outputs: &mut Vec<Var>, upto: usize) -> Result<()> {
        if upto > self.stages.len() {
            return Err(Error::Config(format!("extractor has {} stages, {upto} requested", self.stages.len())));
        }
        while outputs.len() < upto {
            let x = outputs.last().copied().unwrap_or(image);
            let y = self.stages[outputs.len()].forward(s, x)?;
            outputs.push(y);
        }
        Ok(())
    }
}

/// `1×1 conv → sigmoid` producing a single-channel gate map.
#[derive(Clone, Debug)]
pub struct Gate {
    pub conv: Conv,
}

impl Gate {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, bias_init: f64) -> Self {
        let conv = Conv::new(store, name, cin, 1, 1, 1, true);
        if let Some(b) = conv.bias {
            store.get_mut(b).data_mut()[0] = T::c(bias_init);
        }
        Self { conv }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        compute_gate(s, &self.conv, x)
    }
}

/// Gate map `sigmoid(conv1x1(x))`; every value is checked to lie in `[0, 1]`.
pub fn compute_gate<T: Real>(s: &mut Session<'_, T>, conv: &Conv, x: Var) -> Result<Var> {
    if conv.out_channels != 1 || conv.kernel != 1 {
        return Err(Error::Shape(format!("gate conv must be 1x1 to one channel, got {:?}", conv)));
    }
    let z = conv.forward(s, x)?;
    let g = s.tape.sigmoid(z);
    if !s.tape.value(g).data().iter().all(|&v| v >= T::zero() && v <= T::one()) {
        return Err(Error::NonFinite("gate map".into()));
    }
    Ok(g)
}

/// Channel projection followed by spatial alignment.
#[derive(Clone, Debug)]
pub struct Remap {
    pub proj: Conv,
    pub down: Option<Conv>,
}

impl Remap {
    /// `halve` adds the stride-2 conv used when the source is twice the target size.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, halve: bool) -> Self {
        Self {
            proj: Conv::new(store, &format!("{name}.proj"), cin, cout, 1, 1, true),
            down: halve.then(|| Conv::new(store, &format!("{name}.down"), cout, cout, 3, 2, true)),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, th: usize, tw: usize) -> Result<Var> {
        let mut y = self.proj.forward(s, x)?;
        let (_, h, w) = s.tape.chw(y);
        if let Some(down) = &self.down {
            if conv_out_side(h, 2) == th && conv_out_side(w, 2) == tw {
                y = down.forward(s, y)?;
            }
        }
        s.tape.resize_bilinear(y, th, tw)
    }
}

impl<T: Real> Tape<T> {
    /// Selective inheritance: `(1+g)·x + (1-g)·(gp·xp)` with `[1,H,W]` gates
    /// broadcast over the channels of the `[C,H,W]` features. `x_prev` must
    /// already be remapped to the shape of `x_cur`.
    pub fn sig_combine(&mut self, x_prev: Var, x_cur: Var, g_prev: Var, g_cur: Var) -> Result<Var> {
        let (c, h, w) = self.chw(x_cur);
        if self.shape(x_prev) != self.shape(x_cur) {
            return Err(Error::Shape(format!(
                "inherited features {:?} vs current {:?}",
                self.shape(x_prev),
                self.shape(x_cur)
            )));
        }
        for g in [g_prev, g_cur] {
            if self.shape(g) != [1, h, w] {
                return Err(Error::Shape(format!("gate {:?} for features {:?}", self.shape(g), [c, h, w])));
            }
        }
        let hw = h * w;
        let (xp, x, gp, g) =
            (self.value(x_prev).data(), self.value(x_cur).data(), self.value(g_prev).data(), self.value(g_cur).data());
        let one = T::one();
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                out[i] = (one + g[p]) * x[i] + (one - g[p]) * (gp[p] * xp[i]);
            }
        }
        let t = Tensor::new(&[c, h, w], out)?;
        Ok(self.op(t, &[x_prev, x_cur, g_prev, g_cur], move |dy, vals, grads| {
            let (xp, x, gp, g) = (vals[x_prev.0].data(), vals[x_cur.0].data(), vals[g_prev.0].data(), vals[g_cur.0].data());
            if grads.wants(x_cur) {
                let d = grads.slot(x_cur);
                for ch in 0..c {
                    for p in 0..hw {
                        d[ch * hw + p] += (one + g[p]) * dy[ch * hw + p];
                    }
                }
            }
            if grads.wants(x_prev) {
                let d = grads.slot(x_prev);
                for ch in 0..c {
                    for p in 0..hw {
                        d[ch * hw + p] += (one - g[p]) * gp[p] * dy[ch * hw + p];
                    }
                }
            }
            if grads.wants(g_cur) {
                let d = grads.slot(g_cur);
                for ch in 0..c {
                    for p in 0..hw {
                        let i = ch * hw + p;
                        d[p] += dy[i] * (x[i] - gp[p] * xp[i]);
                    }
                }
            }
            if grads.wants(g_prev) {
                let d = grads.slot(g_prev);
                for ch in 0..c {
                    for p in 0..hw {
                        let i = ch * hw + p;
                        d[p] += dy[i] * (one - g[p]) * xp[i];
                    }
                }
            }
        }))
    }
}

/// Gated inheritance for one branch at layers `2..=n`.
#[derive(Clone, Debug)]
struct Inherit {
    gates: Vec<Gate>,
    remaps: Vec<Remap>,
}

impl Inherit {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig) -> Self {
        let ch = &cfg.channels;
        let gates = (1..=cfg.n_layers).map(|i| Gate::new(store, &format!("{name}.gate{i}"), ch[i - 1], cfg.gate_bias_init)).collect();
        let remaps =
            (2..=cfg.n_layers).map(|i| Remap::new(store, &format!("{name}.remap{i}"), ch[i - 2], ch[i - 1], true)).collect();
        Self { gates, remaps }
    }
}

/// Everything the encoder emits for one image.
#[derive(Clone, Debug)]
pub struct EncoderPyramid {
    pub contextual: Vec<Var>,
    pub geometric: Vec<Var>,
    /// Fused branch before `⊕ F^G_i` (the contextual half of the fusion).
    pub fused_context: Vec<Var>,
    pub fused: Vec<Var>,
    pub gates_geometric: Vec<Var>,
    pub gates_fused: Vec<Var>,
}

impl EncoderPyramid {
    pub fn n(&self) -> usize {
        self.fused.len()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    geo_enc: Vec<ConvBnAct>,
    fused_first: ConvBnAct,
    ctx_remaps: Vec<Option<Remap>>,
    fused_enc: Vec<Option<ConvBnAct>>,
    inherit_geo: Option<Inherit>,
    inherit_fused: Option<Inherit>,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let n = cfg.n_layers;
        let geo_enc = (1..=n)
            .map(|i| {
                let cin = if i == 1 { 1 } else { ch[i - 2] };
                ConvBnAct::new(store, &format!("{name}.geo{i}"), cin, ch[i - 1], 3, 2)
            })
            .collect();
        let c1 = stage_channels(ch, cfg.context_stage(1));
        let fused_first = ConvBnAct::new(store, &format!("{name}.fused1"), c1, ch[0], 3, 1);
        let mut ctx_remaps = vec![None];
        let mut fused_enc = vec![None];
        for i in 2..=n {
            if cfg.is_middle(i) {
                let j = cfg.context_stage(i);
                let halve = stage_level(j) + 1 == i;
                ctx_remaps.push(Some(Remap::new(store, &format!("{name}.ctx{i}"), stage_channels(ch, j), ch[i - 1], halve)));
                fused_enc.push(None);
            } else {
                ctx_remaps.push(None);
                fused_enc.push(Some(ConvBnAct::new(store, &format!("{name}.fused{i}"), ch[i - 2], ch[i - 1], 3, 2)));
            }
        }
        let inherit_geo = cfg.fusion_mode.gates_geometric().then(|| Inherit::new(store, &format!("{name}.sig_geo"), cfg));
        let inherit_fused = cfg.fusion_mode.gates_fused().then(|| Inherit::new(store, &format!("{name}.sig_fused"), cfg));
        Ok(Self { cfg: cfg.clone(), geo_enc, fused_first, ctx_remaps, fused_enc, inherit_geo, inherit_fused })
    }

    /// `Ω_i(x_prev, x_cur)`; identity on `x_cur` for an ungated branch.
    fn omega<T: Real>(
        s: &mut Session<'_, T>,
        inherit: Option<&Inherit>,
        i: usize,
        x_prev: Var,
        x_cur: Var,
        gates: &mut Vec<Var>,
    ) -> Result<Var> {
        let Some(inh) = inherit else { return Ok(x_cur) };
        let (_, h, w) = s.tape.chw(x_cur);
        let g_cur = inh.gates[i - 1].forward(s, x_cur)?;
        let g_prev = s.tape.resize_bilinear(gates[i - 2], h, w)?;
        let xp = inh.remaps[i - 2].forward(s, x_prev, h, w)?;
        gates.push(g_cur);
        s.tape.sig_combine(xp, x_cur, g_prev, g_cur)
    }

    /// `context[j-1]` is extractor stage `j` of the left image; `disparity` is
    /// `[1, H, W]` already scaled to roughly unit range.
    pub fn encode<T: Real>(&self, s: &mut Session<'_, T>, context: &[Var], disparity: Var) -> Result<EncoderPyramid> {
        let cfg = &self.cfg;
        let need = cfg.context_stages_needed();
        if context.len() < need {
            return Err(Error::Shape(format!("encoder needs {need} contextual stages, got {}", context.len())));
        }
        let n = cfg.n_layers;
        let (mut geo, mut fused, mut fused_ctx) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let (mut gates_g, mut gates_f) = (Vec::new(), Vec::new());

        let g1 = self.geo_enc[0].forward(s, disparity)?;
        if let Some(inh) = &self.inherit_geo {
            gates_g.push(inh.gates[0].forward(s, g1)?);
        }
        geo.push(g1);
        let c1 = self.fused_first.forward(s, context[cfg.context_stage(1) - 1])?;
        let (_, h1, w1) = s.tape.chw(c1);
        let (_, gh, gw) = s.tape.chw(g1);
        if (h1, w1) != (gh, gw) {
            return Err(Error::Shape(format!("contextual layer 1 is {h1}x{w1}, geometric is {gh}x{gw}")));
        }
        if let Some(inh) = &self.inherit_fused {
            gates_f.push(inh.gates[0].forward(s, c1)?);
        }
        fused_ctx.push(c1);
        fused.push(s.tape.add(c1, g1)?);

        for i in 2..=n {
            let prev_g = geo[i - 2];
            let cur_g = self.geo_enc[i - 1].forward(s, prev_g)?;
            let gi = Self::omega(s, self.inherit_geo.as_ref(), i, prev_g, cur_g, &mut gates_g)?;
            geo.push(gi);

            let (_, h, w) = s.tape.chw(gi);
            let prev_f = fused[i - 2];
            let cur_f = match (&self.ctx_remaps[i - 1], &self.fused_enc[i - 1]) {
                (Some(r), _) => r.forward(s, context[cfg.context_stage(i) - 1], h, w)?,
                (None, Some(e)) => e.forward(s, prev_f)?,
                (None, None) => unreachable!("layer {i} has neither a contextual nor an encoding input"),
            };
            let ci = Self::omega(s, self.inherit_fused.as_ref(), i, prev_f, cur_f, &mut gates_f)?;
            fused_ctx.push(ci);
            fused.push(s.tape.add(ci, gi)?);
        }
        Ok(EncoderPyramid {
            contextual: context.to_vec(),
            geometric: geo,
            fused_context: fused_ctx,
            fused,
            gates_geometric: gates_g,
            gates_fused: gates_f,
        })
    }
}
