//! The joint network: shared extractor, stereo head, duplex encoder and the
//! deeply supervised decoder, plus the training objective on one sample.

use serde::{Deserialize, Serialize};

use crate::decoder::{BranchOutputs, Decoder, DecoderConfig};
use crate::encoder::{stage_channels, Encoder, EncoderConfig, EncoderPyramid, Extractor};
use crate::error::{Error, Result};
use crate::loss::{
    branch_cross_entropy, ct_total, dia_loss, dscc_loss, lr_consistency_weight, sm_loss, CtParts, LossBreakdown,
    LossConfig, PhotometricScg, SemanticConsistency,
};
use crate::nn::{ParamStore, Session};
use crate::stereo::{estimate_both_views, RightSource, StereoConfig, StereoHead, StereoOutput};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};
use crate::worldgen::StereoSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub stereo: StereoConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            stereo: StereoConfig { d_max: 16, ..StereoConfig::default() },
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.stereo.validate()?;
        self.decoder.validate(self.encoder.n_layers)
    }

    pub fn extractor_stages(&self) -> usize {
        self.encoder.context_stages_needed().max(self.stereo.matching_stage())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub extractor: Extractor,
    pub stereo: StereoHead,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub stereo: StereoOutput,
    pub pyramid: EncoderPyramid,
    pub branches: BranchOutputs,
    /// Softmax of each branch, same order as `branches.logits`.
    pub probs: Vec<Var>,
}

impl Model {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.encoder.channels;
        let extractor = Extractor::new(store, "extractor", ch, cfg.extractor_stages());
        let stereo = StereoHead::new(store, "stereo", &cfg.stereo, stage_channels(ch, cfg.stereo.matching_stage()))?;
        let encoder = Encoder::new(store, "encoder", &cfg.encoder)?;
        let decoder = Decoder::new(store, "decoder", ch, &cfg.decoder)?;
        Ok(Self { cfg: cfg.clone(), extractor, stereo, encoder, decoder })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, left: Var, right: Var) -> Result<ModelOutput> {
        let mut stereo = estimate_both_views(s, &self.extractor, &self.stereo, left, right)?;
        let mut context = std::mem::take(&mut stereo.left_stages);
        self.extractor.extend(s, left, &mut context, self.cfg.extractor_stages())?;
        let scale = T::one() / T::c(self.cfg.stereo.d_max as f64);
        let disparity = s.tape.affine(stereo.d_left, scale, T::zero());
        let pyramid = self.encoder.encode(s, &context, disparity)?;
        stereo.left_stages = context;
        let branches = self.decoder.forward(s, left, &pyramid, false)?;
        let probs = branches.logits.iter().map(|&l| s.tape.softmax_channels(l)).collect();
        Ok(ModelOutput { stereo, pyramid, branches, probs })
    }
}

/// Tape copies of one sample.
pub struct SampleVars {
    pub left: Var,
    pub right: Var,
}

pub fn sample_vars<T: Real>(s: &mut Session<'_, T>, sample: &StereoSample) -> SampleVars {
    SampleVars { left: s.tape.constant(sample.left.cast()), right: s.tape.constant(sample.right.cast()) }
}

/// The training objective on one sample. Without the DIA term the branches
/// are supervised by plain cross-entropy instead.
pub fn joint_loss<T: Real>(
    s: &mut Session<'_, T>,
    out: &ModelOutput,
    vars: &SampleVars,
    sample: &StereoSample,
    loss: &LossConfig,
    right_source: RightSource,
) -> Result<(Var, LossBreakdown)> {
    let classes = s.tape.shape(out.probs[0])[0];
    if classes != sample.num_classes {
        return Err(Error::Config(format!("model predicts {classes} classes, sample has {}", sample.num_classes)));
    }
    let labels = &sample.labels_left;
    let mut parts = CtParts::default();
    if loss.enable_dia {
        let d_right = match right_source {
            RightSource::Predicted => out.stereo.d_right,
            RightSource::GroundTruth => {
                if !sample.has_right_disparity() {
                    return Err(Error::Config("right_source = ground_truth needs right-view disparity".into()));
                }
                s.tape.constant(sample.disp_right_tensor().cast())
            }
        };
        let wm = lr_consistency_weight(&mut s.tape, out.stereo.d_left, d_right, &sample.valid_left)?;
        parts.dia = Some(dia_loss(&mut s.tape, &out.probs, labels, wm.normalized, loss.alpha)?);
    } else {
        parts.ce = Some(branch_cross_entropy(&mut s.tape, &out.probs, labels)?);
    }
    if loss.enable_dscc && out.probs.len() > 1 {
        let beta = loss.beta * loss.dscc_reduction.scale(out.probs.len());
        parts.dscc = Some(dscc_loss(&mut s.tape, &out.probs, beta, loss.paper_literal_sign)?);
    }
    if loss.enable_scg {
        parts.scg = Some(PhotometricScg.loss(&mut s.tape, out.probs[0], labels, vars.left, vars.right, out.stereo.d_left)?);
    }
    if loss.enable_sm {
        let target: Tensor<T> = sample.disp_left_tensor().cast();
        let mut sm = sm_loss(&mut s.tape, out.stereo.d_left, &target, &sample.valid_left)?;
        if sample.has_right_disparity() {
            let target: Tensor<T> = sample.disp_right_tensor().cast();
            let r = sm_loss(&mut s.tape, out.stereo.d_right, &target, &sample.valid_right)?;
            sm = s.tape.add(sm, r)?;
        }
        parts.sm = Some(sm);
    }
    ct_total(&mut s.tape, &parts, loss.alpha, loss.beta)
}
