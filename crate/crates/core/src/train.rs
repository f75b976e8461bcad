//! Training loop, evaluation, checkpoints and run records.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::metrics::{argmax_labels, seg_metrics, ConfusionMatrix, SegReport, StereoAccumulator, StereoReport};
use crate::model::{joint_loss, sample_vars, Model};
use crate::nn::{NormMode, ParamStore, Session};
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::worldgen::{generate_dataset, load_sample_dir, sample_dir_name, StereoSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordEntry {
    Loss { iter: usize, sample: usize, lr: f64, loss: LossBreakdown },
    Eval { iter: usize, report: EvalReport },
    Checkpoint { iter: usize, path: PathBuf },
}

/// Line-delimited JSON log of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub entries: Vec<RecordEntry>,
}

impl RunRecord {
    pub fn losses(&self) -> impl Iterator<Item = (usize, &LossBreakdown)> {
        self.entries.iter().filter_map(|e| match e {
            RecordEntry::Loss { iter, loss, .. } => Some((*iter, loss)),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, &EvalReport)> {
        self.entries.iter().filter_map(|e| match e {
            RecordEntry::Eval { iter, report } => Some((*iter, report)),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { entries })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seg: SegReport,
    pub stereo: StereoReport,
    /// Mean over auxiliary branches of the fraction of pixels whose argmax
    /// differs from the main branch; 0 with a single branch.
    pub disagreement: f64,
    pub samples: usize,
}

const CKPT_MAGIC: &[u8; 8] = b"JSEGCKP1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    iteration: usize,
    config: String,
    tensors: Vec<CkptTensor>,
}

#[derive(Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    shape: Vec<usize>,
}

/// Magic, header length (u64 LE), JSON header, then every tensor as f32 LE
/// in header order.
pub fn save_checkpoint(path: &Path, cfg: &Config, store: &ParamStore<f32>, iteration: usize) -> Result<()> {
    let tensors =
        store.entries().map(|(name, t, _)| CkptTensor { name: name.to_string(), shape: t.shape().to_vec() }).collect();
    let header = serde_json::to_vec(&CkptHeader { iteration, config: cfg.to_text(), tensors })?;
    let mut buf = Vec::with_capacity(header.len() + 16 + 4 * store.entries().map(|e| e.1.len()).sum::<usize>());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t, _) in store.entries() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub struct Checkpoint {
    pub config: Config,
    pub iteration: usize,
    pub store: ParamStore<f32>,
    pub model: Model,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CkptHeader = serde_json::from_slice(body)?;
    let config = Config::from_text(&header.config)?;
    let mut store = ParamStore::<f32>::new(config.train.seed);
    let model = Model::new(&mut store, &config.model)?;
    if header.tensors.len() != store.len() {
        return Err(bad(&format!("{} tensors stored, model has {}", header.tensors.len(), store.len())));
    }
    let mut pos = 16 + hlen;
    for t in &header.tensors {
        let id = store.find(&t.name).ok_or_else(|| bad(&format!("unknown tensor {}", t.name)))?;
        let n: usize = t.shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated data"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.set(id, Tensor::new(&t.shape, data)?)?;
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { config, iteration: header.iteration, store, model })
}

/// Scenes named by the configuration: a dataset directory or synthetic ones.
pub fn load_data(cfg: &Config) -> Result<Vec<StereoSample>> {
    match &cfg.train.data {
        Some(dir) => {
            let mut samples = Vec::new();
            for i in 0.. {
                let d = dir.join(sample_dir_name(i));
                if !d.is_dir() {
                    break;
                }
                samples.push(load_sample_dir(&d)?);
            }
            Ok(samples)
        }
        None => generate_dataset(&cfg.data.scene, cfg.data.scenes),
    }
}

fn check_dataset(cfg: &Config, data: &[StereoSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let classes = cfg.model.decoder.num_classes;
    for (i, s) in data.iter().enumerate() {
        if s.num_classes != classes {
            return Err(Error::Config(format!("sample {i} has {} classes, model has {classes}", s.num_classes)));
        }
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub record: RunRecord,
}

/// Where a run writes checkpoints and its record; nothing is written without it.
#[derive(Clone, Debug, Default)]
pub struct RunDir(pub Option<PathBuf>);

impl RunDir {
    fn checkpoint(&self, iter: usize) -> Option<PathBuf> {
        self.0.as_ref().map(|d| d.join(format!("ckpt_{iter:06}.bin")))
    }
}

/// Train on `data` with batch size 1. Each iteration draws a sample and a
/// crop window shared by both views.
pub fn train(cfg: &Config, data: &[StereoSample], out: &RunDir) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let t = &cfg.train;
    for s in data {
        if t.crop_w > s.width || t.crop_h > s.height {
            return Err(Error::Config(format!("crop {}x{} exceeds {}x{} sample", t.crop_w, t.crop_h, s.width, s.height)));
        }
    }
    if let Some(d) = &out.0 {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        std::fs::write(d.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(d, e))?;
    }
    let mut store = ParamStore::<f32>::new(t.seed);
    let model = Model::new(&mut store, &cfg.model)?;
    let mut opt = AdamW::new(cfg.optim, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5eed_da7a);
    let mut record = RunRecord::default();
    let mut order: Vec<usize> = Vec::new();

    let save = |store: &ParamStore<f32>, iter: usize, record: &mut RunRecord| -> Result<()> {
        if let Some(path) = out.checkpoint(iter) {
            save_checkpoint(&path, cfg, store, iter)?;
            record.entries.push(RecordEntry::Checkpoint { iter, path });
        }
        Ok(())
    };
    save(&store, 0, &mut record)?;

    for iter in 0..t.iterations {
        if order.is_empty() {
            order = (0..data.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        let idx = order.pop().expect("refilled");
        let full = &data[idx];
        let x0 = rng.random_range(0..=full.width - t.crop_w);
        let y0 = rng.random_range(0..=full.height - t.crop_h);
        let sample = if (t.crop_w, t.crop_h) == (full.width, full.height) {
            full.clone()
        } else {
            full.crop(x0, y0, t.crop_w, t.crop_h)?
        };
        let lr = t.schedule.lr(cfg.optim.lr, iter, t.iterations);

        let mut s = Session::new(&mut store, true, t.norm).with_param_grads(true);
        let vars = sample_vars(&mut s, &sample);
        let out_vars = model.forward(&mut s, vars.left, vars.right)?;
        let (total, breakdown) = joint_loss(&mut s, &out_vars, &vars, &sample, &cfg.loss, cfg.model.stereo.right_source)
            .map_err(|e| Error::NonFinite(format!("iteration {iter}: {e}")))?;
        let grads = s.tape.backward(total);
        let param_grads = s.param_grads(&grads);
        drop(s);
        opt.update(&mut store, &param_grads, lr).map_err(|e| {
            Error::NonFinite(format!("iteration {iter}: {e}; loss {}", serde_json::to_string(&breakdown).unwrap_or_default()))
        })?;

        let done = iter + 1;
        if t.log_every > 0 && (iter % t.log_every == 0 || done == t.iterations) {
            record.entries.push(RecordEntry::Loss { iter, sample: idx, lr, loss: breakdown });
        }
        if t.eval_every > 0 && done % t.eval_every == 0 {
            let report = evaluate(&model, &mut store, data, cfg)?;
            log::info!("iter {done}: miou {:.2} epe {:.3}", report.seg.miou, report.stereo.epe);
            record.entries.push(RecordEntry::Eval { iter: done, report });
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 {
            save(&store, done, &mut record)?;
        }
    }
    if t.iterations > 0 && (t.checkpoint_every == 0 || !t.iterations.is_multiple_of(t.checkpoint_every)) {
        save(&store, t.iterations, &mut record)?;
    }
    if let Some(d) = &out.0 {
        record.save(&d.join("record.jsonl"))?;
    }
    Ok(TrainOutcome { model, store, record })
}

/// Predictions of the main branch plus every branch's labels for one sample.
pub struct Prediction {
    pub labels: Vec<u8>,
    pub branch_labels: Vec<Vec<u8>>,
    pub disparity: Vec<f32>,
}

pub fn predict(model: &Model, store: &mut ParamStore<f32>, sample: &StereoSample, norm: NormMode) -> Result<Prediction> {
    let mut s = Session::new(store, false, norm);
    let vars = sample_vars(&mut s, sample);
    let out = model.forward(&mut s, vars.left, vars.right)?;
    let classes = s.tape.shape(out.probs[0])[0];
    let branch_labels: Vec<Vec<u8>> =
        out.branches.logits.iter().map(|&l| argmax_labels(s.tape.value(l).data(), classes)).collect();
    Ok(Prediction {
        labels: branch_labels[0].clone(),
        branch_labels,
        disparity: s.tape.value(out.stereo.d_left).data().to_vec(),
    })
}

/// Global-confusion evaluation of the main branch over `data`.
pub fn evaluate(model: &Model, store: &mut ParamStore<f32>, data: &[StereoSample], cfg: &Config) -> Result<EvalReport> {
    check_dataset(cfg, data)?;
    let mut cm = ConfusionMatrix::new(cfg.model.decoder.num_classes);
    let mut st = StereoAccumulator::default();
    let mut disagree = 0.0;
    for sample in data {
        let p = predict(model, store, sample, cfg.train.eval_norm)?;
        cm.accumulate(&p.labels, &sample.labels_left, None)?;
        st.add(&p.disparity, &sample.disp_left, &sample.valid_left)?;
        let aux = &p.branch_labels[1..];
        if !aux.is_empty() {
            let n = p.labels.len() as f64;
            let per: f64 =
                aux.iter().map(|b| b.iter().zip(&p.labels).filter(|(a, m)| a != m).count() as f64 / n).sum();
            disagree += per / aux.len() as f64;
        }
    }
    Ok(EvalReport {
        seg: seg_metrics(&cm, cfg.train.averaging)?,
        stereo: st.report()?,
        disagreement: disagree / data.len() as f64,
        samples: data.len(),
    })
}
