//! Ablation grids: each cell is a set of config overrides trained once per
//! seed on a shared training split and scored on a held-out split.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::train::{evaluate, train, EvalReport, RunDir};
use crate::worldgen::StereoSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Cell {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn config(&self, base: &Config) -> Result<Config> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v).map_err(|e| Error::Config(format!("cell '{}': {e}", self.name)))?;
        }
        cfg.validate().map_err(|e| Error::Config(format!("cell '{}': {e}", self.name)))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub name: String,
    pub cells: Vec<Cell>,
}

const CT_OFF: [(&str, &str); 3] = [("loss.enable_dia", "false"), ("loss.enable_dscc", "false"), ("loss.enable_scg", "false")];

fn with(base: &[(&'static str, &'static str)], extra: &[(&'static str, &'static str)]) -> Vec<(&'static str, &'static str)> {
    base.iter().chain(extra).copied().collect()
}

impl Grid {
    /// Guidance source × guidance layer.
    pub fn guidance() -> Self {
        let mut cells = Vec::new();
        for layer in ["1", "2", "3"] {
            for src in ["GF", "CF", "FF"] {
                cells.push(Cell::new(
                    &format!("layer{layer}/{src}"),
                    &with(&CT_OFF, &[("decoder.guidance_layer", layer), ("decoder.guidance_source", src)]),
                ));
            }
        }
        Self { name: "guidance".into(), cells }
    }

    /// Fusion inside neither, one or both encoder branches.
    pub fn fusion() -> Self {
        let base = with(&CT_OFF, &[("decoder.hds_mode", "none")]);
        let cells = [("baseline", "sum"), ("geometric", "tgf_geometric"), ("fused", "tgf_fused"), ("both", "tgf")]
            .iter()
            .map(|(n, m)| Cell::new(n, &with(&base, &[("encoder.fusion_mode", m)])))
            .collect();
        Self { name: "fusion".into(), cells }
    }

    /// Deep supervision strategies on top of the gated encoder.
    pub fn supervision() -> Self {
        let cells = ["none", "sds", "fds", "sds+fds", "hds"]
            .iter()
            .map(|m| Cell::new(m, &with(&CT_OFF, &[("decoder.hds_mode", m)])))
            .collect();
        Self { name: "supervision".into(), cells }
    }

    /// Every subset of the three segmentation terms.
    pub fn losses() -> Self {
        let mut cells = Vec::new();
        for mask in 0..8u32 {
            let on = |b: u32| if mask & b != 0 { "true" } else { "false" };
            let mut name: Vec<&str> =
                [(1, "dia"), (2, "dscc"), (4, "scg")].iter().filter(|(b, _)| mask & b != 0).map(|x| x.1).collect();
            if name.is_empty() {
                name.push("none");
            }
            cells.push(Cell::new(
                &name.join("+"),
                &[("loss.enable_dia", on(1)), ("loss.enable_dscc", on(2)), ("loss.enable_scg", on(4))],
            ));
        }
        Self { name: "losses".into(), cells }
    }

    /// Components added one at a time. The coupling loss needs the
    /// supervision heads, so it never appears without them.
    pub fn components() -> Self {
        let cells = vec![
            Cell::new("tgf", &with(&CT_OFF, &[("decoder.hds_mode", "none")])),
            Cell::new("hds", &with(&CT_OFF, &[("encoder.fusion_mode", "sum")])),
            Cell::new("tgf+hds", &CT_OFF),
            Cell::new("hds+ct", &[("encoder.fusion_mode", "sum")]),
            Cell::new("tgf+hds+ct", &[]),
        ];
        Self { name: "components".into(), cells }
    }

    pub fn sweep(key: &str, values: &[f64]) -> Self {
        let cells = values
            .iter()
            .map(|v| Cell { name: format!("{key}={v}"), overrides: vec![(key.to_string(), v.to_string())] })
            .collect();
        Self { name: format!("{key} sweep"), cells }
    }

    pub fn alpha_sweep() -> Self {
        Self::sweep("loss.alpha", &[0.0, 0.5, 1.0, 1.5, 2.0])
    }

    pub fn beta_sweep() -> Self {
        Self::sweep("loss.beta", &[0.0, 0.5, 1.0, 1.5, 2.0])
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "guidance" => Self::guidance(),
            "fusion" => Self::fusion(),
            "supervision" => Self::supervision(),
            "losses" => Self::losses(),
            "components" => Self::components(),
            "alpha" => Self::alpha_sweep(),
            "beta" => Self::beta_sweep(),
            other => {
                return Err(Error::Config(format!(
                    "unknown grid '{other}' (expected one of: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Resolve every cell against `base` so bad toggles fail before any training.
    pub fn configs(&self, base: &Config) -> Result<Vec<Config>> {
        self.cells.iter().map(|c| c.config(base)).collect()
    }
}

pub const PRESETS: [&str; 7] = ["guidance", "fusion", "supervision", "losses", "components", "alpha", "beta"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub cell: Cell,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
}

impl Row {
    fn mean(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        self.reports.iter().map(f).sum::<f64>() / self.reports.len().max(1) as f64
    }

    pub fn miou(&self) -> f64 {
        self.mean(|r| r.seg.miou)
    }

    pub fn fwiou(&self) -> f64 {
        self.mean(|r| r.seg.fwiou)
    }

    pub fn epe(&self) -> f64 {
        self.mean(|r| r.stereo.epe)
    }

    pub fn disagreement(&self) -> f64 {
        self.mean(|r| r.disagreement)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub grid: String,
    pub seeds: Vec<u64>,
    /// Grid order.
    pub rows: Vec<Row>,
}

impl Table {
    pub fn row(&self, name: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.cell.name == name)
    }

    /// Rows by descending mean mIoU; ties keep grid order.
    pub fn ranked(&self) -> Vec<&Row> {
        let mut rows: Vec<&Row> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.miou().total_cmp(&a.miou()));
        rows
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {} ({} seeds)", self.grid, self.seeds.len())?;
        writeln!(f, "{:<4} {:<22} {:>8} {:>8} {:>8} {:>9}", "rank", "cell", "mIoU", "fwIoU", "EPE", "disagree")?;
        for (i, r) in self.ranked().iter().enumerate() {
            writeln!(
                f,
                "{:<4} {:<22} {:>8.2} {:>8.2} {:>8.3} {:>9.4}",
                i + 1,
                r.cell.name,
                r.miou(),
                r.fwiou(),
                r.epe(),
                r.disagreement()
            )?;
        }
        Ok(())
    }
}

/// Train every cell once per seed on `train_set` and evaluate on `eval_set`.
/// The seed replaces `train.seed`, so the cells of one seed share initial
/// weights wherever their parameter sets coincide.
pub fn ablate(
    base: &Config,
    grid: &Grid,
    seeds: &[u64],
    train_set: &[StereoSample],
    eval_set: &[StereoSample],
) -> Result<Table> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let configs = grid.configs(base)?;
    let mut rows = Vec::with_capacity(configs.len());
    for (cell, cfg) in grid.cells.iter().zip(configs) {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.train.seed = seed;
            let mut run = train(&cfg, train_set, &RunDir(None))?;
            let report = evaluate(&run.model, &mut run.store, eval_set, &cfg)?;
            log::info!("{} seed {seed}: miou {:.2} epe {:.3}", cell.name, report.seg.miou, report.stereo.epe);
            reports.push(report);
        }
        rows.push(Row { cell: cell.clone(), reports });
    }
    Ok(Table { grid: grid.name.clone(), seeds: seeds.to_vec(), rows })
}
