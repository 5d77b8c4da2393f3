//! One-axis ablation sweeps: pretrain and evaluate one cell per axis value,
//! all cells sharing the base seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::probe::{probe_encoder, ProbeConfig};
use super::report::{EvalReport, EvalRow};
use super::eval_reconstruction;
use crate::error::{Error, Result};
use crate::exec::{try_map_ordered, Execution};
use crate::imaging::Modality;
use crate::model::QueryMode;
use crate::training::{load_dataset, pretrain, Corpus, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    QueryMode,
    MaskSize,
    Modality,
    MaskRatio,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 4] = [SweepAxis::QueryMode, SweepAxis::MaskSize, SweepAxis::Modality, SweepAxis::MaskRatio];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::QueryMode => "query_mode",
            SweepAxis::MaskSize => "mask_size",
            SweepAxis::Modality => "modality",
            SweepAxis::MaskRatio => "mask_ratio",
        }
    }

    pub fn default_values(self) -> Vec<AxisValue> {
        match self {
            SweepAxis::QueryMode => QueryMode::ALL.into_iter().map(AxisValue::QueryMode).collect(),
            SweepAxis::MaskSize => [16, 32, 64].into_iter().map(AxisValue::MaskSize).collect(),
            SweepAxis::Modality => [Modality::Rgb, Modality::RgbIr].into_iter().map(AxisValue::Modality).collect(),
            SweepAxis::MaskRatio => [0.5, 0.6, 0.75].into_iter().map(AxisValue::MaskRatio).collect(),
        }
    }

    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let bad = || Error::Config(format!("`{s}` is not a valid {} value", self.as_str()));
        Ok(match self {
            SweepAxis::QueryMode => AxisValue::QueryMode(s.parse()?),
            SweepAxis::MaskSize => AxisValue::MaskSize(s.parse().map_err(|_| bad())?),
            SweepAxis::Modality => AxisValue::Modality(s.parse()?),
            SweepAxis::MaskRatio => AxisValue::MaskRatio(s.parse().map_err(|_| bad())?),
        })
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}` (query_mode, mask_size, modality, mask_ratio)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisValue {
    QueryMode(QueryMode),
    MaskSize(usize),
    Modality(Modality),
    MaskRatio(f64),
}

impl AxisValue {
    pub fn axis(&self) -> SweepAxis {
        match self {
            AxisValue::QueryMode(_) => SweepAxis::QueryMode,
            AxisValue::MaskSize(_) => SweepAxis::MaskSize,
            AxisValue::Modality(_) => SweepAxis::Modality,
            AxisValue::MaskRatio(_) => SweepAxis::MaskRatio,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AxisValue::QueryMode(q) => q.as_str().to_string(),
            AxisValue::MaskSize(s) => s.to_string(),
            AxisValue::Modality(m) => m.as_str().to_string(),
            AxisValue::MaskRatio(r) => r.to_string(),
        }
    }

    /// `axis=label`, used as the report variant id and the cell directory.
    pub fn variant(&self) -> String {
        format!("{}={}", self.axis(), self.label())
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match *self {
            AxisValue::QueryMode(q) => c.model.query_mode = q,
            AxisValue::MaskSize(s) => c.model.patch_size = s,
            AxisValue::Modality(m) => c.model.channels = m.channels(),
            AxisValue::MaskRatio(r) => c.mask_ratio = r,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub eval_samples: usize,
    pub eval_seed: u64,
    /// Skip the probe when `None`.
    pub probe: Option<ProbeConfig>,
    /// How cells are spread; each cell's own work uses `inner`.
    pub cells: Execution,
    pub inner: Execution,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            eval_samples: 32,
            eval_seed: 0,
            probe: Some(ProbeConfig::default()),
            cells: Execution::Sequential,
            inner: Execution::Parallel,
        }
    }
}

fn run_cell(cfg: &RunConfig, value: &AxisValue, opts: &SweepOptions, out_dir: Option<&Path>) -> Result<EvalRow> {
    cfg.validate()?;
    let variant = value.variant();
    let dataset = load_dataset(cfg, opts.inner)?;
    let corpus = Corpus::new(&dataset, cfg)?;
    let cell_dir = out_dir.map(|d| d.join("cells").join(&variant));
    let out = pretrain(cfg, &corpus, cell_dir.as_deref(), opts.inner)?;
    let model = &out.state.model;
    let eval_set = if corpus.dataset().test.is_empty() {
        &corpus.dataset().train
    } else {
        &corpus.dataset().test
    };
    let rec = eval_reconstruction(model, &corpus, eval_set, opts.eval_samples, cfg.mask_ratio, opts.eval_seed, opts.inner)?;
    let probe_acc = match &opts.probe {
        Some(p) => Some(probe_encoder(model.encoder(), &corpus, p, opts.inner)?.accuracy),
        None => None,
    };
    log::info!("sweep cell {variant}: mse {:.6e}", rec.mse);
    Ok(EvalRow {
        variant,
        mse: rec.mse,
        psnr_db: rec.psnr_db,
        probe_acc,
        n_eval: rec.n_eval,
        seed: cfg.seed,
    })
}

/// Pretrains and evaluates one cell per value. Cell artifacts go under
/// `out_dir/cells/<axis>=<label>/` when an output directory is given.
pub fn ablation_sweep(base: &RunConfig, values: &[AxisValue], opts: &SweepOptions, out_dir: Option<&Path>) -> Result<EvalReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    let axis = values[0].axis();
    if values.iter().any(|v| v.axis() != axis) {
        return Err(Error::Config("sweep values must all belong to one axis".into()));
    }
    let cfgs: Vec<(RunConfig, AxisValue)> = values.iter().map(|v| (v.apply(base), *v)).collect();
    let rows = try_map_ordered(opts.cells, &cfgs, |_, (cfg, v)| run_cell(cfg, v, opts, out_dir))?;
    let report = EvalReport { rows };
    if let Some(dir) = out_dir {
        report.save(&dir.join("reports"), &format!("sweep-{axis}"))?;
    }
    Ok(report)
}
