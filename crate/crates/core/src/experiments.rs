//! Ablation study and hyperparameter sweeps over train/test pairs.

use serde::{Deserialize, Serialize};

use crate::data::SeriesMatrix;
use crate::detector::{Detector, ScoreOptions};
use crate::error::{PgmaError, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// One static graph instead of per-slot graphs.
    WithoutPeriodicGraph,
    /// Temporal convolution branch removed.
    WithoutTemporal,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::WithoutPeriodicGraph, Variant::WithoutTemporal];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutPeriodicGraph => "w/o PGSL",
            Variant::WithoutTemporal => "w/o STIA",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        match norm.as_str() {
            "full" => Ok(Variant::Full),
            "w/o-pgsl" | "wo-pgsl" | "static-graph" => Ok(Variant::WithoutPeriodicGraph),
            "w/o-stia" | "wo-stia" | "no-temporal-conv" => Ok(Variant::WithoutTemporal),
            _ => Err(PgmaError::Config(format!("unknown ablation variant {s:?}"))),
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutPeriodicGraph => c.static_graph = true,
            Variant::WithoutTemporal => c.no_temporal_conv = true,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Trains on `train` with `cfg` and reports point-wise metrics on `test`.
pub fn run_once(
    train: &SeriesMatrix,
    test: &SeriesMatrix,
    cfg: &TrainConfig,
    opts: &ScoreOptions,
) -> Result<RunResult> {
    if test.labels().is_none() {
        return Err(PgmaError::Config("experiments need a labeled test series".into()));
    }
    let (det, _) = Detector::fit(train, cfg)?;
    let out = det.score(test, opts)?;
    let m = out.metrics.expect("labeled test series yields metrics");
    Ok(RunResult {
        seed: cfg.seed,
        f1: m.f1,
        precision: m.precision,
        recall: m.recall,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: Vec<RunResult>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

/// Runs every variant not in `skip` once per seed.
pub fn ablation(
    train: &SeriesMatrix,
    test: &SeriesMatrix,
    cfg: &TrainConfig,
    seeds: &[u64],
    skip: &[Variant],
    opts: &ScoreOptions,
) -> Result<AblationTable> {
    let mut warnings = Vec::new();
    let norm = crate::data::fit_normalizer(train, cfg.normalization).apply(train)?;
    if crate::spectral::detect_period(&norm)?.aperiodic {
        let w = "training data has no dominant period; the periodic graph variant degenerates to a single phase".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    let mut rows = Vec::new();
    for v in Variant::ALL.into_iter().filter(|v| !skip.contains(v)) {
        let vcfg = v.apply(cfg);
        let runs = seeds
            .iter()
            .map(|&seed| {
                log::info!("ablation {} seed {seed}", v.name());
                run_once(train, test, &TrainConfig { seed, ..vcfg.clone() }, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        let f1s: Vec<f64> = runs.iter().map(|r| r.f1).collect();
        rows.push(AblationRow {
            variant: v.name().to_string(),
            mean_f1: mean(&f1s),
            runs,
        });
    }
    Ok(AblationTable { rows, warnings })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,precision,recall,f1\n");
        for row in &self.rows {
            for r in &row.runs {
                s += &format!("{},{},{},{},{}\n", row.variant, r.seed, r.precision, r.recall, r.f1);
            }
            s += &format!("{},mean,,,{}\n", row.variant, row.mean_f1);
        }
        s
    }

    pub fn mean_f1(&self, v: Variant) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == v.name()).map(|r| r.mean_f1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Neighbors per node.
    K,
    /// Graph feature dimension.
    Filters,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Filters => "filters",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::K => vec![10, 15, 20, 25, 30, 35, 40],
            SweepAxis::Filters => vec![4, 8, 16, 32, 64, 128],
        }
    }

    fn apply(self, cfg: &TrainConfig, value: usize) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::K => c.k = value,
            SweepAxis::Filters => c.graph_dim = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    /// Value actually used; `k` is capped at `N - 1`.
    pub effective: usize,
    pub runs: Vec<RunResult>,
    pub mean_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

pub fn sweep(
    train: &SeriesMatrix,
    test: &SeriesMatrix,
    cfg: &TrainConfig,
    axis: SweepAxis,
    values: &[usize],
    seeds: &[u64],
    opts: &ScoreOptions,
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(PgmaError::Config("sweep needs at least one value".into()));
    }
    let n = train.n_sensors();
    let mut rows = Vec::new();
    for &value in values {
        let vcfg = axis.apply(cfg, value);
        vcfg.validate()?;
        let effective = match axis {
            SweepAxis::K => vcfg.effective_k(n),
            SweepAxis::Filters => value,
        };
        if effective != value {
            log::warn!("{} = {value} capped to {effective} for {n} sensors", axis.name());
        }
        let runs = seeds
            .iter()
            .map(|&seed| {
                log::info!("sweep {} = {value} seed {seed}", axis.name());
                run_once(train, test, &TrainConfig { seed, ..vcfg.clone() }, opts)
            })
            .collect::<Result<Vec<_>>>()?;
        let f1s: Vec<f64> = runs.iter().map(|r| r.f1).collect();
        rows.push(SweepRow {
            value,
            effective,
            mean_f1: mean(&f1s),
            runs,
        });
    }
    Ok(SweepReport { axis, rows })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},effective,mean_f1\n", self.axis.name());
        for r in &self.rows {
            s += &format!("{},{},{}\n", r.value, r.effective, r.mean_f1);
        }
        s
    }

    /// Row with the highest mean F1; ties go to the smaller value.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().fold(None, |acc: Option<&SweepRow>, r| match acc {
            Some(b) if b.mean_f1 >= r.mean_f1 => Some(b),
            _ => Some(r),
        })
    }
}
