//! Running configured experiments end to end: data loading, clip-bound
//! calibration, output files, sweeps and manifest replay.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{load_idx, make_synthetic_with_spread, Dataset, Split};
use crate::defenses::DefenseKind;
use crate::error::{Error, Result};
use crate::fl::Simulation;
use crate::metrics::{
    detection_stats, malicious_score_dominance, mean_benign_filter_rate, RoundRecord,
};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_TOML: &str = "summary.toml";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const SWEEP_CSV: &str = "sweep.csv";

pub const ROUND_COLUMNS: [&str; 8] = [
    "round",
    "test_accuracy",
    "mean_abs_cos_all",
    "mean_abs_cos_benign_truth",
    "mean_abs_cos_malicious_truth",
    "n_filtered",
    "filtered_ids",
    "attack_active",
];

/// Train and test sets for `cfg`.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Mnist | DatasetKind::Fmnist => load_idx_dir(&cfg.data_dir()),
        DatasetKind::Synthetic => {
            let s = &cfg.synthetic;
            let train = make_synthetic_with_spread(
                s.classes,
                s.train_per_class,
                s.dim,
                s.spread,
                cfg.seed,
            )?;
            let test = make_synthetic_with_spread(
                s.classes,
                s.test_per_class,
                s.dim,
                s.spread,
                cfg.seed ^ 0x7e57,
            )?;
            Ok((train, test))
        }
    }
}

/// Load the four standard (uncompressed) IDX files from `dir`.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join(TRAIN_IMAGES),
        &dir.join(TRAIN_LABELS),
        Split::Train,
    )?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), Split::Test)?;
    Ok((train, test))
}

/// Median update norm over the first `clip_calibration_rounds` rounds of an
/// attack-free, undefended run with the same seed.
pub fn calibrate_clip_bound(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<f64> {
    let mut calib = cfg.clone();
    calib.attack.kind = AttackKind::None;
    calib.defense.kind = DefenseKind::None;
    calib.rounds = cfg.clip_calibration_rounds.max(1);
    calib.eval_every = calib.rounds;
    let records = Simulation::new(calib, train, test)?.run(|_| {})?;
    let mut norms: Vec<f64> = records
        .iter()
        .flat_map(|r| r.update_norms.iter().copied())
        .filter(|n| n.is_finite())
        .collect();
    if norms.is_empty() {
        return Err(Error::Aggregation(
            "clip calibration produced no updates".into(),
        ));
    }
    norms.sort_by(f64::total_cmp);
    let m = norms.len();
    let median = if m % 2 == 1 {
        norms[m / 2]
    } else {
        0.5 * (norms[m / 2 - 1] + norms[m / 2])
    };
    if median > 0.0 {
        Ok(median)
    } else {
        Err(Error::Aggregation("calibrated clip bound is zero".into()))
    }
}

/// Scalar results of a run. Contains nothing time-dependent, so replays
/// reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub attack: String,
    pub defense: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub clip_bound: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub mean_benign_filter_rate: Option<f64>,
    pub malicious_score_dominance: Option<f64>,
}

impl RunSummary {
    fn new(cfg: &ExperimentConfig, records: &[RoundRecord], clip_bound: Option<f64>) -> Self {
        let accs = records.iter().filter_map(|r| r.test_accuracy);
        let det = detection_stats(records);
        Self {
            dataset: cfg.dataset.name().into(),
            attack: cfg.attack.kind.name().into(),
            defense: cfg.defense.kind.name().into(),
            seed: cfg.seed,
            rounds: records.len(),
            final_accuracy: records
                .last()
                .and_then(|r| r.test_accuracy)
                .unwrap_or(f64::NAN),
            best_accuracy: accs.fold(f64::NAN, f64::max),
            clip_bound,
            precision: det.precision,
            recall: det.recall,
            false_positive_rate: det.false_positive_rate,
            mean_benign_filter_rate: mean_benign_filter_rate(records),
            malicious_score_dominance: malicious_score_dominance(records),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub code_version: String,
    pub clip_bound: Option<f64>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub manifest: RunManifest,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// The per-round table as CSV text.
pub fn rounds_csv(records: &[RoundRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::parse(ROUNDS_CSV, e.to_string());
    w.write_record(ROUND_COLUMNS).map_err(csv_err)?;
    for r in records {
        let ids: Vec<String> = r.filtered_ids.iter().map(usize::to_string).collect();
        w.write_record([
            r.round.to_string(),
            fmt_opt(r.test_accuracy),
            fmt_opt(r.mean_abs_cos_all),
            fmt_opt(r.mean_abs_cos_benign_truth),
            fmt_opt(r.mean_abs_cos_malicious_truth),
            r.filtered_ids.len().to_string(),
            ids.join(";"),
            r.attack_active.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::parse(ROUNDS_CSV, e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Run `cfg` on already-loaded data. With `out_dir`, writes the per-round
/// CSV, the summary and the manifest there.
pub fn run_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let mut resolved = cfg.clone();
    let clip_bound = if cfg.defense.kind == DefenseKind::ClippingMedian {
        let b = match cfg.defense.clip_bound {
            Some(b) => b,
            None => calibrate_clip_bound(cfg, train, test)?,
        };
        resolved.defense.clip_bound = Some(b);
        Some(b)
    } else {
        None
    };
    let records = Simulation::new(resolved, train, test)?.run(|_| {})?;
    let summary = RunSummary::new(cfg, &records, clip_bound);
    let mut manifest = RunManifest {
        config: cfg.clone(),
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        clip_bound,
        outputs: Vec::new(),
        wall_clock_seconds: 0.0,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(ROUNDS_CSV), &rounds_csv(&records)?)?;
        let summary_text =
            toml::to_string(&summary).map_err(|e| Error::parse(SUMMARY_TOML, e.to_string()))?;
        write_file(&dir.join(SUMMARY_TOML), &summary_text)?;
        manifest.outputs = vec![ROUNDS_CSV.into(), SUMMARY_TOML.into()];
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::parse(MANIFEST_JSON, e.to_string()))?;
        write_file(&dir.join(MANIFEST_JSON), &json)?;
    } else {
        manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    }
    Ok(RunOutput {
        records,
        summary,
        manifest,
    })
}

/// Load the configured data and run.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    run_on(cfg, &train, &test, out_dir)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(MANIFEST_JSON, e.to_string()))
}

/// Re-run the configuration recorded in a manifest into `out_dir`.
pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<RunOutput> {
    let manifest = read_manifest(manifest_path)?;
    run_experiment(&manifest.config, Some(out_dir))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    MaliciousFrac,
    Q,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MaliciousFrac => "malicious_frac",
            SweepAxis::Q => "q",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::MaliciousFrac => vec![0.1, 0.2, 0.3, 0.4],
            SweepAxis::Q => vec![0.1, 0.3, 0.5],
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepAxis::MaliciousFrac => cfg.malicious_frac = value,
            SweepAxis::Q => cfg.q = value,
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "malicious_frac" | "fraction" | "p" => Ok(SweepAxis::MaliciousFrac),
            "q" => Ok(SweepAxis::Q),
            _ => Err(Error::config(format!(
                "unknown sweep axis `{s}` (expected malicious_frac or q)"
            ))),
        }
    }
}

pub const SWEEP_DEFENSES: [DefenseKind; 3] = [
    DefenseKind::CosDefense,
    DefenseKind::Krum,
    DefenseKind::ClippingMedian,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub index: usize,
    pub value: f64,
    pub defense: DefenseKind,
    pub seed: u64,
    pub final_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn get(&self, value: f64, defense: DefenseKind) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.value == value && c.defense == defense)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},defense,seed,final_accuracy,error\n", self.axis.name());
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.value,
                c.defense,
                c.seed,
                fmt_opt(c.final_accuracy),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
        out
    }
}

/// Seed of sweep cell `index`.
pub fn child_seed(base_seed: u64, index: usize) -> u64 {
    base_seed.wrapping_mul(1000).wrapping_add(index as u64)
}

/// Run every `(value, defense)` cell; a failing cell is recorded and the
/// sweep continues. Cell `i` runs with [`child_seed`]`(base.seed, i)`.
pub fn run_sweep_on(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    defenses: &[DefenseKind],
    train: &Dataset,
    test: &Dataset,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    let jobs: Vec<(usize, f64, DefenseKind)> = values
        .iter()
        .flat_map(|&v| defenses.iter().map(move |&d| (v, d)))
        .enumerate()
        .map(|(i, (v, d))| (i, v, d))
        .collect();
    let one = |&(index, value, defense): &(usize, f64, DefenseKind)| {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value);
        cfg.defense.kind = defense;
        cfg.seed = child_seed(base.seed, index);
        let dir: Option<PathBuf> =
            out_dir.map(|d| d.join(format!("cell{index:02}-{}{value}-{defense}", axis.name())));
        let result = run_on(&cfg, train, test, dir.as_deref());
        SweepCell {
            index,
            value,
            defense,
            seed: cfg.seed,
            final_accuracy: result.as_ref().ok().map(|r| r.summary.final_accuracy),
            error: result.err().map(|e| e.to_string()),
        }
    };
    let cells: Vec<SweepCell> = if base.parallel {
        jobs.par_iter().map(one).collect()
    } else {
        jobs.iter().map(one).collect()
    };
    let table = SweepTable { axis, cells };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(SWEEP_CSV), &table.to_csv())?;
    }
    Ok(table)
}

pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    defenses: &[DefenseKind],
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    let (train, test) = load_datasets(base)?;
    run_sweep_on(base, axis, values, defenses, &train, &test, out_dir)
}
