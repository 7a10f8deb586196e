//! End-to-end acceptance run on MNIST plus the oracle suites. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.
//!
//! MNIST IDX files are read from `$COSDEF_MNIST_DIR`, else `data/mnist` at
//! the workspace root.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use cosdefense::attacks::AttackKind;
use cosdefense::config::{DatasetKind, ExperimentConfig};
use cosdefense::data::Dataset;
use cosdefense::defenses::DefenseKind;
use cosdefense::experiment::{
    load_idx_dir, replay, run_on, run_sweep_on, RunOutput, SweepAxis, SweepTable, MANIFEST_JSON,
    ROUNDS_CSV, SUMMARY_TOML, SWEEP_DEFENSES,
};
use cosdefense::metrics::{
    cosine_trace, layerwise_similarity_experiment, malicious_score_dominance,
    mean_benign_filter_rate, LayerSimilarityConfig,
};

const COLLAPSE_MAX: f64 = 0.15;
const COLLAPSE_MINUTES: f64 = 30.0;
const RECOVERY_MIN: f64 = 0.70;
const RECOVERY_GAP: f64 = 0.25;
const KRUM_MAX: f64 = 0.30;
const CLIPPING_MEDIAN_MAX: f64 = 0.35;
const FRACTIONS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
const TIE_SLACK: f64 = 0.02;
const TIE_MAX_FRACTION: f64 = 0.2;
const SKEWS: [f64; 3] = [0.1, 0.3, 0.5];
const SKEW_SPREAD_MAX: f64 = 0.15;
const TRACE_WINDOW: usize = 40;
const BEFORE: (usize, usize) = (40, 200);
const AFTER: (usize, usize) = (240, 400);
const DOMINANCE_MIN: f64 = 0.90;
const SIMILARITY_MINUTES: f64 = 10.0;
const HARMLESS_GAP: f64 = 0.03;
const BENIGN_FILTER_MAX: f64 = 0.40;

type Check = Result<(bool, String), String>;
type MnistCheck = fn(&mut Mnist) -> Check;

fn mnist_dir() -> PathBuf {
    match std::env::var_os("COSDEF_MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

struct Mnist {
    dir: PathBuf,
    train: Dataset,
    test: Dataset,
    runs: HashMap<String, RunOutput>,
}

impl Mnist {
    fn load() -> Result<Self, String> {
        let dir = mnist_dir();
        let (train, test) = load_idx_dir(&dir).map_err(|e| format!("MNIST unavailable: {e}"))?;
        let dir = dir.canonicalize().map_err(|e| e.to_string())?;
        Ok(Self {
            dir,
            train,
            test,
            runs: HashMap::new(),
        })
    }

    /// Paper-scale defaults under IPM; accuracy is evaluated every 50 rounds
    /// and at the final round.
    fn base(&self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_dir: Some(self.dir.clone()),
            eval_every: 50,
            ..Default::default()
        };
        cfg.attack.kind = AttackKind::Ipm;
        cfg
    }

    fn with(&self, defense: DefenseKind, malicious_frac: f64) -> ExperimentConfig {
        let mut cfg = self.base();
        cfg.defense.kind = defense;
        cfg.malicious_frac = malicious_frac;
        cfg
    }

    fn run(&mut self, cfg: &ExperimentConfig) -> Result<&RunOutput, String> {
        let key = cfg.to_toml_string();
        if !self.runs.contains_key(&key) {
            let started = Instant::now();
            let out = run_on(cfg, &self.train, &self.test, None).map_err(|e| e.to_string())?;
            eprintln!(
                "  ran {} / {} p={} q={}: final {:.4} in {:.0} s",
                cfg.attack.kind.name(),
                cfg.defense.kind,
                cfg.malicious_frac,
                cfg.q,
                out.summary.final_accuracy,
                started.elapsed().as_secs_f64()
            );
            self.runs.insert(key.clone(), out);
        }
        Ok(&self.runs[&key])
    }

    fn final_acc(&mut self, defense: DefenseKind) -> Result<f64, String> {
        let cfg = self.with(defense, 0.3);
        Ok(self.run(&cfg)?.summary.final_accuracy)
    }

    fn sweep(&self, axis: SweepAxis, values: &[f64]) -> Result<SweepTable, String> {
        let started = Instant::now();
        let table = run_sweep_on(
            &self.base(),
            axis,
            values,
            &SWEEP_DEFENSES,
            &self.train,
            &self.test,
            None,
        )
        .map_err(|e| e.to_string())?;
        eprintln!(
            "  {} sweep in {:.0} s",
            axis.name(),
            started.elapsed().as_secs_f64()
        );
        if let Some(bad) = table.cells.iter().find(|c| c.error.is_some()) {
            return Err(format!(
                "cell {} failed: {}",
                bad.index,
                bad.error.as_deref().unwrap_or("")
            ));
        }
        Ok(table)
    }
}

fn cell(table: &SweepTable, value: f64, defense: DefenseKind) -> f64 {
    table
        .get(value, defense)
        .and_then(|c| c.final_accuracy)
        .unwrap_or(f64::NAN)
}

fn attack_collapse(m: &mut Mnist) -> Check {
    let cfg = m.with(DefenseKind::None, 0.3);
    let started = Instant::now();
    let acc = m.run(&cfg)?.summary.final_accuracy;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    Ok((
        acc <= COLLAPSE_MAX && minutes <= COLLAPSE_MINUTES,
        format!("none final {acc:.4} (max {COLLAPSE_MAX}), {minutes:.1} min"),
    ))
}

fn cos_recovery(m: &mut Mnist) -> Check {
    let cos = m.final_acc(DefenseKind::CosDefense)?;
    let krum = m.final_acc(DefenseKind::Krum)?;
    let cm = m.final_acc(DefenseKind::ClippingMedian)?;
    let pass = cos >= RECOVERY_MIN && cos - krum >= RECOVERY_GAP && cos - cm >= RECOVERY_GAP;
    Ok((
        pass,
        format!(
            "cos_defense {cos:.4} (min {RECOVERY_MIN}), gap to krum {:.4}, to clipping_median {:.4} (min {RECOVERY_GAP})",
            cos - krum,
            cos - cm
        ),
    ))
}

fn baseline_collapse(m: &mut Mnist) -> Check {
    let krum = m.final_acc(DefenseKind::Krum)?;
    let cm = m.final_acc(DefenseKind::ClippingMedian)?;
    Ok((
        krum <= KRUM_MAX && cm <= CLIPPING_MEDIAN_MAX,
        format!(
            "krum {krum:.4} (max {KRUM_MAX}), clipping_median {cm:.4} (max {CLIPPING_MEDIAN_MAX})"
        ),
    ))
}

fn fraction_sweep(m: &mut Mnist) -> Check {
    let table = m.sweep(SweepAxis::MaliciousFrac, &FRACTIONS)?;
    let mut pass = true;
    let mut parts = Vec::new();
    for p in FRACTIONS {
        let cos = cell(&table, p, DefenseKind::CosDefense);
        let slack = if p <= TIE_MAX_FRACTION + 1e-9 {
            TIE_SLACK
        } else {
            0.0
        };
        let krum = cell(&table, p, DefenseKind::Krum);
        let cm = cell(&table, p, DefenseKind::ClippingMedian);
        pass &= cos >= krum - slack && cos >= cm - slack;
        parts.push(format!("p={p}: {cos:.3}/{krum:.3}/{cm:.3}"));
    }
    Ok((
        pass,
        format!("cos/krum/clipping_median {}", parts.join(", ")),
    ))
}

fn skew_sweep(m: &mut Mnist) -> Check {
    let table = m.sweep(SweepAxis::Q, &SKEWS)?;
    let mut pass = true;
    let mut parts = Vec::new();
    let mut cos_all = Vec::new();
    for q in SKEWS {
        let cos = cell(&table, q, DefenseKind::CosDefense);
        let krum = cell(&table, q, DefenseKind::Krum);
        let cm = cell(&table, q, DefenseKind::ClippingMedian);
        pass &= cos > krum && cos > cm;
        cos_all.push(cos);
        parts.push(format!("q={q}: {cos:.3}/{krum:.3}/{cm:.3}"));
    }
    let hi = cos_all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = cos_all.iter().copied().fold(f64::INFINITY, f64::min);
    pass &= hi - lo <= SKEW_SPREAD_MAX;
    Ok((
        pass,
        format!(
            "cos_defense spread {:.4} (max {SKEW_SPREAD_MAX}); cos/krum/clipping_median {}",
            hi - lo,
            parts.join(", ")
        ),
    ))
}

fn trace_numbers(out: &RunOutput) -> Result<(f64, f64, f64), String> {
    let trace = cosine_trace(&out.records, TRACE_WINDOW).map_err(|e| e.to_string())?;
    let before = trace
        .smoothed_mean(BEFORE.0, BEFORE.1 + 1)
        .unwrap_or(f64::NAN);
    let after = trace
        .smoothed_mean(AFTER.0, AFTER.1 + 1)
        .unwrap_or(f64::NAN);
    let dominance = malicious_score_dominance(&out.records).unwrap_or(f64::NAN);
    Ok((before, after, dominance))
}

/// Judged on the undefended IPM run; the CosDefense run is reported alongside.
fn trace_separation(m: &mut Mnist) -> Check {
    let (before, after, dominance) = trace_numbers(m.run(&m.with(DefenseKind::None, 0.3))?)?;
    let (cb, ca, cd) = trace_numbers(m.run(&m.with(DefenseKind::CosDefense, 0.3))?)?;
    Ok((
        after > before && dominance >= DOMINANCE_MIN,
        format!(
            "none: rounds 40-200 {before:.4}, 240-400 {after:.4}, malicious above benign in {dominance:.3} of rounds (min {DOMINANCE_MIN}); \
             cos_defense: {cb:.4}, {ca:.4}, {cd:.3}"
        ),
    ))
}

fn layer_order(m: &mut Mnist) -> Check {
    let layers = m.base().layer_specs();
    let started = Instant::now();
    let sim =
        layerwise_similarity_experiment(&layers, &m.train, &LayerSimilarityConfig::default(), 1)
            .map_err(|e| e.to_string())?;
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let last = sim.last().ok_or("no snapshots")?;
    let (tail, head) = last.split_last().ok_or("no layers")?;
    let pass = head.iter().all(|s| tail < s) && minutes <= SIMILARITY_MINUTES;
    let shown: Vec<String> = last.iter().map(|s| format!("{s:.4}")).collect();
    Ok((
        pass,
        format!(
            "per-layer similarity after {} iterations [{}], {minutes:.1} min",
            sim.iterations.last().copied().unwrap_or(0),
            shown.join(", ")
        ),
    ))
}

fn no_attack_harmless(m: &mut Mnist) -> Check {
    let none = m
        .run(&m.with(DefenseKind::None, 0.0))?
        .summary
        .final_accuracy;
    let cos_out = m.run(&m.with(DefenseKind::CosDefense, 0.0))?;
    let cos = cos_out.summary.final_accuracy;
    let rate = mean_benign_filter_rate(&cos_out.records).unwrap_or(f64::NAN);
    Ok((
        (cos - none).abs() <= HARMLESS_GAP && rate <= BENIGN_FILTER_MAX,
        format!(
            "p=0 cos_defense {cos:.4} vs none {none:.4} (max gap {HARMLESS_GAP}), benign filter rate {rate:.3} (max {BENIGN_FILTER_MAX})"
        ),
    ))
}

fn oracle_suites() -> Check {
    let krum = support::krum_suite(41, 200)?;
    let median = support::median_suite(77, 200)?;
    let filter = support::filter_suite(123, 50)?;
    Ok((
        true,
        format!("krum {krum}; median {median}; filter {filter}"),
    ))
}

fn gradient_check() -> Check {
    Ok((true, support::gradient_suite(2024, 20)?))
}

fn determinism(m: &mut Mnist) -> Check {
    let mut cfg = m.with(DefenseKind::CosDefense, 0.3);
    cfg.rounds = 30;
    cfg.attack.start_round = 10;
    cfg.eval_every = 10;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs: Vec<PathBuf> = ["first", "second", "single"]
        .iter()
        .map(|d| tmp.path().join(d))
        .collect();
    let pool = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| e.to_string())
    };
    pool(4)?
        .install(|| run_on(&cfg, &m.train, &m.test, Some(&dirs[0])))
        .map_err(|e| e.to_string())?;
    let manifest = dirs[0].join(MANIFEST_JSON);
    pool(4)?
        .install(|| replay(&manifest, &dirs[1]))
        .map_err(|e| e.to_string())?;
    pool(1)?
        .install(|| replay(&manifest, &dirs[2]))
        .map_err(|e| e.to_string())?;
    let read = |d: &PathBuf, f: &str| fs::read(d.join(f)).map_err(|e| e.to_string());
    let mut same = true;
    for f in [ROUNDS_CSV, SUMMARY_TOML] {
        let a = read(&dirs[0], f)?;
        same &= a == read(&dirs[1], f)? && a == read(&dirs[2], f)?;
    }
    Ok((
        same,
        format!(
            "30-round MNIST manifest replayed on 4 threads and on 1: outputs {}",
            if same { "identical" } else { "differ" }
        ),
    ))
}

fn report(n: usize, name: &str, check: Check) -> bool {
    let (pass, detail) = check.unwrap_or_else(|e| (false, e));
    println!(
        "criterion {n:>2} {} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results = Vec::new();
    let mnist_checks: [(usize, &str, MnistCheck); 9] = [
        (1, "attack collapse", attack_collapse),
        (2, "cos_defense recovery", cos_recovery),
        (3, "baseline collapse", baseline_collapse),
        (4, "attacker-fraction sweep", fraction_sweep),
        (5, "non-iid sweep", skew_sweep),
        (6, "trace separation", trace_separation),
        (7, "layer order", layer_order),
        (8, "no-attack harmlessness", no_attack_harmless),
        (11, "determinism", determinism),
    ];
    let mut mnist = Mnist::load();
    for (n, name, f) in mnist_checks {
        let check = match &mut mnist {
            Ok(m) => f(m),
            Err(e) => Err(e.clone()),
        };
        results.push((n, name, check));
    }
    results.push((9, "oracle suites", oracle_suites()));
    results.push((10, "gradient check", gradient_check()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, check) in results {
        if !report(n, name, check) {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} of 11 passed in {:.1} min",
        11 - failed,
        started.elapsed().as_secs_f64() / 60.0
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
