//! wasm-bindgen exports for the static demo page in `www/`.
//!
//! Every export returns a JSON string. Failures come back as
//! `{"error": "..."}` so the page can show them without a JS exception.

use cosdefense::attacks::AttackKind;
use cosdefense::config::{DatasetKind, ExperimentConfig};
use cosdefense::data::{make_synthetic, partition_noniid};
use cosdefense::defenses::{cluster_scores, DefenseKind};
use cosdefense::experiment::{calibrate_clip_bound, load_datasets};
use cosdefense::fl::Simulation;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const PARTITION_CLASSES: usize = 10;
const PARTITION_PER_CLASS: usize = 100;

fn to_json<T: Serialize>(result: Result<T, String>) -> String {
    match result {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn parse_scores(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| format!("not a number: {s:?}"))
                .map(f64::abs)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct Clustering {
    scores: Vec<f64>,
    normalized: Vec<f64>,
    /// `null` when every score is equal.
    threshold: Option<f64>,
    malicious: Vec<bool>,
}

/// Normalize and threshold a comma- or space-separated list of cosine
/// scores (absolute values are taken).
#[wasm_bindgen]
pub fn cluster(scores: &str) -> String {
    to_json(parse_scores(scores).and_then(|scores| {
        if scores.is_empty() {
            return Err("enter at least one score".into());
        }
        let c = cluster_scores(&scores);
        Ok(Clustering {
            threshold: c.threshold.is_finite().then_some(c.threshold),
            normalized: c.normalized,
            malicious: c.malicious,
            scores,
        })
    }))
}

#[derive(Debug, Serialize)]
struct Histogram {
    classes: usize,
    /// `counts[client][label]`.
    counts: Vec<Vec<usize>>,
    groups: Vec<usize>,
}

/// Per-client label counts of a 10-class, 1000-example label-skew split.
#[wasm_bindgen]
pub fn partition(clients: usize, q: f64, seed: u32) -> String {
    to_json((|| {
        let seed = u64::from(seed);
        let ds = make_synthetic(PARTITION_CLASSES, PARTITION_PER_CLASS, 2, seed)
            .map_err(|e| e.to_string())?;
        let p = partition_noniid(&ds, clients, q, seed).map_err(|e| e.to_string())?;
        let counts = (0..clients)
            .map(|c| {
                let mut h = vec![0; PARTITION_CLASSES];
                for &i in p.client(c) {
                    h[ds.label(i)] += 1;
                }
                h
            })
            .collect();
        Ok(Histogram {
            classes: PARTITION_CLASSES,
            counts,
            groups: (0..clients).map(|c| p.group_of(c)).collect(),
        })
    })())
}

#[derive(Debug, Serialize)]
struct Curves {
    accuracy: Vec<f64>,
    mean_abs_cos_benign: Vec<Option<f64>>,
    mean_abs_cos_malicious: Vec<Option<f64>>,
    filtered: Vec<usize>,
    attack_start: usize,
}

fn simulate_inner(
    defense: &str,
    malicious_frac: f64,
    ipm_eps: f64,
    rounds: usize,
    seed: u32,
) -> Result<Curves, String> {
    let mut cfg = ExperimentConfig {
        dataset: DatasetKind::Synthetic,
        hidden: vec![16],
        clients: 30,
        rounds,
        sample_rate: 0.3,
        lr: 0.1,
        batch_size: 16,
        malicious_frac,
        seed: seed.into(),
        eval_every: 1,
        clip_calibration_rounds: 20,
        parallel: false,
        ..Default::default()
    };
    cfg.attack.kind = AttackKind::Ipm;
    cfg.attack.ipm_eps = ipm_eps;
    cfg.attack.start_round = rounds / 4;
    cfg.defense.kind = defense.parse::<DefenseKind>().map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    let (train, test) = load_datasets(&cfg).map_err(|e| e.to_string())?;
    if cfg.defense.kind == DefenseKind::ClippingMedian {
        cfg.defense.clip_bound =
            Some(calibrate_clip_bound(&cfg, &train, &test).map_err(|e| e.to_string())?);
    }
    let start = cfg.attack.start_round;
    let records = Simulation::new(cfg, &train, &test)
        .and_then(|mut s| s.run(|_| {}))
        .map_err(|e| e.to_string())?;
    Ok(Curves {
        accuracy: records
            .iter()
            .map(|r| r.test_accuracy.unwrap_or(f64::NAN))
            .collect(),
        mean_abs_cos_benign: records
            .iter()
            .map(|r| r.mean_abs_cos_benign_truth)
            .collect(),
        mean_abs_cos_malicious: records
            .iter()
            .map(|r| r.mean_abs_cos_malicious_truth)
            .collect(),
        filtered: records.iter().map(|r| r.filtered_ids.len()).collect(),
        attack_start: start,
    })
}

/// A 30-client synthetic federation under IPM from a quarter of the way in,
/// with accuracy and per-kind cosine scores for every round.
#[wasm_bindgen]
pub fn simulate(
    defense: &str,
    malicious_frac: f64,
    ipm_eps: f64,
    rounds: usize,
    seed: u32,
) -> String {
    to_json(simulate_inner(
        defense,
        malicious_frac,
        ipm_eps,
        rounds,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn cluster_flags_the_outlier() {
        let v = parse(&cluster("0.1, 0.12 -0.9 0.11"));
        assert_eq!(
            v["malicious"],
            serde_json::json!([false, false, true, false])
        );
        assert_eq!(v["scores"][2], 0.9);
    }

    #[test]
    fn cluster_equal_scores_have_no_threshold() {
        let v = parse(&cluster("0.4 0.4"));
        assert!(v["threshold"].is_null());
        assert!(parse(&cluster("0.4 x"))["error"].is_string());
        assert!(parse(&cluster(""))["error"].is_string());
    }

    #[test]
    fn partition_counts_cover_the_dataset() {
        let v = parse(&partition(20, 0.5, 3));
        let total: u64 = v["counts"]
            .as_array()
            .unwrap()
            .iter()
            .flat_map(|c| c.as_array().unwrap())
            .map(|n| n.as_u64().unwrap())
            .sum();
        assert_eq!(total, 1000);
        assert!(parse(&partition(15, 0.5, 3))["error"].is_string());
    }

    #[test]
    fn simulate_returns_one_point_per_round() {
        let v = parse(&simulate("cos_defense", 0.3, 5.0, 40, 1));
        assert_eq!(v["accuracy"].as_array().unwrap().len(), 40);
        assert_eq!(v["attack_start"], 10);
        assert!(parse(&simulate("nope", 0.3, 5.0, 40, 1))["error"].is_string());
    }
}
