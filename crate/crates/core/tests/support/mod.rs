//! Independent reference implementations shared by the property suites and
//! the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use cosdefense::defenses::{
    cluster_scores, coordinate_median, cos_defense_filter, krum, krum_scores, multi_krum,
    ScoreSegment,
};
use cosdefense::fl::Submission;
use cosdefense::nn::{
    dense_stack, init_model, loss_and_grad, Batch, LayerSpec, Layout, ParamVector, Selector,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Scalar-loop forward pass: weights stored (in, out) row-major, then bias,
/// layer after layer. Returns the mean cross-entropy and every hidden
/// pre-activation sign so kink crossings can be detected.
pub fn oracle_loss(values: &[f64], layers: &[LayerSpec], batch: &Batch) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let mut signs = Vec::new();
    for (row, &label) in batch.features().chunks(batch.dim()).zip(batch.labels()) {
        let mut a: Vec<f64> = row.to_vec();
        let mut off = 0;
        for (k, l) in layers.iter().enumerate() {
            let w = &values[off..off + l.input_dim * l.output_dim];
            off += l.input_dim * l.output_dim;
            let b = &values[off..off + l.output_dim];
            off += l.output_dim;
            let mut z = b.to_vec();
            for (i, ai) in a.iter().enumerate() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj += ai * w[i * l.output_dim + j];
                }
            }
            if k + 1 < layers.len() {
                signs.extend(z.iter().map(|&v| v > 0.0));
                a = z.into_iter().map(|v| v.max(0.0)).collect();
            } else {
                a = z;
            }
        }
        let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - a[label];
    }
    (total / batch.len() as f64, signs)
}

pub struct GradCheck {
    pub worst_rel: f64,
    pub loss_gap: f64,
    pub skipped: usize,
    pub coords: usize,
}

/// Analytic gradient against central differences of [`oracle_loss`].
/// Coordinates whose perturbation flips a ReLU are skipped and counted.
pub fn grad_check(params: &ParamVector, layers: &[LayerSpec], batch: &Batch) -> GradCheck {
    let (loss, grad) = loss_and_grad(params, batch).unwrap();
    let (base, base_signs) = oracle_loss(params.values(), layers, batch);
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut v = params.values().to_vec();
    for i in 0..v.len() {
        let orig = v[i];
        v[i] = orig + FD_STEP;
        let (up, s_up) = oracle_loss(&v, layers, batch);
        v[i] = orig - FD_STEP;
        let (down, s_down) = oracle_loss(&v, layers, batch);
        v[i] = orig;
        if s_up != base_signs || s_down != base_signs {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grad.values()[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    GradCheck {
        worst_rel: worst,
        loss_gap: (loss - base).abs() / base.abs().max(1.0),
        skipped,
        coords: v.len(),
    }
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Score of `i`: the smallest total distance to any `n - f - 2` others.
pub fn brute_krum_scores(rows: &[Vec<f64>], f: usize) -> Vec<f64> {
    let n = rows.len();
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            combinations(others.len(), n - f - 2)
                .into_iter()
                .map(|c| {
                    c.iter()
                        .map(|&p| sq_dist(&rows[i], &rows[others[p]]))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// The unique size-`n - f` subset whose members all rank strictly before
/// every non-member under (score, index).
pub fn brute_multi_krum(scores: &[f64], f: usize) -> Vec<usize> {
    let n = scores.len();
    let before = |i: usize, j: usize| (scores[i], i) < (scores[j], j);
    let valid: Vec<Vec<usize>> = combinations(n, n - f)
        .into_iter()
        .filter(|s| {
            s.iter()
                .all(|&i| (0..n).filter(|j| !s.contains(j)).all(|j| before(i, j)))
        })
        .collect();
    assert_eq!(valid.len(), 1);
    valid.into_iter().next().unwrap()
}

pub fn brute_krum(scores: &[f64]) -> usize {
    (0..scores.len())
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
        .unwrap()
}

/// Per-coordinate median by sorting each column.
pub fn sort_median(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    (0..rows[0].len())
        .map(|c| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            col.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect()
}

/// Hand arithmetic of the cosine filter on absolute scores: true = filtered.
pub fn oracle_flags(abs: &[f64]) -> Vec<bool> {
    let lo = abs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = abs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![false; abs.len()];
    }
    let norm: Vec<f64> = abs.iter().map(|a| (a - lo) / (hi - lo)).collect();
    let mean = norm.iter().sum::<f64>() / norm.len() as f64;
    norm.iter().map(|&s| mean <= s).collect()
}

pub fn scalar_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// Randomized oracle suites. Each returns a one-line summary or the first
// mismatch.

pub type Suite = Result<String, String>;

/// A single `1 -> dim` layer: `dim` weights followed by `dim` biases.
pub fn flat_layout(dim: usize) -> Arc<Layout> {
    Layout::new(&[LayerSpec::logits(1, dim)]).unwrap()
}

pub fn submissions(rows: &[Vec<f64>]) -> Vec<Submission> {
    let layout = flat_layout(rows[0].len() / 2);
    rows.iter()
        .enumerate()
        .map(|(i, r)| Submission {
            client_id: i,
            delta: ParamVector::new(r.clone(), layout.clone()).unwrap(),
        })
        .collect()
}

pub fn krum_suite(seed: u64, instances: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let n = rng.random_range(3..=8);
        let f = rng.random_range(0..=n - 3);
        let dim = rng.random_range(1..=3);
        // small integers make exact ties common
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..2 * dim)
                    .map(|_| rng.random_range(-2..=2) as f64)
                    .collect()
            })
            .collect();
        let subs = submissions(&rows);
        let expect = brute_krum_scores(&rows, f);
        let got = krum_scores(&subs, f).map_err(|e| e.to_string())?;
        if got != expect {
            return Err(format!("case {case}: scores {got:?} vs {expect:?}"));
        }
        let multi = multi_krum(&subs, f).map_err(|e| e.to_string())?;
        if multi != brute_multi_krum(&expect, f) {
            return Err(format!("case {case}: multi-krum {multi:?}"));
        }
        let single = krum(&subs, f).map_err(|e| e.to_string())?;
        if single != brute_krum(&expect) {
            return Err(format!("case {case}: krum picked {single}"));
        }
    }
    Ok(format!("{instances} instances"))
}

pub fn median_suite(seed: u64, instances: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let n = rng.random_range(1..=9);
        let dim = rng.random_range(1..=4);
        let layout = flat_layout(dim);
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..2 * dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let rows: Vec<ParamVector> = raw
            .iter()
            .map(|v| ParamVector::new(v.clone(), layout.clone()).unwrap())
            .collect();
        let refs: Vec<&ParamVector> = rows.iter().collect();
        let got = coordinate_median(&refs).map_err(|e| e.to_string())?;
        for (c, expect) in sort_median(&raw).into_iter().enumerate() {
            let v = got.values()[c];
            let lo = raw.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = raw.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            if (v - expect).abs() > 1e-12 || v < lo || v > hi {
                return Err(format!("case {case} coord {c}: {v} vs {expect}"));
            }
        }
    }
    Ok(format!("{instances} instances"))
}

fn random_params(layout: &Arc<Layout>, rng: &mut ChaCha8Rng) -> ParamVector {
    let v = (0..layout.num_params())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    ParamVector::new(v, layout.clone()).unwrap()
}

/// Score clustering on raw score vectors, then the full filter on random
/// models; both include all-equal and single-client cases.
pub fn filter_suite(seed: u64, vectors: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Vec<f64>> = vec![vec![0.42], vec![0.3; 6], vec![0.0; 3], vec![0.9, 0.9]];
    while cases.len() < vectors {
        let n = rng.random_range(1..=12);
        cases.push((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
    }
    for (case, v) in cases.iter().enumerate() {
        let got = cluster_scores(v);
        if got.malicious != oracle_flags(v) {
            return Err(format!("score vector {case} {v:?}: {:?}", got.malicious));
        }
    }

    let layout = Layout::new(&dense_stack(&[3, 4, 2])).unwrap();
    for case in 0..vectors {
        let n = match case {
            0 => 1,
            _ => rng.random_range(2..=10),
        };
        let global = random_params(&layout, &mut rng);
        let shared = random_params(&layout, &mut rng);
        let updates: Vec<Submission> = (0..n)
            .map(|i| Submission {
                client_id: 10 * i + 3,
                // case 1: identical updates
                delta: if case == 1 {
                    shared.clone()
                } else {
                    random_params(&layout, &mut rng)
                },
            })
            .collect();
        let g = global.segment(Selector::LastWeight).unwrap();
        let abs: Vec<f64> = updates
            .iter()
            .map(|u| scalar_cos(g, u.delta.segment(Selector::LastWeight).unwrap()).abs())
            .collect();
        let expect: Vec<usize> = updates
            .iter()
            .zip(oracle_flags(&abs))
            .filter(|(_, m)| !m)
            .map(|(u, _)| u.client_id)
            .collect();
        let (benign, verdict) = cos_defense_filter(&global, &updates, ScoreSegment::LastWeight)
            .map_err(|e| e.to_string())?;
        if benign != expect {
            return Err(format!(
                "model case {case}: benign {benign:?} vs {expect:?}"
            ));
        }
        if verdict
            .clients
            .iter()
            .zip(&abs)
            .any(|(c, a)| (c.raw_cos.abs() - a).abs() > 1e-12)
        {
            return Err(format!("model case {case}: cosine mismatch"));
        }
    }
    Ok(format!("{vectors} score vectors + {vectors} model cases"))
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let features = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(features, dim, labels).unwrap()
}

/// Random nets of depth 1–3 and widths up to 7. At most 1% of coordinates
/// may be skipped for crossing a ReLU kink.
pub fn gradient_suite(seed: u64, nets: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = 0;
    let mut skipped = 0;
    let mut worst: f64 = 0.0;
    for net in 0..nets {
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=6)];
        for _ in 0..depth - 1 {
            dims.push(rng.random_range(1..=7));
        }
        let classes = rng.random_range(2..=5);
        dims.push(classes);
        let layers = dense_stack(&dims);
        let mut params = init_model(&layers, net as u64).unwrap();
        // non-zero biases so hidden units sit away from their kinks
        for v in params.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let n = rng.random_range(1..=6);
        let batch = random_batch(&mut rng, n, dims[0], classes);
        let check = grad_check(&params, &layers, &batch);
        if check.loss_gap > 1e-12 || check.worst_rel > GRAD_TOL {
            return Err(format!(
                "net {net} {dims:?}: relative error {:.3e}, loss gap {:.3e}",
                check.worst_rel, check.loss_gap
            ));
        }
        worst = worst.max(check.worst_rel);
        coords += check.coords;
        skipped += check.skipped;
    }
    if skipped * 100 > coords {
        return Err(format!("{skipped} of {coords} coordinates crossed a kink"));
    }
    Ok(format!("{nets} nets, max relative error {worst:.2e}"))
}
