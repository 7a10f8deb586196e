//! Per-round records, evaluation, trace smoothing, detection statistics and
//! the independent-training layer-similarity experiment.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{partition_noniid, sample_batch, Dataset, Partition};
use crate::defenses::{cosine_similarity, DefenseVerdict};
use crate::error::{Error, Result};
use crate::fl::ClientId;
use crate::nn::{argmax, forward_rows, sgd_step, LayerSpec, ParamVector, Selector};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Accuracy of the post-round model; `None` on rounds that were not evaluated.
    pub test_accuracy: Option<f64>,
    /// Mean |last-layer cosine| with the pre-round global model, over all
    /// received updates and by ground truth.
    pub mean_abs_cos_all: Option<f64>,
    pub mean_abs_cos_benign_truth: Option<f64>,
    pub mean_abs_cos_malicious_truth: Option<f64>,
    /// Clients whose updates reached the server, ascending.
    pub received: Vec<ClientId>,
    pub malicious_received: Vec<ClientId>,
    /// Update norms, aligned with `received`.
    pub update_norms: Vec<f64>,
    pub filtered_ids: Vec<ClientId>,
    pub benign_set_size: usize,
    pub attack_active: bool,
    pub mean_local_loss: f64,
    #[serde(skip)]
    pub verdict: Option<DefenseVerdict>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl RoundRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn from_scores(
        round: usize,
        test_accuracy: Option<f64>,
        received: &[ClientId],
        truth: &[bool],
        abs_cos: &[f64],
        update_norms: Vec<f64>,
        filtered_ids: Vec<ClientId>,
        attack_active: bool,
        mean_local_loss: f64,
        verdict: Option<DefenseVerdict>,
    ) -> Self {
        let pick = |want: bool| {
            mean(
                abs_cos
                    .iter()
                    .zip(truth)
                    .filter(move |(_, &m)| m == want)
                    .map(|(&c, _)| c),
            )
        };
        Self {
            round,
            test_accuracy,
            mean_abs_cos_all: mean(abs_cos.iter().copied()),
            mean_abs_cos_benign_truth: pick(false),
            mean_abs_cos_malicious_truth: pick(true),
            received: received.to_vec(),
            malicious_received: received
                .iter()
                .zip(truth)
                .filter(|(_, &m)| m)
                .map(|(&id, _)| id)
                .collect(),
            update_norms,
            benign_set_size: received.len() - filtered_ids.len(),
            filtered_ids,
            attack_active,
            mean_local_loss,
            verdict,
        }
    }
}

/// Fraction of argmax-correct predictions.
pub fn evaluate_accuracy(params: &ParamVector, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    const CHUNK: usize = 1000;
    let dim = test.dim();
    let mut correct = 0usize;
    for (rows, labels) in test
        .features()
        .chunks(CHUNK * dim)
        .zip(test.labels().chunks(CHUNK))
    {
        let logits = forward_rows(params, rows, dim)?;
        correct += logits
            .outer_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row.view()) == y)
            .count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Trailing moving average: element `k` is the mean of
/// `series[max(0, k - window + 1) ..= k]`.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::config("moving-average window must be >= 1"));
    }
    Ok((0..series.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(window);
            let slice = &series[lo..=k];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSeries {
    pub raw: Vec<f64>,
    pub window: usize,
    pub smoothed: Vec<f64>,
}

impl TraceSeries {
    pub fn new(raw: Vec<f64>, window: usize) -> Result<Self> {
        let smoothed = moving_average(&raw, window)?;
        Ok(Self {
            raw,
            window,
            smoothed,
        })
    }

    /// Mean of the smoothed trace over rounds `from..to`.
    pub fn smoothed_mean(&self, from: usize, to: usize) -> Option<f64> {
        mean(
            self.smoothed
                .get(from..to.min(self.smoothed.len()))?
                .iter()
                .copied(),
        )
    }
}

/// Smoothed `mean_abs_cos_all` trace. Rounds with no received update are NaN.
pub fn cosine_trace(records: &[RoundRecord], window: usize) -> Result<TraceSeries> {
    let raw = records
        .iter()
        .map(|r| r.mean_abs_cos_all.unwrap_or(f64::NAN))
        .collect();
    TraceSeries::new(raw, window)
}

/// Confusion counts over `(round, client)` decisions, positive = malicious.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DetectionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

/// `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionStats {
    pub counts: DetectionCounts,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub false_positive_rate: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl DetectionCounts {
    pub fn record(&mut self, is_malicious: bool, filtered: bool) {
        match (is_malicious, filtered) {
            (true, true) => self.true_positives += 1,
            (false, true) => self.false_positives += 1,
            (true, false) => self.false_negatives += 1,
            (false, false) => self.true_negatives += 1,
        }
    }

    pub fn stats(self) -> DetectionStats {
        DetectionStats {
            counts: self,
            precision: ratio(
                self.true_positives,
                self.true_positives + self.false_positives,
            ),
            recall: ratio(
                self.true_positives,
                self.true_positives + self.false_negatives,
            ),
            false_positive_rate: ratio(
                self.false_positives,
                self.false_positives + self.true_negatives,
            ),
        }
    }
}

/// Detection quality over attack-active rounds.
pub fn detection_stats(records: &[RoundRecord]) -> DetectionStats {
    let mut counts = DetectionCounts::default();
    for r in records.iter().filter(|r| r.attack_active) {
        for id in &r.received {
            counts.record(
                r.malicious_received.binary_search(id).is_ok(),
                r.filtered_ids.contains(id),
            );
        }
    }
    counts.stats()
}

/// Per-round fraction of truly benign received clients that were filtered,
/// averaged over rounds with at least one benign client.
pub fn mean_benign_filter_rate(records: &[RoundRecord]) -> Option<f64> {
    mean(records.iter().filter_map(|r| {
        let benign: Vec<&ClientId> = r
            .received
            .iter()
            .filter(|id| r.malicious_received.binary_search(id).is_err())
            .collect();
        let filtered = benign
            .iter()
            .filter(|id| r.filtered_ids.contains(id))
            .count();
        ratio(filtered, benign.len())
    }))
}

/// Share of attack-active rounds (with both kinds of client present) in
/// which attackers scored higher on average than benign clients.
pub fn malicious_score_dominance(records: &[RoundRecord]) -> Option<f64> {
    let (wins, total) = records
        .iter()
        .filter(|r| r.attack_active)
        .filter_map(|r| {
            Some((
                r.mean_abs_cos_malicious_truth?,
                r.mean_abs_cos_benign_truth?,
            ))
        })
        .fold((0usize, 0usize), |(w, t), (m, b)| {
            (w + usize::from(m > b), t + 1)
        });
    ratio(wins, total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerSimilarityConfig {
    pub n_clients: usize,
    pub iters: usize,
    pub q: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Snapshot cadence in iterations.
    pub every: usize,
}

impl Default for LayerSimilarityConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            iters: 1000,
            q: 0.5,
            lr: 0.01,
            batch_size: 128,
            every: 50,
        }
    }
}

/// Average cross-client cosine similarity of each layer's weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSimilarity {
    pub iterations: Vec<usize>,
    /// `per_layer[s][k]`: snapshot `s`, layer `k`.
    pub per_layer: Vec<Vec<f64>>,
    /// Same average over the whole parameter vector, per snapshot.
    pub full_model: Vec<f64>,
}

impl LayerSimilarity {
    pub fn last(&self) -> Option<&[f64]> {
        self.per_layer.last().map(Vec::as_slice)
    }
}

fn mean_pairwise_cosine(vectors: &[&[f64]]) -> Result<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            sum += cosine_similarity(vectors[i], vectors[j])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

fn pairwise_layer_similarity(models: &[ParamVector]) -> Result<(Vec<f64>, f64)> {
    let layers = models[0].layout().layers().len();
    let per_layer = (0..layers)
        .map(|k| {
            let segs: Vec<&[f64]> = models
                .iter()
                .map(|m| m.segment(Selector::Weight(k)))
                .collect::<Result<_>>()?;
            mean_pairwise_cosine(&segs)
        })
        .collect::<Result<_>>()?;
    let full: Vec<&[f64]> = models.iter().map(ParamVector::values).collect();
    Ok((per_layer, mean_pairwise_cosine(&full)?))
}

/// Train one model per client from the same `init`, without any
/// synchronization, and record per-layer weight similarity every
/// `cfg.every` iterations (starting at iteration 0). `seeds[i]` keys client
/// `i`'s batch stream.
pub fn train_independently(
    init: &ParamVector,
    dataset: &Dataset,
    partition: &Partition,
    seeds: &[u64],
    cfg: &LayerSimilarityConfig,
) -> Result<LayerSimilarity> {
    let n = partition.num_clients();
    if n < 2 {
        return Err(Error::config("layer similarity needs at least 2 clients"));
    }
    if seeds.len() != n {
        return Err(Error::config("one seed per client required"));
    }
    if cfg.every == 0 {
        return Err(Error::config("snapshot cadence must be >= 1"));
    }
    let mut models = vec![init.clone(); n];
    let mut rngs: Vec<_> = seeds
        .iter()
        .map(|&s| rng::stream(s, Purpose::LocalTraining, &[]))
        .collect();
    let (layers0, full0) = pairwise_layer_similarity(&models)?;
    let mut out = LayerSimilarity {
        iterations: vec![0],
        per_layer: vec![layers0],
        full_model: vec![full0],
    };
    let mut done = 0;
    while done < cfg.iters {
        let steps = cfg.every.min(cfg.iters - done);
        models
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .enumerate()
            .try_for_each(|(client, (model, rng))| -> Result<()> {
                for _ in 0..steps {
                    let batch = sample_batch(dataset, partition, client, cfg.batch_size, rng)?;
                    *model = sgd_step(model, &batch, cfg.lr)?.1;
                }
                Ok(())
            })?;
        done += steps;
        out.iterations.push(done);
        let (layers, full) = pairwise_layer_similarity(&models)?;
        out.per_layer.push(layers);
        out.full_model.push(full);
    }
    Ok(out)
}

/// Independent-training experiment on a label-skew partition of `dataset`.
pub fn layerwise_similarity_experiment(
    layers: &[LayerSpec],
    dataset: &Dataset,
    cfg: &LayerSimilarityConfig,
    seed: u64,
) -> Result<LayerSimilarity> {
    let init = crate::nn::init_model(layers, seed)?;
    let partition = partition_noniid(dataset, cfg.n_clients, cfg.q, seed)?;
    let seeds: Vec<u64> = (0..cfg.n_clients as u64)
        .map(|c| seed.wrapping_mul(1_000_003).wrapping_add(c))
        .collect();
    train_independently(&init, dataset, &partition, &seeds, cfg)
}
