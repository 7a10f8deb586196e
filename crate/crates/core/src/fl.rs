//! FedAvg round engine.
//!
//! Sign convention: a client sends `g = θ_local - θ_t`, a descent step. The
//! server applies `θ_{t+1} = θ_t - G_t` with `G_t = -Aggr({g})`, i.e. it adds
//! the aggregated client deltas. Cosine scoring always sees the raw `g`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::attacks::{self, flip_labels};
use crate::config::ExperimentConfig;
use crate::data::{self, malicious_ids, partition_noniid, sample_batch, Dataset, Partition};
use crate::defenses::{last_layer_cosines, Defense, DefenseContext};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_accuracy, RoundRecord};
use crate::nn::{init_model, loss_and_grad, Layout, ParamVector};
use crate::rng::{self, Purpose, SimRng};

pub type ClientId = usize;

/// What the server receives from a client.
#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub client_id: ClientId,
    pub delta: ParamVector,
}

/// A submission plus simulator-side ground truth that defenses never see.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub submission: Submission,
    pub is_malicious: bool,
}

/// `⌊K · rate⌋` distinct client ids drawn uniformly, ascending.
pub fn sample_clients(num_clients: usize, rate: f64, rng: &mut SimRng) -> Result<Vec<ClientId>> {
    let n = (num_clients as f64 * rate + 1e-9).floor() as usize;
    if n < 1 || n > num_clients {
        return Err(Error::config(format!(
            "sampling rate {rate} selects {n} of {num_clients} clients"
        )));
    }
    Ok(data::sample_distinct(rng, num_clients, n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub lr: f64,
    pub batch_size: usize,
    pub local_iters: usize,
    /// Train on symmetrically flipped labels.
    pub flip_labels: bool,
}

impl LocalTraining {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            local_iters: cfg.local_iters,
            flip_labels: false,
        }
    }
}

/// Local SGD from the global model; returns `θ_local - θ_t` and the mean
/// mini-batch loss.
///
/// The delta is accumulated directly, so with one iteration it equals
/// `-lr · grad` bitwise.
pub fn local_update(
    global: &ParamVector,
    train: &Dataset,
    partition: &Partition,
    client: ClientId,
    opts: &LocalTraining,
    rng: &mut SimRng,
) -> Result<(Submission, f64)> {
    let mut delta = global.zeros_like();
    let mut local = global.clone();
    let mut loss_sum = 0.0;
    for it in 0..opts.local_iters {
        let mut batch = sample_batch(train, partition, client, opts.batch_size, rng)?;
        if opts.flip_labels {
            flip_labels(batch.labels_mut(), train.num_classes());
        }
        if it > 0 {
            local = global.axpy(&delta, 1.0)?;
        }
        let (loss, grad) = loss_and_grad(&local, &batch)?;
        delta.axpy_assign(&grad, -opts.lr)?;
        loss_sum += loss;
    }
    Ok((
        Submission {
            client_id: client,
            delta,
        },
        loss_sum / opts.local_iters as f64,
    ))
}

/// Weighted sum `Σ w_i g_i`, folded in ascending client-id order so that any
/// joint permutation of `(updates, weights)` gives the same bits.
pub fn fedavg_aggregate(updates: &[Submission], weights: &[f64]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    }
    if weights.len() != updates.len() {
        return Err(Error::config(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::config("aggregation weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let pairs: Vec<(&ParamVector, f64)> = order
        .into_iter()
        .map(|i| (&updates[i].delta, weights[i]))
        .collect();
    weighted_fold(&pairs)
}

fn weighted_fold(pairs: &[(&ParamVector, f64)]) -> Result<ParamVector> {
    let mut acc = pairs[0].0.zeros_like();
    for (delta, w) in pairs {
        acc.axpy_assign(delta, *w)?;
    }
    Ok(acc)
}

/// Uniform FedAvg over the given submissions; `None` for an empty set.
pub fn fedavg_uniform(updates: &[&Submission]) -> Result<Option<ParamVector>> {
    if updates.is_empty() {
        return Ok(None);
    }
    let mut sorted: Vec<&Submission> = updates.to_vec();
    sorted.sort_by_key(|u| u.client_id);
    let w = 1.0 / sorted.len() as f64;
    let pairs: Vec<(&ParamVector, f64)> = sorted.iter().map(|u| (&u.delta, w)).collect();
    weighted_fold(&pairs).map(Some)
}

#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    pub params: ParamVector,
    rng: SimRng,
}

/// A full federated run over borrowed train/test data.
pub struct Simulation<'d> {
    cfg: ExperimentConfig,
    train: &'d Dataset,
    test: &'d Dataset,
    partition: Partition,
    malicious: Vec<bool>,
    defense: Box<dyn Defense>,
    state: RoundState,
}

impl<'d> Simulation<'d> {
    /// Partitions the data, places attackers and initializes the model. The
    /// defense comes from `cfg.defense`; clipping defenses need a resolved
    /// `clip_bound`.
    pub fn new(cfg: ExperimentConfig, train: &'d Dataset, test: &'d Dataset) -> Result<Self> {
        let defense = cfg.defense.build()?;
        Self::with_defense(cfg, train, test, defense)
    }

    pub fn with_defense(
        cfg: ExperimentConfig,
        train: &'d Dataset,
        test: &'d Dataset,
        defense: Box<dyn Defense>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.num_classes() != cfg.num_classes() || train.dim() != cfg.input_dim() {
            return Err(Error::config(format!(
                "dataset has {} classes of dimension {}, config expects {} of {}",
                train.num_classes(),
                train.dim(),
                cfg.num_classes(),
                cfg.input_dim()
            )));
        }
        if test.dim() != train.dim() {
            return Err(Error::shape("train and test feature dimensions differ"));
        }
        let partition = partition_noniid(train, cfg.clients, cfg.q, cfg.seed)?;
        let mut malicious = vec![false; cfg.clients];
        for id in malicious_ids(cfg.clients, partition.num_groups(), cfg.malicious_count())? {
            malicious[id] = true;
        }
        let params = init_model(&cfg.layer_specs(), cfg.seed)?;
        let rng = rng::stream(cfg.seed, Purpose::ClientSampling, &[]);
        Ok(Self {
            cfg,
            train,
            test,
            partition,
            malicious,
            defense,
            state: RoundState {
                round: 0,
                params,
                rng,
            },
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn params(&self) -> &ParamVector {
        &self.state.params
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.state.params.layout()
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn malicious_ids(&self) -> Vec<ClientId> {
        (0..self.cfg.clients)
            .filter(|&i| self.malicious[i])
            .collect()
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.cfg.rounds
    }

    fn train_clients(&self, sampled: &[ClientId]) -> Result<Vec<(ClientUpdate, f64)>> {
        let round = self.state.round;
        let base = LocalTraining::from_config(&self.cfg);
        let global = &self.state.params;
        let one = |&client: &ClientId| -> Option<Result<(ClientUpdate, f64)>> {
            let is_malicious = self.malicious[client];
            let opts = LocalTraining {
                flip_labels: is_malicious && self.cfg.attack.flips_labels_at(round),
                ..base
            };
            let mut rng = rng::stream(
                self.cfg.seed,
                Purpose::LocalTraining,
                &[round as u64, client as u64],
            );
            match local_update(global, self.train, &self.partition, client, &opts, &mut rng) {
                Ok((submission, loss)) => Some(Ok((
                    ClientUpdate {
                        submission,
                        is_malicious,
                    },
                    loss,
                ))),
                Err(Error::EmptyClient(_)) => None,
                Err(e) => Some(Err(e)),
            }
        };
        // collect() keeps input order, so parallel and serial runs agree
        let results: Vec<Option<Result<(ClientUpdate, f64)>>> = if self.cfg.parallel {
            sampled.par_iter().map(one).collect()
        } else {
            sampled.iter().map(one).collect()
        };
        results.into_iter().flatten().collect()
    }

    /// Sample, train, attack, defend, aggregate, evaluate.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.state.round;
        if round >= self.cfg.rounds {
            return Err(Error::config(format!(
                "run already finished after {} rounds",
                self.cfg.rounds
            )));
        }
        let sampled = sample_clients(self.cfg.clients, self.cfg.sample_rate, &mut self.state.rng)?;
        let trained = self.train_clients(&sampled)?;
        let n_received = trained.len();
        let mean_local_loss = if n_received == 0 {
            f64::NAN
        } else {
            trained.iter().map(|(_, l)| l).sum::<f64>() / n_received as f64
        };
        let mut updates: Vec<ClientUpdate> = trained.into_iter().map(|(u, _)| u).collect();

        let attack_active = self.cfg.attack.active_at(round);
        attacks::apply_update_attack(
            &self.cfg.attack,
            round,
            self.cfg.seed,
            &mut updates,
            self.state.params.layout(),
        )?;

        let (submissions, truth): (Vec<Submission>, Vec<bool>) = updates
            .into_iter()
            .map(|u| (u.submission, u.is_malicious))
            .unzip();

        let abs_cos: Vec<f64> = last_layer_cosines(
            &self.state.params,
            &submissions,
            self.cfg.defense.score_segment,
        )?
        .into_iter()
        .map(f64::abs)
        .collect();

        let ctx = DefenseContext {
            active_attackers: if attack_active {
                truth.iter().filter(|&&m| m).count()
            } else {
                0
            },
        };
        let outcome = self
            .defense
            .defend(&self.state.params, &submissions, &ctx)?;
        if let Some(aggregate) = &outcome.aggregate {
            // θ_{t+1} = θ_t - G_t with G_t = -Aggr(g)
            self.state.params.axpy_assign(aggregate, 1.0)?;
        }

        self.state.round += 1;
        let evaluate = self.state.round.is_multiple_of(self.cfg.eval_every)
            || self.state.round == self.cfg.rounds;
        let test_accuracy = if evaluate {
            Some(evaluate_accuracy(&self.state.params, self.test)?)
        } else {
            None
        };

        let received: Vec<ClientId> = submissions.iter().map(|s| s.client_id).collect();
        Ok(RoundRecord::from_scores(
            round,
            test_accuracy,
            &received,
            &truth,
            &abs_cos,
            submissions.iter().map(|s| s.delta.norm()).collect(),
            outcome.rejected,
            attack_active,
            mean_local_loss,
            outcome.verdict,
        ))
    }

    /// Run the remaining rounds, handing each record to `on_round`.
    pub fn run(&mut self, mut on_round: impl FnMut(&RoundRecord)) -> Result<Vec<RoundRecord>> {
        let mut records = Vec::with_capacity(self.cfg.rounds - self.state.round);
        while !self.is_finished() {
            let rec = self.run_round()?;
            on_round(&rec);
            records.push(rec);
        }
        Ok(records)
    }
}

/// The client-sampling stream a run with `seed` starts from.
pub fn seeded_rng(seed: u64) -> SimRng {
    rng::stream(seed, Purpose::ClientSampling, &[])
}
