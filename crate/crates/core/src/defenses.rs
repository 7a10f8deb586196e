//! Server-side defenses.
//!
//! [`cos_defense_filter`] scores each update by the absolute cosine between
//! the global model's last-layer weights and the update's last-layer
//! weights, min-max normalizes the scores, and rejects every client whose
//! normalized score is at or above the round mean. The remaining defenses
//! are the usual robust-aggregation baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{fedavg_uniform, ClientId, Submission};
use crate::nn::{l2_norm, ParamVector, Selector};

/// `<x, y> / (|x| |y|)`, clamped to `[-1, 1]`; zero when either side is the
/// zero vector.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::shape("cosine of empty vectors"));
    }
    let nx = l2_norm(x);
    let ny = l2_norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Which part of the final layer CosDefense compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSegment {
    /// Final affine layer's weight matrix only.
    #[default]
    LastWeight,
    /// Weight matrix followed by the bias vector.
    LastWeightAndBias,
}

impl ScoreSegment {
    pub fn extract(self, params: &ParamVector) -> Result<Vec<f64>> {
        let mut out = params.slice_segment(Selector::LastWeight)?;
        if self == ScoreSegment::LastWeightAndBias {
            out.extend_from_slice(params.segment(Selector::LastBias)?);
        }
        Ok(out)
    }
}

/// Signed last-layer cosine between the global model and each update.
pub fn last_layer_cosines(
    global: &ParamVector,
    updates: &[Submission],
    segment: ScoreSegment,
) -> Result<Vec<f64>> {
    let g = segment.extract(global)?;
    updates
        .iter()
        .map(|u| cosine_similarity(&g, &segment.extract(&u.delta)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientVerdict {
    pub client_id: ClientId,
    /// Signed cosine before taking the absolute value.
    pub raw_cos: f64,
    /// Min-max normalized absolute cosine.
    pub score: f64,
    pub malicious: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseVerdict {
    pub clients: Vec<ClientVerdict>,
    /// Mean normalized score. Infinite when all raw scores were equal and
    /// nobody was rejected.
    pub threshold: f64,
}

impl DefenseVerdict {
    pub fn benign_ids(&self) -> Vec<ClientId> {
        self.clients
            .iter()
            .filter(|c| !c.malicious)
            .map(|c| c.client_id)
            .collect()
    }

    pub fn malicious_ids(&self) -> Vec<ClientId> {
        self.clients
            .iter()
            .filter(|c| c.malicious)
            .map(|c| c.client_id)
            .collect()
    }
}

/// Normalization and thresholding over absolute cosine scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreClustering {
    pub normalized: Vec<f64>,
    pub threshold: f64,
    pub malicious: Vec<bool>,
}

/// Min-max normalize `abs_scores`, take their mean as threshold, and flag
/// every score `>=` the threshold. Equal scores (including a single score)
/// carry no outlier evidence: all normalize to 0 and none is flagged.
pub fn cluster_scores(abs_scores: &[f64]) -> ScoreClustering {
    let n = abs_scores.len();
    let min = abs_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = abs_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n == 0 || max == min {
        return ScoreClustering {
            normalized: vec![0.0; n],
            threshold: f64::INFINITY,
            malicious: vec![false; n],
        };
    }
    let span = max - min;
    let normalized: Vec<f64> = abs_scores.iter().map(|s| (s - min) / span).collect();
    let threshold = normalized.iter().sum::<f64>() / n as f64;
    let malicious = normalized.iter().map(|&s| s >= threshold).collect();
    ScoreClustering {
        normalized,
        threshold,
        malicious,
    }
}

/// CosDefense: returns the accepted (benign) client ids, ascending, and the
/// full verdict in input order.
pub fn cos_defense_filter(
    global: &ParamVector,
    updates: &[Submission],
    segment: ScoreSegment,
) -> Result<(Vec<ClientId>, DefenseVerdict)> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no updates to score".into()));
    }
    let raw = last_layer_cosines(global, updates, segment)?;
    let abs: Vec<f64> = raw.iter().map(|c| c.abs()).collect();
    let clustering = cluster_scores(&abs);
    let clients: Vec<ClientVerdict> = updates
        .iter()
        .zip(&raw)
        .zip(clustering.normalized.iter().zip(&clustering.malicious))
        .map(|((u, &raw_cos), (&score, &malicious))| ClientVerdict {
            client_id: u.client_id,
            raw_cos,
            score,
            malicious,
        })
        .collect();
    let verdict = DefenseVerdict {
        clients,
        threshold: clustering.threshold,
    };
    let mut benign = verdict.benign_ids();
    benign.sort_unstable();
    Ok((benign, verdict))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_krum(n: usize, f: usize) -> Result<usize> {
    let neighbours = n.checked_sub(f + 2).filter(|&k| k >= 1);
    neighbours
        .ok_or_else(|| Error::config(format!("Krum needs n - f - 2 >= 1, got n = {n}, f = {f}")))
}

/// Krum score per update: the sum of squared Euclidean distances to its
/// `n - f - 2` nearest other updates.
pub fn krum_scores(updates: &[Submission], f: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    let k = check_krum(n, f)?;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(updates[i].delta.values(), updates[j].delta.values());
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..k].iter().sum()
        })
        .collect())
}

/// Update positions ordered by (score, client id).
fn krum_ranking(updates: &[Submission], f: usize) -> Result<Vec<usize>> {
    let scores = krum_scores(updates, f)?;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .total_cmp(&scores[b])
            .then(updates[a].client_id.cmp(&updates[b].client_id))
    });
    Ok(order)
}

/// The single update with the lowest Krum score; ties go to the lowest id.
pub fn krum(updates: &[Submission], f: usize) -> Result<ClientId> {
    let order = krum_ranking(updates, f)?;
    Ok(updates[order[0]].client_id)
}

/// The `n - f` updates with the lowest Krum scores, returned as ascending ids.
pub fn multi_krum(updates: &[Submission], f: usize) -> Result<Vec<ClientId>> {
    let order = krum_ranking(updates, f)?;
    let mut ids: Vec<ClientId> = order[..updates.len() - f]
        .iter()
        .map(|&i| updates[i].client_id)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Per-coordinate median; the mean of the two middle values for an even count.
pub fn coordinate_median(updates: &[&ParamVector]) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Aggregation("median of zero updates".into()))?;
    if updates.iter().any(|u| !u.same_layout(first)) {
        return Err(Error::shape("median over differing layouts"));
    }
    let n = updates.len();
    let mut out = first.zeros_like();
    let mut column = vec![0.0; n];
    for (j, slot) in out.values_mut().iter_mut().enumerate() {
        for (c, u) in column.iter_mut().zip(updates) {
            *c = u.values()[j];
        }
        column.sort_by(f64::total_cmp);
        *slot = if n % 2 == 1 {
            column[n / 2]
        } else {
            (column[n / 2 - 1] + column[n / 2]) / 2.0
        };
    }
    Ok(out)
}

/// Rescale `delta` onto the `bound` ball when its L2 norm exceeds `bound`.
pub fn norm_clip(delta: &ParamVector, bound: f64) -> ParamVector {
    let norm = delta.norm();
    if norm > bound {
        delta.scaled(bound / norm)
    } else {
        delta.clone()
    }
}

/// Norm clipping followed by the coordinate-wise median.
pub fn clipping_median(updates: &[&ParamVector], bound: f64) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Aggregation("median of zero updates".into()));
    }
    if bound.is_nan() || bound <= 0.0 {
        return Err(Error::config(format!(
            "clip bound must be > 0, got {bound}"
        )));
    }
    let clipped: Vec<ParamVector> = updates.iter().map(|u| norm_clip(u, bound)).collect();
    let refs: Vec<&ParamVector> = clipped.iter().collect();
    coordinate_median(&refs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    CosDefense,
    Krum,
    MultiKrum,
    Median,
    ClippingMedian,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::None,
        DefenseKind::CosDefense,
        DefenseKind::Krum,
        DefenseKind::MultiKrum,
        DefenseKind::Median,
        DefenseKind::ClippingMedian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::CosDefense => "cos_defense",
            DefenseKind::Krum => "krum",
            DefenseKind::MultiKrum => "multi_krum",
            DefenseKind::Median => "median",
            DefenseKind::ClippingMedian => "clipping_median",
        }
    }
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefenseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown defense `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    /// Presumed attacker count for the Krum family. `None` uses the true
    /// number of active attackers in the round.
    pub krum_f: Option<usize>,
    /// Clipping bound. `None` calibrates it from an attack-free run.
    pub clip_bound: Option<f64>,
    pub score_segment: ScoreSegment,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            krum_f: None,
            clip_bound: None,
            score_segment: ScoreSegment::LastWeight,
        }
    }
}

impl DefenseSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.clip_bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config(format!("clip_bound must be > 0, got {b}")));
            }
        }
        Ok(())
    }

    /// Instantiate the defense. Clipping defenses need a resolved bound.
    pub fn build(&self) -> Result<Box<dyn Defense>> {
        Ok(match self.kind {
            DefenseKind::None => Box::new(NoDefense),
            DefenseKind::CosDefense => Box::new(CosDefense {
                segment: self.score_segment,
            }),
            DefenseKind::Krum => Box::new(KrumDefense {
                f: self.krum_f,
                multi: false,
            }),
            DefenseKind::MultiKrum => Box::new(KrumDefense {
                f: self.krum_f,
                multi: true,
            }),
            DefenseKind::Median => Box::new(MedianDefense { clip_bound: None }),
            DefenseKind::ClippingMedian => {
                let bound = self.clip_bound.ok_or_else(|| {
                    Error::config("clipping_median needs a clip bound (set one or calibrate)")
                })?;
                Box::new(MedianDefense {
                    clip_bound: Some(bound),
                })
            }
        })
    }
}

/// Round information a defense may see besides the updates.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefenseContext {
    /// Number of attacking clients among the received updates. Only the Krum
    /// baseline reads it, and only when no explicit `f` is configured.
    pub active_attackers: usize,
}

#[derive(Debug, Clone)]
pub struct DefenseOutcome {
    /// `None` leaves the global model unchanged this round.
    pub aggregate: Option<ParamVector>,
    pub rejected: Vec<ClientId>,
    pub verdict: Option<DefenseVerdict>,
}

/// A server-side aggregation rule. Implementations see only the global
/// model and the received `(client id, delta)` pairs.
pub trait Defense: Send + Sync {
    fn name(&self) -> &str;

    fn defend(
        &self,
        global: &ParamVector,
        updates: &[Submission],
        ctx: &DefenseContext,
    ) -> Result<DefenseOutcome>;
}

/// Plain FedAvg over everything received.
#[derive(Debug, Clone, Copy)]
pub struct NoDefense;

impl Defense for NoDefense {
    fn name(&self) -> &str {
        "none"
    }

    fn defend(
        &self,
        _: &ParamVector,
        updates: &[Submission],
        _: &DefenseContext,
    ) -> Result<DefenseOutcome> {
        let all: Vec<&Submission> = updates.iter().collect();
        Ok(DefenseOutcome {
            aggregate: fedavg_uniform(&all)?,
            rejected: Vec::new(),
            verdict: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CosDefense {
    pub segment: ScoreSegment,
}

impl Defense for CosDefense {
    fn name(&self) -> &str {
        "cos_defense"
    }

    fn defend(
        &self,
        global: &ParamVector,
        updates: &[Submission],
        _: &DefenseContext,
    ) -> Result<DefenseOutcome> {
        if updates.is_empty() {
            return Ok(DefenseOutcome {
                aggregate: None,
                rejected: Vec::new(),
                verdict: None,
            });
        }
        let (_, verdict) = cos_defense_filter(global, updates, self.segment)?;
        let benign: Vec<&Submission> = updates
            .iter()
            .zip(&verdict.clients)
            .filter(|(_, v)| !v.malicious)
            .map(|(u, _)| u)
            .collect();
        let mut rejected = verdict.malicious_ids();
        rejected.sort_unstable();
        Ok(DefenseOutcome {
            aggregate: fedavg_uniform(&benign)?,
            rejected,
            verdict: Some(verdict),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KrumDefense {
    pub f: Option<usize>,
    pub multi: bool,
}

impl Defense for KrumDefense {
    fn name(&self) -> &str {
        if self.multi {
            "multi_krum"
        } else {
            "krum"
        }
    }

    fn defend(
        &self,
        _: &ParamVector,
        updates: &[Submission],
        ctx: &DefenseContext,
    ) -> Result<DefenseOutcome> {
        let n = updates.len();
        if n == 0 {
            return Ok(DefenseOutcome {
                aggregate: None,
                rejected: Vec::new(),
                verdict: None,
            });
        }
        // Keep n - f - 2 >= 1 when the presumed count is too large to score.
        let f = self
            .f
            .unwrap_or(ctx.active_attackers)
            .min(n.saturating_sub(3));
        let selected = if self.multi {
            multi_krum(updates, f)?
        } else {
            vec![krum(updates, f)?]
        };
        let chosen: Vec<&Submission> = updates
            .iter()
            .filter(|u| selected.binary_search(&u.client_id).is_ok())
            .collect();
        let mut rejected: Vec<ClientId> = updates
            .iter()
            .map(|u| u.client_id)
            .filter(|id| selected.binary_search(id).is_err())
            .collect();
        rejected.sort_unstable();
        Ok(DefenseOutcome {
            aggregate: fedavg_uniform(&chosen)?,
            rejected,
            verdict: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MedianDefense {
    pub clip_bound: Option<f64>,
}

impl Defense for MedianDefense {
    fn name(&self) -> &str {
        if self.clip_bound.is_some() {
            "clipping_median"
        } else {
            "median"
        }
    }

    fn defend(
        &self,
        _: &ParamVector,
        updates: &[Submission],
        _: &DefenseContext,
    ) -> Result<DefenseOutcome> {
        if updates.is_empty() {
            return Ok(DefenseOutcome {
                aggregate: None,
                rejected: Vec::new(),
                verdict: None,
            });
        }
        let mut sorted: Vec<&Submission> = updates.iter().collect();
        sorted.sort_by_key(|u| u.client_id);
        let deltas: Vec<&ParamVector> = sorted.iter().map(|u| &u.delta).collect();
        let aggregate = match self.clip_bound {
            Some(bound) => clipping_median(&deltas, bound)?,
            None => coordinate_median(&deltas)?,
        };
        Ok(DefenseOutcome {
            aggregate: Some(aggregate),
            rejected: Vec::new(),
            verdict: None,
        })
    }
}
