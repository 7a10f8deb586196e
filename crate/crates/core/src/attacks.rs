//! Untargeted poisoning attacks run by a coordinated set of malicious clients.
//!
//! Malicious clients always train honestly first; an update-crafting attack
//! then overwrites their deltas. Label flipping instead poisons the local
//! data before training.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::nn::{Layout, ParamVector};
use crate::rng::{self, Purpose};

/// IPM scale used when none is configured. With attacker share `p` the
/// unweighted mean update is `((1 - p) - p·ε)·μ`, which points away from the
/// benign mean `μ` once `ε > (1 - p)/p`; 5 reverses it for every `p >= 0.2`.
pub const DEFAULT_IPM_EPSILON: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Ipm,
    LabelFlip,
    SignFlip,
    GaussNoise,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::None,
        AttackKind::Ipm,
        AttackKind::LabelFlip,
        AttackKind::SignFlip,
        AttackKind::GaussNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Ipm => "ipm",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::SignFlip => "sign_flip",
            AttackKind::GaussNoise => "gauss_noise",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attack `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub ipm_eps: f64,
    pub noise_sigma: f64,
    /// First round (0-based) in which malicious clients attack.
    pub start_round: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            ipm_eps: DEFAULT_IPM_EPSILON,
            noise_sigma: 0.0,
            start_round: 200,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::Ipm if !(self.ipm_eps > 0.0 && self.ipm_eps.is_finite()) => Err(
                Error::config(format!("ipm_eps must be > 0, got {}", self.ipm_eps)),
            ),
            AttackKind::GaussNoise
                if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) =>
            {
                Err(Error::config(format!(
                    "noise_sigma must be >= 0, got {}",
                    self.noise_sigma
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn active_at(&self, round: usize) -> bool {
        self.kind != AttackKind::None && round >= self.start_round
    }

    /// Whether malicious clients train on flipped labels this round.
    pub fn flips_labels_at(&self, round: usize) -> bool {
        self.kind == AttackKind::LabelFlip && self.active_at(round)
    }
}

/// Element-wise mean of `deltas`, summed in the order given.
pub(crate) fn mean_of(deltas: &[&ParamVector], layout: &Arc<Layout>) -> ParamVector {
    let mut acc = ParamVector::zeros(layout);
    if deltas.is_empty() {
        return acc;
    }
    for d in deltas {
        for (a, v) in acc.values_mut().iter_mut().zip(d.values()) {
            *a += v;
        }
    }
    let inv = 1.0 / deltas.len() as f64;
    for a in acc.values_mut() {
        *a *= inv;
    }
    acc
}

/// Inner-product manipulation: every attacker sends `-epsilon` times the mean
/// of this round's benign deltas. With no benign delta available the
/// attackers send zeros.
pub fn ipm_craft(
    benign: &[&ParamVector],
    epsilon: f64,
    count: usize,
    layout: &Arc<Layout>,
) -> Result<Vec<ParamVector>> {
    if benign.iter().any(|d| **d.layout() != **layout) {
        return Err(Error::shape("benign delta layout differs from the model"));
    }
    let crafted = mean_of(benign, layout).scaled(-epsilon);
    Ok(vec![crafted; count])
}

/// Symmetric flip `c -> C - 1 - c`.
pub fn label_flip(label: usize, num_classes: usize) -> usize {
    num_classes - 1 - label
}

pub fn flip_labels(labels: &mut [usize], num_classes: usize) {
    for y in labels {
        *y = label_flip(*y, num_classes);
    }
}

pub fn sign_flip(delta: &ParamVector) -> ParamVector {
    delta.map_values(|v| -v)
}

/// Zero-mean Gaussian noise with standard deviation `sigma` per coordinate.
pub fn gauss_noise(layout: &Arc<Layout>, sigma: f64, rng: &mut rng::SimRng) -> Result<ParamVector> {
    let mut out = ParamVector::zeros(layout);
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    for v in out.values_mut() {
        *v = normal.sample(rng);
    }
    Ok(out)
}

/// Replace the deltas of malicious clients according to `spec`.
///
/// `updates` must be in ascending client-id order; `seed` and `round` key the
/// noise streams.
pub fn apply_update_attack(
    spec: &AttackSpec,
    round: usize,
    seed: u64,
    updates: &mut [ClientUpdate],
    layout: &Arc<Layout>,
) -> Result<()> {
    if !spec.active_at(round) {
        return Ok(());
    }
    match spec.kind {
        AttackKind::None | AttackKind::LabelFlip => {}
        AttackKind::Ipm => {
            let count = updates.iter().filter(|u| u.is_malicious).count();
            if count == 0 {
                return Ok(());
            }
            let benign: Vec<&ParamVector> = updates
                .iter()
                .filter(|u| !u.is_malicious)
                .map(|u| &u.submission.delta)
                .collect();
            let mut crafted = ipm_craft(&benign, spec.ipm_eps, count, layout)?.into_iter();
            for u in updates.iter_mut().filter(|u| u.is_malicious) {
                u.submission.delta = crafted.next().expect("one crafted delta per attacker");
            }
        }
        AttackKind::SignFlip => {
            for u in updates.iter_mut().filter(|u| u.is_malicious) {
                u.submission.delta = sign_flip(&u.submission.delta);
            }
        }
        AttackKind::GaussNoise => {
            for u in updates.iter_mut().filter(|u| u.is_malicious) {
                let mut rng = rng::stream(
                    seed,
                    Purpose::AttackNoise,
                    &[round as u64, u.submission.client_id as u64],
                );
                u.submission.delta = gauss_noise(layout, spec.noise_sigma, &mut rng)?;
            }
        }
    }
    Ok(())
}
