//! Federated round engine: local training, FedAvg, round validation and
//! global evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, Record};
use crate::error::{Error, Result};
use crate::nn::{adam_step, loss_cross_entropy, Activation, AdamState, Gradients, NetworkSpec, Parameters};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlConfig {
    /// Hidden layer widths of the task model.
    pub hidden: Vec<usize>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Train on at most this many of the client's most recent records.
    pub max_local_samples: Option<usize>,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            local_epochs: 2,
            batch_size: 16,
            learning_rate: 0.01,
            max_local_samples: Some(32),
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("fl: batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("fl: learning_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Task classifier: features to class probabilities.
pub fn task_network(data: &DatasetConfig, fl: &FlConfig) -> Result<NetworkSpec> {
    NetworkSpec::mlp(data.feature_dim, &fl.hidden, data.num_classes, Activation::Softmax)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: Parameters,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub device: usize,
    pub params: Parameters,
    pub sample_count: usize,
    pub local_accuracy: f64,
}

/// Trains a copy of `global` on `records`. Returns `None` when the client
/// has no data, which the aggregator treats as a missing update.
pub fn local_train<R: Rng + ?Sized>(
    global: &Parameters,
    device: usize,
    records: &[Record],
    config: &FlConfig,
    rng: &mut R,
) -> Result<Option<ClientUpdate>> {
    if records.is_empty() {
        return Ok(None);
    }
    let mut params = global.clone();
    let mut adam = AdamState::new(&params, config.learning_rate);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&params);
            for &i in batch {
                let rec = &records[i];
                let cache = params.forward(&rec.features)?;
                let (_, g) = loss_cross_entropy(cache.output(), rec.label)?;
                params.backward_into(&cache, &g, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &grads, &mut adam)?;
        }
    }
    let local_accuracy = evaluate_global(&params, records)?;
    Ok(Some(ClientUpdate {
        device,
        params,
        sample_count: records.len(),
        local_accuracy,
    }))
}

/// Sample-count weighted mean of the client parameters. Updates are summed
/// in ascending device order, so the result does not depend on arrival order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<Parameters> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    let spec = first.params.spec().clone();
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.device);
    let total: usize = ordered.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::NoUpdates);
    }
    let mut acc = vec![0.0; spec.num_params()];
    for u in ordered {
        if u.params.spec() != &spec {
            return Err(Error::DimensionMismatch {
                context: "client update",
                expected: spec.num_params(),
                actual: u.params.spec().num_params(),
            });
        }
        let weight = u.sample_count as f64 / total as f64;
        for (a, p) in acc.iter_mut().zip(u.params.to_flat()) {
            *a += weight * p;
        }
    }
    Parameters::from_flat(&spec, &acc)
}

/// A round counts when at least `ceil(accept_fraction * selected)` updates arrived.
pub fn validate_round(selected: usize, received: usize, accept_fraction: f64) -> bool {
    selected > 0 && received as f64 >= (accept_fraction * selected as f64).ceil()
}

fn argmax(v: &[f64]) -> usize {
    // first maximum wins
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Argmax accuracy on `records`; zero for an empty set.
pub fn evaluate_global(params: &Parameters, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in records {
        if argmax(&params.predict(&r.features)?) == r.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// A selected client as seen by the aggregator.
#[derive(Debug, Clone, Copy)]
pub struct Participant<'a> {
    pub device: usize,
    pub records: &'a [Record],
    /// False when the client cannot finish the round (left its area, or the
    /// container could not be provisioned).
    pub reports: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub received: Vec<usize>,
    pub accepted: bool,
    /// Accuracy change of the global model; zero for discarded rounds.
    pub ac: f64,
    pub local_accuracies: Vec<(usize, f64)>,
}

/// One federated round over the selected participants. Each client's local
/// training stream is derived from `round_seed` and its device id.
pub fn run_round(
    global: &mut GlobalModel,
    participants: &[Participant<'_>],
    test_set: &[Record],
    config: &FlConfig,
    accept_fraction: f64,
    round_seed: u64,
) -> Result<RoundOutcome> {
    let mut updates = Vec::new();
    for p in participants.iter().filter(|p| p.reports) {
        let mut rng = seed::rng(round_seed, &[seed::LOCAL_TRAIN, p.device as u64]);
        if let Some(u) = local_train(&global.params, p.device, p.records, config, &mut rng)? {
            updates.push(u);
        }
    }
    updates.sort_by_key(|u| u.device);
    let received: Vec<usize> = updates.iter().map(|u| u.device).collect();
    let local_accuracies = updates.iter().map(|u| (u.device, u.local_accuracy)).collect();
    let accepted = validate_round(participants.len(), received.len(), accept_fraction);
    let mut ac = 0.0;
    if accepted {
        let params = fedavg(&updates)?;
        let accuracy = evaluate_global(&params, test_set)?;
        ac = accuracy - global.accuracy;
        global.params = params;
        global.accuracy = accuracy;
    }
    Ok(RoundOutcome {
        received,
        accepted,
        ac,
        local_accuracies,
    })
}
