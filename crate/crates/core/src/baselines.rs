//! Comparison selectors: uniform random, factored tabular Q-learning and a
//! genetic algorithm over placement bit strings.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Device, EnvState, Placement, Transition};
use crate::env::Environment;
use crate::error::{Error, Result};

/// Selects `ceil(fraction * n)` distinct devices uniformly.
pub fn random_select<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<Placement> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("random fraction {fraction} outside (0,1]")));
    }
    let m = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(usize::from(n > 0), n);
    Ok(Placement::from_indices(n, index::sample(rng, n, m).into_iter()))
}

pub const AC_BINS: usize = 10;
pub const ROUND_BINS: usize = 5;
pub const DA_BINS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TabularState {
    pub ac_bin: u8,
    pub r_bin: u8,
    pub da_count_bin: u8,
}

/// `ac` in [-1, 1] into ten equal bins, round progress into five, and the
/// request count capped at two.
pub fn discretize(state: &EnvState, horizon: usize) -> TabularState {
    let ac = ((state.ac.clamp(-1.0, 1.0) + 1.0) / 2.0 * AC_BINS as f64).floor() as usize;
    let r = state.r * ROUND_BINS / horizon.max(1);
    TabularState {
        ac_bin: ac.min(AC_BINS - 1) as u8,
        r_bin: r.min(ROUND_BINS - 1) as u8,
        da_count_bin: state.da.len().min(DA_BINS - 1) as u8,
    }
}

/// Cell of a device: its area and mobility flag.
pub fn device_bucket(device: &Device) -> usize {
    device.area.0 * 2 + usize::from(device.high_mobility)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QTable {
    values: HashMap<(TabularState, usize), f64>,
}

impl QTable {
    pub fn get(&self, s: TabularState, bucket: usize) -> f64 {
        self.values.get(&(s, bucket)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, s: TabularState, bucket: usize, v: f64) {
        self.values.insert((s, bucket), v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// Per-device epsilon-greedy. Greedy devices are those whose cell value lies
/// below the median over all devices; when none does, the devices at the
/// minimum. An exploring device is selected by a fair coin.
pub fn tabular_select<R: Rng + ?Sized>(
    table: &QTable,
    state: &EnvState,
    devices: &[Device],
    horizon: usize,
    epsilon: f64,
    rng: &mut R,
) -> Placement {
    let n = devices.len();
    if n == 0 {
        return Placement::zeros(0);
    }
    let s = discretize(state, horizon);
    let q: Vec<f64> = devices.iter().map(|d| table.get(s, device_bucket(d))).collect();
    let med = median(&q);
    let mut greedy: Vec<bool> = q.iter().map(|&v| v < med).collect();
    if !greedy.iter().any(|&g| g) {
        let min = q.iter().copied().fold(f64::INFINITY, f64::min);
        greedy = q.iter().map(|&v| v == min).collect();
    }
    let bits = greedy
        .into_iter()
        .map(|g| {
            if rng.random::<f64>() < epsilon {
                rng.random::<bool>()
            } else {
                g
            }
        })
        .collect();
    Placement::from_bits(bits)
}

/// `Q <- (1 - alpha) Q + alpha (c + gamma min Q')` on every cell touched by
/// the selection. `devices` is the roster as seen when acting.
pub fn tabular_update(
    table: &mut QTable,
    t: &Transition,
    devices: &[Device],
    areas: usize,
    horizon: usize,
    alpha: f64,
    gamma: f64,
) {
    let s = discretize(&t.s, horizon);
    let bootstrap = if t.s_next.r >= horizon || gamma == 0.0 {
        0.0
    } else {
        let s2 = discretize(&t.s_next, horizon);
        (0..areas * 2).map(|b| table.get(s2, b)).fold(f64::INFINITY, f64::min)
    };
    let target = t.c + gamma * bootstrap;
    let cells: BTreeSet<usize> = t.a.selected().filter_map(|i| devices.get(i)).map(device_bucket).collect();
    for b in cells {
        let q = table.get(s, b);
        table.set(s, b, (1.0 - alpha) * q + alpha * target);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of training episodes over which epsilon decays linearly.
    pub decay_fraction: f64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.9,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            decay_fraction: 0.5,
        }
    }
}

impl TabularConfig {
    pub fn epsilon(&self, episode: usize, episodes: usize) -> f64 {
        let span = (self.decay_fraction * episodes as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 30,
            generations: 20,
            tournament_size: 3,
            crossover_rate: 0.8,
            mutation_rate: 0.05,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("ga: {m}")));
        if self.population < 2 || self.population % 2 != 0 {
            return bad("population must be even and at least 2");
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("rates must lie in [0,1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaResult {
    pub best: Placement,
    pub best_cost: f64,
    /// Best cost so far after the initial population and each generation.
    pub history: Vec<f64>,
}

fn tournament<'a>(pop: &'a [Vec<bool>], fitness: &[f64], size: usize, rng: &mut ChaCha8Rng) -> &'a [bool] {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..size {
        let c = rng.random_range(0..pop.len());
        if fitness[c] < fitness[best] {
            best = c;
        }
    }
    &pop[best]
}

/// Minimizes `cost` over bit strings of length `n`. Without an initial
/// population each chromosome draws its own bit density uniformly.
pub fn ga_optimize<F>(
    n: usize,
    mut cost: F,
    config: &GaConfig,
    rng: &mut ChaCha8Rng,
    initial: Option<Vec<Vec<bool>>>,
) -> Result<GaResult>
where
    F: FnMut(&Placement) -> Result<f64>,
{
    config.validate()?;
    let mut pop = match initial {
        Some(p) => {
            if p.len() != config.population || p.iter().any(|c| c.len() != n) {
                return Err(Error::InvalidConfig("initial population does not match config".into()));
            }
            p
        }
        None => (0..config.population)
            .map(|_| {
                let density: f64 = rng.random();
                (0..n).map(|_| rng.random::<f64>() < density).collect()
            })
            .collect(),
    };
    let mut memo: HashMap<Vec<bool>, f64> = HashMap::new();
    let mut evaluate = |pop: &[Vec<bool>]| -> Result<Vec<f64>> {
        pop.iter()
            .map(|c| {
                if let Some(&v) = memo.get(c) {
                    return Ok(v);
                }
                let v = cost(&Placement::from_bits(c.clone()))?;
                memo.insert(c.clone(), v);
                Ok(v)
            })
            .collect()
    };
    let argmin = |f: &[f64]| (0..f.len()).fold(0, |b, i| if f[i] < f[b] { i } else { b });

    let mut fitness = evaluate(&pop)?;
    let mut best_i = argmin(&fitness);
    let mut best = (pop[best_i].clone(), fitness[best_i]);
    let mut history = vec![best.1];
    for _ in 0..config.generations {
        let mut next = vec![pop[best_i].clone()];
        while next.len() < config.population {
            let a = tournament(&pop, &fitness, config.tournament_size, rng).to_vec();
            let b = tournament(&pop, &fitness, config.tournament_size, rng).to_vec();
            let (mut c1, mut c2) = (a.clone(), b.clone());
            if rng.random::<f64>() < config.crossover_rate {
                for i in 0..n {
                    if rng.random::<bool>() {
                        c1[i] = b[i];
                        c2[i] = a[i];
                    }
                }
            }
            for c in [&mut c1, &mut c2] {
                for bit in c.iter_mut() {
                    if rng.random::<f64>() < config.mutation_rate {
                        *bit = !*bit;
                    }
                }
            }
            next.push(c1);
            if next.len() < config.population {
                next.push(c2);
            }
        }
        pop = next;
        fitness = evaluate(&pop)?;
        best_i = argmin(&fitness);
        if fitness[best_i] < best.1 {
            best = (pop[best_i].clone(), fitness[best_i]);
        }
        history.push(best.1);
    }
    Ok(GaResult {
        best: Placement::from_bits(best.0),
        best_cost: best.1,
        history,
    })
}

/// Myopic GA on the environment's cost for the current round.
pub fn ga_select<E: Environment + ?Sized>(env: &E, config: &GaConfig, rng: &mut ChaCha8Rng) -> Result<Placement> {
    let res = ga_optimize(env.num_devices(), |k| env.evaluate(k).map(|c| c.total), config, rng, None)?;
    Ok(res.best)
}
