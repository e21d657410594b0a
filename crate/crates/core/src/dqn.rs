//! Deep Q-network client selector: one Q head per device, nucleus (top-p)
//! selection over the heads, replay buffer and periodically synced target
//! network. Lower Q is better since the agent minimizes cost.

use std::collections::{BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{AreaId, EnvState, Placement, RoundReport, Transition};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::{adam_step, loss_mse, Activation, AdamState, Gradients, NetworkSpec, Parameters};
use crate::seed;

pub const FORMAT_VERSION: u32 = 1;

/// Top-p used for greedy evaluation: the nucleus collapses to the best head.
pub const GREEDY_TOP_P: f64 = 1e-12;

const AGENT_INIT: u64 = 0x51;
const AGENT_SAMPLING: u64 = 0x52;
const AGENT_EXPLORE: u64 = 0x53;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    /// Adam learning rate.
    pub alpha: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync_interval: u64,
    /// Cap on devices selected per round; `None` means no cap.
    pub max_selected: Option<usize>,
    pub hidden: Vec<usize>,
    /// While learning, a round is explored with a probability decaying
    /// linearly from `explore_start` to `explore_end` over `explore_steps`
    /// rounds. An explored round selects each device with probability
    /// `explore_fraction` instead of the nucleus.
    pub explore_start: f64,
    pub explore_end: f64,
    pub explore_steps: u64,
    pub explore_fraction: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha: 0.01,
            top_p: 0.9,
            temperature: 1.0,
            replay_capacity: 5000,
            batch_size: 32,
            target_sync_interval: 25,
            max_selected: None,
            hidden: vec![64, 64],
            explore_start: 1.0,
            explore_end: 0.05,
            explore_steps: 750,
            explore_fraction: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("agent: {m}")));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0,1)");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0,1]");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("replay_capacity must be at least batch_size > 0");
        }
        if self.target_sync_interval == 0 {
            return bad("target_sync_interval must be positive");
        }
        if self.max_selected == Some(0) {
            return bad("max_selected must be positive");
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.explore_start) || !unit(self.explore_end) || !unit(self.explore_fraction) {
            return bad("exploration rates must lie in [0,1]");
        }
        Ok(())
    }

    /// Exploration probability after `acted` learning rounds.
    pub fn explore_rate(&self, acted: u64) -> f64 {
        if acted >= self.explore_steps {
            return self.explore_end;
        }
        let frac = acted as f64 / self.explore_steps as f64;
        self.explore_start + (self.explore_end - self.explore_start) * frac
    }
}

/// Fixed dimensions of the state encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub n: usize,
    pub areas: usize,
    pub horizon: usize,
}

impl StateEncoder {
    pub fn new(n: usize, areas: usize, horizon: usize) -> Result<Self> {
        if n == 0 || areas == 0 || horizon == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        Ok(Self { n, areas, horizon })
    }

    pub fn for_env<E: Environment + ?Sized>(env: &E) -> Result<Self> {
        Self::new(env.num_devices(), env.num_areas(), env.horizon())
    }

    pub fn input_size(&self) -> usize {
        self.n + 2 + self.areas
    }

    pub fn encode(&self, state: &EnvState) -> Vec<f64> {
        encode_state(state, self.n, self.areas, self.horizon)
    }

    pub fn is_terminal(&self, next: &EnvState) -> bool {
        next.r >= self.horizon
    }
}

/// `[k (n bits), ac, r / horizon, DA multi-hot (areas bits)]`.
pub fn encode_state(state: &EnvState, n: usize, areas: usize, horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 2 + areas);
    out.extend((0..n).map(|i| f64::from(u8::from(state.k.is_selected(i)))));
    out.push(state.ac);
    out.push(state.r as f64 / horizon as f64);
    out.extend((0..areas).map(|a| f64::from(u8::from(state.da.contains(&AreaId(a))))));
    out
}

/// Nucleus selection on `softmax(-q / temperature)`: the smallest
/// probability-ordered prefix holding at least `top_p` mass, truncated to
/// `max_selected`. Ties go to the lower device id.
pub fn select_action_top_p(q: &[f64], top_p: f64, temperature: f64, max_selected: Option<usize>) -> Placement {
    let n = q.len();
    if n == 0 {
        return Placement::zeros(0);
    }
    let q_min = q.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = q.iter().map(|v| (-(v - q_min) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)));
    let cap = max_selected.unwrap_or(n).min(n);
    let mut mass = 0.0;
    let mut chosen = Vec::new();
    for &i in &order {
        chosen.push(i);
        mass += weights[i] / total;
        if mass >= top_p || chosen.len() == cap {
            break;
        }
    }
    Placement::from_indices(n, chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Distinct slot indices drawn uniformly.
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.items.len() < batch {
            return Err(Error::Underfilled {
                available: self.items.len(),
                requested: batch,
            });
        }
        Ok(index::sample(rng, self.items.len(), batch).into_vec())
    }
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    config: AgentConfig,
    encoder: StateEncoder,
    online: Parameters,
    target: Parameters,
    adam: AdamState,
    buffer: ReplayBuffer,
    steps: u64,
    acted: u64,
    rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
}

impl DqnAgent {
    pub fn new(config: AgentConfig, encoder: StateEncoder, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let spec = q_network(&config, &encoder)?;
        let online = Parameters::init(&spec, &mut seed::rng(seed_value, &[AGENT_INIT]))?;
        Self::with_parameters(config, encoder, online, seed_value)
    }

    /// An agent starting from given (e.g. pre-trained) weights.
    pub fn with_parameters(config: AgentConfig, encoder: StateEncoder, params: Parameters, seed_value: u64) -> Result<Self> {
        config.validate()?;
        let spec = q_network(&config, &encoder)?;
        if params.spec().layer_sizes != spec.layer_sizes {
            return Err(Error::DimensionMismatch {
                context: "q-network parameters",
                expected: spec.num_params(),
                actual: params.spec().num_params(),
            });
        }
        Ok(Self {
            adam: AdamState::new(&params, config.alpha),
            target: params.clone(),
            online: params,
            buffer: ReplayBuffer::new(config.replay_capacity),
            steps: 0,
            acted: 0,
            rng: seed::rng(seed_value, &[AGENT_SAMPLING]),
            explore_rng: seed::rng(seed_value, &[AGENT_EXPLORE]),
            config,
            encoder,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn encoder(&self) -> &StateEncoder {
        &self.encoder
    }

    pub fn online(&self) -> &Parameters {
        &self.online
    }

    pub fn target(&self) -> &Parameters {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn explore_rate(&self) -> f64 {
        self.config.explore_rate(self.acted)
    }

    /// Skips the exploration warm-up: a pre-trained or loaded model starts
    /// at the exploration floor.
    pub fn mark_mature(&mut self) {
        self.acted = self.acted.max(self.config.explore_steps);
    }

    pub fn q_values(&self, state: &EnvState) -> Result<Vec<f64>> {
        self.online.predict(&self.encoder.encode(state))
    }

    fn target_min(&self, state: &EnvState) -> Result<f64> {
        let q = self.target.predict(&self.encoder.encode(state))?;
        Ok(q.into_iter().fold(f64::INFINITY, f64::min))
    }

    pub fn act(&self, state: &EnvState) -> Result<Placement> {
        self.act_with(state, self.config.top_p)
    }

    pub fn act_with(&self, state: &EnvState, top_p: f64) -> Result<Placement> {
        let q = self.q_values(state)?;
        Ok(select_action_top_p(&q, top_p, self.config.temperature, self.config.max_selected))
    }

    /// Behaviour policy while learning: the nucleus, or with the current
    /// exploration probability a random subset.
    pub fn act_exploring(&mut self, state: &EnvState) -> Result<Placement> {
        let eps = self.config.explore_rate(self.acted);
        self.acted += 1;
        if self.explore_rng.random::<f64>() < eps {
            let f = self.config.explore_fraction;
            let bits = (0..self.encoder.n).map(|_| self.explore_rng.random::<f64>() < f).collect();
            return Ok(Placement::from_bits(bits));
        }
        self.act(state)
    }

    pub fn store(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    pub fn sample_minibatch(&mut self) -> Result<Vec<Transition>> {
        let idx = self.buffer.sample_indices(self.config.batch_size, &mut self.rng)?;
        Ok(idx.into_iter().filter_map(|i| self.buffer.get(i).cloned()).collect())
    }

    /// `c + gamma * min Q_target(s')`, or `c` at the episode end.
    pub fn td_target(&self, t: &Transition) -> Result<f64> {
        if self.config.gamma == 0.0 || self.encoder.is_terminal(&t.s_next) {
            return Ok(t.c);
        }
        Ok(t.c + self.config.gamma * self.target_min(&t.s_next)?)
    }

    /// One Adam step on the batch-mean masked MSE between the selected heads
    /// and their TD targets. Transitions with an empty selection carry no
    /// head to regress and are skipped.
    pub fn train_step(&mut self, batch: &[Transition]) -> Result<f64> {
        let mut grads = Gradients::zeros_like(&self.online);
        let mut total = 0.0;
        let mut used = 0usize;
        for t in batch {
            if t.a.count() == 0 {
                continue;
            }
            t.a.ensure_len(self.encoder.n)?;
            let y = self.td_target(t)?;
            let cache = self.online.forward(&self.encoder.encode(&t.s))?;
            let targets = vec![y; self.encoder.n];
            let (loss, grad) = loss_mse(cache.output(), &targets, t.a.bits())?;
            self.online.backward_into(&cache, &grad, &mut grads)?;
            total += loss;
            used += 1;
        }
        self.steps += 1;
        let loss = if used == 0 { 0.0 } else { total / used as f64 };
        if !loss.is_finite() {
            return Err(Error::NonFinite("q-network loss"));
        }
        if used > 0 {
            grads.scale(1.0 / used as f64);
            adam_step(&mut self.online, &grads, &mut self.adam)?;
        }
        if self.steps % self.config.target_sync_interval == 0 {
            self.sync_target();
        }
        Ok(loss)
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// Samples a minibatch and trains on it once the buffer holds enough.
    pub fn learn(&mut self) -> Result<Option<f64>> {
        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.sample_minibatch()?;
        self.train_step(&batch).map(Some)
    }

    pub fn envelope(&self) -> ModelEnvelope {
        ModelEnvelope {
            format_version: FORMAT_VERSION,
            spec: self.online.spec().clone(),
            params: self.online.clone(),
            config: self.config.clone(),
            encoder: self.encoder,
        }
    }

    pub fn from_envelope(envelope: ModelEnvelope, seed_value: u64) -> Result<Self> {
        envelope.check()?;
        let mut agent = Self::with_parameters(envelope.config, envelope.encoder, envelope.params, seed_value)?;
        agent.mark_mature();
        Ok(agent)
    }
}

pub fn q_network(config: &AgentConfig, encoder: &StateEncoder) -> Result<NetworkSpec> {
    NetworkSpec::mlp(encoder.input_size(), &config.hidden, encoder.n, Activation::Identity)
}

/// Serialized mature model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnvelope {
    pub format_version: u32,
    pub spec: NetworkSpec,
    pub params: Parameters,
    pub config: AgentConfig,
    pub encoder: StateEncoder,
}

impl ModelEnvelope {
    pub fn check(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion(self.format_version));
        }
        if &self.spec != self.params.spec() {
            return Err(Error::InvalidConfig("envelope spec does not match parameters".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let env: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        env.check()?;
        Ok(env)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub costs: Vec<f64>,
    pub reports: Vec<RoundReport>,
    pub transitions: Vec<Transition>,
    pub losses: Vec<f64>,
}

impl EpisodeTrace {
    pub fn mean_cost(&self) -> f64 {
        if self.costs.is_empty() {
            return 0.0;
        }
        self.costs.iter().sum::<f64>() / self.costs.len() as f64
    }
}

/// Plays one episode from the environment's current state. With `learn`
/// the agent explores, and each step is stored and followed by one training
/// step; without it the agent acts on the nucleus and is left untouched.
pub fn run_episode<E: Environment + ?Sized>(agent: &mut DqnAgent, env: &mut E, learn: bool) -> Result<EpisodeTrace> {
    let mut trace = EpisodeTrace::default();
    while env.state().r < env.horizon() {
        let s = env.state().clone();
        let a = if learn { agent.act_exploring(&s)? } else { agent.act(&s)? };
        let out = env.step(&a)?;
        let t = Transition {
            s,
            a,
            c: out.cost.total,
            s_next: out.next,
        };
        if learn {
            agent.store(t.clone());
            if let Some(loss) = agent.learn()? {
                trace.losses.push(loss);
            }
        }
        trace.costs.push(out.cost.total);
        trace.reports.push(out.report);
        trace.transitions.push(t);
    }
    Ok(trace)
}

/// Offline pre-training on a transition log. Returns the mean loss per epoch.
pub fn pretrain_master(agent: &mut DqnAgent, log: &[Transition], epochs: usize) -> Result<Vec<f64>> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    for t in log {
        t.a.ensure_len(agent.encoder.n)?;
        agent.store(t.clone());
    }
    let batch = agent.config.batch_size;
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..agent.buffer.len()).collect();
        order.shuffle(&mut agent.rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let batch: Vec<Transition> = chunk.iter().filter_map(|&i| agent.buffer.get(i).cloned()).collect();
            sum += agent.train_step(&batch)?;
            steps += 1;
        }
        losses.push(sum / steps.max(1) as f64);
    }
    if epochs > 0 {
        agent.mark_mature();
    }
    Ok(losses)
}

/// Continues learning online, one reset per seed.
pub fn refine_joiner<E: Environment + ?Sized>(agent: &mut DqnAgent, env: &mut E, episode_seeds: &[u64]) -> Result<Vec<EpisodeTrace>> {
    episode_seeds
        .iter()
        .map(|&s| {
            env.reset(s)?;
            run_episode(agent, env, true)
        })
        .collect()
}

/// Line format of the transition log: states flattened as
/// `[k..., ac, r, DA multi-hot...]` with the raw round index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: Vec<f64>,
    pub a: Vec<u8>,
    pub c: f64,
    pub s_next: Vec<f64>,
}

fn flatten_state(s: &EnvState, areas: usize) -> Vec<f64> {
    let mut out: Vec<f64> = s.k.bits().iter().map(|&b| f64::from(u8::from(b))).collect();
    out.push(s.ac);
    out.push(s.r as f64);
    out.extend((0..areas).map(|a| f64::from(u8::from(s.da.contains(&AreaId(a))))));
    out
}

fn unflatten_state(v: &[f64], n: usize) -> std::result::Result<EnvState, String> {
    if v.len() < n + 2 {
        return Err(format!("state has {} entries, need at least {}", v.len(), n + 2));
    }
    let bit = |x: f64| {
        if x == 0.0 || x == 1.0 {
            Ok(x == 1.0)
        } else {
            Err(format!("expected 0 or 1, found {x}"))
        }
    };
    let k = v[..n].iter().map(|&x| bit(x)).collect::<std::result::Result<Vec<_>, _>>()?;
    let r = v[n + 1];
    if !(r >= 0.0 && r.fract() == 0.0) {
        return Err(format!("round index {r} is not a non-negative integer"));
    }
    let mut da = BTreeSet::new();
    for (a, &x) in v[n + 2..].iter().enumerate() {
        if bit(x)? {
            da.insert(AreaId(a));
        }
    }
    Ok(EnvState {
        k: Placement::from_bits(k),
        ac: v[n],
        r: r as usize,
        da,
    })
}

impl TransitionRecord {
    pub fn encode(t: &Transition, areas: usize) -> Self {
        Self {
            s: flatten_state(&t.s, areas),
            a: t.a.bits().iter().map(|&b| u8::from(b)).collect(),
            c: t.c,
            s_next: flatten_state(&t.s_next, areas),
        }
    }

    pub fn decode(&self) -> std::result::Result<Transition, String> {
        let n = self.a.len();
        if self.s.len() != self.s_next.len() {
            return Err("s and s_next differ in length".into());
        }
        if self.a.iter().any(|&b| b > 1) {
            return Err("action entries must be 0 or 1".into());
        }
        if !self.c.is_finite() {
            return Err("cost is not finite".into());
        }
        Ok(Transition {
            s: unflatten_state(&self.s, n)?,
            a: Placement::from_bits(self.a.iter().map(|&b| b == 1).collect()),
            c: self.c,
            s_next: unflatten_state(&self.s_next, n)?,
        })
    }
}

pub fn write_transitions<W: Write>(mut writer: W, transitions: &[Transition], areas: usize) -> Result<()> {
    for t in transitions {
        serde_json::to_writer(&mut writer, &TransitionRecord::encode(t, areas))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionLog {
    pub transitions: Vec<Transition>,
    pub n: usize,
    pub areas: usize,
}

/// Reads a JSONL transition log, failing on the first bad line.
pub fn read_transitions(path: &Path) -> Result<TransitionLog> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut width = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |reason: String| Error::CorruptLog {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: TransitionRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let t = rec.decode().map_err(corrupt)?;
        let w = (rec.a.len(), rec.s.len());
        if *width.get_or_insert(w) != w {
            return Err(corrupt("dimensions differ from earlier lines".into()));
        }
        out.push(t);
    }
    let Some((n, width)) = width else {
        return Err(Error::EmptyLog);
    };
    Ok(TransitionLog {
        transitions: out,
        n,
        areas: width - n - 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ObjectiveWeights;
    use crate::env::FrozenSnapshot;

    fn agent(n: usize, areas: usize, horizon: usize) -> DqnAgent {
        let cfg = AgentConfig {
            batch_size: 4,
            replay_capacity: 16,
            hidden: vec![8],
            ..AgentConfig::default()
        };
        DqnAgent::new(cfg, StateEncoder::new(n, areas, horizon).unwrap(), 1).unwrap()
    }

    fn state(n: usize, bits: &[usize], ac: f64, r: usize, da: &[usize]) -> EnvState {
        EnvState {
            k: Placement::from_indices(n, bits.iter().copied()),
            ac,
            r,
            da: da.iter().map(|&a| AreaId(a)).collect(),
        }
    }

    #[test]
    fn encode_example() {
        let s = state(3, &[0], 0.5, 2, &[1]);
        assert_eq!(encode_state(&s, 3, 2, 10), vec![1.0, 0.0, 0.0, 0.5, 0.2, 0.0, 1.0]);
        let zero = encode_state(&EnvState::initial(3), 3, 2, 10);
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn top_p_examples() {
        assert_eq!(select_action_top_p(&[0.0; 4], 0.9, 1.0, Some(4)).count(), 4);
        let k = select_action_top_p(&[-10.0, 0.0, 0.0, 0.0], 0.9, 1.0, None);
        assert_eq!(k.selected().collect::<Vec<_>>(), vec![0]);
        let k = select_action_top_p(&[3.0, 1.0, 1.0, 2.0], GREEDY_TOP_P, 1.0, None);
        assert_eq!(k.selected().collect::<Vec<_>>(), vec![1]);
        let k = select_action_top_p(&[0.0; 6], 1.0, 1.0, Some(2));
        assert_eq!(k.selected().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn q_values_shape_and_zero_network() {
        let a = agent(5, 2, 10);
        assert_eq!(a.q_values(&EnvState::initial(5)).unwrap().len(), 5);
        let spec = q_network(a.config(), a.encoder()).unwrap();
        let z = DqnAgent::with_parameters(a.config().clone(), *a.encoder(), Parameters::zeros(&spec).unwrap(), 0).unwrap();
        assert!(z.q_values(&state(5, &[1], 0.3, 4, &[0])).unwrap().iter().all(|&q| q == 0.0));
    }

    fn transition(n: usize, r: usize, c: f64) -> Transition {
        Transition {
            s: state(n, &[], 0.0, r, &[]),
            a: Placement::from_indices(n, [0, 2]),
            c,
            s_next: state(n, &[0, 2], 0.1, r + 1, &[1]),
        }
    }

    #[test]
    fn replay_buffer_fifo_and_sampling() {
        let mut b = ReplayBuffer::new(2);
        for c in [1.0, 2.0, 3.0] {
            b.push(transition(3, 0, c));
        }
        assert_eq!(b.iter().map(|t| t.c).collect::<Vec<_>>(), vec![2.0, 3.0]);

        let mut b = ReplayBuffer::new(20);
        (0..20).for_each(|i| b.push(transition(3, 0, f64::from(i))));
        let mut r1 = seed::rng(4, &[]);
        let mut r2 = seed::rng(4, &[]);
        let x = b.sample_indices(10, &mut r1).unwrap();
        assert_eq!(x, b.sample_indices(10, &mut r2).unwrap());
        assert_eq!(x.iter().collect::<BTreeSet<_>>().len(), 10);
        assert!(matches!(b.sample_indices(21, &mut r1), Err(Error::Underfilled { .. })));
    }

    #[test]
    fn td_target_examples() {
        let mut a = agent(3, 2, 10);
        let spec = a.target.spec().clone();
        // target network outputs a constant 0.5 through the bias
        let mut p = Parameters::zeros(&spec).unwrap();
        p.layers_mut().last_mut().unwrap().bias.iter_mut().for_each(|b| *b = 0.5);
        a.target = p;
        let t = transition(3, 2, 0.75);
        assert!((a.td_target(&t).unwrap() - 1.2).abs() < 1e-12);
        assert_eq!(a.td_target(&transition(3, 9, 0.75)).unwrap(), 0.75);
        a.config.gamma = 0.0;
        assert_eq!(a.td_target(&t).unwrap(), 0.75);
    }

    #[test]
    fn zero_error_batch_leaves_parameters() {
        let mut a = agent(3, 2, 10);
        let t = transition(3, 9, 0.0);
        let spec = a.online.spec().clone();
        a.online = Parameters::zeros(&spec).unwrap();
        let before = a.online.clone();
        let loss = a.train_step(&[t]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(a.online, before);
    }

    #[test]
    fn target_only_changes_at_sync() {
        let mut a = agent(3, 2, 10);
        a.config.target_sync_interval = 3;
        let batch = vec![transition(3, 1, 2.0), transition(3, 4, 1.0)];
        let t0 = a.target.clone();
        a.train_step(&batch).unwrap();
        a.train_step(&batch).unwrap();
        assert_eq!(a.target, t0);
        a.train_step(&batch).unwrap();
        assert_eq!(a.target, a.online);
        assert_ne!(a.target, t0);
    }

    #[test]
    fn episode_trace_and_frozen_learning() {
        let mut env = FrozenSnapshot::random(4, 2, ObjectiveWeights::equal(), 6, 3).unwrap();
        let mut a = agent(4, 2, 6);
        a.config.alpha = 0.0;
        a.adam.learning_rate = 0.0;
        let before = a.online.clone();
        let trace = run_episode(&mut a, &mut env, true).unwrap();
        assert_eq!(trace.costs.len(), 6);
        assert_eq!(a.online, before);
    }

    #[test]
    fn refine_with_no_episodes_is_identity() {
        let mut env = FrozenSnapshot::random(4, 2, ObjectiveWeights::equal(), 6, 3).unwrap();
        let mut a = agent(4, 2, 6);
        let before = a.online.clone();
        assert!(refine_joiner(&mut a, &mut env, &[]).unwrap().is_empty());
        assert_eq!(a.online, before);
        assert_eq!(a.steps(), 0);
    }

    #[test]
    fn transition_record_round_trip() {
        let t = transition(3, 4, 0.625);
        let rec = TransitionRecord::encode(&t, 2);
        assert_eq!(rec.s_next, vec![1.0, 0.0, 1.0, 0.1, 5.0, 0.0, 1.0]);
        assert_eq!(rec.decode().unwrap(), t);
        let bad = TransitionRecord { a: vec![2, 0, 0], ..rec };
        assert!(bad.decode().is_err());
    }

    #[test]
    fn pretrain_rejects_empty_log() {
        let mut a = agent(3, 2, 10);
        assert!(matches!(pretrain_master(&mut a, &[], 3), Err(Error::EmptyLog)));
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig { gamma: 1.0, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig { top_p: 0.0, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig { replay_capacity: 4, ..AgentConfig::default() }.validate().is_err());
        assert!(AgentConfig::default().validate().is_ok());
    }
}
