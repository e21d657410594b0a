//! Experiment configuration, seeded runs of every selector, metrics CSV
//! output and the comparison / ablation / pre-training commands.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{ga_select, random_select, tabular_select, tabular_update, GaConfig, QTable, TabularConfig};
use crate::cost::ObjectiveWeights;
use crate::data::DatasetConfig;
use crate::domain::{ModelSpec, RoundReport, Transition};
use crate::dqn::{pretrain_master, read_transitions, run_episode, write_transitions, AgentConfig, DqnAgent, ModelEnvelope, StateEncoder};
use crate::env::{EnvConfig, Environment, MobilityModel, SimConfig, Simulation};
use crate::error::{Error, Result};
use crate::fl::FlConfig;
use crate::seed;

pub const METRICS_HEADER: &str = "# odfl-metrics v1";

const EPISODE_STREAM: u64 = 0x101;
const AGENT_STREAM: u64 = 0x102;
const SELECTOR_STREAM: u64 = 0x103;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Dqn,
    Random,
    Tabular,
    Ga,
}

impl Selector {
    pub const ALL: [Selector; 4] = [Selector::Dqn, Selector::Random, Selector::Tabular, Selector::Ga];

    pub fn name(self) -> &'static str {
        match self {
            Selector::Dqn => "dqn",
            Selector::Random => "random",
            Selector::Tabular => "tabular",
            Selector::Ga => "ga",
        }
    }
}

/// Desk-scale agent preset: a sharper selection softmax than the library default.
pub fn desk_agent() -> AgentConfig {
    AgentConfig {
        temperature: 0.1,
        ..AgentConfig::default()
    }
}

/// Missing fields in a config file take their desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub env: EnvConfig,
    pub mobility: MobilityModel,
    pub data: DatasetConfig,
    pub fl: FlConfig,
    pub model: ModelSpec,
    pub weights: ObjectiveWeights,
    pub agent: AgentConfig,
    pub selector: Selector,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub target_accuracy: f64,
    /// Trailing episodes summarized per seed.
    pub eval_episodes: usize,
    pub random_fraction: f64,
    pub tabular: TabularConfig,
    pub ga: GaConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            env: EnvConfig::default(),
            mobility: MobilityModel::default(),
            data: DatasetConfig::default(),
            fl: FlConfig::default(),
            model: ModelSpec::default(),
            weights: ObjectiveWeights::default(),
            agent: desk_agent(),
            selector: Selector::Dqn,
            episodes: 30,
            seeds: vec![0, 1, 2, 3, 4],
            target_accuracy: 0.6,
            eval_episodes: 5,
            random_fraction: 0.1,
            tabular: TabularConfig::default(),
            ga: GaConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale setting where most devices move every round or two.
    pub fn high_mobility() -> Self {
        Self {
            mobility: MobilityModel::high_mobility(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.seeds.is_empty() {
            return bad("seeds must be nonempty");
        }
        if self.episodes == 0 {
            return bad("episodes must be positive");
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return bad("target_accuracy must lie in [0,1]");
        }
        if !(self.random_fraction > 0.0 && self.random_fraction <= 1.0) {
            return bad("random_fraction must lie in (0,1]");
        }
        if self.eval_episodes == 0 || self.eval_episodes > self.episodes {
            return bad("eval_episodes must lie in 1..=episodes");
        }
        self.agent.validate()?;
        self.ga.validate()?;
        self.env.validate()?;
        self.data.validate()?;
        self.fl.validate()?;
        self.model.validate()?;
        self.weights.validate()
    }

    pub fn sim_config(&self, seed_value: u64) -> SimConfig {
        SimConfig {
            env: EnvConfig {
                seed: seed_value,
                ..self.env.clone()
            },
            mobility: self.mobility.clone(),
            data: self.data.clone(),
            fl: self.fl.clone(),
            model: self.model,
            weights: self.weights,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub episode: usize,
    pub round: usize,
    pub accepted: bool,
    pub global_accuracy: f64,
    pub ac: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub pun: u32,
    pub total: f64,
    pub selected: usize,
    pub received: usize,
    pub area_records: Vec<usize>,
}

const FIXED_COLUMNS: [&str; 15] = [
    "run_id", "seed", "episode", "round", "accepted", "global_accuracy", "ac", "c1", "c2", "c3", "c4", "pun", "total",
    "selected", "received",
];

impl MetricsRow {
    fn fields(&self) -> Vec<String> {
        let mut v = vec![
            self.run_id.clone(),
            self.seed.to_string(),
            self.episode.to_string(),
            self.round.to_string(),
            u8::from(self.accepted).to_string(),
            self.global_accuracy.to_string(),
            self.ac.to_string(),
            self.c1.to_string(),
            self.c2.to_string(),
            self.c3.to_string(),
            self.c4.to_string(),
            self.pun.to_string(),
            self.total.to_string(),
            self.selected.to_string(),
            self.received.to_string(),
        ];
        v.extend(self.area_records.iter().map(usize::to_string));
        v
    }
}

pub fn write_metrics<W: Write>(mut writer: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(writer, "{METRICS_HEADER}")?;
    let areas = rows.first().map_or(0, |r| r.area_records.len());
    let mut csv = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..areas).map(|a| format!("area_{a}")));
    csv.write_record(&header)?;
    for r in rows {
        csv.write_record(r.fields())?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub mean_cost: f64,
    pub accepted_fraction: f64,
    pub rounds_to_target: usize,
    pub final_accuracy: f64,
}

/// One-based index of the first round whose global accuracy reaches
/// `target`, or `horizon + 1` when none does.
pub fn rounds_to_target(reports: &[RoundReport], target: f64, horizon: usize) -> usize {
    reports
        .iter()
        .position(|r| r.global_accuracy >= target)
        .map_or(horizon + 1, |i| i + 1)
}

fn summarize(episode: usize, reports: &[RoundReport], target: f64, horizon: usize) -> EpisodeSummary {
    let n = reports.len().max(1) as f64;
    EpisodeSummary {
        episode,
        mean_cost: reports.iter().map(|r| r.cost.total).sum::<f64>() / n,
        accepted_fraction: reports.iter().filter(|r| r.accepted).count() as f64 / n,
        rounds_to_target: rounds_to_target(reports, target, horizon),
        final_accuracy: reports.last().map_or(0.0, |r| r.global_accuracy),
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub episodes: Vec<EpisodeSummary>,
    pub transitions: Vec<Transition>,
    pub agent: Option<DqnAgent>,
}

impl SeedRun {
    fn tail(&self, k: usize) -> &[EpisodeSummary] {
        &self.episodes[self.episodes.len().saturating_sub(k)..]
    }

    /// Median rounds-to-target over the last `k` episodes.
    pub fn median_rounds_to_target(&self, k: usize) -> f64 {
        median(&self.tail(k).iter().map(|e| e.rounds_to_target as f64).collect::<Vec<_>>())
    }

    pub fn accepted_fraction(&self, k: usize) -> f64 {
        mean(self.tail(k).iter().map(|e| e.accepted_fraction))
    }

    pub fn final_accuracy(&self, k: usize) -> f64 {
        mean(self.tail(k).iter().map(|e| e.final_accuracy))
    }

    pub fn mean_cost(&self, episodes: std::ops::Range<usize>) -> f64 {
        mean(self.episodes[episodes].iter().map(|e| e.mean_cost))
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

pub fn episode_seed(seed_value: u64, episode: usize) -> u64 {
    seed::derive(seed_value, &[EPISODE_STREAM, episode as u64])
}

/// Runs `config.selector` for every episode of one seed, in memory.
pub fn run_seed(config: &ExperimentConfig, seed_value: u64) -> Result<SeedRun> {
    let agent = match config.selector {
        Selector::Dqn => {
            let sim = Simulation::new(config.sim_config(seed_value))?;
            let encoder = StateEncoder::for_env(&sim)?;
            Some(DqnAgent::new(config.agent.clone(), encoder, seed::derive(seed_value, &[AGENT_STREAM]))?)
        }
        _ => None,
    };
    run_seed_with(config, seed_value, agent)
}

/// As [`run_seed`], starting the DQN selector from the given agent.
pub fn run_seed_with(config: &ExperimentConfig, seed_value: u64, mut agent: Option<DqnAgent>) -> Result<SeedRun> {
    config.validate()?;
    let mut sim = Simulation::new(config.sim_config(seed_value))?;
    let horizon = sim.horizon();
    let areas = sim.num_areas();
    if config.selector == Selector::Dqn && agent.is_none() {
        return Err(Error::InvalidConfig("dqn selector needs an agent".into()));
    }
    let mut table = QTable::default();
    let mut run = SeedRun {
        seed: seed_value,
        rows: Vec::with_capacity(config.episodes * horizon),
        episodes: Vec::with_capacity(config.episodes),
        transitions: Vec::with_capacity(config.episodes * horizon),
        agent: None,
    };
    for episode in 0..config.episodes {
        sim.reset(episode_seed(seed_value, episode))?;
        let mut rng = seed::rng(seed_value, &[SELECTOR_STREAM, episode as u64]);
        let mut reports = Vec::with_capacity(horizon);
        let mut acs = Vec::with_capacity(horizon);
        let mut volumes = Vec::with_capacity(horizon);
        match config.selector {
            Selector::Dqn => {
                let agent = agent.as_mut().expect("checked above");
                let mut stepper = EpisodeStepper::new(&mut sim);
                let t = run_episode(agent, &mut stepper, true)?;
                volumes = stepper.volumes;
                acs.extend(t.transitions.iter().map(|t| t.s_next.ac));
                reports = t.reports;
                run.transitions.extend(t.transitions);
            }
            _ => {
                let eps = config.tabular.epsilon(episode, config.episodes);
                while sim.state().r < horizon {
                    let s = sim.state().clone();
                    let devices = sim.devices().to_vec();
                    let a = match config.selector {
                        Selector::Random => random_select(sim.num_devices(), config.random_fraction, &mut rng)?,
                        Selector::Tabular => tabular_select(&table, &s, &devices, horizon, eps, &mut rng),
                        Selector::Ga => ga_select(&sim, &config.ga, &mut rng)?,
                        Selector::Dqn => unreachable!(),
                    };
                    let out = sim.step(&a)?;
                    let t = Transition {
                        s,
                        a,
                        c: out.cost.total,
                        s_next: out.next,
                    };
                    if config.selector == Selector::Tabular {
                        tabular_update(&mut table, &t, &devices, areas, horizon, config.tabular.alpha, config.tabular.gamma);
                    }
                    volumes.push(sim.snapshot_data_volume());
                    acs.push(t.s_next.ac);
                    reports.push(out.report);
                    run.transitions.push(t);
                }
            }
        }
        for ((report, vol), ac) in reports.iter().zip(volumes).zip(acs) {
            run.rows.push(MetricsRow {
                run_id: config.run_id.clone(),
                seed: seed_value,
                episode,
                round: report.round,
                accepted: report.accepted,
                global_accuracy: report.global_accuracy,
                ac,
                c1: report.cost.c1,
                c2: report.cost.c2,
                c3: report.cost.c3,
                c4: report.cost.c4,
                pun: report.cost.pun,
                total: report.cost.total,
                selected: report.selected.len(),
                received: report.received.len(),
                area_records: vol,
            });
        }
        run.episodes.push(summarize(episode, &reports, config.target_accuracy, horizon));
    }
    run.agent = agent;
    Ok(run)
}

/// Forwards to the simulation and records data volume after every step.
struct EpisodeStepper<'a> {
    sim: &'a mut Simulation,
    volumes: Vec<Vec<usize>>,
}

impl<'a> EpisodeStepper<'a> {
    fn new(sim: &'a mut Simulation) -> Self {
        Self { sim, volumes: Vec::new() }
    }
}

impl Environment for EpisodeStepper<'_> {
    fn num_devices(&self) -> usize {
        self.sim.num_devices()
    }

    fn num_areas(&self) -> usize {
        self.sim.num_areas()
    }

    fn horizon(&self) -> usize {
        Environment::horizon(self.sim)
    }

    fn state(&self) -> &crate::domain::EnvState {
        self.sim.state()
    }

    fn devices(&self) -> &[crate::domain::Device] {
        self.sim.devices()
    }

    fn reset(&mut self, seed_value: u64) -> Result<crate::domain::EnvState> {
        self.volumes.clear();
        self.sim.reset(seed_value)
    }

    fn evaluate(&self, action: &crate::domain::Placement) -> Result<crate::cost::CostBreakdown> {
        self.sim.evaluate(action)
    }

    fn step(&mut self, action: &crate::domain::Placement) -> Result<crate::env::StepOutcome> {
        let out = self.sim.step(action)?;
        self.volumes.push(self.sim.snapshot_data_volume());
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub metrics_path: PathBuf,
    pub log_path: PathBuf,
    pub model_paths: Vec<PathBuf>,
}

/// Runs every seed, writes the metrics CSV, appends transitions to the log
/// repository and saves one model per seed for the DQN selector.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let metrics_path = config.output_dir.join(format!("{}_metrics.csv", config.run_id));
    let log_path = config.output_dir.join(format!("{}_transitions.jsonl", config.run_id));
    let mut runs = Vec::with_capacity(config.seeds.len());
    let mut model_paths = Vec::new();
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    for &s in &config.seeds {
        let run = run_seed(config, s)?;
        write_transitions(&mut log, &run.transitions, config.env.areas)?;
        if let Some(agent) = &run.agent {
            let path = config.output_dir.join(format!("{}_seed{}_model.json", config.run_id, s));
            agent.envelope().save(&path)?;
            model_paths.push(path);
        }
        runs.push(run);
    }
    log.flush()?;
    let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    write_metrics(BufWriter::new(File::create(&metrics_path)?), &rows)?;
    Ok(ExperimentResult {
        runs,
        metrics_path,
        log_path,
        model_paths,
    })
}

/// Offline pre-training from a JSONL log; writes the model envelope to `out`.
pub fn pretrain_command(
    log_path: &Path,
    agent: &AgentConfig,
    horizon: usize,
    epochs: usize,
    seed_value: u64,
    out: &Path,
) -> Result<(ModelEnvelope, Vec<f64>)> {
    let log = read_transitions(log_path)?;
    let (n, areas) = (log.n, log.areas);
    let encoder = StateEncoder::new(n, areas, horizon)?;
    let mut agent = DqnAgent::new(agent.clone(), encoder, seed_value)?;
    let losses = pretrain_master(&mut agent, &log.transitions, epochs)?;
    let envelope = agent.envelope();
    envelope.save(out)?;
    Ok((envelope, losses))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorSummary {
    pub label: String,
    pub per_seed_rounds: Vec<f64>,
    pub rounds_to_target: f64,
    pub accepted_fraction: f64,
    pub final_accuracy: f64,
}

impl SelectorSummary {
    pub fn from_runs(label: &str, runs: &[SeedRun], eval_episodes: usize) -> Self {
        let per_seed_rounds: Vec<f64> = runs.iter().map(|r| r.median_rounds_to_target(eval_episodes)).collect();
        Self {
            label: label.into(),
            rounds_to_target: median(&per_seed_rounds),
            accepted_fraction: mean(runs.iter().map(|r| r.accepted_fraction(eval_episodes))),
            final_accuracy: mean(runs.iter().map(|r| r.final_accuracy(eval_episodes))),
            per_seed_rounds,
        }
    }
}

pub fn summary_table(rows: &[SelectorSummary]) -> String {
    let mut out = format!("{:<10} {:>16} {:>18} {:>15}\n", "selector", "rounds_to_target", "accepted_fraction", "final_accuracy");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>16.1} {:>18.3} {:>15.3}",
            r.label, r.rounds_to_target, r.accepted_fraction, r.final_accuracy
        );
    }
    out
}

fn write_summary_csv(path: &Path, rows: &[SelectorSummary], weights: Option<&[ObjectiveWeights]>) -> Result<()> {
    let mut csv = csv::Writer::from_path(path)?;
    let mut header = vec!["label", "rounds_to_target", "accepted_fraction", "final_accuracy"];
    if weights.is_some() {
        header.extend(["w1", "w2", "w3", "w4"]);
    }
    csv.write_record(&header)?;
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![
            r.label.clone(),
            r.rounds_to_target.to_string(),
            r.accepted_fraction.to_string(),
            r.final_accuracy.to_string(),
        ];
        if let Some(w) = weights {
            rec.extend(w[i].as_array().iter().map(f64::to_string));
        }
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub summaries: Vec<SelectorSummary>,
    pub runs: Vec<Vec<SeedRun>>,
    pub table: String,
    pub csv_path: PathBuf,
}

/// All four selectors on the configured seeds.
pub fn compare_command(config: &ExperimentConfig) -> Result<Comparison> {
    let mut summaries = Vec::new();
    let mut runs = Vec::new();
    for sel in Selector::ALL {
        let cfg = ExperimentConfig {
            selector: sel,
            run_id: format!("{}_{}", config.run_id, sel.name()),
            ..config.clone()
        };
        let res = run_experiment(&cfg)?;
        summaries.push(SelectorSummary::from_runs(sel.name(), &res.runs, config.eval_episodes));
        runs.push(res.runs);
    }
    let csv_path = config.output_dir.join(format!("{}_compare.csv", config.run_id));
    write_summary_csv(&csv_path, &summaries, None)?;
    Ok(Comparison {
        table: summary_table(&summaries),
        summaries,
        runs,
        csv_path,
    })
}

/// The objective-weight scenarios: all equal, diversity off, and only
/// diversity and requests on.
pub fn ablation_scenarios() -> Result<[(&'static str, ObjectiveWeights); 3]> {
    Ok([
        ("main", ObjectiveWeights::equal()),
        ("run1", ObjectiveWeights::normalized(1.0, 0.0, 1.0, 1.0)?),
        ("run2", ObjectiveWeights::normalized(0.0, 1.0, 0.0, 1.0)?),
    ])
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub scenarios: Vec<(String, ObjectiveWeights)>,
    pub summaries: Vec<SelectorSummary>,
    pub runs: Vec<Vec<SeedRun>>,
    pub table: String,
    pub csv_path: PathBuf,
}

/// DQN under each weight scenario on shared seeds.
pub fn ablation_command(config: &ExperimentConfig) -> Result<Ablation> {
    let mut scenarios = Vec::new();
    let mut summaries = Vec::new();
    let mut runs = Vec::new();
    for (name, weights) in ablation_scenarios()? {
        let cfg = ExperimentConfig {
            selector: Selector::Dqn,
            weights,
            run_id: format!("{}_{}", config.run_id, name),
            ..config.clone()
        };
        let res = run_experiment(&cfg)?;
        summaries.push(SelectorSummary::from_runs(name, &res.runs, config.eval_episodes));
        scenarios.push((name.to_string(), weights));
        runs.push(res.runs);
    }
    let csv_path = config.output_dir.join(format!("{}_ablation.csv", config.run_id));
    let weights: Vec<ObjectiveWeights> = scenarios.iter().map(|s| s.1).collect();
    write_summary_csv(&csv_path, &summaries, Some(&weights))?;
    Ok(Ablation {
        table: summary_table(&summaries),
        scenarios,
        summaries,
        runs,
        csv_path,
    })
}

/// Rewrites a metrics CSV in long format (`run_id, seed, episode, round,
/// metric, value`) next to the input.
pub fn export_plots(metrics: &Path) -> Result<PathBuf> {
    let text = fs::read_to_string(metrics)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader.headers()?.clone();
    let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let out = metrics.with_file_name(format!("{stem}_long.csv"));
    let mut csv = csv::Writer::from_path(&out)?;
    csv.write_record(["run_id", "seed", "episode", "round", "metric", "value"])?;
    for rec in reader.records() {
        let rec = rec?;
        for (name, value) in header.iter().zip(rec.iter()).skip(4) {
            csv.write_record([&rec[0], &rec[1], &rec[2], &rec[3], name, value])?;
        }
    }
    csv.flush()?;
    Ok(out)
}
