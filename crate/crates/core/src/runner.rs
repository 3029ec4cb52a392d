//! Experiment orchestration: meta-training at the data center, broadcast,
//! per-cluster adaptation, Monte-Carlo ensembles, `t0` sweeps and the files
//! they leave behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{adapt_until, DeviceState, FlConfig, TaskEnv, Topology, TopologyDoc};
use crate::energy::{
    fl_energy, maml_energy, replay_fl, replay_maml, sweep_t0, total_budget, ClusterLinks, EnergyProfile, EnergyReport,
    EnergyTopology, LedgerEvent, ProfileDoc, Response, SweepTable,
};
use crate::env::{collect_episode, TaskSet, TaskSetDoc};
use crate::error::{Error, Result};
use crate::maml::{maml_round, MamlConfig, MetaState};
use crate::qlearn::{ParamVector, QNetConfig};
use crate::seed;

/// Version tag written into every CSV row and run record.
pub const SCHEMA: &str = "v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default)]
    pub tasks: TaskSetDoc,
    #[serde(default = "default_steps")]
    pub episode_steps: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Discount of both the Bellman target and the running reward.
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// Learn and evaluate with rewards divided by `r_max`. Thresholds are
    /// relative, so this only changes the Q-value scale SGD works at.
    #[serde(default = "yes")]
    pub normalize_rewards: bool,
}

fn yes() -> bool {
    true
}

fn default_steps() -> usize {
    20
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_nu() -> f64 {
    0.9
}

impl Default for EnvConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// A built-in name or an inline document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Named<D> {
    Name(String),
    Inline(D),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub qnet: QNetConfig,
    #[serde(default)]
    pub maml: MamlConfig,
    #[serde(default)]
    pub fl: FlConfig,
    #[serde(default = "default_topology")]
    pub topology: Named<TopologyDoc>,
    /// Profile name, path to a JSON profile, or inline profile. Batch counts
    /// and `beta` are overwritten from `maml` and `fl`.
    #[serde(default = "default_profile")]
    pub profile: Named<ProfileDoc>,
    #[serde(default = "default_candidates")]
    pub t0_candidates: Vec<usize>,
    #[serde(default = "default_runs")]
    pub monte_carlo_runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// `(E_UL, E_SL)` pairs in bit/J priced by sweeps.
    #[serde(default = "default_pairs")]
    pub efficiency_pairs: Vec<[f64; 2]>,
    /// Worker threads; all cores when unset.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_topology() -> Named<TopologyDoc> {
    Named::Name("pairs".into())
}
fn default_profile() -> Named<ProfileDoc> {
    Named::Name("table1".into())
}
fn default_candidates() -> Vec<usize> {
    vec![0, 42, 66, 90, 132, 210, 240]
}
fn default_runs() -> usize {
    15
}
fn default_pairs() -> Vec<[f64; 2]> {
    vec![[200e3, 500e3], [500e3, 200e3]]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn topology(&self, tasks: usize) -> Result<Topology> {
        match &self.topology {
            Named::Name(n) => match Topology::builtin(n, tasks) {
                Err(Error::UnknownBuiltin(_)) => Topology::from_json(&fs::read_to_string(n)?),
                other => other,
            },
            Named::Inline(doc) => Topology::new(doc.clone()),
        }
    }

    /// The configured profile with batch counts and `beta` taken from the
    /// simulation settings, so closed forms price what the simulator runs.
    pub fn profile(&self) -> Result<EnergyProfile<f64>> {
        let mut p = match &self.profile {
            Named::Name(n) => EnergyProfile::resolve(n)?,
            Named::Inline(doc) => EnergyProfile::from_doc(doc)?,
        };
        p.batches_a = (self.maml.batches_a * self.maml.inner_steps) as u64;
        p.batches_b = self.maml.batches_b as u64;
        p.batches_local = self.fl.local_batches as u64;
        p.beta = self.maml.beta();
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<Simulation> {
        Simulation::new(self.clone())
    }
}

/// A validated configuration with its derived objects.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub cfg: ExperimentConfig,
    pub tasks: TaskSet<f64>,
    pub topology: Topology,
    pub profile: EnergyProfile<f64>,
    pub hash: String,
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let mut tasks = TaskSet::<f64>::from_doc(&cfg.env.tasks)?;
        if cfg.env.normalize_rewards {
            tasks = TaskSet::from_doc(&TaskSetDoc {
                r_max: 1.0,
                ..cfg.env.tasks.clone()
            })?;
        }
        let m = tasks.tasks.len();
        if cfg.env.episode_steps == 0 {
            return Err(Error::config("env.episode_steps", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&cfg.env.epsilon) {
            return Err(Error::config("env.epsilon", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&cfg.env.nu) {
            return Err(Error::config("env.nu", "must lie in [0, 1]"));
        }
        cfg.qnet.validate(tasks.grid.landmarks(), crate::env::Action::COUNT)?;
        cfg.maml.validate(m)?;
        cfg.fl.validate()?;
        let topology = cfg.topology(m)?;
        let ids: Vec<usize> = topology.tasks().collect();
        if ids != (1..=m).collect::<Vec<_>>() {
            return Err(Error::config(
                "topology",
                format!("clusters cover tasks {ids:?}, expected 1..={m}"),
            ));
        }
        for &t in &cfg.maml.training_tasks {
            if !(1..=m).contains(&t) {
                return Err(Error::config("maml.training_tasks", format!("unknown task {t}")));
            }
            if topology.cluster(t)?.len() < cfg.maml.collectors_per_task {
                return Err(Error::config(
                    "maml.collectors_per_task",
                    format!("cluster {t} is smaller"),
                ));
            }
        }
        let half = (cfg.env.episode_steps as f64 * cfg.maml.split_ratio).round() as usize;
        if half < cfg.maml.batches_a || cfg.env.episode_steps - half < cfg.maml.batches_b {
            return Err(Error::config(
                "maml.batches_a",
                "an episode split cannot fill the batch counts",
            ));
        }
        if cfg.monte_carlo_runs == 0 {
            return Err(Error::config("monte_carlo_runs", "must be at least 1"));
        }
        if cfg.t0_candidates.is_empty() || cfg.t0_candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "t0_candidates",
                "must be nonempty and strictly increasing",
            ));
        }
        if cfg
            .efficiency_pairs
            .iter()
            .flatten()
            .any(|&e| !(e > 0.0 && e.is_finite()))
        {
            return Err(Error::config("efficiency_pairs", "efficiencies must be positive"));
        }
        if cfg.workers == Some(0) {
            return Err(Error::config("workers", "must be at least 1"));
        }
        let profile = cfg.profile()?;
        let hash = cfg.hash();
        Ok(Simulation {
            cfg,
            tasks,
            topology,
            profile,
            hash,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.tasks.len()
    }

    pub fn energy_topology(&self) -> Result<EnergyTopology> {
        EnergyTopology::new(
            &self.topology,
            self.cfg.maml.training_tasks.len(),
            self.cfg.maml.collectors_per_task,
        )
    }

    fn initial_params(&self, run_seed: u64) -> ParamVector<f64> {
        self.cfg
            .qnet
            .init_with_seed::<f64>(seed::derive(run_seed, seed::TAG_INIT))
            .with_byte_size(self.profile.model_bytes)
    }

    /// Meta-trains for `max(checkpoints)` rounds and returns the meta-model
    /// and ledger at each checkpoint.
    pub fn meta_train(&self, run_seed: u64, checkpoints: &[usize]) -> Result<Vec<MetaSnapshot>> {
        let cfg = &self.cfg.maml;
        let grid = &self.tasks.grid;
        let eps = cfg.epsilon.unwrap_or(self.cfg.env.epsilon);
        let last = checkpoints.iter().copied().max().unwrap_or(0);
        let mut state = MetaState::new(self.initial_params(run_seed), cfg.target_sync);
        let mut events = Vec::new();
        let mut out = Vec::new();
        for round in 0..=last {
            if checkpoints.contains(&round) {
                out.push(MetaSnapshot {
                    t0: round,
                    params: state.meta_params.clone(),
                    events: events.clone(),
                });
            }
            if round == last {
                break;
            }
            let mut fresh = BTreeMap::new();
            for &task in &cfg.training_tasks {
                let spec = self.tasks.task(task)?;
                let collectors = &self.topology.cluster(task)?[..cfg.collectors_per_task];
                let mut batches = Vec::new();
                for &k in collectors {
                    let s = seed::derive_path(run_seed, &[seed::TAG_MAML, round as u64, k as u64]);
                    let mut b =
                        collect_episode(grid, spec, Some(&state.meta_params), eps, self.cfg.env.episode_steps, s)?
                            .with_byte_size(self.profile.data_bytes);
                    b.device_id = k;
                    events.push(LedgerEvent::Upload {
                        device: k,
                        bytes: b.byte_size,
                    });
                    batches.push(b);
                }
                fresh.insert(task, batches);
            }
            let split = seed::derive_path(run_seed, &[seed::TAG_SPLIT, round as u64]);
            let (next, tally) = maml_round(&state, &fresh, cfg, grid, self.cfg.env.nu, split)?;
            events.push(LedgerEvent::DataCenterGradients {
                round: next.round,
                inner: tally.inner,
                outer: tally.outer,
            });
            state = next;
        }
        Ok(out)
    }

    /// Adapts every task from `init`, logging the broadcast when meta-trained.
    pub fn adapt_all(&self, init: &ParamVector<f64>, run_seed: u64) -> Result<Vec<TaskRecord>> {
        let fl = &self.cfg.fl;
        let ids: Vec<usize> = (1..=self.task_count()).collect();
        ids.par_iter()
            .map(|&task| {
                let spec = self.tasks.task(task)?;
                let env = TaskEnv {
                    grid: &self.tasks.grid,
                    task: spec,
                    steps: self.cfg.env.episode_steps,
                    nu: self.cfg.env.nu,
                };
                let states = self
                    .topology
                    .cluster(task)?
                    .iter()
                    .map(|&k| {
                        let s = seed::derive_path(run_seed, &[seed::TAG_FL, k as u64]);
                        DeviceState::new(k, init.clone(), fl.target_sync, s)
                    })
                    .collect();
                let threshold = fl.threshold_for(&env);
                let a = adapt_until(states, &self.topology, &env, &self.cfg.fl, threshold, fl.max_rounds)?;
                let mut events = Vec::new();
                for m in &a.metrics {
                    for (&device, &count) in &m.gradients {
                        events.push(LedgerEvent::LocalGradients { device, count });
                    }
                    for msg in &m.messages {
                        events.push(LedgerEvent::ModelExchange {
                            from: msg.from,
                            to: msg.to,
                            bytes: msg.bytes,
                            link: msg.link,
                        });
                    }
                }
                let energy = fl_energy(a.rounds as f64, &ClusterLinks::of(&self.topology, task)?, &self.profile)?;
                Ok(TaskRecord {
                    task,
                    seen: self.cfg.maml.training_tasks.contains(&task),
                    rounds: a.rounds,
                    converged: a.converged,
                    threshold: a.threshold,
                    curve: a.curve,
                    events,
                    energy,
                })
            })
            .collect()
    }

    /// Full two-phase pipeline with `t0` meta-rounds.
    pub fn run_with(&self, run_seed: u64, t0: usize) -> Result<(RunRecord, ParamVector<f64>)> {
        let start = Instant::now();
        let snap = self.meta_train(run_seed, &[t0])?.pop().expect("one checkpoint");
        let record = self.finish(run_seed, snap.clone())?;
        Ok((
            RunRecord {
                wall_clock_s: start.elapsed().as_secs_f64(),
                ..record
            },
            snap.params,
        ))
    }

    fn finish(&self, run_seed: u64, snap: MetaSnapshot) -> Result<RunRecord> {
        let start = Instant::now();
        let mut maml_events = snap.events;
        if snap.t0 > 0 {
            for k in self.topology.devices() {
                maml_events.push(LedgerEvent::Download {
                    device: k,
                    bytes: snap.params.byte_size(),
                });
            }
        }
        let tasks = self.adapt_all(&snap.params, run_seed)?;
        let et = self.energy_topology()?;
        let maml = maml_energy(snap.t0, &et.collectors, et.devices, &self.profile);
        let fl: Vec<EnergyReport<f64>> = tasks.iter().map(|t| t.energy.clone()).collect();
        let total = total_budget(&maml, &fl);
        Ok(RunRecord {
            schema: SCHEMA.into(),
            config_hash: self.hash.clone(),
            seed: run_seed,
            t0: snap.t0,
            maml_events,
            tasks,
            maml_energy: maml,
            total_energy: total,
            wall_clock_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Seed of Monte-Carlo run `index`.
    pub fn run_seed(&self, index: usize) -> u64 {
        seed::derive(self.cfg.master_seed, index as u64)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.cfg.workers {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::config("workers", e.to_string()))
    }

    /// `monte_carlo_runs` pipelines at `maml.rounds`, ordered by run index.
    pub fn monte_carlo(&self) -> Result<MonteCarlo> {
        let records: Vec<RunRecord> = self.pool()?.install(|| {
            (0..self.cfg.monte_carlo_runs)
                .into_par_iter()
                .map(|i| Ok(self.run_with(self.run_seed(i), self.cfg.maml.rounds)?.0))
                .collect::<Result<_>>()
        })?;
        Ok(MonteCarlo {
            aggregate: Aggregate::of(&records),
            records,
        })
    }

    /// Every run meta-trains once and adapts from the snapshot at each
    /// candidate `t0`. Returns records indexed `[run][candidate]`.
    pub fn sweep_records(&self, candidates: &[usize]) -> Result<Vec<Vec<RunRecord>>> {
        self.pool()?.install(|| {
            (0..self.cfg.monte_carlo_runs)
                .into_par_iter()
                .map(|i| {
                    let s = self.run_seed(i);
                    self.meta_train(s, candidates)?
                        .into_par_iter()
                        .map(|snap| self.finish(s, snap))
                        .collect::<Result<Vec<_>>>()
                })
                .collect()
        })
    }

    pub fn sweep(&self, candidates: &[usize]) -> Result<Sweep> {
        if candidates.len() < 2 {
            return Err(Error::config("t0_candidates", "a sweep needs at least two candidates"));
        }
        let records = self.sweep_records(candidates)?;
        let mut by_t0: BTreeMap<usize, Vec<RunRecord>> = BTreeMap::new();
        for run in records {
            for r in run {
                by_t0.entry(r.t0).or_default().push(r);
            }
        }
        let aggregates: BTreeMap<usize, Aggregate> = by_t0.iter().map(|(&t0, rs)| (t0, Aggregate::of(rs))).collect();
        let response: Response<f64> = aggregates
            .iter()
            .map(|(&t0, a)| (t0, a.tasks.iter().map(|t| t.mean_rounds).collect()))
            .collect();
        let tradeoff = price(
            &response,
            &self.profile,
            &self.energy_topology()?,
            &self.cfg.efficiency_pairs,
        )?;
        Ok(Sweep {
            aggregates,
            tradeoff,
            records: by_t0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSnapshot {
    pub t0: usize,
    pub params: ParamVector<f64>,
    pub events: Vec<LedgerEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    /// Whether the task was a meta-training task.
    pub seen: bool,
    pub rounds: usize,
    pub converged: bool,
    pub threshold: f64,
    /// Cluster-mean greedy running reward, starting before round 1.
    pub curve: Vec<f64>,
    pub events: Vec<LedgerEvent>,
    pub energy: EnergyReport<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub t0: usize,
    pub maml_events: Vec<LedgerEvent>,
    pub tasks: Vec<TaskRecord>,
    pub maml_energy: EnergyReport<f64>,
    pub total_energy: EnergyReport<f64>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn all_converged(&self) -> bool {
        self.tasks.iter().all(|t| t.converged)
    }

    pub fn total_rounds(&self) -> usize {
        self.tasks.iter().map(|t| t.rounds).sum()
    }

    /// Record with the wall-clock field zeroed, for comparisons.
    pub fn without_timing(&self) -> Self {
        RunRecord {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }

    /// Re-prices the event logs and compares with the stored reports
    /// exactly.
    pub fn ledger_closes(&self, profile: &EnergyProfile<f64>) -> Result<bool> {
        let maml = replay_maml(&self.maml_events, profile)?;
        let fl = self
            .tasks
            .iter()
            .map(|t| replay_fl(&t.events, profile))
            .collect::<Result<Vec<_>>>()?;
        let tasks_ok = fl.iter().zip(&self.tasks).all(|(r, t)| *r == t.energy);
        Ok(maml == self.maml_energy && tasks_ok && total_budget(&maml, &fl) == self.total_energy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub task: usize,
    pub seen: bool,
    pub mean_rounds: f64,
    pub median_rounds: f64,
    pub min_rounds: usize,
    pub max_rounds: usize,
    pub std_rounds: f64,
    pub converged_runs: usize,
    pub mean_energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub tasks: Vec<TaskAggregate>,
    pub mean_total_rounds: f64,
    pub mean_maml_j: f64,
    pub mean_fl_j: f64,
    pub mean_total_j: f64,
    pub std_total_j: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl Aggregate {
    /// Summary of records that share a configuration. Panics on an empty
    /// slice.
    pub fn of(records: &[RunRecord]) -> Self {
        assert!(!records.is_empty(), "aggregate of no runs");
        let tasks = (0..records[0].tasks.len())
            .map(|i| {
                let rounds: Vec<f64> = records.iter().map(|r| r.tasks[i].rounds as f64).collect();
                let energy: Vec<f64> = records.iter().map(|r| r.tasks[i].energy.total_j).collect();
                TaskAggregate {
                    task: records[0].tasks[i].task,
                    seen: records[0].tasks[i].seen,
                    mean_rounds: mean(&rounds),
                    median_rounds: median(&rounds),
                    min_rounds: records.iter().map(|r| r.tasks[i].rounds).min().unwrap_or(0),
                    max_rounds: records.iter().map(|r| r.tasks[i].rounds).max().unwrap_or(0),
                    std_rounds: std_dev(&rounds),
                    converged_runs: records.iter().filter(|r| r.tasks[i].converged).count(),
                    mean_energy_j: mean(&energy),
                }
            })
            .collect();
        let totals: Vec<f64> = records.iter().map(|r| r.total_energy.total_j).collect();
        let maml: Vec<f64> = records.iter().map(|r| r.maml_energy.total_j).collect();
        Aggregate {
            runs: records.len(),
            tasks,
            mean_total_rounds: mean(&records.iter().map(|r| r.total_rounds() as f64).collect::<Vec<_>>()),
            mean_maml_j: mean(&maml),
            mean_fl_j: mean(&totals) - mean(&maml),
            mean_total_j: mean(&totals),
            std_total_j: std_dev(&totals),
        }
    }

    /// Mean rounds over seen (`true`) or unseen tasks.
    pub fn mean_rounds_where(&self, seen: bool) -> f64 {
        let v: Vec<f64> = self
            .tasks
            .iter()
            .filter(|t| t.seen == seen)
            .map(|t| t.mean_rounds)
            .collect();
        mean(&v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarlo {
    pub aggregate: Aggregate,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricedSweep {
    pub e_ul: f64,
    pub e_sl: f64,
    pub table: SweepTable<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub aggregates: BTreeMap<usize, Aggregate>,
    pub tradeoff: Vec<PricedSweep>,
    pub records: BTreeMap<usize, Vec<RunRecord>>,
}

/// Prices a response under each `(E_UL, E_SL)` pair.
pub fn price(
    response: &Response<f64>,
    profile: &EnergyProfile<f64>,
    topo: &EnergyTopology,
    pairs: &[[f64; 2]],
) -> Result<Vec<PricedSweep>> {
    pairs
        .iter()
        .map(|&[e_ul, e_sl]| {
            Ok(PricedSweep {
                e_ul,
                e_sl,
                table: sweep_t0(response, &profile.with_efficiencies(e_ul, e_sl)?, topo)?,
            })
        })
        .collect()
}

pub const TRADEOFF_HEADER: [&str; 8] = [
    "schema",
    "e_ul_bit_per_j",
    "e_sl_bit_per_j",
    "t0",
    "maml_kj",
    "fl_kj",
    "total_kj",
    "is_argmin",
];
pub const ROUNDS_HEADER: [&str; 9] = [
    "schema",
    "t0",
    "task",
    "seen",
    "mean_rounds",
    "median_rounds",
    "min_rounds",
    "max_rounds",
    "converged_runs",
];
pub const BARS_HEADER: [&str; 8] = [
    "schema",
    "label",
    "task",
    "seen",
    "learning_kj",
    "communication_kj",
    "total_kj",
    "mean_rounds",
];

pub fn write_tradeoff<W: std::io::Write>(out: W, priced: &[PricedSweep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRADEOFF_HEADER)?;
    for p in priced {
        for r in &p.table.rows {
            w.write_record([
                SCHEMA.to_string(),
                p.e_ul.to_string(),
                p.e_sl.to_string(),
                r.t0.to_string(),
                (r.maml_j / 1e3).to_string(),
                (r.fl_j / 1e3).to_string(),
                (r.total_j / 1e3).to_string(),
                (r.t0 == p.table.argmin).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rounds<W: std::io::Write>(out: W, aggregates: &BTreeMap<usize, Aggregate>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROUNDS_HEADER)?;
    for (t0, a) in aggregates {
        for t in &a.tasks {
            w.write_record([
                SCHEMA.to_string(),
                t0.to_string(),
                t.task.to_string(),
                t.seen.to_string(),
                t.mean_rounds.to_string(),
                t.median_rounds.to_string(),
                t.min_rounds.to_string(),
                t.max_rounds.to_string(),
                t.converged_runs.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One meta-training bar followed by one bar per task, averaged over runs.
pub fn write_bars<W: std::io::Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let n = records.len() as f64;
    let avg = |f: &dyn Fn(&RunRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let kj = |f: &dyn Fn(&RunRecord) -> f64| avg(f) / 1e3;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BARS_HEADER)?;
    w.write_record([
        SCHEMA.to_string(),
        "maml".into(),
        String::new(),
        String::new(),
        kj(&|r| r.maml_energy.learning_j).to_string(),
        kj(&|r| r.maml_energy.communication_j).to_string(),
        kj(&|r| r.maml_energy.total_j).to_string(),
        avg(&|r| r.t0 as f64).to_string(),
    ])?;
    for i in 0..records[0].tasks.len() {
        let t = &records[0].tasks[i];
        w.write_record([
            SCHEMA.to_string(),
            format!("task{}", t.task),
            t.task.to_string(),
            t.seen.to_string(),
            kj(&|r| r.tasks[i].energy.learning_j).to_string(),
            kj(&|r| r.tasks[i].energy.communication_j).to_string(),
            kj(&|r| r.tasks[i].energy.total_j).to_string(),
            avg(&|r| r.tasks[i].rounds as f64).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Experiment directory: `config.json`, `records/`, `params/`, `tables/`.
pub struct OutputDir<'a> {
    root: &'a Path,
}

impl<'a> OutputDir<'a> {
    pub fn create(root: &'a Path, cfg: &ExperimentConfig) -> Result<Self> {
        for sub in ["records", "params", "tables"] {
            fs::create_dir_all(root.join(sub))?;
        }
        fs::write(root.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
        Ok(OutputDir { root })
    }

    pub fn record(&self, name: &str, r: &RunRecord) -> Result<()> {
        fs::write(
            self.root.join("records").join(format!("{name}.json")),
            serde_json::to_string_pretty(r)?,
        )?;
        Ok(())
    }

    pub fn params(&self, name: &str, p: &ParamVector<f64>, hash: &str, round: usize) -> Result<()> {
        let tags = [
            ("config_hash".to_string(), hash.to_string()),
            ("round".to_string(), round.to_string()),
        ]
        .into_iter()
        .collect();
        p.save(&self.root.join("params").join(format!("{name}.bin")), tags)
    }

    pub fn table(&self, name: &str) -> std::path::PathBuf {
        self.root.join("tables").join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Small but complete configuration for quick pipeline checks.
    pub(crate) fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.qnet.layer_widths = vec![40, 8, 4];
        cfg.maml.rounds = 3;
        cfg.fl.max_rounds = 3;
        cfg.monte_carlo_runs = 2;
        cfg.t0_candidates = vec![0, 2, 3];
        cfg
    }

    #[test]
    fn normalized_rewards_scale_thresholds_only() {
        let mut raw = tiny();
        raw.env.normalize_rewards = false;
        let raw = raw.validate().unwrap();
        let unit = tiny().validate().unwrap();
        assert_eq!(raw.tasks.r_max, 10.0);
        assert_eq!(unit.tasks.r_max, 1.0);
        let task = |s: &Simulation| s.tasks.task(3).unwrap().clone();
        let best = |s: &Simulation| crate::env::max_running_reward(&s.tasks.grid, &task(s), 20, 0.9);
        assert_relative_eq!(best(&raw), 10.0 * best(&unit), max_relative = 1e-12);
    }

    #[test]
    fn defaults_validate() {
        let sim = ExperimentConfig::default().validate().unwrap();
        assert_eq!(sim.topology.device_count(), 12);
        assert_eq!(sim.profile.batches_local, 20);
        assert_eq!(sim.hash.len(), 64);
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = tiny();
        cfg.t0_candidates = vec![5, 2];
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "t0_candidates"),
            other => panic!("{other:?}"),
        }
        let mut cfg = tiny();
        cfg.fl.damping = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "fl.damping"));
        assert!(ExperimentConfig::from_json(r#"{"maml": {"rounds": -1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn pipeline_contracts() {
        let sim = tiny().validate().unwrap();
        let (r0, _) = sim.run_with(11, 0).unwrap();
        assert_eq!(r0.maml_energy.total_j, 0.0);
        assert!(r0.maml_events.is_empty());
        assert_eq!(r0.tasks.len(), 6);
        let (r, p) = sim.run_with(11, 3).unwrap();
        assert_eq!(p.byte_size(), 5_600_000);
        let downloads = r
            .maml_events
            .iter()
            .filter(|e| matches!(e, LedgerEvent::Download { .. }))
            .count();
        assert_eq!(downloads, 12);
        assert!(r.ledger_closes(&sim.profile).unwrap());
        assert!(r0.ledger_closes(&sim.profile).unwrap());
        let (again, _) = sim.run_with(11, 3).unwrap();
        assert_eq!(again.without_timing(), r.without_timing());
    }

    #[test]
    fn sweep_snapshots_match_direct_runs() {
        let sim = tiny().validate().unwrap();
        let s = sim.run_seed(0);
        let recs = sim.sweep_records(&[0, 2]).unwrap();
        let (direct, _) = sim.run_with(s, 2).unwrap();
        assert_eq!(recs[0][1].without_timing(), direct.without_timing());
    }

    #[test]
    fn aggregate_of_one_run_is_that_run() {
        let sim = tiny().validate().unwrap();
        let (r, _) = sim.run_with(5, 1).unwrap();
        let a = Aggregate::of(std::slice::from_ref(&r));
        for (t, rec) in a.tasks.iter().zip(&r.tasks) {
            assert_eq!(t.mean_rounds, rec.rounds as f64);
            assert_eq!(t.median_rounds, rec.rounds as f64);
        }
        assert_eq!(a.mean_total_j, r.total_energy.total_j);
    }

    #[test]
    fn csv_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let topo = EnergyTopology::reference();
        let p = EnergyProfile::builtin("table1").unwrap();
        let priced = price(&crate::energy::table2(), &p, &topo, &default_pairs()).unwrap();
        let path = dir.path().join("t.csv");
        write_tradeoff(fs::File::create(&path).unwrap(), &priced).unwrap();
        let mut rd = csv::Reader::from_path(&path).unwrap();
        assert_eq!(
            rd.headers().unwrap().iter().collect::<Vec<_>>(),
            TRADEOFF_HEADER.to_vec()
        );
        assert_eq!(rd.records().count(), 7 * 2);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
