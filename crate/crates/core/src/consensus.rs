//! Decentralized adaptation within one cluster: local SGD on fresh
//! experience, then synchronous size-weighted neighbourhood averaging
//!
//! ```text
//! W_k <- W_k + eps * sum_{h in N_k} sigma_kh (W_h - W_k)
//! sigma_kh = |E_h| / sum_{j in N_k} |E_j|
//! ```
//!
//! `eps = 1` is the undamped update, which swaps the models of a symmetric
//! pair forever; the default `eps = 0.5` averages a pair exactly.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    collect_episode, greedy_running_reward, max_running_reward, ExperienceBatch, GridWorld, TaskSpec, Transition,
};
use crate::error::{Error, Result};
use crate::qlearn::{dql_grad, sgd_step, sync_target, ParamVector, TargetNetwork};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinkKind {
    /// Direct device-to-device link.
    #[serde(rename = "SL")]
    Sidelink,
    /// Relayed through the base station: one uplink plus one downlink.
    #[serde(rename = "UL+DL")]
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDoc {
    pub task: usize,
    pub devices: Vec<usize>,
    /// Device id (as a string key) to the ids it receives models from.
    pub neighbors: BTreeMap<usize, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkDoc {
    pub pair: [usize; 2],
    pub kind: LinkKind,
}

/// JSON form of a [`Topology`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDoc {
    pub clusters: Vec<ClusterDoc>,
    #[serde(default = "default_link")]
    pub default_link: LinkKind,
    /// Per-pair overrides of `default_link`, applied in both directions.
    #[serde(default)]
    pub links: Vec<LinkDoc>,
}

fn default_link() -> LinkKind {
    LinkKind::Sidelink
}

/// Validated cluster layout. Every device sits in exactly one cluster and
/// each cluster's neighbour graph is strongly connected.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    doc: TopologyDoc,
    clusters: BTreeMap<usize, Vec<usize>>,
    neighbors: BTreeMap<usize, Vec<usize>>,
    task_of: BTreeMap<usize, usize>,
    links: BTreeMap<(usize, usize), LinkKind>,
}

impl Topology {
    pub fn new(doc: TopologyDoc) -> Result<Self> {
        let mut clusters = BTreeMap::new();
        let mut neighbors = BTreeMap::new();
        let mut task_of = BTreeMap::new();
        for (ci, c) in doc.clusters.iter().enumerate() {
            let path = format!("clusters[{ci}]");
            if c.devices.is_empty() {
                return Err(Error::config(path, "cluster has no devices"));
            }
            if clusters.insert(c.task, c.devices.clone()).is_some() {
                return Err(Error::config(path, format!("task {} has two clusters", c.task)));
            }
            let members: BTreeSet<usize> = c.devices.iter().copied().collect();
            if members.len() != c.devices.len() {
                return Err(Error::config(path, "duplicate device id"));
            }
            for &k in &c.devices {
                if task_of.insert(k, c.task).is_some() {
                    return Err(Error::config(path, format!("device {k} belongs to two clusters")));
                }
                let ns = c.neighbors.get(&k).cloned().unwrap_or_default();
                if ns.is_empty() {
                    return Err(Error::IsolatedDevice(k));
                }
                let uniq: BTreeSet<usize> = ns.iter().copied().collect();
                if uniq.len() != ns.len() || ns.iter().any(|h| *h == k || !members.contains(h)) {
                    return Err(Error::config(
                        format!("{path}.neighbors.{k}"),
                        "neighbours must be distinct members of the cluster other than the device",
                    ));
                }
                neighbors.insert(k, ns);
            }
            if let Some(k) = c.neighbors.keys().find(|k| !members.contains(k)) {
                return Err(Error::config(
                    format!("{path}.neighbors"),
                    format!("device {k} is not in the cluster"),
                ));
            }
            if !strongly_connected(&c.devices, &neighbors) {
                return Err(Error::config(path, "neighbour graph is not strongly connected"));
            }
        }
        if clusters.is_empty() {
            return Err(Error::config("clusters", "at least one cluster is required"));
        }
        let mut links = BTreeMap::new();
        for (k, ns) in &neighbors {
            for &h in ns {
                links.insert((h, *k), doc.default_link);
            }
        }
        for (i, l) in doc.links.iter().enumerate() {
            let [a, b] = l.pair;
            let known = [(a, b), (b, a)].iter().any(|p| links.contains_key(p));
            if !known {
                return Err(Error::config(
                    format!("links[{i}]"),
                    format!("devices {a} and {b} are not neighbours"),
                ));
            }
            for p in [(a, b), (b, a)] {
                if let Some(kind) = links.get_mut(&p) {
                    *kind = l.kind;
                }
            }
        }
        Ok(Topology {
            doc,
            clusters,
            neighbors,
            task_of,
            links,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn doc(&self) -> &TopologyDoc {
        &self.doc
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.clusters.keys().copied()
    }

    pub fn cluster(&self, task: usize) -> Result<&[usize]> {
        self.clusters
            .get(&task)
            .map(Vec::as_slice)
            .ok_or(Error::MissingTask(task))
    }

    pub fn neighbors(&self, device: usize) -> &[usize] {
        self.neighbors.get(&device).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn task_of(&self, device: usize) -> Option<usize> {
        self.task_of.get(&device).copied()
    }

    /// Link carrying the model of `from` to `to`.
    pub fn link(&self, from: usize, to: usize) -> Option<LinkKind> {
        self.links.get(&(from, to)).copied()
    }

    /// Total device count `K`.
    pub fn device_count(&self) -> usize {
        self.task_of.len()
    }

    pub fn devices(&self) -> impl Iterator<Item = usize> + '_ {
        self.task_of.keys().copied()
    }

    /// Named built-in layouts with one cluster per task `1..=tasks`:
    /// `pairs` and `pairs-fallback` (2 devices), `triads` (3, complete) and
    /// `chains` (4, path graph).
    pub fn builtin(name: &str, tasks: usize) -> Result<Self> {
        let (size, link) = match name {
            "pairs" => (2, LinkKind::Sidelink),
            "pairs-fallback" => (2, LinkKind::Fallback),
            "triads" => (3, LinkKind::Sidelink),
            "chains" => (4, LinkKind::Sidelink),
            _ => return Err(Error::UnknownBuiltin(name.into())),
        };
        let clusters = (0..tasks)
            .map(|t| {
                let devices: Vec<usize> = (1..=size).map(|j| t * size + j).collect();
                let neighbors = devices
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let ns = devices
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| if name == "chains" { i.abs_diff(j) == 1 } else { i != j })
                            .map(|(_, &h)| h)
                            .collect();
                        (k, ns)
                    })
                    .collect();
                ClusterDoc {
                    task: t + 1,
                    devices,
                    neighbors,
                }
            })
            .collect();
        Self::new(TopologyDoc {
            clusters,
            default_link: link,
            links: Vec::new(),
        })
    }

    pub const BUILTINS: [&'static str; 4] = ["pairs", "pairs-fallback", "triads", "chains"];
}

fn strongly_connected(devices: &[usize], neighbors: &BTreeMap<usize, Vec<usize>>) -> bool {
    let reach = |forward: bool| {
        let mut seen = BTreeSet::from([devices[0]]);
        let mut stack = vec![devices[0]];
        while let Some(k) = stack.pop() {
            for &d in devices {
                let edge = if forward {
                    neighbors[&d].contains(&k)
                } else {
                    neighbors[&k].contains(&d)
                };
                if edge && seen.insert(d) {
                    stack.push(d);
                }
            }
        }
        seen.len() == devices.len()
    };
    reach(true) && reach(false)
}

/// One device's learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState<T> {
    pub device_id: usize,
    pub params: ParamVector<T>,
    /// Transitions currently held in the replay buffer.
    pub dataset_size: usize,
    pub target: TargetNetwork<T>,
    pub replay: VecDeque<ExperienceBatch<T>>,
    /// Local gradient batches since the last target snapshot.
    pub since_sync: usize,
    /// FL rounds this device has completed.
    pub rounds: usize,
    /// Root of this device's random streams.
    pub seed: u64,
}

impl<T: Scalar> DeviceState<T> {
    pub fn new(device_id: usize, params: ParamVector<T>, target_sync: usize, seed: u64) -> Self {
        let target = sync_target(&params, target_sync);
        DeviceState {
            device_id,
            params,
            dataset_size: 0,
            target,
            replay: VecDeque::new(),
            since_sync: 0,
            rounds: 0,
            seed,
        }
    }

    fn remember(&mut self, batch: ExperienceBatch<T>, capacity: usize) {
        self.replay.push_back(batch);
        while self.replay.len() > capacity {
            self.replay.pop_front();
        }
        self.dataset_size = self.replay.iter().map(ExperienceBatch::len).sum();
    }

    fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Transition<T>> {
        (0..n)
            .map(|_| {
                let mut i = rng.random_range(0..self.dataset_size);
                for b in &self.replay {
                    if i < b.len() {
                        return b.transitions[i].clone();
                    }
                    i -= b.len();
                }
                unreachable!("index below dataset size")
            })
            .collect()
    }
}

/// Normalized data-size weights over `neighbors`.
pub fn mixing_weights(device: usize, neighbors: &[(usize, usize)]) -> Result<BTreeMap<usize, f64>> {
    if neighbors.is_empty() {
        return Err(Error::IsolatedDevice(device));
    }
    if let Some(&(h, _)) = neighbors.iter().find(|&&(_, n)| n == 0) {
        return Err(Error::EmptyData(format!(
            "neighbour {h} of device {device} holds no data"
        )));
    }
    let total: usize = neighbors.iter().map(|&(_, n)| n).sum();
    Ok(neighbors.iter().map(|&(h, n)| (h, n as f64 / total as f64)).collect())
}

/// A model sent from one device to another during consensus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMessage {
    pub from: usize,
    pub to: usize,
    pub bytes: u64,
    pub link: LinkKind,
}

/// Synchronous damped consensus over `states`, which must all belong to one
/// cluster of `topo`. Reads only pre-step parameters.
pub fn consensus_step<T: Scalar>(
    states: &[DeviceState<T>],
    topo: &Topology,
    damping: f64,
) -> Result<(Vec<DeviceState<T>>, Vec<ModelMessage>)> {
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::config("fl.damping", "must lie in (0, 1]"));
    }
    let by_id: BTreeMap<usize, &DeviceState<T>> = states.iter().map(|s| (s.device_id, s)).collect();
    let eps = T::lit(damping);
    let mut next = Vec::with_capacity(states.len());
    let mut messages = Vec::new();
    for s in states {
        let ns = topo.neighbors(s.device_id);
        let sizes =
            ns.iter()
                .map(|h| {
                    by_id.get(h).map(|n| (*h, n.dataset_size)).ok_or_else(|| {
                        Error::config("states", format!("neighbour {h} of device {} missing", s.device_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
        let sigma = mixing_weights(s.device_id, &sizes)?;
        let mut values = s.params.values().to_vec();
        for (&h, &w) in &sigma {
            let other = &by_id[&h].params;
            s.params.ensure_same_layout(other)?;
            let c = eps * T::lit(w);
            for ((v, &mine), &theirs) in values.iter_mut().zip(s.params.values()).zip(other.values()) {
                *v = *v + c * (theirs - mine);
            }
            messages.push(ModelMessage {
                from: h,
                to: s.device_id,
                bytes: other.byte_size(),
                link: topo.link(h, s.device_id).expect("neighbour pairs have links"),
            });
        }
        let mut updated = s.clone();
        updated.params = s.params.like(values)?;
        next.push(updated);
    }
    Ok((next, messages))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    /// Consensus damping `eps` in (0, 1].
    #[serde(default = "default_damping")]
    pub damping: f64,
    /// Local gradient batches per device per round.
    #[serde(default = "default_local_batches")]
    pub local_batches: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_local_lr")]
    pub local_lr: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Episodes kept per device.
    #[serde(default = "default_replay")]
    pub replay_capacity: usize,
    /// Local gradient batches between target snapshots.
    #[serde(default = "default_target_sync")]
    pub target_sync: usize,
    /// Absolute running-reward threshold; overrides `threshold_fraction`.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Fraction of the best achievable running reward used as threshold.
    #[serde(default = "default_fraction")]
    pub threshold_fraction: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
}

fn default_damping() -> f64 {
    0.5
}
fn default_local_batches() -> usize {
    20
}
fn default_batch_size() -> usize {
    16
}
fn default_local_lr() -> f64 {
    0.01
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_replay() -> usize {
    40
}
fn default_target_sync() -> usize {
    10
}
fn default_fraction() -> f64 {
    0.8
}
fn default_max_rounds() -> usize {
    200
}

impl Default for FlConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: &str| Err(Error::config(format!("fl.{f}"), r));
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return err("damping", "must lie in (0, 1]");
        }
        if self.local_batches == 0 || self.batch_size == 0 {
            return err("local_batches", "batch counts and sizes must be at least 1");
        }
        if !(self.local_lr >= 0.0 && self.local_lr.is_finite()) {
            return err("local_lr", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return err("epsilon", "must lie in [0, 1]");
        }
        if self.replay_capacity == 0 || self.target_sync == 0 {
            return err("replay_capacity", "replay capacity and target sync must be at least 1");
        }
        if matches!(self.threshold, Some(r) if !r.is_finite()) {
            return err("threshold", "must be finite");
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return err("threshold_fraction", "must lie in (0, 1]");
        }
        if self.max_rounds == 0 {
            return err("max_rounds", "must be at least 1");
        }
        Ok(())
    }

    /// Stopping threshold for `task`.
    pub fn threshold_for<T: Scalar>(&self, env: &TaskEnv<'_, T>) -> T {
        match self.threshold {
            Some(r) => T::lit(r),
            None => T::lit(self.threshold_fraction) * max_running_reward(env.grid, env.task, env.steps, env.nu),
        }
    }
}

/// What one cluster adapts to.
#[derive(Debug, Clone, Copy)]
pub struct TaskEnv<'a, T> {
    pub grid: &'a GridWorld,
    pub task: &'a TaskSpec<T>,
    /// Motions per episode, for both collection and evaluation.
    pub steps: usize,
    pub nu: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics<T> {
    pub round: usize,
    /// Local gradient batches per device.
    pub gradients: BTreeMap<usize, u64>,
    pub messages: Vec<ModelMessage>,
    /// Greedy running reward per device after consensus.
    pub rewards: BTreeMap<usize, T>,
    pub mean_reward: T,
}

fn evaluate<T: Scalar>(states: &[DeviceState<T>], env: &TaskEnv<'_, T>) -> Result<(BTreeMap<usize, T>, T)> {
    let rewards = states
        .iter()
        .map(|s| {
            Ok((
                s.device_id,
                greedy_running_reward(env.grid, env.task, &s.params, env.steps, env.nu)?,
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mean = rewards.values().copied().sum::<T>() / T::count(rewards.len() as u64);
    Ok((rewards, mean))
}

fn local_update<T: Scalar>(s: &DeviceState<T>, env: &TaskEnv<'_, T>, cfg: &FlConfig) -> Result<DeviceState<T>> {
    let mut s = s.clone();
    let ep_seed = seed::derive_path(s.seed, &[seed::TAG_EPISODE, s.rounds as u64]);
    let mut batch = collect_episode(env.grid, env.task, Some(&s.params), cfg.epsilon, env.steps, ep_seed)?;
    batch.device_id = s.device_id;
    s.remember(batch, cfg.replay_capacity);
    let mut rng = seed::rng(seed::derive_path(s.seed, &[seed::TAG_SAMPLE, s.rounds as u64]));
    let lr = T::lit(cfg.local_lr);
    for _ in 0..cfg.local_batches {
        let sample = s.sample(cfg.batch_size, &mut rng);
        let g = dql_grad(&s.params, &s.target, env.grid, &sample, env.nu)?;
        s.params = sgd_step(&s.params, &g, lr)?;
        s.since_sync += 1;
        if s.since_sync == cfg.target_sync {
            s.target.sync(&s.params);
            s.since_sync = 0;
        }
    }
    s.rounds += 1;
    Ok(s)
}

/// One FL round for a whole cluster.
pub fn fl_round<T: Scalar>(
    states: &[DeviceState<T>],
    topo: &Topology,
    env: &TaskEnv<'_, T>,
    cfg: &FlConfig,
) -> Result<(Vec<DeviceState<T>>, RoundMetrics<T>)> {
    let local = states
        .iter()
        .map(|s| local_update(s, env, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (next, messages) = consensus_step(&local, topo, cfg.damping)?;
    let (rewards, mean_reward) = evaluate(&next, env)?;
    let metrics = RoundMetrics {
        round: next.first().map_or(0, |s| s.rounds),
        gradients: next.iter().map(|s| (s.device_id, cfg.local_batches as u64)).collect(),
        messages,
        rewards,
        mean_reward,
    };
    Ok((next, metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adaptation<T> {
    /// Rounds run: the first round after which the threshold held, or
    /// `max_rounds` without convergence.
    pub rounds: usize,
    pub converged: bool,
    pub threshold: T,
    /// Cluster-mean greedy running reward before round 1 and after each round.
    pub curve: Vec<T>,
    pub metrics: Vec<RoundMetrics<T>>,
    pub states: Vec<DeviceState<T>>,
}

/// Repeats [`fl_round`] until the cluster-mean greedy running reward reaches
/// `threshold` or `max_rounds` rounds have run.
pub fn adapt_until<T: Scalar>(
    states: Vec<DeviceState<T>>,
    topo: &Topology,
    env: &TaskEnv<'_, T>,
    cfg: &FlConfig,
    threshold: T,
    max_rounds: usize,
) -> Result<Adaptation<T>> {
    if max_rounds == 0 {
        return Err(Error::config("fl.max_rounds", "must be at least 1"));
    }
    let (_, start) = evaluate(&states, env)?;
    let mut out = Adaptation {
        rounds: 0,
        converged: start >= threshold,
        threshold,
        curve: vec![start],
        metrics: Vec::new(),
        states,
    };
    while !out.converged && out.rounds < max_rounds {
        let (next, m) = fl_round(&out.states, topo, env, cfg)?;
        out.rounds += 1;
        out.converged = m.mean_reward >= threshold;
        out.curve.push(m.mean_reward);
        out.metrics.push(m);
        out.states = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{builtin_tasks, TaskSet};
    use crate::qlearn::{Layout, QNetConfig};
    use approx::assert_relative_eq;

    fn device(id: usize, values: Vec<f64>, size: usize) -> DeviceState<f64> {
        // A [1, 1] layer holds exactly two values.
        let l = Layout::from_widths(&[1, 1]).unwrap();
        let p = ParamVector::new(values, l, 100).unwrap();
        let mut s = DeviceState::new(id, p, 10, id as u64);
        s.dataset_size = size;
        s
    }

    #[test]
    fn mixing_weight_examples() {
        assert_eq!(mixing_weights(1, &[(2, 7)]).unwrap()[&2], 1.0);
        let w = mixing_weights(1, &[(2, 3), (3, 1)]).unwrap();
        assert_eq!((w[&2], w[&3]), (0.75, 0.25));
        let w = mixing_weights(1, &[(2, 5), (3, 5), (4, 5), (5, 5)]).unwrap();
        assert!(w.values().all(|&v| v == 0.25));
        assert!(matches!(mixing_weights(9, &[]), Err(Error::IsolatedDevice(9))));
    }

    fn pair_topology() -> Topology {
        Topology::builtin("pairs", 1).unwrap()
    }

    #[test]
    fn pair_consensus_examples() {
        let topo = pair_topology();
        let states = vec![device(1, vec![0.0, 2.0], 4), device(2, vec![4.0, 6.0], 4)];
        let (avg, msgs) = consensus_step(&states, &topo, 0.5).unwrap();
        assert_eq!(avg[0].params.values(), &[2.0, 4.0]);
        assert_eq!(avg[1].params.values(), &[2.0, 4.0]);
        assert_eq!(msgs.len(), 2);
        assert!(msgs.iter().all(|m| m.bytes == 100 && m.link == LinkKind::Sidelink));
        let (swap, _) = consensus_step(&states, &topo, 1.0).unwrap();
        assert_eq!(swap[0].params.values(), &[4.0, 6.0]);
        assert_eq!(swap[1].params.values(), &[0.0, 2.0]);
        let (same, _) = consensus_step(&avg, &topo, 0.5).unwrap();
        assert_eq!(same, avg);
        assert!(consensus_step(&states, &topo, 0.0).is_err());
    }

    #[test]
    fn pair_disagreement_contracts_geometrically() {
        let topo = pair_topology();
        for eps in [0.1, 0.3, 0.7, 0.9] {
            let states = vec![device(1, vec![0.0, 2.0], 4), device(2, vec![4.0, 6.0], 4)];
            let gap = |s: &[DeviceState<f64>]| s[0].params.axpy(-1.0, &s[1].params).unwrap().norm();
            let (next, _) = consensus_step(&states, &topo, eps).unwrap();
            assert_relative_eq!(
                gap(&next),
                (1.0f64 - 2.0 * eps).abs() * gap(&states),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn rejects_mixed_layouts() {
        let topo = pair_topology();
        let l = Layout::from_widths(&[2, 1]).unwrap();
        let mut other = device(2, vec![0.0, 0.0], 1);
        other.params = ParamVector::new(vec![0.0; 3], l, 100).unwrap();
        assert!(consensus_step(&[device(1, vec![1.0, 1.0], 1), other], &topo, 0.5).is_err());
    }

    #[test]
    fn topology_validation() {
        let doc = |neighbors: Vec<(usize, Vec<usize>)>| TopologyDoc {
            clusters: vec![ClusterDoc {
                task: 1,
                devices: vec![1, 2, 3],
                neighbors: neighbors.into_iter().collect(),
            }],
            default_link: LinkKind::Sidelink,
            links: vec![],
        };
        // Directed ring is strongly connected.
        assert!(Topology::new(doc(vec![(1, vec![3]), (2, vec![1]), (3, vec![2])])).is_ok());
        // 3 hears 2 but nobody hears 3.
        assert!(Topology::new(doc(vec![(1, vec![2]), (2, vec![1]), (3, vec![2])])).is_err());
        assert!(matches!(
            Topology::new(doc(vec![(1, vec![2]), (2, vec![1])])),
            Err(Error::IsolatedDevice(3))
        ));
        assert!(Topology::new(doc(vec![(1, vec![1, 2]), (2, vec![3]), (3, vec![1])])).is_err());
        assert!(Topology::new(doc(vec![(1, vec![4]), (2, vec![1]), (3, vec![2])])).is_err());
        let mut two = doc(vec![(1, vec![3]), (2, vec![1]), (3, vec![2])]);
        two.clusters.push(ClusterDoc {
            task: 2,
            devices: vec![3, 4],
            neighbors: [(3, vec![4]), (4, vec![3])].into_iter().collect(),
        });
        assert!(Topology::new(two).is_err());
    }

    #[test]
    fn topology_json_and_link_overrides() {
        let text = r#"{
            "clusters": [{"task": 1, "devices": [1, 2], "neighbors": {"1": [2], "2": [1]}}],
            "links": [{"pair": [2, 1], "kind": "UL+DL"}]
        }"#;
        let t = Topology::from_json(text).unwrap();
        assert_eq!(t.link(1, 2), Some(LinkKind::Fallback));
        assert_eq!(t.link(2, 1), Some(LinkKind::Fallback));
        assert_eq!(t.device_count(), 2);
        assert_eq!(t.task_of(2), Some(1));
    }

    #[test]
    fn builtins_have_expected_shape() {
        for name in Topology::BUILTINS {
            let t = Topology::builtin(name, 6).unwrap();
            assert_eq!(t.tasks().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
            let ids: Vec<usize> = t.devices().collect();
            assert_eq!(ids, (1..=t.device_count()).collect::<Vec<_>>());
        }
        assert_eq!(Topology::builtin("pairs", 6).unwrap().device_count(), 12);
        assert_eq!(Topology::builtin("chains", 6).unwrap().neighbors(5), &[6]);
        assert!(Topology::builtin("mesh", 6).is_err());
    }

    fn cluster_env() -> (TaskSet<f64>, Topology) {
        (
            TaskSet::from_doc(&builtin_tasks()).unwrap(),
            Topology::builtin("pairs", 6).unwrap(),
        )
    }

    fn fresh_cluster(task: usize, topo: &Topology, init: Option<&ParamVector<f64>>) -> Vec<DeviceState<f64>> {
        let cfg = QNetConfig::new(vec![40, 8, 4], 0);
        topo.cluster(task)
            .unwrap()
            .iter()
            .map(|&k| {
                let p = init.cloned().unwrap_or_else(|| cfg.init_with_seed(k as u64));
                DeviceState::new(k, p, 10, 1000 + k as u64)
            })
            .collect()
    }

    #[test]
    fn fl_round_ledger_counts() {
        let (tasks, topo) = cluster_env();
        let env = TaskEnv {
            grid: &tasks.grid,
            task: tasks.task(3).unwrap(),
            steps: 20,
            nu: 0.9,
        };
        let cfg = FlConfig {
            local_lr: 1e-4,
            ..FlConfig::default()
        };
        let (next, m) = fl_round(&fresh_cluster(3, &topo, None), &topo, &env, &cfg).unwrap();
        assert_eq!(m.gradients.values().copied().collect::<Vec<_>>(), vec![20, 20]);
        assert_eq!(m.messages.len(), 2);
        assert!(next.iter().all(|s| s.dataset_size == 20 && s.rounds == 1));
    }

    #[test]
    fn zero_rate_identical_init_is_a_fixed_point() {
        let (tasks, topo) = cluster_env();
        let env = TaskEnv {
            grid: &tasks.grid,
            task: tasks.task(1).unwrap(),
            steps: 20,
            nu: 0.9,
        };
        let init = QNetConfig::new(vec![40, 8, 4], 3).init::<f64>();
        let states = fresh_cluster(1, &topo, Some(&init));
        let cfg = FlConfig {
            local_lr: 0.0,
            ..FlConfig::default()
        };
        let (next, _) = fl_round(&states, &topo, &env, &cfg).unwrap();
        assert!(next.iter().all(|s| s.params == init));
    }

    #[test]
    fn adapt_until_edge_cases() {
        let (tasks, topo) = cluster_env();
        let env = TaskEnv {
            grid: &tasks.grid,
            task: tasks.task(4).unwrap(),
            steps: 20,
            nu: 0.9,
        };
        let cfg = FlConfig {
            local_lr: 1e-4,
            ..FlConfig::default()
        };
        let met = adapt_until(fresh_cluster(4, &topo, None), &topo, &env, &cfg, f64::NEG_INFINITY, 5).unwrap();
        assert_eq!((met.rounds, met.converged, met.curve.len()), (0, true, 1));
        let capped = adapt_until(fresh_cluster(4, &topo, None), &topo, &env, &cfg, 1e9, 5).unwrap();
        assert_eq!((capped.rounds, capped.converged, capped.curve.len()), (5, false, 6));
        let again = adapt_until(fresh_cluster(4, &topo, None), &topo, &env, &cfg, 1e9, 5).unwrap();
        assert_eq!(capped, again);
    }

    fn disagreement(states: &[DeviceState<f64>]) -> f64 {
        states
            .iter()
            .map(|s| s.params.axpy(-1.0, &states[0].params).unwrap().norm())
            .fold(0.0, f64::max)
    }

    proptest::proptest! {
        #[test]
        fn frozen_models_reach_agreement(
            seed in 0u64..500,
            sizes in proptest::collection::vec(10usize..=40, 24),
            builtin in 0usize..4,
        ) {
            let topo = Topology::builtin(Topology::BUILTINS[builtin], 6).unwrap();
            let cfg = QNetConfig::new(vec![40, 3, 4], seed);
            for task in 1..=6 {
                let mut states: Vec<DeviceState<f64>> = topo
                    .cluster(task)
                    .unwrap()
                    .iter()
                    .map(|&k| {
                        let mut s = DeviceState::new(k, cfg.init_with_seed(seed + k as u64), 10, 0);
                        s.dataset_size = sizes[k - 1];
                        s
                    })
                    .collect();
                for _ in 0..200 {
                    states = consensus_step(&states, &topo, 0.5).unwrap().0;
                }
                proptest::prop_assert!(disagreement(&states) < 1e-9, "{} task {task}: {}", Topology::BUILTINS[builtin], disagreement(&states));
            }
        }
    }
}
