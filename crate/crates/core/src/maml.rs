//! Meta-optimization of a shared Q-network initialization.
//!
//! Each round adapts the meta-parameters once per training task on one half
//! of fresh data, then moves them along the summed gradient of the adapted
//! losses on the other half:
//!
//! ```text
//! phi_i   = W - mu * sum_k grad L_k(W | a)
//! W'      = W - eta * sum_i J_i^T sum_k grad L_k(phi_i | b)
//! J_i     = I - mu * H_i(W)          (full mode)
//! J_i     = I                        (first order)
//! ```
//!
//! The Hessian never materializes; full mode uses one Hessian-vector product
//! per contributing device.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{ExperienceBatch, GridWorld, Transition};
use crate::error::{Error, Result};
use crate::qlearn::{sync_target, DqlObjective, ParamVector, TargetNetwork};
use crate::scalar::Scalar;
use crate::seed;

/// A twice-differentiable loss over a flat parameter slice.
pub trait Objective<T> {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[T]) -> T;
    fn gradient(&self, w: &[T]) -> Vec<T>;
    fn hessian_vector(&self, w: &[T], v: &[T]) -> Vec<T>;
}

/// `0.5 * w'Aw - b'w` with symmetric `A` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic<T> {
    n: usize,
    a: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> Quadratic<T> {
    pub fn new(a: Vec<T>, b: Vec<T>) -> Result<Self> {
        let n = b.len();
        if a.len() != n * n {
            return Err(Error::Layout(format!("{} matrix entries for dimension {n}", a.len())));
        }
        for i in 0..n {
            for j in 0..i {
                if a[i * n + j] != a[j * n + i] {
                    return Err(Error::config("a", "matrix must be symmetric"));
                }
            }
        }
        Ok(Quadratic { n, a, b })
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * v[j]).sum())
            .collect()
    }
}

impl<T: Scalar> Objective<T> for Quadratic<T> {
    fn dim(&self) -> usize {
        self.n
    }

    fn loss(&self, w: &[T]) -> T {
        let aw = self.apply(w);
        let quad: T = w.iter().zip(&aw).map(|(&x, &y)| x * y).sum();
        let lin: T = w.iter().zip(&self.b).map(|(&x, &y)| x * y).sum();
        T::lit(0.5) * quad - lin
    }

    fn gradient(&self, w: &[T]) -> Vec<T> {
        self.apply(w).into_iter().zip(&self.b).map(|(x, &b)| x - b).collect()
    }

    fn hessian_vector(&self, _w: &[T], v: &[T]) -> Vec<T> {
        self.apply(v)
    }
}

fn summed_gradient<T: Scalar, O: Objective<T>>(objs: &[O], w: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); w.len()];
    for o in objs {
        for (acc, v) in g.iter_mut().zip(o.gradient(w)) {
            *acc = *acc + v;
        }
    }
    g
}

fn step<T: Scalar>(w: &[T], g: &[T], lr: T) -> Vec<T> {
    w.iter().zip(g).map(|(&x, &d)| x - lr * d).collect()
}

/// `steps` summed-gradient descent steps from `w`.
pub fn adapt<T: Scalar, O: Objective<T>>(w: &[T], inner: &[O], mu: T, steps: usize) -> Result<Vec<T>> {
    if inner.is_empty() {
        return Err(Error::EmptyData("inner adaptation data".into()));
    }
    let mut phi = w.to_vec();
    for _ in 0..steps {
        phi = step(&phi, &summed_gradient(inner, &phi), mu);
    }
    Ok(phi)
}

/// Gradient of `W -> sum_b L_b(phi(W))` where `phi` is one inner step on
/// `inner`; `first_order` drops the Jacobian of the inner step.
pub fn meta_gradient_of<T: Scalar, O: Objective<T>>(
    w: &[T],
    phi: &[T],
    inner: &[O],
    outer: &[O],
    mu: T,
    first_order: bool,
) -> Result<Vec<T>> {
    if w.len() != phi.len() {
        return Err(Error::Layout(format!(
            "{} meta values vs {} adapted",
            w.len(),
            phi.len()
        )));
    }
    if outer.is_empty() {
        return Err(Error::EmptyData("meta-update data".into()));
    }
    let g = summed_gradient(outer, phi);
    if first_order || mu == T::zero() {
        return Ok(g);
    }
    let mut out = g.clone();
    for o in inner {
        for (acc, hv) in out.iter_mut().zip(o.hessian_vector(w, &g)) {
            *acc = *acc - mu * hv;
        }
    }
    Ok(out)
}

/// One meta-step over several tasks, each given as `(inner, outer)`.
pub fn meta_step<T: Scalar, O: Objective<T>>(
    w: &[T],
    tasks: &[(Vec<O>, Vec<O>)],
    mu: T,
    eta: T,
    first_order: bool,
) -> Result<Vec<T>> {
    let mut total = vec![T::zero(); w.len()];
    for (inner, outer) in tasks {
        let phi = adapt(w, inner, mu, 1)?;
        let g = meta_gradient_of(w, &phi, inner, outer, mu, first_order)?;
        for (acc, v) in total.iter_mut().zip(g) {
            *acc = *acc + v;
        }
    }
    Ok(step(w, &total, eta))
}

/// Summed post-adaptation loss `sum_i sum_b L_b(phi_i(W))`.
pub fn meta_loss<T: Scalar, O: Objective<T>>(w: &[T], tasks: &[(Vec<O>, Vec<O>)], mu: T) -> Result<T> {
    let mut total = T::zero();
    for (inner, outer) in tasks {
        let phi = adapt(w, inner, mu, 1)?;
        total = total + outer.iter().map(|o| o.loss(&phi)).sum::<T>();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub rounds: usize,
    pub training_tasks: Vec<usize>,
    pub split_ratio: f64,
    pub first_order: bool,
    pub batches_a: usize,
    pub batches_b: usize,
    /// Compute premium of one meta-gradient batch; 1 in first-order mode and
    /// 3 in full mode when unset.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "one")]
    pub inner_steps: usize,
    /// Meta-rounds between target snapshots.
    #[serde(default = "one")]
    pub target_sync: usize,
    /// Devices per training task that collect fresh data each round.
    #[serde(default = "one")]
    pub collectors_per_task: usize,
    /// Exploration rate while collecting meta-training data. Defaults to
    /// uniform random actions; `null` falls back to the episode default.
    #[serde(default = "explore")]
    pub epsilon: Option<f64>,
}

fn one() -> usize {
    1
}

fn explore() -> Option<f64> {
    Some(1.0)
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            inner_lr: 0.01,
            meta_lr: 0.01,
            rounds: 42,
            training_tasks: vec![1, 2, 6],
            split_ratio: 0.5,
            first_order: true,
            batches_a: 10,
            batches_b: 10,
            beta: None,
            inner_steps: 1,
            target_sync: 1,
            collectors_per_task: 1,
            epsilon: explore(),
        }
    }
}

impl MamlConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(if self.first_order { 1.0 } else { 3.0 })
    }

    pub fn validate(&self, task_count: usize) -> Result<()> {
        let err = |f: &str, r: &str| Err(Error::config(format!("maml.{f}"), r));
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return err("inner_lr", "must be finite and non-negative");
        }
        if !(self.meta_lr >= 0.0 && self.meta_lr.is_finite()) {
            return err("meta_lr", "must be finite and non-negative");
        }
        if self.training_tasks.is_empty() || self.training_tasks.len() > task_count {
            return err("training_tasks", "need between 1 and M training tasks");
        }
        let mut seen = self.training_tasks.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.training_tasks.len() {
            return err("training_tasks", "task ids must be distinct");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return err("split_ratio", "must lie strictly between 0 and 1");
        }
        if self.batches_a == 0 || self.batches_b == 0 {
            return err("batches_a", "batch counts must be at least 1");
        }
        if !(self.beta() >= 1.0) {
            return err("beta", "must be at least 1");
        }
        if self.inner_steps == 0 {
            return err("inner_steps", "must be at least 1");
        }
        if !self.first_order && self.inner_steps != 1 {
            return err("inner_steps", "full mode supports a single inner step");
        }
        if self.target_sync == 0 {
            return err("target_sync", "must be at least 1");
        }
        if self.collectors_per_task == 0 {
            return err("collectors_per_task", "must be at least 1");
        }
        if matches!(self.epsilon, Some(e) if !(0.0..=1.0).contains(&e)) {
            return err("epsilon", "must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Gradient batches computed at the data center.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientTally {
    pub inner: u64,
    pub outer: u64,
}

impl GradientTally {
    /// Batch-equivalents with meta-gradient batches weighted by `beta`.
    pub fn weighted(&self, beta: f64) -> f64 {
        self.inner as f64 + beta * self.outer as f64
    }

    pub fn add(&mut self, other: GradientTally) {
        self.inner += other.inner;
        self.outer += other.outer;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaState<T> {
    pub meta_params: ParamVector<T>,
    pub round: usize,
    pub adaptations: BTreeMap<usize, ParamVector<T>>,
    pub target: TargetNetwork<T>,
}

impl<T: Scalar> MetaState<T> {
    pub fn new(meta_params: ParamVector<T>, target_sync: usize) -> Self {
        let target = sync_target(&meta_params, target_sync);
        MetaState {
            meta_params,
            round: 0,
            adaptations: BTreeMap::new(),
            target,
        }
    }
}

/// Seeded disjoint partition; `part_a` takes `round(ratio * n)` transitions.
/// Both parts keep the original temporal order.
pub fn split_data<T: Scalar>(
    batch: &ExperienceBatch<T>,
    ratio: f64,
    seed: u64,
) -> Result<(ExperienceBatch<T>, ExperienceBatch<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyData("batch to split".into()));
    }
    let n = batch.len();
    let na = (ratio * n as f64).round() as usize;
    if !(ratio > 0.0 && ratio < 1.0) || na == 0 || na == n {
        return Err(Error::config(
            "maml.split_ratio",
            format!("ratio {ratio} leaves an empty part of a {n}-transition batch"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let (a, b) = idx.split_at_mut(na);
    a.sort_unstable();
    b.sort_unstable();
    let pick = |ids: &[usize]| ExperienceBatch {
        transitions: ids.iter().map(|&i| batch.transitions[i].clone()).collect(),
        ..batch.clone()
    };
    Ok((pick(a), pick(b)))
}

/// Cuts `items` into `parts` contiguous, near-equal, non-empty chunks.
pub(crate) fn chunk<X>(items: &[X], parts: usize) -> Result<Vec<&[X]>> {
    if parts == 0 || items.len() < parts {
        return Err(Error::config(
            "batches",
            format!("{} transitions cannot fill {parts} gradient batches", items.len()),
        ));
    }
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut off = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(&items[off..off + len]);
        off += len;
    }
    Ok(out)
}

fn objectives<T: Scalar>(
    target: &TargetNetwork<T>,
    grid: &GridWorld,
    batches: &[Vec<Transition<T>>],
    count: usize,
    nu: T,
) -> Result<Vec<DqlObjective<T>>> {
    let mut out = Vec::new();
    for b in batches {
        for c in chunk(b, count)? {
            out.push(DqlObjective::new(target, grid, c, nu)?);
        }
    }
    Ok(out)
}

/// Inner adaptation: one summed-gradient step over all device objectives.
pub fn inner_adapt<T: Scalar, O: Objective<T>>(meta: &ParamVector<T>, data_a: &[O], mu: T) -> Result<ParamVector<T>> {
    check_dims(meta, data_a)?;
    meta.like(adapt(meta.values(), data_a, mu, 1)?)
}

/// Meta-gradient for one task. `data_a` must be the objectives `phi` was
/// adapted on; it is only read in full mode.
pub fn meta_gradient<T: Scalar, O: Objective<T>>(
    meta: &ParamVector<T>,
    phi: &ParamVector<T>,
    data_a: &[O],
    data_b: &[O],
    mu: T,
    first_order: bool,
) -> Result<ParamVector<T>> {
    meta.ensure_same_layout(phi)?;
    check_dims(meta, data_b)?;
    if !first_order {
        check_dims(meta, data_a)?;
    }
    meta.like(meta_gradient_of(
        meta.values(),
        phi.values(),
        data_a,
        data_b,
        mu,
        first_order,
    )?)
}

fn check_dims<T: Scalar, O: Objective<T>>(p: &ParamVector<T>, objs: &[O]) -> Result<()> {
    match objs.iter().find(|o| o.dim() != p.len()) {
        Some(o) => Err(Error::Layout(format!(
            "objective over {} parameters, model has {}",
            o.dim(),
            p.len()
        ))),
        None => Ok(()),
    }
}

/// One meta-round. `fresh` maps each training task to the batches its
/// contributing devices collected this round.
pub fn maml_round<T: Scalar>(
    state: &MetaState<T>,
    fresh: &BTreeMap<usize, Vec<ExperienceBatch<T>>>,
    cfg: &MamlConfig,
    grid: &GridWorld,
    nu: T,
    split_seed: u64,
) -> Result<(MetaState<T>, GradientTally)> {
    for &task in &cfg.training_tasks {
        match fresh.get(&task) {
            Some(b) if !b.is_empty() => {}
            _ => return Err(Error::MissingTask(task)),
        }
    }
    if let Some(&extra) = fresh.keys().find(|t| !cfg.training_tasks.contains(t)) {
        return Err(Error::config(
            "maml.training_tasks",
            format!("data for task {extra} outside the training set"),
        ));
    }
    let mu = T::lit(cfg.inner_lr);
    let w = state.meta_params.values();
    let mut total = vec![T::zero(); w.len()];
    let mut tally = GradientTally::default();
    let mut adaptations = BTreeMap::new();
    for &task in &cfg.training_tasks {
        let mut parts_a = Vec::new();
        let mut parts_b = Vec::new();
        for b in &fresh[&task] {
            let s = seed::derive_path(split_seed, &[task as u64, b.device_id as u64]);
            let (a, bb) = split_data(b, cfg.split_ratio, s)?;
            parts_a.push(a.transitions);
            parts_b.push(bb.transitions);
        }
        let inner = objectives(&state.target, grid, &parts_a, cfg.batches_a, nu)?;
        let outer = objectives(&state.target, grid, &parts_b, cfg.batches_b, nu)?;
        let phi = adapt(w, &inner, mu, cfg.inner_steps)?;
        let g = meta_gradient_of(w, &phi, &inner, &outer, mu, cfg.first_order)?;
        for (acc, v) in total.iter_mut().zip(g) {
            *acc = *acc + v;
        }
        let devices = fresh[&task].len() as u64;
        tally.add(GradientTally {
            inner: devices * (cfg.batches_a * cfg.inner_steps) as u64,
            outer: devices * cfg.batches_b as u64,
        });
        adaptations.insert(task, state.meta_params.like(phi)?);
    }
    let meta_params = state.meta_params.like(step(w, &total, T::lit(cfg.meta_lr)))?;
    let round = state.round + 1;
    let mut target = state.target.clone();
    if round.is_multiple_of(cfg.target_sync) {
        target.sync(&meta_params);
    }
    Ok((
        MetaState {
            meta_params,
            round,
            adaptations,
            target,
        },
        tally,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{builtin_tasks, collect_episode, TaskSet};
    use crate::qlearn::{dql_grad, sgd_step, Layout, QNetConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn quad(a: [[f64; 2]; 2], b: [f64; 2]) -> Quadratic<f64> {
        Quadratic::new(vec![a[0][0], a[0][1], a[1][0], a[1][1]], b.to_vec()).unwrap()
    }

    fn episode(task: usize, device: usize, seed: u64) -> ExperienceBatch<f64> {
        let grid = GridWorld::desk();
        let tasks = TaskSet::<f64>::from_doc(&builtin_tasks()).unwrap();
        let mut b = collect_episode(&grid, tasks.task(task).unwrap(), None, 1.0, 20, seed).unwrap();
        b.device_id = device;
        b
    }

    #[test]
    fn split_partitions_deterministically() {
        let b = episode(1, 1, 3);
        let (a, c) = split_data(&b, 0.5, 11).unwrap();
        assert_eq!((a.len(), c.len()), (10, 10));
        assert_eq!(split_data(&b, 0.5, 11).unwrap(), (a.clone(), c.clone()));
        // Every transition lands in exactly one part. Episodes may repeat a
        // transition, so compare multiplicities.
        let mut all: Vec<String> = a
            .transitions
            .iter()
            .chain(&c.transitions)
            .map(|t| format!("{t:?}"))
            .collect();
        let mut orig: Vec<String> = b.transitions.iter().map(|t| format!("{t:?}")).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert!(split_data(&b, 0.01, 1).is_err());
        assert!(split_data(&b, 0.99, 1).is_err());
    }

    #[test]
    fn chunking_is_near_equal() {
        let v: Vec<u8> = (0..10).collect();
        let c = chunk(&v, 3).unwrap();
        assert_eq!(c.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(chunk(&v, 11).is_err());
    }

    #[test]
    fn inner_adapt_examples() {
        let l = Layout::from_widths(&[1, 1]).unwrap();
        let w = ParamVector::new(vec![1.0, 2.0], l, 1).unwrap();
        // Zero-gradient objective: A = 0, b = 0.
        let flat = Quadratic::new(vec![0.0; 4], vec![0.0; 2]).unwrap();
        assert_eq!(inner_adapt(&w, &[flat], 0.3).unwrap(), w);
        let g1 = quad([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]);
        let g2 = quad([[2.0, 0.0], [0.0, 0.0]], [1.0, 1.0]);
        let one = inner_adapt(&w, std::slice::from_ref(&g1), 0.1).unwrap();
        let grad = w.like(g1.gradient(w.values())).unwrap();
        assert_eq!(one, sgd_step(&w, &grad, 0.1).unwrap());
        let both = inner_adapt(&w, &[g1.clone(), g2.clone()], 0.1).unwrap();
        // g1 = [1, 2], g2 = [2 - 1, 0 - 1] = [1, -1]
        assert_relative_eq!(both.values()[0], 1.0 - 0.1 * 2.0);
        assert_relative_eq!(both.values()[1], 2.0 - 0.1 * 1.0);
        assert!(inner_adapt::<f64, Quadratic<f64>>(&w, &[], 0.1).is_err());
    }

    #[test]
    fn quadratic_full_mode_matches_closed_form() {
        // Same loss inside and out: phi = (I - mu A) w + mu b and the
        // meta-gradient is (I - mu A) (A phi - b).
        let (a, b, mu) = ([[2.0, 0.5], [0.5, 1.0]], [0.3, -0.7], 0.1);
        let q = quad(a, b);
        let w = [0.8, -1.2];
        let phi = adapt(&w, std::slice::from_ref(&q), mu, 1).unwrap();
        let g = meta_gradient_of(&w, &phi, std::slice::from_ref(&q), std::slice::from_ref(&q), mu, false).unwrap();
        let m = [[1.0 - mu * a[0][0], -mu * a[0][1]], [-mu * a[1][0], 1.0 - mu * a[1][1]]];
        let p = [
            m[0][0] * w[0] + m[0][1] * w[1] + mu * b[0],
            m[1][0] * w[0] + m[1][1] * w[1] + mu * b[1],
        ];
        let gp = [
            a[0][0] * p[0] + a[0][1] * p[1] - b[0],
            a[1][0] * p[0] + a[1][1] * p[1] - b[1],
        ];
        let expected = [m[0][0] * gp[0] + m[0][1] * gp[1], m[1][0] * gp[0] + m[1][1] * gp[1]];
        assert_relative_eq!(phi[0], p[0], max_relative = 1e-14);
        assert_relative_eq!(g[0], expected[0], max_relative = 1e-14);
        assert_relative_eq!(g[1], expected[1], max_relative = 1e-14);
    }

    #[test]
    fn zero_inner_rate_makes_modes_agree() {
        let q = quad([[2.0, 0.5], [0.5, 1.0]], [0.3, -0.7]);
        let r = quad([[1.0, -0.2], [-0.2, 3.0]], [1.0, 0.0]);
        let w = [0.4, 0.9];
        let phi = adapt(&w, std::slice::from_ref(&q), 0.0, 1).unwrap();
        let f = meta_gradient_of(&w, &phi, std::slice::from_ref(&q), std::slice::from_ref(&r), 0.0, true).unwrap();
        let full = meta_gradient_of(&w, &phi, &[q], &[r], 0.0, false).unwrap();
        assert_eq!(f, full);
    }

    #[test]
    fn full_mode_matches_composite_finite_differences() {
        let grid = GridWorld::desk();
        let tasks = TaskSet::<f64>::from_doc(&builtin_tasks()).unwrap();
        // 40 inputs are fixed by the grid; [40, 4] keeps the net at 164 params.
        let cfg = QNetConfig::new(vec![40, 4], 5);
        let w = cfg.init::<f64>();
        let tgt = sync_target(&cfg.init_with_seed::<f64>(6), 10);
        let ep = collect_episode(&grid, tasks.task(2).unwrap(), None, 1.0, 20, 8).unwrap();
        let (a, b) = split_data(&ep, 0.5, 1).unwrap();
        let inner = vec![DqlObjective::new(&tgt, &grid, &a.transitions, 0.9).unwrap()];
        let outer = vec![DqlObjective::new(&tgt, &grid, &b.transitions, 0.9).unwrap()];
        let mu = 0.05;
        let phi = adapt(w.values(), &inner, mu, 1).unwrap();
        let g = meta_gradient_of(w.values(), &phi, &inner, &outer, mu, false).unwrap();
        let composite = |x: &[f64]| {
            let p = adapt(x, &inner, mu, 1).unwrap();
            outer[0].loss(&p)
        };
        let h = 1e-5;
        let mut num = vec![0.0; g.len()];
        let mut x = w.values().to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = composite(&x);
            x[i] = orig - h;
            let dn = composite(&x);
            x[i] = orig;
            num[i] = (up - dn) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    fn round_inputs(first_order: bool) -> (MetaState<f64>, BTreeMap<usize, Vec<ExperienceBatch<f64>>>, MamlConfig) {
        let w = QNetConfig::new(vec![40, 8, 4], 2).init::<f64>();
        let cfg = MamlConfig {
            first_order,
            ..MamlConfig::default()
        };
        let fresh = cfg
            .training_tasks
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, vec![episode(t, i + 1, t as u64)]))
            .collect();
        (MetaState::new(w, 1), fresh, cfg)
    }

    #[test]
    fn zero_meta_rate_keeps_params_and_counts_round() {
        let (state, fresh, mut cfg) = round_inputs(true);
        cfg.meta_lr = 0.0;
        let (next, tally) = maml_round(&state, &fresh, &cfg, &GridWorld::desk(), 0.99, 4).unwrap();
        assert_eq!(next.meta_params, state.meta_params);
        assert_eq!(next.round, 1);
        assert_eq!(tally, GradientTally { inner: 30, outer: 30 });
        assert_eq!(tally.weighted(cfg.beta()), 60.0);
        assert_eq!(next.adaptations.len(), 3);
    }

    #[test]
    fn single_task_without_inner_step_is_plain_sgd() {
        let (state, mut fresh, mut cfg) = round_inputs(true);
        cfg.training_tasks = vec![2];
        cfg.inner_lr = 0.0;
        cfg.meta_lr = 0.02;
        fresh.retain(|&t, _| t == 2);
        let grid = GridWorld::desk();
        let (next, _) = maml_round(&state, &fresh, &cfg, &grid, 0.99, 4).unwrap();
        let b = &fresh[&2][0];
        let (_, part_b) = split_data(b, 0.5, seed::derive_path(4, &[2, b.device_id as u64])).unwrap();
        let g = dql_grad(&state.meta_params, &state.target, &grid, &part_b.transitions, 0.99).unwrap();
        let expected = sgd_step(&state.meta_params, &g, 0.02).unwrap();
        for (x, y) in next.meta_params.values().iter().zip(expected.values()) {
            assert_relative_eq!(*x, *y, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn round_rejects_missing_and_extra_tasks() {
        let (state, mut fresh, cfg) = round_inputs(true);
        let grid = GridWorld::desk();
        let mut extra = fresh.clone();
        extra.insert(4, vec![episode(4, 9, 1)]);
        assert!(matches!(
            maml_round(&state, &extra, &cfg, &grid, 0.99, 0),
            Err(Error::Config { .. })
        ));
        fresh.remove(&6);
        assert!(matches!(
            maml_round(&state, &fresh, &cfg, &grid, 0.99, 0),
            Err(Error::MissingTask(6))
        ));
    }

    #[test]
    fn rounds_are_deterministic_in_both_modes() {
        for fo in [true, false] {
            let (state, fresh, cfg) = round_inputs(fo);
            let grid = GridWorld::desk();
            let a = maml_round(&state, &fresh, &cfg, &grid, 0.99, 4).unwrap();
            let b = maml_round(&state, &fresh, &cfg, &grid, 0.99, 4).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = MamlConfig::default();
        assert!(c.validate(6).is_ok());
        assert_eq!(c.beta(), 1.0);
        c.first_order = false;
        assert_eq!(c.beta(), 3.0);
        c.inner_steps = 2;
        assert!(c.validate(6).is_err());
        let c = MamlConfig {
            split_ratio: 1.0,
            ..MamlConfig::default()
        };
        assert!(c.validate(6).is_err());
        let c = MamlConfig {
            training_tasks: vec![1, 1],
            ..MamlConfig::default()
        };
        assert!(c.validate(6).is_err());
    }

    fn spd(a: f64, b: f64, c: f64) -> Quadratic<f64> {
        // [[a, b], [b, c]] with a, c > |b| is positive definite.
        quad([[a, b], [b, c]], [a - c, b])
    }

    proptest! {
        #[test]
        fn quadratic_meta_descent_is_monotone(
            coeffs in proptest::collection::vec((1.0f64..3.0, -0.5f64..0.5, 1.0f64..3.0), 3),
            w0 in proptest::collection::vec(-2.0f64..2.0, 2),
        ) {
            let tasks: Vec<(Vec<Quadratic<f64>>, Vec<Quadratic<f64>>)> = coeffs
                .iter()
                .map(|&(a, b, c)| (vec![spd(a, b, c)], vec![spd(c, -b, a)]))
                .collect();
            let mut w = w0;
            let mut last = meta_loss(&w, &tasks, 0.1).unwrap();
            for _ in 0..20 {
                w = meta_step(&w, &tasks, 0.1, 1e-3, false).unwrap();
                let now = meta_loss(&w, &tasks, 0.1).unwrap();
                prop_assert!(now < last, "{now} !< {last}");
                last = now;
            }
        }
    }
}
