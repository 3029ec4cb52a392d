//! Squared Bellman error with a frozen target network.
//!
//! The per-transition loss is `(r + nu * max_y q_target(s', y) - q(s, a))^2`
//! where `a` is the action actually taken in the transition. The target
//! network's parameters are constants for every derivative taken here.

use serde::{Deserialize, Serialize};

use super::net::{self, OutputLoss};
use super::params::{Layout, ParamVector};
use crate::env::{argmax, GridWorld, Transition};
use crate::error::{Error, Result};
use crate::maml::Objective;
use crate::scalar::Scalar;

/// Frozen snapshot used for bootstrap targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetNetwork<T> {
    pub params: ParamVector<T>,
    /// Gradient batches between snapshots.
    pub sync_period: usize,
}

/// Snapshots `online`. Later updates to `online` do not reach the copy.
pub fn sync_target<T: Scalar>(online: &ParamVector<T>, sync_period: usize) -> TargetNetwork<T> {
    TargetNetwork {
        params: online.clone(),
        sync_period,
    }
}

impl<T: Scalar> TargetNetwork<T> {
    pub fn sync(&mut self, online: &ParamVector<T>) {
        self.params = online.clone();
    }

    /// `r + nu * max_y q_target(s', y)`, or `r` for terminal transitions.
    pub fn bellman_target(&self, grid: &GridWorld, tr: &Transition<T>, nu: T) -> Result<T> {
        if tr.terminal {
            return Ok(tr.reward);
        }
        let q = net::q_values(
            self.params.values(),
            self.params.layout(),
            grid.observation(tr.next_state).as_slice(),
        )?;
        Ok(tr.reward + nu * q[argmax(&q)])
    }
}

struct TemporalDifference<T> {
    action: usize,
    target: T,
}

impl<T: Scalar> OutputLoss<T> for TemporalDifference<T> {
    fn gradient(&self, output: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); output.len()];
        g[self.action] = T::lit(2.0) * (output[self.action] - self.target);
        g
    }

    fn curvature(&self, output: &[T], r_output: &[T]) -> Vec<T> {
        let mut c = vec![T::zero(); output.len()];
        c[self.action] = T::lit(2.0) * r_output[self.action];
        c
    }
}

/// Summed Bellman loss over a fixed set of transitions, with bootstrap
/// targets evaluated once from the target network.
#[derive(Debug, Clone)]
pub struct DqlObjective<T> {
    layout: Layout,
    inputs: Vec<usize>,
    obs_len: usize,
    actions: Vec<usize>,
    targets: Vec<T>,
}

impl<T: Scalar> DqlObjective<T> {
    pub fn new(target: &TargetNetwork<T>, grid: &GridWorld, batch: &[Transition<T>], nu: T) -> Result<Self> {
        let layout = target.params.layout().clone();
        if layout.input_width() != grid.landmarks() {
            return Err(Error::Layout(format!(
                "network input width {} for a {}-cell grid",
                layout.input_width(),
                grid.landmarks()
            )));
        }
        let targets = batch
            .iter()
            .map(|tr| target.bellman_target(grid, tr, nu))
            .collect::<Result<Vec<_>>>()?;
        Ok(DqlObjective {
            layout,
            inputs: batch.iter().map(|t| grid.index(t.state)).collect(),
            obs_len: grid.landmarks(),
            actions: batch.iter().map(|t| t.action.index()).collect(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn input(&self, i: usize) -> Vec<T> {
        let mut x = vec![T::zero(); self.obs_len];
        x[self.inputs[i]] = T::one();
        x
    }

    fn term(&self, i: usize) -> TemporalDifference<T> {
        TemporalDifference {
            action: self.actions[i],
            target: self.targets[i],
        }
    }
}

impl<T: Scalar> Objective<T> for DqlObjective<T> {
    fn dim(&self) -> usize {
        self.layout.param_count()
    }

    fn loss(&self, w: &[T]) -> T {
        (0..self.len())
            .map(|i| {
                let t = net::forward_trace(w, &self.layout, &self.input(i));
                let e = self.targets[i] - t.output()[self.actions[i]];
                e * e
            })
            .sum()
    }

    fn gradient(&self, w: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); w.len()];
        for i in 0..self.len() {
            let t = net::forward_trace(w, &self.layout, &self.input(i));
            let d = self.term(i).gradient(t.output());
            net::backward(w, &self.layout, &t, &d, &mut g);
        }
        g
    }

    fn hessian_vector(&self, w: &[T], v: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); w.len()];
        for i in 0..self.len() {
            net::hessian_vector(w, &self.layout, &self.input(i), &self.term(i), v, &mut out);
        }
        out
    }
}

/// Squared Bellman error of one transition.
pub fn dql_loss<T: Scalar>(
    params: &ParamVector<T>,
    target: &TargetNetwork<T>,
    grid: &GridWorld,
    transition: &Transition<T>,
    nu: T,
) -> Result<T> {
    params.ensure_same_layout(&target.params)?;
    let obj = DqlObjective::new(target, grid, std::slice::from_ref(transition), nu)?;
    Ok(obj.loss(params.values()))
}

/// Exact gradient of the summed Bellman loss over `batch`.
pub fn dql_grad<T: Scalar>(
    params: &ParamVector<T>,
    target: &TargetNetwork<T>,
    grid: &GridWorld,
    batch: &[Transition<T>],
    nu: T,
) -> Result<ParamVector<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyData("gradient batch".into()));
    }
    params.ensure_same_layout(&target.params)?;
    let obj = DqlObjective::new(target, grid, batch, nu)?;
    params.like(obj.gradient(params.values()))
}

/// `params - lr * grad`.
pub fn sgd_step<T: Scalar>(params: &ParamVector<T>, grad: &ParamVector<T>, lr: T) -> Result<ParamVector<T>> {
    if !(lr >= T::zero()) {
        return Err(Error::config("lr", "step size must be non-negative"));
    }
    params.axpy(-lr, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Action, Cell};
    use crate::qlearn::QNetConfig;
    use approx::assert_relative_eq;

    fn layout(widths: &[usize]) -> Layout {
        Layout::from_widths(widths).unwrap()
    }

    fn tr(state: Cell, action: Action, reward: f64, grid: &GridWorld) -> Transition<f64> {
        Transition {
            state,
            action,
            reward,
            next_state: crate::env::step(grid, state, action).unwrap(),
            terminal: false,
        }
    }

    /// A 2x2 grid and a one-layer linear net whose Q-values are set by hand.
    fn linear_fixture(q_online: [f64; 4], q_next: [f64; 4]) -> (GridWorld, ParamVector<f64>, TargetNetwork<f64>) {
        let grid = GridWorld::new(2, 2, Cell::new(0, 0)).unwrap();
        let l = layout(&[4, 4]);
        // Q(s, a) = bias[a] + W[a, s]; set W column 0 for the online net,
        // column 1 (cell (1,0)) for the target net.
        let mut on = vec![0.0; 20];
        let mut tg = vec![0.0; 20];
        for a in 0..4 {
            on[a * 4] = q_online[a];
            tg[a * 4 + 1] = q_next[a];
        }
        let online = ParamVector::new(on, l.clone(), 1).unwrap();
        let target = sync_target(&ParamVector::new(tg, l, 1).unwrap(), 10);
        (grid, online, target)
    }

    #[test]
    fn loss_direct_substitution() {
        let (grid, online, target) = linear_fixture([0.0, 0.0, 0.0, 0.5], [2.0, 1.0, -3.0, 0.0]);
        let t = tr(Cell::new(0, 0), Action::Right, 1.0, &grid);
        let loss = dql_loss(&online, &target, &grid, &t, 0.99).unwrap();
        assert_relative_eq!(loss, 6.1504, max_relative = 1e-12);
    }

    #[test]
    fn loss_zero_fixed_point_and_discount_free() {
        let (grid, online, target) = linear_fixture([0.0; 4], [0.0; 4]);
        let t = tr(Cell::new(0, 0), Action::Right, 0.0, &grid);
        assert_eq!(dql_loss(&online, &target, &grid, &t, 0.99).unwrap(), 0.0);

        let (grid, online, target) = linear_fixture([0.0, 0.0, 0.0, 0.5], [7.0; 4]);
        let t = tr(Cell::new(0, 0), Action::Right, 2.0, &grid);
        assert_relative_eq!(dql_loss(&online, &target, &grid, &t, 0.0).unwrap(), 2.25);
    }

    #[test]
    fn terminal_drops_bootstrap() {
        let (grid, online, target) = linear_fixture([0.0, 0.0, 0.0, 0.5], [9.0; 4]);
        let mut t = tr(Cell::new(0, 0), Action::Right, 1.0, &grid);
        t.terminal = true;
        assert_relative_eq!(dql_loss(&online, &target, &grid, &t, 0.99).unwrap(), 0.25);
    }

    #[test]
    fn loss_after_sync_is_zero_on_greedy_action() {
        // A self-loop at a wall: s' = s. With r=0 and nu=1 the target equals
        // max_y q(s, y), which is q(s, a*) right after a sync.
        let grid = GridWorld::desk();
        let online = QNetConfig::new(vec![40, 6, 4], 9).init::<f64>();
        let target = sync_target(&online, 10);
        let s = Cell::new(0, 0);
        let q = crate::qlearn::q_forward(&online, &grid.observation(s)).unwrap();
        let best = Action::ALL[argmax(&q)];
        let next = grid.step_unchecked(s, best);
        if next == s {
            let t = Transition {
                state: s,
                action: best,
                reward: 0.0,
                next_state: s,
                terminal: false,
            };
            assert!(dql_loss(&online, &target, &grid, &t, 1.0).unwrap() < 1e-24);
        }
        // Always-clamped action from the corner for the general case.
        let t = Transition {
            state: s,
            action: Action::Left,
            reward: 0.0,
            next_state: s,
            terminal: false,
        };
        let expected = (q[argmax(&q)] - q[Action::Left.index()]).powi(2);
        assert_relative_eq!(
            dql_loss(&online, &target, &grid, &t, 1.0).unwrap(),
            expected,
            max_relative = 1e-12
        );
    }

    #[test]
    fn sync_snapshot_semantics() {
        let online = QNetConfig::new(vec![9, 4], 1).init::<f64>();
        let target = sync_target(&online, 10);
        let grad = online.clone();
        let moved = sgd_step(&online, &grad, 0.5).unwrap();
        assert_ne!(moved, online);
        assert_eq!(target.params, online);
        assert_eq!(sync_target(&online, 10), sync_target(&online, 10));
    }

    #[test]
    fn sgd_examples() {
        let l = layout(&[1, 1]);
        let w = ParamVector::new(vec![1.0, 0.0], l.clone(), 1).unwrap();
        let g = ParamVector::new(vec![2.0, 0.0], l.clone(), 1).unwrap();
        assert_relative_eq!(sgd_step(&w, &g, 0.1).unwrap().values()[0], 0.8);
        assert_eq!(sgd_step(&w, &g, 0.0).unwrap(), w);
        let zero = ParamVector::zeros(l).with_byte_size(1);
        assert_eq!(sgd_step(&w, &zero, 0.1).unwrap(), w);
        assert!(sgd_step(&w, &g, -1.0).is_err());
    }

    #[test]
    fn gradient_of_zero_loss_batch_is_zero() {
        let (grid, online, target) = linear_fixture([0.0; 4], [0.0; 4]);
        let batch = vec![tr(Cell::new(0, 0), Action::Right, 0.0, &grid); 3];
        let g = dql_grad(&online, &target, &grid, &batch, 0.9).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_rejects_empty_batch_and_layout_mismatch() {
        let grid = GridWorld::desk();
        let online = QNetConfig::new(vec![40, 4], 1).init::<f64>();
        let target = sync_target(&QNetConfig::new(vec![40, 3, 4], 1).init::<f64>(), 10);
        let batch = vec![tr(Cell::new(0, 0), Action::Right, 1.0, &grid)];
        assert!(dql_grad(&online, &sync_target(&online, 1), &grid, &[], 0.9).is_err());
        assert!(dql_grad(&online, &target, &grid, &batch, 0.9).is_err());
    }

    fn random_batch(seed: u64, n: usize) -> Vec<Transition<f64>> {
        use rand::Rng;
        let grid = GridWorld::desk();
        let mut rng = crate::seed::rng(seed);
        (0..n)
            .map(|_| {
                let s = Cell::new(rng.random_range(0..5), rng.random_range(0..8));
                let a = Action::ALL[rng.random_range(0..4)];
                tr(s, a, rng.random_range(0.0..10.0), &grid)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let grid = GridWorld::desk();
        for seed in 0..10 {
            // [40, 3, 4] has 139 parameters and one tanh layer.
            let cfg = QNetConfig::new(vec![40, 3, 4], seed);
            let online = cfg.init::<f64>();
            let target = sync_target(&cfg.init_with_seed::<f64>(seed + 100), 10);
            let batch = random_batch(seed, 12);
            let g = dql_grad(&online, &target, &grid, &batch, 0.99).unwrap();
            let obj = DqlObjective::new(&target, &grid, &batch, 0.99).unwrap();
            let h = 1e-5;
            let mut x = online.values().to_vec();
            let mut num = vec![0.0; x.len()];
            for i in 0..x.len() {
                let orig = x[i];
                x[i] = orig + h;
                let up = obj.loss(&x);
                x[i] = orig - h;
                let dn = obj.loss(&x);
                x[i] = orig;
                num[i] = (up - dn) / (2.0 * h);
            }
            let diff: f64 = g
                .values()
                .iter()
                .zip(&num)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-4, "seed {seed}: relative error {}", diff / norm);
        }
    }

    #[test]
    fn gradient_is_additive_over_batches() {
        let grid = GridWorld::desk();
        let online = QNetConfig::new(vec![40, 5, 4], 3).init::<f64>();
        let target = sync_target(&QNetConfig::new(vec![40, 5, 4], 4).init::<f64>(), 10);
        let (a, b) = (random_batch(1, 5), random_batch(2, 7));
        let both: Vec<_> = a.iter().chain(&b).cloned().collect();
        let ga = dql_grad(&online, &target, &grid, &a, 0.9).unwrap();
        let gb = dql_grad(&online, &target, &grid, &b, 0.9).unwrap();
        let gab = dql_grad(&online, &target, &grid, &both, 0.9).unwrap();
        for ((x, y), z) in ga.values().iter().zip(gb.values()).zip(gab.values()) {
            assert_relative_eq!(x + y, *z, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    proptest::proptest! {
        #[test]
        fn loss_is_nonnegative(seed in 0u64..1000, nu in 0.0f64..=1.0) {
            let grid = GridWorld::desk();
            let online = QNetConfig::new(vec![40, 4, 4], seed).init::<f64>();
            let target = sync_target(&QNetConfig::new(vec![40, 4, 4], seed + 1).init::<f64>(), 10);
            for t in random_batch(seed, 4) {
                proptest::prop_assert!(dql_loss(&online, &target, &grid, &t, nu).unwrap() >= 0.0);
            }
        }

        #[test]
        fn greedy_choice_survives_positive_rescaling(q in proptest::collection::vec(-50.0f64..50.0, 4), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
            proptest::prop_assert_eq!(argmax(&q), argmax(&scaled));
        }
    }
}
