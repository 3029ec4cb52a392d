//! Multi-task gridworld: shared deterministic motion, task-specific reward
//! tables, epsilon-greedy episode collection and running-reward evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlearn::{self, ParamVector};
use crate::scalar::Scalar;
use crate::seed;

/// Default logical payload of one collected episode, in bytes.
pub const DEFAULT_EPISODE_BYTES: u64 = 24_600_000;

/// Grid coordinate. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl From<[usize; 2]> for Cell {
    fn from([x, y]: [usize; 2]) -> Self {
        Cell { x, y }
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

/// The four motions. Forward is +y, Right is +x.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward = 0,
    Backward = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::Forward, Action::Backward, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorld {
    width: usize,
    height: usize,
    entry: Cell,
}

impl GridWorld {
    pub fn new(width: usize, height: usize, entry: Cell) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::config(
                "grid",
                format!("grid must be at least 2x2, got {width}x{height}"),
            ));
        }
        let grid = GridWorld { width, height, entry };
        grid.check(entry)?;
        Ok(grid)
    }

    /// The 5x8 grid with its entry one row above the bottom edge.
    pub fn desk() -> Self {
        GridWorld::new(5, 8, Cell::new(2, 1)).expect("valid built-in grid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn entry(&self) -> Cell {
        self.entry
    }

    /// Number of landmark cells, which is also the observation length.
    pub fn landmarks(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.x < self.width && cell.y < self.height
    }

    pub(crate) fn check(&self, cell: Cell) -> Result<()> {
        if self.contains(cell) {
            Ok(())
        } else {
            Err(Error::OutOfGrid {
                cell,
                width: self.width,
                height: self.height,
            })
        }
    }

    /// Row-major index of `cell`.
    pub fn index(&self, cell: Cell) -> usize {
        cell.y * self.width + cell.x
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| Cell::new(x, y)))
    }

    pub(crate) fn step_unchecked(&self, cell: Cell, action: Action) -> Cell {
        let Cell { x, y } = cell;
        match action {
            Action::Forward if y + 1 < self.height => Cell::new(x, y + 1),
            Action::Backward if y > 0 => Cell::new(x, y - 1),
            Action::Left if x > 0 => Cell::new(x - 1, y),
            Action::Right if x + 1 < self.width => Cell::new(x + 1, y),
            _ => cell,
        }
    }

    pub fn observation<T: Scalar>(&self, cell: Cell) -> Observation<T> {
        Observation::one_hot(self.landmarks(), self.index(cell))
    }
}

/// Moves one cell in the action's direction; moves off the grid leave the
/// agent where it is.
pub fn step(grid: &GridWorld, cell: Cell, action: Action) -> Result<Cell> {
    grid.check(cell)?;
    Ok(grid.step_unchecked(cell, action))
}

/// One-hot cell indicator fed to the Q-network.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T>(Vec<T>);

impl<T: Scalar> Observation<T> {
    pub fn one_hot(len: usize, hot: usize) -> Self {
        let mut v = vec![T::zero(); len];
        v[hot] = T::one();
        Observation(v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// A task: its max-reward trajectory and the induced position-reward table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec<T> {
    pub task_id: usize,
    pub trajectory: Vec<Cell>,
    /// Indexed by [`GridWorld::index`].
    pub reward_table: Vec<T>,
}

impl<T: Scalar> TaskSpec<T> {
    /// Builds the reward table `r_max / (1 + d)` with `d` the Manhattan
    /// distance to the closest trajectory cell.
    pub fn new(grid: &GridWorld, task_id: usize, trajectory: Vec<Cell>, r_max: T) -> Result<Self> {
        let path = format!("tasks[{task_id}].trajectory");
        if trajectory.first() != Some(&grid.entry()) {
            return Err(Error::config(path, "trajectory must start at the entry cell"));
        }
        for &c in &trajectory {
            grid.check(c)?;
        }
        if let Some(w) = trajectory.windows(2).find(|w| w[0].manhattan(w[1]) != 1) {
            return Err(Error::config(
                path,
                format!("cells {:?} and {:?} are not adjacent", w[0], w[1]),
            ));
        }
        if !(r_max > T::zero()) {
            return Err(Error::config("r_max", "must be positive"));
        }
        let reward_table = grid
            .cells()
            .map(|c| {
                let d = trajectory.iter().map(|&t| c.manhattan(t)).min().unwrap_or(0);
                r_max / (T::one() + T::count(d as u64))
            })
            .collect();
        Ok(TaskSpec {
            task_id,
            trajectory,
            reward_table,
        })
    }

    pub fn on_trajectory(&self, cell: Cell) -> bool {
        self.trajectory.contains(&cell)
    }

    pub(crate) fn reward_at(&self, grid: &GridWorld, cell: Cell) -> T {
        self.reward_table[grid.index(cell)]
    }
}

pub fn reward<T: Scalar>(grid: &GridWorld, task: &TaskSpec<T>, cell: Cell) -> Result<T> {
    grid.check(cell)?;
    Ok(task.reward_at(grid, cell))
}

/// JSON description of a task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSetDoc {
    pub width: usize,
    pub height: usize,
    pub entry: Cell,
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    /// One list of cells per task; task ids are 1-based in list order.
    pub trajectories: Vec<Vec<Cell>>,
}

fn default_r_max() -> f64 {
    10.0
}

impl Default for TaskSetDoc {
    fn default() -> Self {
        builtin_tasks()
    }
}

/// The six built-in tasks. All leave the shared entry (2,1); tasks 1, 2, 3
/// and 6 share a trunk heading forward before splitting, tasks 4 and 5 turn
/// left and right immediately.
pub fn builtin_tasks() -> TaskSetDoc {
    let c = |v: &[(usize, usize)]| v.iter().map(|&(x, y)| Cell::new(x, y)).collect::<Vec<_>>();
    TaskSetDoc {
        width: 5,
        height: 8,
        entry: Cell::new(2, 1),
        r_max: default_r_max(),
        trajectories: vec![
            c(&[(2, 1), (2, 2), (2, 3), (2, 4), (2, 5), (2, 6), (2, 7)]),
            c(&[(2, 1), (2, 2), (2, 3), (1, 3), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7)]),
            c(&[(2, 1), (2, 2), (2, 3), (3, 3), (4, 3)]),
            c(&[(2, 1), (1, 1), (0, 1)]),
            c(&[(2, 1), (3, 1), (4, 1), (4, 0)]),
            c(&[(2, 1), (2, 2), (2, 3), (2, 4), (2, 5), (3, 5), (4, 5), (4, 6), (4, 7)]),
        ],
    }
}

/// A validated grid plus its tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet<T> {
    pub grid: GridWorld,
    pub r_max: T,
    pub tasks: Vec<TaskSpec<T>>,
}

impl<T: Scalar> TaskSet<T> {
    pub fn from_doc(doc: &TaskSetDoc) -> Result<Self> {
        let grid = GridWorld::new(doc.width, doc.height, doc.entry)?;
        if doc.trajectories.is_empty() {
            return Err(Error::config("trajectories", "at least one task is required"));
        }
        let r_max = T::lit(doc.r_max);
        let tasks = doc
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| TaskSpec::new(&grid, i + 1, t.clone(), r_max))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskSet { grid, r_max, tasks })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(&serde_json::from_str(text)?)
    }

    pub fn task(&self, task_id: usize) -> Result<&TaskSpec<T>> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or(Error::MissingTask(task_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<T> {
    pub state: Cell,
    pub action: Action,
    pub reward: T,
    pub next_state: Cell,
    /// Drops the bootstrap term in the Bellman target. Never set by the
    /// fixed-length episodes collected here.
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceBatch<T> {
    pub task_id: usize,
    pub device_id: usize,
    pub transitions: Vec<Transition<T>>,
    pub episode_length: usize,
    /// Logical payload size used for energy accounting.
    pub byte_size: u64,
}

impl<T: Scalar> ExperienceBatch<T> {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn with_byte_size(mut self, bytes: u64) -> Self {
        assert!(bytes > 0, "batch payload must be positive");
        self.byte_size = bytes;
        self
    }

    pub fn rewards(&self) -> impl Iterator<Item = T> + '_ {
        self.transitions.iter().map(|t| t.reward)
    }

    /// True when every transition follows the motion model and consecutive
    /// transitions chain.
    pub fn is_consistent(&self, grid: &GridWorld) -> bool {
        let steps_ok = self
            .transitions
            .iter()
            .all(|t| grid.contains(t.state) && grid.step_unchecked(t.state, t.action) == t.next_state);
        let chained = self.transitions.windows(2).all(|w| w[0].next_state == w[1].state);
        steps_ok && chained
    }
}

/// Index of the largest Q-value; ties resolve to the lowest action index.
pub fn argmax<T: Scalar>(q: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_action<T: Scalar>(params: &ParamVector<T>, grid: &GridWorld, cell: Cell) -> Result<Action> {
    let q = qlearn::q_forward(params, &grid.observation(cell))?;
    Ok(Action::ALL[argmax(&q)])
}

/// Rolls out `steps` motions from the entry cell. With probability `epsilon`
/// the action is uniform, otherwise greedy under `policy`; without a policy
/// every action is uniform.
pub fn collect_episode<T: Scalar>(
    grid: &GridWorld,
    task: &TaskSpec<T>,
    policy: Option<&ParamVector<T>>,
    epsilon: f64,
    steps: usize,
    rng_seed: u64,
) -> Result<ExperienceBatch<T>> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config("epsilon", "must lie in [0, 1]"));
    }
    if steps == 0 {
        return Err(Error::config("steps", "episodes need at least one step"));
    }
    let mut rng = seed::rng(rng_seed);
    let mut cell = grid.entry();
    let mut transitions = Vec::with_capacity(steps);
    for _ in 0..steps {
        // Draw the exploration coin unconditionally so the random stream does
        // not depend on the policy.
        let explore = rng.random::<f64>() < epsilon;
        let uniform = Action::ALL[rng.random_range(0..Action::COUNT)];
        let action = match policy {
            Some(p) if !explore => greedy_action(p, grid, cell)?,
            _ => uniform,
        };
        let next = grid.step_unchecked(cell, action);
        transitions.push(Transition {
            state: cell,
            action,
            reward: task.reward_at(grid, next),
            next_state: next,
            terminal: false,
        });
        cell = next;
    }
    Ok(ExperienceBatch {
        task_id: task.task_id,
        device_id: 0,
        transitions,
        episode_length: steps,
        byte_size: DEFAULT_EPISODE_BYTES,
    })
}

/// Discounted sum `sum_h nu^h r_h`, with `h` starting at zero.
pub fn running_reward<T: Scalar>(rewards: &[T], nu: T) -> T {
    let mut weight = T::one();
    let mut acc = T::zero();
    for &r in rewards {
        acc = acc + weight * r;
        weight = weight * nu;
    }
    acc
}

/// Running reward of the purely greedy rollout from the entry cell.
pub fn greedy_running_reward<T: Scalar>(
    grid: &GridWorld,
    task: &TaskSpec<T>,
    params: &ParamVector<T>,
    steps: usize,
    nu: T,
) -> Result<T> {
    let mut cell = grid.entry();
    let mut rewards = Vec::with_capacity(steps);
    for _ in 0..steps {
        cell = grid.step_unchecked(cell, greedy_action(params, grid, cell)?);
        rewards.push(task.reward_at(grid, cell));
    }
    Ok(running_reward(&rewards, nu))
}

/// Best running reward any action sequence of length `steps` can earn from
/// the entry cell, by backward induction over the deterministic dynamics.
pub fn max_running_reward<T: Scalar>(grid: &GridWorld, task: &TaskSpec<T>, steps: usize, nu: T) -> T {
    let mut value = vec![T::zero(); grid.landmarks()];
    for _ in 0..steps {
        let next: Vec<T> = grid
            .cells()
            .map(|c| {
                Action::ALL
                    .iter()
                    .map(|&a| {
                        let n = grid.step_unchecked(c, a);
                        task.reward_at(grid, n) + nu * value[grid.index(n)]
                    })
                    .fold(T::neg_infinity(), T::max)
            })
            .collect();
        value = next;
    }
    value[grid.index(grid.entry())]
}
