//! Partially observable 7×7 gridworld tasks and the benchmark registry.
//!
//! Every task draws its episode layout from a small finite set of variants.
//! `optimal_steps` is the shortest solution over all variants, so the
//! achievable reward bounds every episode's return.

mod oracle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use oracle::{shortest_solution, solve_variant};

pub const GRID: usize = 7;
pub const VIEW: usize = 5;
pub const OBS_CHANNELS: usize = 3;
pub const OBS_LEN: usize = OBS_CHANNELS * VIEW * VIEW;
pub const NUM_ACTIONS: usize = 7;

/// Highest code each observation channel can hold.
pub const CHANNEL_MAX: [u8; OBS_CHANNELS] = [8, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Left = 0,
    Right = 1,
    Forward = 2,
    Pickup = 3,
    Drop = 4,
    Toggle = 5,
    Done = 6,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::Left,
        Action::Right,
        Action::Forward,
        Action::Pickup,
        Action::Drop,
        Action::Toggle,
        Action::Done,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Contract(format!("action {i} outside [0, {NUM_ACTIONS})")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    NavGoal,
    LavaGap,
    DoorKey,
    MemoryCue,
    DistShift,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::NavGoal,
        TaskKind::LavaGap,
        TaskKind::DoorKey,
        TaskKind::MemoryCue,
        TaskKind::DistShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::NavGoal => "nav-goal",
            TaskKind::LavaGap => "lava-gap",
            TaskKind::DoorKey => "door-key",
            TaskKind::MemoryCue => "memory-cue",
            TaskKind::DistShift => "dist-shift",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::config(format!("unknown task `{name}`")))
    }

    /// Shortest solution over all layout variants, as measured by the BFS
    /// oracle (a unit test re-derives each value).
    pub fn optimal_steps(self) -> usize {
        match self {
            TaskKind::NavGoal => 9,
            TaskKind::LavaGap => 9,
            TaskKind::DoorKey => 11,
            TaskKind::MemoryCue => 7,
            TaskKind::DistShift => 4,
        }
    }

    pub fn variant_count(self) -> usize {
        match self {
            TaskKind::NavGoal => 10,
            TaskKind::LavaGap => 5,
            TaskKind::DoorKey => 45,
            TaskKind::MemoryCue => 4,
            TaskKind::DistShift => 2,
        }
    }
}

/// A task context: which layout family, its step budget and the shared
/// observation/action extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub id: usize,
    pub kind: TaskKind,
    pub name: String,
    pub max_episode_steps: usize,
    pub optimal_steps: usize,
    pub num_actions: usize,
    pub obs_shape: [usize; 3],
}

impl TaskContext {
    pub fn new(id: usize, kind: TaskKind) -> Self {
        TaskContext {
            id,
            kind,
            name: kind.name().to_string(),
            max_episode_steps: 4 * GRID * GRID,
            optimal_steps: kind.optimal_steps(),
            num_actions: NUM_ACTIONS,
            obs_shape: [OBS_CHANNELS, VIEW, VIEW],
        }
    }

    /// Return of a success in `steps` steps.
    pub fn success_reward(&self, steps: usize) -> f64 {
        1.0 - 0.9 * (steps as f64 / self.max_episode_steps as f64)
    }

    pub fn achievable_reward(&self) -> f64 {
        self.success_reward(self.optimal_steps)
    }
}

/// Tasks of a named benchmark, in registry order.
pub fn make_benchmark(name: &str) -> Result<Vec<TaskContext>> {
    let kinds: &[TaskKind] = match name {
        "MT2" => &[TaskKind::NavGoal, TaskKind::LavaGap],
        "MT3" => &[TaskKind::NavGoal, TaskKind::LavaGap, TaskKind::DoorKey],
        "MT5" => &[
            TaskKind::NavGoal,
            TaskKind::LavaGap,
            TaskKind::DoorKey,
            TaskKind::MemoryCue,
            TaskKind::DistShift,
        ],
        other => return Err(Error::config(format!("unknown benchmark `{other}` (expected MT2, MT3 or MT5)"))),
    };
    Ok(kinds.iter().enumerate().map(|(i, &k)| TaskContext::new(i, k)).collect())
}

/// A benchmark name, or a single task name for a one-task run.
pub fn resolve_tasks(name: &str) -> Result<Vec<TaskContext>> {
    match make_benchmark(name) {
        Ok(tasks) => Ok(tasks),
        Err(_) => TaskKind::parse(name)
            .map(|k| vec![TaskContext::new(0, k)])
            .map_err(|_| Error::config(format!("`{name}` is neither a benchmark (MT2, MT3, MT5) nor a task name"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Wall,
    Goal,
    Lava,
    Key,
    Door { locked: bool, open: bool },
    Ball,
    Box,
}

impl Cell {
    fn code(self) -> (u8, u8) {
        match self {
            Cell::Empty => (1, 0),
            Cell::Wall => (2, 0),
            Cell::Goal => (3, 0),
            Cell::Lava => (4, 0),
            Cell::Key => (5, 0),
            Cell::Door { locked, open } => (6, if open { 0 } else if locked { 2 } else { 1 }),
            Cell::Ball => (7, 0),
            Cell::Box => (8, 0),
        }
    }

    fn passable(self) -> bool {
        matches!(self, Cell::Empty | Cell::Goal | Cell::Lava | Cell::Door { open: true, .. })
    }
}

/// Agent-centric `[3, 5, 5]` view with small integer codes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    codes: [u8; OBS_LEN],
}

impl Observation {
    pub fn from_codes(codes: [u8; OBS_LEN]) -> Self {
        Observation { codes }
    }

    pub fn codes(&self) -> &[u8; OBS_LEN] {
        &self.codes
    }

    pub fn to_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.codes.iter().map(|&c| c as f64)
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![1, OBS_CHANNELS, VIEW, VIEW], self.to_f64().collect()).expect("fixed extents")
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        &self.codes[c * VIEW * VIEW..(c + 1) * VIEW * VIEW]
    }
}

/// Stack observations into a `[B, 3, 5, 5]` tensor.
pub fn batch_tensor<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for o in obs {
        data.extend(o.to_f64());
        n += 1;
    }
    Tensor::new(vec![n, OBS_CHANNELS, VIEW, VIEW], data).expect("fixed extents")
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

type Pos = (usize, usize);

const DIRS: [(isize, isize); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub grid: [[Cell; GRID]; GRID],
    pub start: Pos,
    pub start_dir: u8,
    /// Memory task: reaching the first cell succeeds, the second fails.
    pub memory_targets: Option<(Pos, Pos)>,
}

impl Layout {
    fn walled() -> [[Cell; GRID]; GRID] {
        let mut g = [[Cell::Empty; GRID]; GRID];
        for i in 0..GRID {
            g[0][i] = Cell::Wall;
            g[GRID - 1][i] = Cell::Wall;
            g[i][0] = Cell::Wall;
            g[i][GRID - 1] = Cell::Wall;
        }
        g
    }

    /// Layout variant `v` of `kind`; `v < kind.variant_count()`.
    pub fn variant(kind: TaskKind, v: usize) -> Layout {
        let mut grid = Self::walled();
        let mut start = (1, 1);
        let mut start_dir = 0;
        let mut memory_targets = None;
        match kind {
            TaskKind::NavGoal => {
                let (horizontal, opening) = (v / 5 == 1, v % 5 + 1);
                for i in 1..GRID - 1 {
                    if i != opening {
                        if horizontal {
                            grid[3][i] = Cell::Wall;
                        } else {
                            grid[i][3] = Cell::Wall;
                        }
                    }
                }
                grid[5][5] = Cell::Goal;
            }
            TaskKind::LavaGap => {
                let gap = v + 1;
                for r in 1..GRID - 1 {
                    if r != gap {
                        grid[r][3] = Cell::Lava;
                    }
                }
                grid[5][5] = Cell::Goal;
            }
            TaskKind::DoorKey => {
                let door_row = v / 9 + 1;
                let key_slot = v % 9;
                for r in 1..GRID - 1 {
                    grid[r][3] = if r == door_row {
                        Cell::Door { locked: true, open: false }
                    } else {
                        Cell::Wall
                    };
                }
                // Left room cells except the start, row-major.
                let slots: Vec<Pos> = (1..6)
                    .flat_map(|r| (1..3).map(move |c| (r, c)))
                    .filter(|&p| p != (1, 1))
                    .collect();
                let (kr, kc) = slots[key_slot];
                grid[kr][kc] = Cell::Key;
                grid[5][5] = Cell::Goal;
            }
            TaskKind::MemoryCue => {
                let cue = if v / 2 == 0 { Cell::Ball } else { Cell::Box };
                let other = if cue == Cell::Ball { Cell::Box } else { Cell::Ball };
                let match_top = v % 2 == 0;
                for row in grid.iter_mut().take(GRID - 1).skip(1) {
                    for cell in row.iter_mut().take(GRID - 1).skip(1) {
                        *cell = Cell::Wall;
                    }
                }
                for c in 2..=5 {
                    grid[3][c] = Cell::Empty;
                }
                grid[3][1] = cue;
                grid[2][5] = Cell::Empty;
                grid[4][5] = Cell::Empty;
                let (top, bottom) = if match_top { (cue, other) } else { (other, cue) };
                grid[1][5] = top;
                grid[5][5] = bottom;
                start = (3, 2);
                start_dir = 2;
                memory_targets = Some(if match_top { ((2, 5), (4, 5)) } else { ((4, 5), (2, 5)) });
            }
            TaskKind::DistShift => {
                let strip = v + 2;
                for c in 2..=4 {
                    grid[strip][c] = Cell::Lava;
                    grid[5][c] = Cell::Lava;
                }
                grid[1][5] = Cell::Goal;
            }
        }
        Layout {
            grid,
            start,
            start_dir,
            memory_targets,
        }
    }
}

/// One episode-capable environment instance for a single task.
#[derive(Clone, Debug)]
pub struct GridEnv {
    task: TaskContext,
    layout: Layout,
    agent: Pos,
    dir: u8,
    carrying: bool,
    steps: usize,
    active: bool,
}

impl GridEnv {
    pub fn new(task: TaskContext) -> Self {
        let layout = Layout::variant(task.kind, 0);
        GridEnv {
            agent: layout.start,
            dir: layout.start_dir,
            task,
            layout,
            carrying: false,
            steps: 0,
            active: false,
        }
    }

    pub fn task(&self) -> &TaskContext {
        &self.task
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn agent(&self) -> (Pos, u8, bool) {
        (self.agent, self.dir, self.carrying)
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Observation {
        let v = rng.random_range(0..self.task.kind.variant_count());
        self.reset_to_variant(v)
    }

    pub fn reset_to_variant(&mut self, variant: usize) -> Observation {
        self.layout = Layout::variant(self.task.kind, variant);
        self.agent = self.layout.start;
        self.dir = self.layout.start_dir;
        self.carrying = false;
        self.steps = 0;
        self.active = true;
        self.observe()
    }

    fn front(&self) -> Pos {
        let (dr, dc) = DIRS[self.dir as usize];
        (
            (self.agent.0 as isize + dr) as usize,
            (self.agent.1 as isize + dc) as usize,
        )
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let action = Action::from_index(action)?;
        if !self.active {
            return Err(Error::State("step called on a finished episode; call reset".into()));
        }
        self.steps += 1;
        let mut success = false;
        let mut failure = false;
        let front = self.front();
        let front_cell = self.layout.grid[front.0][front.1];
        match action {
            Action::Left => self.dir = (self.dir + 3) % 4,
            Action::Right => self.dir = (self.dir + 1) % 4,
            Action::Forward => {
                if front_cell.passable() {
                    self.agent = front;
                    match front_cell {
                        Cell::Goal => success = true,
                        Cell::Lava => failure = true,
                        _ => {}
                    }
                    if let Some((good, bad)) = self.layout.memory_targets {
                        success |= self.agent == good;
                        failure |= self.agent == bad;
                    }
                }
            }
            Action::Pickup => {
                if front_cell == Cell::Key && !self.carrying {
                    self.carrying = true;
                    self.layout.grid[front.0][front.1] = Cell::Empty;
                }
            }
            Action::Drop => {
                if self.carrying && front_cell == Cell::Empty {
                    self.carrying = false;
                    self.layout.grid[front.0][front.1] = Cell::Key;
                }
            }
            Action::Toggle => {
                if let Cell::Door { locked, open } = front_cell {
                    let next = if locked {
                        if self.carrying {
                            Cell::Door { locked: false, open: true }
                        } else {
                            front_cell
                        }
                    } else {
                        Cell::Door { locked: false, open: !open }
                    };
                    self.layout.grid[front.0][front.1] = next;
                }
            }
            Action::Done => {}
        }
        let terminated = success || failure;
        let truncated = !terminated && self.steps >= self.task.max_episode_steps;
        if terminated || truncated {
            self.active = false;
        }
        let reward = if success {
            self.task.success_reward(self.steps)
        } else {
            0.0
        };
        Ok(StepResult {
            observation: self.observe(),
            reward,
            terminated,
            truncated,
        })
    }

    /// The 5×5 view: the agent sits at the bottom-centre, facing up.
    pub fn observe(&self) -> Observation {
        let mut codes = [0u8; OBS_LEN];
        let plane = VIEW * VIEW;
        let (fr, fc) = DIRS[self.dir as usize];
        let (rr, rc) = DIRS[((self.dir + 1) % 4) as usize];
        for vr in 0..VIEW {
            for vc in 0..VIEW {
                let fwd = (VIEW - 1 - vr) as isize;
                let lat = vc as isize - (VIEW / 2) as isize;
                let r = self.agent.0 as isize + fwd * fr + lat * rr;
                let c = self.agent.1 as isize + fwd * fc + lat * rc;
                let idx = vr * VIEW + vc;
                if r < 0 || c < 0 || r >= GRID as isize || c >= GRID as isize {
                    continue;
                }
                let (obj, state) = self.layout.grid[r as usize][c as usize].code();
                codes[idx] = obj;
                codes[plane + idx] = state;
            }
        }
        let me = (VIEW - 1) * VIEW + VIEW / 2;
        codes[plane + me] = u8::from(self.carrying);
        codes[2 * plane + me] = self.dir + 1;
        Observation { codes }
    }

    /// Hashable summary of everything that can change within an episode.
    pub fn state_key(&self) -> (Pos, u8, bool, Vec<Cell>) {
        let cells = self.layout.grid.iter().flat_map(|r| r.iter().copied()).collect();
        (self.agent, self.dir, self.carrying, cells)
    }
}

/// Row of the task registry export.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskRecord {
    pub name: String,
    pub optimal_steps: usize,
    pub max_steps: usize,
    pub achievable_reward: f64,
}

pub fn task_records(tasks: &[TaskContext]) -> Vec<TaskRecord> {
    tasks
        .iter()
        .map(|t| TaskRecord {
            name: t.name.clone(),
            optimal_steps: t.optimal_steps,
            max_steps: t.max_episode_steps,
            achievable_reward: t.achievable_reward(),
        })
        .collect()
}

/// Environment that samples a task uniformly at every episode boundary.
#[derive(Clone, Debug)]
pub struct MultiTaskEnv {
    envs: Vec<GridEnv>,
    current: usize,
}

impl MultiTaskEnv {
    pub fn new(tasks: &[TaskContext]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("at least one task required"));
        }
        Ok(MultiTaskEnv {
            envs: tasks.iter().cloned().map(GridEnv::new).collect(),
            current: 0,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.envs.len()
    }

    pub fn current_task(&self) -> usize {
        self.current
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (usize, Observation) {
        self.current = rng.random_range(0..self.envs.len());
        let obs = self.envs[self.current].reset(rng);
        (self.current, obs)
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        self.envs[self.current].step(action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn registry_contents() {
        let names = |b: &str| make_benchmark(b).unwrap().into_iter().map(|t| t.name).collect::<Vec<_>>();
        assert_eq!(names("MT2"), ["nav-goal", "lava-gap"]);
        assert_eq!(names("MT3"), ["nav-goal", "lava-gap", "door-key"]);
        assert_eq!(names("MT5"), ["nav-goal", "lava-gap", "door-key", "memory-cue", "dist-shift"]);
        assert!(matches!(make_benchmark("MT7"), Err(Error::Config(_))));
    }

    #[test]
    fn shared_extents() {
        for t in make_benchmark("MT5").unwrap() {
            assert_eq!(t.num_actions, 7);
            assert_eq!(t.obs_shape, [3, 5, 5]);
            assert!(t.optimal_steps > 0 && t.optimal_steps <= t.max_episode_steps);
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let task = TaskContext::new(0, TaskKind::NavGoal);
        let mut a = GridEnv::new(task.clone());
        let mut b = GridEnv::new(task);
        let oa = a.reset(&mut ChaCha8Rng::seed_from_u64(9));
        let ob = b.reset(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(oa, ob);
    }

    #[test]
    fn door_key_layout_has_key_and_door() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut env = GridEnv::new(TaskContext::new(0, TaskKind::DoorKey));
        for _ in 0..20 {
            env.reset(&mut rng);
            let cells: Vec<Cell> = env.layout().grid.iter().flatten().copied().collect();
            assert_eq!(cells.iter().filter(|c| **c == Cell::Key).count(), 1);
            assert_eq!(cells.iter().filter(|c| matches!(c, Cell::Door { .. })).count(), 1);
        }
    }

    #[test]
    fn lava_gap_has_one_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut env = GridEnv::new(TaskContext::new(0, TaskKind::LavaGap));
        for _ in 0..20 {
            env.reset(&mut rng);
            let gaps = (1..GRID - 1).filter(|&r| env.layout().grid[r][3] != Cell::Lava).count();
            assert_eq!(gaps, 1);
        }
    }

    #[test]
    fn reward_at_step_budget_is_tenth() {
        let t = TaskContext::new(0, TaskKind::NavGoal);
        assert!((t.success_reward(t.max_episode_steps) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn door_key_table_constants() {
        let t = TaskContext {
            optimal_steps: 11,
            max_episode_steps: 360,
            ..TaskContext::new(0, TaskKind::DoorKey)
        };
        assert!((t.achievable_reward() - 0.9725).abs() < 1e-12);
    }

    #[test]
    fn lava_terminates_with_zero() {
        let mut env = GridEnv::new(TaskContext::new(0, TaskKind::LavaGap));
        env.reset_to_variant(4); // gap at row 5, lava at (1,3)
        env.step(Action::Forward as usize).unwrap();
        let r = env.step(Action::Forward as usize).unwrap();
        assert!(r.terminated);
        assert_eq!(r.reward, 0.0);
        assert!(matches!(env.step(0), Err(Error::State(_))));
    }

    #[test]
    fn truncates_at_budget() {
        let mut env = GridEnv::new(TaskContext::new(0, TaskKind::NavGoal));
        env.reset_to_variant(0);
        let mut last = None;
        for _ in 0..env.task().max_episode_steps {
            last = Some(env.step(Action::Done as usize).unwrap());
        }
        let last = last.unwrap();
        assert!(last.truncated && !last.terminated);
        assert_eq!(env.steps(), env.task().max_episode_steps);
    }

    #[test]
    fn action_out_of_range() {
        let mut env = GridEnv::new(TaskContext::new(0, TaskKind::NavGoal));
        env.reset_to_variant(0);
        assert!(matches!(env.step(7), Err(Error::Contract(_))));
    }

    #[test]
    fn observation_codes_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in TaskKind::ALL {
            let mut env = GridEnv::new(TaskContext::new(0, kind));
            let mut obs = env.reset(&mut rng);
            for _ in 0..300 {
                for c in 0..OBS_CHANNELS {
                    assert!(obs.channel(c).iter().all(|&v| v <= CHANNEL_MAX[c]));
                }
                let r = env.step(rng.random_range(0..NUM_ACTIONS)).unwrap();
                obs = if r.done() { env.reset(&mut rng) } else { r.observation };
            }
        }
    }

    #[test]
    fn task_sampling_is_uniform() {
        let tasks = make_benchmark("MT5").unwrap();
        let mut env = MultiTaskEnv::new(&tasks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            counts[env.reset(&mut rng).0] += 1;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        for &c in &counts {
            assert!((c as f64 - expected).abs() <= 0.05 * expected, "{counts:?}");
        }
        // 4 dof, 0.999 quantile ≈ 18.47
        assert!(chi2 < 18.47, "chi2 = {chi2}");
    }
}
