//! Grid maze for trajectory stitching.
//!
//! The embedded layout (x to the right, y downward):
//!
//! ```text
//! ##X#.
//! ##...
//! S.I##
//! #B.##
//! ##..G
//! ```
//!
//! `S` is the start, `I` the intersection (plain floor), `X` a terminal decoy
//! worth nothing, `B` a boom (-1, terminal) and `G` the goal (+1, terminal).
//! Both offline trajectories pass through `I`: one runs from `S` to `X`, the
//! other from the top-right corner to `G`.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvStep};
use crate::data::{Actions, Dataset, Trajectory};
use crate::error::{contract, Error, Result};
use crate::model::{Action, ActionSpace};

/// Moves by action id: up, down, left, right.
pub const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

const EMBEDDED: &str = "##X#.\n##...\nS..##\n#B.##\n##..G\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Floor,
    Start,
    Boom,
    Goal,
    Decoy,
}

impl Cell {
    fn terminal(self) -> bool {
        matches!(self, Cell::Boom | Cell::Goal | Cell::Decoy)
    }

    fn reward(self) -> f64 {
        match self {
            Cell::Boom => -1.0,
            Cell::Goal => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MazeLayout {
    pub width: usize,
    pub height: usize,
    cells: Vec<Cell>,
    start: usize,
    goal: usize,
    decoy: usize,
}

impl MazeLayout {
    /// Parses rows of `#` wall, `.` floor, `S` start, `B` boom, `G` goal and
    /// `X` decoy. Exactly one `S`, `G` and `X` are required.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if height == 0 || width == 0 {
            return Err(Error::Config("maze layout is empty".into()));
        }
        let mut cells = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Config(format!(
                    "maze row {} has {} cells, expected {width}",
                    y + 1,
                    row.chars().count()
                )));
            }
            for ch in row.chars() {
                cells.push(match ch {
                    '#' => Cell::Wall,
                    '.' => Cell::Floor,
                    'S' => Cell::Start,
                    'B' => Cell::Boom,
                    'G' => Cell::Goal,
                    'X' => Cell::Decoy,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown maze character {other:?} in row {}",
                            y + 1
                        )))
                    }
                });
            }
        }
        let unique = |kind: Cell, name: &str| -> Result<usize> {
            let found: Vec<usize> = (0..cells.len()).filter(|&i| cells[i] == kind).collect();
            match found.as_slice() {
                [i] => Ok(*i),
                _ => Err(Error::Config(format!(
                    "maze needs exactly one {name}, found {}",
                    found.len()
                ))),
            }
        };
        let layout = Self {
            width,
            height,
            start: unique(Cell::Start, "start")?,
            goal: unique(Cell::Goal, "goal")?,
            decoy: unique(Cell::Decoy, "decoy")?,
            cells,
        };
        layout.stitch_paths()?;
        Ok(layout)
    }

    pub fn embedded() -> Self {
        Self::parse(EMBEDDED).expect("embedded layout is valid")
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, index: usize) -> Cell {
        self.cells[index]
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn decoy(&self) -> usize {
        self.decoy
    }

    /// Destination of `action` from `from`; walls and the border block.
    pub fn neighbor(&self, from: usize, action: usize) -> usize {
        let (x, y) = self.coords(from);
        let (dx, dy) = MOVES[action];
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            return from;
        }
        let to = self.index(nx as usize, ny as usize);
        if self.cells[to] == Cell::Wall {
            from
        } else {
            to
        }
    }

    /// Shortest path from `from` to `to` that only passes through
    /// non-terminal cells before `to`, avoiding `forbidden`.
    fn shortest_path(&self, from: usize, to: usize, forbidden: &[usize]) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.cells.len()];
        let mut queue = VecDeque::from([from]);
        prev[from] = from;
        while let Some(c) = queue.pop_front() {
            if c == to {
                let mut path = vec![to];
                let mut cur = to;
                while cur != from {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            if c != from && self.cells[c].terminal() {
                continue;
            }
            for a in 0..MOVES.len() {
                let n = self.neighbor(c, a);
                if prev[n] == usize::MAX && !forbidden.contains(&n) {
                    prev[n] = c;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    /// Cell where the start-to-decoy and start-to-goal routes part.
    pub fn intersection(&self) -> usize {
        self.stitch_paths().expect("validated at parse").2
    }

    /// Cell paths of the decoy trajectory and the goal trajectory, plus the
    /// intersection they share.
    pub fn stitch_paths(&self) -> Result<(Vec<usize>, Vec<usize>, usize)> {
        let to_decoy = self
            .shortest_path(self.start, self.decoy, &[])
            .ok_or_else(|| Error::Config("decoy is unreachable from start".into()))?;
        let to_goal = self
            .shortest_path(self.start, self.goal, &[])
            .ok_or_else(|| Error::Config("goal is unreachable from start".into()))?;
        let shared = to_decoy
            .iter()
            .zip(&to_goal)
            .take_while(|(a, b)| a == b)
            .count();
        if shared < 2 {
            return Err(Error::Config(
                "start-to-decoy and start-to-goal routes share no intersection".into(),
            ));
        }
        let intersection = to_decoy[shared - 1];
        // the goal trajectory starts as far from the start as possible while
        // still reaching the goal through the intersection without the start
        let mut best: Option<(usize, Vec<usize>)> = None;
        for c in 0..self.cells.len() {
            if self.cells[c] != Cell::Floor || c == intersection || to_goal.contains(&c) {
                continue;
            }
            let Some(head) = self.shortest_path(c, intersection, &[self.start]) else {
                continue;
            };
            let Some(tail) = self.shortest_path(intersection, self.goal, &[self.start]) else {
                continue;
            };
            if head.iter().any(|h| tail[1..].contains(h)) {
                continue;
            }
            let dist = self
                .shortest_path(self.start, c, &[])
                .map_or(0, |p| p.len());
            if best.as_ref().is_none_or(|(d, _)| dist > *d) {
                let mut path = head;
                path.extend_from_slice(&tail[1..]);
                best = Some((dist, path));
            }
        }
        let (_, goal_path) = best.ok_or_else(|| {
            Error::Config("no goal trajectory avoids the start cell".into())
        })?;
        Ok((to_decoy, goal_path, intersection))
    }

    /// Action id moving between two adjacent cells.
    fn action_between(&self, from: usize, to: usize) -> usize {
        (0..MOVES.len())
            .find(|&a| self.neighbor(from, a) == to)
            .expect("path cells are adjacent")
    }

    /// One-hot encoding over all cells.
    pub fn encode(&self, cell: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.cells.len()];
        v[cell] = 1.0;
        v
    }

    /// Inverse of [`MazeLayout::encode`].
    pub fn decode(&self, state: &[f64]) -> Option<usize> {
        state.iter().position(|&v| v == 1.0)
    }
}

/// Maze episode state.
#[derive(Clone, Debug)]
pub struct GridMaze {
    layout: MazeLayout,
    pos: usize,
    t: usize,
    done: bool,
    step_limit: usize,
}

impl GridMaze {
    pub const STEP_LIMIT: usize = 30;

    pub fn new(layout: MazeLayout) -> Self {
        let start = layout.start();
        Self {
            layout,
            pos: start,
            t: 0,
            done: false,
            step_limit: Self::STEP_LIMIT,
        }
    }

    /// Starts episodes from `cell` instead of the layout's start.
    pub fn with_start(mut self, cell: usize) -> Self {
        self.pos = cell;
        self
    }

    pub fn layout(&self) -> &MazeLayout {
        &self.layout
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Moves by action id (see [`MOVES`]).
    pub fn step_id(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(contract("step called on a finished maze episode"));
        }
        if action >= MOVES.len() {
            return Err(contract(format!("maze action {action} out of range")));
        }
        self.pos = self.layout.neighbor(self.pos, action);
        self.t += 1;
        let cell = self.layout.cell(self.pos);
        self.done = cell.terminal() || self.t >= self.step_limit;
        Ok(EnvStep {
            next_state: self.layout.encode(self.pos),
            reward: cell.reward(),
            done: self.done,
        })
    }
}

impl Env for GridMaze {
    fn state_dim(&self) -> usize {
        self.layout.num_cells()
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { count: MOVES.len() }
    }

    fn step_limit(&self) -> usize {
        self.step_limit
    }

    /// Back to the layout start.
    fn reset(&mut self) -> Vec<f64> {
        self.pos = self.layout.start();
        self.t = 0;
        self.done = false;
        self.layout.encode(self.pos)
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        match action {
            Action::Discrete(a) => self.step_id(*a),
            Action::Continuous(_) => Err(contract("maze takes discrete actions")),
        }
    }

    fn success(&self) -> bool {
        self.layout.cell(self.pos) == Cell::Goal
    }
}

/// Options of [`gen_stitch_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct StitchOptions {
    /// Copies of each base trajectory.
    pub copies: usize,
    /// Also emit every proper suffix of the goal trajectory that still
    /// passes through the intersection (once per copy).
    pub suffix_variants: bool,
    /// Per-step probability of inserting a move into a wall (the agent stays
    /// put, reward 0) before the scripted move.
    pub noise: f64,
    pub seed: u64,
}

impl StitchOptions {
    pub fn new(copies: usize) -> Self {
        Self {
            copies,
            suffix_variants: false,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn record(layout: &MazeLayout, cells: &[usize], noise: f64, rng: &mut ChaCha8Rng) -> Trajectory {
    let mut env = GridMaze::new(layout.clone()).with_start(cells[0]);
    env.step_limit = usize::MAX;
    let mut states = vec![layout.encode(cells[0])];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut terminated = false;
    for w in cells.windows(2) {
        if noise > 0.0 && rng.random::<f64>() < noise {
            let blocked: Vec<usize> = (0..MOVES.len())
                .filter(|&a| layout.neighbor(w[0], a) == w[0])
                .collect();
            if !blocked.is_empty() {
                let a = blocked[rng.random_range(0..blocked.len())];
                let s = env.step_id(a).expect("episode is running");
                states.push(s.next_state);
                actions.push(a);
                rewards.push(s.reward);
            }
        }
        let a = layout.action_between(w[0], w[1]);
        let s = env.step_id(a).expect("episode is running");
        states.push(s.next_state);
        actions.push(a);
        rewards.push(s.reward);
        terminated = s.done;
    }
    Trajectory {
        states,
        actions: Actions::Discrete(actions),
        rewards,
        terminated,
    }
}

/// Offline data for the stitching experiment: `copies` of the start-to-decoy
/// trajectory (return 0) and of the goal trajectory (return 1), which does
/// not begin at the start. No trajectory contains both the start and the goal.
pub fn gen_stitch_dataset(layout: &MazeLayout, options: &StitchOptions) -> Result<Dataset> {
    if options.copies == 0 {
        return Err(Error::Config("copies must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&options.noise) {
        return Err(Error::Config(format!(
            "noise must lie in [0, 1), got {}",
            options.noise
        )));
    }
    let (decoy_path, goal_path, intersection) = layout.stitch_paths()?;
    let cut = goal_path
        .iter()
        .position(|&c| c == intersection)
        .expect("goal path passes the intersection");
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut out = Vec::new();
    for _ in 0..options.copies {
        out.push(record(layout, &decoy_path, options.noise, &mut rng));
        out.push(record(layout, &goal_path, options.noise, &mut rng));
        if options.suffix_variants {
            for start in 1..=cut {
                out.push(record(layout, &goal_path[start..], options.noise, &mut rng));
            }
        }
    }
    Ok(Dataset::new(out))
}
