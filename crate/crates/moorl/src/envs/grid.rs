//! Sparse-reward gridworld. Geometry comes from a tiny text map format
//! (`#` wall, `S` start, `G` goal, `.` free); slip, discount and horizon ride
//! alongside it. The grid compiles to an exact `TabularMdp`, so every
//! dynamic-programming oracle applies.

use std::collections::BTreeSet;
use std::collections::VecDeque;

use super::tabular::TabularMdp;
use crate::{Error, Result};

pub const GRID_ACTIONS: usize = 4;

/// Action order: 0 up, 1 down, 2 left, 3 right (ties in greedy policies
/// resolve toward this order).
const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Clone, Debug, PartialEq)]
pub struct GridworldSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub walls: BTreeSet<(usize, usize)>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    /// With this probability the intended action is replaced by a uniformly
    /// random one.
    pub slip: f64,
    pub gamma: f64,
    pub horizon: usize,
}

impl GridworldSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        width: usize,
        height: usize,
        walls: BTreeSet<(usize, usize)>,
        start: (usize, usize),
        goal: (usize, usize),
        slip: f64,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        let spec = GridworldSpec {
            name: name.into(),
            width,
            height,
            walls,
            start,
            goal,
            slip,
            gamma,
            horizon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_map_text(
        name: impl Into<String>,
        text: &str,
        slip: f64,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        let mut spec = parse_grid_map(text)?;
        spec.name = name.into();
        spec.slip = slip;
        spec.gamma = gamma;
        spec.horizon = horizon;
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("empty grid".into()));
        }
        if !(0.0..1.0).contains(&self.slip) {
            return Err(Error::InvalidArgument(format!("slip {} not in [0,1)", self.slip)));
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("discount {}", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("zero horizon".into()));
        }
        if self.start == self.goal {
            return Err(Error::InvalidArgument("start equals goal".into()));
        }
        for &cell in [&self.start, &self.goal] {
            if cell.0 >= self.width || cell.1 >= self.height || self.walls.contains(&cell) {
                return Err(Error::InvalidArgument(format!("cell {cell:?} unusable")));
            }
        }
        if self.bfs_distance().is_none() {
            return Err(Error::InvalidArgument(
                "goal is not reachable from start".into(),
            ));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, cell: (usize, usize)) -> usize {
        cell.1 * self.width + cell.0
    }

    fn free(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && !self.walls.contains(&(x as usize, y as usize))
    }

    /// Where a move lands, walls and edges blocking in place.
    fn target(&self, cell: (usize, usize), action: usize) -> (usize, usize) {
        let (dx, dy) = MOVES[action];
        let (nx, ny) = (cell.0 as i64 + dx, cell.1 as i64 + dy);
        if self.free(nx, ny) {
            (nx as usize, ny as usize)
        } else {
            cell
        }
    }

    /// Shortest start-to-goal distance in steps, ignoring slip; `None` when
    /// unreachable.
    pub fn bfs_distance(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.n_states()];
        let mut queue = VecDeque::new();
        dist[self.index(self.start)] = 0;
        queue.push_back(self.start);
        while let Some(cell) = queue.pop_front() {
            let d = dist[self.index(cell)];
            if cell == self.goal {
                return Some(d);
            }
            for a in 0..GRID_ACTIONS {
                let next = self.target(cell, a);
                if next != cell && dist[self.index(next)] == usize::MAX {
                    dist[self.index(next)] = d + 1;
                    queue.push_back(next);
                }
            }
        }
        None
    }
}

/// Parse the text map format. Errors carry 1-based line numbers.
pub fn parse_grid_map(text: &str) -> Result<GridworldSpec> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if let Some(last) = lines.last() {
        if last.is_empty() {
            lines.pop();
        }
    }
    if lines.is_empty() {
        return Err(Error::Format {
            line: 1,
            msg: "empty map".into(),
        });
    }
    let width = lines[0].chars().count();
    let mut walls = BTreeSet::new();
    let mut start = None;
    let mut goal = None;
    for (y, row) in lines.iter().enumerate() {
        let line = y + 1;
        let count = row.chars().count();
        if count != width {
            return Err(Error::Format {
                line,
                msg: format!("row width {count} differs from first row width {width}"),
            });
        }
        for (x, c) in row.chars().enumerate() {
            match c {
                '#' => {
                    walls.insert((x, y));
                }
                'S' => {
                    if start.replace((x, y)).is_some() {
                        return Err(Error::Format {
                            line,
                            msg: "second start cell".into(),
                        });
                    }
                }
                'G' => {
                    if goal.replace((x, y)).is_some() {
                        return Err(Error::Format {
                            line,
                            msg: "second goal cell".into(),
                        });
                    }
                }
                '.' => {}
                other => {
                    return Err(Error::Format {
                        line,
                        msg: format!("unknown cell character {other:?}"),
                    });
                }
            }
        }
    }
    let start = start.ok_or(Error::Format {
        line: lines.len(),
        msg: "no start cell".into(),
    })?;
    let goal = goal.ok_or(Error::Format {
        line: lines.len(),
        msg: "no goal cell".into(),
    })?;
    // Geometry only; callers fill in slip/discount/horizon via
    // `from_map_text` (which re-validates, including reachability).
    Ok(GridworldSpec {
        name: "map".into(),
        width,
        height: lines.len(),
        walls,
        start,
        goal,
        slip: 0.0,
        gamma: 0.99,
        horizon: 100,
    })
}

pub fn write_grid_map(spec: &GridworldSpec) -> String {
    let mut out = String::with_capacity((spec.width + 1) * spec.height);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let cell = (x, y);
            out.push(if cell == spec.start {
                'S'
            } else if cell == spec.goal {
                'G'
            } else if spec.walls.contains(&cell) {
                '#'
            } else {
                '.'
            });
        }
        out.push('\n');
    }
    out
}

/// Compile to tensors: 4 actions, slip mixing, goal terminal with reward 1 on
/// entry. Wall cells keep padding self-loops so indices stay rectangular;
/// they are unreachable.
pub fn grid_to_mdp(spec: &GridworldSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let n = spec.n_states();
    let na = GRID_ACTIONS;
    let goal_idx = spec.index(spec.goal);
    let mut transition = vec![0.0; n * na * n];
    let mut reward = vec![0.0; n * na * n];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let cell = (x, y);
            let s = spec.index(cell);
            let absorbing = cell == spec.goal || spec.walls.contains(&cell);
            for a in 0..na {
                let base = (s * na + a) * n;
                if absorbing {
                    transition[base + s] = 1.0;
                    continue;
                }
                // Executed action: intended with prob 1-slip, otherwise one
                // of the four uniformly.
                for b in 0..na {
                    let mut p = spec.slip / na as f64;
                    if b == a {
                        p += 1.0 - spec.slip;
                    }
                    let s2 = spec.index(spec.target(cell, b));
                    transition[base + s2] += p;
                }
                reward[base + goal_idx] = 1.0;
            }
        }
    }
    let mut rho = vec![0.0; n];
    rho[spec.index(spec.start)] = 1.0;
    let mut terminal = vec![false; n];
    terminal[goal_idx] = true;
    TabularMdp::new(
        n,
        na,
        transition,
        reward,
        spec.gamma,
        rho,
        spec.horizon,
        terminal,
    )
}
