//! Reward functions for relabelling a dataset with a new task.

use std::fmt;
use std::str::FromStr;

use super::collect::{goal_reward, GoalReward};
use super::maze::Cell;
use super::maze_layout;
use crate::error::{Result, VmgError};

/// Boxed `(s, a, s') -> r`.
pub type RewardFn = Box<dyn Fn(&[f64], &[f64], &[f64]) -> f64>;

/// Textual reward description.
///
/// Accepted forms: `zero`, `goal:ROW,COL` (1 while within the goal radius of
/// that cell centre),
/// `goal-entering:ROW,COL` (1 on the entering step), and `target:X`
/// (`-|s' - X|` on the first state coordinate).
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    Zero,
    Goal { cell: Cell, mode: GoalReward },
    Target(f64),
}

impl FromStr for RewardSpec {
    type Err = VmgError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || VmgError::invalid(format!("unrecognised reward spec {s:?}"));
        let s = s.trim();
        if s == "zero" {
            return Ok(RewardSpec::Zero);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let cell = || -> Result<Cell> {
            let (r, c) = arg.split_once(',').ok_or_else(bad)?;
            Ok((
                r.trim().parse().map_err(|_| bad())?,
                c.trim().parse().map_err(|_| bad())?,
            ))
        };
        match kind {
            "goal" => Ok(RewardSpec::Goal {
                cell: cell()?,
                mode: GoalReward::Inside,
            }),
            "goal-entering" => Ok(RewardSpec::Goal {
                cell: cell()?,
                mode: GoalReward::Entering,
            }),
            "target" => {
                let x: f64 = arg.trim().parse().map_err(|_| bad())?;
                if !x.is_finite() {
                    return Err(bad());
                }
                Ok(RewardSpec::Target(x))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardSpec::Zero => write!(f, "zero"),
            RewardSpec::Goal {
                cell: (r, c),
                mode: GoalReward::Inside,
            } => write!(f, "goal:{r},{c}"),
            RewardSpec::Goal {
                cell: (r, c),
                mode: GoalReward::Entering,
            } => write!(f, "goal-entering:{r},{c}"),
            RewardSpec::Target(x) => write!(f, "target:{x}"),
        }
    }
}

impl RewardSpec {
    /// Resolves the spec against a built-in environment.
    pub fn reward_fn(&self, env: &str) -> Result<RewardFn> {
        match self {
            RewardSpec::Zero => Ok(Box::new(|_, _, _| 0.0)),
            RewardSpec::Goal { cell, mode } => {
                let layout = maze_layout(env).ok_or_else(|| {
                    VmgError::invalid(format!("goal rewards need a maze environment, got {env:?}"))
                })?;
                if layout.is_wall(cell.0, cell.1) {
                    return Err(VmgError::invalid(format!("goal cell {cell:?} is a wall")));
                }
                Ok(Box::new(goal_reward(&layout, *cell, *mode)))
            }
            RewardSpec::Target(x) => {
                let x = *x;
                Ok(Box::new(move |_, _, s2| -(s2[0] - x).abs()))
            }
        }
    }
}
