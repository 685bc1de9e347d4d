//! Analytic 2-D point-navigation task families with hidden goals or hidden
//! dynamics.
//!
//! The observation is the agent's position only; nothing about the goal or
//! the dynamics rotation is observable, which is what forces belief
//! inference. Episodes have a fixed horizon and never terminate early.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::{Error, Result};

/// Fixed episode length.
pub const HORIZON: usize = 32;
/// Displacement per unit action.
pub const ACTION_SCALE: f64 = 0.1;
/// Positions live in [-BOX, BOX]^2.
pub const BOX: f64 = 1.0;

pub const RADIAL_GOAL_RADIUS: f64 = 0.5;
pub const SHIFTED_GOAL_RADIUS: f64 = 0.75;
pub const ROTATED_GOAL: [f64; 2] = [0.5, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFamily {
    /// Hidden goal on the circle of radius 0.5.
    RadialGoal,
    /// Fixed goal, hidden rotation of the dynamics.
    RotatedDynamics,
    /// Hidden goal on the circle of radius 0.75; exists to create a
    /// meta-train/meta-test distribution gap.
    ShiftedGoal,
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskFamily::RadialGoal => "radial_goal",
            TaskFamily::RotatedDynamics => "rotated_dynamics",
            TaskFamily::ShiftedGoal => "shifted_goal",
        };
        f.write_str(s)
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radial_goal" => Ok(TaskFamily::RadialGoal),
            "rotated_dynamics" => Ok(TaskFamily::RotatedDynamics),
            "shifted_goal" => Ok(TaskFamily::ShiftedGoal),
            other => Err(Error::InvalidArgument(format!(
                "unknown task family `{other}`"
            ))),
        }
    }
}

/// Hidden parameters of one task instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub goal: [f64; 2],
    pub rotation_angle: f64,
    pub task_id: u64,
    pub seed: u64,
}

/// Observable environment state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub step_index: usize,
}

/// One experience tuple (s, a, r, s').
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: [f64; 2],
    pub action: [f64; 2],
    pub reward: f64,
    pub next_state: [f64; 2],
}

impl Transition {
    /// Flattened (s, a, r, s') layout used as encoder input.
    pub const FEATURES: usize = 7;

    pub fn features(&self) -> [f64; Self::FEATURES] {
        [
            self.state[0],
            self.state[1],
            self.action[0],
            self.action[1],
            self.reward,
            self.next_state[0],
            self.next_state[1],
        ]
    }
}

/// Sample `n` task instances. Goal angles (or rotation angles) come from an
/// evenly spaced grid with per-cell uniform jitter, so any `n` covers the
/// family while staying deterministic in `seed`.
pub fn sample_tasks(family: TaskFamily, n: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_tasks: n must be >= 1".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let cell = (i as f64 + 0.5) / n as f64;
        let jitter: f64 = rng.random_range(-0.5..0.5) / n as f64;
        let task = match family {
            TaskFamily::RadialGoal | TaskFamily::ShiftedGoal => {
                let radius = if family == TaskFamily::RadialGoal {
                    RADIAL_GOAL_RADIUS
                } else {
                    SHIFTED_GOAL_RADIUS
                };
                let angle = 2.0 * std::f64::consts::PI * (cell + jitter);
                TaskSpec {
                    family,
                    goal: [radius * angle.cos(), radius * angle.sin()],
                    rotation_angle: 0.0,
                    task_id: i as u64,
                    seed,
                }
            }
            TaskFamily::RotatedDynamics => {
                let half_pi = std::f64::consts::FRAC_PI_2;
                let angle = (-half_pi + 2.0 * half_pi * (cell + jitter)).clamp(-half_pi, half_pi);
                TaskSpec {
                    family,
                    goal: ROTATED_GOAL,
                    rotation_angle: angle,
                    task_id: i as u64,
                    seed,
                }
            }
        };
        tasks.push(task);
    }
    Ok(tasks)
}

/// All tasks start at the origin; the initial observation carries no task
/// information.
pub fn reset(_task: &TaskSpec) -> EnvState {
    EnvState {
        position: [0.0, 0.0],
        step_index: 0,
    }
}

fn clip_action(a: f64) -> f64 {
    a.clamp(-1.0, 1.0)
}

/// Advance one step: displacement 0.1 * Rot(angle) * clip(action), position
/// clipped to the box, reward = -||next - goal||. The episode is done after
/// exactly `HORIZON` steps.
pub fn step(task: &TaskSpec, st: &EnvState, action: [f64; 2]) -> Result<(f64, EnvState, bool)> {
    if st.step_index >= HORIZON {
        return Err(Error::Env(format!(
            "step on finished episode (step_index {})",
            st.step_index
        )));
    }
    if !action.iter().all(|a| a.is_finite()) {
        return Err(Error::Env("non-finite action".into()));
    }
    let ax = clip_action(action[0]);
    let ay = clip_action(action[1]);
    let (sin, cos) = task.rotation_angle.sin_cos();
    let dx = ACTION_SCALE * (cos * ax - sin * ay);
    let dy = ACTION_SCALE * (sin * ax + cos * ay);
    let next = EnvState {
        position: [
            (st.position[0] + dx).clamp(-BOX, BOX),
            (st.position[1] + dy).clamp(-BOX, BOX),
        ],
        step_index: st.step_index + 1,
    };
    let reward = -((next.position[0] - task.goal[0]).powi(2)
        + (next.position[1] - task.goal[1]).powi(2))
    .sqrt();
    let done = next.step_index == HORIZON;
    Ok((reward, next, done))
}

/// Episode return of the scripted optimal controller: move straight toward
/// the goal at full speed in the task's true dynamics frame, then hold.
pub fn oracle_return(task: &TaskSpec) -> f64 {
    let mut dist = (task.goal[0].powi(2) + task.goal[1].powi(2)).sqrt();
    let mut total = 0.0;
    for _ in 0..HORIZON {
        dist = (dist - ACTION_SCALE).max(0.0);
        total -= dist;
    }
    total
}

/// The action the scripted controller takes from `position`: a unit vector
/// toward the goal, expressed in the pre-rotation action frame.
pub fn oracle_action(task: &TaskSpec, position: [f64; 2]) -> [f64; 2] {
    let dx = task.goal[0] - position[0];
    let dy = task.goal[1] - position[1];
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < 1e-12 {
        return [0.0, 0.0];
    }
    // Scale down near the goal so we land exactly on it.
    let speed = (dist / ACTION_SCALE).min(1.0);
    let (sin, cos) = (-task.rotation_angle).sin_cos();
    let ux = dx / dist * speed;
    let uy = dy / dist * speed;
    [cos * ux - sin * uy, sin * ux + cos * uy]
}

/// One task per line: family, task_id, goal_x, goal_y, rotation_angle, seed.
pub fn write_tasks(tasks: &[TaskSpec], path: &Path) -> Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            t.family, t.task_id, t.goal[0], t.goal[1], t.rotation_angle, t.seed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path)?;
    let mut tasks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "task file line {}: expected 6 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("task file line {}: bad number", lineno + 1)))
        };
        let parse_u = |s: &str| -> Result<u64> {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("task file line {}: bad integer", lineno + 1)))
        };
        tasks.push(TaskSpec {
            family: fields[0].trim().parse()?,
            task_id: parse_u(fields[1])?,
            goal: [parse_f(fields[2])?, parse_f(fields[3])?],
            rotation_angle: parse_f(fields[4])?,
            seed: parse_u(fields[5])?,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_tasks(TaskFamily::RadialGoal, 2, 7).unwrap();
        let b = sample_tasks(TaskFamily::RadialGoal, 2, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn radial_goals_lie_on_the_circle() {
        for t in sample_tasks(TaskFamily::RadialGoal, 16, 3).unwrap() {
            let norm = (t.goal[0].powi(2) + t.goal[1].powi(2)).sqrt();
            assert!((norm - RADIAL_GOAL_RADIUS).abs() < 1e-12);
            assert_eq!(t.rotation_angle, 0.0);
        }
        for t in sample_tasks(TaskFamily::ShiftedGoal, 16, 3).unwrap() {
            let norm = (t.goal[0].powi(2) + t.goal[1].powi(2)).sqrt();
            assert!((norm - SHIFTED_GOAL_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn rotated_dynamics_goals_are_fixed() {
        for t in sample_tasks(TaskFamily::RotatedDynamics, 8, 3).unwrap() {
            assert_eq!(t.goal, ROTATED_GOAL);
            assert!(t.rotation_angle.abs() <= std::f64::consts::FRAC_PI_2);
        }
    }

    #[test]
    fn reset_reveals_nothing() {
        let tasks = sample_tasks(TaskFamily::RadialGoal, 4, 1).unwrap();
        let states: Vec<EnvState> = tasks.iter().map(reset).collect();
        for s in &states {
            assert_eq!(s.position, [0.0, 0.0]);
            assert_eq!(s.step_index, 0);
        }
        assert!(states.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn step_arithmetic() {
        let task = TaskSpec {
            family: TaskFamily::RadialGoal,
            goal: [0.5, 0.0],
            rotation_angle: 0.0,
            task_id: 0,
            seed: 0,
        };
        let s0 = reset(&task);
        let (r, s1, done) = step(&task, &s0, [1.0, 0.0]).unwrap();
        assert!((s1.position[0] - 0.1).abs() < 1e-15);
        assert_eq!(s1.position[1], 0.0);
        assert!((r - (-0.4)).abs() < 1e-12);
        assert!(!done);

        // Zero action keeps the position; reward is distance to goal.
        let (r, s2, _) = step(&task, &s1, [0.0, 0.0]).unwrap();
        assert_eq!(s2.position, s1.position);
        assert!((r - (-0.4)).abs() < 1e-12);
    }

    #[test]
    fn rotation_rotates_displacement() {
        let task = TaskSpec {
            family: TaskFamily::RotatedDynamics,
            goal: ROTATED_GOAL,
            rotation_angle: std::f64::consts::FRAC_PI_2,
            task_id: 0,
            seed: 0,
        };
        let (_, s1, _) = step(&task, &reset(&task), [1.0, 0.0]).unwrap();
        assert!(s1.position[0].abs() < 1e-15);
        assert!((s1.position[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn step_is_deterministic_and_rejects_finished_episodes() {
        let task = sample_tasks(TaskFamily::RadialGoal, 1, 5).unwrap()[0];
        let mut st = reset(&task);
        let mut outs = Vec::new();
        loop {
            let (r, next, done) = step(&task, &st, [0.3, -0.8]).unwrap();
            let (r2, next2, done2) = step(&task, &st, [0.3, -0.8]).unwrap();
            assert_eq!((r, next, done), (r2, next2, done2));
            outs.push(r);
            st = next;
            if done {
                break;
            }
        }
        assert_eq!(outs.len(), HORIZON);
        assert!(step(&task, &st, [0.0, 0.0]).is_err());
    }

    #[test]
    fn oracle_return_arithmetic_series() {
        let task = TaskSpec {
            family: TaskFamily::RadialGoal,
            goal: [0.5, 0.0],
            rotation_angle: 0.0,
            task_id: 0,
            seed: 0,
        };
        // distances 0.4, 0.3, 0.2, 0.1, then 0 forever -> return -1.0
        assert!((oracle_return(&task) - (-1.0)).abs() < 1e-12);

        // Same return at any angle on the same radius.
        for t in sample_tasks(TaskFamily::RadialGoal, 8, 2).unwrap() {
            assert!((oracle_return(&t) - (-1.0)).abs() < 1e-12);
        }
        // The controller compensates rotation exactly.
        for t in sample_tasks(TaskFamily::RotatedDynamics, 8, 2).unwrap() {
            assert!((oracle_return(&t) - (-1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn scripted_controller_achieves_oracle_return() {
        for family in [
            TaskFamily::RadialGoal,
            TaskFamily::RotatedDynamics,
            TaskFamily::ShiftedGoal,
        ] {
            for task in sample_tasks(family, 5, 11).unwrap() {
                let mut st = reset(&task);
                let mut total = 0.0;
                loop {
                    let a = oracle_action(&task, st.position);
                    let (r, next, done) = step(&task, &st, a).unwrap();
                    total += r;
                    st = next;
                    if done {
                        break;
                    }
                }
                let expected = oracle_return(&task);
                assert!(
                    (total - expected).abs() < 1e-9,
                    "{family}: rollout {total} vs oracle {expected}"
                );
            }
        }
    }

    #[test]
    fn opposite_goals_need_antipodal_first_actions() {
        let up = TaskSpec {
            family: TaskFamily::RadialGoal,
            goal: [0.0, 0.5],
            rotation_angle: 0.0,
            task_id: 0,
            seed: 0,
        };
        let down = TaskSpec {
            goal: [0.0, -0.5],
            ..up
        };
        let a_up = oracle_action(&up, [0.0, 0.0]);
        let a_down = oracle_action(&down, [0.0, 0.0]);
        let dot = a_up[0] * a_down[0] + a_up[1] * a_down[1];
        assert!(dot < -0.99, "inner product {dot}");
    }

    #[test]
    fn reward_bounds_and_maximum() {
        let task = sample_tasks(TaskFamily::RadialGoal, 1, 0).unwrap()[0];
        let at_goal = EnvState {
            position: task.goal,
            step_index: 0,
        };
        let (r, _, _) = step(&task, &at_goal, [0.0, 0.0]).unwrap();
        assert!((r - 0.0).abs() < 1e-12);
        let far = EnvState {
            position: [-1.0, -1.0],
            step_index: 0,
        };
        let (r, _, _) = step(&task, &far, [0.0, 0.0]).unwrap();
        assert!(r >= -2.0 * std::f64::consts::SQRT_2 && r <= 0.0);
    }

    #[test]
    fn task_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.txt");
        let tasks = sample_tasks(TaskFamily::RotatedDynamics, 6, 9).unwrap();
        write_tasks(&tasks, &path).unwrap();
        let back = read_tasks(&path).unwrap();
        assert_eq!(tasks, back);
    }
}
