use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ProblemError;

/// Uniform time grid `s_k = k·T/N` with checkpoints pinned to nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    checkpoints: Vec<usize>,
}

impl TimeGrid {
    /// Builds the grid and snaps every checkpoint time to its nearest node.
    ///
    /// A checkpoint is rejected when it lies half a step or more away from
    /// every node (an exact midpoint has no nearest node), when the list is
    /// not strictly increasing after snapping, or when the last checkpoint is
    /// not the horizon.
    pub fn new(horizon: f64, steps: usize, checkpoints: &[f64]) -> Result<Self, ProblemError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ProblemError::Grid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(ProblemError::Grid("step count must be at least 1".into()));
        }
        if checkpoints.is_empty() {
            return Err(ProblemError::Grid("at least one checkpoint (the horizon) is required".into()));
        }
        if checkpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ProblemError::Grid("checkpoints must be strictly increasing".into()));
        }
        let mut nodes = Vec::with_capacity(checkpoints.len());
        for &t in checkpoints {
            if !(0.0..=horizon * (1.0 + 1e-12)).contains(&t) {
                return Err(ProblemError::Grid(format!("checkpoint {t} outside [0, {horizon}]")));
            }
            let pos = t * steps as f64 / horizon;
            let node = pos.round();
            if (pos - node).abs() >= 0.5 - 1e-9 {
                return Err(ProblemError::Grid(format!(
                    "checkpoint {t} is not representable on a grid of {steps} steps"
                )));
            }
            nodes.push(node as usize);
        }
        if nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProblemError::Grid(
                "two checkpoints snap to the same node; refine the grid".into(),
            ));
        }
        if *nodes.last().expect("non-empty") != steps {
            return Err(ProblemError::Grid(format!(
                "last checkpoint must equal the horizon {horizon}"
            )));
        }
        Ok(TimeGrid {
            horizon,
            steps,
            checkpoints: nodes,
        })
    }

    /// Same horizon and checkpoint times on a different step count.
    pub fn with_steps(&self, steps: usize) -> Result<Self, ProblemError> {
        TimeGrid::new(self.horizon, steps, &self.checkpoint_times())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        self.horizon * node as f64 / self.steps as f64
    }

    /// Node indices of the checkpoints, strictly increasing, last = `steps`.
    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn checkpoint_count(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn checkpoint_times(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|&k| self.time(k)).collect()
    }

    /// Index `i` of the checkpoint located at `node`, if any.
    pub fn checkpoint_at(&self, node: usize) -> Option<usize> {
        self.checkpoints.binary_search(&node).ok()
    }

    /// Interval containing step `k` (the step from node `k` to `k+1`):
    /// the index of the first checkpoint strictly after node `k`.
    pub fn interval_of_step(&self, step: usize) -> usize {
        self.checkpoints.partition_point(|&c| c <= step)
    }

    /// Steps belonging to interval `i`, i.e. `[t_{i−1}, t_i)`.
    pub fn interval_steps(&self, interval: usize) -> std::ops::Range<usize> {
        let start = if interval == 0 { 0 } else { self.checkpoints[interval - 1] };
        start..self.checkpoints[interval]
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRepr {
    horizon: f64,
    steps: usize,
    checkpoints: Vec<f64>,
}

impl Serialize for TimeGrid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GridRepr {
            horizon: self.horizon,
            steps: self.steps,
            checkpoints: self.checkpoint_times(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimeGrid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = GridRepr::deserialize(d)?;
        TimeGrid::new(r.horizon, r.steps, &r.checkpoints).map_err(serde::de::Error::custom)
    }
}
