use crate::autodiff::Tensor;
use crate::error::{contract_err, shape_err, Result};

/// One contiguous slice of an episode: `H + 1` states and `H` actions,
/// rewards and termination flags.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceWindow {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
    /// Absolute replay index of the first transition.
    pub start: u64,
}

impl SequenceWindow {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.actions.len();
        if h == 0 || self.states.len() != h + 1 {
            return contract_err(format!(
                "window needs H >= 1 actions and H + 1 states, got {} and {}",
                h,
                self.states.len()
            ));
        }
        if self.rewards.len() != h || self.dones.len() != h {
            return contract_err("window rewards/done flags must have one entry per action");
        }
        Ok(())
    }
}

/// A batch of windows laid out time-major: block `t` holds row `b` of every
/// window, so `states` row `t·B + b` is state `t` of window `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub horizon: usize,
    pub batch: usize,
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
    pub starts: Vec<u64>,
}

impl WindowBatch {
    pub fn from_windows(windows: &[SequenceWindow]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return contract_err("empty window batch");
        };
        for w in windows {
            w.validate()?;
        }
        let h = first.horizon();
        let obs_dim = first.states[0].len();
        let act_dim = first.actions[0].len();
        if windows.iter().any(|w| {
            w.horizon() != h
                || w.states.iter().any(|s| s.len() != obs_dim)
                || w.actions.iter().any(|a| a.len() != act_dim)
        }) {
            return shape_err("windows in a batch must share horizon and dimensions");
        }
        let b = windows.len();
        let mut states = Vec::with_capacity((h + 1) * b * obs_dim);
        for t in 0..=h {
            for w in windows {
                states.extend_from_slice(&w.states[t]);
            }
        }
        let mut actions = Vec::with_capacity(h * b * act_dim);
        let mut rewards = Vec::with_capacity(h * b);
        let mut dones = Vec::with_capacity(h * b);
        for t in 0..h {
            for w in windows {
                actions.extend_from_slice(&w.actions[t]);
                rewards.push(w.rewards[t]);
                dones.push(w.dones[t]);
            }
        }
        Ok(Self {
            horizon: h,
            batch: b,
            states: Tensor::matrix((h + 1) * b, obs_dim, states)?,
            actions: Tensor::matrix(h * b, act_dim, actions)?,
            rewards,
            dones,
            starts: windows.iter().map(|w| w.start).collect(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.states.cols()
    }

    pub fn act_dim(&self) -> usize {
        self.actions.cols()
    }

    fn block(t: &Tensor, start_row: usize, rows: usize) -> Tensor {
        let c = t.cols();
        Tensor::matrix(rows, c, t.data()[start_row * c..(start_row + rows) * c].to_vec()).expect("finite slice")
    }

    /// States at time `t` (0-based, `0..=H`), `B × obs_dim`.
    pub fn state_block(&self, t: usize) -> Tensor {
        Self::block(&self.states, t * self.batch, self.batch)
    }

    /// Actions at time `t` (`0..H`), `B × act_dim`.
    pub fn action_block(&self, t: usize) -> Tensor {
        Self::block(&self.actions, t * self.batch, self.batch)
    }

    /// Rewards of the final transition of each window.
    pub fn final_rewards(&self) -> &[f64] {
        &self.rewards[(self.horizon - 1) * self.batch..]
    }

    pub fn final_dones(&self) -> &[f64] {
        &self.dones[(self.horizon - 1) * self.batch..]
    }

    /// Provenance string for fault reports.
    pub fn describe(&self, row: usize) -> String {
        let start = self.starts.get(row).copied().unwrap_or_default();
        let h = self.horizon;
        let s: Vec<String> = (0..=h).map(|t| format!("{:?}", self.states.row(t * self.batch + row))).collect();
        let a: Vec<String> = (0..h).map(|t| format!("{:?}", self.actions.row(t * self.batch + row))).collect();
        format!("window start={start} states=[{}] actions=[{}]", s.join(", "), a.join(", "))
    }
}
