//! Ring-buffer replay with contiguous window sampling.

use rand::Rng;

use crate::autodiff::{Checkpoint, Tensor};
use crate::envs::Transition;
use crate::error::{MtcError, Result};
use crate::window::{SequenceWindow, WindowBatch};

const REJECTION_TRIES: usize = 4096;

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    s: Vec<f64>,
    a: Vec<f64>,
    r: Vec<f64>,
    s_next: Vec<f64>,
    d: Vec<f64>,
    /// Transition is the last of its episode (termination or time limit).
    end: Vec<bool>,
    /// Total transitions ever pushed; slot of absolute index `i` is `i % capacity`.
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 || obs_dim == 0 || act_dim == 0 {
            return Err(MtcError::Config("replay capacity and dimensions must be positive".into()));
        }
        Ok(Self {
            capacity,
            obs_dim,
            act_dim,
            s: Vec::new(),
            a: Vec::new(),
            r: Vec::new(),
            s_next: Vec::new(),
            d: Vec::new(),
            end: Vec::new(),
            pushed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.pushed.min(self.capacity as u64) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.pushed == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Absolute index of the oldest stored transition.
    pub fn oldest(&self) -> u64 {
        self.pushed - self.len() as u64
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.s.len() != self.obs_dim || t.s_next.len() != self.obs_dim || t.a.len() != self.act_dim {
            return Err(MtcError::Shape("transition dimensions differ from the buffer".into()));
        }
        if t.d != 0.0 && t.d != 1.0 {
            return Err(MtcError::Contract(format!("done flag must be 0 or 1, got {}", t.d)));
        }
        let slot = (self.pushed % self.capacity as u64) as usize;
        if self.end.len() < self.capacity {
            self.s.extend_from_slice(&t.s);
            self.a.extend_from_slice(&t.a);
            self.r.push(t.r);
            self.s_next.extend_from_slice(&t.s_next);
            self.d.push(t.d);
            self.end.push(t.ends_episode());
        } else {
            let (o, k) = (self.obs_dim, self.act_dim);
            self.s[slot * o..(slot + 1) * o].copy_from_slice(&t.s);
            self.a[slot * k..(slot + 1) * k].copy_from_slice(&t.a);
            self.r[slot] = t.r;
            self.s_next[slot * o..(slot + 1) * o].copy_from_slice(&t.s_next);
            self.d[slot] = t.d;
            self.end[slot] = t.ends_episode();
        }
        self.pushed += 1;
        Ok(())
    }

    fn slot(&self, i: u64) -> usize {
        (i % self.capacity as u64) as usize
    }

    /// Whether the `h` transitions starting at absolute index `start` are
    /// stored and belong to one episode.
    pub fn is_valid_start(&self, start: u64, h: usize) -> bool {
        if h == 0 || start < self.oldest() || start + h as u64 > self.pushed {
            return false;
        }
        (0..h as u64 - 1).all(|k| !self.end[self.slot(start + k)])
    }

    pub fn valid_starts(&self, h: usize) -> Vec<u64> {
        (self.oldest()..self.pushed).filter(|&i| self.is_valid_start(i, h)).collect()
    }

    pub fn window(&self, start: u64, h: usize) -> Result<SequenceWindow> {
        if !self.is_valid_start(start, h) {
            return Err(MtcError::Contract(format!("no valid window of length {h} at {start}")));
        }
        let (o, k) = (self.obs_dim, self.act_dim);
        let mut states = Vec::with_capacity(h + 1);
        let mut actions = Vec::with_capacity(h);
        let mut rewards = Vec::with_capacity(h);
        let mut dones = Vec::with_capacity(h);
        for j in 0..h as u64 {
            let i = self.slot(start + j);
            states.push(self.s[i * o..(i + 1) * o].to_vec());
            actions.push(self.a[i * k..(i + 1) * k].to_vec());
            rewards.push(self.r[i]);
            dones.push(self.d[i]);
        }
        let last = self.slot(start + h as u64 - 1);
        states.push(self.s_next[last * o..(last + 1) * o].to_vec());
        Ok(SequenceWindow { states, actions, rewards, dones, start })
    }

    fn sample_start(&self, h: usize, rng: &mut impl Rng) -> Result<u64> {
        let not_ready = || MtcError::NotReady(format!("no window of {h} transitions stored yet"));
        if self.len() < h || h == 0 {
            return Err(not_ready());
        }
        let (lo, hi) = (self.oldest(), self.pushed - h as u64);
        for _ in 0..REJECTION_TRIES {
            let i = rng.random_range(lo..=hi);
            if self.is_valid_start(i, h) {
                return Ok(i);
            }
        }
        // rare: valid starts are very sparse
        let valid = self.valid_starts(h);
        if valid.is_empty() {
            return Err(not_ready());
        }
        Ok(valid[rng.random_range(0..valid.len())])
    }

    /// Uniformly sampled windows of `h` transitions.
    pub fn sample_windows(&self, batch: usize, h: usize, rng: &mut impl Rng) -> Result<Vec<SequenceWindow>> {
        (0..batch).map(|_| self.sample_start(h, rng).and_then(|s| self.window(s, h))).collect()
    }

    pub fn sample_batch(&self, batch: usize, h: usize, rng: &mut impl Rng) -> Result<WindowBatch> {
        WindowBatch::from_windows(&self.sample_windows(batch, h, rng)?)
    }

    /// Stores the buffer contents in `ckpt` under `prefix`.
    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        let meta = vec![self.capacity as f64, self.obs_dim as f64, self.act_dim as f64, self.pushed as f64];
        ckpt.push(format!("{prefix}.meta"), Tensor::new(vec![4], meta)?);
        let n = self.end.len();
        if n > 0 {
            ckpt.push(format!("{prefix}.s"), Tensor::matrix(n, self.obs_dim, self.s.clone())?);
            ckpt.push(format!("{prefix}.a"), Tensor::matrix(n, self.act_dim, self.a.clone())?);
            ckpt.push(format!("{prefix}.r"), Tensor::new(vec![n], self.r.clone())?);
            ckpt.push(format!("{prefix}.s_next"), Tensor::matrix(n, self.obs_dim, self.s_next.clone())?);
            ckpt.push(format!("{prefix}.d"), Tensor::new(vec![n], self.d.clone())?);
            let end = self.end.iter().map(|&e| e as u8 as f64).collect();
            ckpt.push(format!("{prefix}.end"), Tensor::new(vec![n], end)?);
        }
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta = ckpt.expect(&format!("{prefix}.meta"), &[4])?.data().to_vec();
        let mut buf = Self::new(meta[0] as usize, meta[1] as usize, meta[2] as usize)?;
        buf.pushed = meta[3] as u64;
        let n = buf.len();
        if n > 0 {
            let (o, k) = (buf.obs_dim, buf.act_dim);
            buf.s = ckpt.expect(&format!("{prefix}.s"), &[n, o])?.data().to_vec();
            buf.a = ckpt.expect(&format!("{prefix}.a"), &[n, k])?.data().to_vec();
            buf.r = ckpt.expect(&format!("{prefix}.r"), &[n])?.data().to_vec();
            buf.s_next = ckpt.expect(&format!("{prefix}.s_next"), &[n, o])?.data().to_vec();
            buf.d = ckpt.expect(&format!("{prefix}.d"), &[n])?.data().to_vec();
            buf.end = ckpt.expect(&format!("{prefix}.end"), &[n])?.data().iter().map(|&e| e == 1.0).collect();
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tr(x: f64, end: bool) -> Transition {
        Transition { s: vec![x], a: vec![0.0], r: x, s_next: vec![x + 1.0], d: 0.0, truncated: end }
    }

    fn episode(buf: &mut ReplayBuffer, from: f64, len: usize) {
        for k in 0..len {
            buf.push(&tr(from + k as f64, k + 1 == len)).unwrap();
        }
    }

    #[test]
    fn capacity_one_overwrites() {
        let mut b = ReplayBuffer::new(1, 1, 1).unwrap();
        b.push(&tr(1.0, false)).unwrap();
        b.push(&tr(2.0, false)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.window(1, 1).unwrap().rewards, vec![2.0]);
    }

    #[test]
    fn one_start_for_a_single_window_episode() {
        let mut b = ReplayBuffer::new(100, 1, 1).unwrap();
        episode(&mut b, 0.0, 8);
        assert_eq!(b.valid_starts(8), vec![0]);
        episode(&mut b, 100.0, 9);
        assert_eq!(b.valid_starts(8), vec![0, 8, 9]);
    }

    #[test]
    fn windows_are_contiguous() {
        let mut b = ReplayBuffer::new(50, 1, 1).unwrap();
        for e in 0..10 {
            episode(&mut b, 1000.0 * e as f64, 7);
        }
        let mut rng = stream(1, "test");
        for w in b.sample_windows(500, 4, &mut rng).unwrap() {
            for k in 0..4 {
                assert_eq!(w.states[k + 1][0], w.states[k][0] + 1.0);
            }
        }
    }

    #[test]
    fn not_ready_when_no_window() {
        let mut b = ReplayBuffer::new(50, 1, 1).unwrap();
        episode(&mut b, 0.0, 3);
        episode(&mut b, 10.0, 3);
        let mut rng = stream(1, "test");
        assert!(matches!(b.sample_windows(1, 4, &mut rng), Err(MtcError::NotReady(_))));
    }
}
