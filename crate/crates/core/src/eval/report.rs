use std::collections::BTreeMap;

use super::rollout;
use crate::envs::{base_env, PerturbationConfig};
use crate::error::{MtcError, Result};
use crate::nn::ModelSet;
use crate::util::fmt_g9;

pub const REPORT_HEADER: &str = "method,task,perturbation kind,level,seed,mean_return,ci90,normalized_score";

/// z-value of a two-sided 90% normal interval.
pub const Z90: f64 = 1.645;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PerturbKind {
    Obs,
    Act,
    Mass,
    Distract,
}

impl PerturbKind {
    pub const NAMES: [&'static str; 4] = ["obs", "act", "mass", "distract"];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "obs" => Ok(Self::Obs),
            "act" => Ok(Self::Act),
            "mass" => Ok(Self::Mass),
            "distract" => Ok(Self::Distract),
            other => Err(MtcError::Config(format!("unknown perturbation kind {other:?}; valid: {}", Self::NAMES.join(", ")))),
        }
    }

    pub fn as_str(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    pub fn default_levels(self) -> Vec<f64> {
        match self {
            Self::Obs => vec![0.02, 0.04, 0.06, 0.08, 0.1],
            Self::Act => vec![0.1, 0.2, 0.3, 0.4, 0.5],
            Self::Mass => vec![0.25, 0.5, 0.75, 1.25, 1.5, 1.75],
            Self::Distract => vec![0.05, 0.1, 0.2, 0.4],
        }
    }

    /// Level that leaves the environment unchanged.
    pub fn identity_level(self) -> f64 {
        match self {
            Self::Mass => 1.0,
            _ => 0.0,
        }
    }

    /// `base` with this kind's parameter set to `level`. Distractor levels
    /// are innovation scales; the count comes from `base`.
    pub fn apply(self, base: &PerturbationConfig, level: f64) -> PerturbationConfig {
        let mut p = base.clone();
        match self {
            Self::Obs => p.obs_noise_sigma = level,
            Self::Act => p.action_noise_sigma = level,
            Self::Mass => p.mass_scale = level,
            Self::Distract => p.distractor_sigma = level,
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub task: String,
    pub kind: String,
    pub level: f64,
    /// `None` marks the across-seed aggregate.
    pub seed: Option<u64>,
    pub mean_return: f64,
    pub ci90: f64,
    pub normalized_score: f64,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Half-width of the normal-approximation 90% interval of the mean.
pub fn ci90(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    Z90 * (var / n as f64).sqrt()
}

pub struct SweepSpec<'a> {
    pub method: &'a str,
    pub env_id: &'a str,
    pub kind: PerturbKind,
    pub levels: &'a [f64],
    pub seeds: &'a [u64],
    pub episodes: usize,
    pub horizon: usize,
    pub base: PerturbationConfig,
}

/// Full factorial of levels × seeds. Each cell builds its own environment
/// from its seed, so cells do not depend on grid order.
pub fn robustness_sweep(models: &ModelSet, s: &SweepSpec) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &level in s.levels {
        let p = s.kind.apply(&s.base, level);
        let mut seed_means = Vec::with_capacity(s.seeds.len());
        for &seed in s.seeds {
            let r = rollout(models, s.env_id, &p, s.episodes, seed, s.horizon)?;
            if r.returns.is_empty() {
                continue;
            }
            let m = mean(&r.returns);
            seed_means.push(m);
            rows.push(ReportRow {
                method: s.method.into(),
                task: s.env_id.into(),
                kind: s.kind.as_str().into(),
                level,
                seed: Some(seed),
                mean_return: m,
                ci90: ci90(&r.returns),
                normalized_score: f64::NAN,
            });
        }
        if !seed_means.is_empty() {
            rows.push(ReportRow {
                method: s.method.into(),
                task: s.env_id.into(),
                kind: s.kind.as_str().into(),
                level,
                seed: None,
                mean_return: mean(&seed_means),
                ci90: ci90(&seed_means),
                normalized_score: f64::NAN,
            });
        }
    }
    normalize(&mut rows, s.horizon)?;
    Ok(rows)
}

/// Lowest achievable return of a task, the zero point of normalized scores.
pub fn return_floor(task: &str, horizon: usize) -> Result<f64> {
    Ok(base_env(task, 0, horizon.max(1))?.reward_range().0 * horizon as f64)
}

/// Scores are returns shifted by the task's return floor; each is divided
/// by the best method's score in the same (task, kind, level, seed) cell.
pub fn normalize(rows: &mut [ReportRow], horizon: usize) -> Result<()> {
    let mut floors = BTreeMap::new();
    for r in rows.iter() {
        if !floors.contains_key(&r.task) {
            floors.insert(r.task.clone(), return_floor(&r.task, horizon)?);
        }
    }
    let key = |r: &ReportRow| (r.task.clone(), r.kind.clone(), r.level.to_bits(), r.seed);
    let mut best: BTreeMap<_, f64> = BTreeMap::new();
    for r in rows.iter() {
        let score = r.mean_return - floors[&r.task];
        let e = best.entry(key(r)).or_insert(f64::NEG_INFINITY);
        *e = e.max(score);
    }
    for r in rows.iter_mut() {
        let b = best[&key(r)];
        let score = r.mean_return - floors[&r.task];
        r.normalized_score = if b > 0.0 { score / b } else { 1.0 };
    }
    Ok(())
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let seed = r.seed.map_or("all".to_string(), |x| x.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.task,
            r.kind,
            fmt_g9(r.level),
            seed,
            fmt_g9(r.mean_return),
            fmt_g9(r.ci90),
            fmt_g9(r.normalized_score)
        ));
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(MtcError::Contract("report CSV header does not match the documented schema".into()));
    }
    let f = |v: &str| v.parse::<f64>().map_err(|_| MtcError::Contract(format!("bad number {v:?} in report")));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            if c.len() != 8 {
                return Err(MtcError::Contract(format!("report row has {} fields: {l}", c.len())));
            }
            let seed = if c[4] == "all" {
                None
            } else {
                Some(c[4].parse().map_err(|_| MtcError::Contract(format!("bad seed {:?}", c[4])))?)
            };
            Ok(ReportRow {
                method: c[0].into(),
                task: c[1].into(),
                kind: c[2].into(),
                level: f(c[3])?,
                seed,
                mean_return: f(c[5])?,
                ci90: f(c[6])?,
                normalized_score: f(c[7])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, ret: f64) -> ReportRow {
        ReportRow {
            method: method.into(),
            task: "pendulum".into(),
            kind: "act".into(),
            level: 0.2,
            seed: None,
            mean_return: ret,
            ci90: 0.0,
            normalized_score: f64::NAN,
        }
    }

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(ci90(&[3.0, 3.0, 3.0]), 0.0);
        assert_eq!(ci90(&[3.0]), 0.0);
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((ci90(&v) - 1.645 * (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn best_method_scores_one() {
        let mut rows = vec![row("a", -500.0), row("b", -1000.0)];
        normalize(&mut rows, 1000).unwrap();
        assert_eq!(rows[0].normalized_score, 1.0);
        assert!(rows[1].normalized_score < 1.0 && rows[1].normalized_score > 0.0);
        let mut single = vec![row("a", -700.0)];
        normalize(&mut single, 1000).unwrap();
        assert_eq!(single[0].normalized_score, 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let mut rows = vec![row("a", -512.25), row("b", -1000.0)];
        rows[1].seed = Some(3);
        normalize(&mut rows, 1000).unwrap();
        let text = report_csv(&rows);
        let back = parse_report_csv(&text).unwrap();
        assert_eq!(report_csv(&back), text);
        assert!(parse_report_csv("a,b\n").is_err());
    }
}
