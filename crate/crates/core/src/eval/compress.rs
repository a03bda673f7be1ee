use std::fmt::Write as _;
use std::io::Write as _;

use bzip2::write::BzEncoder;
use bzip2::Compression;

use super::Trajectory;
use crate::error::{MtcError, Result};

/// Lossless block compressor used for size measurements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compressor {
    Bzip2,
}

impl Compressor {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "bzip2" => Ok(Self::Bzip2),
            other => Err(MtcError::Compressor(format!("compressor {other:?} is not available (supported: bzip2)"))),
        }
    }

    pub fn compress(self, data: &[u8]) -> Result<Vec<u8>> {
        match self {
            Self::Bzip2 => {
                let mut enc = BzEncoder::new(Vec::new(), Compression::best());
                enc.write_all(data).map_err(|e| MtcError::Compressor(e.to_string()))?;
                enc.finish().map_err(|e| MtcError::Compressor(e.to_string()))
            }
        }
    }
}

/// `%.1f` with negative zero printed as `0.0`.
pub fn fmt_one_decimal(x: f64) -> String {
    let s = format!("{x:.1}");
    if s == "-0.0" {
        "0.0".into()
    } else {
        s
    }
}

/// Canonical text encoding: a header line, then one line of
/// comma-separated one-decimal values (state then action) per step.
pub fn trajectory_text(traj: &Trajectory) -> Result<String> {
    if traj.is_empty() {
        return Err(MtcError::Contract("cannot serialize an empty trajectory".into()));
    }
    if traj.states.len() != traj.actions.len() {
        return Err(MtcError::Shape("trajectory needs one state per action".into()));
    }
    let mut s = String::new();
    let _ = writeln!(s, "# env={} dim_s={} dim_a={} steps={} prec=1", traj.env, traj.obs_dim(), traj.act_dim(), traj.len());
    for (st, a) in traj.states.iter().zip(&traj.actions) {
        let fields: Vec<String> = st.iter().chain(a).map(|&x| fmt_one_decimal(x)).collect();
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Full-precision dump: per step, state then action as little-endian f64.
pub fn binary_dump(traj: &Trajectory) -> Vec<u8> {
    let mut out = Vec::with_capacity(traj.len() * (traj.obs_dim() + traj.act_dim()) * 8);
    for (st, a) in traj.states.iter().zip(&traj.actions) {
        for x in st.iter().chain(a) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Compressed byte count of the canonical text encoding.
pub fn compress_trajectory(traj: &Trajectory, compressor: Compressor) -> Result<usize> {
    let text = trajectory_text(traj)?;
    Ok(compressor.compress(text.as_bytes())?.len())
}

/// Divides each size by the largest one.
pub fn normalized_size(sizes: &[(String, f64)]) -> Result<Vec<(String, f64)>> {
    let max = sizes.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    if sizes.iter().any(|(_, s)| !(*s > 0.0) || !s.is_finite()) {
        return Err(MtcError::Contract("compressed sizes must be positive".into()));
    }
    Ok(sizes.iter().map(|(m, s)| (m.clone(), s / max)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Trajectory {
        Trajectory { env: "pendulum".into(), states, actions }
    }

    #[test]
    fn canonical_text() {
        let t = traj(vec![vec![0.04, -0.04], vec![1.26, 2.0]], vec![vec![-0.96], vec![0.149]]);
        assert_eq!(trajectory_text(&t).unwrap(), "# env=pendulum dim_s=2 dim_a=1 steps=2 prec=1\n0.0,0.0,-1.0\n1.3,2.0,0.1\n");
        assert!(trajectory_text(&traj(vec![], vec![])).is_err());
    }

    #[test]
    fn unknown_compressor_fails() {
        assert!(matches!(Compressor::parse("zstd"), Err(MtcError::Compressor(_))));
    }

    #[test]
    fn normalization() {
        let r = normalized_size(&[("a".into(), 50.0), ("b".into(), 200.0)]).unwrap();
        assert_eq!(r[0].1, 0.25);
        assert_eq!(r[1].1, 1.0);
        assert_eq!(normalized_size(&[("x".into(), 7.0)]).unwrap()[0].1, 1.0);
    }
}
