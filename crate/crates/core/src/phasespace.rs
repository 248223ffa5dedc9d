//! Branch-by-branch phase-space trajectories of every mode under
//! instantaneous kicks and exact free rotation.
//!
//! This is deliberately written without reference to the closed forms in
//! [`crate::kicks`] so the two can check each other.

use std::f64::consts::{FRAC_PI_4, SQRT_2};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chain::{ModeStructure, ThermalState};
use crate::error::{Error, Result};
use crate::kicks::{check_pair, FlatKicks, Scheme};

/// Default dense sampling density for exports.
pub const DEFAULT_SAMPLES_PER_PERIOD: f64 = 200.0;

/// Two-qubit basis state of the addressed pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    UpUp,
    UpDown,
    DownUp,
    DownDown,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::UpUp, Branch::UpDown, Branch::DownUp, Branch::DownDown];

    pub fn label(self) -> &'static str {
        match self {
            Branch::UpUp => "uu",
            Branch::UpDown => "ud",
            Branch::DownUp => "du",
            Branch::DownDown => "dd",
        }
    }

    /// Spin signs of ions m and n.
    fn spins(self) -> (f64, f64) {
        match self {
            Branch::UpUp => (1.0, 1.0),
            Branch::UpDown => (1.0, -1.0),
            Branch::DownUp => (-1.0, 1.0),
            Branch::DownDown => (-1.0, -1.0),
        }
    }

    /// +1 for same-spin branches, −1 for opposite-spin ones.
    fn parity(self) -> f64 {
        let (a, b) = self.spins();
        a * b
    }
}

/// State immediately before and after one kick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KickState {
    pub t: f64,
    pub x_before: f64,
    pub y_before: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTrack {
    pub branch: Branch,
    /// `s_m b^(m) + s_n b^(n)` for this branch.
    pub coupling: f64,
    pub states: Vec<KickState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTrack {
    pub omega: f64,
    pub branches: Vec<BranchTrack>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub modes: Vec<ModeTrack>,
    pub com_period: f64,
}

/// Free rotation of `(X, Y)` by phase `ωΔt`.
pub fn rotate(x: f64, y: f64, phase: f64) -> (f64, f64) {
    let (s, c) = phase.sin_cos();
    (x * c + y * s, -x * s + y * c)
}

/// Runs all four spin branches of every mode from the origin.
///
/// At each kick `Y += √2 c_j B η_α` (doubled for paired kicks), where `B`
/// is the branch coupling; between kicks the state rotates exactly.
pub fn simulate(
    kicks: &FlatKicks,
    modes: &ModeStructure,
    pair: (usize, usize),
    scheme: Scheme,
) -> Result<Trajectory> {
    check_pair(pair, modes.ion_count())?;
    if let Some(index) = kicks.times.windows(2).position(|w| !(w[1] >= w[0])) {
        return Err(Error::UnorderedKicks { index: index + 1 });
    }
    let strength = match scheme {
        Scheme::Unpaired => 1.0,
        Scheme::Paired => 2.0,
    };
    let tracks = (0..modes.mode_count())
        .map(|a| {
            let omega = modes.frequencies[a];
            let eta = modes.lamb_dicke[a];
            let branches = Branch::ALL
                .iter()
                .map(|&branch| {
                    let (sm, sn) = branch.spins();
                    let coupling = sm * modes.coupling(a, pair.0) + sn * modes.coupling(a, pair.1);
                    let mut states = Vec::with_capacity(kicks.len());
                    let (mut x, mut y) = (0.0, 0.0);
                    let mut clock = kicks.times.first().copied().unwrap_or(0.0);
                    for (&t, &c) in kicks.times.iter().zip(&kicks.signs) {
                        (x, y) = rotate(x, y, omega * (t - clock));
                        clock = t;
                        let dy = SQRT_2 * f64::from(c) * coupling * eta * strength;
                        states.push(KickState {
                            t,
                            x_before: x,
                            y_before: y,
                            x,
                            y: y + dy,
                        });
                        y += dy;
                    }
                    BranchTrack {
                        branch,
                        coupling,
                        states,
                    }
                })
                .collect();
            ModeTrack { omega, branches }
        })
        .collect();
    Ok(Trajectory {
        modes: tracks,
        com_period: modes.com_period,
    })
}

/// Per mode, per branch (in [`Branch::ALL`] order): `θ = Σ_j ½ X(t_j⁻) ΔY_j`.
pub fn accumulated_phase(trajectory: &Trajectory) -> Vec<[f64; 4]> {
    trajectory
        .modes
        .iter()
        .map(|m| {
            let mut out = [0.0; 4];
            for (slot, b) in out.iter_mut().zip(&m.branches) {
                *slot = b
                    .states
                    .iter()
                    .map(|s| 0.5 * s.x_before * (s.y - s.y_before))
                    .sum();
            }
            out
        })
        .collect()
}

/// `¼ Σ_α (θ_uu + θ_dd − θ_ud − θ_du)`.
pub fn combined_phase(trajectory: &Trajectory) -> f64 {
    let phases = accumulated_phase(trajectory);
    let mut total = 0.0;
    for (m, th) in trajectory.modes.iter().zip(&phases) {
        for (b, v) in m.branches.iter().zip(th) {
            total += 0.25 * b.branch.parity() * v;
        }
    }
    total
}

/// Per mode, per branch: `|Δβ|² = ½(X² + Y²)` after the last kick.
pub fn final_displacements(trajectory: &Trajectory) -> Vec<[f64; 4]> {
    trajectory
        .modes
        .iter()
        .map(|m| {
            let mut out = [0.0; 4];
            for (slot, b) in out.iter_mut().zip(&m.branches) {
                if let Some(s) = b.states.last() {
                    *slot = 0.5 * (s.x * s.x + s.y * s.y);
                }
            }
            out
        })
        .collect()
}

/// Gate error from the trajectory route.
///
/// Each branch displacement carries the branch coupling squared, so the
/// four-branch sum is `4[(b^(m))² + (b^(n))²]|Δβ_α|²`. The prefactor 1/3 on
/// that sum makes this agree term by term with
/// [`crate::kicks::gate_error`].
pub fn ode_gate_error(trajectory: &Trajectory, thermal: &ThermalState) -> Result<f64> {
    if thermal.occupations.len() != trajectory.modes.len() {
        return Err(Error::invalid("thermal", "occupation count differs from mode count"));
    }
    let mismatch = combined_phase(trajectory).abs() - FRAC_PI_4;
    let motional: f64 = final_displacements(trajectory)
        .iter()
        .zip(&thermal.occupations)
        .map(|(d, n)| (0.5 + n) * d.iter().sum::<f64>())
        .sum();
    Ok(2.0 / 3.0 * mismatch * mismatch + motional / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub mode: usize,
    pub branch: Branch,
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

/// Number of dense sample times on `[t_start, t_end]` at `per_period`
/// points per COM period (both ends included).
pub fn dense_sample_count(trajectory: &Trajectory, t_start: f64, t_end: f64, per_period: f64) -> usize {
    let span = (t_end - t_start).max(0.0);
    (span / trajectory.com_period * per_period).ceil() as usize + 1
}

/// Evenly spaced samples of every mode and branch on `[t_start, t_end]`.
/// Kicks landing exactly on a sample time are counted as already applied.
pub fn dense_samples(
    trajectory: &Trajectory,
    t_start: f64,
    t_end: f64,
    per_period: f64,
) -> Result<Vec<Sample>> {
    if !(t_end >= t_start) {
        return Err(Error::invalid("t_end", "must not precede t_start"));
    }
    if !(per_period > 0.0) {
        return Err(Error::invalid("per_period", "must be positive"));
    }
    let count = dense_sample_count(trajectory, t_start, t_end, per_period);
    let step = if count > 1 {
        (t_end - t_start) / (count - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(count * 4 * trajectory.modes.len());
    for (mode, m) in trajectory.modes.iter().enumerate() {
        for b in &m.branches {
            let mut next = 0;
            for i in 0..count {
                let t = t_start + step * i as f64;
                while next < b.states.len() && b.states[next].t <= t {
                    next += 1;
                }
                let (x, y) = match next.checked_sub(1).map(|k| b.states[k]) {
                    Some(s) => rotate(s.x, s.y, m.omega * (t - s.t)),
                    None => (0.0, 0.0),
                };
                out.push(Sample {
                    mode,
                    branch: b.branch,
                    t,
                    x,
                    y,
                });
            }
        }
    }
    Ok(out)
}

/// CSV with columns `mode,branch,t_s,X,Y`.
pub fn write_samples_csv<W: Write>(samples: &[Sample], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(["mode", "branch", "t_s", "X", "Y"])?;
    for s in samples {
        w.write_record([
            s.mode.to_string(),
            s.branch.label().to_string(),
            format!("{:e}", s.t),
            format!("{:e}", s.x),
            format!("{:e}", s.y),
        ])?;
    }
    w.flush()?;
    Ok(())
}
