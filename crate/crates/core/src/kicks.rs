//! Anti-symmetric pulse-group sequences and their closed-form gate metrics.

use std::f64::consts::FRAC_PI_4;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::chain::{ModeStructure, ThermalState};
use crate::error::{Error, Result};

/// Default bound on `|z_j|`.
pub const DEFAULT_Z_MAX: u32 = 5;

/// Relative slack on the minimum kick spacing, so that grid-aligned
/// sequences are not rejected by rounding.
const SPACING_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// One spin flip per kick.
    #[default]
    Unpaired,
    /// Spin-preserving double kicks: twice the momentum per SDK.
    Paired,
}

impl Scheme {
    pub fn phase_factor(self) -> f64 {
        match self {
            Scheme::Unpaired => 1.0,
            Scheme::Paired => 4.0,
        }
    }

    pub fn displacement_factor(self) -> f64 {
        match self {
            Scheme::Unpaired => 1.0,
            Scheme::Paired => 2.0,
        }
    }
}

/// One group on the positive half: `z` kicks centred on `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfGroup {
    pub z: i32,
    /// s, > 0
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApgSequence {
    pub scheme: Scheme,
    /// Hz; `None` means groups fire instantaneously.
    pub f_rep: Option<f64>,
    pub half_groups: Vec<HalfGroup>,
    pub z_max: u32,
}

impl ApgSequence {
    pub fn new(
        scheme: Scheme,
        f_rep: Option<f64>,
        half_groups: Vec<HalfGroup>,
        z_max: u32,
    ) -> Result<Self> {
        if z_max == 0 {
            return Err(Error::invalid("z_max", "must be at least 1"));
        }
        if let Some(f) = f_rep {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::invalid("f_rep", format!("must be positive, got {f}")));
            }
        }
        for (i, g) in half_groups.iter().enumerate() {
            if !(g.time > 0.0 && g.time.is_finite()) {
                return Err(Error::invalid(
                    "half_groups",
                    format!("group {i} time must be positive, got {}", g.time),
                ));
            }
            if g.z.unsigned_abs() > z_max {
                return Err(Error::invalid(
                    "half_groups",
                    format!("group {i} has |z| = {} > z_max = {z_max}", g.z.abs()),
                ));
            }
        }
        for (i, w) in half_groups.windows(2).enumerate() {
            if !(w[1].time > w[0].time) {
                return Err(Error::invalid(
                    "half_groups",
                    format!("group times must increase strictly (groups {i}, {})", i + 1),
                ));
            }
        }
        Ok(Self {
            scheme,
            f_rep,
            half_groups,
            z_max,
        })
    }

    /// `Σ|z_j|` over the positive half.
    pub fn half_kick_count(&self) -> usize {
        self.half_groups.iter().map(|g| g.z.unsigned_abs() as usize).sum()
    }

    /// Total number of SDKs, `𝒩 = 2 Σ|z_j|`; even by construction.
    pub fn kick_count(&self) -> usize {
        2 * self.half_kick_count()
    }

    pub fn z_vector(&self) -> Vec<i32> {
        self.half_groups.iter().map(|g| g.z).collect()
    }

    /// All physical groups as `(signed z, centre)`, negative half first.
    pub fn physical_groups(&self) -> Vec<(i32, f64)> {
        let mut out: Vec<(i32, f64)> = self
            .half_groups
            .iter()
            .rev()
            .map(|g| (-g.z, -g.time))
            .collect();
        out.extend(self.half_groups.iter().map(|g| (g.z, g.time)));
        out
    }

    /// Same groups at a different repetition rate, unvalidated.
    pub fn with_f_rep(&self, f_rep: Option<f64>) -> Self {
        Self {
            f_rep,
            ..self.clone()
        }
    }

    pub fn with_scheme(&self, scheme: Scheme) -> Self {
        Self {
            scheme,
            ..self.clone()
        }
    }
}

/// Individually timed kicks with their effective signs `c_j = κ_j (−1)^(j+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatKicks {
    /// s, non-decreasing
    pub times: Vec<f64>,
    pub signs: Vec<i8>,
}

impl FlatKicks {
    pub fn new(times: Vec<f64>, signs: Vec<i8>) -> Result<Self> {
        if times.len() != signs.len() {
            return Err(Error::invalid("signs", "length differs from times"));
        }
        if let Some(index) = times.windows(2).position(|w| !(w[1] >= w[0])) {
            return Err(Error::UnorderedKicks { index: index + 1 });
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("signs", "entries must be ±1"));
        }
        Ok(Self { times, signs })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| f64::from(s)).collect()
    }

    /// Builds kicks from arbitrary physical groups without any spacing
    /// checks; kicks are sorted by time afterwards.
    pub fn from_groups_relaxed(groups: &[(i32, f64)], f_rep: Option<f64>) -> Self {
        let mut pairs: Vec<(f64, i8)> = Vec::new();
        for &(z, centre) in groups {
            let sign: i8 = if z > 0 { 1 } else { -1 };
            let count = z.unsigned_abs() as usize;
            for i in 0..count {
                pairs.push((centre + group_offset(i, count, f_rep), sign));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            times: pairs.iter().map(|p| p.0).collect(),
            signs: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// CSV with columns `time_s,sign`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["time_s", "sign"])?;
        for (t, s) in self.times.iter().zip(&self.signs) {
            w.write_record([format!("{t:e}"), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Offset of kick `i` of `count` from the group centre.
fn group_offset(i: usize, count: usize, f_rep: Option<f64>) -> f64 {
    match f_rep {
        Some(f) => (i as f64 - 0.5 * (count as f64 - 1.0)) / f,
        None => 0.0,
    }
}

/// Expands an APG sequence into timed kicks.
///
/// Kicks within a group are spaced by `1/f_rep` around the centre, and any
/// two kicks (including across the mirror at `t = 0`) must be at least
/// `1/f_rep` apart. The beam direction alternates inside a group, which
/// keeps the effective sign equal to `sign(z_j)` for every kick of it.
pub fn expand(seq: &ApgSequence) -> Result<FlatKicks> {
    let live: Vec<(usize, &HalfGroup)> = seq
        .half_groups
        .iter()
        .enumerate()
        .filter(|(_, g)| g.z != 0)
        .collect();
    if let Some(f) = seq.f_rep {
        let min_gap = (1.0 - SPACING_SLACK) / f;
        if let Some(&(i, g)) = live.first() {
            let first = g.time + group_offset(0, g.z.unsigned_abs() as usize, seq.f_rep);
            if 2.0 * first < min_gap {
                return Err(Error::CrossesOrigin { group: i, first });
            }
        }
        for w in live.windows(2) {
            let (i, a) = w[0];
            let (j, b) = w[1];
            let na = a.z.unsigned_abs() as usize;
            let nb = b.z.unsigned_abs() as usize;
            let last_a = a.time + group_offset(na - 1, na, seq.f_rep);
            let first_b = b.time + group_offset(0, nb, seq.f_rep);
            let gap = first_b - last_a;
            if gap < min_gap {
                return Err(Error::GroupOverlap {
                    left: i,
                    right: j,
                    gap,
                });
            }
        }
    }
    Ok(FlatKicks::from_groups_relaxed(&seq.physical_groups(), seq.f_rep))
}

/// `e^{iωt}` for every kick time.
fn phasors(times: &[f64], omega: f64) -> impl Iterator<Item = Complex64> + '_ {
    times.iter().map(move |&t| {
        let (s, c) = (omega * t).sin_cos();
        Complex64::new(c, s)
    })
}

/// Per-mode `Σ_{k<j} a_j a_k sin(ω(t_j − t_k))` for time-ordered kicks.
pub fn ordered_sine_sums(times: &[f64], amps: &[f64], modes: &ModeStructure) -> Vec<f64> {
    modes
        .frequencies
        .iter()
        .map(|&w| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut sum = 0.0;
            for (e, &a) in phasors(times, w).zip(amps) {
                sum += a * (e * acc.conj()).im;
                acc += a * e;
            }
            sum
        })
        .collect()
}

/// Two-qubit phase for kicks with arbitrary real amplitudes.
pub fn entangling_phase_amplitudes(
    times: &[f64],
    amps: &[f64],
    modes: &ModeStructure,
    pair: (usize, usize),
    scheme: Scheme,
) -> f64 {
    let (m, n) = pair;
    let sums = ordered_sine_sums(times, amps, modes);
    let theta: f64 = sums
        .iter()
        .enumerate()
        .map(|(a, s)| {
            let eta = modes.lamb_dicke[a];
            eta * eta * modes.coupling(a, m) * modes.coupling(a, n) * s
        })
        .sum();
    2.0 * scheme.phase_factor() * theta
}

/// `Θ = 2 Σ_α η_α² b_α^(m) b_α^(n) Σ_{k<j} c_j c_k sin(ω_α(t_j − t_k))`,
/// times 4 for paired kicks.
pub fn entangling_phase(
    kicks: &FlatKicks,
    modes: &ModeStructure,
    pair: (usize, usize),
    scheme: Scheme,
) -> f64 {
    entangling_phase_amplitudes(&kicks.times, &kicks.amplitudes(), modes, pair, scheme)
}

pub fn residual_displacement_amplitudes(
    times: &[f64],
    amps: &[f64],
    modes: &ModeStructure,
    scheme: Scheme,
) -> Vec<Complex64> {
    modes
        .frequencies
        .iter()
        .zip(&modes.lamb_dicke)
        .map(|(&w, &eta)| {
            let s: Complex64 = phasors(times, w).zip(amps).map(|(e, &a)| a * e).sum();
            Complex64::new(0.0, eta * scheme.displacement_factor()) * s
        })
        .collect()
}

/// `Δβ_α = i η_α Σ_j c_j e^{iω_α t_j}`, doubled for paired kicks.
pub fn residual_displacement(
    kicks: &FlatKicks,
    modes: &ModeStructure,
    scheme: Scheme,
) -> Vec<Complex64> {
    residual_displacement_amplitudes(&kicks.times, &kicks.amplitudes(), modes, scheme)
}

/// Motional part of the state-averaged error:
/// `(4/3) Σ_α (½ + n̄_α)[(b_α^(m))² + (b_α^(n))²]|Δβ_α|²`.
pub fn motional_error(
    displacements: &[Complex64],
    modes: &ModeStructure,
    thermal: &ThermalState,
    pair: (usize, usize),
) -> f64 {
    let (m, n) = pair;
    let sum: f64 = displacements
        .iter()
        .enumerate()
        .map(|(a, d)| {
            let bm = modes.coupling(a, m);
            let bn = modes.coupling(a, n);
            (0.5 + thermal.occupations[a]) * (bm * bm + bn * bn) * d.norm_sqr()
        })
        .sum();
    4.0 / 3.0 * sum
}

/// `ε = (2/3)(|Θ| − π/4)² + motional_error`.
pub fn gate_error(
    theta: f64,
    displacements: &[Complex64],
    modes: &ModeStructure,
    thermal: &ThermalState,
    pair: (usize, usize),
) -> f64 {
    let mismatch = theta.abs() - FRAC_PI_4;
    2.0 / 3.0 * mismatch * mismatch + motional_error(displacements, modes, thermal, pair)
}

/// `ε_ε = 2 ε_π (Σ|z_k|) ε_av` with the sum over the positive half.
pub fn sdk_weighted_cost(epsilon_av: f64, seq: &ApgSequence, epsilon_pi: f64) -> f64 {
    sdk_weighted_cost_for(epsilon_av, seq.half_kick_count(), epsilon_pi)
}

pub fn sdk_weighted_cost_for(epsilon_av: f64, half_kick_count: usize, epsilon_pi: f64) -> f64 {
    2.0 * epsilon_pi * half_kick_count as f64 * epsilon_av
}

/// `ε_tot = 1 − (1 − ε_π)^(2𝒩) (1 − ε_av)`.
pub fn total_error_with_sdk(epsilon_av: f64, kick_count: usize, epsilon_pi: f64) -> f64 {
    1.0 - (1.0 - epsilon_pi).powf(2.0 * kick_count as f64) * (1.0 - epsilon_av)
}

/// Laser phase `φ(t) = ω_A t + φ₀`, optionally shifted by a constant on
/// kicks at `t > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseModel {
    /// rad/s
    pub detuning: f64,
    /// rad
    pub offset: f64,
    /// rad, added to every kick in the second half of the gate
    pub second_half_shift: f64,
}

impl PhaseModel {
    pub fn phase(&self, t: f64) -> f64 {
        let shift = if t > 0.0 { self.second_half_shift } else { 0.0 };
        self.detuning * t + self.offset + shift
    }
}

/// `Φ_1Q = Σ_j c_j φ(t_j)`.
pub fn single_qubit_phase(kicks: &FlatKicks, model: &PhaseModel) -> f64 {
    kicks
        .times
        .iter()
        .zip(&kicks.signs)
        .map(|(&t, &c)| f64::from(c) * model.phase(t))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMetrics {
    /// rad
    pub theta_2q: f64,
    /// `|Θ| − π/4`, rad
    pub phase_mismatch: f64,
    pub residual_displacements: Vec<Complex64>,
    pub epsilon_av: f64,
    pub sdk_cost: f64,
    pub kick_count: usize,
}

impl GateMetrics {
    /// `ε_av + ε_ε`, the quantity the optimiser minimises.
    pub fn cost(&self) -> f64 {
        self.epsilon_av + self.sdk_cost
    }
}

pub fn check_pair(pair: (usize, usize), ion_count: usize) -> Result<()> {
    if pair.0 == pair.1 {
        return Err(Error::invalid("pair", "ions must be distinct"));
    }
    if pair.0 >= ion_count || pair.1 >= ion_count {
        return Err(Error::invalid(
            "pair",
            format!("indices {:?} out of range for {ion_count} ions", pair),
        ));
    }
    Ok(())
}

/// Metrics of `kicks` treated as an APG expansion with `half_kick_count`
/// kicks per half.
pub fn evaluate_kicks(
    kicks: &FlatKicks,
    scheme: Scheme,
    half_kick_count: usize,
    modes: &ModeStructure,
    pair: (usize, usize),
    thermal: &ThermalState,
    epsilon_pi: f64,
) -> Result<GateMetrics> {
    check_pair(pair, modes.ion_count())?;
    if thermal.occupations.len() != modes.mode_count() {
        return Err(Error::invalid("thermal", "occupation count differs from mode count"));
    }
    let theta = entangling_phase(kicks, modes, pair, scheme);
    let displacements = residual_displacement(kicks, modes, scheme);
    let epsilon_av = gate_error(theta, &displacements, modes, thermal, pair);
    Ok(GateMetrics {
        theta_2q: theta,
        phase_mismatch: theta.abs() - FRAC_PI_4,
        residual_displacements: displacements,
        epsilon_av,
        sdk_cost: sdk_weighted_cost_for(epsilon_av, half_kick_count, epsilon_pi),
        kick_count: 2 * half_kick_count,
    })
}

/// Expands `seq` and evaluates every closed-form metric.
pub fn evaluate(
    seq: &ApgSequence,
    modes: &ModeStructure,
    pair: (usize, usize),
    thermal: &ThermalState,
    epsilon_pi: f64,
) -> Result<GateMetrics> {
    let kicks = expand(seq)?;
    evaluate_kicks(
        &kicks,
        seq.scheme,
        seq.half_kick_count(),
        modes,
        pair,
        thermal,
        epsilon_pi,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Supersonic,
    Subsonic,
}

/// Supersonic iff `τ_G < τ_travel`.
pub fn classify_regime(gate_time: f64, modes: &ModeStructure) -> Result<Regime> {
    if !(gate_time > 0.0) {
        return Err(Error::invalid("gate_time", "must be positive"));
    }
    Ok(if gate_time < modes.travel_time {
        Regime::Supersonic
    } else {
        Regime::Subsonic
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{self, BeamGeometry, IonSpecies, TrapModel};
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn two_ion() -> ModeStructure {
        let trap = TrapModel::harmonic(IonSpecies::barium133(), 2.0e6, 2).unwrap();
        let geo = chain::equilibrium_positions(&trap).unwrap();
        chain::normal_modes(&trap, &geo, &BeamGeometry::default()).unwrap()
    }

    fn seq(groups: &[(i32, f64)], f_rep: Option<f64>) -> ApgSequence {
        let hg = groups.iter().map(|&(z, time)| HalfGroup { z, time }).collect();
        ApgSequence::new(Scheme::Unpaired, f_rep, hg, 5).unwrap()
    }

    #[test]
    fn single_group_mirrors() {
        let k = expand(&seq(&[(1, 1e-7)], Some(5e8))).unwrap();
        assert_eq!(k.times, vec![-1e-7, 1e-7]);
        assert_eq!(k.signs, vec![-1, 1]);
    }

    #[test]
    fn two_kick_group_centred() {
        let k = expand(&seq(&[(2, 1e-7)], Some(5e8))).unwrap();
        let expected = [-1e-7 - 1e-9, -1e-7 + 1e-9, 1e-7 - 1e-9, 1e-7 + 1e-9];
        for (t, e) in k.times.iter().zip(expected) {
            assert_relative_eq!(*t, e, max_relative = 1e-12);
        }
        assert_eq!(k.signs, vec![-1, -1, 1, 1]);
    }

    #[test]
    fn unbounded_rate_is_simultaneous() {
        let k = expand(&seq(&[(-3, 2e-7)], None)).unwrap();
        assert_eq!(k.times, vec![-2e-7, -2e-7, -2e-7, 2e-7, 2e-7, 2e-7]);
        assert_eq!(k.signs, vec![1, 1, 1, -1, -1, -1]);
    }

    #[test]
    fn overlap_and_origin_errors() {
        let s = seq(&[(3, 10e-9), (3, 13e-9)], Some(5e8));
        assert!(matches!(expand(&s), Err(Error::GroupOverlap { left: 0, right: 1, .. })));
        let s = seq(&[(3, 1.5e-9)], Some(5e8));
        assert!(matches!(expand(&s), Err(Error::CrossesOrigin { group: 0, .. })));
        // Exactly 1/f apart is fine, and zero groups are ignored.
        let s = seq(&[(1, 1e-9), (0, 1.5e-9), (1, 3e-9)], Some(5e8));
        assert!(expand(&s).is_ok());
    }

    #[test]
    fn construction_validation() {
        let g = |z, time| HalfGroup { z, time };
        assert!(ApgSequence::new(Scheme::Unpaired, None, vec![g(6, 1e-7)], 5).is_err());
        assert!(ApgSequence::new(Scheme::Unpaired, None, vec![g(1, -1e-7)], 5).is_err());
        assert!(ApgSequence::new(Scheme::Unpaired, None, vec![g(1, 2e-7), g(1, 1e-7)], 5).is_err());
        assert!(ApgSequence::new(Scheme::Unpaired, Some(0.0), vec![], 5).is_err());
        assert!(FlatKicks::new(vec![1.0, 0.0], vec![1, 1]).is_err());
        assert!(FlatKicks::new(vec![0.0], vec![2]).is_err());
    }

    #[test]
    fn trivial_phase_cases() {
        let modes = two_ion();
        let one = FlatKicks::new(vec![1e-7], vec![1]).unwrap();
        assert_eq!(entangling_phase(&one, &modes, (0, 1), Scheme::Unpaired), 0.0);
        let same = FlatKicks::new(vec![1e-7; 4], vec![1, -1, 1, 1]).unwrap();
        assert!(entangling_phase(&same, &modes, (0, 1), Scheme::Unpaired).abs() < 1e-20);
    }

    #[test]
    fn opposite_simultaneous_kicks_cancel() {
        let modes = two_ion();
        let k = FlatKicks::new(vec![3e-7, 3e-7], vec![1, -1]).unwrap();
        for d in residual_displacement(&k, &modes, Scheme::Unpaired) {
            assert_eq!(d.norm(), 0.0);
        }
    }

    #[test]
    fn two_kick_phase_by_hand() {
        let modes = two_ion();
        let (t1, t2) = (1e-7, 4e-7);
        let k = FlatKicks::new(vec![t1, t2], vec![1, -1]).unwrap();
        let mut expected = 0.0;
        for a in 0..2 {
            let eta = modes.lamb_dicke[a];
            expected += 2.0
                * eta
                * eta
                * modes.coupling(a, 0)
                * modes.coupling(a, 1)
                * (-1.0)
                * (modes.frequencies[a] * (t2 - t1)).sin();
        }
        let theta = entangling_phase(&k, &modes, (0, 1), Scheme::Unpaired);
        assert_relative_eq!(theta, expected, max_relative = 1e-12);
        let paired = entangling_phase(&k, &modes, (0, 1), Scheme::Paired);
        assert_relative_eq!(paired, 4.0 * theta, max_relative = 1e-14);
    }

    #[test]
    fn gate_error_cases() {
        let modes = two_ion();
        let cold = ThermalState::ground(2);
        let zero = vec![Complex64::new(0.0, 0.0); 2];
        assert_eq!(gate_error(FRAC_PI_4, &zero, &modes, &cold, (0, 1)), 0.0);
        assert_eq!(gate_error(-FRAC_PI_4, &zero, &modes, &cold, (0, 1)), 0.0);
        let d = 0.01;
        assert_relative_eq!(
            gate_error(FRAC_PI_4 + d, &zero, &modes, &cold, (0, 1)),
            2.0 / 3.0 * d * d,
            max_relative = 1e-9
        );
        let disp = vec![Complex64::new(0.0, 0.01), Complex64::new(0.0, 0.0)];
        let base = gate_error(FRAC_PI_4, &disp, &modes, &cold, (0, 1));
        let warm = ThermalState {
            temperature: 1e-4,
            occupations: vec![2.0, 1.0],
        };
        let hot = gate_error(FRAC_PI_4, &disp, &modes, &warm, (0, 1));
        assert_relative_eq!(hot / base, 2.5 / 0.5, max_relative = 1e-12);
        assert_relative_eq!(
            gate_error(0.0, &zero, &modes, &cold, (0, 1)),
            2.0 / 3.0 * FRAC_PI_4 * FRAC_PI_4,
            max_relative = 1e-15
        );
    }

    #[test]
    fn sdk_costs() {
        let s = seq(&[(5, 1e-7), (5, 2e-7), (5, 3e-7), (5, 4e-7), (5, 5e-7)], None);
        assert_eq!(s.half_kick_count(), 25);
        assert_relative_eq!(sdk_weighted_cost(1e-4, &s, 1e-3), 5e-6, max_relative = 1e-12);
        assert_eq!(sdk_weighted_cost(1e-4, &s, 0.0), 0.0);
        assert!(sdk_weighted_cost_for(1e-4, 26, 1e-3) > sdk_weighted_cost_for(1e-4, 25, 1e-3));
        assert_relative_eq!(total_error_with_sdk(0.0, 100, 1e-3), 0.181_351_17, max_relative = 1e-7);
        assert_relative_eq!(total_error_with_sdk(3e-4, 50, 0.0), 3e-4, max_relative = 1e-12);
        let small = total_error_with_sdk(1e-5, 10, 1e-7);
        assert_relative_eq!(small, 1e-5 + 2e-6, max_relative = 1e-3);
    }

    #[test]
    fn single_qubit_phase_cases() {
        let s = seq(&[(2, 1e-7), (-3, 3e-7), (1, 5e-7)], Some(5e8));
        let k = expand(&s).unwrap();
        let constant = PhaseModel {
            offset: 0.7,
            ..Default::default()
        };
        assert!(single_qubit_phase(&k, &constant).abs() < 1e-12);

        // A π shift on the second half leaves an integer multiple of π.
        let shifted = PhaseModel {
            offset: 0.7,
            second_half_shift: PI,
            ..Default::default()
        };
        let phi = single_qubit_phase(&k, &shifted);
        assert!((phi / PI - (phi / PI).round()).abs() < 1e-12);

        // Linear phase: mirror pairs give Σ_{t>0} c_j [φ(t_j) − φ(−t_j)].
        let linear = PhaseModel {
            detuning: 3e6,
            offset: 0.2,
            ..Default::default()
        };
        let by_pairs: f64 = k
            .times
            .iter()
            .zip(&k.signs)
            .filter(|(t, _)| **t > 0.0)
            .map(|(&t, &c)| f64::from(c) * (linear.phase(t) - linear.phase(-t)))
            .sum();
        assert_relative_eq!(single_qubit_phase(&k, &linear), by_pairs, max_relative = 1e-12);
    }

    #[test]
    fn regime_boundaries() {
        let modes = two_ion();
        assert_eq!(classify_regime(modes.com_period, &modes).unwrap(), Regime::Supersonic);
        assert_eq!(classify_regime(modes.travel_time, &modes).unwrap(), Regime::Subsonic);
        assert_eq!(classify_regime(10.0 * modes.com_period, &modes).unwrap(), Regime::Subsonic);
        assert!(classify_regime(0.0, &modes).is_err());
    }

    #[test]
    fn zero_sequence_metrics() {
        let modes = two_ion();
        let s = seq(&[], Some(5e8));
        let m = evaluate(&s, &modes, (0, 1), &ThermalState::ground(2), 1e-3).unwrap();
        assert_eq!(m.kick_count, 0);
        assert_eq!(m.theta_2q, 0.0);
        assert_relative_eq!(m.epsilon_av, 0.411_233_516, max_relative = 1e-8);
        assert!(evaluate(&s, &modes, (0, 0), &ThermalState::ground(2), 0.0).is_err());
        assert!(evaluate(&s, &modes, (0, 2), &ThermalState::ground(2), 0.0).is_err());
    }

    #[test]
    fn kicks_csv() {
        let k = expand(&seq(&[(1, 1e-7)], None)).unwrap();
        let mut buf = Vec::new();
        k.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "time_s,sign\n-1e-7,-1\n1e-7,1\n");
    }
}
