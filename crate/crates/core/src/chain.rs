//! Linear ion chains: trap potentials, equilibrium crystals and axial modes.
//!
//! Everything is SI internally. The equilibrium and Hessian are computed in
//! the natural length unit `l = (q²/κ₂)^(1/3)`, where forces are O(1).

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_symmetric;

/// Coulomb constant `e²/(4πε₀)` in J·m.
pub const COULOMB_Q2: f64 = 2.307_077_552e-28;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Boltzmann constant, J/K.
pub const KB: f64 = 1.380_649e-23;
/// Atomic mass unit, kg.
pub const AMU: f64 = 1.660_539_066_60e-27;

/// Relative residual target for the equilibrium solver, in units of `q²/s_min²`.
pub const EQUILIBRIUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    pub label: String,
    /// kg
    pub mass: f64,
}

impl IonSpecies {
    pub fn new(label: impl Into<String>, mass: f64) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::invalid("mass", format!("must be positive, got {mass}")));
        }
        Ok(Self {
            label: label.into(),
            mass,
        })
    }

    /// ¹³³Ba⁺, the default species.
    pub fn barium133() -> Self {
        Self {
            label: "Ba133".into(),
            mass: 132.905_907_4 * AMU,
        }
    }
}

/// Two tilted Raman beams whose difference wavevector drives the axial modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    /// m
    pub wavelength: f64,
    /// rad, measured from the transverse axis
    pub half_angle: f64,
}

impl BeamGeometry {
    pub fn new(wavelength: f64, half_angle: f64) -> Result<Self> {
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(Error::invalid("wavelength", "must be positive"));
        }
        if !(half_angle > 0.0 && half_angle < PI / 2.0) {
            return Err(Error::invalid(
                "half_angle",
                format!("must lie in (0, π/2), got {half_angle}"),
            ));
        }
        Ok(Self {
            wavelength,
            half_angle,
        })
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// `k_eff = 2 k sin θ`.
    pub fn k_eff(&self) -> f64 {
        2.0 * self.wavenumber() * self.half_angle.sin()
    }
}

impl Default for BeamGeometry {
    /// 532 nm beams at 30°, so that `k_eff = k`.
    fn default() -> Self {
        Self {
            wavelength: 532e-9,
            half_angle: PI / 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Potential {
    /// `m ω_t² z² / 2`
    Harmonic { omega_t: f64 },
    /// `κ₂ z²/2 + κ₄ z⁴/4`
    Quartic { kappa2: f64, kappa4: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapFamily {
    Harmonic,
    Quartic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapModel {
    pub species: IonSpecies,
    pub potential: Potential,
    pub ion_count: usize,
}

impl TrapModel {
    pub fn new(species: IonSpecies, potential: Potential, ion_count: usize) -> Result<Self> {
        if ion_count < 2 {
            return Err(Error::invalid("ion_count", "a chain needs at least two ions"));
        }
        match potential {
            Potential::Harmonic { omega_t } if !(omega_t > 0.0 && omega_t.is_finite()) => {
                return Err(Error::invalid("omega_t", "must be positive"));
            }
            Potential::Quartic { kappa2, kappa4 }
                if !(kappa2 > 0.0 && kappa4 >= 0.0 && kappa2.is_finite() && kappa4.is_finite()) =>
            {
                return Err(Error::invalid(
                    "kappa",
                    "need kappa2 > 0 and kappa4 >= 0",
                ));
            }
            _ => {}
        }
        Ok(Self {
            species,
            potential,
            ion_count,
        })
    }

    pub fn harmonic(species: IonSpecies, omega_t: f64, ion_count: usize) -> Result<Self> {
        Self::new(species, Potential::Harmonic { omega_t }, ion_count)
    }

    pub fn quartic(species: IonSpecies, kappa2: f64, kappa4: f64, ion_count: usize) -> Result<Self> {
        Self::new(species, Potential::Quartic { kappa2, kappa4 }, ion_count)
    }

    pub fn family(&self) -> TrapFamily {
        match self.potential {
            Potential::Harmonic { .. } => TrapFamily::Harmonic,
            Potential::Quartic { .. } => TrapFamily::Quartic,
        }
    }

    /// Quadratic stiffness in J·m⁻².
    pub fn kappa2(&self) -> f64 {
        match self.potential {
            Potential::Harmonic { omega_t } => self.species.mass * omega_t * omega_t,
            Potential::Quartic { kappa2, .. } => kappa2,
        }
    }

    /// Quartic stiffness in J·m⁻⁴.
    pub fn kappa4(&self) -> f64 {
        match self.potential {
            Potential::Harmonic { .. } => 0.0,
            Potential::Quartic { kappa4, .. } => kappa4,
        }
    }

    /// Natural length `(q²/κ₂)^(1/3)`.
    fn length_unit(&self) -> f64 {
        (COULOMB_Q2 / self.kappa2()).cbrt()
    }

    /// Dimensionless quartic strength `κ₄ l² / κ₂`.
    fn quartic_ratio(&self) -> f64 {
        let l = self.length_unit();
        self.kappa4() * l * l / self.kappa2()
    }

    /// Gradient of the total potential in N at SI positions.
    pub fn potential_gradient(&self, positions: &[f64]) -> Vec<f64> {
        let l = self.length_unit();
        let u: Vec<f64> = positions.iter().map(|z| z / l).collect();
        let force = COULOMB_Q2 / (l * l);
        reduced_gradient(&u, self.quartic_ratio())
            .into_iter()
            .map(|g| g * force)
            .collect()
    }
}

/// Equilibrium ion positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainGeometry {
    /// m, ascending
    pub positions: Vec<f64>,
    /// m
    pub min_separation: f64,
    /// Largest |∂V/∂z_j| at `positions`, N.
    pub residual: f64,
}

impl ChainGeometry {
    pub fn separations(&self) -> Vec<f64> {
        self.positions.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Gap between the two outermost ions on one end.
    pub fn edge_separation(&self) -> f64 {
        self.positions[1] - self.positions[0]
    }
}

/// Axial normal modes of an equilibrium chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStructure {
    /// rad/s, ascending
    pub frequencies: Vec<f64>,
    /// `couplings[α][j]` is ion `j`'s component of mode `α`'s unit eigenvector.
    pub couplings: Vec<Vec<f64>>,
    pub lamb_dicke: Vec<f64>,
    /// `2π/ω_COM`, s
    pub com_period: f64,
    /// `τ₀ / (ω_BR/ω_COM - 1)`, s
    pub travel_time: f64,
}

impl ModeStructure {
    /// Builds a mode structure from raw parts, deriving η, τ₀ and τ_travel.
    pub fn from_parts(
        frequencies: Vec<f64>,
        couplings: Vec<Vec<f64>>,
        species: &IonSpecies,
        beam: &BeamGeometry,
    ) -> Result<Self> {
        let n = frequencies.len();
        if n < 2 || couplings.len() != n || couplings.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("couplings", "need a square N×N matrix, N >= 2"));
        }
        if let Some(&w) = frequencies.iter().find(|&&w| !(w > 0.0)) {
            return Err(Error::NonPositiveMode { value: w });
        }
        let k = beam.k_eff();
        let lamb_dicke = frequencies
            .iter()
            .map(|&w| k * (HBAR / (2.0 * species.mass * w)).sqrt())
            .collect();
        let com_period = 2.0 * PI / frequencies[0];
        let travel_time = com_period / (frequencies[1] / frequencies[0] - 1.0);
        Ok(Self {
            frequencies,
            couplings,
            lamb_dicke,
            com_period,
            travel_time,
        })
    }

    pub fn mode_count(&self) -> usize {
        self.frequencies.len()
    }

    pub fn ion_count(&self) -> usize {
        self.couplings.first().map_or(0, Vec::len)
    }

    /// `b_α^(ion)`
    pub fn coupling(&self, mode: usize, ion: usize) -> f64 {
        self.couplings[mode][ion]
    }

    /// Copy with every frequency multiplied by `1 + shift`. Couplings and
    /// Lamb-Dicke parameters are left untouched.
    pub fn with_frequency_shift(&self, shift: f64) -> Self {
        let mut out = self.clone();
        for w in &mut out.frequencies {
            *w *= 1.0 + shift;
        }
        out
    }

    /// Copy with every Lamb-Dicke parameter multiplied by `scale`.
    pub fn with_lamb_dicke_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        for eta in &mut out.lamb_dicke {
            *eta *= scale;
        }
        out
    }

    /// Largest |(bᵀb − I)_ij|.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.mode_count();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = self.couplings[a]
                    .iter()
                    .zip(&self.couplings[b])
                    .map(|(x, y)| x * y)
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// One CSV row per mode: index, ω, η, then the coupling vector.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["mode".to_string(), "omega_rad_s".into(), "eta".into()];
        header.extend((0..self.ion_count()).map(|j| format!("b_{j}")));
        w.write_record(&header)?;
        for a in 0..self.mode_count() {
            let mut row = vec![
                a.to_string(),
                format!("{:e}", self.frequencies[a]),
                format!("{:e}", self.lamb_dicke[a]),
            ];
            row.extend(self.couplings[a].iter().map(|b| format!("{b:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalState {
    /// K
    pub temperature: f64,
    pub occupations: Vec<f64>,
}

impl ThermalState {
    /// All modes in the ground state.
    pub fn ground(mode_count: usize) -> Self {
        Self {
            temperature: 0.0,
            occupations: vec![0.0; mode_count],
        }
    }
}

/// `(κ₂, κ₄)` that hold a continuum chain of `n` ions at spacing `d`.
pub fn quartic_coefficients(n: usize, d: f64) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::invalid("ion_count", "need at least two ions"));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid("d", format!("spacing must be positive, got {d}")));
    }
    let n = n as f64;
    let kappa2 = 8.0 * COULOMB_Q2 / (d.powi(3) * n * n);
    let kappa4 = 32.0 * COULOMB_Q2 / (d.powi(5) * n.powi(4));
    Ok((kappa2, kappa4))
}

fn reduced_gradient(u: &[f64], beta: f64) -> Vec<f64> {
    let n = u.len();
    let mut g: Vec<f64> = u.iter().map(|&x| x + beta * x * x * x).collect();
    for j in 0..n {
        for k in (j + 1)..n {
            let inv = 1.0 / (u[k] - u[j]).powi(2);
            g[j] += inv;
            g[k] -= inv;
        }
    }
    g
}

fn reduced_hessian(u: &[f64], beta: f64) -> DMatrix<f64> {
    let n = u.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        h[(j, j)] = 1.0 + 3.0 * beta * u[j] * u[j];
    }
    for j in 0..n {
        for k in (j + 1)..n {
            let c = 2.0 / (u[k] - u[j]).abs().powi(3);
            h[(j, k)] = -c;
            h[(k, j)] = -c;
            h[(j, j)] += c;
            h[(k, k)] += c;
        }
    }
    h
}

fn reduced_energy(u: &[f64], beta: f64) -> f64 {
    let mut e: f64 = u.iter().map(|&x| 0.5 * x * x + 0.25 * beta * x.powi(4)).sum();
    for j in 0..u.len() {
        for k in (j + 1)..u.len() {
            e += 1.0 / (u[k] - u[j]);
        }
    }
    e
}

fn strictly_increasing(u: &[f64]) -> bool {
    u.windows(2).all(|w| w[1] > w[0])
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn symmetrize(u: &mut [f64]) {
    let n = u.len();
    for j in 0..n / 2 {
        let a = 0.5 * (u[j] - u[n - 1 - j]);
        u[j] = a;
        u[n - 1 - j] = -a;
    }
    if n % 2 == 1 {
        u[n / 2] = 0.0;
    }
}

/// Equilibrium positions by damped Newton iteration on the exact gradient.
///
/// The potential is convex on the ordered sector, so backtracking while
/// keeping the ions ordered converges from the uniform-spacing start.
pub fn equilibrium_positions(trap: &TrapModel) -> Result<ChainGeometry> {
    const MAX_ITER: usize = 200;
    let n = trap.ion_count;
    let beta = trap.quartic_ratio();
    let l = trap.length_unit();

    // Uniform start with the continuum spacing (8/N²)^(1/3) in units of l.
    let spacing = (8.0 / (n * n) as f64).cbrt();
    let mut u: Vec<f64> = (0..n)
        .map(|j| (j as f64 - 0.5 * (n - 1) as f64) * spacing)
        .collect();

    let mut grad = reduced_gradient(&u, beta);
    let mut gmax = max_abs(&grad);
    for _ in 0..MAX_ITER {
        if gmax == 0.0 {
            break;
        }
        let g = DVector::from_column_slice(&grad);
        let step = solve_symmetric(reduced_hessian(&u, beta), &g)
            .filter(|s| s.dot(&g) > 0.0)
            .unwrap_or(g);
        let e0 = reduced_energy(&u, beta);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let mut cand: Vec<f64> = u.iter().zip(step.iter()).map(|(x, s)| x - alpha * s).collect();
            symmetrize(&mut cand);
            if strictly_increasing(&cand) {
                let cg = reduced_gradient(&cand, beta);
                let cmax = max_abs(&cg);
                if reduced_energy(&cand, beta) < e0 || cmax < gmax {
                    accepted = Some((cand, cg, cmax));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, cg, cmax)) => {
                let stalled = cmax >= gmax;
                u = cand;
                grad = cg;
                gmax = cmax;
                if stalled {
                    break;
                }
            }
            None => break,
        }
    }

    let positions: Vec<f64> = u.iter().map(|x| x * l).collect();
    let min_separation = positions
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let residual = gmax * COULOMB_Q2 / (l * l);
    if !(residual < EQUILIBRIUM_TOLERANCE * COULOMB_Q2 / (min_separation * min_separation)) {
        return Err(Error::SolverDivergence { residual });
    }
    Ok(ChainGeometry {
        positions,
        min_separation,
        residual,
    })
}

/// Axial modes from the mass-weighted Hessian at `geometry`, including the
/// quartic curvature `3κ₄z²` and the linearised Coulomb coupling.
pub fn normal_modes(
    trap: &TrapModel,
    geometry: &ChainGeometry,
    beam: &BeamGeometry,
) -> Result<ModeStructure> {
    let n = trap.ion_count;
    if geometry.positions.len() != n {
        return Err(Error::invalid("geometry", "ion count mismatch"));
    }
    let l = trap.length_unit();
    let u: Vec<f64> = geometry.positions.iter().map(|z| z / l).collect();
    if !strictly_increasing(&u) {
        return Err(Error::invalid("geometry", "positions must be strictly increasing"));
    }
    let eig = SymmetricEigen::new(reduced_hessian(&u, trap.quartic_ratio()));
    let omega_sq_unit = trap.kappa2() / trap.species.mass;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut frequencies = Vec::with_capacity(n);
    let mut couplings = Vec::with_capacity(n);
    for &idx in &order {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > 0.0) {
            return Err(Error::NonPositiveMode { value: lambda * omega_sq_unit });
        }
        frequencies.push((lambda * omega_sq_unit).sqrt());
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Sign convention: first non-negligible component positive.
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        couplings.push(v);
    }
    ModeStructure::from_parts(frequencies, couplings, &trap.species, beam)
}

/// Bose occupations `1/(exp(ħω/k_B T) − 1)`; zero at `T = 0`.
pub fn thermal_occupation(modes: &ModeStructure, temperature: f64) -> Result<ThermalState> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature", "must be non-negative"));
    }
    let occupations = modes
        .frequencies
        .iter()
        .map(|&w| {
            if temperature == 0.0 {
                0.0
            } else {
                1.0 / (HBAR * w / (KB * temperature)).exp_m1()
            }
        })
        .collect();
    Ok(ThermalState {
        temperature,
        occupations,
    })
}

/// Finds the trap of the given family whose equilibrium chain has minimum
/// spacing `s_min`. Quartic traps are searched over the continuum spacing
/// `d` fed to [`quartic_coefficients`]; harmonic traps over `ω_t`.
pub fn calibrate_min_separation(
    species: &IonSpecies,
    family: TrapFamily,
    n: usize,
    s_min: f64,
) -> Result<TrapModel> {
    const MAX_ITER: usize = 200;
    if !(s_min > 0.0 && s_min.is_finite()) {
        return Err(Error::invalid("s_min", "must be positive"));
    }
    let build = |p: f64| -> Result<TrapModel> {
        match family {
            TrapFamily::Quartic => {
                let (k2, k4) = quartic_coefficients(n, p)?;
                TrapModel::quartic(species.clone(), k2, k4, n)
            }
            TrapFamily::Harmonic => TrapModel::harmonic(species.clone(), p, n),
        }
    };
    // mismatch(p) is increasing in ln p for both families after the sign flip.
    let sign = match family {
        TrapFamily::Quartic => 1.0,
        TrapFamily::Harmonic => -1.0,
    };
    let mismatch = |p: f64| -> Result<f64> {
        let geo = equilibrium_positions(&build(p)?)?;
        Ok(sign * (geo.min_separation / s_min - 1.0))
    };
    let start = match family {
        TrapFamily::Quartic => s_min,
        TrapFamily::Harmonic => (2.0 * COULOMB_Q2 / (species.mass * s_min.powi(3))).sqrt(),
    };

    let mut iterations = 0;
    let (mut lo, mut hi) = (start, start);
    while mismatch(lo)? > 0.0 {
        lo *= 0.5;
        iterations += 1;
        if iterations > MAX_ITER {
            return Err(Error::CalibrationFailed { iterations });
        }
    }
    while mismatch(hi)? < 0.0 {
        hi *= 2.0;
        iterations += 1;
        if iterations > MAX_ITER {
            return Err(Error::CalibrationFailed { iterations });
        }
    }
    while hi / lo - 1.0 > 1e-13 {
        let mid = (lo * hi).sqrt();
        let m = mismatch(mid)?;
        if m == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if m < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
        if iterations > MAX_ITER {
            return Err(Error::CalibrationFailed { iterations });
        }
    }
    build((lo * hi).sqrt())
}
