//! Run configuration. Every physical quantity carries its unit in the key
//! name. Times are given either in COM periods (`*_tau0`) or in seconds
//! (`*_s`), and a single document may not mix the two.

use std::f64::consts::PI;
use std::path::Path;

use fastgate_core::chain::{
    calibrate_min_separation, equilibrium_positions, normal_modes, thermal_occupation, BeamGeometry,
    ChainGeometry, IonSpecies, ModeStructure, ThermalState, TrapFamily, TrapModel, AMU,
};
use fastgate_core::kicks::Scheme;
use fastgate_core::optimize::{GateContext, SearchConfig};
use fastgate_core::robustness::{ErrorChannels, McConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub trap: TrapSection,
    #[serde(default)]
    pub beam: BeamSection,
    #[serde(default = "default_pair")]
    pub pair: [usize; 2],
    #[serde(default)]
    pub thermal: ThermalSection,
    #[serde(default)]
    pub search: Option<SearchSection>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub mc: Option<McSection>,
}

fn default_pair() -> [usize; 2] {
    [0, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSection {
    pub label: String,
    pub mass_amu: f64,
}

impl Default for SpeciesSection {
    fn default() -> Self {
        let ba = IonSpecies::barium133();
        Self {
            label: ba.label,
            mass_amu: ba.mass / AMU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSection {
    #[serde(default)]
    pub species: SpeciesSection,
    pub family: TrapFamily,
    pub ions: usize,
    /// Calibrate the trap to this minimum spacing.
    #[serde(default)]
    pub s_min_um: Option<f64>,
    #[serde(default)]
    pub kappa2_j_per_m2: Option<f64>,
    #[serde(default)]
    pub kappa4_j_per_m4: Option<f64>,
    #[serde(default)]
    pub omega_t_rad_per_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSection {
    pub wavelength_nm: f64,
    pub half_angle_rad: f64,
}

impl Default for BeamSection {
    fn default() -> Self {
        Self {
            wavelength_nm: 532.0,
            half_angle_rad: PI / 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalSection {
    pub temperature_uk: f64,
}

impl Default for ThermalSection {
    fn default() -> Self {
        Self { temperature_uk: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default)]
    pub gate_time_tau0: Option<f64>,
    #[serde(default)]
    pub gate_time_s: Option<f64>,
    #[serde(default = "d_groups")]
    pub group_count: usize,
    #[serde(default = "d_zmax")]
    pub z_max: u32,
    /// `null` fires every group at a single instant.
    #[serde(default = "d_frep")]
    pub f_rep_mhz: Option<f64>,
    #[serde(default = "d_eps")]
    pub epsilon_pi: f64,
    #[serde(default)]
    pub grid_mode: bool,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "d_restarts")]
    pub restarts: usize,
    #[serde(default = "d_budget")]
    pub eval_budget: usize,
    #[serde(default)]
    pub kick_cap: Option<usize>,
    #[serde(default = "d_candidates")]
    pub candidates: usize,
    #[serde(default = "d_population")]
    pub population: usize,
    #[serde(default = "d_local_iter")]
    pub local_iterations: usize,
    #[serde(default = "d_local_restarts")]
    pub local_restarts: usize,
}

fn d_groups() -> usize {
    40
}
fn d_zmax() -> u32 {
    5
}
fn d_frep() -> Option<f64> {
    Some(500.0)
}
fn d_eps() -> f64 {
    1e-4
}
fn d_restarts() -> usize {
    8
}
fn d_budget() -> usize {
    200_000
}
fn d_candidates() -> usize {
    8
}
fn d_population() -> usize {
    40
}
fn d_local_iter() -> usize {
    200
}
fn d_local_restarts() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub samples_per_tau0: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { samples_per_tau0: 200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "d_rep_shifts")]
    pub rep_rate_shifts: Vec<f64>,
    #[serde(default = "d_mode_shifts")]
    pub mode_shifts: Vec<f64>,
    #[serde(default)]
    pub jitter_sigmas_s: Option<Vec<f64>>,
    #[serde(default)]
    pub jitter_sigmas_tau0: Option<Vec<f64>>,
    #[serde(default = "d_jitter_samples")]
    pub jitter_samples: usize,
    #[serde(default = "d_temps")]
    pub temperatures_uk: Vec<f64>,
}

fn d_rep_shifts() -> Vec<f64> {
    (-5..=5).map(|i| f64::from(i) * 0.02).collect()
}
fn d_mode_shifts() -> Vec<f64> {
    vec![-1e-2, -1e-3, -1e-4, -1e-5, 0.0, 1e-5, 1e-4, 1e-3, 1e-2]
}
fn d_jitter_samples() -> usize {
    10_000
}
fn d_temps() -> Vec<f64> {
    vec![0.0, 30.0, 100.0, 486.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "d_mc_eps")]
    pub epsilon_pi: Vec<f64>,
    #[serde(default = "d_samples")]
    pub samples_per_class: usize,
    #[serde(default = "d_mmax")]
    pub m_max: usize,
    #[serde(default = "d_bins")]
    pub bins: usize,
    /// `[offset, probability]` pairs.
    #[serde(default = "d_channels")]
    pub channels: Vec<(i32, f64)>,
}

fn d_mc_eps() -> Vec<f64> {
    vec![1e-4, 3e-4, 1e-3]
}
fn d_samples() -> usize {
    10_000
}
fn d_mmax() -> usize {
    3
}
fn d_bins() -> usize {
    50
}
fn d_channels() -> Vec<(i32, f64)> {
    vec![(-1, 0.5), (-2, 0.5)]
}

impl McSection {
    pub fn channels(&self, epsilon_pi: f64) -> Result<ErrorChannels, CliError> {
        ErrorChannels::new(self.channels.clone(), epsilon_pi).map_err(|e| CliError::Config(format!("mc.channels: {e}")))
    }

    pub fn mc_config(&self, seed: u64) -> McConfig {
        McConfig {
            samples_per_class: self.samples_per_class,
            m_max: self.m_max,
            seed,
            bins: self.bins,
        }
    }
}

impl Default for McSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// Reads and validates a configuration document.
pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.into_inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let t = &self.trap;
        if t.ions < 2 {
            return bad("trap.ions: need at least 2 ions".into());
        }
        let explicit = match t.family {
            TrapFamily::Quartic => {
                if t.omega_t_rad_per_s.is_some() {
                    return bad("trap.omega_t_rad_per_s: not used by a quartic trap".into());
                }
                match (t.kappa2_j_per_m2, t.kappa4_j_per_m4) {
                    (Some(_), Some(_)) => true,
                    (None, None) => false,
                    _ => return bad("trap: give both kappa2_j_per_m2 and kappa4_j_per_m4".into()),
                }
            }
            TrapFamily::Harmonic => {
                if t.kappa2_j_per_m2.is_some() || t.kappa4_j_per_m4.is_some() {
                    return bad("trap: kappa coefficients are not used by a harmonic trap".into());
                }
                t.omega_t_rad_per_s.is_some()
            }
        };
        if explicit == t.s_min_um.is_some() {
            return bad("trap: give exactly one of s_min_um or the explicit potential coefficients".into());
        }
        if self.pair[0] == self.pair[1] || self.pair.iter().any(|&i| i >= t.ions) {
            return bad(format!("pair: {:?} is not two distinct ions of {}", self.pair, t.ions));
        }
        if !(self.thermal.temperature_uk >= 0.0) {
            return bad("thermal.temperature_uk: must be non-negative".into());
        }
        if !(self.simulate.samples_per_tau0 > 0.0) {
            return bad("simulate.samples_per_tau0: must be positive".into());
        }

        let mut tau0_keys = Vec::new();
        let mut s_keys = Vec::new();
        if let Some(s) = &self.search {
            if s.gate_time_tau0.is_some() {
                tau0_keys.push("search.gate_time_tau0");
            }
            if s.gate_time_s.is_some() {
                s_keys.push("search.gate_time_s");
            }
            if s.gate_time_tau0.is_none() && s.gate_time_s.is_none() {
                return bad("search: gate_time_tau0 or gate_time_s is required".into());
            }
        }
        if let Some(s) = &self.sweep {
            if s.jitter_sigmas_tau0.is_some() {
                tau0_keys.push("sweep.jitter_sigmas_tau0");
            }
            if s.jitter_sigmas_s.is_some() {
                s_keys.push("sweep.jitter_sigmas_s");
            }
        }
        if !tau0_keys.is_empty() && !s_keys.is_empty() {
            return bad(format!(
                "times must use one unit per document; found {} and {}",
                tau0_keys.join(", "),
                s_keys.join(", ")
            ));
        }
        Ok(())
    }

    pub fn species(&self) -> Result<IonSpecies, CliError> {
        let s = &self.trap.species;
        IonSpecies::new(s.label.clone(), s.mass_amu * AMU).map_err(|e| CliError::Config(format!("trap.species: {e}")))
    }

    pub fn beam(&self) -> Result<BeamGeometry, CliError> {
        BeamGeometry::new(self.beam.wavelength_nm * 1e-9, self.beam.half_angle_rad)
            .map_err(|e| CliError::Config(format!("beam: {e}")))
    }

    pub fn trap_model(&self) -> Result<TrapModel, CliError> {
        let species = self.species()?;
        let t = &self.trap;
        if let Some(s) = t.s_min_um {
            return calibrate_min_separation(&species, t.family, t.ions, s * 1e-6).map_err(|e| CliError::from_core(e, CliError::Config));
        }
        let built = match t.family {
            TrapFamily::Quartic => TrapModel::quartic(
                species,
                t.kappa2_j_per_m2.unwrap_or_default(),
                t.kappa4_j_per_m4.unwrap_or_default(),
                t.ions,
            ),
            TrapFamily::Harmonic => TrapModel::harmonic(species, t.omega_t_rad_per_s.unwrap_or_default(), t.ions),
        };
        built.map_err(|e| CliError::Config(format!("trap: {e}")))
    }

    /// Trap, equilibrium geometry and modes.
    pub fn chain(&self) -> Result<(TrapModel, ChainGeometry, ModeStructure), CliError> {
        let trap = self.trap_model()?;
        let geo = equilibrium_positions(&trap).map_err(|e| CliError::from_core(e, CliError::Solver))?;
        let modes = normal_modes(&trap, &geo, &self.beam()?).map_err(|e| CliError::from_core(e, CliError::Solver))?;
        Ok((trap, geo, modes))
    }

    pub fn thermal_state(&self, modes: &ModeStructure) -> Result<ThermalState, CliError> {
        thermal_occupation(modes, self.thermal.temperature_uk * 1e-6).map_err(|e| CliError::Config(format!("thermal: {e}")))
    }

    pub fn context(&self, modes: ModeStructure) -> Result<GateContext, CliError> {
        let thermal = self.thermal_state(&modes)?;
        GateContext::new(modes, (self.pair[0], self.pair[1]), thermal).map_err(|e| CliError::Config(format!("pair: {e}")))
    }

    pub fn search_config(&self, modes: &ModeStructure) -> Result<SearchConfig, CliError> {
        let s = self
            .search
            .as_ref()
            .ok_or_else(|| CliError::Config("search: section is required for this command".into()))?;
        let gate_time = match (s.gate_time_tau0, s.gate_time_s) {
            (Some(t), None) => t * modes.com_period,
            (None, Some(t)) => t,
            _ => unreachable!("checked in validate"),
        };
        let cfg = SearchConfig {
            group_count: s.group_count,
            z_max: s.z_max,
            gate_time,
            f_rep: s.f_rep_mhz.map(|f| f * 1e6),
            epsilon_pi: s.epsilon_pi,
            grid_mode: s.grid_mode,
            scheme: s.scheme,
            restarts: s.restarts,
            eval_budget: s.eval_budget,
            seed: self.seed,
            kick_cap: s.kick_cap,
            candidates: s.candidates,
            population: s.population,
            local_iterations: s.local_iterations,
            local_restarts: s.local_restarts,
        };
        cfg.validate().map_err(|e| CliError::Config(format!("search: {e}")))?;
        Ok(cfg)
    }

    /// Jitter widths in seconds.
    pub fn jitter_sigmas(&self, modes: &ModeStructure) -> Vec<f64> {
        match &self.sweep {
            Some(SweepSection {
                jitter_sigmas_s: Some(v), ..
            }) => v.clone(),
            Some(SweepSection {
                jitter_sigmas_tau0: Some(v),
                ..
            }) => v.iter().map(|t| t * modes.com_period).collect(),
            _ => vec![0.0, 0.25e-9, 0.5e-9, 1e-9, 2e-9],
        }
    }
}
