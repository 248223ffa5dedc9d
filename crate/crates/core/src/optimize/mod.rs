//! Two-stage sequence design: an integer search over group sizes at fixed
//! uniform timings, then continuous refinement of the group centres.

mod stage1;
mod stage2;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{ModeStructure, ThermalState};
use crate::error::{Error, Result};
use crate::kicks::{self, check_pair, ApgSequence, GateMetrics, Regime, Scheme};

pub use stage1::{stage1_global, Candidate, Stage1Result};
pub use stage2::stage2_local;

/// Everything the cost function depends on besides the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateContext {
    pub modes: ModeStructure,
    pub pair: (usize, usize),
    pub thermal: ThermalState,
}

impl GateContext {
    pub fn new(modes: ModeStructure, pair: (usize, usize), thermal: ThermalState) -> Result<Self> {
        check_pair(pair, modes.ion_count())?;
        if thermal.occupations.len() != modes.mode_count() {
            return Err(Error::invalid("thermal", "occupation count differs from mode count"));
        }
        Ok(Self {
            modes,
            pair,
            thermal,
        })
    }

    pub fn evaluate(&self, seq: &ApgSequence, epsilon_pi: f64) -> Result<GateMetrics> {
        kicks::evaluate(seq, &self.modes, self.pair, &self.thermal, epsilon_pi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// K, number of groups over the whole gate; even
    pub group_count: usize,
    pub z_max: u32,
    /// τ_G, s
    pub gate_time: f64,
    /// Hz; `None` for simultaneous groups
    pub f_rep: Option<f64>,
    pub epsilon_pi: f64,
    pub grid_mode: bool,
    pub scheme: Scheme,
    /// Independent stage-1 searches.
    pub restarts: usize,
    /// Cost evaluations per stage-1 restart.
    pub eval_budget: usize,
    pub seed: u64,
    /// Upper bound on 𝒩.
    pub kick_cap: Option<usize>,
    /// Stage-1 candidates refined in stage 2.
    pub candidates: usize,
    pub population: usize,
    /// Levenberg-Marquardt iterations per local run.
    pub local_iterations: usize,
    /// Perturbed local runs per candidate after the first.
    pub local_restarts: usize,
}

impl SearchConfig {
    pub fn new(gate_time: f64) -> Self {
        Self {
            group_count: 40,
            z_max: kicks::DEFAULT_Z_MAX,
            gate_time,
            f_rep: Some(500e6),
            epsilon_pi: 1e-4,
            grid_mode: false,
            scheme: Scheme::Unpaired,
            restarts: 8,
            eval_budget: 200_000,
            seed: 0,
            kick_cap: None,
            candidates: 8,
            population: 40,
            local_iterations: 200,
            local_restarts: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_count < 2 || self.group_count % 2 != 0 {
            return Err(Error::invalid("group_count", "must be even and at least 2"));
        }
        if self.z_max == 0 {
            return Err(Error::invalid("z_max", "must be at least 1"));
        }
        if !(self.gate_time > 0.0 && self.gate_time.is_finite()) {
            return Err(Error::invalid("gate_time", "must be positive"));
        }
        if let Some(f) = self.f_rep {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::invalid("f_rep", "must be positive"));
            }
        }
        if self.grid_mode && self.f_rep.is_none() {
            return Err(Error::invalid("grid_mode", "needs a finite f_rep"));
        }
        if !(0.0..1.0).contains(&self.epsilon_pi) {
            return Err(Error::invalid("epsilon_pi", "must lie in [0, 1)"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts", "must be at least 1"));
        }
        if self.candidates == 0 {
            return Err(Error::invalid("candidates", "must be at least 1"));
        }
        if self.population < 4 {
            return Err(Error::invalid("population", "must be at least 4"));
        }
        Ok(())
    }

    /// Cap on `Σ|z_j|` over the positive half.
    pub fn half_kick_cap(&self) -> Option<usize> {
        self.kick_cap.map(|c| c / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSolution {
    pub sequence: ApgSequence,
    pub metrics: GateMetrics,
    pub regime: Regime,
    pub config: SearchConfig,
    pub seed: u64,
    /// s
    pub wall_time: f64,
    /// Stage 1 stopped on its evaluation budget rather than on convergence.
    pub budget_exhausted: bool,
}

impl GateSolution {
    pub(crate) fn build(
        ctx: &GateContext,
        cfg: &SearchConfig,
        sequence: ApgSequence,
        started: Instant,
        budget_exhausted: bool,
    ) -> Result<Self> {
        let metrics = ctx.evaluate(&sequence, cfg.epsilon_pi)?;
        Ok(Self {
            sequence,
            metrics,
            regime: kicks::classify_regime(cfg.gate_time, &ctx.modes)?,
            config: cfg.clone(),
            seed: cfg.seed,
            wall_time: started.elapsed().as_secs_f64(),
            budget_exhausted,
        })
    }

    pub fn cost(&self) -> f64 {
        self.metrics.cost()
    }
}

/// Ordering used everywhere a best solution is picked: cost, then fewer kicks.
pub(crate) fn better(a: &GateSolution, b: &GateSolution) -> bool {
    (a.cost(), a.metrics.kick_count) < (b.cost(), b.metrics.kick_count)
}

/// Random stream for one independent unit of work.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Full pipeline: stage 1, then stage 2 on each promoted candidate.
pub fn design_gate(ctx: &GateContext, cfg: &SearchConfig) -> Result<GateSolution> {
    let started = Instant::now();
    cfg.validate()?;
    let s1 = stage1_global(ctx, cfg)?;
    let refined: Vec<Result<GateSolution>> = s1
        .candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| stage2::refine(ctx, cfg, &c.z, i as u64, started, s1.budget_exhausted))
        .collect();
    let mut best: Option<GateSolution> = None;
    let mut last_err = None;
    for r in refined {
        match r {
            Ok(sol) => {
                if best.as_ref().is_none_or(|b| better(&sol, b)) {
                    best = Some(sol);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(mut sol) => {
            sol.wall_time = started.elapsed().as_secs_f64();
            Ok(sol)
        }
        None => Err(last_err.unwrap_or_else(|| Error::Infeasible("no candidates".into()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoCell {
    /// s
    pub gate_time: f64,
    pub kick_cap: Option<usize>,
    pub solution: Option<GateSolution>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoTable {
    pub cells: Vec<ParetoCell>,
}

impl ParetoTable {
    pub fn best(&self) -> Option<&GateSolution> {
        self.cells
            .iter()
            .filter_map(|c| c.solution.as_ref())
            .fold(None, |acc: Option<&GateSolution>, s| match acc {
                Some(b) if !better(s, b) => Some(b),
                _ => Some(s),
            })
    }
}

/// Best solution on every `(τ_G, 𝒩_max)` cell. Caps are visited in
/// ascending order per gate time (uncapped last) and a smaller cap's
/// solution is kept whenever it beats the larger cap's own search, so the
/// table is monotone in the cap.
pub fn pareto_scan(
    ctx: &GateContext,
    gate_times: &[f64],
    kick_caps: &[Option<usize>],
    cfg: &SearchConfig,
) -> Result<ParetoTable> {
    if gate_times.is_empty() || kick_caps.is_empty() {
        return Err(Error::invalid("pareto_scan", "gate time and cap lists must be non-empty"));
    }
    let mut caps = kick_caps.to_vec();
    caps.sort_by_key(|c| c.unwrap_or(usize::MAX));
    caps.dedup();
    let mut cells = Vec::new();
    for &tg in gate_times {
        let mut carried: Option<GateSolution> = None;
        for &cap in &caps {
            let mut cell_cfg = cfg.clone();
            cell_cfg.gate_time = tg;
            cell_cfg.kick_cap = cap;
            let outcome = design_gate(ctx, &cell_cfg);
            let (solution, error) = match outcome {
                Ok(sol) => {
                    let pick = match &carried {
                        Some(prev) if better(prev, &sol) => {
                            let mut p = prev.clone();
                            p.config = cell_cfg.clone();
                            p
                        }
                        _ => sol,
                    };
                    (Some(pick), None)
                }
                Err(e) => (carried.clone(), Some(e.to_string())),
            };
            if let Some(s) = &solution {
                carried = Some(s.clone());
            }
            cells.push(ParetoCell {
                gate_time: tg,
                kick_cap: cap,
                solution,
                error,
            });
        }
    }
    Ok(ParetoTable { cells })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::chain::{self, BeamGeometry, IonSpecies, TrapFamily};

    pub(crate) fn five_ion_context() -> GateContext {
        let trap = chain::calibrate_min_separation(&IonSpecies::barium133(), TrapFamily::Quartic, 5, 3e-6).unwrap();
        let geo = chain::equilibrium_positions(&trap).unwrap();
        let modes = chain::normal_modes(&trap, &geo, &BeamGeometry::default()).unwrap();
        let thermal = ThermalState::ground(5);
        GateContext::new(modes, (0, 1), thermal).unwrap()
    }

    fn small_cfg(ctx: &GateContext) -> SearchConfig {
        let mut cfg = SearchConfig::new(0.74 * ctx.modes.com_period);
        cfg.group_count = 16;
        cfg.restarts = 2;
        cfg.eval_budget = 3000;
        cfg.candidates = 2;
        cfg.local_restarts = 1;
        cfg.local_iterations = 50;
        cfg
    }

    #[test]
    fn config_validation() {
        let mut cfg = SearchConfig::new(1e-6);
        assert!(cfg.validate().is_ok());
        cfg.group_count = 15;
        assert!(cfg.validate().is_err());
        let mut cfg = SearchConfig::new(1e-6);
        cfg.grid_mode = true;
        cfg.f_rep = None;
        assert!(cfg.validate().is_err());
        assert!(SearchConfig::new(0.0).validate().is_err());
    }

    #[test]
    fn design_is_deterministic_and_consistent() {
        let ctx = five_ion_context();
        let cfg = small_cfg(&ctx);
        let a = design_gate(&ctx, &cfg).unwrap();
        let b = design_gate(&ctx, &cfg).unwrap();
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.metrics, b.metrics);
        let fresh = ctx.evaluate(&a.sequence, cfg.epsilon_pi).unwrap();
        assert_eq!(fresh, a.metrics);
        assert!(kicks::expand(&a.sequence).is_ok());
    }

    #[test]
    fn pareto_cells_monotone_in_cap() {
        let ctx = five_ion_context();
        let cfg = small_cfg(&ctx);
        let tg = [cfg.gate_time];
        let table = pareto_scan(&ctx, &tg, &[None, Some(20), Some(40)], &cfg).unwrap();
        assert_eq!(table.cells.len(), 3);
        let costs: Vec<f64> = table
            .cells
            .iter()
            .map(|c| c.solution.as_ref().unwrap().metrics.epsilon_av)
            .collect();
        assert!(costs[1] <= costs[0] && costs[2] <= costs[1]);
        assert_eq!(table.cells[0].kick_cap, Some(20));
        assert!(table.cells[0].solution.as_ref().unwrap().metrics.kick_count <= 20);
        assert!(pareto_scan(&ctx, &[], &[None], &cfg).is_err());
    }
}
