use std::io::Write;
use std::path::Path;
use std::time::Instant;

use fastgate_core::chain::{ModeStructure, Potential};
use fastgate_core::kicks::{self, ApgSequence, GateMetrics, Regime, Scheme};
use fastgate_core::optimize::{design_gate, GateContext, GateSolution};
use fastgate_core::phasespace;
use fastgate_core::robustness::{
    mc_error_distribution, mode_shift_scan, mode_shift_tolerance, population_inversion_bound,
    rep_rate_shift_scan, temperature_scan, timing_jitter_mc, ErrorPdf, JitterStats, ScanPoint,
    TemperaturePoint,
};
use serde::Serialize;
use serde_json::Value;

use crate::config::{McSection, RunConfig};
use crate::output::{create, csv_err, write_document};
use crate::CliError;

/// Allowed relative disagreement between the closed-form and trajectory
/// routes before a run is flagged as an internal error.
const ORACLE_TOLERANCE: f64 = 1e-9;

fn lf_csv<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn internal(e: fastgate_core::Error) -> CliError {
    CliError::from_core(e, CliError::Internal)
}

#[derive(Debug, Serialize)]
struct ChainReport {
    potential: Potential,
    ion_count: usize,
    positions_m: Vec<f64>,
    min_separation_m: f64,
    edge_separation_m: f64,
    frequencies_rad_per_s: Vec<f64>,
    frequency_ratios: Vec<f64>,
    lamb_dicke: Vec<f64>,
    occupations: Vec<f64>,
    com_period_s: f64,
    travel_time_s: f64,
}

pub fn chain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (trap, geo, modes) = cfg.chain()?;
    let thermal = cfg.thermal_state(&modes)?;
    modes.write_csv(create(out, "chain_modes.csv")?).map_err(csv_err)?;
    let mut w = lf_csv(create(out, "chain_positions.csv")?);
    w.write_record(["ion", "position_m"]).map_err(csv_err)?;
    for (i, z) in geo.positions.iter().enumerate() {
        w.write_record([i.to_string(), format!("{z:e}")]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))?;

    let w0 = modes.frequencies[0];
    let report = ChainReport {
        potential: trap.potential,
        ion_count: trap.ion_count,
        positions_m: geo.positions.clone(),
        min_separation_m: geo.min_separation,
        edge_separation_m: geo.edge_separation(),
        frequency_ratios: modes.frequencies.iter().map(|w| w / w0).collect(),
        frequencies_rad_per_s: modes.frequencies.clone(),
        lamb_dicke: modes.lamb_dicke.clone(),
        occupations: thermal.occupations.clone(),
        com_period_s: modes.com_period,
        travel_time_s: modes.travel_time,
    };
    match trap.potential {
        Potential::Quartic { kappa2, kappa4 } => println!("quartic trap: κ2 = {kappa2:.4e} J/m², κ4 = {kappa4:.4e} J/m⁴"),
        Potential::Harmonic { omega_t } => println!("harmonic trap: ω_t = {omega_t:.4e} rad/s"),
    }
    println!(
        "{} ions, min spacing {:.4} μm, edge spacing {:.4} μm",
        trap.ion_count,
        geo.min_separation * 1e6,
        geo.edge_separation() * 1e6
    );
    println!("τ₀ = {:.4e} s, τ_travel = {:.4e} s", modes.com_period, modes.travel_time);
    println!("{:>5} {:>14} {:>9} {:>9} {:>9}", "mode", "ω (rad/s)", "ω/ω_COM", "η", "n̄");
    for a in 0..modes.mode_count() {
        println!(
            "{a:>5} {:>14.6e} {:>9.5} {:>9.5} {:>9.4}",
            modes.frequencies[a],
            report.frequency_ratios[a],
            modes.lamb_dicke[a],
            thermal.occupations[a]
        );
    }
    write_document(out, "chain", cfg, started, report)
}

#[derive(Debug, Serialize)]
struct DesignReport<'a> {
    gate_time_tau0: f64,
    solution: &'a GateSolution,
}

fn run_design(cfg: &RunConfig, ctx: &GateContext) -> Result<GateSolution, CliError> {
    let search = cfg.search_config(&ctx.modes)?;
    design_gate(ctx, &search).map_err(internal)
}

fn summarise(metrics: &GateMetrics, gate_time: f64, modes: &ModeStructure, regime: Regime) {
    println!(
        "ε_av = {:.4e}, 𝒩 = {}, τ_G = {:.4} τ₀, {:?}, Θ = {:.6} rad",
        metrics.epsilon_av,
        metrics.kick_count,
        gate_time / modes.com_period,
        regime,
        metrics.theta_2q
    );
}

pub fn design(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, _, modes) = cfg.chain()?;
    let ctx = cfg.context(modes)?;
    let sol = run_design(cfg, &ctx)?;
    let flat = kicks::expand(&sol.sequence).map_err(internal)?;
    flat.write_csv(create(out, "design_kicks.csv")?).map_err(csv_err)?;
    summarise(&sol.metrics, sol.config.gate_time, &ctx.modes, sol.regime);
    if sol.budget_exhausted {
        println!("note: global search stopped on its evaluation budget");
    }
    write_document(
        out,
        "design",
        cfg,
        started,
        DesignReport {
            gate_time_tau0: sol.config.gate_time / ctx.modes.com_period,
            solution: &sol,
        },
    )
}

/// Accepts a bare sequence, a solution, or any result document embedding one.
pub fn load_sequence(path: &Path) -> Result<ApgSequence, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Sequence(format!("{}: {e}", path.display())))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| CliError::Sequence(format!("{}: {e}", path.display())))?;
    let candidates = ["/result/solution/sequence", "/solution/sequence", "/sequence", ""];
    let node = candidates
        .iter()
        .find_map(|p| root.pointer(p).filter(|v| v.is_object()))
        .ok_or_else(|| CliError::Sequence("no sequence object found".into()))?;
    let seq: ApgSequence = serde_path_to_error::deserialize(node.clone())
        .map_err(|e| CliError::Sequence(format!("at `{}`: {}", e.path(), e.inner())))?;
    ApgSequence::new(seq.scheme, seq.f_rep, seq.half_groups, seq.z_max).map_err(|e| CliError::Sequence(e.to_string()))
}

fn epsilon_pi(cfg: &RunConfig) -> f64 {
    cfg.search.as_ref().map_or(1e-4, |s| s.epsilon_pi)
}

#[derive(Debug, Serialize)]
struct OracleCheck {
    theta_2q: f64,
    epsilon_av: f64,
    theta_rel_diff: f64,
    epsilon_rel_diff: f64,
}

#[derive(Debug, Serialize)]
struct EvaluateReport {
    sequence: ApgSequence,
    metrics: GateMetrics,
    regime: Regime,
    gate_span_s: f64,
    oracle: OracleCheck,
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn evaluate(cfg: &RunConfig, out: &Path, sequence: &Path, scheme: Option<&str>) -> Result<(), CliError> {
    let started = Instant::now();
    let mut seq = load_sequence(sequence)?;
    match scheme {
        Some("paired") => seq = seq.with_scheme(Scheme::Paired),
        Some("unpaired") => seq = seq.with_scheme(Scheme::Unpaired),
        _ => {}
    }
    let (_, _, modes) = cfg.chain()?;
    let ctx = cfg.context(modes)?;
    let flat = kicks::expand(&seq).map_err(|e| CliError::Sequence(e.to_string()))?;
    let metrics = ctx.evaluate(&seq, epsilon_pi(cfg)).map_err(|e| CliError::Sequence(e.to_string()))?;

    let traj = phasespace::simulate(&flat, &ctx.modes, ctx.pair, seq.scheme).map_err(internal)?;
    let theta = phasespace::combined_phase(&traj);
    let eps = phasespace::ode_gate_error(&traj, &ctx.thermal).map_err(internal)?;
    let oracle = OracleCheck {
        theta_2q: theta,
        epsilon_av: eps,
        theta_rel_diff: rel(theta, metrics.theta_2q, 1e-12),
        // Below 1e-6 the comparison is absolute at the 1e-15 level.
        epsilon_rel_diff: rel(eps, metrics.epsilon_av, 1e-6),
    };
    let span = flat.times.last().copied().unwrap_or(0.0) - flat.times.first().copied().unwrap_or(0.0);
    let regime = if span > 0.0 {
        kicks::classify_regime(span, &ctx.modes).map_err(internal)?
    } else {
        Regime::Supersonic
    };
    flat.write_csv(create(out, "evaluate_kicks.csv")?).map_err(csv_err)?;
    summarise(&metrics, span, &ctx.modes, regime);
    let mismatch = oracle.theta_rel_diff.max(oracle.epsilon_rel_diff);
    let report = EvaluateReport {
        sequence: seq,
        metrics,
        regime,
        gate_span_s: span,
        oracle,
    };
    write_document(out, "evaluate", cfg, started, &report)?;
    if mismatch > ORACLE_TOLERANCE {
        return Err(CliError::Internal(format!(
            "closed form and trajectory routes disagree (relative difference {mismatch:.3e})"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulateReport {
    window_s: [f64; 2],
    samples_per_tau0: f64,
    sample_times: usize,
    combined_phase: f64,
    epsilon_av: f64,
    /// Per mode, in uu/ud/du/dd order.
    branch_phases: Vec<[f64; 4]>,
    final_displacements: Vec<[f64; 4]>,
}

pub fn simulate(cfg: &RunConfig, out: &Path, solution: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let seq = load_sequence(solution)?;
    let (_, _, modes) = cfg.chain()?;
    let ctx = cfg.context(modes)?;
    let flat = kicks::expand(&seq).map_err(|e| CliError::Sequence(e.to_string()))?;
    let traj = phasespace::simulate(&flat, &ctx.modes, ctx.pair, seq.scheme).map_err(internal)?;

    let half = match &cfg.search {
        Some(_) => 0.5 * cfg.search_config(&ctx.modes)?.gate_time,
        None => 0.0,
    };
    let mut t0 = flat.times.first().copied().unwrap_or(0.0).min(-half);
    let mut t1 = flat.times.last().copied().unwrap_or(0.0).max(half);
    if t1 <= t0 {
        t0 = -0.5 * ctx.modes.com_period;
        t1 = 0.5 * ctx.modes.com_period;
    }
    let density = cfg.simulate.samples_per_tau0;
    let samples = phasespace::dense_samples(&traj, t0, t1, density).map_err(internal)?;
    phasespace::write_samples_csv(&samples, create(out, "simulate_trajectory.csv")?).map_err(csv_err)?;
    let report = SimulateReport {
        window_s: [t0, t1],
        samples_per_tau0: density,
        sample_times: phasespace::dense_sample_count(&traj, t0, t1, density),
        combined_phase: phasespace::combined_phase(&traj),
        epsilon_av: phasespace::ode_gate_error(&traj, &ctx.thermal).map_err(internal)?,
        branch_phases: phasespace::accumulated_phase(&traj),
        final_displacements: phasespace::final_displacements(&traj),
    };
    println!(
        "{} modes × 4 branches × {} samples on [{:.4e}, {:.4e}] s; Θ = {:.6} rad, ε_av = {:.4e}",
        ctx.modes.mode_count(),
        report.sample_times,
        t0,
        t1,
        report.combined_phase,
        report.epsilon_av
    );
    write_document(out, "simulate", cfg, started, report)
}

/// The sequence under study and its base metrics.
fn subject(cfg: &RunConfig, ctx: &GateContext, solution: Option<&Path>) -> Result<(ApgSequence, GateMetrics), CliError> {
    let seq = match solution {
        Some(p) => load_sequence(p)?,
        None => run_design(cfg, ctx)?.sequence,
    };
    let metrics = ctx.evaluate(&seq, epsilon_pi(cfg)).map_err(|e| CliError::Sequence(e.to_string()))?;
    Ok((seq, metrics))
}

#[derive(Debug, Serialize)]
struct SweepReport {
    base_epsilon_av: f64,
    kick_count: usize,
    rep_rate: Option<Vec<ScanPoint>>,
    mode_shift: Vec<ScanPoint>,
    /// Largest tolerated relative mode shift at ε_av ≤ 1e-3.
    mode_shift_tolerance: Option<f64>,
    jitter: Vec<JitterStats>,
    temperature: Vec<TemperaturePoint>,
}

fn write_scan(out: &Path, name: &str, points: &[ScanPoint]) -> Result<(), CliError> {
    let mut w = lf_csv(create(out, name)?);
    w.write_record(["shift", "epsilon", "error"]).map_err(csv_err)?;
    for p in points {
        w.write_record([
            format!("{:e}", p.parameter),
            p.epsilon.map(|e| format!("{e:e}")).unwrap_or_default(),
            p.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))
}

pub fn sweep(cfg: &RunConfig, out: &Path, solution: Option<&Path>) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, _, modes) = cfg.chain()?;
    let ctx = cfg.context(modes)?;
    let (seq, base) = subject(cfg, &ctx, solution)?;
    let section = cfg.sweep.clone().unwrap_or_default();
    let seq_err = |e: fastgate_core::Error| CliError::from_core(e, CliError::Sequence);

    let rep_rate = match seq.f_rep {
        Some(_) => {
            let pts = rep_rate_shift_scan(&seq, &ctx, &section.rep_rate_shifts).map_err(seq_err)?;
            write_scan(out, "sweep_rep_rate.csv", &pts)?;
            Some(pts)
        }
        None => None,
    };
    let mode_shift = mode_shift_scan(&seq, &ctx, &section.mode_shifts).map_err(seq_err)?;
    write_scan(out, "sweep_mode_shift.csv", &mode_shift)?;
    let tolerance = mode_shift_tolerance(&seq, &ctx, 1e-3).map_err(seq_err)?;

    let jitter = cfg
        .jitter_sigmas(&ctx.modes)
        .into_iter()
        .map(|s| timing_jitter_mc(&seq, &ctx, s, section.jitter_samples, cfg.seed))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::from_core(e, CliError::Config))?;
    let mut w = lf_csv(create(out, "sweep_jitter.csv")?);
    w.write_record(["sigma_s", "mean", "std", "base"]).map_err(csv_err)?;
    for j in &jitter {
        w.write_record([j.sigma, j.mean, j.std, j.base].map(|v| format!("{v:e}")))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))?;

    let temps: Vec<f64> = section.temperatures_uk.iter().map(|t| t * 1e-6).collect();
    let temperature = temperature_scan(&seq, &ctx, &temps).map_err(|e| CliError::from_core(e, CliError::Config))?;
    let mut w = lf_csv(create(out, "sweep_temperature.csv")?);
    w.write_record(["temperature_uk", "motional_error", "theta_2q"]).map_err(csv_err)?;
    for p in &temperature {
        w.write_record([p.temperature * 1e6, p.motional_error, p.theta_2q].map(|v| format!("{v:e}")))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))?;

    println!("base ε_av = {:.4e}, 𝒩 = {}", base.epsilon_av, base.kick_count);
    if let Some(pts) = &rep_rate {
        let worst = pts.iter().filter_map(|p| p.epsilon).fold(0.0, f64::max);
        println!("repetition-rate scan: worst ε_av {worst:.3e} over {} shifts", pts.len());
    }
    match tolerance {
        Some(t) => println!("mode-shift tolerance at ε_av ≤ 1e-3: {t:.2e}"),
        None => println!("mode-shift tolerance: base gate already above 1e-3"),
    }
    for j in &jitter {
        println!("jitter σ = {:.2e} s: mean excess {:.3e} ± {:.3e}", j.sigma, j.mean_excess(), j.std);
    }
    let report = SweepReport {
        base_epsilon_av: base.epsilon_av,
        kick_count: base.kick_count,
        rep_rate,
        mode_shift,
        mode_shift_tolerance: tolerance,
        jitter,
        temperature,
    };
    write_document(out, "sweep", cfg, started, report)
}

#[derive(Debug, Serialize)]
struct McEntry {
    epsilon_pi: f64,
    mass: f64,
    mean_excess: f64,
    inversion_bound: f64,
    pdf: ErrorPdf,
}

#[derive(Debug, Serialize)]
struct McReport {
    base_epsilon_av: f64,
    kick_count: usize,
    runs: Vec<McEntry>,
}

pub fn mc(cfg: &RunConfig, out: &Path, solution: Option<&Path>) -> Result<(), CliError> {
    let started = Instant::now();
    let (_, _, modes) = cfg.chain()?;
    let ctx = cfg.context(modes)?;
    let (seq, base) = subject(cfg, &ctx, solution)?;
    let section: McSection = cfg.mc.clone().unwrap_or_default();
    let mc_cfg = section.mc_config(cfg.seed);
    let mut runs = Vec::new();
    for (i, &eps) in section.epsilon_pi.iter().enumerate() {
        let channels = section.channels(eps)?;
        let pdf = mc_error_distribution(&seq, &ctx, &channels, &mc_cfg).map_err(|e| CliError::from_core(e, CliError::Config))?;
        pdf.write_csv(create(out, &format!("mc_pdf_{i}.csv"))?).map_err(csv_err)?;
        runs.push(McEntry {
            epsilon_pi: eps,
            mass: pdf.mass(),
            mean_excess: pdf.mean_excess(),
            inversion_bound: population_inversion_bound(1.0 - base.epsilon_av, base.kick_count, eps),
            pdf,
        });
    }
    let mut w = lf_csv(create(out, "mc_summary.csv")?);
    w.write_record(["epsilon_pi", "mean", "std", "mean_excess", "point_weight", "truncated_mass", "inversion_bound"])
        .map_err(csv_err)?;
    for r in &runs {
        w.write_record(
            [r.epsilon_pi, r.pdf.mean, r.pdf.std, r.mean_excess, r.pdf.point_weight, r.pdf.truncated_mass, r.inversion_bound]
                .map(|v| format!("{v:e}")),
        )
        .map_err(csv_err)?;
        println!(
            "ε_π = {:.1e}: mean ε {:.4e} (excess {:.3e}), std {:.3e}, mass {:.9}, population bound F = {:.5}",
            r.epsilon_pi, r.pdf.mean, r.mean_excess, r.pdf.std, r.mass, r.inversion_bound
        );
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))?;
    write_document(
        out,
        "mc",
        cfg,
        started,
        McReport {
            base_epsilon_av: base.epsilon_av,
            kick_count: base.kick_count,
            runs,
        },
    )
}
