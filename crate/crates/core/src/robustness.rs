//! Sensitivity of designed gates to pulse errors, timing and frequency
//! miscalibration, temperature, and single-pulse diffraction.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::chain::{thermal_occupation, ThermalState};
use crate::error::{Error, Result};
use crate::kicks::{
    self, entangling_phase_amplitudes, gate_error, residual_displacement_amplitudes, ApgSequence,
    FlatKicks,
};
use crate::optimize::GateContext;

/// Samples per parallel work unit. Fixed so results do not depend on the
/// thread count.
const CHUNK: usize = 512;

fn chunk_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Diffraction-order populations of a single resonant pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdPopulations {
    /// `-n_max ..= n_max`
    pub orders: Vec<i32>,
    pub populations: Vec<f64>,
    /// `1 − Σ` over the listed orders.
    pub truncated_mass: f64,
}

impl KdPopulations {
    pub fn population(&self, n: i32) -> f64 {
        self.orders
            .iter()
            .position(|&o| o == n)
            .map_or(0.0, |i| self.populations[i])
    }
}

/// `J_0(x) … J_{n_max}(x)` by Miller's backward recurrence, normalised with
/// `J_0 + 2 Σ_k J_{2k} = 1`.
pub fn bessel_j(x: f64, n_max: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_max + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let ax = x.abs();
    let mut start = n_max.max(ax.ceil() as usize) + 20 + (10.0 * ax.sqrt()) as usize;
    start += start % 2;
    let mut vals = vec![0.0; start + 2];
    vals[start] = 1e-30;
    for k in (1..=start).rev() {
        vals[k - 1] = 2.0 * k as f64 / ax * vals[k] - vals[k + 1];
        if vals[k - 1].abs() > 1e250 {
            for v in vals[k - 1..].iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let norm = vals[0] + 2.0 * vals.iter().skip(2).step_by(2).sum::<f64>();
    for (n, slot) in out.iter_mut().enumerate() {
        let v = vals[n] / norm;
        *slot = if x < 0.0 && n % 2 == 1 { -v } else { v };
    }
    out
}

/// `P_n = J_n(θ)²` for `|n| ≤ n_max`.
pub fn kd_populations(pulse_area: f64, n_max: usize) -> Result<KdPopulations> {
    if n_max == 0 {
        return Err(Error::invalid("n_max", "must be at least 1"));
    }
    if !pulse_area.is_finite() {
        return Err(Error::invalid("pulse_area", "must be finite"));
    }
    let j = bessel_j(pulse_area, n_max);
    let orders: Vec<i32> = (-(n_max as i32)..=n_max as i32).collect();
    let populations: Vec<f64> = orders
        .iter()
        .map(|&n| {
            let v = j[n.unsigned_abs() as usize];
            v * v
        })
        .collect();
    let truncated_mass = 1.0 - populations.iter().sum::<f64>();
    Ok(KdPopulations {
        orders,
        populations,
        truncated_mass,
    })
}

/// Distribution of the amplitude offset of an errant kick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorChannels {
    /// `(n, P_n)`, `n ≠ 0`, summing to 1.
    pub probabilities: Vec<(i32, f64)>,
    pub epsilon_pi: f64,
}

impl ErrorChannels {
    pub fn new(probabilities: Vec<(i32, f64)>, epsilon_pi: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon_pi) {
            return Err(Error::invalid("epsilon_pi", "must lie in [0, 1)"));
        }
        if probabilities.is_empty() {
            return Err(Error::invalid("probabilities", "need at least one channel"));
        }
        if probabilities.iter().any(|&(n, p)| n == 0 || !(p >= 0.0)) {
            return Err(Error::invalid("probabilities", "offsets must be non-zero, weights non-negative"));
        }
        let total: f64 = probabilities.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("probabilities", format!("must sum to 1, got {total}")));
        }
        Ok(Self {
            probabilities,
            epsilon_pi,
        })
    }

    /// No kick (`n = −1`) and backwards kick (`n = −2`) with equal weight.
    pub fn no_kick_or_backwards(epsilon_pi: f64) -> Result<Self> {
        Self::new(vec![(-1, 0.5), (-2, 0.5)], epsilon_pi)
    }

    fn draw_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> i32 {
        let mut u: f64 = rng.random();
        for &(n, p) in &self.probabilities {
            if u < p {
                return n;
            }
            u -= p;
        }
        self.probabilities.last().expect("non-empty").0
    }
}

/// Amplitude of a kick of sign `c` after an offset `n` relative to its
/// own direction: `c (1 + n)`.
pub fn errant_amplitude(sign: i8, offset: i32) -> f64 {
    f64::from(sign) * (1.0 + f64::from(offset))
}

/// Each kick independently errs with probability `ε_π`.
pub fn perturb_sequence<R: Rng + ?Sized>(kicks: &FlatKicks, channels: &ErrorChannels, rng: &mut R) -> Vec<f64> {
    kicks
        .signs
        .iter()
        .map(|&c| {
            if channels.epsilon_pi > 0.0 && rng.random::<f64>() < channels.epsilon_pi {
                errant_amplitude(c, channels.draw_offset(rng))
            } else {
                f64::from(c)
            }
        })
        .collect()
}

fn amplitude_error(ctx: &GateContext, scheme: kicks::Scheme, times: &[f64], amps: &[f64]) -> f64 {
    let theta = entangling_phase_amplitudes(times, amps, &ctx.modes, ctx.pair, scheme);
    let disp = residual_displacement_amplitudes(times, amps, &ctx.modes, scheme);
    gate_error(theta, &disp, &ctx.modes, &ctx.thermal, ctx.pair)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples_per_class: usize,
    pub m_max: usize,
    pub seed: u64,
    pub bins: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 10_000,
            m_max: 3,
            seed: 0,
            bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPdf {
    pub m: usize,
    /// Weight of this class in the reconstruction.
    pub weight: f64,
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
    /// Conditional density per bin.
    pub densities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPdf {
    /// Bin edges in ε, equally spaced in log10.
    pub bin_edges: Vec<f64>,
    /// Density per unit ε of the error-carrying classes.
    pub densities: Vec<f64>,
    /// Error-free sequences: ε of the ideal gate and its probability.
    pub point_error: f64,
    pub point_weight: f64,
    pub mean: f64,
    pub std: f64,
    pub classes: Vec<ClassPdf>,
    pub m_max: usize,
    pub samples_per_class: usize,
    /// Binomial probability of more than `m_max` errors, carried by the
    /// highest class.
    pub truncated_mass: f64,
}

impl ErrorPdf {
    /// `Σ density · width + point weight`.
    pub fn mass(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.bin_edges.windows(2))
            .map(|(d, w)| d * (w[1] - w[0]))
            .sum::<f64>()
            + self.point_weight
    }

    /// Mean error in excess of the ideal gate.
    pub fn mean_excess(&self) -> f64 {
        self.mean - self.point_error
    }

    /// CSV with columns `bin_low,bin_high,density` followed by one density
    /// column per class.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["bin_low".to_string(), "bin_high".into(), "density".into()];
        header.extend(self.classes.iter().map(|c| format!("density_m{}", c.m)));
        w.write_record(&header)?;
        for (i, e) in self.bin_edges.windows(2).enumerate() {
            let mut row = vec![format!("{:e}", e[0]), format!("{:e}", e[1]), format!("{:e}", self.densities[i])];
            row.extend(self.classes.iter().map(|c| format!("{:e}", c.densities[i])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let lg = |v: usize| (1..=v).map(|i| (i as f64).ln()).sum::<f64>();
    lg(n) - lg(k) - lg(n - k)
}

/// `C(𝒩, m) ε^m (1−ε)^(𝒩−m)`
pub fn binomial_weight(n: usize, m: usize, eps: f64) -> f64 {
    if m > n {
        return 0.0;
    }
    if m == 0 {
        return (1.0 - eps).powi(n as i32);
    }
    if eps == 0.0 {
        return 0.0;
    }
    (ln_choose(n, m) + m as f64 * eps.ln() + (n - m) as f64 * (-eps).ln_1p()).exp()
}

/// Running mean and variance that merge exactly when all values agree.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0 {
            return o;
        }
        if o.n == 0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n as f64 / n as f64,
            m2: self.m2 + o.m2 + d * d * (self.n * o.n) as f64 / n as f64,
        }
    }

    fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

/// Error-class Monte Carlo: for each `m = 1..m_max`, `S` sequences with
/// exactly `m` distinct errant kicks are evaluated in full; the classes are
/// recombined with binomial weights and the error-free point mass.
///
/// Weights for `m < m_max` are the exact binomial probabilities; class
/// `m_max` carries all remaining probability so the PDF has unit mass.
pub fn mc_error_distribution(
    seq: &ApgSequence,
    ctx: &GateContext,
    channels: &ErrorChannels,
    cfg: &McConfig,
) -> Result<ErrorPdf> {
    if cfg.samples_per_class < 1000 {
        return Err(Error::invalid("samples_per_class", "need at least 1000"));
    }
    if cfg.m_max == 0 {
        return Err(Error::invalid("m_max", "must be at least 1"));
    }
    if cfg.bins == 0 {
        return Err(Error::invalid("bins", "must be at least 1"));
    }
    let flat = kicks::expand(seq)?;
    let ideal = ctx.evaluate(seq, 0.0)?.epsilon_av;
    let n_kicks = flat.len();
    let m_top = cfg.m_max.min(n_kicks);
    let eps = channels.epsilon_pi;

    let point_weight = binomial_weight(n_kicks, 0, eps);
    let mut weights: Vec<f64> = (1..=m_top).map(|m| binomial_weight(n_kicks, m, eps)).collect();
    let below: f64 = point_weight + weights.iter().take(m_top.saturating_sub(1)).sum::<f64>();
    let truncated_mass = if m_top > 0 {
        let tail = (1.0 - below - weights[m_top - 1]).max(0.0);
        weights[m_top - 1] = (1.0 - below).max(0.0);
        tail
    } else {
        0.0
    };

    let amps0 = flat.amplitudes();
    let chunks = cfg.samples_per_class.div_ceil(CHUNK);
    let class_samples: Vec<Vec<f64>> = (1..=m_top)
        .map(|m| {
            let parts: Vec<Vec<f64>> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = chunk_rng(cfg.seed, ((m as u64) << 32) | c as u64);
                    let count = CHUNK.min(cfg.samples_per_class - c * CHUNK);
                    let mut amps = amps0.clone();
                    (0..count)
                        .map(|_| {
                            let picked = sample_indices(&mut rng, n_kicks, m);
                            for i in picked.iter() {
                                amps[i] = errant_amplitude(flat.signs[i], channels.draw_offset(&mut rng));
                            }
                            let e = amplitude_error(ctx, seq.scheme, &flat.times, &amps);
                            for i in picked.iter() {
                                amps[i] = amps0[i];
                            }
                            e
                        })
                        .collect()
                })
                .collect();
            parts.concat()
        })
        .collect();

    // Log-spaced bins spanning every sample.
    let positive = |v: f64| v.max(f64::MIN_POSITIVE);
    let all = class_samples.iter().flatten().copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(positive(v).log10()), b.max(positive(v).log10()))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi + 1e-9 * (hi - lo).max(1.0))
    } else if lo.is_finite() {
        (lo - 0.5, lo + 0.5)
    } else {
        let c = positive(ideal).log10();
        (c - 0.5, c + 0.5)
    };
    let step = (hi - lo) / cfg.bins as f64;
    let bin_edges: Vec<f64> = (0..=cfg.bins).map(|i| 10f64.powf(lo + step * i as f64)).collect();
    let bin_of = |v: f64| (((positive(v).log10() - lo) / step) as usize).min(cfg.bins - 1);

    let mut densities = vec![0.0; cfg.bins];
    let mut total = Moments::default();
    let mut mean = point_weight * ideal;
    let mut second = point_weight * ideal * ideal;
    let mut classes = Vec::with_capacity(m_top);
    for (k, samples) in class_samples.iter().enumerate() {
        let m = k + 1;
        let mut counts = vec![0usize; cfg.bins];
        let mut mom = Moments::default();
        for &v in samples {
            counts[bin_of(v)] += 1;
            mom.push(v);
        }
        total = total.merge(mom);
        let s = samples.len() as f64;
        let class_dens: Vec<f64> = counts
            .iter()
            .zip(bin_edges.windows(2))
            .map(|(&c, w)| c as f64 / s / (w[1] - w[0]))
            .collect();
        let weight = weights[k];
        for (d, cd) in densities.iter_mut().zip(&class_dens) {
            *d += weight * cd;
        }
        let var = mom.m2 / s;
        mean += weight * mom.mean;
        second += weight * (var + mom.mean * mom.mean);
        classes.push(ClassPdf {
            m,
            weight,
            samples: samples.len(),
            mean: mom.mean,
            std: mom.std(),
            densities: class_dens,
        });
    }
    let std = (second - mean * mean).max(0.0).sqrt();
    Ok(ErrorPdf {
        bin_edges,
        densities,
        point_error: ideal,
        point_weight,
        mean,
        std,
        classes,
        m_max: m_top,
        samples_per_class: cfg.samples_per_class,
        truncated_mass,
    })
}

/// `F = (1 − ε_π)^(2𝒩) F₀`.
pub fn population_inversion_bound(f0: f64, kick_count: usize, epsilon_pi: f64) -> f64 {
    (1.0 - epsilon_pi).powf(2.0 * kick_count as f64) * f0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub parameter: f64,
    pub epsilon: Option<f64>,
    pub error: Option<String>,
}

/// Kick times of every physical group at repetition rate `f`, keeping
/// centres fixed. Groups may sit closer than `1/f` but must not
/// interleave or reach `t = 0`.
fn regroup(seq: &ApgSequence, f: f64) -> Result<FlatKicks> {
    let groups: Vec<(i32, f64)> = seq.physical_groups().into_iter().filter(|g| g.0 != 0).collect();
    let span = |z: i32| 0.5 * (f64::from(z.unsigned_abs() as i32) - 1.0) / f;
    for (i, w) in groups.windows(2).enumerate() {
        let right_edge = w[0].1 + span(w[0].0);
        let left_edge = w[1].1 - span(w[1].0);
        if !(left_edge > right_edge) {
            return Err(Error::GroupOverlap {
                left: i,
                right: i + 1,
                gap: left_edge - right_edge,
            });
        }
    }
    Ok(FlatKicks::from_groups_relaxed(&groups, Some(f)))
}

/// `ε_av` after re-expanding at `f_rep (1 + δ)` for each `δ`.
pub fn rep_rate_shift_scan(seq: &ApgSequence, ctx: &GateContext, shifts: &[f64]) -> Result<Vec<ScanPoint>> {
    let f0 = seq
        .f_rep
        .ok_or_else(|| Error::invalid("f_rep", "sequence has no finite repetition rate"))?;
    Ok(shifts
        .iter()
        .map(|&d| {
            let f = f0 * (1.0 + d);
            let outcome = if f > 0.0 {
                regroup(seq, f).and_then(|k| {
                    kicks::evaluate_kicks(&k, seq.scheme, seq.half_kick_count(), &ctx.modes, ctx.pair, &ctx.thermal, 0.0)
                })
            } else {
                Err(Error::invalid("f_rep", "shifted rate is not positive"))
            };
            match outcome {
                Ok(m) => ScanPoint {
                    parameter: d,
                    epsilon: Some(m.epsilon_av),
                    error: None,
                },
                Err(e) => ScanPoint {
                    parameter: d,
                    epsilon: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterStats {
    /// s
    pub sigma: f64,
    pub base: f64,
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

impl JitterStats {
    pub fn mean_excess(&self) -> f64 {
        self.mean - self.base
    }
}

/// Every physical group centre, on both halves, is moved by an independent
/// Gaussian offset; kicks are then re-sorted and evaluated.
pub fn timing_jitter_mc(
    seq: &ApgSequence,
    ctx: &GateContext,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<JitterStats> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("sigma", "must be non-negative"));
    }
    if samples < 1000 {
        return Err(Error::invalid("samples", "need at least 1000"));
    }
    kicks::expand(seq)?;
    let base = ctx.evaluate(seq, 0.0)?.epsilon_av;
    let groups = seq.physical_groups();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let chunks = samples.div_ceil(CHUNK);
    let moments = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            let mut mom = Moments::default();
            let mut moved = groups.clone();
            for _ in 0..count {
                for (g, orig) in moved.iter_mut().zip(&groups) {
                    g.1 = orig.1 + sigma * normal.sample(&mut rng);
                }
                let k = FlatKicks::from_groups_relaxed(&moved, seq.f_rep);
                let e = amplitude_error(ctx, seq.scheme, &k.times, &k.amplitudes());
                mom.push(e);
            }
            mom
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Moments::default(), Moments::merge);
    Ok(JitterStats {
        sigma,
        base,
        mean: moments.mean,
        std: moments.std(),
        samples,
    })
}

/// `ε_av` with every `ω_α → ω_α (1 + δ)` and the sequence held fixed.
pub fn mode_shift_scan(seq: &ApgSequence, ctx: &GateContext, shifts: &[f64]) -> Result<Vec<ScanPoint>> {
    let flat = kicks::expand(seq)?;
    shifts
        .iter()
        .map(|&d| {
            let modes = ctx.modes.with_frequency_shift(d);
            let m = kicks::evaluate_kicks(&flat, seq.scheme, seq.half_kick_count(), &modes, ctx.pair, &ctx.thermal, 0.0)?;
            Ok(ScanPoint {
                parameter: d,
                epsilon: Some(m.epsilon_av),
                error: None,
            })
        })
        .collect()
}

/// Largest relative frequency shift `δ` on a log grid (20 points per
/// decade from 1e-7 to 1) such that every shift of magnitude up to `δ`,
/// of either sign, keeps `ε_av ≤ threshold`. `None` if the unshifted gate
/// already fails.
pub fn mode_shift_tolerance(seq: &ApgSequence, ctx: &GateContext, threshold: f64) -> Result<Option<f64>> {
    let grid: Vec<f64> = (0..=140).map(|i| 10f64.powf(-7.0 + i as f64 / 20.0)).collect();
    let base = mode_shift_scan(seq, ctx, &[0.0])?;
    if base[0].epsilon.is_none_or(|e| e > threshold) {
        return Ok(None);
    }
    let mut tolerated = 0.0;
    for d in grid {
        let pts = mode_shift_scan(seq, ctx, &[d, -d])?;
        if pts.iter().any(|p| p.epsilon.is_none_or(|e| e > threshold)) {
            break;
        }
        tolerated = d;
    }
    Ok(Some(tolerated))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePoint {
    /// K
    pub temperature: f64,
    /// Displacement term of the gate error at this temperature.
    pub motional_error: f64,
    /// Unchanged by temperature; reported for reference.
    pub theta_2q: f64,
    pub occupations: Vec<f64>,
}

pub fn temperature_scan(seq: &ApgSequence, ctx: &GateContext, temperatures: &[f64]) -> Result<Vec<TemperaturePoint>> {
    let flat = kicks::expand(seq)?;
    let theta = kicks::entangling_phase(&flat, &ctx.modes, ctx.pair, seq.scheme);
    let disp = kicks::residual_displacement(&flat, &ctx.modes, seq.scheme);
    temperatures
        .iter()
        .map(|&t| {
            let thermal: ThermalState = thermal_occupation(&ctx.modes, t)?;
            Ok(TemperaturePoint {
                temperature: t,
                motional_error: kicks::motional_error(&disp, &ctx.modes, &thermal, ctx.pair),
                theta_2q: theta,
                occupations: thermal.occupations,
            })
        })
        .collect()
}
