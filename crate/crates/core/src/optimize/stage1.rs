use std::collections::HashSet;
use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{stream_rng, GateContext, SearchConfig};
use crate::error::Result;
use crate::kicks::sdk_weighted_cost_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Positive-half group sizes.
    pub z: Vec<i32>,
    pub epsilon_av: f64,
    pub cost: f64,
    pub half_kicks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Result {
    /// Best first; distinct vectors only.
    pub candidates: Vec<Candidate>,
    pub budget_exhausted: bool,
    pub evaluations: usize,
}

/// Cost of an integer half-vector at fixed centres `t_j = τ_G j / K`, with
/// each group treated as one simultaneous kick of amplitude `z_j`.
///
/// Θ is the quadratic form `zᵀQz` and each mode's residual displacement is
/// linear in `z`, so one evaluation costs O(K² + NK).
pub(crate) struct LatticeModel {
    dim: usize,
    q: Vec<f64>,
    /// Row α: `√((4/3) w_α) · 2 η_α F sin(ω_α t_j)`.
    d: Vec<Vec<f64>>,
    epsilon_pi: f64,
}

impl LatticeModel {
    pub(crate) fn new(ctx: &GateContext, cfg: &SearchConfig) -> Self {
        let dim = cfg.group_count / 2;
        let times: Vec<f64> = (1..=dim)
            .map(|j| cfg.gate_time * j as f64 / cfg.group_count as f64)
            .collect();
        let modes = &ctx.modes;
        let (m, n) = ctx.pair;
        let mut q = vec![0.0; dim * dim];
        let mut d = Vec::with_capacity(modes.mode_count());
        for a in 0..modes.mode_count() {
            let w = modes.frequencies[a];
            let eta = modes.lamb_dicke[a];
            let (bm, bn) = (modes.coupling(a, m), modes.coupling(a, n));
            let coef = 2.0 * cfg.scheme.phase_factor() * eta * eta * bm * bn;
            for p in 0..dim {
                for r in 0..dim {
                    let (tp, tr) = (times[p], times[r]);
                    q[p * dim + r] += coef * ((w * (tp - tr).abs()).sin() - (w * (tp + tr)).sin());
                }
            }
            let weight = (0.5 + ctx.thermal.occupations[a]) * (bm * bm + bn * bn);
            let scale = (4.0 / 3.0 * weight).sqrt() * 2.0 * eta * cfg.scheme.displacement_factor();
            d.push(times.iter().map(|&t| scale * (w * t).sin()).collect());
        }
        Self {
            dim,
            q,
            d,
            epsilon_pi: cfg.epsilon_pi,
        }
    }

    pub(crate) fn epsilon(&self, z: &[i32]) -> f64 {
        let mut theta = 0.0;
        for p in 0..self.dim {
            if z[p] == 0 {
                continue;
            }
            let row = &self.q[p * self.dim..(p + 1) * self.dim];
            let s: f64 = row.iter().zip(z).map(|(qv, &zr)| qv * f64::from(zr)).sum();
            theta += f64::from(z[p]) * s;
        }
        let mismatch = theta.abs() - FRAC_PI_4;
        let motional: f64 = self
            .d
            .iter()
            .map(|row| {
                let s: f64 = row.iter().zip(z).map(|(dv, &zr)| dv * f64::from(zr)).sum();
                s * s
            })
            .sum();
        2.0 / 3.0 * mismatch * mismatch + motional
    }

    /// `(ε_av, ε_av + ε_ε)`
    pub(crate) fn cost(&self, z: &[i32]) -> (f64, f64) {
        let eps = self.epsilon(z);
        let half: usize = z.iter().map(|v| v.unsigned_abs() as usize).sum();
        (eps, eps + sdk_weighted_cost_for(eps, half, self.epsilon_pi))
    }
}

/// Lowers the largest |z| entries (first on ties) until `Σ|z| ≤ cap`.
pub(crate) fn project_cap(z: &mut [i32], cap: Option<usize>) {
    let Some(cap) = cap else { return };
    let mut total: usize = z.iter().map(|v| v.unsigned_abs() as usize).sum();
    while total > cap {
        let (idx, _) = z
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .expect("non-empty when total > 0");
        z[idx] -= z[idx].signum();
        total -= 1;
    }
}

/// Ranked set of the best distinct vectors seen so far.
struct Archive {
    size: usize,
    /// (cost, half kicks, discovery index, candidate)
    entries: Vec<(f64, usize, u64, Candidate)>,
    seen: HashSet<Vec<i32>>,
}

impl Archive {
    fn new(size: usize) -> Self {
        Self {
            size,
            entries: Vec::new(),
            seen: HashSet::new(),
        }
    }

    fn key(e: &(f64, usize, u64, Candidate)) -> (f64, usize, u64) {
        (e.0, e.1, e.2)
    }

    fn offer(&mut self, c: Candidate, order: u64) {
        if self.seen.contains(&c.z) {
            return;
        }
        let entry = (c.cost, c.half_kicks, order, c);
        if self.entries.len() >= self.size {
            let worst = self.entries.last().map(Self::key).expect("full archive");
            if Self::key(&entry) >= worst {
                return;
            }
            let removed = self.entries.pop().expect("full archive");
            self.seen.remove(&removed.3.z);
        }
        self.seen.insert(entry.3.z.clone());
        let pos = self
            .entries
            .partition_point(|e| Self::key(e) < Self::key(&entry));
        self.entries.insert(pos, entry);
    }
}

/// Generations without improvement before a population is re-seeded.
const STAGNATION_GENERATIONS: usize = 60;

struct RestartOutcome {
    archive: Vec<(f64, usize, u64, Candidate)>,
    exhausted: bool,
    evaluations: usize,
}

fn make_candidate(model: &LatticeModel, z: Vec<i32>) -> Candidate {
    let (epsilon_av, cost) = model.cost(&z);
    let half_kicks = z.iter().map(|v| v.unsigned_abs() as usize).sum();
    Candidate {
        z,
        epsilon_av,
        cost,
        half_kicks,
    }
}

fn round_vector(x: &[f64], z_max: i32, cap: Option<usize>) -> Vec<i32> {
    let mut z: Vec<i32> = x
        .iter()
        .map(|v| (v.round() as i32).clamp(-z_max, z_max))
        .collect();
    project_cap(&mut z, cap);
    z
}

/// Steepest-descent over single ±1 moves until no move improves.
fn polish(model: &LatticeModel, start: Candidate, z_max: i32, cap: Option<usize>, evals: &mut usize) -> Candidate {
    let mut best = start;
    loop {
        let mut improved: Option<Candidate> = None;
        for i in 0..best.z.len() {
            for step in [1, -1] {
                let v = best.z[i] + step;
                if v.abs() > z_max {
                    continue;
                }
                let mut z = best.z.clone();
                z[i] = v;
                if cap.is_some_and(|c| z.iter().map(|v| v.unsigned_abs() as usize).sum::<usize>() > c) {
                    continue;
                }
                let c = make_candidate(model, z);
                *evals += 1;
                let target = improved.as_ref().unwrap_or(&best);
                if (c.cost, c.half_kicks) < (target.cost, target.half_kicks) {
                    improved = Some(c);
                }
            }
        }
        match improved {
            Some(c) => best = c,
            None => return best,
        }
    }
}

fn run_restart(model: &LatticeModel, cfg: &SearchConfig, index: u64) -> RestartOutcome {
    let mut rng = stream_rng(cfg.seed, index);
    let dim = model.dim;
    let z_max = cfg.z_max as i32;
    let bound = f64::from(z_max) + 0.49;
    let cap = cfg.half_kick_cap();
    let np = cfg.population;
    let mut archive = Archive::new(cfg.candidates);
    let mut order: u64 = 0;
    let mut evals = 0usize;

    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| (0..dim).map(|_| rng.random_range(-bound..bound)).collect())
        .collect();
    let mut costs: Vec<f64> = Vec::with_capacity(np);
    for x in &pop {
        let c = make_candidate(model, round_vector(x, z_max, cap));
        evals += 1;
        costs.push(c.cost);
        archive.offer(c, order);
        order += 1;
    }

    let mut stagnant = 0;
    while evals + np <= cfg.eval_budget {
        let f = rng.random_range(0.5..1.0);
        let cr = 0.9;
        let mut improved = false;
        for i in 0..np {
            let mut pick = || loop {
                let r = rng.random_range(0..np);
                if r != i {
                    break r;
                }
            };
            let (r1, mut r2, mut r3) = (pick(), pick(), pick());
            while r2 == r1 {
                r2 = pick();
            }
            while r3 == r1 || r3 == r2 {
                r3 = pick();
            }
            let forced = rng.random_range(0..dim);
            let trial: Vec<f64> = (0..dim)
                .map(|k| {
                    if k == forced || rng.random::<f64>() < cr {
                        (pop[r1][k] + f * (pop[r2][k] - pop[r3][k])).clamp(-bound, bound)
                    } else {
                        pop[i][k]
                    }
                })
                .collect();
            let c = make_candidate(model, round_vector(&trial, z_max, cap));
            evals += 1;
            if c.cost <= costs[i] {
                if c.cost < costs[i] {
                    improved = true;
                }
                costs[i] = c.cost;
                pop[i] = trial;
            }
            archive.offer(c, order);
            order += 1;
        }
        stagnant = if improved { 0 } else { stagnant + 1 };
        if stagnant >= STAGNATION_GENERATIONS {
            // Converged: keep the best member and re-seed the rest.
            let keep = (0..np).min_by(|&a, &b| costs[a].total_cmp(&costs[b])).unwrap_or(0);
            for i in (0..np).filter(|&i| i != keep) {
                pop[i] = (0..dim).map(|_| rng.random_range(-bound..bound)).collect();
                let c = make_candidate(model, round_vector(&pop[i], z_max, cap));
                evals += 1;
                costs[i] = c.cost;
                archive.offer(c, order);
                order += 1;
            }
            stagnant = 0;
        }
    }
    let exhausted = stagnant < STAGNATION_GENERATIONS / 4;

    let finalists: Vec<Candidate> = archive.entries.iter().map(|e| e.3.clone()).collect();
    for c in finalists {
        let p = polish(model, c, z_max, cap, &mut evals);
        archive.offer(p, order);
        order += 1;
    }
    RestartOutcome {
        archive: archive.entries,
        exhausted,
        evaluations: evals,
    }
}

/// Differential evolution on the continuous relaxation of the integer
/// lattice, with rounding and a hard kick-cap projection at every
/// evaluation, followed by a ±1 polish of each archived vector. Restarts
/// run in parallel on independent random streams and are merged in index
/// order, so the result does not depend on scheduling.
pub fn stage1_global(ctx: &GateContext, cfg: &SearchConfig) -> Result<Stage1Result> {
    cfg.validate()?;
    let model = LatticeModel::new(ctx, cfg);
    let outcomes: Vec<RestartOutcome> = (0..cfg.restarts as u64)
        .into_par_iter()
        .map(|r| run_restart(&model, cfg, r))
        .collect();
    let mut merged = Archive::new(cfg.candidates);
    let mut evaluations = 0;
    let mut exhausted = false;
    for (r, out) in outcomes.into_iter().enumerate() {
        evaluations += out.evaluations;
        exhausted |= out.exhausted;
        for (_, _, order, c) in out.archive {
            merged.offer(c, ((r as u64) << 40) | order);
        }
    }
    Ok(Stage1Result {
        candidates: merged.entries.into_iter().map(|e| e.3).collect(),
        budget_exhausted: exhausted,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kicks::{evaluate, ApgSequence, HalfGroup};
    use crate::optimize::tests::five_ion_context;
    use approx::assert_relative_eq;

    #[test]
    fn lattice_model_matches_closed_form() {
        let ctx = five_ion_context();
        let mut cfg = SearchConfig::new(0.74 * ctx.modes.com_period);
        cfg.group_count = 10;
        cfg.f_rep = None;
        let model = LatticeModel::new(&ctx, &cfg);
        let z = vec![2, -1, 0, 5, -3];
        let groups = z
            .iter()
            .enumerate()
            .map(|(j, &z)| HalfGroup {
                z,
                time: cfg.gate_time * (j + 1) as f64 / 10.0,
            })
            .collect();
        let seq = ApgSequence::new(cfg.scheme, None, groups, 5).unwrap();
        let m = evaluate(&seq, &ctx.modes, ctx.pair, &ctx.thermal, cfg.epsilon_pi).unwrap();
        assert_relative_eq!(model.epsilon(&z), m.epsilon_av, max_relative = 1e-10);
        assert_relative_eq!(model.cost(&z).1, m.cost(), max_relative = 1e-10);
    }

    #[test]
    fn cap_projection() {
        let mut z = vec![5, -5, 3, 0, -1];
        project_cap(&mut z, Some(8));
        assert_eq!(z.iter().map(|v| v.abs()).sum::<i32>(), 8);
        assert!(z.iter().all(|v| v.abs() <= 3));
        let mut z = vec![1, 2];
        project_cap(&mut z, None);
        assert_eq!(z, vec![1, 2]);
    }

    #[test]
    fn archive_ranks_and_dedups() {
        let mk = |z: Vec<i32>, cost: f64| Candidate {
            half_kicks: z.iter().map(|v| v.unsigned_abs() as usize).sum(),
            z,
            epsilon_av: cost,
            cost,
        };
        let mut a = Archive::new(2);
        a.offer(mk(vec![1, 1], 0.5), 0);
        a.offer(mk(vec![1, 0], 0.5), 1);
        let zs: Vec<_> = a.entries.iter().map(|e| e.3.z.clone()).collect();
        assert_eq!(zs, vec![vec![1, 0], vec![1, 1]]);
        a.offer(mk(vec![2, 0], 0.1), 2);
        a.offer(mk(vec![3, 0], 0.2), 3);
        a.offer(mk(vec![2, 0], 0.1), 4);
        let zs: Vec<_> = a.entries.iter().map(|e| e.3.z.clone()).collect();
        assert_eq!(zs, vec![vec![2, 0], vec![3, 0]]);
    }

    #[test]
    fn stage1_feasible_and_deterministic() {
        let ctx = five_ion_context();
        let mut cfg = SearchConfig::new(0.74 * ctx.modes.com_period);
        cfg.group_count = 20;
        cfg.restarts = 2;
        cfg.eval_budget = 4000;
        cfg.kick_cap = Some(40);
        let a = stage1_global(&ctx, &cfg).unwrap();
        let b = stage1_global(&ctx, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.candidates.is_empty());
        let zero_cost = 2.0 / 3.0 * FRAC_PI_4 * FRAC_PI_4;
        assert!(a.candidates[0].cost <= zero_cost);
        for c in &a.candidates {
            assert!(c.z.iter().all(|v| v.abs() <= 5));
            assert!(c.half_kicks <= 20);
        }
        for w in a.candidates.windows(2) {
            assert!(w[0].cost <= w[1].cost);
        }
    }
}
