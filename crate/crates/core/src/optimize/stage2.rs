use std::f64::consts::FRAC_PI_4;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{better, stream_rng, GateContext, GateSolution, SearchConfig};
use crate::error::{Error, Result};
use crate::kicks::{self, ApgSequence, HalfGroup};
use crate::linalg::solve_symmetric;

/// Closed-form residuals of an anti-symmetric sequence in terms of its
/// positive-half kicks only. `Σ r² = ε_av`.
///
/// With `E = Σ_p c_p e^{iωt_p}` over the positive half and
/// `P = Σ_{p<q} c_p c_q sin(ω(t_q − t_p))`, the mirrored sequence has
/// `Σ_{k<j} a_j a_k sin(ω(t_j − t_k)) = 2P − 2 Re E Im E` and
/// `|Δβ| ∝ |Im E|`.
pub(crate) struct HalfModel {
    omega: Vec<f64>,
    theta_coef: Vec<f64>,
    resid_coef: Vec<f64>,
}

const SQRT_2_3: f64 = 0.816_496_580_927_726;

impl HalfModel {
    pub(crate) fn new(ctx: &GateContext, cfg: &SearchConfig) -> Self {
        let modes = &ctx.modes;
        let (m, n) = ctx.pair;
        let mut omega = Vec::new();
        let mut theta_coef = Vec::new();
        let mut resid_coef = Vec::new();
        for a in 0..modes.mode_count() {
            let eta = modes.lamb_dicke[a];
            let (bm, bn) = (modes.coupling(a, m), modes.coupling(a, n));
            omega.push(modes.frequencies[a]);
            theta_coef.push(2.0 * cfg.scheme.phase_factor() * eta * eta * bm * bn);
            let weight = (0.5 + ctx.thermal.occupations[a]) * (bm * bm + bn * bn);
            resid_coef.push((4.0 / 3.0 * weight).sqrt() * 2.0 * eta * cfg.scheme.displacement_factor());
        }
        Self {
            omega,
            theta_coef,
            resid_coef,
        }
    }

    pub(crate) fn residual_count(&self) -> usize {
        self.omega.len() + 1
    }

    /// Residuals, and if `jac` is given, `∂r/∂t_p` written into it
    /// (rows: residuals, columns: kicks).
    pub(crate) fn residuals(&self, times: &[f64], signs: &[f64], mut jac: Option<&mut DMatrix<f64>>) -> Vec<f64> {
        let k = times.len();
        let mut r = vec![0.0; self.residual_count()];
        let mut theta = 0.0;
        let mut dtheta = vec![0.0; if jac.is_some() { k } else { 0 }];
        let mut cs = vec![(0.0, 0.0); k];
        for (a, &w) in self.omega.iter().enumerate() {
            let (mut er, mut ei) = (0.0, 0.0);
            for p in 0..k {
                let (s, c) = (w * times[p]).sin_cos();
                cs[p] = (c, s);
                er += signs[p] * c;
                ei += signs[p] * s;
            }
            let mut pp = 0.0;
            let (mut ar, mut ai) = (0.0, 0.0);
            for p in 0..k {
                let (c, s) = cs[p];
                let cp = signs[p];
                // Im(e_p · conj(A_p))
                pp += cp * (s * ar - c * ai);
                if let Some(jm) = jac.as_deref_mut() {
                    let (br, bi) = (er - ar - cp * c, ei - ai - cp * s);
                    let (dr, di) = (ar - br, ai - bi);
                    let dp = w * cp * (c * dr + s * di);
                    let dcs = w * cp * (er * c - ei * s);
                    dtheta[p] += self.theta_coef[a] * (2.0 * dp - 2.0 * dcs);
                    jm[(a + 1, p)] = self.resid_coef[a] * w * cp * c;
                }
                ar += cp * c;
                ai += cp * s;
            }
            theta += self.theta_coef[a] * (2.0 * pp - 2.0 * er * ei);
            r[a + 1] = self.resid_coef[a] * ei;
        }
        r[0] = SQRT_2_3 * (theta.abs() - FRAC_PI_4);
        if let Some(jm) = jac {
            let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
            for p in 0..k {
                jm[(0, p)] = SQRT_2_3 * sgn * dtheta[p];
            }
        }
        r
    }

    pub(crate) fn epsilon(&self, times: &[f64], signs: &[f64]) -> f64 {
        self.residuals(times, signs, None).iter().map(|v| v * v).sum()
    }
}

/// Non-zero groups of a half-vector with their kick spacing.
#[derive(Debug, Clone)]
struct Groups {
    sizes: Vec<usize>,
    signs: Vec<f64>,
    /// 1/f_rep, or 0 for simultaneous groups
    h: f64,
    half_gate: f64,
}

impl Groups {
    fn new(z: &[i32], cfg: &SearchConfig) -> Self {
        let live: Vec<i32> = z.iter().copied().filter(|&v| v != 0).collect();
        Self {
            sizes: live.iter().map(|v| v.unsigned_abs() as usize).collect(),
            signs: live.iter().map(|&v| f64::from(v.signum())).collect(),
            h: cfg.f_rep.map_or(0.0, |f| 1.0 / f),
            half_gate: 0.5 * cfg.gate_time,
        }
    }

    fn count(&self) -> usize {
        self.sizes.len()
    }

    fn width(&self, i: usize) -> f64 {
        (self.sizes[i] as f64 - 1.0) * self.h
    }

    /// Kick times and signs for the given centres, plus each kick's group.
    fn kicks(&self, centres: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let mut t = Vec::new();
        let mut s = Vec::new();
        let mut owner = Vec::new();
        for (i, &c) in centres.iter().enumerate() {
            let n = self.sizes[i];
            for k in 0..n {
                t.push(c + (k as f64 - 0.5 * (n as f64 - 1.0)) * self.h);
                s.push(self.signs[i]);
                owner.push(i);
            }
        }
        (t, s, owner)
    }

    fn sequence(&self, z_signed: &[i32], centres: &[f64], cfg: &SearchConfig) -> Result<ApgSequence> {
        let groups = z_signed
            .iter()
            .zip(centres)
            .map(|(&z, &time)| HalfGroup { z, time })
            .collect();
        ApgSequence::new(cfg.scheme, cfg.f_rep, groups, cfg.z_max)
    }

    fn signed(&self) -> Vec<i32> {
        self.sizes
            .iter()
            .zip(&self.signs)
            .map(|(&n, &s)| n as i32 * s as i32)
            .collect()
    }
}

/// Free-timing layout: the `M + 1` gaps between the origin guard, the
/// groups and the end of the half gate are `S · softmax(x)`, which keeps
/// ordering, minimum spacing and the `τ_G/2` bound satisfied for every x.
struct FreeLayout<'a> {
    groups: &'a Groups,
    base: Vec<f64>,
    slack: f64,
}

impl<'a> FreeLayout<'a> {
    fn new(groups: &'a Groups) -> Result<Self> {
        let m = groups.count();
        let h = groups.h;
        let mut base = Vec::with_capacity(m);
        let mut acc = 0.5 * h;
        for i in 0..m {
            base.push(acc + 0.5 * groups.width(i));
            acc += groups.width(i) + h;
        }
        let used = 0.5 * h + (0..m).map(|i| groups.width(i)).sum::<f64>() + (m.saturating_sub(1)) as f64 * h;
        let slack = groups.half_gate - used;
        if !(slack > 0.0) {
            return Err(Error::Infeasible(format!(
                "{} kicks in {m} groups need {used:.3e} s but the half gate is {:.3e} s",
                groups.sizes.iter().sum::<usize>(),
                groups.half_gate
            )));
        }
        Ok(Self { groups, base, slack })
    }

    fn softmax(x: &[f64]) -> Vec<f64> {
        let top = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - top).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn centres(&self, x: &[f64]) -> Vec<f64> {
        let sigma = Self::softmax(x);
        let mut cum = 0.0;
        (0..self.groups.count())
            .map(|i| {
                cum += self.slack * sigma[i];
                self.base[i] + cum
            })
            .collect()
    }

    /// Inverse of [`Self::centres`] after projecting onto the feasible set.
    fn params(&self, centres: &[f64]) -> Vec<f64> {
        let m = self.groups.count();
        let floor = 1e-9 * self.slack;
        let mut gaps = Vec::with_capacity(m + 1);
        let mut prev = 0.0;
        for i in 0..m {
            let off = centres[i] - self.base[i];
            gaps.push((off - prev).max(floor));
            prev = off.max(prev);
        }
        gaps.push((self.slack - prev).max(floor));
        let total: f64 = gaps.iter().sum();
        gaps.iter().map(|g| (g / total).ln()).collect()
    }

    fn residuals(&self, model: &HalfModel, x: &[f64], want_jac: bool) -> (Vec<f64>, Option<DMatrix<f64>>) {
        let centres = self.centres(x);
        let (t, s, owner) = self.groups.kicks(&centres);
        if !want_jac {
            return (model.residuals(&t, &s, None), None);
        }
        let rows = model.residual_count();
        let mut jt = DMatrix::zeros(rows, t.len());
        let r = model.residuals(&t, &s, Some(&mut jt));
        let m = self.groups.count();
        // Collapse kick columns into group-centre columns.
        let mut jc = DMatrix::<f64>::zeros(rows, m);
        for (p, &g) in owner.iter().enumerate() {
            for row in 0..rows {
                jc[(row, g)] += jt[(row, p)];
            }
        }
        // ∂centre_i/∂x_l = S σ_l ([l ≤ i] − Σ_{k≤i} σ_k)
        let sigma = Self::softmax(x);
        let mut dc = DMatrix::<f64>::zeros(m, m + 1);
        let mut cum = 0.0;
        for i in 0..m {
            cum += sigma[i];
            for l in 0..=m {
                let ind = if l <= i { 1.0 } else { 0.0 };
                dc[(i, l)] = self.slack * sigma[l] * (ind - cum);
            }
        }
        (r, Some(jc * dc))
    }
}

/// Levenberg-Marquardt on `½ Σ r²`. Only decreasing steps are accepted.
fn levenberg_marquardt<F>(x0: Vec<f64>, iterations: usize, eval: F) -> (Vec<f64>, f64)
where
    F: Fn(&[f64], bool) -> (Vec<f64>, Option<DMatrix<f64>>),
{
    let mut x = x0;
    let (r, j) = eval(&x, true);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut r = DVector::from_vec(r);
    let mut j = j.expect("jacobian requested");
    let mut lambda = 1e-3;
    let n = x.len();
    for _ in 0..iterations {
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let scale = (0..n).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-300);
        let mut accepted = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1e-9 * scale);
            }
            let Some(step) = solve_symmetric(a, &(-&g)) else {
                lambda *= 4.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let (rn, _) = eval(&cand, false);
            let cn: f64 = rn.iter().map(|v| v * v).sum();
            if cn.is_finite() && cn < cost {
                let rel = (cost - cn) / cost.max(1e-300);
                x = cand;
                cost = cn;
                let (rr, jj) = eval(&x, true);
                r = DVector::from_vec(rr);
                j = jj.expect("jacobian requested");
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < 1e-10 {
                    return (x, cost);
                }
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    (x, cost)
}

/// Grid layout: group `i` fires at integer slots `a_i, …, a_i + n_i − 1`
/// of width `1/f_rep`, with `a_0 ≥ 1` and one empty slot between groups
/// implied by `a_{i+1} ≥ a_i + n_i`.
struct GridLayout<'a> {
    groups: &'a Groups,
    last_slot: i64,
}

impl<'a> GridLayout<'a> {
    fn new(groups: &'a Groups) -> Result<Self> {
        let last_slot = (groups.half_gate / groups.h * (1.0 + 1e-12)).floor() as i64;
        let need: i64 = groups.sizes.iter().map(|&n| n as i64).sum();
        if need > last_slot {
            return Err(Error::Infeasible(format!(
                "{need} kicks do not fit in {last_slot} grid slots"
            )));
        }
        Ok(Self { groups, last_slot })
    }

    fn feasible(&self, a: &[i64]) -> bool {
        let m = a.len();
        if m == 0 {
            return true;
        }
        if a[0] < 1 {
            return false;
        }
        for i in 0..m - 1 {
            if a[i + 1] < a[i] + self.groups.sizes[i] as i64 {
                return false;
            }
        }
        a[m - 1] + self.groups.sizes[m - 1] as i64 - 1 <= self.last_slot
    }

    /// Nearest feasible slot assignment to the given centres.
    fn project(&self, centres: &[f64]) -> Vec<i64> {
        let g = self.groups;
        let m = g.count();
        let mut a: Vec<i64> = (0..m)
            .map(|i| (centres[i] / g.h - 0.5 * (g.sizes[i] as f64 - 1.0)).round() as i64)
            .collect();
        for i in 0..m {
            let lo = if i == 0 { 1 } else { a[i - 1] + g.sizes[i - 1] as i64 };
            a[i] = a[i].max(lo);
        }
        for i in (0..m).rev() {
            let hi = if i == m - 1 {
                self.last_slot - g.sizes[i] as i64 + 1
            } else {
                a[i + 1] - g.sizes[i] as i64
            };
            a[i] = a[i].min(hi);
        }
        a
    }

    fn centres(&self, a: &[i64]) -> Vec<f64> {
        let g = self.groups;
        a.iter()
            .enumerate()
            .map(|(i, &ai)| (ai as f64 + 0.5 * (g.sizes[i] as f64 - 1.0)) * g.h)
            .collect()
    }

    fn epsilon(&self, model: &HalfModel, a: &[i64]) -> f64 {
        let (t, s, _) = self.groups.kicks(&self.centres(a));
        model.epsilon(&t, &s)
    }

    /// Compass search over slot indices with halving step sizes. Besides
    /// single-group moves it tries shifting a group together with all
    /// groups after it, which slides blocks without breaking spacing.
    fn search(&self, model: &HalfModel, start: Vec<i64>, max_rounds: usize) -> (Vec<i64>, f64) {
        let mut a = start;
        let mut best = self.epsilon(model, &a);
        let m = a.len();
        let mut step = (self.last_slot / 8).max(1);
        let mut rounds = 0;
        while step >= 1 && rounds < max_rounds {
            rounds += 1;
            let mut improved = false;
            for i in 0..m {
                for d in [step, -step] {
                    for block in [false, true] {
                        let mut b = a.clone();
                        let end = if block { m } else { i + 1 };
                        for v in &mut b[i..end] {
                            *v += d;
                        }
                        if !self.feasible(&b) {
                            continue;
                        }
                        let e = self.epsilon(model, &b);
                        if e < best {
                            best = e;
                            a = b;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step /= 2;
            }
        }
        (a, best)
    }
}

/// Uniform stage-1 centres of the non-zero groups.
fn stage1_centres(z: &[i32], cfg: &SearchConfig) -> Vec<f64> {
    z.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(j, _)| cfg.gate_time * (j + 1) as f64 / cfg.group_count as f64)
        .collect()
}

/// Local timing optimisation of one group-size vector.
///
/// Free mode runs Levenberg-Marquardt from the stage-1 centres and from
/// perturbed copies of the best point; with a finite repetition rate it
/// also runs the grid search and keeps whichever is better, so free
/// timings never do worse than the grid. Grid mode returns the grid
/// search result. The literal stage-1 layout, when it expands cleanly, is
/// kept as a fallback so the result never exceeds the starting cost.
pub fn stage2_local(ctx: &GateContext, z: &[i32], cfg: &SearchConfig) -> Result<GateSolution> {
    refine(ctx, cfg, z, 0, Instant::now(), false)
}

pub(crate) fn refine(
    ctx: &GateContext,
    cfg: &SearchConfig,
    z: &[i32],
    stream: u64,
    started: Instant,
    budget_exhausted: bool,
) -> Result<GateSolution> {
    cfg.validate()?;
    if z.len() * 2 != cfg.group_count {
        return Err(Error::invalid("z", "length must be group_count / 2"));
    }
    if z.iter().any(|v| v.unsigned_abs() > cfg.z_max) {
        return Err(Error::invalid("z", "entry exceeds z_max"));
    }
    let model = HalfModel::new(ctx, cfg);
    let groups = Groups::new(z, cfg);
    let signed = groups.signed();
    let init = stage1_centres(z, cfg);
    let finish = |centres: &[f64]| -> Result<GateSolution> {
        let seq = groups.sequence(&signed, centres, cfg)?;
        GateSolution::build(ctx, cfg, seq, started, budget_exhausted)
    };

    let mut options: Vec<GateSolution> = Vec::new();
    // The literal starting layout, if it is already valid.
    if let Ok(sol) = finish(&init) {
        if kicks::expand(&sol.sequence).is_ok() && (!cfg.grid_mode || on_grid(&sol.sequence)) {
            options.push(sol);
        }
    }
    if groups.count() == 0 {
        return options
            .pop()
            .map_or_else(|| finish(&[]), Ok);
    }

    let mut grid_best: Option<Vec<f64>> = None;
    if cfg.f_rep.is_some() {
        match GridLayout::new(&groups) {
            Ok(grid) => {
                let start = grid.project(&init);
                if grid.feasible(&start) {
                    let (a, _) = grid.search(&model, start, 200);
                    grid_best = Some(grid.centres(&a));
                } else if cfg.grid_mode {
                    return Err(Error::Infeasible("no grid assignment fits the half gate".into()));
                }
            }
            Err(e) if cfg.grid_mode => return Err(e),
            Err(_) => {}
        }
    }

    if cfg.grid_mode {
        let centres = grid_best.expect("grid mode requires f_rep");
        options.push(finish(&centres)?);
    } else {
        let layout = FreeLayout::new(&groups)?;
        let eval = |x: &[f64], jac: bool| layout.residuals(&model, x, jac);
        let mut starts = vec![layout.params(&init)];
        if let Some(g) = &grid_best {
            starts.push(layout.params(g));
            if let Ok(sol) = finish(g) {
                options.push(sol);
            }
        }
        let mut best: Option<(Vec<f64>, f64)> = None;
        for x0 in starts {
            let (x, c) = levenberg_marquardt(x0, cfg.local_iterations, eval);
            if best.as_ref().is_none_or(|b| c < b.1) {
                best = Some((x, c));
            }
        }
        let mut rng = stream_rng(cfg.seed, (1 << 48) | stream);
        for _ in 0..cfg.local_restarts {
            let (bx, bc) = best.clone().expect("at least one start");
            let x0: Vec<f64> = bx
                .iter()
                .map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let (x, c) = levenberg_marquardt(x0, cfg.local_iterations, eval);
            if c < bc {
                best = Some((x, c));
            }
        }
        let (x, _) = best.expect("at least one start");
        if let Ok(sol) = finish(&layout.centres(&x)) {
            options.push(sol);
        }
    }

    let mut pick: Option<GateSolution> = None;
    for s in options {
        if kicks::expand(&s.sequence).is_err() {
            continue;
        }
        if pick.as_ref().is_none_or(|p| better(&s, p)) {
            pick = Some(s);
        }
    }
    let mut sol = pick.ok_or_else(|| Error::Infeasible("no valid timing found".into()))?;
    sol.wall_time = started.elapsed().as_secs_f64();
    Ok(sol)
}

/// Every kick lands on an integer multiple of `1/f_rep`.
pub(crate) fn on_grid(seq: &ApgSequence) -> bool {
    let Some(f) = seq.f_rep else { return false };
    match kicks::expand(seq) {
        Ok(k) => k.times.iter().all(|t| {
            let s = t * f;
            (s - s.round()).abs() < 1e-6
        }),
        Err(_) => false,
    }
}
