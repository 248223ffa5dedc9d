#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use fastgate_core::chain::{
    calibrate_min_separation, equilibrium_positions, normal_modes, BeamGeometry, IonSpecies,
    ModeStructure, TrapFamily,
};
use fastgate_core::kicks::{ApgSequence, FlatKicks, HalfGroup, Scheme};
use rand::Rng;

pub const S_MIN: f64 = 3e-6;

/// Quartic chain calibrated to a 3 μm minimum spacing, cached per ion count.
pub fn quartic_modes(n: usize) -> ModeStructure {
    static CACHE: OnceLock<Mutex<HashMap<usize, ModeStructure>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(m) = cache.lock().unwrap().get(&n) {
        return m.clone();
    }
    let trap = calibrate_min_separation(&IonSpecies::barium133(), TrapFamily::Quartic, n, S_MIN).unwrap();
    let geo = equilibrium_positions(&trap).unwrap();
    let modes = normal_modes(&trap, &geo, &BeamGeometry::default()).unwrap();
    cache.lock().unwrap().insert(n, modes.clone());
    modes
}

/// Sorted random kick times in `[-span, span]` with random signs.
pub fn random_kicks<R: Rng>(rng: &mut R, count: usize, span: f64) -> FlatKicks {
    let mut times: Vec<f64> = (0..count).map(|_| rng.random_range(-span..span)).collect();
    times.sort_by(f64::total_cmp);
    let signs = (0..count).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    FlatKicks::new(times, signs).unwrap()
}

/// A random APG sequence whose expansion at `f_rep` is always valid.
pub fn random_sequence<R: Rng>(rng: &mut R, groups: usize, f_rep: f64, scheme: Scheme) -> ApgSequence {
    let z_max = 5;
    let mut half = Vec::with_capacity(groups);
    let mut prev_z = 0i32;
    let mut t = 0.0;
    for i in 0..groups {
        let z = rng.random_range(-(z_max as i32)..=z_max as i32);
        let zs = f64::from(z.abs().max(1));
        let gap = rng.random_range(1.0..40.0) / f_rep;
        t += if i == 0 {
            0.5 * zs / f_rep + gap
        } else {
            0.5 * (f64::from(prev_z.abs().max(1)) + zs) / f_rep + gap
        };
        half.push(HalfGroup { z, time: t });
        prev_z = z;
    }
    ApgSequence::new(scheme, Some(f_rep), half, z_max).unwrap()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
