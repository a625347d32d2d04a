#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use nmpc_core::dynamics::{CarModel, CarParams};
use nmpc_core::nmpc::ReferenceData;
use nmpc_core::ocp::{solve_ocp, OcpSetup, OcpSolution, TrackingOcp};
use nmpc_core::reference::{synth_track, SynthParams, TrackKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N: usize = 11;
/// Number of control bound rows per stage of the car OCP (upper and lower for two inputs).
pub const CONTROL_ROWS: usize = 4;

pub fn car_model() -> Arc<CarModel> {
    Arc::new(CarModel::new(CarParams::default()).unwrap())
}

pub fn car_setup() -> Arc<OcpSetup> {
    static SETUP: OnceLock<Arc<OcpSetup>> = OnceLock::new();
    SETUP
        .get_or_init(|| Arc::new(OcpSetup::car(car_model(), [1.0, 0.1, 0.001]).unwrap()))
        .clone()
}

/// Default oval reference, long enough for every window used in tests.
pub fn oval() -> Arc<ReferenceData> {
    static REF: OnceLock<Arc<ReferenceData>> = OnceLock::new();
    REF.get_or_init(|| {
        let params = SynthParams {
            duration: 120.0,
            ..Default::default()
        };
        Arc::new(ReferenceData::from(
            &synth_track(TrackKind::Oval, &params).unwrap(),
        ))
    })
    .clone()
}

pub fn ocp_at(k0: usize, x0: DVector<f64>) -> TrackingOcp {
    let (s, c) = oval().window(k0, N);
    TrackingOcp::new(car_setup(), k0, x0, s, c).unwrap()
}

/// Reference state at `k0` plus a random perturbation of the given size.
pub fn perturbed_start(rng: &mut ChaCha8Rng, k0: usize, size: f64) -> DVector<f64> {
    let mut x = oval().state(k0).clone();
    let spread = [1.0, 1.0, 0.1, 1.0, 0.05];
    for (i, s) in spread.iter().enumerate() {
        x[i] += size * s * rng.random_range(-1.0..=1.0);
    }
    x
}

/// A solved, strongly regular OCP on the oval with a random start.
pub fn random_instance(seed: u64) -> (TrackingOcp, OcpSolution) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let k0 = rng.random_range(0..300);
        let x0 = perturbed_start(&mut rng, k0, 1.0);
        let ocp = ocp_at(k0, x0);
        if let Ok(sol) = solve_ocp(&ocp, None) {
            if sol.kkt.regularity.is_strongly_regular() && !sol.relaxation_used {
                return (ocp, sol);
            }
        }
    }
}

/// Active inequality rows that bound states rather than controls.
pub fn active_state_rows(ocp: &TrackingOcp, sol: &OcpSolution) -> usize {
    let layout = ocp.layout();
    (0..ocp.horizon())
        .flat_map(|k| layout.stage_rows(k).skip(CONTROL_ROWS))
        .filter(|r| sol.kkt.active_set.contains(r))
        .count()
}

/// Strongly regular instances whose solution has an active steering-angle
/// bound: the car starts beside the reference while already steering away.
pub fn state_bound_instance(seed: u64) -> (TrackingOcp, OcpSolution) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    loop {
        let k0 = rng.random_range(0..300);
        let mut x0 = oval().state(k0).clone();
        let side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (c, s) = (x0[2].cos(), x0[2].sin());
        let offset = rng.random_range(3.0..6.0);
        x0[0] -= side * offset * s;
        x0[1] += side * offset * c;
        x0[4] = side * rng.random_range(0.3..0.48);
        let ocp = ocp_at(k0, x0);
        if let Ok(sol) = solve_ocp(&ocp, None) {
            if sol.kkt.regularity.is_strongly_regular()
                && !sol.relaxation_used
                && active_state_rows(&ocp, &sol) > 0
            {
                return (ocp, sol);
            }
        }
    }
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}
