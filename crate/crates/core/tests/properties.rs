//! Properties of whole simulation runs.

use std::collections::BTreeSet;

use kvsim::assembly::LoadSpec;
use kvsim::fem::DeformationField;
use kvsim::linsolve::SolverConfig;
use kvsim::material::{self, MaterialParams};
use kvsim::mesh::{build_box_mesh, BoxSpec};
use kvsim::oracle::{IsotropicTensors, LinearKelvinVoigt, LinearScheme};
use kvsim::stepper::{fit_convergence_slope, EnergyLedger, Simulation};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn params() -> MaterialParams {
    MaterialParams::new(1.0e3, 1.5e3, 3.0e3).unwrap()
}

fn stretched_run(n: usize, matrix: Matrix3<f64>, translation: Vector3<f64>, solver: SolverConfig) -> (DeformationField, EnergyLedger) {
    let mesh = build_box_mesh(&BoxSpec::cube(n)).unwrap();
    let y0 = DeformationField::affine(&mesh, &matrix, &translation);
    let mut sim = Simulation::new(mesh, params(), LoadSpec::none(), solver).unwrap();
    let (state, ledger) = sim.run(y0, 0.05, 0.5, |_, _| Ok(())).unwrap();
    (state.y, ledger)
}

fn stretch() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[test]
fn ledger_is_invariant_under_rigid_motion_of_the_initial_state() {
    let (_, reference) = stretched_run(2, stretch(), Vector3::zeros(), SolverConfig::default());
    let q = material::rotation(&Vector3::new(1.0, -2.0, 0.5), 0.7);
    let (_, moved) = stretched_run(2, q * stretch(), Vector3::new(0.3, -1.0, 2.0), SolverConfig::default());
    assert!(rel(reference.initial_elastic_energy, moved.initial_elastic_energy) < 1e-8);
    for (a, b) in reference.rows.iter().zip(&moved.rows) {
        assert!(rel(a.elastic_energy, b.elastic_energy) < 1e-8, "step {}: {} vs {}", a.step, a.elastic_energy, b.elastic_energy);
        assert!(rel(a.diss_cum_quad, b.diss_cum_quad) < 1e-8);
    }
}

#[test]
fn trajectory_is_insensitive_to_the_rigid_motion_shift() {
    let base = SolverConfig::default();
    let smaller = SolverConfig { shift_delta: base.shift_delta / 10.0, ..base };
    let (ya, la) = stretched_run(2, stretch(), Vector3::zeros(), base);
    let (yb, lb) = stretched_run(2, stretch(), Vector3::zeros(), smaller);
    let diff = ya.dofs.iter().zip(&yb.dofs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6, "max nodal difference {diff}");
    assert!(rel(la.final_elastic_energy(), lb.final_elastic_energy()) < 1e-6);
}

#[test]
fn unloaded_relaxation_never_gains_energy() {
    let (_, ledger) = stretched_run(3, stretch(), Vector3::zeros(), SolverConfig::default());
    assert!(ledger.energy_increases().is_empty(), "energy rose at steps {:?}", ledger.energy_increases());
    assert!(ledger.final_elastic_energy() < 0.8 * ledger.initial_elastic_energy);
    assert!(ledger.cumulative_sums_consistent());
}

#[test]
fn linear_schemes_agree_at_first_order() {
    let mesh = build_box_mesh(&BoxSpec::cube(1)).unwrap();
    let u0 = DeformationField::interpolate(&mesh, |x| Vector3::new(0.05 * x[1] * x[2], 0.02 * x[0], -0.03 * x[0] * x[0])).dofs;
    let mut lin = LinearKelvinVoigt::new(mesh, IsotropicTensors::from_params(&params()), &BTreeSet::new(), &SolverConfig::default())
        .unwrap();
    let points: Vec<(f64, f64)> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&tau| {
            let e = lin.run(&u0, tau, 0.4, LinearScheme::Explicit).unwrap();
            let i = lin.run(&u0, tau, 0.4, LinearScheme::Implicit).unwrap();
            let diff: Vec<f64> = e.iter().zip(&i).map(|(a, b)| a - b).collect();
            (tau, lin.l2_norm(&diff))
        })
        .collect();
    let slope = fit_convergence_slope(&points).unwrap();
    assert!((0.85..=1.15).contains(&slope), "slope {slope}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn affine_starts_relax_monotonically(
        a in 0.85f64..1.25, b in 0.85f64..1.25, c in 0.85f64..1.25, shear in -0.2f64..0.2
    ) {
        let mut m = Matrix3::from_diagonal(&Vector3::new(a, b, c));
        m[(0, 1)] = shear;
        let mesh = build_box_mesh(&BoxSpec::cube(1)).unwrap();
        let y0 = DeformationField::affine(&mesh, &m, &Vector3::zeros());
        let mut sim = Simulation::new(mesh, params(), LoadSpec::none(), SolverConfig::default()).unwrap();
        let (_, ledger) = sim.run(y0, 0.05, 0.25, |_, _| Ok(())).unwrap();
        let scale = ledger.initial_elastic_energy.max(1e-12);
        let mut previous = ledger.initial_elastic_energy;
        for row in &ledger.rows {
            prop_assert!(row.elastic_energy <= previous + 1e-10 * scale);
            prop_assert!(row.diss_inc_quad >= 0.0);
            previous = row.elastic_energy;
        }
    }
}
