use proptest::prelude::*;
use spde_ldp::dynamics::{simulate_stream, solve_skeleton};
use spde_ldp::*;

fn kind() -> impl Strategy<Value = DomainKind> {
    prop_oneof![Just(DomainKind::Periodic), Just(DomainKind::Dirichlet)]
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn basis_is_orthonormal(kind in kind(), n in 4usize..40) {
        let s = SpaceDiscretization::new(kind, n, 2.0).unwrap();
        let basis: Vec<_> = (1..=n).map(|k| s.basis_vector(k).unwrap()).collect();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((s.h_inner(&basis[i], &basis[j]).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_contracts_and_nests((kind, n, g) in (kind(), 6usize..30).prop_flat_map(|(k, n)| (Just(k), Just(n), vec_of(n))),
                                      a in 1usize..6, b in 1usize..6) {
        let s = SpaceDiscretization::new(kind, n, 2.0).unwrap();
        let g = DualVector(g);
        let (lo, hi) = (a.min(b), a.max(b) + 1);
        let ph = s.project_galerkin(&g, hi).unwrap();
        prop_assert!(s.h_norm(&ph) <= s.h_norm(&g) * (1.0 + 1e-12) + 1e-14);
        let plh = s.project_galerkin(&DualVector(ph.0.clone()), lo).unwrap();
        let pl = s.project_galerkin(&g, lo).unwrap();
        prop_assert!(s.h_distance(&plh, &pl) < 1e-10 * (1.0 + s.h_norm(&g)));
        let full = s.project_galerkin(&g, n).unwrap();
        prop_assert!(s.h_distance(&full, &g) < 1e-10 * (1.0 + s.h_norm(&g)));
    }

    #[test]
    fn summation_by_parts((kind, n, u) in (kind(), 4usize..30).prop_flat_map(|(k, n)| (Just(k), Just(n), vec_of(n))), seed in 0u64..1000) {
        let s = SpaceDiscretization::new(kind, n, 2.0).unwrap();
        let flux: Vec<f64> = (0..s.num_cells()).map(|c| ((c as u64 * 7 + seed) as f64).sin()).collect();
        let mut div = vec![0.0; n];
        s.neg_divergence_into(&flux, &mut div);
        let du = s.gradient(&u);
        let rhs: f64 = -s.mesh_width() * flux.iter().zip(&du).map(|(f, d)| f * d).sum::<f64>();
        prop_assert!((s.h_inner(&div, &u).unwrap() - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn drift_is_pure(u in vec_of(16), which in 0usize..8) {
        let m = BuiltinModel::standard_suite()[which].build(16).unwrap();
        let u = StateVector(u.iter().map(|x| 0.2 * x).collect());
        let a = m.drift(0.3, &u).unwrap();
        let b = m.drift(0.3, &u).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn control_energy_scales_quadratically(vals in prop::collection::vec(-3.0..3.0f64, 10), s in -4.0..4.0f64) {
        let grid = TimeGrid::new(0.5, 10).unwrap();
        let h = Control::new(grid, vals.iter().map(|v| vec![*v]).collect()).unwrap();
        let e = h.energy();
        prop_assert!((h.scaled(s).energy() - s * s * e).abs() <= 1e-12 * (1.0 + s * s * e));
    }
}

#[test]
fn simulation_is_seed_deterministic() {
    let m = BuiltinModel::Quasilinear.build(16).unwrap();
    let grid = TimeGrid::new(0.05, 50).unwrap();
    let h = Control::zero(grid, 1);
    let x0 = StateVector(m.space().nodes().iter().map(|x| (std::f64::consts::PI * x).sin()).collect());
    let opts = SchemeOpts::default();
    let a = simulate_stream(&m, &x0, &h, 0.3, grid, 11, 4, None, &opts).unwrap().0;
    let b = simulate_stream(&m, &x0, &h, 0.3, grid, 11, 4, None, &opts).unwrap().0;
    let c = simulate_stream(&m, &x0, &h, 0.3, grid, 11, 5, None, &opts).unwrap().0;
    assert_eq!(a.states, b.states);
    assert_ne!(a.states, c.states);
}

/// Implicit Euler on a single eigenmode is a scalar recursion.
#[test]
fn heat_mode_decays_by_resolvent_power() {
    for kind in [DomainKind::Periodic, DomainKind::Dirichlet] {
        let model = match kind {
            DomainKind::Periodic => BuiltinModel::Heat { noise_modes: 1 }.build(32).unwrap(),
            DomainKind::Dirichlet => BuiltinModel::PLaplace { p: 2.0 }.build(32).unwrap(),
        };
        let s = model.space();
        let grid = TimeGrid::new(0.1, 100).unwrap();
        for k in [1, 2, 5] {
            let e = s.basis_vector(k).unwrap();
            let traj = solve_skeleton(&model, &e, &Control::zero(grid, 1), grid, &SchemeOpts::default()).unwrap();
            let want = (1.0 + grid.step() * s.laplacian_eigenvalue(k)).powi(-100);
            let got = s.h_inner(traj.final_state(), &e).unwrap();
            assert!((got - want).abs() < 1e-9 * want, "{kind:?} k={k}: {got} vs {want}");
        }
    }
}
