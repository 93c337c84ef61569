use approx::assert_relative_eq;
use fbcool_core::dynamics::{
    averaged_rhs, drift_eigenvalues, estimator_drift, sigma_c_rhs, sigma_m_rhs, stability_eigenvalues,
    steady_sigma_c, steady_sigma_m, steady_state,
};
use fbcool_core::gaussian::{nbar_from_kelvin, validate};
use fbcool_core::{FeedbackLaw, Scheme, Sym2, SystemParams};
use nalgebra::{Matrix2, Matrix4, Vector4};
use proptest::prelude::*;

const SCHEMES: [Scheme; 3] = [Scheme::QndPosition, Scheme::AnnihilationHomodyne, Scheme::DualNoDamp];

fn to_na(s: &Sym2) -> Matrix2<f64> {
    Matrix2::new(s.xx, s.xp, s.xp, s.pp)
}

/// Dense Kronecker solve of `A X + X Aᵀ + Q = 0`.
fn kron_lyapunov(a: Matrix2<f64>, q: Matrix2<f64>) -> Matrix2<f64> {
    let i = Matrix2::<f64>::identity();
    let op: Matrix4<f64> = i.kronecker(&a) + a.kronecker(&i);
    let rhs = -Vector4::new(q[(0, 0)], q[(1, 0)], q[(0, 1)], q[(1, 1)]);
    let x = op.lu().solve(&rhs).expect("regular Lyapunov operator");
    Matrix2::new(x[0], x[2], x[1], x[3])
}

fn drift_na(law: &FeedbackLaw, p: &SystemParams, scheme: Scheme) -> Matrix2<f64> {
    let d = estimator_drift(law, p, scheme);
    Matrix2::new(d.a, d.b, d.c, d.d)
}

#[test]
fn steady_sigma_c_residual_below_polish_tolerance() {
    let p = SystemParams::reference_defaults();
    for scheme in SCHEMES {
        let s = steady_sigma_c(&p, scheme).unwrap();
        let r = sigma_c_rhs(&s, &p, scheme).unwrap().total();
        assert!(r.max_abs() < 1e-12, "{scheme}: {r:?}");
        assert!(validate(&s, false).is_ok());
    }
}

#[test]
fn zero_temperature_efficient_measurement_quartic() {
    for r in [0.05, 0.18, 1.0, 4.0] {
        let p = SystemParams::new(1.0, 0.0, 0.0, r, 1.0).unwrap();
        let s = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
        let xx = ((1.0 + 16.0 * r * r).sqrt() - 1.0) / (32.0 * r * r);
        let xx = xx.sqrt();
        let xp = 4.0 * p.k * xx * xx / p.omega;
        // stationary xp-equation: −ωσ_xx + ωσ_pp − 8kσ_xxσ_xp = 0
        let pp = xx + 8.0 * p.k * xx * xp / p.omega;
        assert!((s.xx - xx).abs() < 1e-10, "r={r}: {} vs {xx}", s.xx);
        assert!((s.xp - xp).abs() < 1e-10);
        assert!((s.pp - pp).abs() < 1e-10);
        assert!(sigma_c_rhs(&s, &p, Scheme::QndPosition).unwrap().total().max_abs() < 1e-12);
    }
}

#[test]
fn thermal_limit_of_weak_measurement() {
    let p = SystemParams::new(1.0, 0.3, 4.0, 1e-12, 0.5).unwrap();
    let s = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
    assert!((s - Sym2::scaled_identity(4.5)).max_abs() < 1e-8);
}

#[test]
fn gains_zero_recover_unconditional_lyapunov_state() {
    for p in [SystemParams::reference_defaults(), SystemParams::new(1.0, 0.05, 3.0, 0.4, 0.7).unwrap()] {
        for scheme in SCHEMES {
            let law = FeedbackLaw::none();
            let st = steady_state(&law, &p, scheme).unwrap();
            // Σ̇ = A₀Σ + ΣA₀ᵀ + bath diffusion + backaction diffusion
            let diffusion = match scheme {
                Scheme::QndPosition => Matrix2::new(0.0, 0.0, 0.0, 2.0 * p.k),
                _ => Matrix2::identity() * p.k,
            };
            let q = Matrix2::identity() * p.bath_diffusion() + diffusion;
            let want = kron_lyapunov(drift_na(&law, &p, scheme), q);
            let got = to_na(&st.sigma);
            let scale = want.amax();
            assert!((got - want).amax() <= 1e-9 * scale, "{scheme}: {got} vs {want}");
        }
    }
}

#[test]
fn steady_sigma_m_matches_dense_oracle_and_time_march() {
    let p = SystemParams::new(1.0, 0.02, 3.0, 0.4, 0.7).unwrap();
    for scheme in SCHEMES {
        for law in [
            FeedbackLaw::kalman_xp(2.0),
            FeedbackLaw::kalman_x_only(0.7),
            FeedbackLaw { gains: fbcool_core::Gains { a_x: 1.1, a_p: 0.3, b_x: -0.2, b_p: 0.9 }, ..FeedbackLaw::kalman_xp(0.0) },
        ] {
            let sc = steady_sigma_c(&p, scheme).unwrap();
            let sm = steady_sigma_m(&sc, &law, &p, scheme).unwrap();
            let source = -sigma_c_rhs(&sc, &p, scheme).unwrap().conditioning;
            let want = kron_lyapunov(drift_na(&law, &p, scheme), to_na(&source));
            assert!((to_na(&sm) - want).amax() < 1e-12 * want.amax().max(1.0));
            // long RK4 march of the σ_m flow from a positive definite start
            let mut s = Sym2::scaled_identity(0.1);
            let f = |s: &Sym2| sigma_m_rhs(s, &sc, &law, &p, scheme).unwrap().total();
            let dt = 0.01;
            for _ in 0..200_000 {
                let k1 = f(&s);
                let k2 = f(&(s + k1.scale(dt / 2.0)));
                let k3 = f(&(s + k2.scale(dt / 2.0)));
                let k4 = f(&(s + k3.scale(dt)));
                s += (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(dt / 6.0);
            }
            assert!((s - sm).max_abs() < 1e-8, "{scheme} {law:?}: {s:?} vs {sm:?}");
            assert!(sm.xx >= 0.0 && sm.pp >= 0.0 && sm.det() >= -1e-15);
        }
    }
}

#[test]
fn direct_feedback_steady_state_matches_dense_oracle() {
    let p = SystemParams::reference_defaults();
    let sc = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
    for (a_x, b_x) in [(0.5, 0.0), (2.0, 0.3), (0.1, -0.4)] {
        let law = FeedbackLaw::direct(a_x, b_x);
        let sm = steady_sigma_m(&sc, &law, &p, Scheme::QndPosition).unwrap();
        let r = (8.0 * p.k * p.eta).sqrt();
        let b = nalgebra::Vector2::new(r * sc.xx - a_x / r, r * sc.xp - b_x / r);
        let want = kron_lyapunov(drift_na(&law, &p, Scheme::QndPosition), b * b.transpose());
        assert!((to_na(&sm) - want).amax() < 1e-12 * want.amax());
    }
}

#[test]
fn eigenvalues_match_dense_solver() {
    let p = SystemParams::new(1.0, 0.03, 2.0, 0.3, 0.5).unwrap();
    let laws = [
        FeedbackLaw::none(),
        FeedbackLaw::kalman_xp(3.0),
        FeedbackLaw::kalman_x_only(0.4),
        FeedbackLaw::direct(1.5, -0.2),
        FeedbackLaw { gains: fbcool_core::Gains { a_x: 4.0, a_p: 0.0, b_x: 0.0, b_p: 0.5 }, ..FeedbackLaw::kalman_xp(0.0) },
    ];
    for scheme in SCHEMES {
        for law in laws {
            let op = estimator_drift(&law, &p, scheme).lyapunov_operator().0;
            let m = nalgebra::Matrix3::from_fn(|i, j| op[i][j]);
            let dense: Vec<_> = m.complex_eigenvalues().iter().copied().collect();
            let mut ours = drift_eigenvalues(&law, &p, scheme).to_vec();
            // greedy nearest matching is unambiguous at this separation
            for a in &dense {
                let (i, d) = ours
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, (a - b).norm()))
                    .min_by(|x, y| x.1.total_cmp(&y.1))
                    .unwrap();
                assert!(d < 1e-10, "{scheme} {law:?}: {dense:?} vs {ours:?}");
                ours.remove(i);
            }
        }
    }
}

#[test]
fn unequal_gain_eigenvalue_formula() {
    let p = SystemParams::new(1.0, 0.03, 2.0, 0.3, 0.5).unwrap();
    let (a_x, b_p) = (5.0, 1.0);
    let law = FeedbackLaw { gains: fbcool_core::Gains { a_x, a_p: 0.0, b_x: 0.0, b_p }, ..FeedbackLaw::kalman_xp(0.0) };
    let l = stability_eigenvalues(&law, &p);
    let base = -(a_x + b_p + p.gamma);
    let root = ((a_x - b_p) * (a_x - b_p) - 4.0 * p.omega * p.omega).sqrt();
    assert_relative_eq!(l[0].re, base, max_relative = 1e-14);
    assert_relative_eq!(l[1].re, base + root, max_relative = 1e-14);
    assert_relative_eq!(l[2].re, base - root, max_relative = 1e-14);
}

#[test]
fn sigma_m_scales_inversely_with_gain() {
    let p = SystemParams::reference_defaults();
    let sc = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
    for g in [1e3, 4e3, 1e4] {
        let a = steady_sigma_m(&sc, &FeedbackLaw::kalman_xp(g), &p, Scheme::QndPosition).unwrap();
        let b = steady_sigma_m(&sc, &FeedbackLaw::kalman_xp(2.0 * g), &p, Scheme::QndPosition).unwrap();
        assert!((g * a.xx / (2.0 * g * b.xx) - 1.0).abs() < 0.02);
        assert!(a.max_abs() * g < 1.0);
    }
}

#[test]
fn oscillator_frequency_choice_is_immaterial() {
    let nbar_a = nbar_from_kelvin(292.0, 1e5);
    let nbar_b = nbar_from_kelvin(292.0, 3e5);
    let pa = SystemParams::from_nbar_gamma(1.0, 0.0058, nbar_a, 0.18, 0.34).unwrap();
    let pb = SystemParams::from_nbar_gamma(1.0, 0.0058, nbar_b, 0.18, 0.34).unwrap();
    let a = steady_sigma_c(&pa, Scheme::QndPosition).unwrap();
    let b = steady_sigma_c(&pb, Scheme::QndPosition).unwrap();
    assert!((a - b).max_abs() / a.max_abs() < 1e-6);
}

fn arb_cov() -> impl Strategy<Value = Sym2> {
    (0.5f64..5.0, 0.5f64..5.0, -0.9f64..0.9).prop_map(|(xx, pp, c)| {
        let xp = c * (xx * pp - 0.25).max(0.0).sqrt();
        Sym2::new(xx, pp, xp)
    })
}

fn arb_params() -> impl Strategy<Value = SystemParams> {
    (0.01f64..1.0, 0.0f64..10.0, 0.0f64..3.0, 0.05f64..1.0)
        .prop_map(|(g, n, k, e)| SystemParams::new(1.0, g, n, k, e).unwrap())
}

fn arb_law() -> impl Strategy<Value = FeedbackLaw> {
    (0.0f64..20.0, 0usize..2).prop_map(|(g, kind)| if kind == 0 { FeedbackLaw::kalman_xp(g) } else { FeedbackLaw::kalman_x_only(g) })
}

proptest! {
    #[test]
    fn conditioning_cancels_in_averaged_flow(sc in arb_cov(), sm in arb_cov(), p in arb_params(), law in arb_law(), s in 0usize..3) {
        let scheme = SCHEMES[s];
        let c = sigma_c_rhs(&sc, &p, scheme).unwrap();
        let m = sigma_m_rhs(&sm, &sc, &law, &p, scheme).unwrap();
        let sum = c.conditioning + m.conditioning;
        prop_assert!(sum.max_abs() <= 1e-12 * c.conditioning.max_abs().max(1e-300));
        let avg = averaged_rhs(&sc, &sm, &law, &p, scheme).unwrap();
        let no_cond = avg.bath + avg.hamiltonian + avg.feedback + avg.backaction;
        prop_assert!((avg.total() - no_cond).max_abs() <= 1e-12 * avg.scale());
    }

    #[test]
    fn hamiltonian_stage_preserves_determinant(s in arb_cov(), p in arb_params()) {
        let h = sigma_c_rhs(&s, &p, Scheme::QndPosition).unwrap().hamiltonian;
        prop_assert!(s.adjugate().trace_product(&h).abs() <= 1e-12 * s.max_abs() * s.max_abs());
    }

    #[test]
    fn stages_sum_to_total(s in arb_cov(), p in arb_params(), k in 0usize..4) {
        let r = sigma_c_rhs(&s, &p, fbcool_core::Scheme::ALL[k]).unwrap();
        let sum = r.bath + r.hamiltonian + r.feedback + r.measurement();
        prop_assert!((sum - r.total()).max_abs() <= 1e-12 * r.scale().max(1e-300));
        prop_assert_eq!(r.feedback, Sym2::ZERO);
    }

    #[test]
    fn steady_sigma_m_is_positive_semidefinite(p in arb_params(), law in arb_law(), s in 0usize..3) {
        let scheme = SCHEMES[s];
        let sc = steady_sigma_c(&p, scheme).unwrap();
        let sm = steady_sigma_m(&sc, &law, &p, scheme).unwrap();
        let tol = 1e-12 * sm.max_abs().max(1e-300);
        prop_assert!(sm.xx >= -tol && sm.pp >= -tol);
        prop_assert!(sm.det() >= -1e-10 * sm.max_abs() * sm.max_abs());
    }
}
