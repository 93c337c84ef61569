use approx::assert_relative_eq;
use fbcool_core::dynamics::{averaged_rhs, steady_sigma_c, steady_state};
use fbcool_core::gaussian::{decompose, entropy_slope, symplectic_eigenvalue};
use fbcool_core::thermo::{
    inequality_report, kinetic_ratio, kinetic_ratio_det, qci_flow_rate, qct_rate, qct_rate_from_bath, s_ba_rate,
    work_rates, work_source,
};
use fbcool_core::{FeedbackKind, FeedbackLaw, Gains, Scheme, Sym2, SystemParams};
use proptest::prelude::*;

const SCHEMES: [Scheme; 3] = [Scheme::QndPosition, Scheme::AnnihilationHomodyne, Scheme::DualNoDamp];

fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (a.ln() + (b.ln() - a.ln()) * i as f64 / (n - 1) as f64).exp()).collect()
}

fn arb_mixed_cov() -> impl Strategy<Value = Sym2> {
    (0.6f64..6.0, 0.6f64..6.0, -0.9f64..0.9).prop_filter_map("mixed", |(xx, pp, c)| {
        let xp = c * (xx * pp - 0.36).max(0.0).sqrt();
        let s = Sym2::new(xx, pp, xp);
        (s.det() > 0.3).then_some(s)
    })
}

fn arb_psd() -> impl Strategy<Value = Sym2> {
    (0.0f64..2.0, 0.0f64..2.0, -1.0f64..1.0).prop_map(|(xx, pp, c)| Sym2::new(xx, pp, c * (xx * pp).sqrt()))
}

fn arb_law() -> impl Strategy<Value = FeedbackLaw> {
    (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, 0usize..2).prop_map(|(a_x, a_p, b_x, b_p, d)| {
        if d == 0 {
            FeedbackLaw { kind: FeedbackKind::KalmanXP, gains: Gains { a_x, a_p, b_x, b_p } }
        } else {
            FeedbackLaw::direct(a_x, b_x)
        }
    })
}

proptest! {
    #[test]
    fn work_splits_along_eigendirections(sigma in arb_mixed_cov(), sm in arb_psd(), law in arb_law(), s in 0usize..3) {
        let p = SystemParams::new(1.0, 0.1, 2.0, 0.3, 0.6).unwrap();
        let w = work_rates(&sigma, &sm, &law, &p, SCHEMES[s]).unwrap();
        prop_assert!((w.w_u + w.w_v - w.w_ext).abs() <= 1e-12 * w.w_u.abs().max(w.w_v.abs()).max(1e-300));
    }

    #[test]
    fn kinetic_routes_agree(sigma in arb_mixed_cov(), sm in arb_psd(), law in arb_law(), s in 0usize..3) {
        let p = SystemParams::new(1.0, 0.1, 2.0, 0.3, 0.6).unwrap();
        let scheme = SCHEMES[s];
        let w = work_rates(&sigma, &sm, &law, &p, scheme).unwrap();
        let eig = kinetic_ratio(&sigma, &w, &p).unwrap();
        let det = kinetic_ratio_det(&sigma, &work_source(&sigma, &sm, &law, &p, scheme).unwrap()).unwrap();
        // scale: the two projections before cancellation
        let d = decompose(&sigma, &p).unwrap();
        let scale = (w.w_u / d.tu).abs() + (w.w_v / d.tv).abs();
        prop_assert!((eig - det).abs() <= 1e-9 * scale.max(1e-300), "{eig} vs {det}");
    }

    #[test]
    fn steady_kalman_points_obey_identities(
        lk in -3.0f64..1.0, eta in 0.05f64..1.0, lng in -4.0f64..0.0, lg in -2.0f64..4.0, xp in any::<bool>(), s in 0usize..3
    ) {
        let nbar = 100.0;
        let p = SystemParams::from_nbar_gamma(1.0, 10f64.powf(lng), nbar, 10f64.powf(lk), eta).unwrap();
        let g = 10f64.powf(lg);
        let law = if xp { FeedbackLaw::kalman_xp(g) } else { FeedbackLaw::kalman_x_only(g) };
        let scheme = SCHEMES[s];
        let st = steady_state(&law, &p, scheme).unwrap();
        let r = inequality_report(&st.sigma, &st.cov_c, &st.cov_m, &law, &p, scheme).unwrap();
        let heat_scale = r.q_dot.abs().max(p.omega * p.gamma * p.nbar);
        // the work is a sum of gain·σ_m products and backaction terms up to
        // `terms` in size; one ulp of σ_m already costs ε·terms/heat_scale
        let stages = averaged_rhs(&st.cov_c, &st.cov_m, &law, &p, scheme).unwrap();
        let terms = stages.scale().max(2.0 * law.gain_scale() * st.cov_m.max_abs());
        let err = (r.w_ext - r.q_dot).abs();
        if terms <= 1e5 * heat_scale {
            prop_assert!(err <= 1e-9 * heat_scale, "{} vs {}", r.w_ext, r.q_dot);
        } else {
            prop_assert!(err <= 1e3 * f64::EPSILON * terms, "{} vs {} (terms {terms:e})", r.w_ext, r.q_dot);
        }
        prop_assert!(r.i_qct >= 0.0);
        prop_assert!(r.margins.occupation >= 0.0);
        if let Some(m16) = r.margins.qct_info {
            // İ_QCI reads the stationarity residual of Σ through the entropy
            // slope; its rounding floor is ε times that map applied to `terms`
            let nu = symplectic_eigenvalue(&st.sigma);
            let floor = 4.0 * entropy_slope(nu) / (2.0 * nu) * st.sigma.max_abs() * terms;
            if floor <= 1e5 * r.i_qct.abs() {
                prop_assert!(m16.abs() <= 1e-9 * r.i_qct.abs(), "{m16:e} vs i_qct {:e}", r.i_qct);
            } else {
                prop_assert!(m16.abs() <= 1e3 * f64::EPSILON * floor, "{m16:e} (floor {floor:e})");
            }
        }
    }
}

#[test]
fn direct_work_source_equals_averaged_stages() {
    let p = SystemParams::reference_defaults();
    let law = FeedbackLaw::direct(0.7, 0.2);
    let st = steady_state(&law, &p, Scheme::QndPosition).unwrap();
    let avg = averaged_rhs(&st.cov_c, &st.cov_m, &law, &p, Scheme::QndPosition).unwrap();
    let m = work_source(&st.sigma, &st.cov_m, &law, &p, Scheme::QndPosition).unwrap();
    assert!((avg.feedback + avg.backaction - m).max_abs() < 1e-12 * m.max_abs());
}

#[test]
fn kalman_work_source_equals_averaged_stages() {
    let p = SystemParams::new(1.0, 0.1, 2.0, 0.3, 0.6).unwrap();
    let law = FeedbackLaw::kalman_xp(1.3);
    for scheme in SCHEMES {
        let st = steady_state(&law, &p, scheme).unwrap();
        let avg = averaged_rhs(&st.cov_c, &st.cov_m, &law, &p, scheme).unwrap();
        let m = work_source(&st.sigma, &st.cov_m, &law, &p, scheme).unwrap();
        assert!((avg.feedback + avg.backaction - m).max_abs() < 1e-12 * m.max_abs(), "{scheme}");
    }
}

#[test]
fn steady_qct_equals_bath_route() {
    let p = SystemParams::reference_defaults();
    let sc = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
    let a = qct_rate(&sc, &p, Scheme::QndPosition).unwrap();
    assert_relative_eq!(a, qct_rate_from_bath(&sc, &p), max_relative = 1e-9);
}

#[test]
fn unmeasured_oscillator_has_no_information_terms() {
    let p = SystemParams::new(1.0, 0.2, 3.0, 0.0, 0.5).unwrap();
    let law = FeedbackLaw::none();
    let st = steady_state(&law, &p, Scheme::QndPosition).unwrap();
    assert!(st.cov_m.max_abs() < 1e-12);
    let qci = qci_flow_rate(&st.sigma, &st.cov_c, &law, &p, Scheme::QndPosition).unwrap();
    let sba = s_ba_rate(&st.cov_c, &p, Scheme::QndPosition).unwrap();
    assert!(qci.abs() < 1e-12 && sba == 0.0);
    assert!(-qci - sba <= 1e-12);
    let r = inequality_report(&st.sigma, &st.cov_c, &st.cov_m, &law, &p, Scheme::QndPosition).unwrap();
    assert!(r.i_qct.abs() < 1e-12 && r.q_dot.abs() < 1e-9 && r.w_ext == 0.0);
}

#[test]
fn xp_ratio_saturates_monotonically() {
    let p = SystemParams::reference_defaults();
    let sc = steady_sigma_c(&p, Scheme::QndPosition).unwrap();
    let mut last = f64::NEG_INFINITY;
    let mut last_gap = f64::INFINITY;
    for g in log_space(1e-2, 1e4, 60) {
        let law = FeedbackLaw::kalman_xp(g);
        let st = fbcool_core::dynamics::steady_state_with(sc, &law, &p, Scheme::QndPosition).unwrap();
        let r = inequality_report(&st.sigma, &st.cov_c, &st.cov_m, &law, &p, Scheme::QndPosition).unwrap();
        assert!(r.ratio >= last, "ratio decreased at g={g}");
        assert!(r.margins.occupation <= last_gap);
        last = r.ratio;
        last_gap = r.margins.occupation;
    }
    assert!(last_gap < 1e-4);
}

#[test]
fn scheme_information_ordering() {
    let p = SystemParams::reference_defaults();
    let q = qct_rate(&steady_sigma_c(&p, Scheme::QndPosition).unwrap(), &p, Scheme::QndPosition).unwrap();
    let d = qct_rate(&steady_sigma_c(&p, Scheme::DualNoDamp).unwrap(), &p, Scheme::DualNoDamp).unwrap();
    assert!(q > d);
}
