use std::f64::consts::PI;

use magtomo::expr::{Expr, C64};
use magtomo::fields::{unitarity_defect, AttenuationPair, MatrixField};
use magtomo::fiber::{bin_of_mode, mode_of_bin, FiberContext, GridSpec, Support};
use magtomo::flow::{exit_time, wrap_angle, PhasePoint};
use magtomo::geometry::{BoundaryPoint, MagneticSystem};
use magtomo::sm::FiberPoly;
use magtomo::transform::scattering_data_on;
use proptest::prelude::*;

fn coeff() -> impl Strategy<Value = (f64, f64, f64)> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
}

fn linear(c: (f64, f64, f64)) -> Expr {
    Expr::real(c.0) + Expr::real(c.1) * Expr::x() + Expr::i() * Expr::real(c.2) * Expr::y()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bins_and_modes_are_inverse(log_nt in 2u32..8, j in 0usize..256) {
        let nt = 1usize << log_nt;
        let j = j % nt;
        let k = mode_of_bin(j, nt);
        prop_assert_eq!(bin_of_mode(k, nt), Some(j));
        prop_assert!(k >= -(nt as i32) / 2 && k < nt as i32 / 2);
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -50.0..50.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let turns = ((a - w) / (2.0 * PI)).round();
        prop_assert!((a - w - 2.0 * PI * turns).abs() < 1e-9);
    }

    #[test]
    fn straight_chords_have_length_two_cos_mu(beta in -PI..PI, mu in -1.5..1.5f64) {
        let sys = MagneticSystem::flat(0.0).with_dt(1e-2);
        let bp = BoundaryPoint::new(beta, mu);
        let t = exit_time(&sys, PhasePoint::from_boundary(&bp)).unwrap();
        prop_assert!((t - 2.0 * mu.cos()).abs() < 1e-9);
    }

    #[test]
    fn hilbert_squared_removes_the_mean(c in prop::collection::vec(coeff(), 7)) {
        let ctx = FiberContext::new(&MagneticSystem::flat(0.0), &AttenuationPair::zero(1), GridSpec::new(17, 17, 16).unwrap());
        let mut f = FiberPoly::zero(1);
        for (k, ck) in (-3..=3).zip(&c) {
            f = f.add(&FiberPoly::scalar(k, linear(*ck)));
        }
        let u = ctx.sample(&f, Support::Full);
        let hh = ctx.hilbert(&ctx.hilbert(&u));
        let r = ctx.sup_on_disk(&hh.add(&u).sub(&ctx.mode_zero(&u)));
        prop_assert!(r < 1e-13, "{}", r);
        // the projections split u: (Id + iH)u + (Id - iH)u = 2u
        let split = ctx.holomorphic_project(&u).add(&ctx.antiholomorphic_project(&u)).sub(&u.scale(C64::from(2.0)));
        prop_assert!(ctx.sup_on_disk(&split) < 1e-13);
    }

    #[test]
    fn skew_hermitian_attenuation_gives_unitary_scattering(
        d in (-1.0..1.0f64, -1.0..1.0f64),
        off in (-1.0..1.0f64, -1.0..1.0f64),
        lambda in 0.0..0.6f64,
    ) {
        let i = Expr::i();
        let z = Expr::constant(C64::new(off.0, off.1));
        let phi = MatrixField::from_entries(2, vec![
            &i * Expr::real(d.0), z.clone() * Expr::x(),
            -(z.conj() * Expr::x()), &i * Expr::real(d.1) * Expr::y(),
        ]).unwrap();
        let pair = AttenuationPair::higgs(phi).unwrap();
        let sys = MagneticSystem::flat(lambda).with_dt(2e-2);
        let fan = [BoundaryPoint::new(0.3, 0.2), BoundaryPoint::new(-2.0, -0.9)];
        let data = scattering_data_on(&sys, &pair, &fan).unwrap();
        for (_, c) in &data.fan {
            prop_assert!(unitarity_defect(c) < 1e-8);
        }
    }

    #[test]
    fn expressions_display_and_reparse(c in coeff(), p in 1i32..4) {
        let e = (linear(c) * Expr::x().powi(p)).sin() + Expr::disk_defining();
        let back = Expr::parse(&e.to_string()).unwrap();
        for (x, y) in [(0.1, -0.4), (0.7, 0.2), (-0.3, 0.0)] {
            prop_assert!((e.eval(x, y) - back.eval(x, y)).norm() < 1e-12);
        }
    }
}
