//! Matrix transport along magnetic geodesics, attenuated ray transforms and
//! scattering data.
//!
//! Along a trace `d/dt = X + λV`, so the transport equation
//! `(X + λV)U + 𝒜U = 0` becomes `U' = -𝒜U`. The inverse `W = U₋⁻¹` obeys
//! `W' = W𝒜`, and the transform is `∫ W f dt`. Both are integrated with RK4
//! on the trace nodes and midpoints; since the RK4 increment of the integral
//! is linear in `f`, each ray reduces to matrix quadrature weights.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expr::C64;
use crate::fields::{unitarity_defect, AttenuationPair};
use crate::flow::{integrate_geodesic, GeodesicTrace, PhasePoint};
use crate::geometry::{BoundaryPoint, MagneticSystem};
use crate::numerics::sampled_derivative;
use crate::sm::SmFunction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `U₋`, identity at the entry point.
    Forward,
    /// `U₊`, identity at the exit point.
    Backward,
}

#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub t: Vec<f64>,
    pub u: Vec<DMatrix<C64>>,
    pub direction: Direction,
}

impl TransportSolution {
    pub fn max_unitarity_defect(&self) -> f64 {
        self.u.iter().map(unitarity_defect).fold(0.0, f64::max)
    }
}

/// `𝒜` at the trace nodes and midpoints.
fn attenuation_tables(system: &MagneticSystem, pair: &AttenuationPair, trace: &GeodesicTrace) -> (Vec<DMatrix<C64>>, Vec<DMatrix<C64>>) {
    let s = &system.surface;
    let at = |p: &PhasePoint| pair.total_at(s, p.x, p.y, p.theta);
    (
        trace.samples.iter().map(|(_, p)| at(p)).collect(),
        trace.midpoints.iter().map(at).collect(),
    )
}

fn rk4_left(u: &DMatrix<C64>, a0: &DMatrix<C64>, am: &DMatrix<C64>, a1: &DMatrix<C64>, h: f64) -> DMatrix<C64> {
    // U' = -𝒜 U
    let hc = C64::from(h);
    let k1 = -(a0 * u);
    let k2 = -(am * (u + &k1 * (hc * 0.5)));
    let k3 = -(am * (u + &k2 * (hc * 0.5)));
    let k4 = -(a1 * (u + &k3 * hc));
    u + (k1 + (k2 + k3) * C64::from(2.0) + k4) * (hc / 6.0)
}

/// Solves `U' = -𝒜U` along the trace with `U = Id` at the entry
/// (`Forward`) or the exit (`Backward`).
pub fn transport_matrix(system: &MagneticSystem, pair: &AttenuationPair, trace: &GeodesicTrace, direction: Direction) -> TransportSolution {
    let n = pair.rank();
    let (an, am) = attenuation_tables(system, pair, trace);
    let t = trace.times();
    let m = t.len();
    let mut u = vec![DMatrix::identity(n, n); m];
    match direction {
        Direction::Forward => {
            for k in 0..m - 1 {
                u[k + 1] = rk4_left(&u[k], &an[k], &am[k], &an[k + 1], t[k + 1] - t[k]);
            }
        }
        Direction::Backward => {
            for k in (0..m - 1).rev() {
                u[k] = rk4_left(&u[k + 1], &an[k + 1], &am[k], &an[k], t[k] - t[k + 1]);
            }
        }
    }
    TransportSolution { t, u, direction }
}

/// Sup norm of `U' + 𝒜U` with `U'` from sampled differentiation.
pub fn transport_residual(system: &MagneticSystem, pair: &AttenuationPair, trace: &GeodesicTrace, sol: &TransportSolution) -> f64 {
    let (an, _) = attenuation_tables(system, pair, trace);
    let n = pair.rank();
    let mut du = vec![DMatrix::<C64>::zeros(n, n); sol.u.len()];
    for i in 0..n {
        for j in 0..n {
            let series: Vec<C64> = sol.u.iter().map(|u| u[(i, j)]).collect();
            for (d, v) in du.iter_mut().zip(sampled_derivative(&sol.t, &series)) {
                d[(i, j)] = v;
            }
        }
    }
    du.iter()
        .zip(an.iter().zip(&sol.u))
        .map(|(d, (a, u))| (d + a * u).iter().fold(0.0f64, |m, z| m.max(z.norm())))
        .fold(0.0, f64::max)
}

/// Quadrature for `f ↦ ∫₀^τ U₋⁻¹ f dt` along one ray.
#[derive(Debug, Clone)]
pub struct RayQuadrature {
    pub trace: GeodesicTrace,
    /// Weight matrices at the trace nodes.
    pub node_weights: Vec<DMatrix<C64>>,
    /// Weight matrices at the interval midpoints.
    pub mid_weights: Vec<DMatrix<C64>>,
    /// `U₋(τ)⁻¹`, which equals `U₊` at the entry point.
    pub inverse_at_exit: DMatrix<C64>,
}

impl RayQuadrature {
    pub fn build(system: &MagneticSystem, pair: &AttenuationPair, trace: GeodesicTrace) -> Self {
        let n = pair.rank();
        let (an, am) = attenuation_tables(system, pair, &trace);
        let t = trace.times();
        let m = t.len();
        let mut node_weights = vec![DMatrix::zeros(n, n); m];
        let mut mid_weights = Vec::with_capacity(m.saturating_sub(1));
        let mut w = DMatrix::<C64>::identity(n, n);
        for k in 0..m - 1 {
            let h = t[k + 1] - t[k];
            let hc = C64::from(h);
            // W' = W𝒜, stages carry the integrand weights
            let k1 = &w * &an[k];
            let w2 = &w + &k1 * (hc * 0.5);
            let k2 = &w2 * &am[k];
            let w3 = &w + &k2 * (hc * 0.5);
            let k3 = &w3 * &am[k];
            let w4 = &w + &k3 * hc;
            let k4 = &w4 * &an[k + 1];
            let sixth = hc / 6.0;
            node_weights[k] += &w * sixth;
            mid_weights.push((&w2 + &w3) * (sixth * 2.0));
            node_weights[k + 1] += &w4 * sixth;
            w += (k1 + (k2 + k3) * C64::from(2.0) + k4) * sixth;
        }
        RayQuadrature {
            trace,
            node_weights,
            mid_weights,
            inverse_at_exit: w,
        }
    }

    pub fn tau(&self) -> f64 {
        self.trace.exit_time
    }

    pub fn apply(&self, f: &dyn SmFunction) -> DVector<C64> {
        let n = self.inverse_at_exit.nrows();
        let mut acc = DVector::zeros(n);
        let mut buf = DVector::zeros(n);
        for ((_, p), w) in self.trace.samples.iter().zip(&self.node_weights) {
            f.eval_into(p.x, p.y, p.theta, buf.as_mut_slice());
            acc += w * &buf;
        }
        for (p, w) in self.trace.midpoints.iter().zip(&self.mid_weights) {
            f.eval_into(p.x, p.y, p.theta, buf.as_mut_slice());
            acc += w * &buf;
        }
        acc
    }
}

fn entry_trace(system: &MagneticSystem, entry: &BoundaryPoint) -> Result<GeodesicTrace> {
    if !entry.is_incoming() {
        return Err(Error::Validation(format!("mu = {} is not an incoming direction", entry.mu)));
    }
    integrate_geodesic(system, PhasePoint::from_boundary(entry), system.dt)
}

pub fn ray_quadrature(system: &MagneticSystem, pair: &AttenuationPair, entry: &BoundaryPoint) -> Result<RayQuadrature> {
    Ok(RayQuadrature::build(system, pair, entry_trace(system, entry)?))
}

fn check_rank(pair: &AttenuationPair, f: &dyn SmFunction) -> Result<()> {
    if f.rank() != pair.rank() {
        return Err(Error::Validation(format!(
            "integrand of rank {} for an attenuation of rank {}",
            f.rank(),
            pair.rank()
        )));
    }
    Ok(())
}

/// `I_{A,Φ} f` at one entry point of `∂₊(SM)`.
pub fn attenuated_transform(system: &MagneticSystem, pair: &AttenuationPair, f: &dyn SmFunction, entry: &BoundaryPoint) -> Result<DVector<C64>> {
    check_rank(pair, f)?;
    Ok(ray_quadrature(system, pair, entry)?.apply(f))
}

pub fn unattenuated_transform(system: &MagneticSystem, f: &dyn SmFunction, entry: &BoundaryPoint) -> Result<C64> {
    let v = attenuated_transform(system, &AttenuationPair::zero(1), f, entry)?;
    Ok(v[0])
}

/// Quadratures for every ray of a fan, computed in parallel.
pub fn fan_quadratures(system: &MagneticSystem, pair: &AttenuationPair, fan: &[BoundaryPoint]) -> Result<Vec<RayQuadrature>> {
    fan.par_iter().map(|bp| ray_quadrature(system, pair, bp)).collect()
}

/// Transform of `f` over a fan: `(entry, τ, I f)`.
pub fn transform_fan(
    system: &MagneticSystem,
    pair: &AttenuationPair,
    f: &dyn SmFunction,
    fan: &[BoundaryPoint],
) -> Result<Vec<(BoundaryPoint, f64, DVector<C64>)>> {
    check_rank(pair, f)?;
    fan.par_iter()
        .map(|bp| {
            let q = ray_quadrature(system, pair, bp)?;
            Ok((*bp, q.tau(), q.apply(f)))
        })
        .collect()
}

/// Largest absolute entry over a set of transform values.
pub fn max_abs(values: &[(BoundaryPoint, f64, DVector<C64>)]) -> f64 {
    values
        .iter()
        .flat_map(|(_, _, v)| v.iter())
        .fold(0.0, |m, z| m.max(z.norm()))
}

#[derive(Debug, Clone)]
pub struct ScatteringData {
    pub fan: Vec<(BoundaryPoint, DMatrix<C64>)>,
}

impl ScatteringData {
    /// Sup over the fan of the max-entry difference.
    pub fn sup_distance(&self, other: &ScatteringData) -> f64 {
        self.fan
            .iter()
            .zip(&other.fan)
            .map(|((_, a), (_, b))| (a - b).iter().fold(0.0f64, |m, z| m.max(z.norm())))
            .fold(0.0, f64::max)
    }

    pub fn max_unitarity_defect(&self) -> f64 {
        self.fan.iter().map(|(_, c)| unitarity_defect(c)).fold(0.0, f64::max)
    }
}

/// `C₊` on a fan: `U₊` integrated back from `Id` at the exit point.
pub fn scattering_data_on(system: &MagneticSystem, pair: &AttenuationPair, fan: &[BoundaryPoint]) -> Result<ScatteringData> {
    let fan = fan
        .par_iter()
        .map(|bp| {
            let trace = entry_trace(system, bp)?;
            let sol = transport_matrix(system, pair, &trace, Direction::Backward);
            Ok((*bp, sol.u[0].clone()))
        })
        .collect::<Result<_>>()?;
    Ok(ScatteringData { fan })
}

pub fn scattering_data(system: &MagneticSystem, pair: &AttenuationPair, fan_size: usize) -> Result<ScatteringData> {
    if fan_size == 0 {
        return Err(Error::Validation("fan size must be at least 1".into()));
    }
    scattering_data_on(system, pair, &crate::geometry::boundary_fan(fan_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::fields::{make_kernel_element, random, MatrixField};
    use crate::geometry::boundary_fan;
    use crate::sm::{FiberPoly, FnSm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn const_higgs(c: f64) -> AttenuationPair {
        AttenuationPair::higgs(MatrixField::scalar(1, Expr::constant(C64::new(0.0, c)))).unwrap()
    }

    fn one() -> FnSm<impl Fn(f64, f64, f64, &mut [C64]) + Sync> {
        FnSm::new(1, |_, _, _, o: &mut [C64]| o[0] = C64::from(1.0))
    }

    #[test]
    fn zero_attenuation_is_identity_transport() {
        let sys = MagneticSystem::flat(0.3);
        let tr = integrate_geodesic(&sys, PhasePoint::new(1.0, 0.0, PI + 0.2), 1e-2).unwrap();
        let sol = transport_matrix(&sys, &AttenuationPair::zero(2), &tr, Direction::Forward);
        assert!(sol.u.iter().all(|u| *u == DMatrix::identity(2, 2)));
    }

    #[test]
    fn scalar_higgs_transport() {
        let c = 0.7;
        let sys = MagneticSystem::flat(0.0);
        let tr = integrate_geodesic(&sys, PhasePoint::new(1.0, 0.0, PI + 0.3), 1e-3).unwrap();
        let pair = const_higgs(c);
        let fwd = transport_matrix(&sys, &pair, &tr, Direction::Forward);
        for (t, u) in fwd.t.iter().zip(&fwd.u) {
            assert!((u[(0, 0)] - C64::from_polar(1.0, -c * t)).norm() < 1e-12);
        }
        let back = transport_matrix(&sys, &pair, &tr, Direction::Backward);
        let tau = tr.exit_time;
        for (t, u) in back.t.iter().zip(&back.u) {
            assert!((u[(0, 0)] - C64::from_polar(1.0, c * (tau - t))).norm() < 1e-12);
        }
        assert!(transport_residual(&sys, &pair, &tr, &fwd) < 1e-8);
    }

    #[test]
    fn matrix_higgs_transport_is_exponential() {
        // Φ = i(σ_x + 0.5 σ_z): exp(-Φt) = cos(ωt) Id - i sin(ωt) M/ω
        let i = C64::i();
        let m = DMatrix::from_row_slice(2, 2, &[C64::from(0.5), C64::from(1.0), C64::from(1.0), C64::from(-0.5)]);
        let phi = &m * i;
        let pair = AttenuationPair::higgs(MatrixField::constant(&phi)).unwrap();
        let sys = MagneticSystem::flat(0.4);
        let tr = integrate_geodesic(&sys, PhasePoint::new(0.0, -1.0, PI / 2.0 + 0.1), 1e-3).unwrap();
        let sol = transport_matrix(&sys, &pair, &tr, Direction::Forward);
        let w = 1.25f64.sqrt();
        for (t, u) in sol.t.iter().zip(&sol.u) {
            let expect = DMatrix::identity(2, 2) * C64::from((w * t).cos()) - &m * (i * (w * t).sin() / w);
            assert!((u - expect).iter().all(|z| z.norm() < 1e-8));
        }
        assert!(sol.max_unitarity_defect() < 1e-8);
        assert!(transport_residual(&sys, &pair, &tr, &sol) < 1e-6);
    }

    #[test]
    fn random_transport_is_unitary_and_satisfies_the_ode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sys = MagneticSystem::new(crate::geometry::Surface::parse("0.1*x", "tilt").unwrap(), Expr::parse("0.3").unwrap()).unwrap();
        for n in [1, 2, 3] {
            let pair = random::pair(&mut rng, n, 2);
            let tr = integrate_geodesic(&sys, PhasePoint::from_boundary(&BoundaryPoint::new(0.4, -0.3)), 1e-3).unwrap();
            for dir in [Direction::Forward, Direction::Backward] {
                let sol = transport_matrix(&sys, &pair, &tr, dir);
                assert!(sol.max_unitarity_defect() < 1e-8);
                assert!(transport_residual(&sys, &pair, &tr, &sol) < 1e-6);
            }
        }
    }

    #[test]
    fn cocycle_over_two_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sys = MagneticSystem::flat(0.3);
        let pair = random::pair(&mut rng, 2, 2);
        let tr = integrate_geodesic(&sys, PhasePoint::from_boundary(&BoundaryPoint::new(1.0, 0.2)), 1e-3).unwrap();
        let full = transport_matrix(&sys, &pair, &tr, Direction::Forward);
        let k = tr.samples.len() / 2;
        let t0 = tr.samples[k].0;
        let second = GeodesicTrace {
            samples: tr.samples[k..].iter().map(|(t, p)| (t - t0, *p)).collect(),
            midpoints: tr.midpoints[k..].to_vec(),
            exit_time: tr.exit_time - t0,
            exited: true,
        };
        let tail = transport_matrix(&sys, &pair, &second, Direction::Forward);
        for (j, u) in tail.u.iter().enumerate() {
            let prod = u * &full.u[k];
            assert!((prod - &full.u[k + j]).iter().all(|z| z.norm() < 1e-7));
        }
    }

    #[test]
    fn transform_of_one_is_exit_time() {
        let sys = MagneticSystem::flat(0.5);
        for bp in boundary_fan(9) {
            let v = unattenuated_transform(&sys, &one(), &bp).unwrap();
            let exit = crate::flow::scattering_relation(&sys, &bp).unwrap().tau;
            assert!((v.re - exit).abs() < 1e-12);
            assert!(v.im == 0.0);
        }
    }

    #[test]
    fn scalar_higgs_closed_form() {
        let c = 0.8;
        let sys = MagneticSystem::flat(0.0);
        for bp in boundary_fan(9) {
            let v = attenuated_transform(&sys, &const_higgs(c), &one(), &bp).unwrap();
            let tau = 2.0 * bp.mu.cos();
            let ic = C64::new(0.0, c);
            let expect = ((ic * tau).exp() - 1.0) / ic;
            assert!((v[0] - expect).norm() < 1e-7, "{} vs {expect}", v[0]);
        }
        let data = scattering_data(&sys, &const_higgs(c), 9).unwrap();
        for (bp, m) in &data.fan {
            let tau = 2.0 * bp.mu.cos();
            assert!((m[(0, 0)] - C64::from_polar(1.0, c * tau)).norm() < 1e-7);
        }
    }

    #[test]
    fn straight_line_integral_of_dx() {
        let sys = MagneticSystem::flat(0.0);
        let f = FiberPoly::scalar(1, Expr::real(0.5)).add(&FiberPoly::scalar(-1, Expr::real(0.5)));
        let bp = BoundaryPoint::new(PI, 0.0);
        let v = unattenuated_transform(&sys, &f, &bp).unwrap();
        assert!((v.re - 2.0).abs() < 1e-10);
        let bp = BoundaryPoint::new(0.3, 0.4);
        let v = unattenuated_transform(&sys, &f, &bp).unwrap();
        assert!((v.re - 2.0 * 0.4f64.cos() * bp.theta().cos()).abs() < 1e-10);
    }

    #[test]
    fn scattering_inverse_of_forward_transport() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sys = MagneticSystem::flat(0.3);
        let pair = random::pair(&mut rng, 2, 2);
        let bp = BoundaryPoint::new(2.0, -0.5);
        let q = ray_quadrature(&sys, &pair, &bp).unwrap();
        let data = scattering_data_on(&sys, &pair, &[bp]).unwrap();
        assert!((&q.inverse_at_exit - &data.fan[0].1).iter().all(|z| z.norm() < 1e-9));
        assert!(data.max_unitarity_defect() < 1e-8);
    }

    #[test]
    fn potentials_have_zero_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let sys = MagneticSystem::new(crate::geometry::Surface::parse("0.1*x - 0.1*y^2", "b").unwrap(), Expr::parse("0.3").unwrap()).unwrap();
        let fan = boundary_fan(16);
        // kernel element Φp + d_A p
        let pair = random::pair(&mut rng, 2, 1);
        let p = random::vanishing_vector(&mut rng, 2, 2, 1);
        let k = make_kernel_element(&p, &pair).unwrap().to_fiber_poly(&sys.surface);
        assert!(max_abs(&transform_fan(&sys, &pair, &k, &fan).unwrap()) < 1e-6);
        // (X + λV)u with u vanishing on the boundary
        let u = FiberPoly::scalar(0, random::vanishing_poly(&mut rng, 2, 1))
            .add(&FiberPoly::scalar(1, random::vanishing_poly(&mut rng, 1, 1)));
        let f = u.apply_transport(&sys);
        assert!(max_abs(&transform_fan(&sys, &AttenuationPair::zero(1), &f, &fan).unwrap()) < 1e-6);
    }

    #[test]
    fn rank_mismatch_is_an_error() {
        let sys = MagneticSystem::flat(0.0);
        let err = attenuated_transform(&sys, &AttenuationPair::zero(2), &one(), &BoundaryPoint::new(0.0, 0.0));
        assert!(err.is_err());
        assert!(unattenuated_transform(&sys, &one(), &BoundaryPoint::new(0.0, 2.0)).is_err());
    }
}
