//! Empirical checks of the transform's kernel, gauge behavior, tensor
//! tomography and injectivity on concrete discretizations.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::{Expr, C64};
use crate::fields::{
    eval_vector, gauge_transform, make_kernel_element, random, tensor_to_sm_function, AttenuationPair,
    MatrixField, SymmetricTensor,
};
use crate::flow::{integrate_geodesic, PhasePoint};
use crate::geometry::{boundary_fan, MagneticSystem};
use crate::sm::{FiberPoly, FnSm, SmFunction};
use crate::transform::{fan_quadratures, scattering_data, RayQuadrature};

pub const KERNEL_TOLERANCE: f64 = 1e-6;
pub const SEPARATION_THRESHOLD: f64 = 1e-3;
pub const DEGREE_MASS_TOLERANCE: f64 = 1e-4;
pub const SPECTRAL_GAP_THRESHOLD: f64 = 1e-3;
pub const COLLAPSE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub pass: bool,
    pub config_hash: String,
}

impl ProbeReport {
    fn new(name: &str, seed: u64, params: &str) -> Self {
        let digest = Sha256::digest(format!("{name}|{seed}|{params}").as_bytes());
        ProbeReport {
            name: name.to_string(),
            label: None,
            seed,
            metrics: Vec::new(),
            pass: false,
            config_hash: hex::encode(digest),
        }
    }

    fn push(&mut self, label: impl Into<String>, value: f64) {
        self.metrics.push((label.into(), value));
    }

    pub fn metric(&self, label: &str) -> Option<f64> {
        self.metrics.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = hash.into();
        self
    }
}

fn max_over(quads: &[RayQuadrature], f: &dyn SmFunction) -> f64 {
    quads
        .par_iter()
        .map(|q| q.apply(f).iter().fold(0.0f64, |m, z| m.max(z.norm())))
        .reduce(|| 0.0, f64::max)
}

/// `max |I_{A,Φ}(Φp + d_A p)|` over random boundary-vanishing `p`.
pub fn probe_kernel_forward(
    system: &MagneticSystem,
    pair: &AttenuationPair,
    n_draws: usize,
    fan_size: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let mut report = ProbeReport::new(
        "kernel_forward",
        seed,
        &format!("draws={n_draws};fan={fan_size};dt={}", system.dt),
    );
    let quads = fan_quadratures(system, pair, &boundary_fan(fan_size))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for _ in 0..n_draws {
        let p = random::vanishing_vector(&mut rng, pair.rank(), 2, 1);
        let f = make_kernel_element(&p, pair)?.to_fiber_poly(&system.surface);
        worst = worst.max(max_over(&quads, &f));
        scale = scale.max(f.eval(0.3, -0.2, 0.7).iter().fold(0.0f64, |m, z| m.max(z.norm())));
    }
    report.push("max_abs_transform", worst);
    report.push("integrand_sample_size", scale);
    report.pass = worst < KERNEL_TOLERANCE;
    Ok(report)
}

/// Scattering data of `(A, Φ)` against its gauge transform by `q`, and of
/// `Φ` against `2Φ` as a control. A vanishing `Φ` is replaced by
/// `i(1 - x² - y²)·Id` for the control.
pub fn probe_gauge_determination(
    system: &MagneticSystem,
    pair: &AttenuationPair,
    q: &MatrixField,
    fan_size: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let mut report = ProbeReport::new("gauge_determination", seed, &format!("fan={fan_size};dt={}", system.dt));
    let gauged = gauge_transform(pair, q)?;
    let base = scattering_data(system, pair, fan_size)?;
    let other = scattering_data(system, &gauged, fan_size)?;
    let n = pair.rank();
    let control_phi = if pair.phi.is_zero() {
        MatrixField::scalar(n, Expr::i() * Expr::disk_defining())
    } else {
        pair.phi.clone()
    };
    let c1 = scattering_data(system, &pair.with_phi(control_phi.clone()), fan_size)?;
    let c2 = scattering_data(system, &pair.with_phi(control_phi.scale(&Expr::real(2.0))), fan_size)?;
    let gauge_diff = base.sup_distance(&other);
    let control_diff = c1.sup_distance(&c2);
    report.push("gauge_sup_difference", gauge_diff);
    report.push("control_sup_difference", control_diff);
    report.push("max_unitarity_defect", base.max_unitarity_defect().max(other.max_unitarity_defect()));
    report.pass = gauge_diff < KERNEL_TOLERANCE && control_diff > SEPARATION_THRESHOLD;
    Ok(report)
}

/// Forward and nondegeneracy checks for tensors of order `≤ k`.
pub fn probe_tensor_tomography(
    system: &MagneticSystem,
    k: usize,
    n_draws: usize,
    fan_size: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if k > 4 {
        return Err(Error::Validation(format!("tensor order {k} exceeds 4")));
    }
    let mut report = ProbeReport::new(
        "tensor_tomography",
        seed,
        &format!("k={k};draws={n_draws};fan={fan_size};dt={}", system.dt),
    );
    let quads = fan_quadratures(system, &AttenuationPair::zero(1), &boundary_fan(fan_size))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut potential = 0.0f64;
    let mut nonpotential = f64::INFINITY;
    for _ in 0..n_draws {
        if k >= 1 {
            let d = k as i32 - 1;
            let mut u = FiberPoly::zero(1);
            for j in -d..=d {
                u = u.add(&FiberPoly::mode(j, random::vanishing_vector(&mut rng, 1, 2, 1)));
            }
            potential = potential.max(max_over(&quads, &u.apply_transport(system)));
        }
        let mut f = FiberPoly::zero(1);
        for order in 0..=k {
            let comps = (0..=order).map(|_| random::poly(&mut rng, 2)).collect();
            f = f.add(&tensor_to_sm_function(&system.surface, &SymmetricTensor::new(comps)?));
        }
        nonpotential = nonpotential.min(max_over(&quads, &f));
    }
    if n_draws == 0 {
        nonpotential = 0.0;
    }
    report.push("potential_max_abs_transform", potential);
    report.push("nonpotential_min_max_abs_transform", nonpotential);
    report.pass = potential < KERNEL_TOLERANCE && nonpotential > SEPARATION_THRESHOLD;
    Ok(report)
}

/// Recovers `u` from `f = (X + λV)u` by integrating along the flow from
/// interior points, `u(x, v) = -∫₀^τ f(φ_t(x, v)) dt`, and measures the
/// fiber mass outside `|k| ≤ m - 1`.
pub fn probe_degree_reduction(system: &MagneticSystem, u: &FiberPoly, m: usize, rings: usize, n_theta: usize) -> Result<ProbeReport> {
    if m == 0 {
        return Err(Error::Validation("degree reduction needs m >= 1".into()));
    }
    if u.degree() > m as i32 - 1 {
        return Err(Error::Validation(format!("u has degree {} > m - 1 = {}", u.degree(), m - 1)));
    }
    if n_theta < 2 * m + 2 {
        return Err(Error::Validation(format!("ntheta = {n_theta} cannot resolve degree {m}")));
    }
    let boundary = (0..64)
        .flat_map(|j| {
            let b = 2.0 * PI * j as f64 / 64.0;
            (0..8).map(move |a| (b, 2.0 * PI * a as f64 / 8.0))
        })
        .map(|(b, t)| u.eval(b.cos(), b.sin(), t).iter().fold(0.0f64, |acc, z| acc.max(z.norm())))
        .fold(0.0, f64::max);
    if boundary > 1e-10 {
        return Err(Error::Validation(format!("u does not vanish on the boundary ({boundary:.3e})")));
    }
    let mut report = ProbeReport::new(
        "degree_reduction",
        0,
        &format!("m={m};rings={rings};ntheta={n_theta};dt={}", system.dt),
    );
    let f = u.apply_transport(system);
    let n = u.rank();
    let zero = AttenuationPair::zero(n);
    let mut points = vec![(0.0, 0.0)];
    for ring in 1..=rings {
        let r = 0.9 * ring as f64 / rings as f64;
        let count = 6 * ring;
        for a in 0..count {
            let ang = 2.0 * PI * (a as f64 + 0.5) / count as f64;
            points.push((r * ang.cos(), r * ang.sin()));
        }
    }
    let recovered: Vec<Vec<DVector<C64>>> = points
        .par_iter()
        .map(|&(x, y)| {
            (0..n_theta)
                .map(|j| {
                    let th = 2.0 * PI * j as f64 / n_theta as f64;
                    let trace = integrate_geodesic(system, PhasePoint::new(x, y, th), system.dt)?;
                    Ok(-RayQuadrature::build(system, &zero, trace).apply(&f))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let (mut outside, mut total, mut err) = (0.0, 0.0, 0.0f64);
    for ((x, y), fibre) in points.iter().zip(&recovered) {
        for (j, val) in fibre.iter().enumerate() {
            let th = 2.0 * PI * j as f64 / n_theta as f64;
            let exact = DVector::from_vec(u.eval(*x, *y, th));
            err = err.max((val - exact).camax());
        }
        for kb in 0..n_theta {
            let k = if kb < n_theta / 2 { kb as i32 } else { kb as i32 - n_theta as i32 };
            let mut coeff = DVector::<C64>::zeros(n);
            for (j, val) in fibre.iter().enumerate() {
                let th = 2.0 * PI * j as f64 / n_theta as f64;
                coeff += val * C64::from_polar(1.0 / n_theta as f64, -(k as f64) * th);
            }
            let e = coeff.norm_squared();
            total += e;
            if k.unsigned_abs() as usize >= m {
                outside += e;
            }
        }
    }
    let fraction = if total == 0.0 { 0.0 } else { outside / total };
    report.push("mass_fraction_outside", fraction);
    report.push("max_reconstruction_error", err);
    report.pass = fraction < DEGREE_MASS_TOLERANCE;
    Ok(report)
}

/// Monomials `x^a y^b` with `a + b ≤ degree`, ordered by total degree.
pub fn monomials(degree: usize) -> Vec<(i32, i32)> {
    (0..=degree as i32)
        .flat_map(|t| (0..=t).map(move |b| (t - b, b)))
        .collect()
}

/// Slot of a basis element of `(F, σ)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Function,
    FormX,
    FormY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisElement {
    pub slot: Slot,
    pub component: usize,
    pub monomial: (i32, i32),
}

/// `F = x^a y^b e_c`, or `σ = x^a y^b e_c dx` (resp. `dy`), for every
/// monomial of degree `≤ degree`.
pub fn pair_basis(n: usize, degree: usize) -> Vec<BasisElement> {
    let mut out = Vec::new();
    for slot in [Slot::Function, Slot::FormX, Slot::FormY] {
        for component in 0..n {
            for monomial in monomials(degree) {
                out.push(BasisElement { slot, component, monomial });
            }
        }
    }
    out
}

fn basis_function(system: &MagneticSystem, n: usize, e: BasisElement) -> impl SmFunction + '_ {
    FnSm::new(n, move |x: f64, y: f64, th: f64, out: &mut [C64]| {
        out.iter_mut().for_each(|v| *v = C64::default());
        let mono = x.powi(e.monomial.0) * y.powi(e.monomial.1);
        let w = match e.slot {
            Slot::Function => 1.0,
            Slot::FormX => (-system.surface.phi(x, y)).exp() * th.cos(),
            Slot::FormY => (-system.surface.phi(x, y)).exp() * th.sin(),
        };
        out[e.component] = C64::from(mono * w);
    })
}

/// Matrix of `I_{A,Φ}` on a basis: rows are (ray, component), columns are
/// basis elements.
pub fn transform_matrix(quads: &[RayQuadrature], system: &MagneticSystem, n: usize, basis: &[BasisElement]) -> DMatrix<C64> {
    let cols: Vec<Vec<C64>> = basis
        .par_iter()
        .map(|&e| {
            let f = basis_function(system, n, e);
            quads.iter().flat_map(|q| q.apply(&f).iter().copied().collect::<Vec<_>>()).collect()
        })
        .collect();
    DMatrix::from_fn(quads.len() * n, basis.len(), |r, c| cols[c][r])
}

fn fit_sample_points() -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for ring in 0..8 {
        let r = (ring as f64 + 0.5) / 8.0;
        for k in 0..16 {
            let a = 2.0 * PI * k as f64 / 16.0 + 0.3 * ring as f64;
            pts.push((r * a.cos(), r * a.sin()));
        }
    }
    pts
}

/// Least-squares coefficients of `values` on `monomials(degree)` and the
/// relative fit residual.
fn fit_monomials(points: &[(f64, f64)], values: &[C64], degree: usize) -> (Vec<C64>, f64) {
    let monos = monomials(degree);
    let v = DMatrix::<C64>::from_fn(points.len(), monos.len(), |r, c| {
        C64::from(points[r].0.powi(monos[c].0) * points[r].1.powi(monos[c].1))
    });
    let b = DVector::from_column_slice(values);
    let svd = v.clone().svd(true, true);
    let coef = svd.solve(&b, 1e-13).expect("both factors computed");
    let res = (&v * &coef - &b).norm();
    let scale = b.norm();
    (coef.iter().copied().collect(), if scale == 0.0 { 0.0 } else { res / scale })
}

/// Coefficients of `(Φp, d_A p)` in [`pair_basis`] order, or `None` when
/// the element does not lie in the span.
fn potential_coefficients(pair: &AttenuationPair, p: &[Expr], degree: usize) -> Result<Option<Vec<C64>>> {
    let ke = make_kernel_element(p, pair)?;
    let pts = fit_sample_points();
    let n = pair.rank();
    let mut out = Vec::new();
    // σ(v) with v = e^{-φ}(cos θ, sin θ): the basis slots carry the same
    // e^{-φ}, so σ_x and σ_y are fitted directly
    for field in [&ke.f, &ke.sigma_x, &ke.sigma_y] {
        for c in 0..n {
            let vals: Vec<C64> = pts.iter().map(|&(x, y)| eval_vector(field, x, y)[c]).collect();
            let (coef, res) = fit_monomials(&pts, &vals, degree);
            if res > 1e-9 {
                return Ok(None);
            }
            out.extend(coef);
        }
    }
    Ok(Some(out))
}

fn singular_values(m: &DMatrix<C64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Orthonormal basis of the range of `p` and of its complement.
fn split_range(p: &DMatrix<C64>, dim: usize) -> Result<(DMatrix<C64>, DMatrix<C64>)> {
    if p.ncols() == 0 {
        return Ok((DMatrix::zeros(dim, 0), DMatrix::identity(dim, dim)));
    }
    let svd = p.clone().svd(true, false);
    let s = &svd.singular_values;
    let smax = s.max();
    let rank = s.iter().filter(|&&v| v > 1e-10 * smax).count();
    if rank < p.ncols() {
        return Err(Error::Config(format!(
            "potential subspace is rank deficient ({rank} of {}); the basis is too coarse",
            p.ncols()
        )));
    }
    let u = svd.u.expect("requested");
    // order columns by singular value
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let range = DMatrix::from_columns(&idx[..rank].iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let proj = DMatrix::<C64>::identity(dim, dim) - &range * range.adjoint();
    let eig = proj.svd(true, false);
    let ue = eig.u.expect("requested");
    let keep: Vec<_> = (0..eig.singular_values.len())
        .filter(|&i| eig.singular_values[i] > 0.5)
        .map(|i| ue.column(i))
        .collect();
    Ok((range, DMatrix::from_columns(&keep)))
}

struct Restricted {
    ratio: f64,
    smallest: f64,
    appended_smallest: f64,
    potentials: usize,
}

fn restricted_spectrum(
    pair: &AttenuationPair,
    t_full: &DMatrix<C64>,
    basis_full: &[BasisElement],
    degree: usize,
) -> Result<Restricted> {
    let n = pair.rank();
    let basis = pair_basis(n, degree);
    let cols: Vec<usize> = basis
        .iter()
        .map(|e| basis_full.iter().position(|f| f == e).expect("sub-basis"))
        .collect();
    let t = DMatrix::from_columns(&cols.iter().map(|&c| t_full.column(c)).collect::<Vec<_>>());
    let mut pcols = Vec::new();
    if degree >= 1 {
        for c in 0..n {
            for (a, b) in monomials(degree - 1) {
                let mut p = vec![Expr::zero(); n];
                p[c] = Expr::disk_defining() * Expr::x().powi(a) * Expr::y().powi(b);
                if let Some(coef) = potential_coefficients(pair, &p, degree)? {
                    pcols.push(DVector::from_vec(coef));
                }
            }
        }
    }
    let dim = basis.len();
    let pmat = if pcols.is_empty() { DMatrix::zeros(dim, 0) } else { DMatrix::from_columns(&pcols) };
    let (range, complement) = split_range(&pmat, dim)?;
    let restricted = &t * &complement;
    let s = singular_values(&restricted);
    let (largest, smallest) = (s[0], *s.last().unwrap());
    let appended_smallest = if range.ncols() > 0 {
        let mut cols: Vec<DVector<C64>> = complement.column_iter().map(|c| c.into_owned()).collect();
        cols.push(range.column(0).into_owned());
        *singular_values(&(&t * DMatrix::from_columns(&cols))).last().unwrap()
    } else {
        f64::NAN
    };
    Ok(Restricted {
        ratio: if largest == 0.0 { 0.0 } else { smallest / largest },
        smallest,
        appended_smallest,
        potentials: range.ncols(),
    })
}

/// Smallest singular value of the transform restricted to the complement
/// of the potential pairs `(Φp, d_A p)`, `p = (1 - x² - y²) x^a y^b e_c`,
/// inside the polynomial basis of degree `≤ degree`.
pub fn probe_nullspace_svd(
    system: &MagneticSystem,
    pair: &AttenuationPair,
    degree: usize,
    fan_size: usize,
) -> Result<ProbeReport> {
    let n = pair.rank();
    let basis = pair_basis(n, degree);
    if basis.len() > 200 {
        return Err(Error::Config(format!("basis of size {} exceeds 200", basis.len())));
    }
    let mut report = ProbeReport::new(
        "nullspace_svd",
        0,
        &format!("degree={degree};fan={fan_size};dt={}", system.dt),
    );
    report.label = Some("empirical surrogate".into());
    let fan = boundary_fan(fan_size);
    let quads = fan_quadratures(system, pair, &fan)?;
    let t = transform_matrix(&quads, system, n, &basis);
    let main = restricted_spectrum(pair, &t, &basis, degree)?;
    if main.potentials == 0 && degree >= 1 {
        return Err(Error::Config("no potential pair fits the basis; raise the degree".into()));
    }
    report.push("restricted_ratio", main.ratio);
    report.push("appended_potential_smallest_singular_value", main.appended_smallest);
    report.push("smallest_restricted_singular_value", main.smallest);
    report.push("basis_size", basis.len() as f64);
    report.push("potential_dimension", main.potentials as f64);
    for d in 1..degree {
        if let Ok(r) = restricted_spectrum(pair, &t, &basis, d) {
            report.push(format!("restricted_ratio_degree_{d}"), r.ratio);
        }
    }
    // the same potential transformed directly
    if degree >= 1 {
        let mut p = vec![Expr::zero(); n];
        p[0] = Expr::disk_defining();
        let direct = make_kernel_element(&p, pair)?.to_fiber_poly(&system.surface);
        report.push("kernel_direct_max_abs_transform", max_over(&quads, &direct));
        if let Some(coef) = potential_coefficients(pair, &p, degree)? {
            let v = &t * DVector::from_vec(coef);
            report.push("kernel_matrix_max_abs_transform", v.camax());
        }
    }
    let collapse_ok = main.appended_smallest.is_nan() || main.appended_smallest < COLLAPSE_THRESHOLD;
    report.pass = main.ratio > SPECTRAL_GAP_THRESHOLD && collapse_ok;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundaryPoint;

    #[test]
    fn kernel_forward_passes_and_zero_draws_are_zero() {
        let system = MagneticSystem::flat(0.3).with_dt(2e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = random::pair(&mut rng, 1, 1);
        let r = probe_kernel_forward(&system, &pair, 0, 16, 1).unwrap();
        assert_eq!(r.metric("max_abs_transform"), Some(0.0));
        let r = probe_kernel_forward(&system, &pair, 2, 16, 1).unwrap();
        assert!(r.pass, "{r:?}");
        let again = probe_kernel_forward(&system, &pair, 2, 16, 1).unwrap();
        assert_eq!(r, again);
    }

    // extension: for n = 1 the kernel statement does not need unitarity
    #[test]
    fn kernel_forward_with_real_scalar_attenuation() {
        let system = MagneticSystem::flat(0.3).with_dt(2e-3);
        let pair = AttenuationPair::new_unchecked(
            MatrixField::scalar(1, Expr::parse("0.4 - 0.3*y").unwrap()),
            MatrixField::scalar(1, Expr::parse("0.2*x").unwrap()),
            MatrixField::scalar(1, Expr::parse("0.5 + 0.2*x").unwrap()),
        )
        .unwrap();
        assert!(pair.skew_hermitian_residuals()[2] > 0.1);
        let r = probe_kernel_forward(&system, &pair, 3, 16, 5).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn gauge_identity_is_exact() {
        let system = MagneticSystem::flat(0.3).with_dt(2e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = random::pair(&mut rng, 2, 1);
        let r = probe_gauge_determination(&system, &pair, &MatrixField::identity(2), 16, 0).unwrap();
        assert!(r.metric("gauge_sup_difference").unwrap() < 1e-14);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn tensor_orders_zero_and_two() {
        let system = MagneticSystem::flat(0.3).with_dt(2e-3);
        let r = probe_tensor_tomography(&system, 0, 2, 16, 1).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.metric("potential_max_abs_transform"), Some(0.0));
        let r = probe_tensor_tomography(&system, 2, 2, 16, 1).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(probe_tensor_tomography(&system, 5, 1, 4, 1).is_err());
    }

    #[test]
    fn dx_dx_on_a_diameter() {
        let system = MagneticSystem::flat(0.0);
        let f = tensor_to_sm_function(&system.surface, &SymmetricTensor::new(vec![Expr::one(), Expr::zero(), Expr::zero()]).unwrap());
        let q = crate::transform::ray_quadrature(&system, &AttenuationPair::zero(1), &BoundaryPoint::new(PI, 0.0)).unwrap();
        let v = q.apply(&f)[0];
        assert!((v - C64::from(2.0)).norm() < 1e-9, "{v}");
    }

    #[test]
    fn degree_reduction_recovers_u() {
        let system = MagneticSystem::flat(0.3).with_dt(2e-3);
        let u = FiberPoly::scalar(0, Expr::disk_defining().powi(2));
        let r = probe_degree_reduction(&system, &u, 1, 2, 8).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.metric("max_reconstruction_error").unwrap() < 1e-8, "{r:?}");
        let u2 = u.add(&FiberPoly::scalar(2, Expr::disk_defining() * Expr::x()));
        let r = probe_degree_reduction(&system, &u2, 3, 2, 16).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(probe_degree_reduction(&system, &u2, 2, 2, 16).is_err());
        let not_vanishing = FiberPoly::scalar(0, Expr::x());
        assert!(probe_degree_reduction(&system, &not_vanishing, 1, 2, 8).is_err());
    }

    #[test]
    fn constant_column_has_norm_tau() {
        let system = MagneticSystem::flat(0.0).with_dt(2e-3);
        let fan = boundary_fan(16);
        let quads = fan_quadratures(&system, &AttenuationPair::zero(1), &fan).unwrap();
        let basis = [BasisElement {
            slot: Slot::Function,
            component: 0,
            monomial: (0, 0),
        }];
        let t = transform_matrix(&quads, &system, 1, &basis);
        let tau = quads.iter().map(|q| q.tau().powi(2)).sum::<f64>().sqrt();
        let s = singular_values(&t);
        assert!((s[0] - tau).abs() < 1e-9 * tau);
    }

    #[test]
    fn fitted_potentials_reproduce_the_kernel_element() {
        let system = MagneticSystem::flat(0.3);
        let pair = AttenuationPair::higgs(MatrixField::scalar(1, Expr::constant(C64::new(0.0, 0.5)))).unwrap();
        let p = vec![Expr::disk_defining() * Expr::x()];
        let coef = potential_coefficients(&pair, &p, 3).unwrap().unwrap();
        let basis = pair_basis(1, 3);
        let (x, y, th) = (0.3, -0.4, 1.1);
        let mut acc = C64::default();
        for (c, e) in coef.iter().zip(&basis) {
            let f = basis_function(&system, 1, *e);
            acc += c * f.eval(x, y, th)[0];
        }
        let direct = make_kernel_element(&p, &pair).unwrap().to_fiber_poly(&system.surface).eval(x, y, th)[0];
        assert!((acc - direct).norm() < 1e-10, "{acc} {direct}");
        // degree too low to hold Φp
        assert!(potential_coefficients(&pair, &p, 2).unwrap().is_none());
    }

    #[test]
    fn nullspace_probe_small() {
        let system = MagneticSystem::flat(0.3).with_dt(2e-3);
        let pair = AttenuationPair::zero(1);
        let r = probe_nullspace_svd(&system, &pair, 2, 64).unwrap();
        assert_eq!(r.label.as_deref(), Some("empirical surrogate"));
        assert!(r.pass, "{r:?}");
        assert!(r.metric("potential_dimension").unwrap() >= 3.0);
    }
}
