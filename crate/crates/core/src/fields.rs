//! Matrix-valued fields, unitary connections with Higgs fields, gauge
//! transformations, kernel elements and symmetric tensors.
//!
//! Hodge star on 1-forms: `(*σ)(v) = σ(-iv)`, where `iv` is the +90°
//! rotation of `v`. With this choice `X⊥f = *df` and `V(*A) = A(v)`,
//! which is what the commutator and energy identities need.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::expr::{Expr, C64};
use crate::geometry::{disk_probe_points, Surface};
use crate::sm::FiberPoly;

/// Tolerance for skew-Hermitian and unitarity checks on symbolic fields.
pub const STRUCTURE_TOLERANCE: f64 = 1e-12;
/// Tolerance for the boundary conditions `Q|∂M = Id` and `p|∂M = 0`.
pub const BOUNDARY_TOLERANCE: f64 = 1e-10;

/// Row-major `n×n` matrix of scalar expressions.
#[derive(Debug, Clone)]
pub struct MatrixField {
    n: usize,
    entries: Vec<Expr>,
}

impl MatrixField {
    pub fn from_entries(n: usize, entries: Vec<Expr>) -> Result<Self> {
        if entries.len() != n * n || n == 0 {
            return Err(Error::Validation(format!(
                "matrix field of rank {n} needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        Ok(MatrixField { n, entries })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Expr) -> Self {
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                entries.push(f(i, j));
            }
        }
        MatrixField { n, entries }
    }

    pub fn zero(n: usize) -> Self {
        Self::from_fn(n, |_, _| Expr::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { Expr::one() } else { Expr::zero() })
    }

    /// `e·Id`.
    pub fn scalar(n: usize, e: Expr) -> Self {
        Self::from_fn(n, |i, j| if i == j { e.clone() } else { Expr::zero() })
    }

    pub fn constant(m: &DMatrix<C64>) -> Self {
        assert_eq!(m.nrows(), m.ncols());
        Self::from_fn(m.nrows(), |i, j| Expr::constant(m[(i, j)]))
    }

    pub fn rank(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> &Expr {
        &self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[Expr] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Expr::is_zero)
    }

    pub fn eval(&self, x: f64, y: f64) -> DMatrix<C64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.entry(i, j).eval(x, y))
    }

    pub fn map(&self, f: impl Fn(&Expr) -> Expr) -> Self {
        MatrixField {
            n: self.n,
            entries: self.entries.iter().map(f).collect(),
        }
    }

    pub fn dx(&self) -> Self {
        self.map(Expr::dx)
    }

    pub fn dy(&self) -> Self {
        self.map(Expr::dy)
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.n, |i, j| self.entry(j, i).conj())
    }

    pub fn scale(&self, e: &Expr) -> Self {
        self.map(|a| e * a)
    }

    pub fn add(&self, other: &MatrixField) -> Self {
        assert_eq!(self.n, other.n);
        Self::from_fn(self.n, |i, j| self.entry(i, j) + other.entry(i, j))
    }

    pub fn sub(&self, other: &MatrixField) -> Self {
        assert_eq!(self.n, other.n);
        Self::from_fn(self.n, |i, j| self.entry(i, j) - other.entry(i, j))
    }

    pub fn mul(&self, other: &MatrixField) -> Self {
        assert_eq!(self.n, other.n);
        Self::from_fn(self.n, |i, j| {
            (0..self.n).fold(Expr::zero(), |acc, k| acc + self.entry(i, k) * other.entry(k, j))
        })
    }

    pub fn commutator(&self, other: &MatrixField) -> Self {
        self.mul(other).sub(&other.mul(self))
    }

    pub fn apply(&self, v: &[Expr]) -> Vec<Expr> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| (0..self.n).fold(Expr::zero(), |acc, k| acc + self.entry(i, k) * &v[k]))
            .collect()
    }

    /// Largest `‖M + M*‖` (max-entry norm) over the disk probe points.
    pub fn skew_hermitian_residual(&self) -> f64 {
        disk_probe_points(16)
            .into_iter()
            .map(|(x, y)| {
                let m = self.eval(x, y);
                (&m + m.adjoint()).iter().fold(0.0f64, |a, z| a.max(z.norm()))
            })
            .fold(0.0, f64::max)
    }

    /// Largest `‖Q*Q - Id‖` over the disk probe points.
    pub fn unitarity_residual(&self) -> f64 {
        disk_probe_points(16)
            .into_iter()
            .map(|(x, y)| unitarity_defect(&self.eval(x, y)))
            .fold(0.0, f64::max)
    }

    /// Largest `‖M - target‖` over `n_samples` boundary points.
    fn boundary_defect(&self, target: &DMatrix<C64>, n_samples: usize) -> f64 {
        (0..n_samples)
            .map(|k| {
                let b = 2.0 * std::f64::consts::PI * k as f64 / n_samples as f64;
                let m = self.eval(b.cos(), b.sin());
                (m - target).iter().fold(0.0f64, |a, z| a.max(z.norm()))
            })
            .fold(0.0, f64::max)
    }
}

/// Max-entry norm of `U*U - Id`.
pub fn unitarity_defect(u: &DMatrix<C64>) -> f64 {
    let n = u.nrows();
    (u.adjoint() * u - DMatrix::identity(n, n))
        .iter()
        .fold(0.0f64, |a, z| a.max(z.norm()))
}

/// `ℂⁿ`-valued field on the disk.
pub type VectorField = Vec<Expr>;

pub fn eval_vector(v: &[Expr], x: f64, y: f64) -> DVector<C64> {
    DVector::from_iterator(v.len(), v.iter().map(|e| e.eval(x, y)))
}

/// Unitary connection `A = A_x dx + A_y dy` and Higgs field `Φ`.
#[derive(Debug, Clone)]
pub struct AttenuationPair {
    pub a_x: MatrixField,
    pub a_y: MatrixField,
    pub phi: MatrixField,
}

impl AttenuationPair {
    pub fn new(a_x: MatrixField, a_y: MatrixField, phi: MatrixField) -> Result<Self> {
        let pair = Self::new_unchecked(a_x, a_y, phi)?;
        for (name, m) in [("A_x", &pair.a_x), ("A_y", &pair.a_y), ("Phi", &pair.phi)] {
            let r = m.skew_hermitian_residual();
            if !(r < STRUCTURE_TOLERANCE) {
                return Err(Error::Validation(format!("{name} is not skew-Hermitian (residual {r:.3e})")));
            }
        }
        Ok(pair)
    }

    /// Builds a pair without the skew-Hermitian check (non-unitary scalar
    /// attenuations are meaningful for rank one).
    pub fn new_unchecked(a_x: MatrixField, a_y: MatrixField, phi: MatrixField) -> Result<Self> {
        if a_x.rank() != a_y.rank() || a_x.rank() != phi.rank() {
            return Err(Error::Validation("attenuation components have different ranks".into()));
        }
        Ok(AttenuationPair { a_x, a_y, phi })
    }

    pub fn zero(n: usize) -> Self {
        AttenuationPair {
            a_x: MatrixField::zero(n),
            a_y: MatrixField::zero(n),
            phi: MatrixField::zero(n),
        }
    }

    pub fn higgs(phi: MatrixField) -> Result<Self> {
        let n = phi.rank();
        Self::new(MatrixField::zero(n), MatrixField::zero(n), phi)
    }

    pub fn rank(&self) -> usize {
        self.phi.rank()
    }

    pub fn is_zero(&self) -> bool {
        self.a_x.is_zero() && self.a_y.is_zero() && self.phi.is_zero()
    }

    pub fn with_phi(&self, phi: MatrixField) -> Self {
        AttenuationPair {
            phi,
            ..self.clone()
        }
    }

    /// `A(v)` for the unit vector `v = e^{-φ}(cos θ, sin θ)`.
    pub fn connection_at(&self, surface: &Surface, x: f64, y: f64, theta: f64) -> DMatrix<C64> {
        let [v1, v2] = surface.unit_vector(x, y, theta);
        self.a_x.eval(x, y) * C64::from(v1) + self.a_y.eval(x, y) * C64::from(v2)
    }

    /// `𝒜 = A(v) + Φ`.
    pub fn total_at(&self, surface: &Surface, x: f64, y: f64, theta: f64) -> DMatrix<C64> {
        self.connection_at(surface, x, y, theta) + self.phi.eval(x, y)
    }

    /// `(*A)(v) = A(-iv)`.
    pub fn star_connection_at(&self, surface: &Surface, x: f64, y: f64, theta: f64) -> DMatrix<C64> {
        let [v1, v2] = surface.unit_vector(x, y, theta);
        // -iv = (v2, -v1)
        self.a_x.eval(x, y) * C64::from(v2) - self.a_y.eval(x, y) * C64::from(v1)
    }

    pub fn curvature(&self, surface: &Surface) -> ConnectionCurvature {
        let weight = (Expr::real(-2.0) * surface.conformal_factor()).exp();
        let fa = self
            .a_y
            .dx()
            .sub(&self.a_x.dy())
            .add(&self.a_x.commutator(&self.a_y))
            .scale(&weight);
        ConnectionCurvature {
            star_fa: fa,
            da_phi_x: self.phi.dx().add(&self.a_x.commutator(&self.phi)),
            da_phi_y: self.phi.dy().add(&self.a_y.commutator(&self.phi)),
        }
    }

    /// Largest skew-Hermitian residual of the three components.
    pub fn skew_hermitian_residuals(&self) -> [f64; 3] {
        [
            self.a_x.skew_hermitian_residual(),
            self.a_y.skew_hermitian_residual(),
            self.phi.skew_hermitian_residual(),
        ]
    }
}

/// `*F_A` and the components of `d_AΦ = dΦ + [A, Φ]`.
#[derive(Debug, Clone)]
pub struct ConnectionCurvature {
    /// `e^{-2φ}(∂_x A_y - ∂_y A_x + [A_x, A_y])`.
    pub star_fa: MatrixField,
    pub da_phi_x: MatrixField,
    pub da_phi_y: MatrixField,
}

impl ConnectionCurvature {
    /// `(*d_AΦ)(v) = (d_AΦ)(-iv)`.
    pub fn star_da_phi_at(&self, surface: &Surface, x: f64, y: f64, theta: f64) -> DMatrix<C64> {
        let [v1, v2] = surface.unit_vector(x, y, theta);
        self.da_phi_x.eval(x, y) * C64::from(v2) - self.da_phi_y.eval(x, y) * C64::from(v1)
    }
}

/// Returns `(Q⁻¹dQ + Q⁻¹AQ, Q⁻¹ΦQ)`. `Q` must be unitary with `Q|∂M = Id`;
/// `Q⁻¹` is taken as `Q*`.
pub fn gauge_transform(pair: &AttenuationPair, q: &MatrixField) -> Result<AttenuationPair> {
    let n = pair.rank();
    if q.rank() != n {
        return Err(Error::Validation(format!("gauge of rank {} for a rank-{n} pair", q.rank())));
    }
    let u = q.unitarity_residual();
    if !(u < BOUNDARY_TOLERANCE) {
        return Err(Error::Validation(format!("gauge field is not unitary (residual {u:.3e})")));
    }
    let b = q.boundary_defect(&DMatrix::identity(n, n), 64);
    if !(b < BOUNDARY_TOLERANCE) {
        return Err(Error::Validation(format!("gauge field differs from Id on the boundary by {b:.3e}")));
    }
    let qi = q.adjoint();
    Ok(AttenuationPair {
        a_x: qi.mul(&q.dx()).add(&qi.mul(&pair.a_x).mul(q)),
        a_y: qi.mul(&q.dy()).add(&qi.mul(&pair.a_y).mul(q)),
        phi: qi.mul(&pair.phi).mul(q),
    })
}

/// Kernel element `Φp + d_A p` for `p` vanishing on the boundary.
#[derive(Debug, Clone)]
pub struct KernelElement {
    /// `F = Φp`.
    pub f: VectorField,
    /// `σ = dp + Ap`, as its `dx` and `dy` components.
    pub sigma_x: VectorField,
    pub sigma_y: VectorField,
}

impl KernelElement {
    /// `(x, v) ↦ F(x) + σ_x(v)` as a fiber polynomial of degree one.
    pub fn to_fiber_poly(&self, surface: &Surface) -> FiberPoly {
        one_form_plus_function(surface, &self.f, &self.sigma_x, &self.sigma_y)
    }
}

/// `(x, v) ↦ F(x) + σ_x(v)` with `σ = σ_x dx + σ_y dy`.
pub fn one_form_plus_function(surface: &Surface, f: &[Expr], sx: &[Expr], sy: &[Expr]) -> FiberPoly {
    let n = f.len();
    let half = (-surface.conformal_factor()).exp() * Expr::real(0.5);
    let i = Expr::i();
    // σ(v) = e^{-φ}/2 [(σ_x - iσ_y) e^{iθ} + (σ_x + iσ_y) e^{-iθ}]
    let plus: Vec<Expr> = (0..n).map(|c| &half * (&sx[c] - &i * &sy[c])).collect();
    let minus: Vec<Expr> = (0..n).map(|c| &half * (&sx[c] + &i * &sy[c])).collect();
    let mut out = FiberPoly::mode(0, f.to_vec());
    out.add_mode(1, &plus);
    out.add_mode(-1, &minus);
    out
}

pub fn make_kernel_element(p: &[Expr], pair: &AttenuationPair) -> Result<KernelElement> {
    let n = pair.rank();
    if p.len() != n {
        return Err(Error::Validation(format!("potential of length {} for rank {n}", p.len())));
    }
    let defect = (0..64)
        .map(|k| {
            let b = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
            eval_vector(p, b.cos(), b.sin()).norm()
        })
        .fold(0.0, f64::max);
    if !(defect < BOUNDARY_TOLERANCE) {
        return Err(Error::Validation(format!("potential does not vanish on the boundary ({defect:.3e})")));
    }
    let ax = pair.a_x.apply(p);
    let ay = pair.a_y.apply(p);
    Ok(KernelElement {
        f: pair.phi.apply(p),
        sigma_x: p.iter().zip(ax).map(|(pc, a)| pc.dx() + a).collect(),
        sigma_y: p.iter().zip(ay).map(|(pc, a)| pc.dy() + a).collect(),
    })
}

fn binomial(m: usize, j: usize) -> f64 {
    (0..j).fold(1.0, |acc, i| acc * (m - i) as f64 / (i + 1) as f64)
}

/// Symmetric covariant `m`-tensor on the disk. `components[j]` is the
/// component with `j` indices equal to `y` and `m - j` equal to `x`.
#[derive(Debug, Clone)]
pub struct SymmetricTensor {
    components: Vec<Expr>,
}

impl SymmetricTensor {
    pub fn new(components: Vec<Expr>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Validation("a symmetric tensor needs at least one component".into()));
        }
        Ok(SymmetricTensor { components })
    }

    pub fn scalar(f: Expr) -> Self {
        SymmetricTensor { components: vec![f] }
    }

    pub fn order(&self) -> usize {
        self.components.len() - 1
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    /// `f(v, …, v)` for a coordinate vector `v`.
    pub fn contract(&self, x: f64, y: f64, v: [f64; 2]) -> C64 {
        let m = self.order();
        self.components
            .iter()
            .enumerate()
            .map(|(j, c)| c.eval(x, y) * binomial(m, j) * v[0].powi((m - j) as i32) * v[1].powi(j as i32))
            .sum()
    }
}

/// `f̂(x, v) = f_{i₁…i_m} v^{i₁}…v^{i_m}` as a scalar fiber polynomial.
pub fn tensor_to_sm_function(surface: &Surface, tensor: &SymmetricTensor) -> FiberPoly {
    let m = tensor.order();
    let scale = (Expr::real(-(m as f64)) * surface.conformal_factor()).exp();
    let mut out = FiberPoly::zero(1);
    for (j, c) in tensor.components().iter().enumerate() {
        let mut term = FiberPoly::scalar(0, c * &scale * Expr::real(binomial(m, j)));
        for _ in 0..m - j {
            term = term.mul_cos();
        }
        for _ in 0..j {
            term = term.mul_sin();
        }
        out = out.add(&term);
    }
    out
}

/// Symmetrized covariant derivative `d^s h` of the conformal metric.
pub fn symmetric_inner_derivative(surface: &Surface, h: &SymmetricTensor) -> SymmetricTensor {
    let m = h.order() + 1;
    let (px, py) = surface.grad_phi_exprs();
    let hc = h.components();
    let comp = |b: isize| -> Expr {
        if b < 0 || b as usize >= hc.len() {
            Expr::zero()
        } else {
            hc[b as usize].clone()
        }
    };
    // Γ^l_{k i} = gamma[l][k][i]
    let gamma = [
        [[px.clone(), py.clone()], [py.clone(), -px]],
        [[-py, px.clone()], [px.clone(), py.clone()]],
    ];
    // (∇_k h)_I for I with b y-indices among m - 1
    let nabla = |k: usize, b: usize| -> Expr {
        let a = (m - 1 - b) as f64;
        let bf = b as f64;
        let bi = b as isize;
        let d = if k == 0 { comp(bi).dx() } else { comp(bi).dy() };
        let from_x = Expr::real(a) * (&gamma[0][k][0] * comp(bi) + &gamma[1][k][0] * comp(bi + 1));
        let from_y = Expr::real(bf) * (&gamma[0][k][1] * comp(bi - 1) + &gamma[1][k][1] * comp(bi));
        d - from_x - from_y
    };
    let components = (0..=m)
        .map(|j| {
            let mut acc = Expr::zero();
            if m - j > 0 {
                acc = acc + Expr::real((m - j) as f64) * nabla(0, j);
            }
            if j > 0 {
                acc = acc + Expr::real(j as f64) * nabla(1, j - 1);
            }
            acc / Expr::real(m as f64)
        })
        .collect();
    SymmetricTensor { components }
}

/// Seeded generators for smooth low-order polynomial fields.
pub mod random {
    use super::*;

    /// `Σ c_{ab} x^a y^b` over `a + b ≤ degree`, `c_{ab}` uniform in `[-1, 1]`.
    pub fn poly(rng: &mut impl Rng, degree: usize) -> Expr {
        let mut e = Expr::zero();
        for total in 0..=degree {
            for b in 0..=total {
                let a = total - b;
                let c: f64 = rng.random_range(-1.0..=1.0);
                e = e + Expr::real(c) * Expr::x().powi(a as i32) * Expr::y().powi(b as i32);
            }
        }
        e
    }

    pub fn complex_poly(rng: &mut impl Rng, degree: usize) -> Expr {
        poly(rng, degree) + Expr::i() * poly(rng, degree)
    }

    /// Real polynomial times `(1 - x² - y²)^power`.
    pub fn vanishing_poly(rng: &mut impl Rng, degree: usize, power: i32) -> Expr {
        Expr::disk_defining().powi(power) * poly(rng, degree)
    }

    pub fn skew_hermitian(rng: &mut impl Rng, n: usize, degree: usize) -> MatrixField {
        let mut m = MatrixField::zero(n);
        for i in 0..n {
            m.entries[i * n + i] = Expr::i() * poly(rng, degree);
            for j in i + 1..n {
                let z = complex_poly(rng, degree);
                m.entries[j * n + i] = -z.conj();
                m.entries[i * n + j] = z;
            }
        }
        m
    }

    pub fn pair(rng: &mut impl Rng, n: usize, degree: usize) -> AttenuationPair {
        AttenuationPair {
            a_x: skew_hermitian(rng, n, degree),
            a_y: skew_hermitian(rng, n, degree),
            phi: skew_hermitian(rng, n, degree),
        }
    }

    /// `ℂⁿ` field vanishing to order `power` on the boundary.
    pub fn vanishing_vector(rng: &mut impl Rng, n: usize, degree: usize, power: i32) -> VectorField {
        (0..n)
            .map(|_| Expr::disk_defining().powi(power) * complex_poly(rng, degree))
            .collect()
    }

    /// Unitary field equal to `Id` on the boundary: diagonal phases
    /// `exp(iρ_j)` followed by complex Givens rotations with angles that
    /// vanish on the boundary.
    pub fn gauge(rng: &mut impl Rng, n: usize, degree: usize) -> MatrixField {
        let mut q = MatrixField::from_fn(n, |i, j| {
            if i == j {
                (Expr::i() * vanishing_poly(rng, degree, 1)).exp()
            } else {
                Expr::zero()
            }
        });
        for i in 0..n {
            for j in i + 1..n {
                let alpha = vanishing_poly(rng, degree, 1);
                let psi: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let e = Expr::constant(C64::from_polar(1.0, psi));
                let (c, s) = (alpha.cos(), alpha.sin());
                let g = MatrixField::from_fn(n, |r, k| match (r, k) {
                    _ if r == i && k == i => c.clone(),
                    _ if r == j && k == j => c.clone(),
                    _ if r == i && k == j => -(&s * e.conj()),
                    _ if r == j && k == i => &s * &e,
                    _ if r == k => Expr::one(),
                    _ => Expr::zero(),
                });
                q = q.mul(&g);
            }
        }
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sm::SmFunction;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sup_diff(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, z| m.max(z.norm()))
    }

    fn sample_points() -> Vec<(f64, f64)> {
        disk_probe_points(10)
    }

    fn pair_distance(a: &AttenuationPair, b: &AttenuationPair) -> f64 {
        sample_points()
            .into_iter()
            .map(|(x, y)| {
                sup_diff(&a.a_x.eval(x, y), &b.a_x.eval(x, y))
                    .max(sup_diff(&a.a_y.eval(x, y), &b.a_y.eval(x, y)))
                    .max(sup_diff(&a.phi.eval(x, y), &b.phi.eval(x, y)))
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn random_fields_have_the_advertised_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=3 {
            let pair = random::pair(&mut rng, n, 2);
            assert!(pair.skew_hermitian_residuals().iter().all(|r| *r < 1e-14));
            let q = random::gauge(&mut rng, n, 2);
            assert!(q.unitarity_residual() < 1e-13);
            assert!(q.boundary_defect(&DMatrix::identity(n, n), 32) < 1e-13);
        }
    }

    #[test]
    fn non_skew_fields_are_rejected() {
        let bad = MatrixField::scalar(1, Expr::x());
        let err = AttenuationPair::higgs(bad).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn star_fa_closed_form() {
        // A = i x dy on the flat disk: *F_A = i
        let a_y = MatrixField::scalar(1, Expr::i() * Expr::x());
        let pair = AttenuationPair::new(MatrixField::zero(1), a_y, MatrixField::zero(1)).unwrap();
        let c = pair.curvature(&Surface::flat());
        assert!((c.star_fa.eval(0.3, -0.2)[(0, 0)] - C64::i()).norm() < 1e-15);
        assert!(c.star_fa.skew_hermitian_residual() < 1e-14);
    }

    #[test]
    fn star_da_phi_without_connection() {
        // A ≡ 0: *dΦ(v) = dΦ(-iv); Φ = i x gives -i·v2... check against dΦ
        let surface = Surface::parse("0.1*x", "tilt").unwrap();
        let phi = MatrixField::scalar(1, Expr::i() * (Expr::x() + Expr::x() * Expr::y()));
        let pair = AttenuationPair::higgs(phi).unwrap();
        let c = pair.curvature(&surface);
        let (x, y, th) = (0.2, 0.4, 1.1);
        let [v1, v2] = surface.unit_vector(x, y, th);
        let rot = [v2, -v1];
        let dphi = C64::i() * (C64::from(1.0 + y) * rot[0] + C64::from(x) * rot[1]);
        assert!((c.star_da_phi_at(&surface, x, y, th)[(0, 0)] - dphi).norm() < 1e-14);
    }

    #[test]
    fn curvature_is_skew_and_gauge_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let surface = Surface::parse("0.1*x - 0.05*y^2", "bumpy").unwrap();
        for n in [1, 2, 3] {
            let pair = random::pair(&mut rng, n, 2);
            let q = random::gauge(&mut rng, n, 2);
            let f = pair.curvature(&surface).star_fa;
            assert!(f.skew_hermitian_residual() < 1e-12);
            let g = gauge_transform(&pair, &q).unwrap().curvature(&surface).star_fa;
            for (x, y) in sample_points() {
                let qm = q.eval(x, y);
                let expect = qm.adjoint() * f.eval(x, y) * &qm;
                assert!(sup_diff(&g.eval(x, y), &expect) < 1e-8);
            }
        }
    }

    #[test]
    fn gauge_identity_and_pure_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = random::pair(&mut rng, 2, 1);
        let same = gauge_transform(&pair, &MatrixField::identity(2)).unwrap();
        assert!(pair_distance(&pair, &same) < 1e-15);

        let q = random::gauge(&mut rng, 2, 2);
        let pure = gauge_transform(&AttenuationPair::zero(2), &q).unwrap();
        assert!(pure.phi.is_zero() || pure.phi.eval(0.1, 0.2).norm() < 1e-15);
        let (x, y) = (0.3, -0.4);
        let expect = q.adjoint().eval(x, y) * q.dx().eval(x, y);
        assert!(sup_diff(&pure.a_x.eval(x, y), &expect) < 1e-14);
    }

    #[test]
    fn scalar_gauge_matches_hand_derivative() {
        // Q = exp(i ρ), ρ = (1 - r²)²: Q⁻¹dQ = i dρ, ρ_x = -4x(1 - r²)
        let rho = Expr::disk_defining().powi(2);
        let q = MatrixField::scalar(1, (Expr::i() * rho).exp());
        let base = AttenuationPair::higgs(MatrixField::scalar(1, Expr::i() * Expr::y())).unwrap();
        let out = gauge_transform(&base, &q).unwrap();
        for (x, y) in sample_points() {
            let s = 1.0 - x * x - y * y;
            let ax = C64::new(0.0, -4.0 * x * s);
            let ay = C64::new(0.0, -4.0 * y * s);
            assert!((out.a_x.eval(x, y)[(0, 0)] - ax).norm() < 1e-10);
            assert!((out.a_y.eval(x, y)[(0, 0)] - ay).norm() < 1e-10);
            assert!((out.phi.eval(x, y)[(0, 0)] - C64::new(0.0, y)).norm() < 1e-10);
        }
    }

    #[test]
    fn gauge_is_a_group_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1, 2] {
            let pair = random::pair(&mut rng, n, 1);
            let q1 = random::gauge(&mut rng, n, 1);
            let q2 = random::gauge(&mut rng, n, 1);
            let twice = gauge_transform(&gauge_transform(&pair, &q1).unwrap(), &q2).unwrap();
            let once = gauge_transform(&pair, &q1.mul(&q2)).unwrap();
            assert!(pair_distance(&twice, &once) < 1e-9);
        }
    }

    #[test]
    fn invalid_gauges_are_rejected() {
        let not_unitary = MatrixField::scalar(1, Expr::one() + Expr::disk_defining());
        assert!(gauge_transform(&AttenuationPair::zero(1), &not_unitary).is_err());
        let not_identity = MatrixField::scalar(1, Expr::constant(C64::i()));
        assert!(gauge_transform(&AttenuationPair::zero(1), &not_identity).is_err());
    }

    #[test]
    fn kernel_element_examples() {
        let pair = AttenuationPair::zero(1);
        let k = make_kernel_element(&[Expr::zero()], &pair).unwrap();
        assert!(k.f[0].is_zero() && k.sigma_x[0].is_zero() && k.sigma_y[0].is_zero());

        let p = vec![Expr::disk_defining()];
        let k = make_kernel_element(&p, &pair).unwrap();
        let (x, y) = (0.3, -0.2);
        assert!(k.f[0].eval(x, y).norm() < 1e-15);
        assert!((k.sigma_x[0].eval(x, y) - C64::from(-2.0 * x)).norm() < 1e-15);
        assert!((k.sigma_y[0].eval(x, y) - C64::from(-2.0 * y)).norm() < 1e-15);

        // Φ = i, A = i x dy: F = i p, σ = (-2x) dx + (-2y + i x p) dy
        let pair = AttenuationPair::new(
            MatrixField::zero(1),
            MatrixField::scalar(1, Expr::i() * Expr::x()),
            MatrixField::scalar(1, Expr::i()),
        )
        .unwrap();
        let k = make_kernel_element(&p, &pair).unwrap();
        for (x, y) in sample_points() {
            let pv = 1.0 - x * x - y * y;
            assert!((k.f[0].eval(x, y) - C64::new(0.0, pv)).norm() < 1e-14);
            assert!((k.sigma_x[0].eval(x, y) - C64::from(-2.0 * x)).norm() < 1e-14);
            assert!((k.sigma_y[0].eval(x, y) - C64::new(-2.0 * y, x * pv)).norm() < 1e-14);
        }

        let err = make_kernel_element(&[Expr::x()], &AttenuationPair::zero(1)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn tensor_sm_function_examples() {
        let flat = Surface::flat();
        let c = tensor_to_sm_function(&flat, &SymmetricTensor::scalar(Expr::real(2.5)));
        assert!((c.eval(0.1, 0.2, 0.7)[0] - C64::from(2.5)).norm() < 1e-15);

        let dx = SymmetricTensor::new(vec![Expr::one(), Expr::zero()]).unwrap();
        let f = tensor_to_sm_function(&flat, &dx);
        for th in [0.0, 0.4, 2.0] {
            assert!((f.eval(0.1, -0.3, th)[0] - C64::from(th.cos())).norm() < 1e-15);
        }

        let dxdx = SymmetricTensor::new(vec![Expr::one(), Expr::zero(), Expr::zero()]).unwrap();
        let f = tensor_to_sm_function(&flat, &dxdx);
        let support: Vec<i32> = f.modes().filter(|(_, c)| !c[0].is_zero()).map(|(k, _)| k).collect();
        assert_eq!(support, vec![-2, 0, 2]);
        assert!((f.coeff(0).unwrap()[0].eval(0.0, 0.0) - C64::from(0.5)).norm() < 1e-15);
        assert!((f.coeff(2).unwrap()[0].eval(0.0, 0.0) - C64::from(0.25)).norm() < 1e-15);
    }

    #[test]
    fn tensor_sm_function_matches_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let surface = Surface::parse("0.2*x*y - 0.1*y", "bumpy").unwrap();
        for m in 0..=4 {
            let t = SymmetricTensor::new((0..=m).map(|_| random::poly(&mut rng, 2)).collect()).unwrap();
            let f = tensor_to_sm_function(&surface, &t);
            assert!(f.degree() <= m as i32);
            for (x, y) in sample_points() {
                for th in [0.3, 1.9, -2.2] {
                    let v = surface.unit_vector(x, y, th);
                    assert!((f.eval(x, y, th)[0] - t.contract(x, y, v)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn inner_derivative_examples() {
        let flat = Surface::flat();
        let d = symmetric_inner_derivative(&flat, &SymmetricTensor::scalar(Expr::real(3.0)));
        assert!(d.components().iter().all(|c| c.eval(0.2, 0.1).norm() == 0.0));
        let d = symmetric_inner_derivative(&flat, &SymmetricTensor::scalar(Expr::x()));
        assert_eq!(d.order(), 1);
        assert!((d.components()[0].eval(0.2, 0.1) - C64::from(1.0)).norm() < 1e-15);
        assert!(d.components()[1].eval(0.2, 0.1).norm() < 1e-15);

        // h = x dy flat: ∇h = dx ⊗ dy, d^s h = (dx dy + dy dx)/2
        let h = SymmetricTensor::new(vec![Expr::zero(), Expr::x()]).unwrap();
        let d = symmetric_inner_derivative(&flat, &h);
        let vals: Vec<f64> = d.components().iter().map(|c| c.eval(0.3, 0.7).re).collect();
        assert_eq!(vals, vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn inner_derivative_is_geodesic_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let surface = Surface::parse("0.15*x - 0.1*x*y + 0.05*y^2", "bumpy").unwrap();
        for m in 0..=3 {
            let h = SymmetricTensor::new((0..=m).map(|_| random::poly(&mut rng, 2)).collect()).unwrap();
            let lhs = tensor_to_sm_function(&surface, &symmetric_inner_derivative(&surface, &h));
            let rhs = tensor_to_sm_function(&surface, &h).apply_x(&surface);
            for (x, y) in sample_points() {
                for th in [0.1, 1.3, -2.7] {
                    assert!((lhs.eval(x, y, th)[0] - rhs.eval(x, y, th)[0]).norm() < 1e-9);
                }
            }
        }
    }
}
