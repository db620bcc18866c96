//! Conformal disk geometry and the magnetic systems built on top of it.
//!
//! A surface is the closed unit disk with metric `e^{2φ}(dx² + dy²)`. The
//! magnetic field enters only through the intensity `λ` of `Ω = λ dV_g`; the
//! Lorentz map is `Y(v) = λ · iv` where `i` is the +90° rotation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Slack used when deciding whether a point lies in the closed disk.
pub const DISK_TOLERANCE: f64 = 1e-12;

pub fn in_closed_disk(x: f64, y: f64) -> bool {
    x * x + y * y <= 1.0 + DISK_TOLERANCE
}

/// Rotation of a coordinate vector by +90°. Conformal metrics preserve
/// angles, so this is also the metric rotation.
pub fn rotate(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

#[derive(Clone, Debug)]
pub struct Surface {
    phi: Expr,
    phi_x: Expr,
    phi_y: Expr,
    phi_xx: Expr,
    phi_yy: Expr,
    phi_xy: Expr,
    pub description: String,
}

impl Surface {
    pub fn new(conformal_factor: Expr, description: impl Into<String>) -> Result<Self> {
        if !conformal_factor.is_real() {
            return Err(Error::Validation("conformal factor must be real-valued".into()));
        }
        let phi_x = conformal_factor.dx();
        let phi_y = conformal_factor.dy();
        let surface = Surface {
            phi_xx: phi_x.dx(),
            phi_yy: phi_y.dy(),
            phi_xy: phi_x.dy(),
            phi: conformal_factor,
            phi_x,
            phi_y,
            description: description.into(),
        };
        // e^{2φ} must be positive and finite on the closed disk
        for (x, y) in disk_probe_points(24) {
            let p = surface.phi(x, y);
            if !p.is_finite() || !(2.0 * p).exp().is_normal() {
                return Err(Error::Validation(format!(
                    "conformal factor is not finite at ({x:.3}, {y:.3})"
                )));
            }
        }
        Ok(surface)
    }

    pub fn flat() -> Self {
        Surface::new(Expr::zero(), "flat disk").expect("flat metric is valid")
    }

    /// Spherical cap of curvature 1: `φ = log(2a / (1 + a²r²))`. The unit
    /// disk covers a cap of angular radius `2·atan(a)`; `a = 1` is the
    /// hemisphere.
    pub fn round_cap(a: f64) -> Self {
        let r2 = Expr::x().powi(2) + Expr::y().powi(2);
        let phi = (Expr::real(2.0 * a) / (Expr::one() + Expr::real(a * a) * r2)).ln();
        Surface::new(phi, format!("round cap a={a}")).expect("round cap is valid")
    }

    pub fn parse(conformal_factor: &str, description: impl Into<String>) -> Result<Self> {
        Surface::new(Expr::parse(conformal_factor)?, description)
    }

    pub fn conformal_factor(&self) -> &Expr {
        &self.phi
    }

    pub fn phi(&self, x: f64, y: f64) -> f64 {
        self.phi.eval_real(x, y)
    }

    pub fn grad_phi(&self, x: f64, y: f64) -> [f64; 2] {
        [self.phi_x.eval_real(x, y), self.phi_y.eval_real(x, y)]
    }

    pub fn hess_phi(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let xy = self.phi_xy.eval_real(x, y);
        [[self.phi_xx.eval_real(x, y), xy], [xy, self.phi_yy.eval_real(x, y)]]
    }

    pub fn grad_phi_exprs(&self) -> (&Expr, &Expr) {
        (&self.phi_x, &self.phi_y)
    }

    /// `K = -e^{-2φ} Δφ` without a domain check.
    pub fn curvature(&self, x: f64, y: f64) -> f64 {
        let lap = self.phi_xx.eval_real(x, y) + self.phi_yy.eval_real(x, y);
        -(-2.0 * self.phi(x, y)).exp() * lap
    }

    /// Symbolic Gaussian curvature.
    pub fn curvature_expr(&self) -> Expr {
        -(Expr::real(-2.0) * &self.phi).exp() * (&self.phi_xx + &self.phi_yy)
    }

    /// `g(u, v)` at `(x, y)`.
    pub fn inner(&self, x: f64, y: f64, u: [f64; 2], v: [f64; 2]) -> f64 {
        (2.0 * self.phi(x, y)).exp() * (u[0] * v[0] + u[1] * v[1])
    }

    /// Unit vector with Euclidean angle `theta`: `e^{-φ}(cos θ, sin θ)`.
    pub fn unit_vector(&self, x: f64, y: f64, theta: f64) -> [f64; 2] {
        let s = (-self.phi(x, y)).exp();
        [s * theta.cos(), s * theta.sin()]
    }
}

/// Gaussian curvature with a domain check.
pub fn curvature_at(surface: &Surface, x: f64, y: f64) -> Result<f64> {
    if !in_closed_disk(x, y) {
        return Err(Error::OutsideDisk { x, y });
    }
    Ok(surface.curvature(x, y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFrame {
    pub point: [f64; 2],
    /// Counterclockwise unit tangent.
    pub tangent: [f64; 2],
    /// Inward unit normal.
    pub normal: [f64; 2],
    /// Geodesic curvature of the boundary circle with respect to the inward
    /// normal; positive for a strictly convex boundary.
    pub second_fundamental_form: f64,
}

pub fn boundary_frame(surface: &Surface, beta: f64) -> BoundaryFrame {
    let (s, c) = beta.sin_cos();
    let (x, y) = (c, s);
    let scale = (-surface.phi(x, y)).exp();
    let [px, py] = surface.grad_phi(x, y);
    let radial = px * c + py * s;
    BoundaryFrame {
        point: [x, y],
        tangent: [-s * scale, c * scale],
        normal: [-c * scale, -s * scale],
        second_fundamental_form: scale * (1.0 + radial),
    }
}

#[derive(Clone, Debug)]
pub struct MagneticSystem {
    pub surface: Surface,
    lambda: Expr,
    lambda_x: Expr,
    lambda_y: Expr,
    /// Cap on flow time; geodesics still inside after this are trapped.
    pub max_flow_time: f64,
    /// Integration step used by the transforms.
    pub dt: f64,
}

impl MagneticSystem {
    pub fn new(surface: Surface, lambda: Expr) -> Result<Self> {
        if !lambda.is_real() {
            return Err(Error::Validation("magnetic intensity must be real-valued".into()));
        }
        let system = MagneticSystem {
            lambda_x: lambda.dx(),
            lambda_y: lambda.dy(),
            lambda,
            surface,
            max_flow_time: 50.0,
            dt: 1e-3,
        };
        for (x, y) in disk_probe_points(24) {
            if !system.lambda(x, y).is_finite() {
                return Err(Error::Validation(format!(
                    "magnetic intensity is not finite at ({x:.3}, {y:.3})"
                )));
            }
        }
        Ok(system)
    }

    /// Flat disk with constant intensity.
    pub fn flat(lambda: f64) -> Self {
        MagneticSystem::new(Surface::flat(), Expr::real(lambda)).expect("constant field is valid")
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_max_flow_time(mut self, t: f64) -> Self {
        self.max_flow_time = t;
        self
    }

    pub fn lambda_expr(&self) -> &Expr {
        &self.lambda
    }

    pub fn lambda(&self, x: f64, y: f64) -> f64 {
        self.lambda.eval_real(x, y)
    }

    pub fn grad_lambda(&self, x: f64, y: f64) -> [f64; 2] {
        [self.lambda_x.eval_real(x, y), self.lambda_y.eval_real(x, y)]
    }

    pub fn grad_lambda_exprs(&self) -> (&Expr, &Expr) {
        (&self.lambda_x, &self.lambda_y)
    }

    /// Lorentz map `Y(v) = λ · iv`.
    pub fn lorentz(&self, x: f64, y: f64, v: [f64; 2]) -> [f64; 2] {
        let l = self.lambda(x, y);
        let r = rotate(v);
        [l * r[0], l * r[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport {
    pub min_margin: f64,
    pub argmin_beta: f64,
    pub pass: bool,
}

/// Samples `Π(x,v) - ⟨Y(v), ν⟩` over unit tangent vectors of the boundary,
/// with `ν` the outward normal.
pub fn check_magnetic_convexity(system: &MagneticSystem, n_samples: usize) -> ConvexityReport {
    let n = n_samples.max(8);
    let mut min_margin = f64::INFINITY;
    let mut argmin_beta = 0.0;
    for j in 0..n {
        let beta = 2.0 * PI * j as f64 / n as f64;
        let frame = boundary_frame(&system.surface, beta);
        let [x, y] = frame.point;
        let outward = [-frame.normal[0], -frame.normal[1]];
        for sign in [1.0, -1.0] {
            let v = [sign * frame.tangent[0], sign * frame.tangent[1]];
            let yv = system.lorentz(x, y, v);
            let margin = frame.second_fundamental_form - system.surface.inner(x, y, yv, outward);
            if margin < min_margin {
                min_margin = margin;
                argmin_beta = beta;
            }
        }
    }
    ConvexityReport {
        min_margin,
        argmin_beta,
        pass: min_margin > 0.0,
    }
}

/// Entry point on the boundary: `beta` locates the point on the unit circle
/// and `mu` is the direction angle measured from the inward normal
/// (counterclockwise positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPoint {
    pub beta: f64,
    pub mu: f64,
}

impl BoundaryPoint {
    pub fn new(beta: f64, mu: f64) -> Self {
        BoundaryPoint { beta, mu }
    }

    /// Membership in the incoming boundary `∂₊(SM)`.
    pub fn is_incoming(&self) -> bool {
        self.mu.abs() <= PI / 2.0
    }

    pub fn position(&self) -> [f64; 2] {
        [self.beta.cos(), self.beta.sin()]
    }

    /// Euclidean angle of the velocity.
    pub fn theta(&self) -> f64 {
        self.beta + PI + self.mu
    }
}

/// Half-width of the excluded band around glancing directions.
pub const GLANCING_MARGIN: f64 = 0.05;

/// Deterministic product fan of incoming boundary points, excluding
/// directions within [`GLANCING_MARGIN`] of the tangent.
pub fn boundary_fan(size: usize) -> Vec<BoundaryPoint> {
    let size = size.max(1);
    let n_beta = (size as f64).sqrt().ceil() as usize;
    let n_mu = size.div_ceil(n_beta);
    let mu_max = PI / 2.0 - GLANCING_MARGIN;
    let mut fan = Vec::with_capacity(size);
    'outer: for a in 0..n_beta {
        let beta = 2.0 * PI * a as f64 / n_beta as f64;
        for b in 0..n_mu {
            if fan.len() == size {
                break 'outer;
            }
            let mu = if n_mu == 1 {
                0.0
            } else {
                -mu_max + 2.0 * mu_max * b as f64 / (n_mu - 1) as f64
            };
            fan.push(BoundaryPoint { beta, mu });
        }
    }
    fan
}

/// Polar sample of the closed disk used by construction-time sanity checks.
pub(crate) fn disk_probe_points(n: usize) -> Vec<(f64, f64)> {
    let mut pts = vec![(0.0, 0.0)];
    for ring in 1..=3 {
        let r = ring as f64 / 3.0;
        for k in 0..n {
            let a = 2.0 * PI * k as f64 / n as f64 + 0.1 * ring as f64;
            pts.push((r * a.cos(), r * a.sin()));
        }
    }
    pts
}
