//! Functions on the unit tangent bundle.
//!
//! [`FiberPoly`] is a finite fiber Fourier series `Σ_k c_k(x, y) e^{ikθ}`
//! with symbolic `ℂⁿ` coefficients. X, X⊥, V and the attenuation act on it
//! exactly, so it is used to manufacture integrands such as `(X + λV)u` and
//! as an oracle for the discretized operators.

use std::collections::BTreeMap;

use crate::expr::{Expr, C64};
use crate::fields::{AttenuationPair, MatrixField};
use crate::geometry::{MagneticSystem, Surface};

/// `ℂⁿ`-valued function on `SM` in `(x, y, θ)` coordinates.
pub trait SmFunction: Sync {
    fn rank(&self) -> usize;

    /// Writes the value at `(x, y, θ)` into `out` (length `rank`).
    fn eval_into(&self, x: f64, y: f64, theta: f64, out: &mut [C64]);

    fn eval(&self, x: f64, y: f64, theta: f64) -> Vec<C64> {
        let mut out = vec![C64::default(); self.rank()];
        self.eval_into(x, y, theta, &mut out);
        out
    }
}

/// Adapter for closures.
pub struct FnSm<F> {
    n: usize,
    f: F,
}

impl<F> FnSm<F>
where
    F: Fn(f64, f64, f64, &mut [C64]) + Sync,
{
    pub fn new(n: usize, f: F) -> Self {
        FnSm { n, f }
    }
}

impl<F> SmFunction for FnSm<F>
where
    F: Fn(f64, f64, f64, &mut [C64]) + Sync,
{
    fn rank(&self) -> usize {
        self.n
    }

    fn eval_into(&self, x: f64, y: f64, theta: f64, out: &mut [C64]) {
        (self.f)(x, y, theta, out)
    }
}

#[derive(Debug, Clone)]
pub struct FiberPoly {
    n: usize,
    modes: BTreeMap<i32, Vec<Expr>>,
}

impl FiberPoly {
    pub fn zero(n: usize) -> Self {
        FiberPoly {
            n,
            modes: BTreeMap::new(),
        }
    }

    pub fn mode(k: i32, coeffs: Vec<Expr>) -> Self {
        let mut p = Self::zero(coeffs.len());
        p.add_mode(k, &coeffs);
        p
    }

    pub fn scalar(k: i32, c: Expr) -> Self {
        Self::mode(k, vec![c])
    }

    pub fn rank(&self) -> usize {
        self.n
    }

    pub fn add_mode(&mut self, k: i32, coeffs: &[Expr]) {
        assert_eq!(coeffs.len(), self.n);
        if coeffs.iter().all(Expr::is_zero) {
            return;
        }
        match self.modes.get_mut(&k) {
            Some(c) => {
                for (a, b) in c.iter_mut().zip(coeffs) {
                    *a = &*a + b;
                }
            }
            None => {
                self.modes.insert(k, coeffs.to_vec());
            }
        }
    }

    pub fn modes(&self) -> impl Iterator<Item = (i32, &[Expr])> {
        self.modes.iter().map(|(k, c)| (*k, c.as_slice()))
    }

    pub fn coeff(&self, k: i32) -> Option<&[Expr]> {
        self.modes.get(&k).map(Vec::as_slice)
    }

    /// Largest `|k|` with a structurally nonzero coefficient (−1 if empty).
    pub fn degree(&self) -> i32 {
        self.modes
            .iter()
            .filter(|(_, c)| !c.iter().all(Expr::is_zero))
            .map(|(k, _)| k.abs())
            .max()
            .unwrap_or(-1)
    }

    pub fn map_coeffs(&self, f: impl Fn(i32, &[Expr]) -> Vec<Expr>) -> Self {
        let mut out = Self::zero(self.n);
        for (k, c) in &self.modes {
            out.add_mode(*k, &f(*k, c));
        }
        out
    }

    pub fn add(&self, other: &FiberPoly) -> Self {
        assert_eq!(self.n, other.n);
        let mut out = self.clone();
        for (k, c) in other.modes() {
            out.add_mode(k, c);
        }
        out
    }

    pub fn sub(&self, other: &FiberPoly) -> Self {
        self.add(&other.scale(&Expr::real(-1.0)))
    }

    pub fn scale(&self, e: &Expr) -> Self {
        self.map_coeffs(|_, c| c.iter().map(|a| e * a).collect())
    }

    /// Multiplies by `e^{i s θ}`.
    pub fn shift(&self, s: i32) -> Self {
        FiberPoly {
            n: self.n,
            modes: self.modes.iter().map(|(k, c)| (k + s, c.clone())).collect(),
        }
    }

    pub fn mul_cos(&self) -> Self {
        let h = Expr::real(0.5);
        self.shift(1).add(&self.shift(-1)).scale(&h)
    }

    pub fn mul_sin(&self) -> Self {
        let h = Expr::constant(C64::new(0.0, -0.5));
        self.shift(1).sub(&self.shift(-1)).scale(&h)
    }

    /// Left multiplication of every coefficient by a matrix field.
    pub fn left_mul(&self, m: &MatrixField) -> Self {
        self.map_coeffs(|_, c| m.apply(c))
    }

    pub fn apply_v(&self) -> Self {
        self.map_coeffs(|k, c| {
            let f = Expr::constant(C64::new(0.0, k as f64));
            c.iter().map(|a| &f * a).collect()
        })
    }

    /// The two halves `η₊u`, `η₋u` of `X u`, raising and lowering the mode.
    fn eta(&self, surface: &Surface) -> (Self, Self) {
        let half = (-surface.conformal_factor()).exp() * Expr::real(0.5);
        let (px, py) = surface.grad_phi_exprs();
        let i = Expr::i();
        let dm = px - &i * py;
        let dp = px + &i * py;
        let mut up = Self::zero(self.n);
        let mut down = Self::zero(self.n);
        for (k, c) in &self.modes {
            let kf = Expr::real(*k as f64);
            let raise: Vec<Expr> = c
                .iter()
                .map(|a| &half * (a.dx() - &i * a.dy() - &kf * a * &dm))
                .collect();
            let lower: Vec<Expr> = c
                .iter()
                .map(|a| &half * (a.dx() + &i * a.dy() + &kf * a * &dp))
                .collect();
            up.add_mode(k + 1, &raise);
            down.add_mode(k - 1, &lower);
        }
        (up, down)
    }

    pub fn apply_x(&self, surface: &Surface) -> Self {
        let (up, down) = self.eta(surface);
        up.add(&down)
    }

    pub fn apply_xperp(&self, surface: &Surface) -> Self {
        let (up, down) = self.eta(surface);
        up.scale(&-Expr::i()).add(&down.scale(&Expr::i()))
    }

    /// `(X + λV) u`.
    pub fn apply_transport(&self, system: &MagneticSystem) -> Self {
        self.apply_x(&system.surface)
            .add(&self.apply_v().scale(system.lambda_expr()))
    }

    /// `A(v) u` with `A(v) = e^{-φ}/2 [(A_x - iA_y)e^{iθ} + (A_x + iA_y)e^{-iθ}]`.
    pub fn apply_connection(&self, surface: &Surface, pair: &AttenuationPair) -> Self {
        let half = (-surface.conformal_factor()).exp() * Expr::real(0.5);
        let i = Expr::i();
        let plus = pair.a_x.sub(&pair.a_y.scale(&i)).scale(&half);
        let minus = pair.a_x.add(&pair.a_y.scale(&i)).scale(&half);
        self.left_mul(&plus).shift(1).add(&self.left_mul(&minus).shift(-1))
    }

    /// `(X + λV + A + Φ) u`.
    pub fn apply_attenuated(&self, system: &MagneticSystem, pair: &AttenuationPair) -> Self {
        self.apply_transport(system)
            .add(&self.apply_connection(&system.surface, pair))
            .add(&self.left_mul(&pair.phi))
    }

    /// Coefficient values at `(x, y)`, as `(k, c_k(x, y))`.
    pub fn eval_coeffs(&self, x: f64, y: f64) -> Vec<(i32, Vec<C64>)> {
        self.modes
            .iter()
            .map(|(k, c)| (*k, c.iter().map(|e| e.eval(x, y)).collect()))
            .collect()
    }
}

impl SmFunction for FiberPoly {
    fn rank(&self) -> usize {
        self.n
    }

    fn eval_into(&self, x: f64, y: f64, theta: f64, out: &mut [C64]) {
        out.iter_mut().for_each(|o| *o = C64::default());
        for (k, c) in &self.modes {
            let e = C64::from_polar(1.0, *k as f64 * theta);
            for (o, a) in out.iter_mut().zip(c) {
                *o += a.eval(x, y) * e;
            }
        }
    }
}
