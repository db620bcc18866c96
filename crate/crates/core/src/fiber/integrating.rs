//! Fiberwise holomorphic integrating factors: `ω` with `(X + λV)ω = -𝒜`
//! for a scalar function-plus-1-form `𝒜`, found by least squares over the
//! modes `0..=K` (or `-K..=0`) on disk nodes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::expr::{Expr, C64};
use crate::fields::{AttenuationPair, MatrixField};
use crate::flow::{riccati_scalings, riccati_value_at, PhasePoint};
use crate::geometry::MagneticSystem;
use crate::sm::FiberPoly;

use super::{FiberContext, FiberGrid, GridSpec, Support};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub k_max: usize,
    /// Modes `0..=k_max` when true, `-k_max..=0` otherwise.
    pub holomorphic: bool,
    /// Relative tolerance on the normal-equation residual.
    pub tolerance: f64,
    /// Defaults to ten times the number of unknowns.
    pub max_iterations: Option<usize>,
}

impl SolverOptions {
    pub fn new(k_max: usize) -> Self {
        SolverOptions {
            k_max,
            holomorphic: true,
            tolerance: 1e-10,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntegratingFactor {
    pub modes: Vec<i32>,
    /// `coeffs[m·modes.len() + s]` is mode `modes[s]` at disk node `m`.
    pub coeffs: Vec<C64>,
    /// `‖(X + λV)ω + 𝒜‖ / ‖𝒜‖` in the weighted `L²` norm on resolved disk
    /// nodes.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl IntegratingFactor {
    /// Samples `ω` on the fiber grid of `ctx` (disk nodes only).
    pub fn to_grid(&self, ctx: &FiberContext) -> Result<FiberGrid> {
        let kmax = self.modes.iter().map(|k| k.abs()).max().unwrap_or(0) as usize;
        if 2 * kmax >= ctx.nt {
            return Err(Error::Validation(format!(
                "ntheta = {} cannot resolve modes up to {kmax}",
                ctx.nt
            )));
        }
        let mut g = FiberGrid::zeros(ctx.nodes(), 1, ctx.nt, Support::Disk);
        let ns = self.modes.len();
        for (m, &node) in ctx.lattice.mask_nodes.iter().enumerate() {
            for j in 0..ctx.nt {
                let th = ctx.theta(j);
                g.values[node * ctx.nt + j] = self
                    .modes
                    .iter()
                    .enumerate()
                    .map(|(s, &k)| self.coeffs[m * ns + s] * C64::from_polar(1.0, k as f64 * th))
                    .sum();
            }
        }
        Ok(g)
    }

    /// Weighted `L²` norm of each mode layer.
    pub fn mode_norms(&self, ctx: &FiberContext) -> Vec<(i32, f64)> {
        let ns = self.modes.len();
        let (_, weights) = ctx.lattice.quadrature(Support::Disk);
        self.modes
            .iter()
            .enumerate()
            .map(|(s, &k)| {
                let e: f64 = ctx
                    .lattice
                    .mask_nodes
                    .iter()
                    .enumerate()
                    .map(|(m, &node)| self.coeffs[m * ns + s].norm_sqr() * weights[node] * ctx.e2phi[node])
                    .sum();
                (k, (2.0 * std::f64::consts::PI * e).sqrt())
            })
            .collect()
    }
}

/// Rows of a sparse real matrix over disk nodes.
type Sparse = Vec<Vec<(usize, f64)>>;

fn transpose(a: &Sparse, cols: usize) -> Sparse {
    let mut t = vec![Vec::new(); cols];
    for (r, row) in a.iter().enumerate() {
        for &(c, w) in row {
            t[c].push((r, w));
        }
    }
    t
}

struct Operator {
    modes: Vec<i32>,
    dx: Sparse,
    dy: Sparse,
    dxt: Sparse,
    dyt: Sparse,
    /// `e^{-φ}/2`, `φ_x`, `φ_y`, `λ`, `sqrt(weight)` per disk node.
    half_emphi: Vec<f64>,
    phix: Vec<f64>,
    phiy: Vec<f64>,
    lambda: Vec<f64>,
    sqrt_w: Vec<f64>,
}

impl Operator {
    fn new(ctx: &FiberContext, modes: Vec<i32>) -> Self {
        let lat = &ctx.lattice;
        let local: HashMap<usize, usize> = lat.mask_nodes.iter().enumerate().map(|(m, &n)| (n, m)).collect();
        let sparse = |axis: usize| -> Sparse {
            lat.mask_nodes
                .iter()
                .map(|&node| {
                    let st = lat.disk[axis][node];
                    (0..st.len)
                        .filter(|&q| st.w[q] != 0.0)
                        .map(|q| (local[&(st.base + q * st.stride)], st.w[q]))
                        .collect()
                })
                .collect()
        };
        let dx = sparse(0);
        let dy = sparse(1);
        let m = lat.mask_nodes.len();
        let (_, weights) = lat.quadrature(Support::Disk);
        let pick = |v: &[f64]| lat.mask_nodes.iter().map(|&n| v[n]).collect::<Vec<f64>>();
        Operator {
            dxt: transpose(&dx, m),
            dyt: transpose(&dy, m),
            dx,
            dy,
            modes,
            half_emphi: pick(&ctx.emphi).into_iter().map(|e| e / 2.0).collect(),
            phix: pick(&ctx.phix),
            phiy: pick(&ctx.phiy),
            lambda: pick(&ctx.lambda),
            sqrt_w: lat
                .mask_nodes
                .iter()
                .map(|&n| {
                    if lat.resolved[n] {
                        (weights[n] * ctx.e2phi[n] * 2.0 * std::f64::consts::PI).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    fn nodes(&self) -> usize {
        self.sqrt_w.len()
    }

    fn ns(&self) -> usize {
        self.modes.len()
    }

    /// Output layer `o` holds mode `modes[0] - 1 + o`.
    fn no(&self) -> usize {
        self.modes.len() + 2
    }

    fn spmv(a: &Sparse, x: &[C64], stride: usize, s: usize, out: &mut [C64]) {
        for (r, row) in a.iter().enumerate() {
            out[r] = row.iter().map(|&(c, w)| x[c * stride + s] * w).sum();
        }
    }

    /// Weighted `(X + λV)` from the mode set to the output layers.
    fn apply(&self, x: &[C64]) -> Vec<C64> {
        let (m, ns, no) = (self.nodes(), self.ns(), self.no());
        let mut out = vec![C64::default(); m * no];
        let mut ddx = vec![C64::default(); m];
        let mut ddy = vec![C64::default(); m];
        let i = C64::i();
        for (s, &k) in self.modes.iter().enumerate() {
            Self::spmv(&self.dx, x, ns, s, &mut ddx);
            Self::spmv(&self.dy, x, ns, s, &mut ddy);
            let o = s + 1;
            let kf = k as f64;
            for r in 0..m {
                let xv = x[r * ns + s];
                let e = self.half_emphi[r];
                let g = C64::new(self.phix[r], -self.phiy[r]);
                out[r * no + o + 1] += e * (ddx[r] - i * ddy[r] - g * kf * xv);
                out[r * no + o - 1] += e * (ddx[r] + i * ddy[r] + g.conj() * kf * xv);
                out[r * no + o] += i * self.lambda[r] * kf * xv;
            }
        }
        for r in 0..m {
            for o in 0..no {
                out[r * no + o] *= self.sqrt_w[r];
            }
        }
        out
    }

    fn apply_adjoint(&self, y: &[C64]) -> Vec<C64> {
        let (m, ns, no) = (self.nodes(), self.ns(), self.no());
        let mut out = vec![C64::default(); m * ns];
        let mut up = vec![C64::default(); m];
        let mut down = vec![C64::default(); m];
        let mut t1 = vec![C64::default(); m];
        let mut t2 = vec![C64::default(); m];
        let mut t3 = vec![C64::default(); m];
        let mut t4 = vec![C64::default(); m];
        let i = C64::i();
        for (s, &k) in self.modes.iter().enumerate() {
            let o = s + 1;
            for r in 0..m {
                let w = self.sqrt_w[r] * self.half_emphi[r];
                up[r] = y[r * no + o + 1] * w;
                down[r] = y[r * no + o - 1] * w;
            }
            Self::spmv(&self.dxt, &up, 1, 0, &mut t1);
            Self::spmv(&self.dyt, &up, 1, 0, &mut t2);
            Self::spmv(&self.dxt, &down, 1, 0, &mut t3);
            Self::spmv(&self.dyt, &down, 1, 0, &mut t4);
            let kf = k as f64;
            for r in 0..m {
                let g = C64::new(self.phix[r], -self.phiy[r]);
                out[r * ns + s] = t1[r] + i * t2[r] - g.conj() * kf * up[r] + t3[r] - i * t4[r]
                    + g * kf * down[r]
                    - i * self.lambda[r] * kf * y[r * no + o] * self.sqrt_w[r];
            }
        }
        out
    }

    /// Column norms of the weighted operator.
    fn column_norms(&self) -> Vec<f64> {
        let (m, ns) = (self.nodes(), self.ns());
        let mut out = vec![0.0; m * ns];
        for c in 0..m {
            let mut rows: Vec<(usize, f64, f64)> = Vec::new();
            for &(r, w) in &self.dxt[c] {
                rows.push((r, w, 0.0));
            }
            for &(r, w) in &self.dyt[c] {
                match rows.iter_mut().find(|e| e.0 == r) {
                    Some(e) => e.2 = w,
                    None => rows.push((r, 0.0, w)),
                }
            }
            if !rows.iter().any(|e| e.0 == c) {
                rows.push((c, 0.0, 0.0));
            }
            for (s, &k) in self.modes.iter().enumerate() {
                let kf = k as f64;
                let mut acc = (self.sqrt_w[c] * self.lambda[c] * kf).powi(2);
                for &(r, wx, wy) in &rows {
                    let g = C64::new(self.phix[r], -self.phiy[r]);
                    let diag = if r == c { kf } else { 0.0 };
                    let scale = self.sqrt_w[r] * self.half_emphi[r];
                    let upv = C64::new(wx, -wy) - g * diag;
                    let downv = C64::new(wx, wy) + g.conj() * diag;
                    acc += scale * scale * (upv.norm_sqr() + downv.norm_sqr());
                }
                out[c * ns + s] = acc.sqrt();
            }
        }
        out
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Solves `(X + λV)ω = -𝒜` for `𝒜 = A(v) + Φ` given by a rank-one pair,
/// on the lattice and geometry of `ctx`.
pub fn solve_integrating_factor(
    ctx: &FiberContext,
    forcing: &AttenuationPair,
    opts: SolverOptions,
) -> Result<IntegratingFactor> {
    solve_from(ctx, forcing, opts, None)
}

/// Solves for each `K` in increasing order, starting every solve from the
/// previous solution. CGLS never increases the residual, so the residuals
/// are nonincreasing in `K`.
pub fn solve_integrating_factor_sequence(
    ctx: &FiberContext,
    forcing: &AttenuationPair,
    k_values: &[usize],
    opts: SolverOptions,
) -> Result<Vec<IntegratingFactor>> {
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    let mut out: Vec<IntegratingFactor> = Vec::with_capacity(ks.len());
    for k in ks {
        let next = solve_from(ctx, forcing, SolverOptions { k_max: k, ..opts }, out.last())?;
        out.push(next);
    }
    Ok(out)
}

fn solve_from(
    ctx: &FiberContext,
    forcing: &AttenuationPair,
    opts: SolverOptions,
    initial: Option<&IntegratingFactor>,
) -> Result<IntegratingFactor> {
    if forcing.rank() != 1 {
        return Err(Error::Validation(format!(
            "integrating factors need a scalar attenuation, got rank {}",
            forcing.rank()
        )));
    }
    let k = opts.k_max as i32;
    let modes: Vec<i32> = if opts.holomorphic { (0..=k).collect() } else { (-k..=0).collect() };
    let op = Operator::new(ctx, modes);
    let (m, ns, no) = (op.nodes(), op.ns(), op.no());

    // right-hand side: minus the weighted modes of 𝒜
    let mut b = vec![C64::default(); m * no];
    let lat = &ctx.lattice;
    for (r, &node) in lat.mask_nodes.iter().enumerate() {
        let (x, y) = lat.coords(node);
        let ax = forcing.a_x.entry(0, 0).eval(x, y);
        let ay = forcing.a_y.entry(0, 0).eval(x, y);
        let phi = forcing.phi.entry(0, 0).eval(x, y);
        let e = op.half_emphi[r];
        for (mode, val) in [(-1, (ax + C64::i() * ay) * e), (0, phi), (1, (ax - C64::i() * ay) * e)] {
            let o = (mode - op.modes[0] + 1) as usize;
            b[r * no + o] = -val * op.sqrt_w[r];
        }
    }
    let bnorm = norm(&b);
    if bnorm == 0.0 {
        return Ok(IntegratingFactor {
            coeffs: vec![C64::default(); m * ns],
            modes: op.modes,
            residual: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let precond: Vec<f64> = op
        .column_norms()
        .into_iter()
        .map(|c| if c > 0.0 { 1.0 / c } else { 1.0 })
        .collect();
    let scaled = |z: &[C64]| z.iter().zip(&precond).map(|(v, p)| v * *p).collect::<Vec<C64>>();

    // CGLS on min ‖L D z - b‖, ω = D z
    let max_iter = opts.max_iterations.unwrap_or(10 * m * ns);
    let mut z = vec![C64::default(); m * ns];
    if let Some(init) = initial {
        let ins = init.modes.len();
        if init.coeffs.len() != m * ins {
            return Err(Error::Validation("initial guess lives on a different grid".into()));
        }
        for (si, k) in init.modes.iter().enumerate() {
            if let Some(s) = op.modes.iter().position(|q| q == k) {
                for node in 0..m {
                    z[node * ns + s] = init.coeffs[node * ins + si] / precond[node * ns + s];
                }
            }
        }
    }
    let lz = op.apply(&scaled(&z));
    let mut r: Vec<C64> = b.iter().zip(&lz).map(|(bi, li)| bi - li).collect();
    let mut s = scaled(&op.apply_adjoint(&r));
    let mut p = s.clone();
    let mut gamma = dot(&s, &s).re;
    let gamma0 = dot(&scaled(&op.apply_adjoint(&b)), &scaled(&op.apply_adjoint(&b))).re;
    let mut iterations = 0;
    let mut converged = gamma <= opts.tolerance.powi(2) * gamma0;
    while !converged && iterations < max_iter {
        let q = op.apply(&scaled(&p));
        let qq = dot(&q, &q).re;
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        z.iter_mut().zip(&p).for_each(|(zi, pi)| *zi += pi * alpha);
        r.iter_mut().zip(&q).for_each(|(ri, qi)| *ri -= qi * alpha);
        s = scaled(&op.apply_adjoint(&r));
        let gnew = dot(&s, &s).re;
        iterations += 1;
        if gnew.sqrt() <= opts.tolerance * gamma0.sqrt() {
            converged = true;
            break;
        }
        let beta = gnew / gamma;
        gamma = gnew;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + *pi * beta);
    }
    let coeffs = scaled(&z);
    let lw = op.apply(&coeffs);
    let res: Vec<C64> = lw.iter().zip(&b).map(|(a, c)| a - c).collect();
    Ok(IntegratingFactor {
        residual: norm(&res) / bnorm,
        modes: op.modes,
        coeffs,
        iterations,
        converged,
    })
}

/// Scalar pair `A = i·(½(x dy - y dx))`, whose curvature is `i dV` on a
/// flat disk.
pub fn area_form_potential() -> AttenuationPair {
    let half = Expr::real(0.5);
    AttenuationPair::new(
        MatrixField::scalar(1, Expr::i() * -(half.clone() * Expr::y())),
        MatrixField::scalar(1, Expr::i() * (half * Expr::x())),
        MatrixField::zero(1),
    )
    .expect("purely imaginary scalar fields are skew-Hermitian")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftReport {
    pub s: f64,
    /// `‖P_s(e^{sω}u) + e^{sω}f‖ / ‖e^{sω}f‖` where `Pu = -f`, over
    /// resolved disk nodes.
    pub residual: f64,
}

/// Checks that `u_s = e^{sω}u` solves the transport equation for the
/// shifted connection `A + isφ̃` with source `e^{sω}f`, where `ω` is an
/// integrating factor for `iφ̃`. Flat metrics only.
pub fn shift_consistency(
    system: &MagneticSystem,
    pair: &AttenuationPair,
    u: &FiberPoly,
    shifts: &[f64],
    spec: GridSpec,
    opts: SolverOptions,
) -> Result<(IntegratingFactor, Vec<ShiftReport>)> {
    if !system.surface.conformal_factor().is_zero() {
        return Err(Error::Validation("the shift test needs a flat metric".into()));
    }
    let n = pair.rank();
    let ctx = FiberContext::new(system, pair, spec);
    let potential = area_form_potential();
    let omega_ctx = FiberContext::new(system, &AttenuationPair::zero(1), spec);
    let omega = solve_integrating_factor(&omega_ctx, &potential, opts)?;
    let og = omega.to_grid(&omega_ctx)?;
    let ug = ctx.sample(u, Support::Full);
    let f = ctx.apply_p(&ug).scale(C64::from(-1.0));
    let mut reports = Vec::new();
    for &s in shifts {
        let shift = MatrixField::identity(n);
        let a = &potential.a_x.entry(0, 0).clone();
        let b = &potential.a_y.entry(0, 0).clone();
        let shifted = AttenuationPair::new(
            pair.a_x.add(&shift.scale(&(a * Expr::real(s)))),
            pair.a_y.add(&shift.scale(&(b * Expr::real(s)))),
            pair.phi.clone(),
        )?;
        let cs = FiberContext::new(system, &shifted, spec);
        let mut us = cs.zeros(Support::Disk);
        let mut fs = cs.zeros(Support::Disk);
        for &node in &cs.lattice.mask_nodes {
            for j in 0..cs.nt {
                let e = (og.values[node * cs.nt + j] * s).exp();
                for c in 0..n {
                    let idx = (node * n + c) * cs.nt + j;
                    us.values[idx] = ug.values[idx] * e;
                    fs.values[idx] = f.values[idx] * e;
                }
            }
        }
        let r = cs.norm_sq_resolved(&cs.apply_p(&us).add(&fs)).sqrt();
        let denom = cs.norm_sq_resolved(&fs).sqrt();
        reports.push(ShiftReport {
            s,
            residual: if denom == 0.0 { r } else { r / denom },
        });
    }
    Ok((omega, reports))
}

/// Samples the Riccati solution `r` with a single scaling `c` at every disk
/// node and fiber angle of `ctx` (zero off the disk), trying the scalings
/// `2^0, …, 2^20` in turn.
pub fn riccati_samples(ctx: &FiberContext, system: &MagneticSystem, dt: f64) -> Result<(f64, Vec<f64>)> {
    let points: Vec<(usize, PhasePoint)> = ctx
        .lattice
        .mask_nodes
        .iter()
        .flat_map(|&node| {
            let (x, y) = ctx.lattice.coords(node);
            (0..ctx.nt).map(move |j| (node * ctx.nt + j, (x, y, j)))
        })
        .map(|(idx, (x, y, j))| (idx, PhasePoint::new(x, y, ctx.theta(j))))
        .collect();
    'scalings: for c in riccati_scalings() {
        let mut out = vec![0.0; ctx.nodes() * ctx.nt];
        for &(idx, p) in &points {
            match riccati_value_at(system, p, c, dt)? {
                Some(v) => out[idx] = v,
                None => continue 'scalings,
            }
        }
        return Ok((c, out));
    }
    Err(Error::ConjugatePoint("no global Riccati scaling keeps z positive".into()))
}
