//! Discretized functions on `SM`: a padded Cartesian grid over `[-1, 1]²`
//! times a uniform fiber grid in `θ`.
//!
//! Spatial derivatives are 4th-order finite differences; the fiber
//! direction is spectral, so `V` and the Hilbert transform are exact on
//! band-limited data. Values are stored fiber-contiguous:
//! `values[(node·n + c)·nt + j]`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::expr::C64;
use crate::fields::AttenuationPair;
use crate::geometry::MagneticSystem;
use crate::numerics::fornberg_weights;
use crate::sm::{FiberPoly, SmFunction};

pub mod integrating;

/// Ghost layers around `[-1, 1]²`, enough for two stacked centered
/// first-derivative stencils at the disk edge.
pub const PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nt: usize) -> Result<Self> {
        if nx < 9 || ny < 9 {
            return Err(Error::Validation(format!("grid {nx}x{ny} is too coarse (need at least 9)")));
        }
        if nt < 4 || !nt.is_power_of_two() {
            return Err(Error::Validation(format!("ntheta = {nt} must be a power of two >= 4")));
        }
        Ok(GridSpec { nx, ny, nt })
    }

    pub fn reference() -> Self {
        GridSpec { nx: 129, ny: 129, nt: 64 }
    }
}

/// Where sampled values are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    /// Samples of a function defined on the whole padded square.
    Full,
    /// Only nodes in the closed disk carry data.
    Disk,
}

#[derive(Debug, Clone, Copy)]
struct Stencil {
    base: usize,
    stride: usize,
    len: usize,
    w: [f64; 5],
}

/// Spatial part of the grid.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub spec: GridSpec,
    pub px: usize,
    pub py: usize,
    pub hx: f64,
    pub hy: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub mask: Vec<bool>,
    pub mask_nodes: Vec<usize>,
    /// `∫_disk ψ_node dx dy` for the bilinear hat `ψ_node`; used when data
    /// is valid on the whole padded square.
    pub area_weights: Vec<f64>,
    /// Area of the part of the disk closest to each disk node; used for
    /// data that only lives on the disk.
    pub disk_weights: Vec<f64>,
    full_quadrature_nodes: Vec<usize>,
    /// Disk nodes whose `x` and `y` runs inside the disk both have at least
    /// three nodes, so that disk-supported derivatives are resolved there.
    pub resolved: Vec<bool>,
    full: [Vec<Stencil>; 2],
    disk: [Vec<Stencil>; 2],
}

fn line_stencils(
    len: usize,
    count: usize,
    stride: usize,
    node_of: impl Fn(usize, usize) -> usize,
    valid: &[bool],
    h: f64,
    out: &mut [Stencil],
) {
    // line index `l`, position `p` along the line
    for l in 0..count {
        let mut p = 0;
        while p < len {
            if !valid[node_of(l, p)] {
                p += 1;
                continue;
            }
            let start = p;
            while p < len && valid[node_of(l, p)] {
                p += 1;
            }
            let run = p - start;
            for q in start..p {
                let width = run.min(5);
                let ws = q.saturating_sub(width / 2).max(start).min(p - width);
                let nodes: Vec<f64> = (0..width).map(|m| (ws + m) as f64).collect();
                let mut w = [0.0; 5];
                if width >= 2 {
                    for (m, v) in fornberg_weights(q as f64, &nodes, 1).into_iter().enumerate() {
                        w[m] = v / h;
                    }
                }
                out[node_of(l, q)] = Stencil {
                    base: node_of(l, ws),
                    stride,
                    len: width,
                    w,
                };
            }
        }
    }
}

impl Lattice {
    pub fn new(spec: GridSpec) -> Self {
        let px = spec.nx + 2 * PAD;
        let py = spec.ny + 2 * PAD;
        let hx = 2.0 / (spec.nx - 1) as f64;
        let hy = 2.0 / (spec.ny - 1) as f64;
        let xs: Vec<f64> = (0..px).map(|i| -1.0 + (i as f64 - PAD as f64) * hx).collect();
        let ys: Vec<f64> = (0..py).map(|j| -1.0 + (j as f64 - PAD as f64) * hy).collect();
        let nodes = px * py;
        let mut mask = vec![false; nodes];
        let mut area_weights = vec![0.0; nodes];
        const SUB: usize = 24;
        for j in 0..py {
            for i in 0..px {
                let (x, y) = (xs[i], ys[j]);
                let node = j * px + i;
                mask[node] = x * x + y * y <= 1.0 + 1e-12;
                let dx = x.abs() - hx;
                let dy = y.abs() - hy;
                let rmin2 = dx.max(0.0).powi(2) + dy.max(0.0).powi(2);
                let rmax2 = (x.abs() + hx).powi(2) + (y.abs() + hy).powi(2);
                area_weights[node] = if rmax2 <= 1.0 {
                    hx * hy
                } else if rmin2 >= 1.0 {
                    0.0
                } else {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for a in 0..SUB {
                        let ox = ((a as f64 + 0.5) / SUB as f64 * 2.0 - 1.0) * hx;
                        for b in 0..SUB {
                            let oy = ((b as f64 + 0.5) / SUB as f64 * 2.0 - 1.0) * hy;
                            let hat = (1.0 - ox.abs() / hx) * (1.0 - oy.abs() / hy);
                            norm += hat;
                            if (x + ox).powi(2) + (y + oy).powi(2) <= 1.0 {
                                acc += hat;
                            }
                        }
                    }
                    hx * hy * acc / norm
                };
            }
        }
        let mask_nodes: Vec<usize> = (0..nodes).filter(|&k| mask[k]).collect();
        let full_quadrature_nodes = (0..nodes).filter(|&k| area_weights[k] > 0.0).collect();
        let mut disk_weights = vec![0.0; nodes];
        for j in 1..py - 1 {
            for i in 1..px - 1 {
                let (x, y) = (xs[i], ys[j]);
                let node = j * px + i;
                let rmin2 = (x.abs() - hx / 2.0).max(0.0).powi(2) + (y.abs() - hy / 2.0).max(0.0).powi(2);
                let rmax2 = (x.abs() + hx / 2.0).powi(2) + (y.abs() + hy / 2.0).powi(2);
                if rmin2 >= 1.0 {
                    continue;
                }
                if rmax2 <= 1.0 && mask[node] {
                    disk_weights[node] += hx * hy;
                    continue;
                }
                let cell = hx * hy / (SUB * SUB) as f64;
                for a in 0..SUB {
                    let qx = x + ((a as f64 + 0.5) / SUB as f64 - 0.5) * hx;
                    for b in 0..SUB {
                        let qy = y + ((b as f64 + 0.5) / SUB as f64 - 0.5) * hy;
                        if qx * qx + qy * qy > 1.0 {
                            continue;
                        }
                        let nearest = (j - 1..=j + 1)
                            .flat_map(|jj| (i - 1..=i + 1).map(move |ii| jj * px + ii))
                            .filter(|&k| mask[k])
                            .min_by(|&k1, &k2| {
                                let d = |k: usize| (xs[k % px] - qx).powi(2) + (ys[k / px] - qy).powi(2);
                                d(k1).total_cmp(&d(k2))
                            });
                        if let Some(k) = nearest {
                            disk_weights[k] += cell;
                        }
                    }
                }
            }
        }
        let all = vec![true; nodes];
        let empty = Stencil {
            base: 0,
            stride: 1,
            len: 0,
            w: [0.0; 5],
        };
        let build = |valid: &[bool]| {
            let mut sx = vec![empty; nodes];
            let mut sy = vec![empty; nodes];
            line_stencils(px, py, 1, |l, p| l * px + p, valid, hx, &mut sx);
            line_stencils(py, px, px, |l, p| p * px + l, valid, hy, &mut sy);
            [sx, sy]
        };
        let full = build(&all);
        let disk = build(&mask);
        let resolved = (0..nodes).map(|k| mask[k] && disk[0][k].len >= 3 && disk[1][k].len >= 3).collect();
        Lattice {
            spec,
            px,
            py,
            hx,
            hy,
            xs,
            ys,
            mask,
            mask_nodes,
            area_weights,
            disk_weights,
            full_quadrature_nodes,
            resolved,
            full,
            disk,
        }
    }

    pub fn nodes(&self) -> usize {
        self.px * self.py
    }

    pub fn coords(&self, node: usize) -> (f64, f64) {
        (self.xs[node % self.px], self.ys[node / self.px])
    }

    /// Quadrature nodes and weights for data of the given support.
    pub fn quadrature(&self, support: Support) -> (&[usize], &[f64]) {
        match support {
            Support::Full => (&self.full_quadrature_nodes, &self.area_weights),
            Support::Disk => (&self.mask_nodes, &self.disk_weights),
        }
    }

    fn valid(&self, support: Support, node: usize) -> bool {
        support == Support::Full || self.mask[node]
    }
}

/// Mode number of FFT bin `j`; the Nyquist bin counts as `-nt/2`.
pub fn mode_of_bin(j: usize, nt: usize) -> i32 {
    if j < nt / 2 {
        j as i32
    } else {
        j as i32 - nt as i32
    }
}

pub fn bin_of_mode(k: i32, nt: usize) -> Option<usize> {
    let half = (nt / 2) as i32;
    if k >= -half && k < half {
        Some(k.rem_euclid(nt as i32) as usize)
    } else {
        None
    }
}

/// `ℂⁿ`-valued samples on the lattice times the fiber grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberGrid {
    pub n: usize,
    pub nt: usize,
    pub support: Support,
    pub values: Vec<C64>,
}

impl FiberGrid {
    pub fn zeros(nodes: usize, n: usize, nt: usize, support: Support) -> Self {
        FiberGrid {
            n,
            nt,
            support,
            values: vec![C64::default(); nodes * n * nt],
        }
    }

    fn like(&self) -> Self {
        FiberGrid {
            values: vec![C64::default(); self.values.len()],
            ..*self
        }
    }

    pub fn block(&self) -> usize {
        self.n * self.nt
    }

    pub fn at(&self, node: usize, c: usize, j: usize) -> C64 {
        self.values[(node * self.n + c) * self.nt + j]
    }

    fn zip_with(&self, other: &FiberGrid, f: impl Fn(C64, C64) -> C64) -> Self {
        assert_eq!(self.values.len(), other.values.len());
        FiberGrid {
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
            support: combine(self.support, other.support),
            ..*self
        }
    }

    pub fn add(&self, other: &FiberGrid) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &FiberGrid) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    /// Zeroes values off the disk and marks the data as disk-supported.
    pub fn restrict_to_disk(&self, lattice: &Lattice) -> Self {
        let b = self.block();
        let mut out = self.clone();
        out.support = Support::Disk;
        for (node, inside) in lattice.mask.iter().enumerate() {
            if !inside {
                out.values[node * b..(node + 1) * b].iter_mut().for_each(|v| *v = C64::default());
            }
        }
        out
    }

    pub fn scale(&self, s: C64) -> Self {
        FiberGrid {
            values: self.values.iter().map(|a| a * s).collect(),
            ..*self
        }
    }
}

fn combine(a: Support, b: Support) -> Support {
    if a == Support::Full && b == Support::Full {
        Support::Full
    } else {
        Support::Disk
    }
}

/// Fiber Fourier coefficients `u_k`, stored like a [`FiberGrid`] with FFT
/// bins in place of angles.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierStack {
    pub n: usize,
    pub nt: usize,
    pub support: Support,
    pub coeffs: Vec<C64>,
}

impl FourierStack {
    /// Coefficient `u_k` at `(node, c)`; zero for unrepresented modes.
    pub fn coeff(&self, node: usize, c: usize, k: i32) -> C64 {
        bin_of_mode(k, self.nt)
            .map(|j| self.coeffs[(node * self.n + c) * self.nt + j])
            .unwrap_or_default()
    }

    /// Multiplies the layer of mode `k` by `g(k)`.
    pub fn map_modes(&self, g: impl Fn(i32) -> C64) -> Self {
        let factors: Vec<C64> = (0..self.nt).map(|j| g(mode_of_bin(j, self.nt))).collect();
        let mut out = self.clone();
        for (idx, v) in out.coeffs.iter_mut().enumerate() {
            *v *= factors[idx % self.nt];
        }
        out
    }

    pub fn hilbert(&self) -> Self {
        self.map_modes(|k| C64::new(0.0, -(k.signum() as f64)))
    }
}

/// Discretization context: lattice, fiber FFTs and the geometric and
/// attenuation coefficients sampled on every node.
pub struct FiberContext {
    pub lattice: Lattice,
    pub n: usize,
    pub nt: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    emphi: Vec<f64>,
    e2phi: Vec<f64>,
    phix: Vec<f64>,
    phiy: Vec<f64>,
    curvature: Vec<f64>,
    lambda: Vec<f64>,
    lambda_x: Vec<f64>,
    lambda_y: Vec<f64>,
    a_x: Vec<C64>,
    a_y: Vec<C64>,
    phi: Vec<C64>,
    star_fa: Vec<C64>,
    daphi_x: Vec<C64>,
    daphi_y: Vec<C64>,
}

fn sample_matrix(lattice: &Lattice, m: &crate::fields::MatrixField) -> Vec<C64> {
    let n = m.rank();
    let mut out = Vec::with_capacity(lattice.nodes() * n * n);
    for node in 0..lattice.nodes() {
        let (x, y) = lattice.coords(node);
        out.extend(m.entries().iter().map(|e| e.eval(x, y)));
    }
    out
}

impl FiberContext {
    pub fn new(system: &MagneticSystem, pair: &AttenuationPair, spec: GridSpec) -> Self {
        let lattice = Lattice::new(spec);
        let nt = spec.nt;
        let n = pair.rank();
        let mut planner = FftPlanner::new();
        let nodes = lattice.nodes();
        let s = &system.surface;
        let coords: Vec<(f64, f64)> = (0..nodes).map(|k| lattice.coords(k)).collect();
        let scalar = |f: &dyn Fn(f64, f64) -> f64| coords.iter().map(|&(x, y)| f(x, y)).collect::<Vec<f64>>();
        let curv = pair.curvature(s);
        FiberContext {
            n,
            nt,
            cos: (0..nt).map(|j| (2.0 * PI * j as f64 / nt as f64).cos()).collect(),
            sin: (0..nt).map(|j| (2.0 * PI * j as f64 / nt as f64).sin()).collect(),
            fwd: planner.plan_fft_forward(nt),
            inv: planner.plan_fft_inverse(nt),
            emphi: scalar(&|x, y| (-s.phi(x, y)).exp()),
            e2phi: scalar(&|x, y| (2.0 * s.phi(x, y)).exp()),
            phix: scalar(&|x, y| s.grad_phi(x, y)[0]),
            phiy: scalar(&|x, y| s.grad_phi(x, y)[1]),
            curvature: scalar(&|x, y| s.curvature(x, y)),
            lambda: scalar(&|x, y| system.lambda(x, y)),
            lambda_x: scalar(&|x, y| system.grad_lambda(x, y)[0]),
            lambda_y: scalar(&|x, y| system.grad_lambda(x, y)[1]),
            a_x: sample_matrix(&lattice, &pair.a_x),
            a_y: sample_matrix(&lattice, &pair.a_y),
            phi: sample_matrix(&lattice, &pair.phi),
            star_fa: sample_matrix(&lattice, &curv.star_fa),
            daphi_x: sample_matrix(&lattice, &curv.da_phi_x),
            daphi_y: sample_matrix(&lattice, &curv.da_phi_y),
            lattice,
        }
    }

    pub fn nodes(&self) -> usize {
        self.lattice.nodes()
    }

    pub fn theta(&self, j: usize) -> f64 {
        2.0 * PI * j as f64 / self.nt as f64
    }

    pub fn zeros(&self, support: Support) -> FiberGrid {
        FiberGrid::zeros(self.nodes(), self.n, self.nt, support)
    }

    fn check(&self, u: &FiberGrid) {
        assert_eq!(u.n, self.n, "rank mismatch");
        assert_eq!(u.nt, self.nt, "fiber resolution mismatch");
        assert_eq!(u.values.len(), self.nodes() * self.n * self.nt);
    }

    /// Samples a fiber polynomial by evaluating its coefficients per node.
    pub fn sample(&self, f: &FiberPoly, support: Support) -> FiberGrid {
        assert_eq!(f.rank(), self.n);
        let mut out = self.zeros(support);
        let nt = self.nt;
        for node in 0..self.nodes() {
            if !self.lattice.valid(support, node) {
                continue;
            }
            let (x, y) = self.lattice.coords(node);
            for (k, c) in f.eval_coeffs(x, y) {
                for j in 0..nt {
                    let e = C64::from_polar(1.0, k as f64 * self.theta(j));
                    for (ci, cv) in c.iter().enumerate() {
                        out.values[(node * self.n + ci) * nt + j] += cv * e;
                    }
                }
            }
        }
        out
    }

    /// Pointwise samples of an arbitrary function on `SM`.
    pub fn sample_fn(&self, f: &dyn SmFunction, support: Support) -> FiberGrid {
        assert_eq!(f.rank(), self.n);
        let mut out = self.zeros(support);
        let mut buf = vec![C64::default(); self.n];
        for node in 0..self.nodes() {
            if !self.lattice.valid(support, node) {
                continue;
            }
            let (x, y) = self.lattice.coords(node);
            for j in 0..self.nt {
                f.eval_into(x, y, self.theta(j), &mut buf);
                for (c, v) in buf.iter().enumerate() {
                    out.values[(node * self.n + c) * self.nt + j] = *v;
                }
            }
        }
        out
    }

    pub fn decompose(&self, u: &FiberGrid) -> FourierStack {
        self.check(u);
        let mut coeffs = u.values.clone();
        self.fwd.process(&mut coeffs);
        let s = 1.0 / self.nt as f64;
        coeffs.iter_mut().for_each(|v| *v *= s);
        FourierStack {
            n: u.n,
            nt: u.nt,
            support: u.support,
            coeffs,
        }
    }

    pub fn reconstruct(&self, stack: &FourierStack) -> FiberGrid {
        let mut values = stack.coeffs.clone();
        self.inv.process(&mut values);
        FiberGrid {
            n: stack.n,
            nt: stack.nt,
            support: stack.support,
            values,
        }
    }

    fn mode_map(&self, u: &FiberGrid, g: impl Fn(i32) -> C64) -> FiberGrid {
        self.reconstruct(&self.decompose(u).map_modes(g))
    }

    pub fn apply_v(&self, u: &FiberGrid) -> FiberGrid {
        self.mode_map(u, |k| C64::new(0.0, k as f64))
    }

    pub fn hilbert(&self, u: &FiberGrid) -> FiberGrid {
        self.mode_map(u, |k| C64::new(0.0, -(k.signum() as f64)))
    }

    /// `(Id + iH)u = u_0 + 2 Σ_{k≥1} u_k`.
    pub fn holomorphic_project(&self, u: &FiberGrid) -> FiberGrid {
        self.mode_map(u, |k| C64::from(1.0 + k.signum() as f64))
    }

    /// `(Id - iH)u = u_0 + 2 Σ_{k≤-1} u_k`.
    pub fn antiholomorphic_project(&self, u: &FiberGrid) -> FiberGrid {
        self.mode_map(u, |k| C64::from(1.0 - k.signum() as f64))
    }

    /// `Σ_{k≥0} u_k`.
    pub fn strict_holomorphic_project(&self, u: &FiberGrid) -> FiberGrid {
        self.mode_map(u, |k| C64::from(if k >= 0 { 1.0 } else { 0.0 }))
    }

    /// `u_0`, constant along each fiber.
    pub fn mode_zero(&self, u: &FiberGrid) -> FiberGrid {
        self.check(u);
        let mut out = u.like();
        let nt = self.nt;
        for (src, dst) in u.values.chunks(nt).zip(out.values.chunks_mut(nt)) {
            let mean = src.iter().sum::<C64>() / nt as f64;
            dst.iter_mut().for_each(|v| *v = mean);
        }
        out
    }

    /// Finite-difference derivative in `x` (axis 0) or `y` (axis 1).
    fn derivative(&self, u: &FiberGrid, axis: usize) -> FiberGrid {
        self.check(u);
        let stencils = match u.support {
            Support::Full => &self.lattice.full[axis],
            Support::Disk => &self.lattice.disk[axis],
        };
        let b = u.block();
        let mut out = u.like();
        for (node, st) in stencils.iter().enumerate() {
            if st.len < 2 {
                continue;
            }
            let dst = &mut out.values[node * b..(node + 1) * b];
            for m in 0..st.len {
                let w = st.w[m];
                if w == 0.0 {
                    continue;
                }
                let src = st.base + m * st.stride;
                for (d, s) in dst.iter_mut().zip(&u.values[src * b..(src + 1) * b]) {
                    *d += s * w;
                }
            }
        }
        out
    }

    pub fn dx(&self, u: &FiberGrid) -> FiberGrid {
        self.derivative(u, 0)
    }

    pub fn dy(&self, u: &FiberGrid) -> FiberGrid {
        self.derivative(u, 1)
    }

    /// `out = Σ coefficient(node, θ_j) · input` over several inputs.
    fn combine_pointwise(&self, terms: &[(&FiberGrid, &dyn Fn(usize, usize) -> f64)]) -> FiberGrid {
        let mut out = terms[0].0.like();
        out.support = terms.iter().fold(Support::Full, |s, t| combine(s, t.0.support));
        let (n, nt) = (self.n, self.nt);
        for node in 0..self.nodes() {
            for j in 0..nt {
                let coeffs: Vec<f64> = terms.iter().map(|(_, f)| f(node, j)).collect();
                for c in 0..n {
                    let idx = (node * n + c) * nt + j;
                    out.values[idx] = terms
                        .iter()
                        .zip(&coeffs)
                        .map(|((g, _), w)| g.values[idx] * w)
                        .sum();
                }
            }
        }
        out
    }

    /// `X = e^{-φ}(cos θ ∂x + sin θ ∂y + (-φ_x sin θ + φ_y cos θ) V)`.
    pub fn apply_x(&self, u: &FiberGrid) -> FiberGrid {
        let (ux, uy, vu) = (self.dx(u), self.dy(u), self.apply_v(u));
        self.combine_pointwise(&[
            (&ux, &|n, j| self.emphi[n] * self.cos[j]),
            (&uy, &|n, j| self.emphi[n] * self.sin[j]),
            (&vu, &|n, j| self.emphi[n] * (-self.phix[n] * self.sin[j] + self.phiy[n] * self.cos[j])),
        ])
    }

    /// `X⊥ = -e^{-φ}(-sin θ ∂x + cos θ ∂y - (φ_x cos θ + φ_y sin θ) V)`.
    pub fn apply_xperp(&self, u: &FiberGrid) -> FiberGrid {
        let (ux, uy, vu) = (self.dx(u), self.dy(u), self.apply_v(u));
        self.combine_pointwise(&[
            (&ux, &|n, j| self.emphi[n] * self.sin[j]),
            (&uy, &|n, j| -self.emphi[n] * self.cos[j]),
            (&vu, &|n, j| self.emphi[n] * (self.phix[n] * self.cos[j] + self.phiy[n] * self.sin[j])),
        ])
    }

    /// Multiplies by a scalar `g(node, j)`.
    pub fn mul_scalar(&self, u: &FiberGrid, g: impl Fn(usize, usize) -> f64) -> FiberGrid {
        self.combine_pointwise(&[(u, &g)])
    }

    /// Multiplies by the matrix `Σ_m w_m(node, j) M_m(node)`.
    fn mul_matrices(&self, u: &FiberGrid, parts: &[(&[C64], &dyn Fn(usize, usize) -> f64)]) -> FiberGrid {
        self.check(u);
        let (n, nt) = (self.n, self.nt);
        let mut out = u.like();
        let mut m = vec![C64::default(); n * n];
        for node in 0..self.nodes() {
            for j in 0..nt {
                m.iter_mut().for_each(|v| *v = C64::default());
                for (field, w) in parts {
                    let wv = w(node, j);
                    if wv == 0.0 {
                        continue;
                    }
                    for (a, b) in m.iter_mut().zip(&field[node * n * n..(node + 1) * n * n]) {
                        *a += b * wv;
                    }
                }
                for r in 0..n {
                    let mut acc = C64::default();
                    for c in 0..n {
                        acc += m[r * n + c] * u.values[(node * n + c) * nt + j];
                    }
                    out.values[(node * n + r) * nt + j] = acc;
                }
            }
        }
        out
    }

    /// `A(v) u`.
    pub fn apply_connection(&self, u: &FiberGrid) -> FiberGrid {
        self.mul_matrices(
            u,
            &[
                (&self.a_x, &|n, j| self.emphi[n] * self.cos[j]),
                (&self.a_y, &|n, j| self.emphi[n] * self.sin[j]),
            ],
        )
    }

    /// `(*A) u` with `(*A)(v) = A(-iv)`.
    pub fn apply_star_connection(&self, u: &FiberGrid) -> FiberGrid {
        self.mul_matrices(
            u,
            &[
                (&self.a_x, &|n, j| self.emphi[n] * self.sin[j]),
                (&self.a_y, &|n, j| -self.emphi[n] * self.cos[j]),
            ],
        )
    }

    pub fn apply_higgs(&self, u: &FiberGrid) -> FiberGrid {
        self.mul_matrices(u, &[(&self.phi, &|_, _| 1.0)])
    }

    pub fn apply_star_fa(&self, u: &FiberGrid) -> FiberGrid {
        self.mul_matrices(u, &[(&self.star_fa, &|_, _| 1.0)])
    }

    /// `(*d_AΦ) u` with `(*d_AΦ)(v) = (d_AΦ)(-iv)`.
    pub fn apply_star_da_phi(&self, u: &FiberGrid) -> FiberGrid {
        self.mul_matrices(
            u,
            &[
                (&self.daphi_x, &|n, j| self.emphi[n] * self.sin[j]),
                (&self.daphi_y, &|n, j| -self.emphi[n] * self.cos[j]),
            ],
        )
    }

    /// `(X + λV) u`.
    pub fn apply_transport(&self, u: &FiberGrid) -> FiberGrid {
        let vu = self.apply_v(u);
        self.apply_x(u).add(&self.mul_scalar(&vu, |n, _| self.lambda[n]))
    }

    /// `P u = (X + λV + A + Φ) u`.
    pub fn apply_p(&self, u: &FiberGrid) -> FiberGrid {
        self.apply_transport(u)
            .add(&self.apply_connection(u))
            .add(&self.apply_higgs(u))
    }

    /// `(X⊥ + *A) u`.
    pub fn apply_xperp_star(&self, u: &FiberGrid) -> FiberGrid {
        self.apply_xperp(u).add(&self.apply_star_connection(u))
    }

    pub fn curvature_at(&self, node: usize) -> f64 {
        self.curvature[node]
    }

    /// `X⊥(λ)` at `(node, θ_j)`.
    pub fn xperp_lambda(&self, node: usize, j: usize) -> f64 {
        -self.emphi[node] * (-self.lambda_x[node] * self.sin[j] + self.lambda_y[node] * self.cos[j])
    }

    /// `K + X⊥(λ) + λ²` at `(node, θ_j)`.
    pub fn jacobi_coefficient(&self, node: usize, j: usize) -> f64 {
        self.curvature[node] + self.xperp_lambda(node, j) + self.lambda[node].powi(2)
    }

    /// `⟨u, w⟩ = ∫ ⟨u, w⟩_{ℂⁿ} dΣ³` over the disk.
    pub fn inner(&self, u: &FiberGrid, w: &FiberGrid) -> C64 {
        self.check(u);
        self.check(w);
        let b = u.block();
        let dtheta = 2.0 * PI / self.nt as f64;
        let mut acc = C64::default();
        let (nodes, weights) = self.lattice.quadrature(combine(u.support, w.support));
        for &node in nodes {
            let wt = weights[node];
            if wt == 0.0 {
                continue;
            }
            let s: C64 = u.values[node * b..(node + 1) * b]
                .iter()
                .zip(&w.values[node * b..(node + 1) * b])
                .map(|(a, c)| a * c.conj())
                .sum();
            acc += s * (wt * self.e2phi[node] * dtheta);
        }
        acc
    }

    pub fn norm_sq(&self, u: &FiberGrid) -> f64 {
        self.inner(u, u).re
    }

    /// Like [`norm_sq`](Self::norm_sq) with disk weights, skipping nodes
    /// where disk-supported derivatives are unresolved.
    pub fn norm_sq_resolved(&self, u: &FiberGrid) -> f64 {
        self.check(u);
        let b = u.block();
        let dtheta = 2.0 * PI / self.nt as f64;
        let (nodes, weights) = self.lattice.quadrature(Support::Disk);
        nodes
            .iter()
            .filter(|&&n| self.lattice.resolved[n])
            .map(|&n| {
                let s: f64 = u.values[n * b..(n + 1) * b].iter().map(|v| v.norm_sqr()).sum();
                s * weights[n] * self.e2phi[n] * dtheta
            })
            .sum()
    }

    /// Sup norm over disk nodes.
    pub fn sup_on_disk(&self, u: &FiberGrid) -> f64 {
        let b = u.block();
        self.lattice
            .mask_nodes
            .iter()
            .flat_map(|&node| u.values[node * b..(node + 1) * b].iter())
            .fold(0.0, |m, z| m.max(z.norm()))
    }

    /// Fraction of `L²` mass in modes with `|k| > m`.
    pub fn mass_outside(&self, stack: &FourierStack, m: i32) -> f64 {
        let b = stack.n * stack.nt;
        let (mut outside, mut total) = (0.0, 0.0);
        let (nodes, weights) = self.lattice.quadrature(stack.support);
        for &node in nodes {
            let wt = weights[node] * self.e2phi[node];
            for (idx, v) in stack.coeffs[node * b..(node + 1) * b].iter().enumerate() {
                let e = v.norm_sqr() * wt;
                total += e;
                if mode_of_bin(idx % stack.nt, stack.nt).abs() > m {
                    outside += e;
                }
            }
        }
        if total == 0.0 {
            0.0
        } else {
            outside / total
        }
    }
}

/// Sup norms of `[V,X]u + X⊥u`, `[V,X⊥]u - Xu` and `[X,X⊥]u + KVu`.
pub fn structure_residuals(ctx: &FiberContext, u: &FiberGrid) -> [f64; 3] {
    let xu = ctx.apply_x(u);
    let xpu = ctx.apply_xperp(u);
    let vu = ctx.apply_v(u);
    let r1 = ctx.apply_v(&xu).sub(&ctx.apply_x(&vu)).add(&xpu);
    let r2 = ctx.apply_v(&xpu).sub(&ctx.apply_xperp(&vu)).sub(&xu);
    let kvu = ctx.mul_scalar(&vu, |n, _| ctx.curvature_at(n));
    let r3 = ctx.apply_x(&xpu).sub(&ctx.apply_xperp(&xu)).add(&kvu);
    [ctx.sup_on_disk(&r1), ctx.sup_on_disk(&r2), ctx.sup_on_disk(&r3)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommutatorResidual {
    /// Sup norm of `[H, P]u - (X⊥ + *A)u_0 - {(X⊥ + *A)u}_0` on the disk.
    pub residual: f64,
    /// Sup norm of `[H, P]u`.
    pub scale: f64,
}

pub fn commutator_residual(ctx: &FiberContext, u: &FiberGrid) -> CommutatorResidual {
    let lhs = ctx.hilbert(&ctx.apply_p(u)).sub(&ctx.apply_p(&ctx.hilbert(u)));
    let u0 = ctx.mode_zero(u);
    let rhs = ctx
        .apply_xperp_star(&u0)
        .add(&ctx.mode_zero(&ctx.apply_xperp_star(u)));
    CommutatorResidual {
        residual: ctx.sup_on_disk(&lhs.sub(&rhs)),
        scale: ctx.sup_on_disk(&lhs),
    }
}

/// Terms of the energy identity for `P = X + λV + A + Φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    /// `‖PVu‖²`, `-⟨*F_A u, Vu⟩`, `-Re⟨(*d_AΦ)u, Vu⟩`, `-2Re⟨λVu, Φu⟩`,
    /// `-Re⟨Φu, (X + A + Φ)u⟩`, `-⟨(K + X⊥λ + λ²)Vu, Vu⟩`.
    pub lhs: [f64; 6],
    /// `‖VPu‖²`, `-‖Pu‖²`.
    pub rhs: [f64; 2],
    /// `|LHS - RHS| / (|LHS| + |RHS|)`, zero when both vanish.
    pub relative_residual: f64,
}

pub fn energy_identity(ctx: &FiberContext, u: &FiberGrid) -> EnergyTerms {
    let vu = ctx.apply_v(u);
    let pvu = ctx.apply_p(&vu);
    let phiu = ctx.apply_higgs(u);
    let xu = ctx.apply_x(u);
    let xaphi = xu.add(&ctx.apply_connection(u)).add(&phiu);
    let lam_vu = ctx.mul_scalar(&vu, |n, _| ctx.lambda[n]);
    let kappa_vu = ctx.mul_scalar(&vu, |n, j| ctx.jacobi_coefficient(n, j));
    let lhs = [
        ctx.norm_sq(&pvu),
        -ctx.inner(&ctx.apply_star_fa(u), &vu).re,
        -ctx.inner(&ctx.apply_star_da_phi(u), &vu).re,
        -2.0 * ctx.inner(&lam_vu, &phiu).re,
        -ctx.inner(&phiu, &xaphi).re,
        -ctx.inner(&kappa_vu, &vu).re,
    ];
    let pu = ctx.apply_p(u);
    let rhs = [ctx.norm_sq(&ctx.apply_v(&pu)), -ctx.norm_sq(&pu)];
    let l: f64 = lhs.iter().sum();
    let r: f64 = rhs.iter().sum();
    let denom = l.abs() + r.abs();
    EnergyTerms {
        lhs,
        rhs,
        relative_residual: if denom == 0.0 { 0.0 } else { (l - r).abs() / denom },
    }
}

/// Relative residuals of `⟨Vu, g⟩ + ⟨u, Vg⟩`, `⟨Pu, g⟩ + ⟨u, Pg⟩` and
/// `⟨(X⊥ + *A)u, g⟩ + ⟨u, (X⊥ + *A)g⟩`; `u` must vanish on the boundary.
pub fn integration_by_parts(ctx: &FiberContext, u: &FiberGrid, g: &FiberGrid) -> [f64; 3] {
    let rel = |a: C64, b: C64| {
        let d = a.norm() + b.norm();
        if d == 0.0 {
            0.0
        } else {
            (a + b).norm() / d
        }
    };
    let pair = |op: &dyn Fn(&FiberGrid) -> FiberGrid| rel(ctx.inner(&op(u), g), ctx.inner(u, &op(g)));
    [
        pair(&|w| ctx.apply_v(w)),
        // the skew part of P: Φ and A are skew-Hermitian pointwise
        pair(&|w| ctx.apply_p(w)),
        pair(&|w| ctx.apply_xperp_star(w)),
    ]
}

/// `∫ |V(Pu)|² - |Pu|² + |F|²` and its scale `∫ |Pu|² + |F|²`, for `Pu`
/// of fiber degree one whose mode-zero part is `F`.
pub fn lemma52(ctx: &FiberContext, u: &FiberGrid) -> (f64, f64) {
    let pu = ctx.apply_p(u);
    let f = ctx.mode_zero(&pu);
    let value = ctx.norm_sq(&ctx.apply_v(&pu)) - ctx.norm_sq(&pu) + ctx.norm_sq(&f);
    (value, ctx.norm_sq(&pu) + ctx.norm_sq(&f))
}

/// `|P(Vu)|² - ⟨(K + X⊥λ + λ²)Vu, Vu⟩` and `‖P(Vu)‖²` as its scale.
pub fn lemma54_quantity(ctx: &FiberContext, u: &FiberGrid) -> (f64, f64) {
    let vu = ctx.apply_v(u);
    let pvu = ctx.apply_p(&vu);
    let kappa_vu = ctx.mul_scalar(&vu, |n, j| ctx.jacobi_coefficient(n, j));
    let a = ctx.norm_sq(&pvu);
    (a - ctx.inner(&kappa_vu, &vu).re, a)
}

/// `(|P(Vu)|² - ⟨(K + X⊥λ + λ²)Vu, Vu⟩, ‖P(Vu) - r Vu‖²)` on disk nodes,
/// for a Riccati solution `r` sampled at `(node, θ_j)`. The two agree
/// when `u` vanishes on the boundary.
pub fn lemma54_riccati_check(ctx: &FiberContext, u: &FiberGrid, r: &[f64]) -> (f64, f64) {
    let vu = ctx.apply_v(u);
    let pvu = ctx.apply_p(&vu).restrict_to_disk(&ctx.lattice);
    let vu = vu.restrict_to_disk(&ctx.lattice);
    let kappa_vu = ctx.mul_scalar(&vu, |n, j| ctx.jacobi_coefficient(n, j));
    let rvu = ctx.mul_scalar(&vu, |n, j| r[n * ctx.nt + j]);
    let quantity = ctx.norm_sq(&pvu) - ctx.inner(&kappa_vu, &vu).re;
    (quantity, ctx.norm_sq(&pvu.sub(&rvu)))
}
