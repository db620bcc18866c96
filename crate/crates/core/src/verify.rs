//! Verification suites over the fiber discretization.
//!
//! Each suite returns a [`SuiteReport`] with its headline residual at the
//! finest resolution and a refinement table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fiber::integrating::{solve_integrating_factor_sequence, riccati_samples, SolverOptions};
use crate::fiber::{
    commutator_residual, energy_identity, integration_by_parts, lemma52, lemma54_quantity,
    lemma54_riccati_check, structure_residuals, FiberContext, GridSpec, Support,
};
use crate::fields::{random, AttenuationPair, MatrixField};
use crate::geometry::MagneticSystem;
use crate::sm::FiberPoly;

pub const SUITES: [&str; 8] = [
    "structure",
    "commutator",
    "energy",
    "hilbert",
    "parts",
    "lemma52",
    "lemma54",
    "intfactor",
];

/// Residuals below this are treated as exact in the structure suite.
pub const ROUND_OFF_FLOOR: f64 = 1e-9;
/// Accepted window for the error ratio per mesh halving (nominally 16).
pub const REFINEMENT_RATIO: (f64, f64) = (10.0, 24.0);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementRow {
    pub suite: String,
    pub quantity: String,
    pub resolution: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub resolution: String,
    pub residual: f64,
    pub pass: bool,
    pub details: Vec<(String, f64)>,
    #[serde(skip)]
    pub refinement: Vec<RefinementRow>,
}

impl SuiteReport {
    fn new(suite: &str, spec: GridSpec) -> Self {
        SuiteReport {
            suite: suite.into(),
            resolution: label(spec),
            residual: 0.0,
            pass: false,
            details: Vec::new(),
            refinement: Vec::new(),
        }
    }

    fn row(&mut self, quantity: &str, spec: GridSpec, residual: f64) {
        self.refinement.push(RefinementRow {
            suite: self.suite.clone(),
            quantity: quantity.into(),
            resolution: label(spec),
            residual,
        });
    }

    pub fn detail(&self, key: &str) -> Option<f64> {
        self.details.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

fn label(spec: GridSpec) -> String {
    format!("{}x{}x{}", spec.nx, spec.ny, spec.nt)
}

/// Inputs shared by every suite.
#[derive(Debug, Clone)]
pub struct VerifyInput {
    pub system: MagneticSystem,
    pub pair: AttenuationPair,
    pub grid: GridSpec,
    pub seed: u64,
    pub intfactor_max_iterations: usize,
}

pub fn run_suite(name: &str, input: &VerifyInput) -> Result<SuiteReport> {
    match name {
        "structure" => structure_suite(&input.system, &[65, 129, 257], 16, 5, input.seed),
        "commutator" => commutator_suite(input),
        "energy" => energy_suite(input),
        "hilbert" => hilbert_suite(input),
        "parts" => parts_suite(input),
        "lemma52" => lemma52_suite(input),
        "lemma54" => lemma54_suite(input),
        "intfactor" => intfactor_suite(input, &[4, 8, 16, 32], 16),
        other => Err(Error::Config(format!(
            "unknown suite '{other}' (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

fn uniform(rng: &mut impl Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}

/// Smooth, non-polynomial complex coefficient.
fn smooth_coeff(rng: &mut impl Rng) -> Expr {
    let lin = |rng: &mut ChaCha8Rng| {
        Expr::real(uniform(rng)) * Expr::x() + Expr::real(uniform(rng)) * Expr::y() + Expr::real(uniform(rng))
    };
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    let s = lin(&mut r).sin();
    let e = (lin(&mut r) * Expr::real(0.5)).exp();
    s + Expr::i() * Expr::real(uniform(&mut r)) * e
}

/// `Σ_{|k| ≤ kmax} u_k e^{ikθ}` with smooth coefficients, damped in `|k|`.
pub fn band_limited(rng: &mut impl Rng, n: usize, kmax: i32) -> FiberPoly {
    let mut u = FiberPoly::zero(n);
    for k in -kmax..=kmax {
        let w = Expr::real(1.0 / (1.0 + k.abs() as f64));
        u = u.add(&FiberPoly::mode(k, (0..n).map(|_| &w * smooth_coeff(rng)).collect()));
    }
    u
}

/// Band-limited function times `(1 - x² - y²)²`.
pub fn vanishing_band_limited(rng: &mut impl Rng, n: usize, kmax: i32) -> FiberPoly {
    let d2 = Expr::disk_defining().powi(2);
    let mut u = FiberPoly::zero(n);
    for (k, c) in band_limited(rng, n, kmax).modes() {
        u = u.add(&FiberPoly::mode(k, c.iter().map(|e| &d2 * e).collect()));
    }
    u
}

fn coarser(spec: GridSpec) -> GridSpec {
    let half = |n: usize| ((n - 1) / 2 + 1).max(9);
    GridSpec {
        nx: half(spec.nx),
        ny: half(spec.ny),
        nt: spec.nt,
    }
}

fn is_flat(system: &MagneticSystem) -> bool {
    system.surface.conformal_factor().is_zero()
}

/// Structure equations over a sequence of spatial resolutions.
pub fn structure_suite(system: &MagneticSystem, sizes: &[usize], nt: usize, draws: usize, seed: u64) -> Result<SuiteReport> {
    let specs = sizes.iter().map(|&s| GridSpec::new(s, s, nt)).collect::<Result<Vec<_>>>()?;
    let finest = *specs.last().ok_or_else(|| Error::Config("structure suite needs a resolution".into()))?;
    let mut report = SuiteReport::new("structure", finest);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kmax = (nt as i32 / 2 - 2).clamp(1, 3);
    let funcs: Vec<FiberPoly> = (0..draws).map(|_| band_limited(&mut rng, 1, kmax)).collect();
    let zero = AttenuationPair::zero(1);
    let names = ["[V,X]+Xperp", "[V,Xperp]-X", "[X,Xperp]+KV"];
    let mut table = vec![[0.0f64; 3]; specs.len()];
    for (level, &spec) in specs.iter().enumerate() {
        let ctx = FiberContext::new(system, &zero, spec);
        for f in &funcs {
            let r = structure_residuals(&ctx, &ctx.sample(f, Support::Full));
            for i in 0..3 {
                table[level][i] = table[level][i].max(r[i]);
            }
        }
        for i in 0..3 {
            report.row(names[i], spec, table[level][i]);
        }
    }
    let mut pass = true;
    for i in 0..3 {
        let column: Vec<f64> = table.iter().map(|row| row[i]).collect();
        if column.iter().all(|&r| r < ROUND_OFF_FLOOR) {
            report.details.push((format!("{}_exact", names[i]), 1.0));
            continue;
        }
        for (l, w) in column.windows(2).enumerate() {
            let ratio = w[0] / w[1];
            report.details.push((format!("{}_ratio_{}", names[i], l), ratio));
            // a finer level that already sits at round-off is fine
            let ok = w[1] < ROUND_OFF_FLOOR || (REFINEMENT_RATIO.0..=REFINEMENT_RATIO.1).contains(&ratio);
            pass &= ok;
        }
    }
    report.residual = table.last().unwrap().iter().copied().fold(0.0, f64::max);
    report.pass = pass;
    Ok(report)
}

fn commutator_threshold(input: &VerifyInput) -> f64 {
    if input.pair.rank() == 1 && input.pair.is_zero() && is_flat(&input.system) && input.system.lambda_expr().is_zero() {
        1e-4
    } else {
        1e-3
    }
}

fn commutator_suite(input: &VerifyInput) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("commutator", input.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let u = band_limited(&mut rng, input.pair.rank(), 3);
    let mut last = 0.0;
    for spec in [coarser(input.grid), input.grid] {
        let ctx = FiberContext::new(&input.system, &input.pair, spec);
        let r = commutator_residual(&ctx, &ctx.sample(&u, Support::Full));
        report.row("[H,P]u", spec, r.residual);
        report.details.push((format!("scale_{}", label(spec)), r.scale));
        last = r.residual;
    }
    let tol = commutator_threshold(input);
    report.details.push(("threshold".into(), tol));
    report.residual = last;
    report.pass = last < tol;
    Ok(report)
}

fn energy_suite(input: &VerifyInput) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("energy", input.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let n = input.pair.rank();
    let u = vanishing_band_limited(&mut rng, n, 2);
    let mut residuals = Vec::new();
    for spec in [coarser(input.grid), input.grid] {
        let ctx = FiberContext::new(&input.system, &input.pair, spec);
        let e = energy_identity(&ctx, &ctx.sample(&u, Support::Full));
        report.row("relative_residual", spec, e.relative_residual);
        residuals.push(e.relative_residual);
    }
    let tol = if n == 1 && input.pair.is_zero() && is_flat(&input.system) { 1e-3 } else { 1e-2 };
    let (coarse, fine) = (residuals[0], residuals[1]);
    report.details.push(("threshold".into(), tol));
    report.details.push(("coarse_residual".into(), coarse));
    report.residual = fine;
    report.pass = fine < tol && (fine <= coarse || fine < 1e-12);
    Ok(report)
}

fn hilbert_suite(input: &VerifyInput) -> Result<SuiteReport> {
    let spec = input.grid;
    let mut report = SuiteReport::new("hilbert", spec);
    let n = input.pair.rank();
    let ctx = FiberContext::new(&input.system, &input.pair, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let kmax = (spec.nt as i32 / 2 - 1).min(6);
    let mut u = FiberPoly::zero(n);
    let mut holo = FiberPoly::zero(n);
    let mut anti = FiberPoly::zero(n);
    for k in -kmax..=kmax {
        let c: Vec<Expr> = (0..n).map(|_| random::complex_poly(&mut rng, 2)).collect();
        let piece = FiberPoly::mode(k, c.clone());
        u = u.add(&piece);
        let two: Vec<Expr> = c.iter().map(|e| Expr::real(2.0) * e).collect();
        match k.signum() {
            0 => {
                holo = holo.add(&piece);
                anti = anti.add(&piece);
            }
            1 => holo = holo.add(&FiberPoly::mode(k, two)),
            _ => anti = anti.add(&FiberPoly::mode(k, two)),
        }
    }
    let g = ctx.sample(&u, Support::Full);
    let u0 = ctx.mode_zero(&g);
    let hh = ctx.hilbert(&ctx.hilbert(&g));
    let checks = [
        ("H^2u+u-u0", ctx.sup_on_disk(&hh.add(&g).sub(&u0))),
        ("(Id+iH)u", ctx.sup_on_disk(&ctx.holomorphic_project(&g).sub(&ctx.sample(&holo, Support::Full)))),
        ("(Id-iH)u", ctx.sup_on_disk(&ctx.antiholomorphic_project(&g).sub(&ctx.sample(&anti, Support::Full)))),
        (
            "[H,V]u",
            ctx.sup_on_disk(&ctx.hilbert(&ctx.apply_v(&g)).sub(&ctx.apply_v(&ctx.hilbert(&g)))),
        ),
    ];
    let mut worst = 0.0f64;
    for (name, r) in checks {
        report.row(name, spec, r);
        worst = worst.max(r);
    }
    report.residual = worst;
    report.pass = worst < 1e-13 * (1.0 + ctx.sup_on_disk(&g));
    Ok(report)
}

fn parts_suite(input: &VerifyInput) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("parts", input.grid);
    let n = input.pair.rank();
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let u = vanishing_band_limited(&mut rng, n, 2);
    let g = band_limited(&mut rng, n, 2);
    let mut last = [0.0; 3];
    for spec in [coarser(input.grid), input.grid] {
        let ctx = FiberContext::new(&input.system, &input.pair, spec);
        let r = integration_by_parts(&ctx, &ctx.sample(&u, Support::Full), &ctx.sample(&g, Support::Full));
        for (name, v) in ["V", "P", "Xperp+*A"].iter().zip(r) {
            report.row(name, spec, v);
        }
        last = r;
    }
    report.residual = last[1].max(last[2]);
    report.details.push(("v_residual".into(), last[0]));
    report.pass = last[0] < 1e-12 && last[1] < 1e-3 && last[2] < 1e-3;
    Ok(report)
}

fn lemma52_suite(input: &VerifyInput) -> Result<SuiteReport> {
    let spec = input.grid;
    let mut report = SuiteReport::new("lemma52", spec);
    let n = input.pair.rank();
    let ctx = FiberContext::new(&input.system, &input.pair, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let mut worst = 0.0f64;
    for draw in 0..3 {
        // kernel element u = p: Pu = Φp + d_A p has fiber degree one
        let p = FiberPoly::mode(0, random::vanishing_vector(&mut rng, n, 2, 1));
        let (v, scale) = lemma52(&ctx, &ctx.sample(&p, Support::Full));
        let rel = if scale == 0.0 { 0.0 } else { v.abs() / scale };
        report.details.push((format!("relative_{draw}"), rel));
        worst = worst.max(rel);
    }
    report.row("relative", spec, worst);
    report.residual = worst;
    report.pass = worst < 1e-3;
    Ok(report)
}

/// Grid used for the Riccati cross-check: one backward trace per fiber
/// sample, so it is kept small.
pub fn lemma54_grid(grid: GridSpec) -> GridSpec {
    GridSpec {
        nx: grid.nx.min(41),
        ny: grid.ny.min(41),
        nt: grid.nt.min(16),
    }
}

fn lemma54_suite(input: &VerifyInput) -> Result<SuiteReport> {
    let spec = lemma54_grid(input.grid);
    let mut report = SuiteReport::new("lemma54", spec);
    let n = input.pair.rank();
    let ctx = FiberContext::new(&input.system, &input.pair, spec);
    let dt = input.system.dt.max(1e-2);
    let (c, r) = riccati_samples(&ctx, &input.system, dt)?;
    report.details.push(("riccati_scaling".into(), c));
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    let (mut min_rel, mut worst_cross) = (f64::INFINITY, 0.0f64);
    for draw in 0..3 {
        let u = vanishing_band_limited(&mut rng, n, 2);
        let g = ctx.sample(&u, Support::Full);
        let (q, scale) = lemma54_quantity(&ctx, &g);
        let (q_disk, riccati_form) = lemma54_riccati_check(&ctx, &g, &r);
        let s = scale.max(f64::MIN_POSITIVE);
        let rel = q / s;
        let cross = (q_disk - riccati_form).abs() / s;
        report.details.push((format!("quantity_over_scale_{draw}"), rel));
        report.details.push((format!("riccati_cross_check_{draw}"), cross));
        min_rel = min_rel.min(rel);
        worst_cross = worst_cross.max(cross);
    }
    report.row("riccati_cross_check", spec, worst_cross);
    report.row("quantity_over_scale_min", spec, min_rel);
    report.residual = worst_cross;
    report.pass = min_rel >= -1e-3 && worst_cross < 1e-2;
    Ok(report)
}

/// Default scalar forcing of degree one: `A = i(0.2y, -0.1x)`, `Φ = i(0.5 + 0.3x)`.
pub fn default_forcing() -> AttenuationPair {
    let i = Expr::i();
    AttenuationPair::new(
        MatrixField::scalar(1, &i * (Expr::real(0.2) * Expr::y())),
        MatrixField::scalar(1, &i * (Expr::real(-0.1) * Expr::x())),
        MatrixField::scalar(1, &i * (Expr::real(0.5) + Expr::real(0.3) * Expr::x())),
    )
    .expect("imaginary scalars are skew-Hermitian")
}

/// Integrating factors for `K` in `k_values` (warm-started), gated at
/// `k_gate`.
pub fn intfactor_suite(input: &VerifyInput, k_values: &[usize], k_gate: usize) -> Result<SuiteReport> {
    let spec = input.grid;
    let mut report = SuiteReport::new("intfactor", spec);
    let forcing = if input.pair.rank() == 1 && !input.pair.is_zero() {
        input.pair.clone()
    } else {
        default_forcing()
    };
    let ctx = FiberContext::new(&input.system, &AttenuationPair::zero(1), spec);
    let opts = SolverOptions {
        max_iterations: Some(input.intfactor_max_iterations),
        ..SolverOptions::new(k_gate)
    };
    let seq = solve_integrating_factor_sequence(&ctx, &forcing, k_values, opts)?;
    let mut sorted = k_values.to_vec();
    sorted.sort_unstable();
    let mut monotone = true;
    let mut gate = f64::NAN;
    for (i, (k, w)) in sorted.iter().zip(&seq).enumerate() {
        report.row(&format!("K={k}"), spec, w.residual);
        report.details.push((format!("iterations_K{k}"), w.iterations as f64));
        if i > 0 && w.residual > seq[i - 1].residual {
            monotone = false;
        }
        if *k == k_gate {
            gate = w.residual;
        }
    }
    report.details.push(("monotone".into(), if monotone { 1.0 } else { 0.0 }));
    report.residual = gate;
    report.pass = monotone && gate < 1e-3;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Surface;

    fn input(system: MagneticSystem, pair: AttenuationPair, grid: GridSpec) -> VerifyInput {
        VerifyInput {
            system,
            pair,
            grid,
            seed: 3,
            intfactor_max_iterations: 300,
        }
    }

    #[test]
    fn flat_structure_is_exact() {
        let r = structure_suite(&MagneticSystem::flat(0.0), &[33, 65], 8, 2, 1).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.residual < ROUND_OFF_FLOOR);
    }

    #[test]
    fn curved_structure_converges_at_fourth_order() {
        let system = MagneticSystem::new(Surface::round_cap(0.5), Expr::zero()).unwrap();
        let r = structure_suite(&system, &[33, 65], 8, 2, 1).unwrap();
        let ratio = r.detail("[X,Xperp]+KV_ratio_0").unwrap();
        assert!(ratio > 10.0 && ratio < 24.0, "{r:?}");
    }

    #[test]
    fn small_suites_pass_on_flat_disk() {
        let inp = input(MagneticSystem::flat(0.0), AttenuationPair::zero(1), GridSpec::new(33, 33, 16).unwrap());
        for s in ["hilbert", "lemma52"] {
            let r = run_suite(s, &inp).unwrap();
            assert!(r.pass, "{r:?}");
        }
        assert!(run_suite("nope", &inp).is_err());
        // quadrature is second order; the gate applies at 129
        let inp = VerifyInput { grid: GridSpec::new(129, 129, 8).unwrap(), ..inp };
        let r = run_suite("parts", &inp).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
