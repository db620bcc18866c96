//! Experiment configuration (TOML, schema version 1).
//!
//! ```toml
//! schema_version = 1
//!
//! [surface]
//! conformal_factor = "0"          # φ in e^{2φ}(dx² + dy²)
//!
//! [magnetic]
//! lambda = "0.3"
//!
//! [attenuation]
//! n = 1
//! a_x = ["0"]                      # n×n entries, row-major
//! a_y = ["0"]
//! phi = ["0.5*i"]
//!
//! [numerics]
//! dt = 1e-3
//! grid = [129, 129, 64]
//! fan_size = 128
//! seed = 0
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::fields::{AttenuationPair, MatrixField};
use crate::fiber::GridSpec;
use crate::geometry::{MagneticSystem, Surface};
use crate::sm::FiberPoly;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub surface: SurfaceConfig,
    #[serde(default)]
    pub magnetic: MagneticConfig,
    #[serde(default)]
    pub attenuation: AttenuationConfig,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub integrand: IntegrandConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub suites: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceConfig {
    pub conformal_factor: String,
    pub description: String,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig {
            conformal_factor: "0".into(),
            description: "flat disk".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MagneticConfig {
    pub lambda: String,
    pub max_flow_time: f64,
}

impl Default for MagneticConfig {
    fn default() -> Self {
        MagneticConfig {
            lambda: "0".into(),
            max_flow_time: 50.0,
        }
    }
}

/// Empty entry lists mean zero fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttenuationConfig {
    pub n: usize,
    pub a_x: Vec<String>,
    pub a_y: Vec<String>,
    pub phi: Vec<String>,
}

impl Default for AttenuationConfig {
    fn default() -> Self {
        AttenuationConfig {
            n: 1,
            a_x: Vec::new(),
            a_y: Vec::new(),
            phi: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub dt: f64,
    pub grid: [usize; 3],
    pub fan_size: usize,
    pub seed: u64,
    /// Iteration cap per integrating-factor solve in the `intfactor` suite.
    pub intfactor_max_iterations: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            dt: 1e-3,
            grid: [129, 129, 64],
            fan_size: 128,
            seed: 0,
            intfactor_max_iterations: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub beta: f64,
    pub mu: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { beta: 0.0, mu: 0.0 }
    }
}

/// `F + σ` with `σ = σ_x dx + σ_y dy`; `n` entries each, empty means zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrandConfig {
    pub f: Vec<String>,
    pub sigma_x: Vec<String>,
    pub sigma_y: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub draws: usize,
    pub tensor_order: usize,
    pub basis_degree: usize,
    pub degree_m: usize,
    pub gauge_degree: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            draws: 10,
            tensor_order: 2,
            basis_degree: 3,
            degree_m: 3,
            gauge_degree: 2,
        }
    }
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn parse_expr(src: &str, what: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn parse_matrix(entries: &[String], n: usize, what: &str) -> Result<MatrixField> {
    if entries.is_empty() {
        return Ok(MatrixField::zero(n));
    }
    if entries.len() != n * n {
        return Err(Error::Config(format!("{what} needs {} entries, got {}", n * n, entries.len())));
    }
    let exprs = entries
        .iter()
        .enumerate()
        .map(|(k, s)| parse_expr(s, &format!("{what}[{k}]")))
        .collect::<Result<Vec<_>>>()?;
    MatrixField::from_entries(n, exprs)
}

fn parse_vector(entries: &[String], n: usize, what: &str) -> Result<Vec<Expr>> {
    if entries.is_empty() {
        return Ok(vec![Expr::zero(); n]);
    }
    if entries.len() != n {
        return Err(Error::Config(format!("{what} needs {n} entries, got {}", entries.len())));
    }
    entries.iter().enumerate().map(|(k, s)| parse_expr(s, &format!("{what}[{k}]"))).collect()
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| {
            let (line, col) = e.span().map_or((0, 0), |s| line_col(src, s.start));
            Error::Config(format!("line {line}, column {col}: {}", e.message()))
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.check_numerics()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn check_numerics(&self) -> Result<()> {
        let n = &self.numerics;
        if !(n.dt > 0.0 && n.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", n.dt)));
        }
        if n.fan_size == 0 {
            return Err(Error::Config("fan_size must be at least 1".into()));
        }
        if self.attenuation.n == 0 {
            return Err(Error::Config("attenuation rank must be at least 1".into()));
        }
        GridSpec::new(n.grid[0], n.grid[1], n.grid[2]).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn grid(&self) -> GridSpec {
        let g = self.numerics.grid;
        GridSpec { nx: g[0], ny: g[1], nt: g[2] }
    }

    pub fn system(&self) -> Result<MagneticSystem> {
        let phi = parse_expr(&self.surface.conformal_factor, "surface.conformal_factor")?;
        let surface = Surface::new(phi, self.surface.description.clone())?;
        let lambda = parse_expr(&self.magnetic.lambda, "magnetic.lambda")?;
        Ok(MagneticSystem::new(surface, lambda)?
            .with_dt(self.numerics.dt)
            .with_max_flow_time(self.magnetic.max_flow_time))
    }

    /// The attenuation pair without the skew-Hermitian check.
    pub fn pair_unchecked(&self) -> Result<AttenuationPair> {
        let n = self.attenuation.n;
        AttenuationPair::new_unchecked(
            parse_matrix(&self.attenuation.a_x, n, "attenuation.a_x")?,
            parse_matrix(&self.attenuation.a_y, n, "attenuation.a_y")?,
            parse_matrix(&self.attenuation.phi, n, "attenuation.phi")?,
        )
    }

    pub fn pair(&self) -> Result<AttenuationPair> {
        let p = self.pair_unchecked()?;
        AttenuationPair::new(p.a_x, p.a_y, p.phi)
    }

    pub fn integrand(&self, system: &MagneticSystem) -> Result<FiberPoly> {
        let n = self.attenuation.n;
        let f = parse_vector(&self.integrand.f, n, "integrand.f")?;
        let sx = parse_vector(&self.integrand.sigma_x, n, "integrand.sigma_x")?;
        let sy = parse_vector(&self.integrand.sigma_y, n, "integrand.sigma_y")?;
        Ok(crate::fields::one_form_plus_function(&system.surface, &f, &sx, &sy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\n").unwrap();
        assert_eq!(cfg.numerics.dt, 1e-3);
        assert_eq!(cfg.numerics.grid, [129, 129, 64]);
        assert_eq!(cfg.numerics.fan_size, 128);
        assert!(cfg.pair().unwrap().is_zero());
        assert_eq!(cfg.system().unwrap().lambda(0.2, 0.1), 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = ExperimentConfig::from_toml("schema_version = 1\n[numerics]\nbogus = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(ExperimentConfig::from_toml("schema_version = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1\n[numerics]\ngrid = [129, 129, 48]\n").is_err());
    }

    #[test]
    fn malformed_expression_is_a_config_error() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\n[magnetic]\nlambda = \"0.3 +* x\"\n").unwrap();
        assert!(matches!(cfg.system(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml("schema_version = 1\n").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.numerics.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn attenuation_entries() {
        let src = "schema_version = 1\n[attenuation]\nn = 2\nphi = [\"i\", \"0\", \"0\", \"-i*x\"]\n";
        let cfg = ExperimentConfig::from_toml(src).unwrap();
        let p = cfg.pair().unwrap();
        assert_eq!(p.rank(), 2);
        let bad = "schema_version = 1\n[attenuation]\nn = 2\nphi = [\"1\", \"0\", \"0\", \"0\"]\n";
        let cfg = ExperimentConfig::from_toml(bad).unwrap();
        assert!(cfg.pair().is_err());
        assert!(cfg.pair_unchecked().is_ok());
    }
}
