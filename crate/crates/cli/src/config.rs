//! Run configuration: one TOML file with typed sections, or a run
//! manifest whose `config` entry is replayed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; required, either here or via `--seed`.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// `doleans`, `levy-area-1`, `levy-area-2`, `zero`, `polar`, `custom`,
    /// `mckean` or `stable-like`.
    #[serde(default = "default_scenario")]
    pub scenario: String,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub structure: StructureSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    pub custom: Option<CustomSection>,
    #[serde(default)]
    pub mckean: McKeanSection,
    #[serde(default)]
    pub stable_like: StableLikeSection,
}

fn default_scenario() -> String {
    "doleans".into()
}

/// Power-law Lévy measure `c |u|^{-r-β}` on `0 < |u| < bound`, truncated at
/// `epsilon` or at the level giving `expected_jumps` per unit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_bound")]
    pub bound: f64,
    pub epsilon: Option<f64>,
    pub expected_jumps: Option<f64>,
    /// Angular weight in `theta` for the `polar` preset.
    pub g: Option<String>,
    pub g_max: Option<f64>,
}

fn default_c() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    1.0
}
fn default_bound() -> f64 {
    0.9
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            c: default_c(),
            beta: default_beta(),
            bound: default_bound(),
            epsilon: None,
            expected_jumps: None,
            g: None,
            g_max: None,
        }
    }
}

/// Bottom structure: a catalog name, or expressions in the mark
/// coordinates `x1..xr` for `k`, `psi` and the diagonal of `xi`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSection {
    pub name: Option<String>,
    pub k: Option<String>,
    pub psi: Option<String>,
    pub xi: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsSection {
    pub horizon: Option<f64>,
    pub step: Option<f64>,
    /// Evaluation time of `Γ`, at most the horizon.
    pub t: Option<f64>,
    #[serde(default = "default_formula")]
    pub formula: String,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    pub epsilons: Option<Vec<f64>>,
    #[serde(default = "default_rank_tol")]
    pub rank_rel_tol: f64,
    #[serde(default = "default_inverse")]
    pub inverse: String,
}

fn default_formula() -> String {
    "theorem9".into()
}
fn default_draws() -> usize {
    10_000
}
fn default_n_paths() -> usize {
    100
}
fn default_rank_tol() -> f64 {
    lent_core::density_criteria::RANK_REL_TOL
}
fn default_inverse() -> String {
    "direct_sde".into()
}

impl Default for NumericsSection {
    fn default() -> Self {
        Self {
            horizon: None,
            step: None,
            t: None,
            formula: default_formula(),
            draws: default_draws(),
            n_paths: default_n_paths(),
            epsilons: None,
            rank_rel_tol: default_rank_tol(),
            inverse: default_inverse(),
        }
    }
}

/// SDE `dX = b(t, X) dt + ∫ c(t, X⁻, u) Ñ(dt, du)` from expressions in
/// `t`, `x1..xd` and `u1..ur`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSection {
    pub state_dim: usize,
    pub mark_dim: usize,
    pub x0: Vec<f64>,
    pub jump: Vec<String>,
    pub drift: Option<Vec<String>>,
}

/// Interacting particles for `dX = ∫ σ(X⁻, P_X) u Ñ(dt, du)`. `sigma` holds
/// the `d × r` entries row by row as expressions in `x1..xd` and the
/// empirical means `m1..md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McKeanSection {
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_picard")]
    pub picard_iters: usize,
    #[serde(default = "default_picard_tol")]
    pub tolerance: f64,
    #[serde(default = "default_sigma")]
    pub sigma: Vec<String>,
    #[serde(default = "default_center")]
    pub center: Vec<f64>,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_particles() -> usize {
    200
}
fn default_picard() -> usize {
    5
}
fn default_picard_tol() -> f64 {
    1e-2
}
fn default_sigma() -> Vec<String> {
    vec![
        "1 + 0.3*sin(x1 - m1)".into(),
        "0.2".into(),
        "0".into(),
        "1 + 0.2*cos(m2)".into(),
    ]
}
fn default_center() -> Vec<f64> {
    vec![0.0, 0.5]
}
fn default_spread() -> f64 {
    0.3
}

impl Default for McKeanSection {
    fn default() -> Self {
        Self {
            particles: default_particles(),
            picard_iters: default_picard(),
            tolerance: default_picard_tol(),
            sigma: default_sigma(),
            center: default_center(),
            spread: default_spread(),
        }
    }
}

/// Variable-order stable-like process and its generator check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableLikeSection {
    #[serde(default = "default_alpha")]
    pub alpha: String,
    #[serde(default = "default_band")]
    pub band: [f64; 2],
    #[serde(default = "default_one")]
    pub u0: f64,
    #[serde(default = "default_z_max")]
    pub z_max: f64,
    #[serde(default = "default_sl_dim")]
    pub dim: usize,
    pub x: Option<Vec<f64>>,
    #[serde(default = "default_test_fn")]
    pub f: String,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_sl_paths")]
    pub n_paths: usize,
    /// Truncation of `z` for the `Γ` path (finite intensity).
    #[serde(default = "default_path_z_max")]
    pub path_z_max: f64,
}

fn default_alpha() -> String {
    "1 + 0.3*sin(x1)".into()
}
fn default_band() -> [f64; 2] {
    [0.6, 1.4]
}
fn default_one() -> f64 {
    1.0
}
fn default_z_max() -> f64 {
    1e4
}
fn default_sl_dim() -> usize {
    1
}
fn default_test_fn() -> String {
    "cos(x1)".into()
}
fn default_h() -> f64 {
    1e-3
}
fn default_sl_paths() -> usize {
    100_000
}
fn default_path_z_max() -> f64 {
    30.0
}

impl Default for StableLikeSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            band: default_band(),
            u0: default_one(),
            z_max: default_z_max(),
            dim: default_sl_dim(),
            x: None,
            f: default_test_fn(),
            h: default_h(),
            n_paths: default_sl_paths(),
            path_z_max: default_path_z_max(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: None,
            scenario: default_scenario(),
            model: ModelSection::default(),
            structure: StructureSection::default(),
            numerics: NumericsSection::default(),
            custom: None,
            mckean: McKeanSection::default(),
            stable_like: StableLikeSection::default(),
        }
    }
}

/// Manifest layout; only `config` is read back.
#[derive(Debug, Deserialize)]
struct ManifestInput {
    config: RunConfig,
}

fn field(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{path}`: {msg}"))
}

fn positive(path: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(path, format!("must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    /// TOML file, or a `.json` run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: ManifestInput = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(m.config)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| field("seed", "required (set it in the config or pass --seed)"))
    }

    /// Field-level checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        if self.threads == Some(0) {
            return Err(field("threads", "must be at least 1"));
        }
        let m = &self.model;
        positive("model.c", m.c)?;
        positive("model.bound", m.bound)?;
        if !(m.beta < 2.0) {
            return Err(field("model.beta", format!("must be < 2, got {}", m.beta)));
        }
        if let Some(e) = m.epsilon {
            if !(e >= 0.0 && e < m.bound) {
                return Err(field("model.epsilon", format!("must lie in [0, bound), got {e}")));
            }
        }
        if let Some(n) = m.expected_jumps {
            positive("model.expected_jumps", n)?;
        }
        if m.epsilon.is_some() && m.expected_jumps.is_some() {
            return Err(field("model.expected_jumps", "give either epsilon or expected_jumps"));
        }
        if let Some(g) = m.g_max {
            positive("model.g_max", g)?;
        }
        let n = &self.numerics;
        if let Some(h) = n.horizon {
            positive("numerics.horizon", h)?;
        }
        if let Some(s) = n.step {
            positive("numerics.step", s)?;
        }
        if let Some(t) = n.t {
            positive("numerics.t", t)?;
        }
        if n.draws < 2 {
            return Err(field("numerics.draws", "must be at least 2"));
        }
        if n.n_paths == 0 {
            return Err(field("numerics.n_paths", "must be positive"));
        }
        if !(n.rank_rel_tol > 0.0 && n.rank_rel_tol < 1.0) {
            return Err(field("numerics.rank_rel_tol", "must lie in (0, 1)"));
        }
        if let Some(eps) = &n.epsilons {
            if eps.is_empty() {
                return Err(field("numerics.epsilons", "must not be empty"));
            }
            for (i, e) in eps.iter().enumerate() {
                if !(*e > 0.0 && e.is_finite()) {
                    return Err(field(&format!("numerics.epsilons[{i}]"), format!("must be positive, got {e}")));
                }
            }
        }
        if let Some(c) = &self.custom {
            if c.state_dim == 0 || c.mark_dim == 0 {
                return Err(field("custom.state_dim", "dimensions must be positive"));
            }
            if c.x0.len() != c.state_dim {
                return Err(field("custom.x0", format!("needs {} entries", c.state_dim)));
            }
            if c.jump.len() != c.state_dim {
                return Err(field("custom.jump", format!("needs {} expressions", c.state_dim)));
            }
            if c.drift.as_ref().is_some_and(|d| d.len() != c.state_dim) {
                return Err(field("custom.drift", format!("needs {} expressions", c.state_dim)));
            }
        }
        let mk = &self.mckean;
        if mk.particles < 10 {
            return Err(field("mckean.particles", "must be at least 10"));
        }
        if mk.picard_iters == 0 {
            return Err(field("mckean.picard_iters", "must be positive"));
        }
        positive("mckean.tolerance", mk.tolerance)?;
        if !(mk.spread >= 0.0) {
            return Err(field("mckean.spread", "must be ≥ 0"));
        }
        let sl = &self.stable_like;
        positive("stable_like.u0", sl.u0)?;
        positive("stable_like.z_max", sl.z_max)?;
        positive("stable_like.path_z_max", sl.path_z_max)?;
        positive("stable_like.h", sl.h)?;
        if sl.n_paths < 2 {
            return Err(field("stable_like.n_paths", "must be at least 2"));
        }
        if !(sl.dim == 1 || sl.dim == 2) {
            return Err(field("stable_like.dim", "must be 1 or 2"));
        }
        if sl.x.as_ref().is_some_and(|x| x.len() != sl.dim) {
            return Err(field("stable_like.x", format!("needs {} entries", sl.dim)));
        }
        Ok(())
    }
}
