//! Experiment configuration, its hash and instance generation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vtqls::dinv::fixtures::{banded_instance_with, log_uniform_spectrum};
use vtqls::dinv::{grover_fixture, DinvSpec, EstimationMode, LinearSystemInstance, Mode};
use vtqls::numerics::{random, re, spectral_decompose, CVec};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumLaw {
    /// `±|λ|` with `|λ|` log-uniform in `[1/κ, 1]`.
    #[default]
    LogUniform,
    /// `per_band` eigenvalues in each clock band `0..bands`.
    Bands,
    /// The search lower-bound instance of [`GroverSpec`].
    Grover,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceSpec {
    pub law: SpectrumLaw,
    pub dim: usize,
    pub kappa: f64,
    pub kappa_s: f64,
    pub bands: usize,
    pub per_band: usize,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec { law: SpectrumLaw::LogUniform, dim: 4, kappa: 27.0, kappa_s: 2.0, bands: 3, per_band: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Ideal,
    ExactMarking,
    #[default]
    Physical,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Mode {
        match m {
            ModeName::Ideal => Mode::IDEAL,
            ModeName::ExactMarking => Mode::EXACT_MARKING,
            ModeName::Physical => Mode::PHYSICAL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationName {
    #[default]
    Exact,
    Stochastic,
}

impl From<EstimationName> for EstimationMode {
    fn from(m: EstimationName) -> EstimationMode {
        match m {
            EstimationName::Exact => EstimationMode::ExactAmplitude,
            EstimationName::Stochastic => EstimationMode::Stochastic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmParams {
    /// Target accuracy of the output state.
    pub eps: f64,
    pub eps_bm: f64,
    pub eps_gpe: f64,
    pub eps_blk: f64,
    pub c: f64,
    pub mode: ModeName,
    /// Multiplies the exact amplitude (or solution norm) handed to the solver.
    pub estimate_scale: Option<f64>,
    pub estimation: EstimationName,
    /// Lower bound on the success probability for norm estimation.
    pub alpha_p: Option<f64>,
}

impl Default for AlgorithmParams {
    fn default() -> Self {
        AlgorithmParams {
            eps: 1e-2,
            eps_bm: 1e-3,
            eps_gpe: 1e-2,
            eps_blk: 1e-3,
            c: 1.001,
            mode: ModeName::Physical,
            estimate_scale: None,
            estimation: EstimationName::Exact,
            alpha_p: None,
        }
    }
}

impl AlgorithmParams {
    pub fn dinv_spec(&self) -> DinvSpec {
        DinvSpec {
            c: self.c,
            eps_bm: self.eps_bm,
            eps_gpe: self.eps_gpe,
            eps_blk: self.eps_blk,
            mode: self.mode.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroverSpec {
    pub dim: usize,
    pub marked: usize,
}

impl Default for GroverSpec {
    fn default() -> Self {
        GroverSpec { dim: 16, marked: 0 }
    }
}

/// Grid for `compare-costs`: spectrum `{1, 1/κ}` with weight `w` of `b` on
/// the small eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub kappas: Vec<f64>,
    pub weights: Vec<f64>,
    pub eps: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { kappas: vec![3.0, 9.0, 27.0, 81.0], weights: vec![1.0, 1e-1, 1e-2, 1e-3, 1e-4], eps: vec![1e-2, 1e-3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    /// Random instances per inequality suite.
    pub instances: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec { instances: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppsSpec {
    pub dim: usize,
    pub t: f64,
    /// Spectral gap for ground-state preparation.
    pub delta: f64,
    pub eps: f64,
    /// Resolution of the `max_τ ‖e^{τA}b‖` grid.
    pub tau_grid: usize,
}

impl Default for AppsSpec {
    fn default() -> Self {
        AppsSpec { dim: 4, t: 1.0, delta: 0.4, eps: 0.02, tau_grid: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub instance: InstanceSpec,
    pub params: AlgorithmParams,
    pub grover: GroverSpec,
    pub sweep: SweepSpec,
    pub suite: SuiteSpec,
    pub apps: AppsSpec,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// First 16 hex digits of the SHA-256 of the config without its output path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Config("this command draws random numbers and needs --seed or \"seed\"".into()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.params;
        for (name, v) in [("eps", p.eps), ("eps_bm", p.eps_bm), ("eps_gpe", p.eps_gpe), ("eps_blk", p.eps_blk)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CliError::Config(format!("params.{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(p.c > 1.0 && p.c < 3.0) {
            return Err(CliError::Config(format!("params.c must lie in (1, 3), got {}", p.c)));
        }
        let i = &self.instance;
        if i.dim == 0 || i.dim > 16 {
            return Err(CliError::Config(format!("instance.dim must lie in 1..=16, got {}", i.dim)));
        }
        if !(i.kappa >= 1.0) || !(i.kappa_s >= 1.0) {
            return Err(CliError::Config("instance.kappa and instance.kappa_s must be at least 1".into()));
        }
        if i.law == SpectrumLaw::Bands && (i.bands == 0 || i.per_band == 0 || i.bands * i.per_band > 16) {
            return Err(CliError::Config("band occupancy needs 1 ≤ bands·per_band ≤ 16".into()));
        }
        if self.sweep.kappas.iter().any(|k| !(*k >= 3.0)) || self.sweep.weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(CliError::Config("sweep needs κ ≥ 3 and weights in (0, 1]".into()));
        }
        if self.sweep.eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(CliError::Config("sweep.eps entries must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Builds the configured instance; deterministic under the seed.
pub fn generate_instance(cfg: &ExperimentConfig) -> Result<LinearSystemInstance, CliError> {
    let spec = &cfg.instance;
    match spec.law {
        SpectrumLaw::Grover => {
            let (inst, _) = grover_fixture(cfg.grover.dim, cfg.grover.marked)
                .map_err(|e| CliError::Generation(e.to_string()))?;
            Ok(inst)
        }
        SpectrumLaw::LogUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.require_seed()?);
            let d = spec.dim;
            let mut eig = log_uniform_spectrum(&mut rng, d, 1.0 / spec.kappa, 1.0);
            // pin both ends so the condition number is the requested one
            eig[0] = eig[0].signum();
            if d > 1 {
                eig[1] = eig[1].signum() / spec.kappa;
            }
            let a = random::hermitian_with_spectrum(&mut rng, &eig);
            let b = random::state(&mut rng, d);
            LinearSystemInstance::new(a, b).map_err(|e| CliError::Generation(e.to_string()))
        }
        SpectrumLaw::Bands => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.require_seed()?);
            Ok(banded_instance_with(&mut rng, spec.bands, spec.per_band))
        }
    }
}

/// Spectrum `{1, 1/κ}` in a random eigenbasis, `b = √(1−w)|v_1⟩ + √w|v_{1/κ}⟩`.
pub fn sweep_instance<R: Rng>(rng: &mut R, kappa: f64, w: f64) -> LinearSystemInstance {
    let a = random::hermitian_with_spectrum(rng, &[1.0, 1.0 / kappa]);
    let sp = spectral_decompose(&a).expect("generated matrices are Hermitian");
    let small = usize::from(sp.eigenvalues[1].abs() < sp.eigenvalues[0].abs());
    let b: CVec = sp.vector(1 - small) * re((1.0 - w).sqrt()) + sp.vector(small) * re(w.sqrt());
    LinearSystemInstance::new(a, b).expect("shapes agree")
}
