//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub algorithm: AlgorithmTag,
    pub regime: RegimeTag,
    #[serde(default)]
    pub constants: ConstantsConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    pub max_iter: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub reference: Option<ReferenceConfig>,
    /// Iteration window `[lo, hi]` of the rate fits in the report.
    #[serde(default)]
    pub fit_window: Option<[usize; 2]>,
}

fn default_log_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: ProblemName,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemName {
    Dti,
    Quadratic,
    Tv1d,
    FbSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmTag {
    FullDualV1,
    FullDualV2,
    FullPrimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeTag {
    Fixed,
    Acc2,
    Acc,
    Lin,
}

/// A value given once for every block or block by block.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum PerBlock {
    All(f64),
    Each(Vec<f64>),
}

impl PerBlock {
    pub fn expand(&self, n: usize, field: &str) -> Result<Vec<f64>, CliError> {
        match self {
            PerBlock::All(v) => Ok(vec![*v; n]),
            PerBlock::Each(v) if v.len() == n => Ok(v.clone()),
            PerBlock::Each(v) => Err(CliError::Config(format!("{field}: expected {n} entries, got {}", v.len()))),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            PerBlock::All(v) => std::slice::from_ref(v),
            PerBlock::Each(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsConfig {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Defaults to `kappa`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub gamma_tilde_g: Option<PerBlock>,
    /// Dual growth rate: `γ̄_{F*}` for the full-dual algorithms, `γ̃_{F*}` for full-primal.
    #[serde(default)]
    pub gamma_dual: Option<PerBlock>,
    #[serde(default)]
    pub alpha_y: Option<f64>,
    #[serde(default)]
    pub zeta: Option<PerBlock>,
    /// Exponent of the three-point condition.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Initial primal steps; derived from the operator norm when absent.
    #[serde(default)]
    pub tau: Option<PerBlock>,
}

fn default_kappa() -> f64 {
    0.5
}

fn default_p() -> f64 {
    2.0
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        ConstantsConfig {
            kappa: default_kappa(),
            delta: None,
            gamma_tilde_g: None,
            gamma_dual: None,
            alpha_y: None,
            zeta: None,
            p: default_p(),
            tau: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingModeTag {
    #[default]
    Full,
    Bernoulli,
    FixedCount,
}

/// Sampling of the randomised side: primal blocks for the full-dual
/// algorithms, dual blocks for the full-primal one.
#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default)]
    pub mode: SamplingModeTag,
    #[serde(default)]
    pub probability: Option<PerBlock>,
    #[serde(default)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    ClosedForm,
    LongRun,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub mode: ReferenceMode,
    /// Defaults to `100 × max_iter`.
    #[serde(default)]
    pub long_run_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DtiParams {
    #[serde(default = "dti_dims")]
    pub dims: [usize; 3],
    #[serde(default = "dti_noise")]
    pub noise: f64,
    #[serde(default = "dti_alpha")]
    pub alpha: f64,
    pub setup: String,
    /// Seed of the synthetic data; the run seed when absent.
    #[serde(default)]
    pub data_seed: Option<u64>,
    /// Dataset written by `export-data`, relative to the config file.
    #[serde(default)]
    pub data_file: Option<PathBuf>,
}

fn dti_dims() -> [usize; 3] {
    [8, 8, 8]
}

fn dti_noise() -> f64 {
    0.3
}

fn dti_alpha() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticParams {
    #[serde(default = "quad_primal")]
    pub primal_sizes: Vec<usize>,
    #[serde(default = "quad_dual")]
    pub dual_sizes: Vec<usize>,
    #[serde(default = "one")]
    pub gamma_g: f64,
    #[serde(default = "one")]
    pub gamma_f: f64,
    #[serde(default)]
    pub instance_seed: u64,
}

fn quad_primal() -> Vec<usize> {
    vec![2, 2, 2, 2]
}

fn quad_dual() -> Vec<usize> {
    vec![2, 2, 2]
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Tv1dParams {
    #[serde(default = "tv_n")]
    pub n: usize,
    #[serde(default = "tv_noise")]
    pub noise: f64,
    #[serde(default = "tv_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "four")]
    pub primal_blocks: usize,
    #[serde(default = "four")]
    pub dual_blocks: usize,
    #[serde(default)]
    pub signal_seed: u64,
}

fn tv_n() -> usize {
    64
}

fn tv_noise() -> f64 {
    0.1
}

fn tv_alpha() -> f64 {
    0.3
}

fn four() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FbSumParams {
    #[serde(default = "fb_nx")]
    pub nx: usize,
    #[serde(default = "two")]
    pub primal_blocks: usize,
    #[serde(default = "four")]
    pub n_terms: usize,
    #[serde(default = "three")]
    pub rows: usize,
    #[serde(default = "half")]
    pub gamma: f64,
    #[serde(default)]
    pub instance_seed: u64,
}

fn fb_nx() -> usize {
    8
}

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

fn half() -> f64 {
    0.5
}

/// Problem parameters after schema checking.
#[derive(Debug, Clone, PartialEq)]
pub enum ProblemParams {
    Dti(DtiParams),
    Quadratic(QuadraticParams),
    Tv1d(Tv1dParams),
    FbSum(FbSumParams),
}

/// Keys that only change the block structure; variants in a comparison may differ in them.
pub const BLOCK_KEYS: [&str; 5] = ["setup", "primal_sizes", "dual_sizes", "primal_blocks", "dual_blocks"];

fn params_as<T: for<'de> Deserialize<'de>>(t: &toml::Table) -> Result<T, CliError> {
    toml::Value::Table(t.clone())
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(format!("problem.params: {}", e.message())))
}

impl ProblemConfig {
    pub fn parsed(&self) -> Result<ProblemParams, CliError> {
        Ok(match self.name {
            ProblemName::Dti => ProblemParams::Dti(params_as(&self.params)?),
            ProblemName::Quadratic => ProblemParams::Quadratic(params_as(&self.params)?),
            ProblemName::Tv1d => ProblemParams::Tv1d(params_as(&self.params)?),
            ProblemName::FbSum => ProblemParams::FbSum(params_as(&self.params)?),
        })
    }

    /// Parameters with the block-structure keys removed.
    pub fn shared_part(&self) -> (ProblemName, toml::Table) {
        let mut t = self.params.clone();
        for k in BLOCK_KEYS {
            t.remove(k);
        }
        (self.name, t)
    }
}

fn check(ok: bool, field: &str, msg: impl std::fmt::Display) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("{field}: {msg}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn delta(&self) -> f64 {
        self.constants.delta.unwrap_or(self.constants.kappa)
    }

    /// Field-level checks beyond the schema.
    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.constants;
        check((0.0..1.0).contains(&c.kappa), "constants.kappa", format!("must lie in [0, 1), got {}", c.kappa))?;
        let d = self.delta();
        check(
            (0.0..=c.kappa).contains(&d),
            "constants.delta",
            format!("must lie in [0, kappa = {}], got {d}", c.kappa),
        )?;
        for (name, v) in [("constants.gamma_tilde_g", &c.gamma_tilde_g), ("constants.gamma_dual", &c.gamma_dual)] {
            if let Some(v) = v {
                check(
                    v.values().iter().all(|g| *g >= 0.0 && g.is_finite()),
                    name,
                    "entries must be finite and non-negative",
                )?;
            }
        }
        if let Some(t) = &c.tau {
            check(t.values().iter().all(|t| *t > 0.0 && t.is_finite()), "constants.tau", "entries must be positive")?;
        }
        if let Some(a) = c.alpha_y {
            check(a >= 0.0, "constants.alpha_y", format!("must be non-negative, got {a}"))?;
        }
        if let Some(z) = &c.zeta {
            check(z.values().iter().all(|z| *z >= 0.0), "constants.zeta", "entries must be non-negative")?;
        }
        check(c.p > 1.0 && c.p <= 2.0, "constants.p", format!("must lie in (1, 2], got {}", c.p))?;
        check(self.log_every >= 1, "log_every", "must be at least 1")?;
        check(!self.seeds.is_empty(), "seeds", "need at least one seed")?;
        let s = &self.sampling;
        match s.mode {
            SamplingModeTag::Full => {
                check(s.probability.is_none() && s.count.is_none(), "sampling", "full sampling takes no probability or count")?
            }
            SamplingModeTag::Bernoulli => {
                let p = s
                    .probability
                    .as_ref()
                    .ok_or_else(|| CliError::Config("sampling.probability: required for bernoulli sampling".into()))?;
                check(
                    p.values().iter().all(|p| *p > 0.0 && *p <= 1.0),
                    "sampling.probability",
                    "entries must lie in (0, 1]",
                )?;
                check(s.count.is_none(), "sampling.count", "only used with fixed_count sampling")?;
            }
            SamplingModeTag::FixedCount => {
                check(s.count.is_some_and(|k| k >= 1), "sampling.count", "fixed_count sampling needs count >= 1")?;
                check(s.probability.is_none(), "sampling.probability", "only used with bernoulli sampling")?;
            }
        }
        if let Some(r) = &self.reference {
            if let Some(n) = r.long_run_iters {
                check(n >= 1, "reference.long_run_iters", "must be at least 1")?;
                check(r.mode == ReferenceMode::LongRun, "reference.long_run_iters", "only used with mode = \"long_run\"")?;
            }
        }
        if let Some([lo, hi]) = self.fit_window {
            check(lo < hi, "fit_window", format!("need lo < hi, got [{lo}, {hi}]"))?;
        }
        self.problem.parsed()?;
        Ok(())
    }
}

/// A configuration together with where it came from.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Short name used in tables and default output paths.
    pub label: String,
    /// Directory of the config file; relative paths resolve against it.
    pub base_dir: PathBuf,
    /// Source file, if any.
    pub path: Option<PathBuf>,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config = ExperimentConfig::from_toml(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into());
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Experiment { config, label, base_dir, path: Some(path.to_path_buf()) })
    }

    pub fn from_config(config: ExperimentConfig, label: &str, base_dir: &Path) -> Result<Self, CliError> {
        config.validate()?;
        Ok(Experiment { config, label: label.into(), base_dir: base_dir.into(), path: None })
    }

    /// `output_dir` resolved against `root`, or `root/<label>` when unset.
    pub fn output_dir(&self, root: &Path) -> PathBuf {
        match &self.config.output_dir {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.label),
        }
    }
}
