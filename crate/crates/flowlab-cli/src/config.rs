//! Experiment configuration: one JSON document drives every subcommand.
//! Documents are schema-checked before any work starts (unknown keys are
//! rejected) and identified by a canonical hash that ignores key order.
//! Relative paths inside a document resolve against the document's directory.

use std::path::{Path, PathBuf};

use flowlab::dist::MixtureSpec;
use flowlab::sched::{VeSchedule, VpSchedule};
use flowlab::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const METRIC_NAMES: [&str; 4] = ["straightness", "collapse", "isoline", "energy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Where artifacts go, relative to the config file's directory.
    pub output_dir: String,
    pub target: TargetSpec,
    pub ve_schedule: VeSpec,
    #[serde(default)]
    pub vp_schedule: Option<VpSpec>,
    #[serde(default)]
    pub pairs: Option<PairsSpec>,
    /// Default network; individual methods may override.
    pub net: NetSpec,
    pub methods: Vec<MethodSpec>,
    pub sampling: SamplingSpec,
    pub metrics: Vec<String>,
    #[serde(default)]
    pub probes: ProbesSpec,
    #[serde(default)]
    pub otstudy: Option<OtStudySpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Two components at ±offset on the first two axes, one tight, one broad.
    OpposedPair { dim: usize, offset: f64, tight_std: f64, broad_std: f64 },
    Single { mean: Vec<f64>, stds: Vec<f64> },
}

impl TargetSpec {
    pub fn build(&self) -> Result<MixtureSpec> {
        match self {
            TargetSpec::OpposedPair { dim, offset, tight_std, broad_std } => {
                MixtureSpec::opposed_pair(*dim, *offset, *tight_std, *broad_std)
            }
            TargetSpec::Single { mean, stds } => {
                MixtureSpec::single(mean.clone(), stds.clone())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::OpposedPair { dim, .. } => *dim,
            TargetSpec::Single { mean, .. } => mean.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VeSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl VeSpec {
    pub fn build(&self) -> Result<VeSchedule> {
        VeSchedule::new(self.sigma_min, self.sigma_max, self.rho, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VpSpec {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl VpSpec {
    pub fn build(&self) -> Result<VpSchedule> {
        VpSchedule::linear(self.beta_start, self.beta_end, self.steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSpec {
    /// Total records to generate; the trailing `holdout` rows are reserved
    /// for probes and never trained on.
    pub count: usize,
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub holdout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    /// Closed-form mixture score of the configured target.
    Analytic,
    /// A previously trained score checkpoint, relative to the config file.
    Checkpoint { path: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub embed: usize,
    #[serde(default = "default_activation")]
    pub activation: String,
    /// Data scale for input preconditioning.
    #[serde(default = "default_sigma_data")]
    pub sigma_data: f64,
}

fn default_activation() -> String {
    "silu".to_string()
}

fn default_sigma_data() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    /// One of `dsm`, `ddpm`, `cfm`, `botcfm`, `rectflow:<k>`, `lmm`,
    /// `lmm+adv`, `lmm+adv+sot`.
    pub method: String,
    /// Artifact name; defaults to the method string with separators mapped
    /// to filename-safe characters. Must be unique within the document.
    #[serde(default)]
    pub label: Option<String>,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// `log_uniform` or `schedule_uniform`; each method has a default.
    #[serde(default)]
    pub sigma_law: Option<String>,
    #[serde(default)]
    pub net: Option<NetSpec>,
    #[serde(default)]
    pub curve_every: Option<usize>,
    /// Rectification only: coupled pairs regenerated per round.
    #[serde(default)]
    pub flow_pairs: Option<usize>,
    /// Rectification only: Euler steps used to regenerate couplings.
    #[serde(default)]
    pub flow_steps: Option<usize>,
    /// Adversarial only: fine-tuning iterations after the regression phase.
    #[serde(default)]
    pub finetune_iters: Option<usize>,
    #[serde(default)]
    pub disc_hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub disc_lr: Option<f64>,
    #[serde(default)]
    pub lambda_lines: Option<f64>,
    #[serde(default)]
    pub non_saturating: Option<bool>,
    /// Adversarial only: warm-start from this earlier method's checkpoint
    /// instead of pretraining (`iters` may then be 0).
    #[serde(default)]
    pub init_from: Option<String>,
    /// Step-set restriction: schedule indices visited at inference time.
    #[serde(default)]
    pub inference_steps: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MethodKind {
    Dsm,
    Ddpm,
    Cfm,
    BotCfm,
    Rectflow { rounds: usize },
    Lmm,
    LmmAdv { sot: bool },
}

impl MethodKind {
    pub fn parse(s: &str) -> Result<MethodKind> {
        match s {
            "dsm" => Ok(MethodKind::Dsm),
            "ddpm" => Ok(MethodKind::Ddpm),
            "cfm" => Ok(MethodKind::Cfm),
            "botcfm" => Ok(MethodKind::BotCfm),
            "lmm" => Ok(MethodKind::Lmm),
            "lmm+adv" => Ok(MethodKind::LmmAdv { sot: false }),
            "lmm+adv+sot" => Ok(MethodKind::LmmAdv { sot: true }),
            other => {
                if let Some(k) = other.strip_prefix("rectflow:") {
                    let rounds: usize = k.parse().map_err(|_| {
                        Error::invalid(format!("bad rectification count in {other:?}"))
                    })?;
                    if rounds == 0 {
                        return Err(Error::invalid("rectflow needs at least one round"));
                    }
                    Ok(MethodKind::Rectflow { rounds })
                } else {
                    Err(Error::invalid(format!(
                        "unknown method {other:?}; expected dsm, ddpm, cfm, botcfm, \
                         rectflow:<k>, lmm, lmm+adv, or lmm+adv+sot"
                    )))
                }
            }
        }
    }

    /// Trains on the cached teacher-pair dataset.
    pub fn needs_pairs(&self) -> bool {
        matches!(self, MethodKind::Lmm | MethodKind::LmmAdv { .. })
    }

    pub fn is_endpoint(&self) -> bool {
        matches!(self, MethodKind::Lmm | MethodKind::LmmAdv { .. })
    }
}

impl MethodSpec {
    pub fn kind(&self) -> Result<MethodKind> {
        MethodKind::parse(&self.method)
    }

    pub fn label(&self) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None => self.method.replace(':', "").replace('+', "-"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    /// Trajectories per method in evaluation; at least 2.
    pub trajectories: usize,
    /// Steps for Euler integration of velocity fields.
    pub euler_steps: usize,
    /// Schedule indices for few-step endpoint sampling, strictly increasing.
    pub lmm_steps: Vec<usize>,
    /// Dump every evaluated trajectory to CSV (large).
    #[serde(default)]
    pub write_trajectories: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbesSpec {
    #[serde(default = "default_collapse_samples")]
    pub collapse_samples: usize,
    #[serde(default = "default_isoline_pairs")]
    pub isoline_pairs: usize,
    #[serde(default = "default_isoline_sigma_points")]
    pub isoline_sigma_points: usize,
    #[serde(default = "default_energy_permutations")]
    pub energy_permutations: usize,
}

fn default_collapse_samples() -> usize {
    4096
}
fn default_isoline_pairs() -> usize {
    1024
}
fn default_isoline_sigma_points() -> usize {
    12
}
fn default_energy_permutations() -> usize {
    99
}

impl Default for ProbesSpec {
    fn default() -> Self {
        ProbesSpec {
            collapse_samples: default_collapse_samples(),
            isoline_pairs: default_isoline_pairs(),
            isoline_sigma_points: default_isoline_sigma_points(),
            energy_permutations: default_energy_permutations(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtStudySpec {
    pub ds: Vec<usize>,
    pub ns: Vec<usize>,
    pub trials: usize,
}

impl ExperimentConfig {
    /// Full schema check. Called by [`load_config`]; every subcommand sees
    /// only validated documents.
    pub fn validate(&self) -> Result<()> {
        self.target.build()?;
        let ve = self.ve_schedule.build()?;
        if let Some(vp) = &self.vp_schedule {
            vp.build()?;
        }
        if self.output_dir.is_empty() {
            return Err(Error::invalid("output_dir cannot be empty"));
        }
        check_net("net", &self.net)?;

        if self.methods.is_empty() {
            return Err(Error::invalid("methods list cannot be empty"));
        }
        let mut labels = Vec::new();
        for spec in &self.methods {
            let label = spec.label();
            check_label(&label)?;
            if labels.contains(&label) {
                return Err(Error::invalid(format!("duplicate method label {label:?}")));
            }
            self.check_method(spec, &label, &labels, &ve)?;
            labels.push(label);
        }

        if let Some(pairs) = &self.pairs {
            if pairs.count < 2 {
                return Err(Error::invalid("pairs.count must be at least 2"));
            }
            if pairs.holdout >= pairs.count {
                return Err(Error::invalid("pairs.holdout must leave training records"));
            }
            if let TeacherSpec::Checkpoint { path } = &pairs.teacher {
                if path.is_empty() {
                    return Err(Error::invalid("teacher checkpoint path cannot be empty"));
                }
            }
        }

        self.check_sampling(&ve)?;
        self.check_metrics()?;

        if self.probes.isoline_sigma_points < 2 {
            return Err(Error::invalid("isoline probe needs at least 2 noise levels"));
        }
        if self.probes.energy_permutations == 0 {
            return Err(Error::invalid("energy null needs at least 1 permutation"));
        }

        if let Some(ot) = &self.otstudy {
            if ot.ds.is_empty() || ot.ns.is_empty() {
                return Err(Error::invalid("otstudy needs nonempty dimension and batch lists"));
            }
            if ot.ds.iter().any(|&d| d == 0) || ot.ns.iter().any(|&n| n == 0) {
                return Err(Error::invalid("otstudy dimensions and batch sizes must be positive"));
            }
            if ot.trials < 100 {
                return Err(Error::invalid("otstudy needs at least 100 trials"));
            }
        }
        Ok(())
    }

    fn check_method(
        &self,
        spec: &MethodSpec,
        label: &str,
        earlier: &[String],
        ve: &VeSchedule,
    ) -> Result<()> {
        let kind = spec.kind()?;
        let ctx = |msg: &str| Error::invalid(format!("method {label:?}: {msg}"));

        if spec.batch == 0 {
            return Err(ctx("batch must be positive"));
        }
        if !(spec.lr > 0.0) {
            return Err(ctx("lr must be positive"));
        }
        if let Some(law) = &spec.sigma_law {
            if law != "log_uniform" && law != "schedule_uniform" {
                return Err(ctx("sigma_law must be log_uniform or schedule_uniform"));
            }
        }
        if let Some(net) = &spec.net {
            check_net(&format!("method {label:?} net"), net)?;
        }
        if spec.curve_every == Some(0) {
            return Err(ctx("curve_every must be positive"));
        }

        let rectflow = matches!(kind, MethodKind::Rectflow { .. });
        let adv = matches!(kind, MethodKind::LmmAdv { .. });
        let sot = matches!(kind, MethodKind::LmmAdv { sot: true });

        if rectflow {
            match spec.flow_pairs {
                Some(n) if n >= 2 => {}
                Some(_) => return Err(ctx("flow_pairs must be at least 2")),
                None => return Err(ctx("rectflow needs flow_pairs")),
            }
            match spec.flow_steps {
                Some(n) if n >= 1 => {}
                _ => return Err(ctx("rectflow needs flow_steps >= 1")),
            }
        } else {
            if spec.flow_pairs.is_some() || spec.flow_steps.is_some() {
                return Err(ctx("flow_pairs/flow_steps apply only to rectflow"));
            }
        }

        if kind.needs_pairs() && self.pairs.is_none() {
            return Err(ctx("needs a pairs section (trains on cached teacher pairs)"));
        }

        if adv {
            match spec.finetune_iters {
                Some(_) => {}
                None => return Err(ctx("adversarial fine-tuning needs finetune_iters")),
            }
            match &spec.disc_hidden {
                Some(h) if !h.is_empty() && h.iter().all(|&w| w > 0) => {}
                _ => return Err(ctx("needs nonempty disc_hidden with positive widths")),
            }
            match spec.disc_lr {
                Some(lr) if lr > 0.0 => {}
                _ => return Err(ctx("needs disc_lr > 0")),
            }
            match spec.lambda_lines {
                Some(l) if l > 0.0 => {}
                _ => return Err(ctx("needs lambda_lines > 0")),
            }
            if let Some(from) = &spec.init_from {
                let found = self.methods.iter().find(|m| {
                    earlier.contains(&m.label()) && &m.label() == from
                });
                match found {
                    Some(m) if m.kind().map(|k| k.is_endpoint()).unwrap_or(false) => {}
                    Some(_) => return Err(ctx("init_from must name an endpoint method")),
                    None => {
                        return Err(ctx("init_from must name an earlier method label"))
                    }
                }
            }
        } else {
            for (set, name) in [
                (spec.finetune_iters.is_some(), "finetune_iters"),
                (spec.disc_hidden.is_some(), "disc_hidden"),
                (spec.disc_lr.is_some(), "disc_lr"),
                (spec.lambda_lines.is_some(), "lambda_lines"),
                (spec.non_saturating.is_some(), "non_saturating"),
                (spec.init_from.is_some(), "init_from"),
            ] {
                if set {
                    return Err(ctx(&format!("{name} applies only to lmm+adv methods")));
                }
            }
        }

        if sot {
            match &spec.inference_steps {
                Some(steps) => check_step_indices(steps, ve)
                    .map_err(|e| ctx(&format!("inference_steps: {e}")))?,
                None => return Err(ctx("lmm+adv+sot needs inference_steps")),
            }
        } else if spec.inference_steps.is_some() {
            return Err(ctx("inference_steps applies only to lmm+adv+sot"));
        }

        if matches!(kind, MethodKind::Ddpm) && self.vp_schedule.is_none() {
            return Err(ctx("needs a vp_schedule section"));
        }
        Ok(())
    }

    fn check_sampling(&self, ve: &VeSchedule) -> Result<()> {
        let s = &self.sampling;
        if s.trajectories < 2 {
            return Err(Error::invalid("sampling.trajectories must be at least 2"));
        }
        if s.euler_steps == 0 {
            return Err(Error::invalid("sampling.euler_steps must be positive"));
        }
        check_step_indices(&s.lmm_steps, ve)
            .map_err(|e| Error::invalid(format!("sampling.lmm_steps: {e}")))
    }

    fn check_metrics(&self) -> Result<()> {
        let kinds: Vec<MethodKind> =
            self.methods.iter().map(|m| m.kind()).collect::<Result<_>>()?;
        for name in &self.metrics {
            if !METRIC_NAMES.contains(&name.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown metric {name:?}; expected one of {METRIC_NAMES:?}"
                )));
            }
            if self.metrics.iter().filter(|m| *m == name).count() > 1 {
                return Err(Error::invalid(format!("metric {name:?} listed twice")));
            }
        }
        if self.metrics.iter().any(|m| m == "collapse") {
            for needed in [MethodKind::Dsm, MethodKind::Ddpm, MethodKind::Cfm] {
                if !kinds.contains(&needed) {
                    return Err(Error::invalid(
                        "collapse probes need dsm, ddpm, and cfm methods configured",
                    ));
                }
            }
        }
        if self.metrics.iter().any(|m| m == "isoline") {
            if !kinds.iter().any(|k| k.is_endpoint()) {
                return Err(Error::invalid("isoline probe needs an endpoint method"));
            }
            let holdout = self.pairs.as_ref().map(|p| p.holdout).unwrap_or(0);
            if holdout < self.probes.isoline_pairs {
                return Err(Error::invalid(format!(
                    "isoline probe wants {} held-out pairs but pairs.holdout is {holdout}",
                    self.probes.isoline_pairs
                )));
            }
        }
        Ok(())
    }
}

fn check_net(what: &str, net: &NetSpec) -> Result<()> {
    if net.hidden.is_empty() || net.hidden.iter().any(|&w| w == 0) {
        return Err(Error::invalid(format!("{what}: hidden widths must be nonempty and positive")));
    }
    if net.embed == 0 || net.embed % 2 != 0 {
        return Err(Error::invalid(format!("{what}: embed width must be positive and even")));
    }
    if net.activation != "silu" && net.activation != "linear" {
        return Err(Error::invalid(format!("{what}: activation must be silu or linear")));
    }
    if !(net.sigma_data > 0.0) {
        return Err(Error::invalid(format!("{what}: sigma_data must be positive")));
    }
    Ok(())
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() {
        return Err(Error::invalid("method label cannot be empty"));
    }
    let ok = label
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
    if !ok {
        return Err(Error::invalid(format!(
            "method label {label:?} may use only alphanumerics, '-', '_', '.'"
        )));
    }
    Ok(())
}

fn check_step_indices(steps: &[usize], ve: &VeSchedule) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::invalid("step index list cannot be empty"));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("step indices must strictly increase"));
    }
    if let Some(&last) = steps.last() {
        if last >= ve.steps {
            return Err(Error::invalid(format!(
                "step index {last} outside the {}-level schedule",
                ve.steps
            )));
        }
    }
    Ok(())
}

/// The canonical form: keys sorted, no insignificant whitespace. Two
/// documents that differ only in key order canonicalise identically.
pub fn canonical_json(text: &str) -> Result<String> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::invalid(format!("config is not valid JSON: {e}")))?;
    Ok(value.to_string())
}

pub fn config_hash_of(text: &str) -> Result<String> {
    let canonical = canonical_json(text)?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(hex(&hasher.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A parsed, validated document plus the context needed to act on it.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Canonical content hash, independent of key order.
    pub hash: String,
    /// Original file text, preserved byte for byte.
    pub raw: String,
    /// Directory the document lives in; relative paths resolve here.
    pub base_dir: PathBuf,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: format!("cannot read config: {e}"),
    })?;
    parse_config(&raw, path)
}

/// Parses and validates config text as if it lived at `path`.
pub fn parse_config(raw: &str, path: &Path) -> Result<LoadedConfig> {
    let hash = config_hash_of(raw)?;
    let config: ExperimentConfig =
        serde_json::from_str(raw).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: format!("config rejected: {e}"),
        })?;
    config.validate().map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let base_dir = match path.parent() {
        Some(p) if p.as_os_str().is_empty() => PathBuf::from("."),
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("."),
    };
    Ok(LoadedConfig { config, hash, raw: raw.to_string(), base_dir })
}

impl LoadedConfig {
    /// Output directory: the `--out` override verbatim, else the document's
    /// `output_dir` resolved against the document's directory.
    pub fn out_dir(&self, override_out: Option<&Path>) -> PathBuf {
        match override_out {
            Some(p) => p.to_path_buf(),
            None => self.base_dir.join(&self.config.output_dir),
        }
    }

    /// Resolves a config-relative path (e.g. a teacher checkpoint).
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
