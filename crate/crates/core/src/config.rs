//! Experiment configuration as flat `key=value` text.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so
//! command-line overrides are applied by calling [`ExperimentConfig::set`]
//! after parsing the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::das::{DasConfig, NeighborRule};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Augment, ModelConfig};
use crate::optim::LspConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Baseline,
    Lsp,
    Das,
    LspDas,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Lsp, Method::Das, Method::LspDas];

    pub fn uses_lsp(self) -> bool {
        matches!(self, Method::Lsp | Method::LspDas)
    }

    pub fn uses_das(self) -> bool {
        matches!(self, Method::Das | Method::LspDas)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Baseline => "baseline",
            Method::Lsp => "lsp",
            Method::Das => "das",
            Method::LspDas => "lsp+das",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Method::Baseline),
            "lsp" => Ok(Method::Lsp),
            "das" => Ok(Method::Das),
            "lsp+das" | "lsp_das" | "full" => Ok(Method::LspDas),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected baseline, lsp, das or lsp+das)"
            ))),
        }
    }
}

/// Anchor budget rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaRule {
    /// `round(|D_l| / |Y_l|)`
    Auto,
    /// Quantile of the confident counts.
    Dynamic,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthConfig),
    /// Directory written by `synth` or [`crate::data::save_dir`].
    Dir(PathBuf),
    Files {
        features: PathBuf,
        labels: PathBuf,
        old_classes: Vec<usize>,
        num_classes: Option<usize>,
        split_seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagConfig {
    pub enabled: bool,
    /// Samples in the fixed evaluation batch.
    pub probe_size: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    pub trace_probes: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probe_size: 128,
            power_iters: 100,
            power_tol: 1e-4,
            trace_probes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub data: DataSource,
    /// Epochs of the initial phase.
    pub epochs: usize,
    /// Epochs of the anchor phase.
    pub anchor_epochs: usize,
    pub batch_size: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub projection_hidden: Vec<usize>,
    pub projection_dim: usize,
    pub relu_output: bool,
    pub freeze_encoder: bool,
    pub loss: LossConfig,
    pub lsp: LspConfig,
    pub das: DasConfig,
    pub eta: EtaRule,
    pub augment: Augment,
    pub diag: DiagConfig,
    /// A run fails when more than this share of steps abort numerically.
    pub max_abort_fraction: f64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1);
        Self {
            method: Method::LspDas,
            seed: 0,
            data: DataSource::Synth(SynthConfig::default()),
            epochs: 50,
            anchor_epochs: 50,
            batch_size: 128,
            encoder_hidden: m.encoder_hidden,
            feature_dim: m.feature_dim,
            projection_hidden: m.projection_hidden,
            projection_dim: m.projection_dim,
            relu_output: m.relu_output,
            freeze_encoder: m.freeze_encoder_except_last,
            loss: LossConfig::default(),
            lsp: LspConfig::default(),
            das: DasConfig::default(),
            eta: EtaRule::Auto,
            augment: Augment::default(),
            diag: DiagConfig::default(),
            max_abort_fraction: 0.01,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::format(path, msg),
            other => other,
        })
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    fn synth_mut(&mut self) -> &mut SynthConfig {
        if !matches!(self.data, DataSource::Synth(_)) {
            self.data = DataSource::Synth(SynthConfig::default());
        }
        match &mut self.data {
            DataSource::Synth(s) => s,
            _ => unreachable!(),
        }
    }

    fn files_mut(&mut self) -> (&mut PathBuf, &mut PathBuf, &mut Vec<usize>, &mut Option<usize>, &mut u64) {
        if !matches!(self.data, DataSource::Files { .. }) {
            self.data = DataSource::Files {
                features: PathBuf::new(),
                labels: PathBuf::new(),
                old_classes: Vec::new(),
                num_classes: None,
                split_seed: 0,
            };
        }
        match &mut self.data {
            DataSource::Files {
                features,
                labels,
                old_classes,
                num_classes,
                split_seed,
            } => (features, labels, old_classes, num_classes, split_seed),
            _ => unreachable!(),
        }
    }

    /// Assign one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "anchor_epochs" => self.anchor_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "max_abort_fraction" => self.max_abort_fraction = parse(key, v)?,

            "synth.classes" => self.synth_mut().classes = parse(key, v)?,
            "synth.old" => self.synth_mut().old = parse(key, v)?,
            "synth.per_class" => self.synth_mut().per_class = parse(key, v)?,
            "synth.dim" => self.synth_mut().dim = parse(key, v)?,
            "synth.std" => self.synth_mut().std = parse(key, v)?,
            "synth.separation" => self.synth_mut().separation = parse(key, v)?,
            "synth.seed" => self.synth_mut().seed = parse(key, v)?,
            "synth.long_tail" => {
                self.synth_mut().long_tail = match v {
                    "" | "off" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "data.dir" => self.data = DataSource::Dir(PathBuf::from(v)),
            "data.features" => *self.files_mut().0 = PathBuf::from(v),
            "data.labels" => *self.files_mut().1 = PathBuf::from(v),
            "data.old_classes" => *self.files_mut().2 = parse_list(key, v)?,
            "data.num_classes" => *self.files_mut().3 = Some(parse(key, v)?),
            "data.split_seed" => *self.files_mut().4 = parse(key, v)?,

            "model.encoder_hidden" => self.encoder_hidden = parse_list(key, v)?,
            "model.feature_dim" => self.feature_dim = parse(key, v)?,
            "model.projection_hidden" => self.projection_hidden = parse_list(key, v)?,
            "model.projection_dim" => self.projection_dim = parse(key, v)?,
            "model.relu_output" => self.relu_output = parse(key, v)?,
            "model.freeze_encoder" => self.freeze_encoder = parse(key, v)?,

            "loss.tau_unsup" => self.loss.tau_unsup = parse(key, v)?,
            "loss.tau_sup" => self.loss.tau_sup = parse(key, v)?,
            "loss.tau_student" => self.loss.tau_student = parse(key, v)?,
            "loss.tau_teacher_initial" => self.loss.tau_teacher_initial = parse(key, v)?,
            "loss.tau_teacher_final" => self.loss.tau_teacher_final = parse(key, v)?,
            "loss.teacher_warmup" => self.loss.teacher_warmup_epochs = parse(key, v)?,
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.entropy_weight" => self.loss.entropy_weight = parse(key, v)?,

            "lsp.rho" => self.lsp.rho = parse(key, v)?,
            "lsp.lr_initial" => self.lsp.lr_initial = parse(key, v)?,
            "lsp.lr_final" => self.lsp.lr_final = parse(key, v)?,
            "lsp.momentum" => self.lsp.momentum = parse(key, v)?,

            "das.omega" => self.das.omega = parse(key, v)?,
            "das.gamma" => self.das.gamma = parse(key, v)?,
            "das.beta" => self.das.beta = parse(key, v)?,
            "das.k_fraction" => self.das.k = NeighborRule::Fraction(parse(key, v)?),
            "das.k" => self.das.k = NeighborRule::Fixed(parse(key, v)?),
            "das.alpha" => self.das.alpha = parse(key, v)?,
            "das.eta" => {
                self.eta = match v {
                    "auto" => EtaRule::Auto,
                    "dynamic" => EtaRule::Dynamic,
                    _ => EtaRule::Fixed(parse(key, v)?),
                }
            }

            "augment.noise_std" => self.augment.noise_std = parse(key, v)?,
            "augment.dropout" => self.augment.dropout = parse(key, v)?,

            "diag.enabled" => self.diag.enabled = parse(key, v)?,
            "diag.probe_size" => self.diag.probe_size = parse(key, v)?,
            "diag.power_iters" => self.diag.power_iters = parse(key, v)?,
            "diag.power_tol" => self.diag.power_tol = parse(key, v)?,
            "diag.trace_probes" => self.diag.trace_probes = parse(key, v)?,

            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.max_abort_fraction) {
            return Err(Error::Config("max_abort_fraction must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.dropout) || !(self.augment.noise_std >= 0.0) {
            return Err(Error::Config("augmentation dropout must lie in [0,1], noise ≥ 0".into()));
        }
        if self.eta == EtaRule::Fixed(0) {
            return Err(Error::Config("das.eta must be at least 1".into()));
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        if self.diag.enabled && (self.diag.probe_size < 2 || self.diag.power_iters == 0 || self.diag.trace_probes == 0) {
            return Err(Error::Config("diagnostics need probe_size ≥ 2 and positive iteration counts".into()));
        }
        self.loss.validate()?;
        self.lsp.validate()?;
        self.das.validate()
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            feature_dim: self.feature_dim,
            projection_hidden: self.projection_hidden.clone(),
            projection_dim: self.projection_dim,
            num_classes,
            relu_output: self.relu_output,
            freeze_encoder_except_last: self.freeze_encoder,
        }
    }

    /// Perturbation radius actually used: zero unless the method has LSP.
    pub fn effective_rho(&self) -> f64 {
        if self.method.uses_lsp() {
            self.lsp.rho
        } else {
            0.0
        }
    }

    /// Every setting that influences a run, with the method switches
    /// resolved, one `key=value` per line. Two methods on the same base
    /// configuration differ only in `method`, `lsp.effective_rho` and
    /// `das.enabled`.
    pub fn resolved(&self) -> String {
        let mut lines = vec![
            format!("method={}", self.method),
            format!("lsp.effective_rho={}", self.effective_rho()),
            format!("das.enabled={}", self.method.uses_das()),
            format!("seed={}", self.seed),
            format!("epochs={}", self.epochs),
            format!("anchor_epochs={}", self.anchor_epochs),
            format!("batch_size={}", self.batch_size),
            format!("max_abort_fraction={}", self.max_abort_fraction),
        ];
        match &self.data {
            DataSource::Synth(s) => {
                lines.push(format!("synth.classes={}", s.classes));
                lines.push(format!("synth.old={}", s.old));
                lines.push(format!("synth.per_class={}", s.per_class));
                lines.push(format!("synth.dim={}", s.dim));
                lines.push(format!("synth.std={}", s.std));
                lines.push(format!("synth.separation={}", s.separation));
                lines.push(format!("synth.seed={}", s.seed));
                lines.push(format!(
                    "synth.long_tail={}",
                    s.long_tail.map_or("off".to_string(), |d| d.to_string())
                ));
            }
            DataSource::Dir(d) => lines.push(format!("data.dir={}", d.display())),
            DataSource::Files {
                features,
                labels,
                old_classes,
                num_classes,
                split_seed,
            } => {
                lines.push(format!("data.features={}", features.display()));
                lines.push(format!("data.labels={}", labels.display()));
                lines.push(format!("data.old_classes={}", join(old_classes)));
                if let Some(k) = num_classes {
                    lines.push(format!("data.num_classes={k}"));
                }
                lines.push(format!("data.split_seed={split_seed}"));
            }
        }
        let l = &self.loss;
        let d = &self.das;
        lines.extend([
            format!("model.encoder_hidden={}", join(&self.encoder_hidden)),
            format!("model.feature_dim={}", self.feature_dim),
            format!("model.projection_hidden={}", join(&self.projection_hidden)),
            format!("model.projection_dim={}", self.projection_dim),
            format!("model.relu_output={}", self.relu_output),
            format!("model.freeze_encoder={}", self.freeze_encoder),
            format!("loss.tau_unsup={}", l.tau_unsup),
            format!("loss.tau_sup={}", l.tau_sup),
            format!("loss.tau_student={}", l.tau_student),
            format!("loss.tau_teacher_initial={}", l.tau_teacher_initial),
            format!("loss.tau_teacher_final={}", l.tau_teacher_final),
            format!("loss.teacher_warmup={}", l.teacher_warmup_epochs),
            format!("loss.lambda={}", l.lambda),
            format!("loss.entropy_weight={}", l.entropy_weight),
            format!("lsp.rho={}", self.lsp.rho),
            format!("lsp.lr_initial={}", self.lsp.lr_initial),
            format!("lsp.lr_final={}", self.lsp.lr_final),
            format!("lsp.momentum={}", self.lsp.momentum),
            format!("das.omega={}", d.omega),
            format!("das.gamma={}", d.gamma),
            format!("das.beta={}", d.beta),
            match d.k {
                NeighborRule::Fraction(f) => format!("das.k_fraction={f}"),
                NeighborRule::Fixed(k) => format!("das.k={k}"),
            },
            format!("das.alpha={}", d.alpha),
            format!(
                "das.eta={}",
                match self.eta {
                    EtaRule::Auto => "auto".to_string(),
                    EtaRule::Dynamic => "dynamic".to_string(),
                    EtaRule::Fixed(n) => n.to_string(),
                }
            ),
            format!("augment.noise_std={}", self.augment.noise_std),
            format!("augment.dropout={}", self.augment.dropout),
            format!("diag.enabled={}", self.diag.enabled),
            format!("diag.probe_size={}", self.diag.probe_size),
            format!("diag.power_iters={}", self.diag.power_iters),
            format!("diag.power_tol={}", self.diag.power_tol),
            format!("diag.trace_probes={}", self.diag.trace_probes),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }
}
