use std::path::{Path, PathBuf};

use groupnet::quant::QuantSpec;
use groupnet::structnet::{ArchConfig, Task};
use groupnet::tape::{LrSchedule, OptimizerKind, OptimizerState};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    MnistIdx,
    Cifar10Binary,
    SyntheticShapes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    #[default]
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerName,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Full-precision epochs run before binary fine-tuning.
    pub pretrain_epochs: usize,
    /// Training samples used to re-estimate BN statistics before each
    /// evaluation and before export; 0 keeps the running averages.
    pub bn_recalibration: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerName::Adam,
            lr: 1e-3,
            milestones: Vec::new(),
            lr_factor: 0.1,
            batch_size: 64,
            epochs: 2,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            nesterov: false,
            pretrain_epochs: 0,
            bn_recalibration: 1024,
        }
    }
}

impl OptimizerConfig {
    pub fn kind(&self) -> OptimizerKind {
        match self.kind {
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            OptimizerName::SgdMomentum => OptimizerKind::SgdMomentum {
                momentum: self.momentum,
                nesterov: self.nesterov,
            },
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            milestones: self.milestones.clone(),
            factor: self.lr_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    /// Random shift by up to 2 pixels with zero fill.
    pub crop: bool,
    /// Random horizontal flip.
    pub flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub size: usize,
    pub train: usize,
    pub test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 24,
            train: 512,
            test: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub path: PathBuf,
    /// Fraction of the training split used (after the validation hold-out).
    pub train_fraction: f64,
    /// Fraction of the training split held out for validation.
    pub val_fraction: f64,
    /// Cap on the number of test samples evaluated.
    pub test_limit: Option<usize>,
    pub augment: Augment,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::MnistIdx,
            path: PathBuf::from("data/mnist"),
            train_fraction: 1.0,
            val_fraction: 0.1,
            test_limit: None,
            augment: Augment::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub model: String,
    pub checkpoint: String,
    pub log: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            model: "model.gnet".into(),
            checkpoint: "checkpoint.json".into(),
            log: "metrics.log".into(),
        }
    }
}

impl OutputConfig {
    pub fn model_path(&self) -> PathBuf {
        self.dir.join(&self.model)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(&self.log)
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub quant: Option<QuantSpec>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses a TOML document, applies `key=value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| de_error(text, &e))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let rendered = toml::to_string(&doc).map_err(|e| CliError::config("<document>", e.to_string()))?;
        let mut cfg: RunConfig = toml::from_str(&rendered).map_err(|e| de_error(&rendered, &e))?;
        if let Some(task) = cfg.task {
            cfg.arch.task = task;
        }
        if let Some(q) = cfg.quant.clone() {
            cfg.arch.quant = q;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if o.epochs == 0 {
            return Err(CliError::config("optimizer.epochs", "must be at least 1"));
        }
        if o.batch_size == 0 {
            return Err(CliError::config("optimizer.batch_size", "must be at least 1"));
        }
        if o.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::config("optimizer.milestones", "must be strictly increasing"));
        }
        if let Some(&m) = o.milestones.iter().find(|&&m| m >= o.epochs) {
            return Err(CliError::config(
                "optimizer.milestones",
                format!("milestone {m} is not below epochs = {}", o.epochs),
            ));
        }
        if !(o.lr_factor.is_finite() && o.lr_factor > 0.0) {
            return Err(CliError::config("optimizer.lr_factor", "must be positive"));
        }
        OptimizerState::<f32>::new(o.kind(), o.schedule(), o.weight_decay)?;
        let d = &self.data;
        for (field, v) in [("data.train_fraction", d.train_fraction)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(CliError::config(field, format!("must lie in (0, 1], got {v}")));
            }
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(CliError::config("data.val_fraction", format!("must lie in [0, 1), got {}", d.val_fraction)));
        }
        if d.test_limit == Some(0) {
            return Err(CliError::config("data.test_limit", "must be at least 1"));
        }
        let seg = self.arch.task == Task::Segmentation;
        if seg != (d.kind == DatasetKind::SyntheticShapes) {
            return Err(CliError::config(
                "task",
                "segmentation runs on synthetic-shapes and classification on the image datasets",
            ));
        }
        let s = &d.synthetic;
        if d.kind == DatasetKind::SyntheticShapes && (s.size < 8 || s.train == 0 || s.test == 0) {
            return Err(CliError::config("data.synthetic", "size must be at least 8 and counts positive"));
        }
        let (channels, classes) = match d.kind {
            DatasetKind::MnistIdx => (1, 10),
            DatasetKind::Cifar10Binary => (3, 10),
            DatasetKind::SyntheticShapes => (1, crate::data::SHAPE_CLASSES),
        };
        if self.arch.in_channels != channels {
            return Err(CliError::config(
                "arch.in_channels",
                format!("dataset has {channels} channel(s), got {}", self.arch.in_channels),
            ));
        }
        if self.arch.num_classes != classes {
            return Err(CliError::config(
                "arch.num_classes",
                format!("dataset has {classes} classes, got {}", self.arch.num_classes),
            ));
        }
        if seg && (self.arch.stem_stride != 1 || self.arch.blocks.iter().any(|b| b.stride != 1)) {
            return Err(CliError::config("arch.blocks", "segmentation predicts at input resolution; use stride 1"));
        }
        self.arch.validate()?;
        Ok(())
    }
}

/// Sets `a.b.c = value`; the value is parsed as TOML, or taken as a string.
pub fn apply_override(doc: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::config(item, "override must look like key=value"))?;
    let key = key.trim();
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(key, "empty path segment in override"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(key, format!("`{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Names the offending key: the table header above the error plus the key
/// on the error line, or the field quoted in the message.
fn de_error(text: &str, e: &toml::de::Error) -> CliError {
    let msg = e.message().to_string();
    let quoted = msg.split('`').nth(1).map(str::to_string);
    // Errors about the root table carry an empty span at the start.
    let whole = e.span().is_some_and(|s| s.start == 0 && s.end == 0);
    let field = e
        .span()
        .filter(|_| !whole)
        .and_then(|span| {
            let start = span.start.min(text.len());
            let line_start = text[..start].rfind('\n').map_or(0, |i| i + 1);
            let line = text[line_start..].lines().next().unwrap_or("");
            let table = text[..line_start]
                .lines()
                .rev()
                .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')))
                .map(|t| t.trim_matches(|c| c == '[' || c == ']').to_string());
            let key = line.split_once('=').map(|(k, _)| k.trim().to_string());
            let header = line.trim().strip_prefix('[').map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string());
            match (header, table, key, &quoted) {
                (Some(h), _, _, Some(q)) => Some(format!("{h}.{q}")),
                (Some(h), ..) => Some(h),
                (None, Some(t), Some(k), _) => Some(format!("{t}.{k}")),
                (None, None, Some(k), _) => Some(k),
                (None, Some(t), None, Some(q)) => Some(format!("{t}.{q}")),
                _ => None,
            }
        })
        .or(quoted)
        .unwrap_or_else(|| "<document>".to_string());
    CliError::config(field, msg.trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[data]
kind = "mnist-idx"
"#;

    fn field(r: Result<RunConfig>) -> String {
        match r {
            Err(CliError::Config { field, .. }) => field,
            Err(CliError::Core(groupnet::Error::Config { field, .. })) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config() {
        let c = RunConfig::parse(BASE, &[]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.arch.num_classes, 10);
    }

    #[test]
    fn milestones_beyond_epochs() {
        let r = RunConfig::parse(BASE, &["optimizer.epochs=10".into(), "optimizer.milestones=[40]".into()]);
        assert_eq!(field(r), "optimizer.milestones");
        let r = RunConfig::parse(BASE, &["optimizer.milestones=[3, 2]".into(), "optimizer.epochs=5".into()]);
        assert_eq!(field(r), "optimizer.milestones");
    }

    #[test]
    fn missing_seed() {
        let r = RunConfig::parse("[data]\nkind = \"mnist-idx\"\n", &[]);
        assert_eq!(field(r), "seed");
    }

    #[test]
    fn diagnostics_name_fields() {
        assert_eq!(field(RunConfig::parse(BASE, &["optimizer.epochs=0".into()])), "optimizer.epochs");
        assert_eq!(field(RunConfig::parse(BASE, &["optimizer.lr=-1.0".into()])), "optimizer.lr");
        assert_eq!(field(RunConfig::parse(BASE, &["arch.k=3".into()])), "arch.k");
        assert_eq!(field(RunConfig::parse(BASE, &["data.train_fraction=0".into()])), "data.train_fraction");
        assert_eq!(field(RunConfig::parse(BASE, &["arch.in_channels=3".into()])), "arch.in_channels");
        assert_eq!(field(RunConfig::parse(BASE, &["task=segmentation".into()])), "task");
        let typo = format!("{BASE}[optimizer]\nlearning_rate = 0.1\n");
        assert_eq!(field(RunConfig::parse(&typo, &[])), "optimizer.learning_rate");
        let wrong = format!("{BASE}[optimizer]\nepochs = \"many\"\n");
        assert_eq!(field(RunConfig::parse(&wrong, &[])), "optimizer.epochs");
    }

    #[test]
    fn quant_and_task_move_into_arch() {
        let text = format!("{BASE}[quant]\nactivation_scheme = \"uniform-kbit\"\nactivation_bits = 3\n");
        let c = RunConfig::parse(&text, &[]).unwrap();
        assert_eq!(c.arch.quant.activation_bits, 3);
    }

    #[test]
    fn overrides_parse_values() {
        let c = RunConfig::parse(BASE, &["arch.decomposition=soft".into(), "arch.k=4".into()]).unwrap();
        assert_eq!(c.arch.k, 4);
        assert!(RunConfig::parse(BASE, &["nonsense".into()]).is_err());
    }
}
