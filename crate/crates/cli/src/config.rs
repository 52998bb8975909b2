//! Run configuration: defaults encode the reference hyperparameters
//! (Adam at 1e-4, 10 epochs, batches 16/2), a flat key-value config file
//! with dotted sections can override them, and command-line flags beat
//! the file. The fully resolved config is echoed verbatim into
//! report.json so every run is reproducible from its artifacts.

use std::path::{Path, PathBuf};

use memeclf::data::OcrAdapter;
use memeclf::model::{Ablation, Pooling, Profile, ViltConfig};
use memeclf::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Split,
    Kfold,
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "split" => Ok(Protocol::Split),
            "kfold" => Ok(Protocol::Kfold),
            other => Err(format!("unknown protocol '{other}' (expected split|kfold)")),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalSettings {
    pub protocol: Protocol,
    pub k: usize,
    pub holdout_ratio: f64,
    pub ratios: (f64, f64, f64),
    pub runs: usize,
    pub base_seed: u64,
    pub stratified: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct DataSettings {
    pub manifest: Option<PathBuf>,
    #[serde(serialize_with = "serialize_ocr")]
    pub ocr: OcrAdapter,
    pub min_freq: usize,
}

fn serialize_ocr<S: serde::Serializer>(ocr: &OcrAdapter, s: S) -> Result<S::Ok, S::Error> {
    let text = match ocr {
        OcrAdapter::None => "none".to_string(),
        OcrAdapter::Sidecar => "sidecar".to_string(),
        OcrAdapter::Command(cmd) => format!("command:{cmd}"),
    };
    s.serialize_str(&text)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub model: ViltConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            profile: Profile::Desk,
            output_dir: default_output_dir(),
            model: ViltConfig::desk(),
            train: TrainConfig::default(),
            data: DataSettings {
                manifest: None,
                ocr: OcrAdapter::None,
                min_freq: 1,
            },
            eval: EvalSettings {
                protocol: Protocol::Split,
                k: 5,
                holdout_ratio: 0.10,
                ratios: (0.8, 0.1, 0.1),
                runs: 1,
                base_seed: 0,
                stratified: true,
            },
        }
    }

    /// Resolved config as the JSON echoed into report.json.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn set_profile(&mut self, profile: Profile) {
        self.profile = profile;
        self.model = ViltConfig::for_profile(profile);
    }

    /// Apply one `key = value` pair. Unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| format!("bad value '{value}' for {key}: {e}"))
        }

        match key {
            "profile" => {
                let profile: Profile = parse(key, value)?;
                self.set_profile(profile);
            }
            "output_dir" => self.output_dir = PathBuf::from(value),

            "model.hidden_dim" => self.model.hidden_dim = parse(key, value)?,
            "model.num_layers" => self.model.num_layers = parse(key, value)?,
            "model.num_heads" => self.model.num_heads = parse(key, value)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, value)?,
            "model.patch_size" => self.model.patch_size = parse(key, value)?,
            "model.image_size" => {
                let size: usize = parse(key, value)?;
                self.model.image_height = size;
                self.model.image_width = size;
            }
            "model.image_height" => self.model.image_height = parse(key, value)?,
            "model.image_width" => self.model.image_width = parse(key, value)?,
            "model.max_text_len" => self.model.max_text_len = parse(key, value)?,
            "model.vocab_size" => self.model.vocab_size = parse(key, value)?,
            "model.dropout_head" => self.model.dropout_head = parse(key, value)?,
            "model.dropout_encoder" => self.model.dropout_encoder = parse(key, value)?,
            "model.eps" => self.model.layer_norm_eps = parse(key, value)?,
            "model.pooling" => {
                self.model.pooling = match value {
                    "cls" => Pooling::Cls,
                    "mean" => Pooling::Mean,
                    other => return Err(format!("bad value '{other}' for {key} (cls|mean)")),
                }
            }
            "model.ablation" => {
                self.model.ablation = match value {
                    "none" => Ablation::None,
                    "zero_image" => Ablation::ZeroImage,
                    "zero_text" => Ablation::ZeroText,
                    other => {
                        return Err(format!(
                            "bad value '{other}' for {key} (none|zero_image|zero_text)"
                        ))
                    }
                }
            }

            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.beta1" => self.train.beta1 = parse(key, value)?,
            "train.beta2" => self.train.beta2 = parse(key, value)?,
            "train.adam_eps" => self.train.adam_eps = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.train_batch" => self.train.train_batch = parse(key, value)?,
            "train.eval_batch" => self.train.eval_batch = parse(key, value)?,
            "train.patience" => self.train.patience = parse(key, value)?,
            "train.min_delta" => self.train.min_delta = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.augmentation" => self.train.augmentation = parse_on_off(key, value)?,
            "train.max_rotation_deg" => self.train.max_rotation_deg = parse(key, value)?,
            "train.stop_at_train_loss" => {
                self.train.stop_at_train_loss = Some(parse(key, value)?)
            }

            "data.manifest" => self.data.manifest = Some(PathBuf::from(value)),
            "data.ocr" => self.data.ocr = parse(key, value)?,
            "data.min_freq" => self.data.min_freq = parse(key, value)?,

            "eval.protocol" => self.eval.protocol = parse(key, value)?,
            "eval.k" => self.eval.k = parse(key, value)?,
            "eval.holdout_ratio" => self.eval.holdout_ratio = parse(key, value)?,
            "eval.ratios" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(format!(
                        "bad value '{value}' for {key}: expected three comma-separated ratios"
                    ));
                }
                self.eval.ratios = (
                    parse("eval.ratios", parts[0])?,
                    parse("eval.ratios", parts[1])?,
                    parse("eval.ratios", parts[2])?,
                );
            }
            "eval.runs" => self.eval.runs = parse(key, value)?,
            "eval.base_seed" => self.eval.base_seed = parse(key, value)?,
            "eval.stratified" => self.eval.stratified = parse(key, value)?,

            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Load `key = value` lines; `#` starts a comment; blank lines allowed.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                format!(
                    "{} line {}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )
            })?;
            self.apply_kv(key.trim(), value.trim())
                .map_err(|e| format!("{} line {}: {e}", path.display(), lineno + 1))?;
        }
        Ok(())
    }
}

fn parse_on_off(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("bad value '{other}' for {key} (on|off)")),
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os("MEMECLF_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\ntrain.learning_rate = 3e-4\nmodel.hidden_dim = 32\neval.runs = 5\n",
        )
        .unwrap();
        let mut cfg = RunConfig::defaults();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.train.learning_rate, 3e-4);
        assert_eq!(cfg.model.hidden_dim, 32);
        assert_eq!(cfg.eval.runs, 5);

        std::fs::write(&path, "bogus.key = 1\n").unwrap();
        let err = cfg.apply_file(&path).unwrap_err();
        assert!(err.contains("unknown config key"), "{err}");
    }

    #[test]
    fn profile_switch_resets_model_fields() {
        let mut cfg = RunConfig::defaults();
        cfg.apply_kv("profile", "paper").unwrap();
        assert_eq!(cfg.model.hidden_dim, 768);
        assert_eq!(cfg.model.image_height, 256);
        cfg.apply_kv("model.hidden_dim", "64").unwrap();
        assert_eq!(cfg.model.hidden_dim, 64);
    }

    #[test]
    fn ratios_parse_as_a_triple() {
        let mut cfg = RunConfig::defaults();
        cfg.apply_kv("eval.ratios", "0.7, 0.15, 0.15").unwrap();
        assert_eq!(cfg.eval.ratios, (0.7, 0.15, 0.15));
        assert!(cfg.apply_kv("eval.ratios", "0.5,0.5").is_err());
    }

    #[test]
    fn config_echo_serializes_every_section() {
        let echo = RunConfig::defaults().echo();
        assert!(echo.get("model").is_some());
        assert!(echo.get("train").is_some());
        assert!(echo.get("eval").is_some());
        assert!(echo.get("data").is_some());
        assert_eq!(echo["train"]["learning_rate"], 1e-4);
        assert_eq!(echo["train"]["train_batch"], 16);
        assert_eq!(echo["train"]["eval_batch"], 2);
        assert_eq!(echo["train"]["epochs"], 10);
    }
}
