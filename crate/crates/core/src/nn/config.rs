//! Flat `key=value` training configuration.
//!
//! The same grammar round-trips as the config echo a checkpoint carries, so
//! evaluation can rebuild the exact dataset and architecture from a
//! checkpoint alone. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::data::{self, Dataset};
use crate::nn::layers::LayerSpec;
use crate::quant::registry;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synthetic { train: usize, eval: usize, dim: usize, separation: f64, scale: f64 },
    /// XOR-of-blobs task with distractor dimensions.
    Xor { train: usize, eval: usize, dim: usize, separation: f64, distractor: f64, scale: f64 },
    Idx { train_images: String, train_labels: String, test_images: String, test_labels: String },
    Csv { train: String, test: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for quantizer parameters (default 1/10).
    pub quant_lr_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight bit-widths for the quantized (middle) layers: one entry
    /// broadcast to all of them, or one entry per quantized layer.
    pub bits_w: Vec<u32>,
    /// Activation bit-widths, same broadcasting rule.
    pub bits_a: Vec<u32>,
    /// Whether middle layers quantize at all (false = float run).
    pub quantize: bool,
    pub act_scheme: String,
    pub weight_scheme: String,
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.01,
            quant_lr_factor: 0.1,
            weight_decay: 0.0,
            seed: 1,
            bits_w: vec![2],
            bits_a: vec![2],
            quantize: true,
            act_scheme: "n2uq".into(),
            weight_scheme: "entropy".into(),
            arch: ArchKind::Mlp,
            hidden: vec![32, 32],
            dataset: DatasetSpec::Synthetic { train: 1000, eval: 1000, dim: 16, separation: 6.0, scale: 1.0 },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Parse(format!("bad boolean '{value}' for key '{key}'"))),
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        // dataset sub-keys accumulate before assembly
        let mut dataset_kind = String::from("synthetic");
        let mut synth = (1000usize, 1000usize, 16usize, 6.0f64, 1.0f64);
        let mut distractor = 4.0f64;
        let mut idx_paths = (String::new(), String::new(), String::new(), String::new());
        let mut csv_paths = (String::new(), String::new());
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "lr" => cfg.lr = parse_num(key, value)?,
                "quant_lr_factor" => cfg.quant_lr_factor = parse_num(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "bits_w" => {
                    cfg.bits_w = value
                        .split(',')
                        .map(|v| parse_num("bits_w", v.trim()))
                        .collect::<Result<_>>()?;
                }
                "bits_a" => {
                    cfg.bits_a = value
                        .split(',')
                        .map(|v| parse_num("bits_a", v.trim()))
                        .collect::<Result<_>>()?;
                }
                "quantize" => cfg.quantize = parse_bool(key, value)?,
                "act_quant" => cfg.act_scheme = value.to_string(),
                "weight_quant" => cfg.weight_scheme = value.to_string(),
                "arch" => {
                    cfg.arch = match value {
                        "mlp" => ArchKind::Mlp,
                        "conv" => ArchKind::Conv,
                        _ => return Err(Error::Parse(format!("unknown arch '{value}'"))),
                    }
                }
                "hidden" => {
                    cfg.hidden = value
                        .split(',')
                        .map(|v| parse_num("hidden", v.trim()))
                        .collect::<Result<_>>()?;
                }
                "dataset" => dataset_kind = value.to_string(),
                "synth_train" => synth.0 = parse_num(key, value)?,
                "synth_eval" => synth.1 = parse_num(key, value)?,
                "synth_dim" => synth.2 = parse_num(key, value)?,
                "synth_sep" => synth.3 = parse_num(key, value)?,
                "synth_scale" => synth.4 = parse_num(key, value)?,
                "synth_distractor" => distractor = parse_num(key, value)?,
                "train_images" => idx_paths.0 = value.to_string(),
                "train_labels" => idx_paths.1 = value.to_string(),
                "test_images" => idx_paths.2 = value.to_string(),
                "test_labels" => idx_paths.3 = value.to_string(),
                "train_csv" => csv_paths.0 = value.to_string(),
                "test_csv" => csv_paths.1 = value.to_string(),
                other => return Err(Error::Parse(format!("unknown config key '{other}'"))),
            }
        }
        cfg.dataset = match dataset_kind.as_str() {
            "synthetic" => DatasetSpec::Synthetic {
                train: synth.0,
                eval: synth.1,
                dim: synth.2,
                separation: synth.3,
                scale: synth.4,
            },
            "idx" => DatasetSpec::Idx {
                train_images: idx_paths.0,
                train_labels: idx_paths.1,
                test_images: idx_paths.2,
                test_labels: idx_paths.3,
            },
            "csv" => DatasetSpec::Csv { train: csv_paths.0, test: csv_paths.1 },
            "xor" => DatasetSpec::Xor {
                train: synth.0,
                eval: synth.1,
                dim: synth.2,
                separation: synth.3,
                distractor,
                scale: synth.4,
            },
            other => return Err(Error::Parse(format!("unknown dataset kind '{other}'"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr <= 0.0 {
            return Err(Error::contract(
                "epochs, batch_size and lr must all be positive",
            ));
        }
        if self.quantize {
            let quantized_layers = self.hidden.len().saturating_sub(1);
            for (name, widths) in [("bits_w", &self.bits_w), ("bits_a", &self.bits_a)] {
                if widths.is_empty() || widths.iter().any(|n| !(1..=8).contains(n)) {
                    return Err(Error::contract(format!("{name} entries must lie in 1..=8")));
                }
                if widths.len() != 1 && widths.len() != quantized_layers {
                    return Err(Error::contract(format!(
                        "{name} needs 1 or {quantized_layers} entries, got {}",
                        widths.len()
                    )));
                }
            }
            registry::act_scheme::<f64>(&self.act_scheme)?;
            registry::weight_scheme::<f64>(&self.weight_scheme)?;
        }
        if self.hidden.is_empty() {
            return Err(Error::contract("at least one hidden layer is required"));
        }
        Ok(())
    }

    /// Canonical echo of every key; parses back to an equal config.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("lr", format!("{}", self.lr));
        push("quant_lr_factor", format!("{}", self.quant_lr_factor));
        push("weight_decay", format!("{}", self.weight_decay));
        push("seed", self.seed.to_string());
        push(
            "bits_w",
            self.bits_w.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        );
        push(
            "bits_a",
            self.bits_a.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        );
        push("quantize", self.quantize.to_string());
        push("act_quant", self.act_scheme.clone());
        push("weight_quant", self.weight_scheme.clone());
        push(
            "arch",
            match self.arch {
                ArchKind::Mlp => "mlp".into(),
                ArchKind::Conv => "conv".into(),
            },
        );
        push(
            "hidden",
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        match &self.dataset {
            DatasetSpec::Synthetic { train, eval, dim, separation, scale } => {
                push("dataset", "synthetic".into());
                push("synth_train", train.to_string());
                push("synth_eval", eval.to_string());
                push("synth_dim", dim.to_string());
                push("synth_sep", format!("{separation}"));
                push("synth_scale", format!("{scale}"));
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                push("dataset", "idx".into());
                push("train_images", train_images.clone());
                push("train_labels", train_labels.clone());
                push("test_images", test_images.clone());
                push("test_labels", test_labels.clone());
            }
            DatasetSpec::Csv { train, test } => {
                push("dataset", "csv".into());
                push("train_csv", train.clone());
                push("test_csv", test.clone());
            }
            DatasetSpec::Xor { train, eval, dim, separation, distractor, scale } => {
                push("dataset", "xor".into());
                push("synth_train", train.to_string());
                push("synth_eval", eval.to_string());
                push("synth_dim", dim.to_string());
                push("synth_sep", format!("{separation}"));
                push("synth_distractor", format!("{distractor}"));
                push("synth_scale", format!("{scale}"));
            }
        }
        out
    }

    /// Loads (train, eval) datasets.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetSpec::Synthetic { train, eval, dim, separation, scale } => Ok((
                data::synthetic_two_gaussians(
                    *train,
                    *dim,
                    *separation,
                    *scale,
                    self.seed.wrapping_mul(2).wrapping_add(1),
                ),
                data::synthetic_two_gaussians(
                    *eval,
                    *dim,
                    *separation,
                    *scale,
                    self.seed.wrapping_mul(2).wrapping_add(2),
                ),
            )),
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => Ok((
                data::load_idx(Path::new(train_images), Path::new(train_labels))?,
                data::load_idx(Path::new(test_images), Path::new(test_labels))?,
            )),
            DatasetSpec::Csv { train, test } => {
                Ok((data::load_csv(Path::new(train))?, data::load_csv(Path::new(test))?))
            }
            DatasetSpec::Xor { train, eval, dim, separation, distractor, scale } => Ok((
                data::synthetic_xor_blobs(
                    *train,
                    *dim,
                    *separation,
                    *distractor,
                    *scale,
                    self.seed.wrapping_mul(2).wrapping_add(1),
                ),
                data::synthetic_xor_blobs(
                    *eval,
                    *dim,
                    *separation,
                    *distractor,
                    *scale,
                    self.seed.wrapping_mul(2).wrapping_add(2),
                ),
            )),
        }
    }

    fn width_for(widths: &[u32], index: usize) -> u32 {
        if widths.len() == 1 {
            widths[0]
        } else {
            widths[index]
        }
    }

    /// Builds the layer stack for the given input shape and class count.
    /// Middle layers quantize (when enabled); the first and last never do.
    pub fn layer_specs(&self, input_shape: &[usize], num_classes: usize) -> Result<Vec<LayerSpec>> {
        let mut specs = Vec::new();
        match self.arch {
            ArchKind::Mlp => {
                let input_dim: usize = input_shape.iter().product();
                let mut dims = vec![input_dim];
                dims.extend_from_slice(&self.hidden);
                dims.push(num_classes);
                let mut quantized = 0usize;
                for i in 0..dims.len() - 1 {
                    let mut spec = LayerSpec::linear(dims[i], dims[i + 1]);
                    let is_edge = i == 0 || i == dims.len() - 2;
                    if self.quantize && !is_edge {
                        spec = spec.quantized(
                            Self::width_for(&self.bits_w, quantized),
                            Self::width_for(&self.bits_a, quantized),
                        );
                        quantized += 1;
                    }
                    specs.push(spec);
                }
            }
            ArchKind::Conv => {
                if input_shape.len() != 3 {
                    return Err(Error::contract(format!(
                        "conv arch expects [h, w, c] input, got {input_shape:?}"
                    )));
                }
                let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
                let mut channels = vec![c];
                channels.extend_from_slice(&self.hidden);
                let mut quantized = 0usize;
                for i in 0..channels.len() - 1 {
                    let mut spec = LayerSpec::conv3x3(channels[i], channels[i + 1]);
                    if self.quantize && i > 0 {
                        spec = spec.quantized(
                            Self::width_for(&self.bits_w, quantized),
                            Self::width_for(&self.bits_a, quantized),
                        );
                        quantized += 1;
                    }
                    specs.push(spec);
                }
                specs.push(LayerSpec::linear(h * w * *channels.last().unwrap(), num_classes));
            }
        }
        Ok(specs)
    }
}
