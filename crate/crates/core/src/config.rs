//! Flat `key = value` run configuration with dotted section keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backend::{short_hash, BackendProfile};
use crate::curriculum::Schedule;
use crate::data::{make_blobs, make_spiral, read_idx, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec};
use crate::observer::ObserverConfig;
use crate::prune::PruneConfig;
use crate::quant::{Granularity, RoundingMode};
use crate::trainer::{Cadence, LrSchedule, Optimizer, TrainConfig};

/// Documented key with its default value.
pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($key:literal = $default:literal : $help:literal),* $(,)?) => {
        &[$(KeySpec { key: $key, default: $default, help: $help }),*]
    };
}

/// Every accepted key. Defaults are the desk-scale spiral preset.
pub const KEYS: &[KeySpec] = keys![
    "seed" = "0" : "Seeds data generation, initialization, shuffling, observers and pruning",
    "dataset.kind" = "spiral" : "spiral | blobs | idx",
    "dataset.n_per_class" = "100" : "Samples per class (spiral, blobs)",
    "dataset.classes" = "3" : "Class count (spiral, blobs)",
    "dataset.noise" = "0.1" : "Spiral noise sigma",
    "dataset.dim" = "2" : "Blob dimensionality",
    "dataset.separation" = "3.0" : "Minimum distance between blob centres",
    "dataset.train_images" = "" : "IDX image file for the training split",
    "dataset.train_labels" = "" : "IDX label file for the training split",
    "dataset.val_images" = "" : "IDX image file for the validation split",
    "dataset.val_labels" = "" : "IDX label file for the validation split",
    "model.kind" = "mlp" : "mlp | tiny-cnn",
    "model.hidden" = "32,32" : "Hidden widths of the MLP (input and output widths come from the data)",
    "model.channels" = "4" : "Conv channels of the tiny CNN",
    "schedule.warmup_end" = "10" : "Last FP-only epoch E_w; observers and pruning start here",
    "schedule.ramp_end" = "30" : "Epoch E_f where the quartic ramp reaches 0.5",
    "schedule.horizon" = "20" : "Epochs H of the quadratic ramp from 0.5 to the cap",
    "schedule.alpha_max" = "1.0" : "Terminal blend value in [0.5, 1]",
    "prune.p_clip" = "0.95" : "Quantile of |w| used as the pinning threshold",
    "prune.beta" = "0.5" : "EMA momentum of the threshold",
    "prune.period_k" = "5" : "Pin every K epochs from the warmup end",
    "prune.per_channel" = "false" : "One threshold per output channel",
    "prune.s_max" = "100000" : "Subsample cap for threshold estimation",
    "observer.mu" = "0.01" : "EMA momentum of observer statistics",
    "observer.p_hi" = "0.999" : "Upper quantile",
    "observer.p_lo" = "0.001" : "Lower quantile (activations)",
    "observer.s_max" = "100000" : "Subsample cap",
    "observer.epsilon" = "1e-6" : "Range floor",
    "observer.weight_cadence" = "step" : "step | epoch",
    "observer.activation_cadence" = "step" : "step | epoch",
    "optimizer.kind" = "adamw" : "adamw | sgd",
    "optimizer.lr" = "0.01" : "Base learning rate",
    "optimizer.momentum" = "0.9" : "SGD momentum",
    "optimizer.weight_decay" = "0.0001" : "Weight decay (decoupled for AdamW)",
    "trainer.epochs" = "60" : "Training epochs",
    "trainer.batch_size" = "32" : "Mini-batch size",
    "trainer.bits" = "8" : "Quantization bit-width: 8 or 4",
    "trainer.granularity" = "per-tensor" : "per-tensor | per-channel weight scales",
    "trainer.lr_schedule" = "cosine" : "constant | cosine",
    "trainer.rounding" = "half-to-even" : "half-to-even | half-away-from-zero",
    "trainer.enable_fake_quant" = "true" : "Progressive fake-quantization blending",
    "trainer.enable_reverse_prune" = "true" : "Periodic tail pinning of master weights",
    "sweep.profiles" = "pt-static,pc-static,pt-dynamic,pc-dynamic,pt-minmax,pt-pct0.999" : "Backend profile ids",
    "sweep.calib_size" = "128" : "Training samples used for recalibrating profiles",
    "eval.ece_bins" = "15" : "Equal-width confidence bins for ECE",
    "output.dir" = "" : "Root for run directories unless --out is given; empty falls back to QTL_OUT_DIR, then ./runs",
];

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    line: Option<usize>,
}

/// Parsed configuration: every key is present, overridden or defaulted.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<&'static str, Entry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            entries: KEYS
                .iter()
                .map(|k| {
                    (
                        k.key,
                        Entry {
                            value: k.default.to_string(),
                            line: None,
                        },
                    )
                })
                .collect(),
        }
    }
}

fn known(key: &str) -> Result<&'static str> {
    KEYS.iter()
        .find(|k| k.key == key)
        .map(|k| k.key)
        .ok_or_else(|| Error::config(format!("unknown key `{key}`")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config {
                line: Some(i + 1),
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = known(k.trim()).map_err(|_| at(format!("unknown key `{}`", k.trim())))?;
            cfg.entries.insert(
                key,
                Entry {
                    value: v.trim().to_string(),
                    line: Some(i + 1),
                },
            );
        }
        cfg.settings()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override; values are checked by [`RunConfig::settings`].
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let key = known(k.trim())?;
        self.entries.insert(
            key,
            Entry {
                value: v.trim().to_string(),
                line: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    /// Canonical text with every key, sorted; parsing it yields an equal config.
    pub fn snapshot(&self) -> String {
        self.entries
            .iter()
            .map(|(k, e)| format!("{k} = {}\n", e.value))
            .collect()
    }

    /// Eight hex characters identifying the snapshot.
    pub fn hash8(&self) -> String {
        short_hash(&self.snapshot())[..8].to_string()
    }

    /// Skeleton listing every key with its default and description.
    pub fn reference() -> String {
        let mut out =
            String::from("# Run configuration keys (flat `key = value`, `#` comments).\n");
        let mut section = "";
        for k in KEYS {
            let s = k.key.split('.').next().unwrap_or("");
            if s != section {
                out.push('\n');
                section = s;
            }
            out.push_str(&format!("# {}\n{} = {}\n", k.help, k.key, k.default));
        }
        out
    }

    fn raw(&self, key: &'static str) -> (&str, Option<usize>) {
        let e = &self.entries[key];
        (e.value.as_str(), e.line)
    }

    fn bad(&self, key: &'static str, why: impl std::fmt::Display) -> Error {
        let (v, line) = self.raw(key);
        Error::Config {
            line,
            msg: format!("invalid value `{v}` for `{key}`: {why}"),
        }
    }

    fn parsed<V: std::str::FromStr>(&self, key: &'static str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.raw(key).0.parse().map_err(|e| self.bad(key, e))
    }

    fn list(&self, key: &'static str) -> Result<Vec<usize>> {
        let v = self.raw(key).0;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|e| self.bad(key, e)))
            .collect()
    }

    fn choice<V: Copy>(&self, key: &'static str, options: &[(&str, V)]) -> Result<V> {
        let v = self.raw(key).0;
        options
            .iter()
            .find(|(n, _)| *n == v)
            .map(|(_, x)| *x)
            .ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                self.bad(key, format!("expected one of {}", names.join(", ")))
            })
    }

    fn path(&self, key: &'static str) -> Result<PathBuf> {
        let v = self.raw(key).0;
        if v.is_empty() {
            return Err(self.bad(key, "path required for idx datasets"));
        }
        Ok(PathBuf::from(v))
    }

    /// Typed view; every value is checked here.
    pub fn settings(&self) -> Result<Settings> {
        let seed: u64 = self.parsed("seed")?;
        let dataset =
            match self.choice("dataset.kind", &[("spiral", 0), ("blobs", 1), ("idx", 2)])? {
                0 => DatasetSpec::Spiral {
                    n_per_class: self.parsed("dataset.n_per_class")?,
                    classes: self.parsed("dataset.classes")?,
                    noise: self.parsed("dataset.noise")?,
                },
                1 => DatasetSpec::Blobs {
                    n_per_class: self.parsed("dataset.n_per_class")?,
                    classes: self.parsed("dataset.classes")?,
                    dim: self.parsed("dataset.dim")?,
                    separation: self.parsed("dataset.separation")?,
                },
                _ => DatasetSpec::Idx {
                    train_images: self.path("dataset.train_images")?,
                    train_labels: self.path("dataset.train_labels")?,
                    val_images: self.path("dataset.val_images")?,
                    val_labels: self.path("dataset.val_labels")?,
                },
            };
        let model = match self.choice("model.kind", &[("mlp", 0), ("tiny-cnn", 1)])? {
            0 => ModelChoice::Mlp {
                hidden: self.list("model.hidden")?,
            },
            _ => ModelChoice::TinyCnn {
                channels: self.list("model.channels")?,
            },
        };
        let schedule = Schedule::with_cap(
            self.parsed("schedule.warmup_end")?,
            self.parsed("schedule.ramp_end")?,
            self.parsed("schedule.horizon")?,
            self.parsed("schedule.alpha_max")?,
        )
        .map_err(|e| self.bad("schedule.ramp_end", e))?;

        let cadence = |key| self.choice(key, &[("step", Cadence::Step), ("epoch", Cadence::Epoch)]);
        let lr: f64 = self.parsed("optimizer.lr")?;
        let weight_decay: f64 = self.parsed("optimizer.weight_decay")?;
        let optimizer = match self.choice("optimizer.kind", &[("adamw", 0), ("sgd", 1)])? {
            0 => Optimizer::AdamW { lr, weight_decay },
            _ => Optimizer::Sgd {
                lr,
                momentum: self.parsed("optimizer.momentum")?,
                weight_decay,
            },
        };
        let bits: u32 = self.parsed("trainer.bits")?;
        let train = TrainConfig {
            schedule,
            prune: PruneConfig {
                p_clip: self.parsed("prune.p_clip")?,
                beta: self.parsed("prune.beta")?,
                period_k: self.parsed("prune.period_k")?,
                warmup_end: schedule.warmup_end(),
                per_channel: self.parsed("prune.per_channel")?,
                s_max: self.parsed("prune.s_max")?,
            },
            observer: ObserverConfig {
                mu: self.parsed("observer.mu")?,
                p_hi: self.parsed("observer.p_hi")?,
                p_lo: self.parsed("observer.p_lo")?,
                s_max: self.parsed("observer.s_max")?,
                epsilon: self.parsed("observer.epsilon")?,
            },
            weight_cadence: cadence("observer.weight_cadence")?,
            activation_cadence: cadence("observer.activation_cadence")?,
            optimizer,
            lr_schedule: self.choice(
                "trainer.lr_schedule",
                &[
                    ("constant", LrSchedule::Constant),
                    ("cosine", LrSchedule::Cosine),
                ],
            )?,
            epochs: self.parsed("trainer.epochs")?,
            batch_size: self.parsed("trainer.batch_size")?,
            seed,
            bits,
            granularity: self.choice(
                "trainer.granularity",
                &[
                    ("per-tensor", Granularity::PerTensor),
                    ("per-channel", Granularity::OUTPUT_CHANNEL),
                ],
            )?,
            rounding: self.choice(
                "trainer.rounding",
                &[
                    ("half-to-even", RoundingMode::HalfToEven),
                    ("half-away-from-zero", RoundingMode::HalfAwayFromZero),
                ],
            )?,
            enable_fake_quant: self.parsed("trainer.enable_fake_quant")?,
            enable_reverse_prune: self.parsed("trainer.enable_reverse_prune")?,
        };
        train.validate().map_err(|e| Error::config(e.to_string()))?;
        let profiles = self
            .raw("sweep.profiles")
            .0
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<BackendProfile>()
                    .map_err(|e| self.bad("sweep.profiles", e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Settings {
            seed,
            dataset,
            model,
            train,
            profiles,
            calib_size: self.parsed("sweep.calib_size")?,
            ece_bins: self.parsed("eval.ece_bins")?,
            output_dir: Some(self.raw("output.dir").0)
                .filter(|d| !d.is_empty())
                .map(PathBuf::from),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Spiral {
        n_per_class: usize,
        classes: usize,
        noise: f64,
    },
    Blobs {
        n_per_class: usize,
        classes: usize,
        dim: usize,
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
    },
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Result<SplitDataset<f64>> {
        match self {
            DatasetSpec::Spiral {
                n_per_class,
                classes,
                noise,
            } => make_spiral(*n_per_class, *classes, *noise, seed),
            DatasetSpec::Blobs {
                n_per_class,
                classes,
                dim,
                separation,
            } => make_blobs(*n_per_class, *classes, *dim, *separation, seed),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
            } => {
                let mut train = read_idx(train_images, train_labels, Split::Train)?;
                let mut val = read_idx(val_images, val_labels, Split::Val)?;
                let classes = train.classes.max(val.classes);
                train.classes = classes;
                val.classes = classes;
                Ok(SplitDataset { train, val })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelChoice {
    Mlp { hidden: Vec<usize> },
    TinyCnn { channels: Vec<usize> },
}

impl ModelChoice {
    /// Concrete spec for data with per-sample `input_shape` and `classes`.
    pub fn spec(&self, input_shape: &[usize], classes: usize, seed: u64) -> Result<ModelSpec> {
        let kind = match self {
            ModelChoice::Mlp { hidden } => {
                if input_shape.len() != 1 {
                    return Err(Error::invalid(format!(
                        "mlp needs flat inputs, got sample shape {input_shape:?}"
                    )));
                }
                let mut widths = vec![input_shape[0]];
                widths.extend(hidden);
                widths.push(classes);
                ModelKind::Mlp { widths }
            }
            ModelChoice::TinyCnn { channels } => ModelKind::TinyCnn {
                channels: channels.clone(),
            },
        };
        Ok(ModelSpec {
            kind,
            input_shape: input_shape.to_vec(),
            classes,
            seed,
        })
    }
}

/// Typed configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelChoice,
    pub train: TrainConfig<f64>,
    pub profiles: Vec<BackendProfile>,
    pub calib_size: usize,
    pub ece_bins: usize,
    pub output_dir: Option<PathBuf>,
}
