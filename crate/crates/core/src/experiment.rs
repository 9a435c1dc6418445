//! End-to-end runs: train, export, sweep, ablation matrix.

use std::fmt::Write as _;

use crate::backend::{
    export_checkpoint, profile_sweep, sample_std, CalibrationSet, Checkpoint, SweepTable,
};
use crate::config::{RunConfig, Settings};
use crate::data::SplitDataset;
use crate::error::Result;
use crate::model::build_model;
use crate::trainer::{train, TrainOutcome, TrainReport};

/// One configured training run and its artifacts.
#[derive(Clone, Debug)]
pub struct Run {
    pub data: SplitDataset<f64>,
    pub outcome: TrainOutcome<f64>,
    pub checkpoint: Checkpoint,
}

impl Run {
    pub fn report(&self) -> &TrainReport {
        &self.outcome.report
    }

    /// Sweeps the configured profiles on the validation split.
    pub fn sweep(&self, settings: &Settings) -> Result<SweepTable> {
        let calib = CalibrationSet::from_dataset(&self.data.train, settings.calib_size)?;
        profile_sweep(
            &self.checkpoint,
            &settings.profiles,
            &self.data.val,
            Some(&calib),
            settings.ece_bins,
        )
    }
}

/// Builds data and model from `settings`, trains and exports.
pub fn run(settings: &Settings) -> Result<Run> {
    let data = settings.dataset.build(settings.seed)?;
    let spec = settings
        .model
        .spec(data.train.sample_shape(), data.train.classes, settings.seed)?;
    let model = build_model::<f64>(&spec)?;
    let outcome = train(model, &data.train, &data.val, &settings.train)?;
    let checkpoint = export_checkpoint(&outcome)?;
    Ok(Run {
        data,
        outcome,
        checkpoint,
    })
}

/// Overrides turning a config into its plain full-precision counterpart.
pub const BASELINE_OVERRIDES: [&str; 2] = [
    "trainer.enable_fake_quant=false",
    "trainer.enable_reverse_prune=false",
];

/// `config` with `overrides` applied in order.
pub fn with_overrides<S: AsRef<str>>(config: &RunConfig, overrides: &[S]) -> Result<RunConfig> {
    let mut c = config.clone();
    for o in overrides {
        c.set(o.as_ref())?;
    }
    Ok(c)
}

pub fn baseline(config: &RunConfig) -> Result<RunConfig> {
    with_overrides(config, &BASELINE_OVERRIDES)
}

/// Shared optimizer settings of the ablation matrix: SGD with weight decay
/// 5e-4 for 50 epochs. The learning rate is raised from 1e-3 to 0.1 since the
/// desk datasets give only a few hundred steps in total.
pub const ABLATION_PRESET: [&str; 5] = [
    "optimizer.kind=sgd",
    "optimizer.lr=0.1",
    "optimizer.momentum=0.9",
    "optimizer.weight_decay=0.0005",
    "trainer.epochs=50",
];

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub fake_quant: bool,
    pub reverse_prune: bool,
    pub p_clip: Option<f64>,
}

pub const ABLATION: [AblationRow; 5] = [
    AblationRow {
        name: "fp32-baseline",
        fake_quant: false,
        reverse_prune: false,
        p_clip: None,
    },
    AblationRow {
        name: "qat-only",
        fake_quant: true,
        reverse_prune: false,
        p_clip: None,
    },
    AblationRow {
        name: "reverse-prune-only",
        fake_quant: false,
        reverse_prune: true,
        p_clip: Some(0.95),
    },
    AblationRow {
        name: "qat-clip0.90",
        fake_quant: true,
        reverse_prune: true,
        p_clip: Some(0.90),
    },
    AblationRow {
        name: "qat-clip0.99",
        fake_quant: true,
        reverse_prune: true,
        p_clip: Some(0.99),
    },
];

impl AblationRow {
    /// Overrides for this row; only quantization settings and the seed change.
    pub fn overrides(&self, seed: u64) -> Vec<String> {
        let mut o = vec![
            format!("seed={seed}"),
            format!("trainer.enable_fake_quant={}", self.fake_quant),
            format!("trainer.enable_reverse_prune={}", self.reverse_prune),
        ];
        if let Some(p) = self.p_clip {
            o.push(format!("prune.p_clip={p}"));
        }
        o
    }

    pub fn configure(&self, base: &RunConfig, seed: u64) -> Result<RunConfig> {
        with_overrides(base, &self.overrides(seed))
    }
}

/// Per-epoch mean and sample std across seeds, one block per config.
///
/// `runs` holds `(config name, report)` pairs; reports of one config must
/// have equal length.
pub fn aggregate_csv(runs: &[(&str, &TrainReport)]) -> String {
    let mut out = String::from("config,epoch,acc_mean,acc_std,loss_mean,loss_std,lambda\n");
    let mut names: Vec<&str> = Vec::new();
    for (n, _) in runs {
        if !names.contains(n) {
            names.push(n);
        }
    }
    for name in names {
        let reports: Vec<&TrainReport> = runs
            .iter()
            .filter(|(n, _)| *n == name)
            .map(|(_, r)| *r)
            .collect();
        let epochs = reports.iter().map(|r| r.rows.len()).min().unwrap_or(0);
        for e in 0..epochs {
            let acc: Vec<f64> = reports.iter().map(|r| r.rows[e].val_top1).collect();
            let loss: Vec<f64> = reports.iter().map(|r| r.rows[e].val_loss).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let _ = writeln!(
                out,
                "{name},{},{},{},{},{},{}",
                reports[0].rows[e].epoch,
                mean(&acc),
                sample_std(&acc),
                mean(&loss),
                sample_std(&loss),
                reports[0].rows[e].lambda
            );
        }
    }
    out
}

/// Quant-Trim against its FP baseline on one seed.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub seed: u64,
    pub quant_trim: Run,
    pub baseline: Run,
    pub quant_trim_sweep: SweepTable,
    pub baseline_sweep: SweepTable,
}

impl Comparison {
    pub fn run(config: &RunConfig, seed: u64) -> Result<Self> {
        let qt_config = with_overrides(config, &[format!("seed={seed}")])?;
        let qt = qt_config.settings()?;
        let base = baseline(&qt_config)?.settings()?;
        let quant_trim = run(&qt)?;
        let baseline = run(&base)?;
        Ok(Self {
            seed,
            quant_trim_sweep: quant_trim.sweep(&qt)?,
            baseline_sweep: baseline.sweep(&base)?,
            quant_trim,
            baseline,
        })
    }

    /// Rows `seed,model,<sweep columns>` for both checkpoints.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (name, table) in [
            ("quant-trim", &self.quant_trim_sweep),
            ("baseline", &self.baseline_sweep),
        ] {
            for line in table.to_csv().lines().skip(1) {
                let _ = writeln!(out, "{},{name},{line}", self.seed);
            }
        }
        out
    }
}
