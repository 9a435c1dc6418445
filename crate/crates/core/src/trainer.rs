//! Training loop: FP warmup, progressive fake-quant blending with STE,
//! periodic reverse pruning, per-epoch reporting.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::curriculum::Schedule;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{top_k, MetricsReport};
use crate::model::{ForwardHook, Model, PointKind, PointSite};
use crate::observer::{ObserverConfig, ObserverState};
use crate::prune::{pin_due, PinRecord, PruneConfig, PruneState};
use crate::quant::{blend, Granularity, QuantParams, RoundingMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A weight tensor or activation site with its observer.
#[derive(Clone, Debug)]
pub struct QuantPoint<T> {
    pub id: String,
    pub kind: PointKind,
    /// Owning layer for weights, preceding relu for activations, `None` for the input.
    pub layer: Option<usize>,
    pub granularity: Granularity,
    pub observer: ObserverState<T>,
}

impl<T: Scalar> QuantPoint<T> {
    /// Current parameters; the error names this point when it has never observed.
    pub fn qparams(&self, bits: u32) -> Result<QuantParams<T>> {
        self.observer.qparams(bits).map_err(|e| match e {
            Error::UninitializedObserver(_) => Error::UninitializedObserver(self.id.clone()),
            other => other,
        })
    }

    pub fn is_weight(&self) -> bool {
        self.kind == PointKind::Weight
    }
}

/// One observer per weight tensor and per activation site, in forward order.
pub fn attach_quant_points<T: Scalar>(
    model: &Model<T>,
    observer: &ObserverConfig<T>,
    weight_granularity: Granularity,
    seed: u64,
) -> Result<Vec<QuantPoint<T>>> {
    if model.layers().is_empty() {
        return Err(Error::EmptyModel);
    }
    model
        .quant_sites()
        .into_iter()
        .enumerate()
        .map(|(i, PointSite { id, kind, layer })| {
            let point_seed = seed ^ (0x51_7cc1_b727_220a_u64.wrapping_mul(i as u64 + 1));
            let (granularity, observer) = match kind {
                PointKind::Weight => (
                    weight_granularity,
                    ObserverState::weight(observer.clone(), weight_granularity, point_seed)?,
                ),
                PointKind::Activation => (
                    Granularity::PerTensor,
                    ObserverState::activation(observer.clone(), point_seed)?,
                ),
            };
            Ok(QuantPoint {
                id,
                kind,
                layer,
                granularity,
                observer,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Momentum SGD with coupled (L2) weight decay.
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    /// Adam with decoupled weight decay, betas (0.9, 0.999), eps 1e-8.
    AdamW { lr: f64, weight_decay: f64 },
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::AdamW { lr, .. } => lr,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    kind: Optimizer,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: Optimizer, sizes: &[usize]) -> Self {
        let zeros = || {
            sizes
                .iter()
                .map(|&n| vec![T::zero(); n])
                .collect::<Vec<_>>()
        };
        Self {
            kind,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Advances the shared step counter; call once before updating the parameters.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, param: usize, w: &mut [T], grad: &[T], lr: f64) {
        let lr = T::of(lr);
        match self.kind {
            Optimizer::Sgd {
                momentum,
                weight_decay,
                ..
            } => {
                let (mu, wd) = (T::of(momentum), T::of(weight_decay));
                let buf = &mut self.first[param];
                for ((w, &g), b) in w.iter_mut().zip(grad).zip(buf.iter_mut()) {
                    let g = g + wd * *w;
                    *b = if self.step == 1 { g } else { mu * *b + g };
                    *w = *w - lr * *b;
                }
            }
            Optimizer::AdamW { weight_decay, .. } => {
                let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                let decay = T::one() - lr * T::of(weight_decay);
                let (m, v) = (&mut self.first[param], &mut self.second[param]);
                for (((w, &g), m), v) in w.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut())
                {
                    *w = *w * decay;
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + T::of(ADAM_EPS));
                    *w = *w - lr * update;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay to zero over all training steps.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let r = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * r).cos())
            }
        }
    }
}

/// How often an observer folds in a new statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cadence {
    Step,
    /// First step of each epoch only.
    Epoch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub schedule: Schedule,
    pub prune: PruneConfig<T>,
    pub observer: ObserverConfig<T>,
    pub weight_cadence: Cadence,
    pub activation_cadence: Cadence,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bits: u32,
    pub granularity: Granularity,
    pub rounding: RoundingMode,
    pub enable_fake_quant: bool,
    pub enable_reverse_prune: bool,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            schedule,
            prune: PruneConfig {
                warmup_end: schedule.warmup_end(),
                ..PruneConfig::default()
            },
            observer: ObserverConfig::default(),
            weight_cadence: Cadence::Epoch,
            activation_cadence: Cadence::Step,
            optimizer: Optimizer::AdamW {
                lr: 3e-4,
                weight_decay: 0.01,
            },
            lr_schedule: LrSchedule::Cosine,
            epochs: schedule.saturation_epoch(),
            batch_size: 32,
            seed: 0,
            bits: 8,
            granularity: Granularity::PerTensor,
            rounding: RoundingMode::HalfToEven,
            enable_fake_quant: true,
            enable_reverse_prune: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prune.validate()?;
        self.observer.validate()?;
        crate::quant::derive_qrange(self.bits, true)?;
        if self.prune.warmup_end != self.schedule.warmup_end() {
            return Err(Error::invalid(format!(
                "prune warmup end {} differs from schedule warmup end {}",
                self.prune.warmup_end,
                self.schedule.warmup_end()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        let lr = self.optimizer.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {lr} must be positive"
            )));
        }
        if let Optimizer::Sgd { momentum, .. } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::invalid(format!(
                    "momentum {momentum} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Advisory messages about settings that are legal but unusual.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.enable_fake_quant && self.epochs < self.schedule.ramp_end() {
            out.push(format!(
                "epochs={} ends before the ramp end {}; lambda never reaches 0.5",
                self.epochs,
                self.schedule.ramp_end()
            ));
        }
        out
    }

    /// Blend coefficient applied during `epoch`.
    pub fn lambda(&self, epoch: usize) -> T {
        if self.enable_fake_quant {
            self.schedule.lambda(epoch)
        } else {
            T::zero()
        }
    }
}

/// One row of the training report.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub pins: Vec<PinRecord<f64>>,
    /// Threshold per quantizable layer (empty before the first refresh).
    pub taus: Vec<Vec<f64>>,
    /// Scales per quantization point (empty until observed).
    pub scales: Vec<Vec<f64>>,
}

impl EpochRecord {
    pub fn pin_event(&self) -> bool {
        !self.pins.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub const SCHEMA: &'static str = "# schema: train-report/v1";
    pub const CSV_HEADER: &'static str =
        "epoch,lambda,train_loss,val_loss,val_top1,pin_event,taus,scales";

    pub fn final_row(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }

    /// Lists inside a cell are `;`-separated per layer/point and `|`-separated per channel.
    pub fn to_csv(&self) -> String {
        let join = |v: &[Vec<f64>]| {
            v.iter()
                .map(|c| c.iter().map(f64::to_string).collect::<Vec<_>>().join("|"))
                .collect::<Vec<_>>()
                .join(";")
        };
        let mut out = format!("{}\n{}\n", Self::SCHEMA, Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lambda,
                r.train_loss,
                r.val_loss,
                r.val_top1,
                u8::from(r.pin_event()),
                join(&r.taus),
                join(&r.scales)
            );
        }
        out
    }
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub points: Vec<QuantPoint<T>>,
    pub prune: PruneState<T>,
    pub config: TrainConfig<T>,
    pub report: TrainReport,
}

impl<T: Scalar> TrainOutcome<T> {
    /// Blend coefficient of the last epoch.
    pub fn terminal_lambda(&self) -> T {
        self.config.lambda(self.config.epochs)
    }
}

/// Observes and/or fake-quantizes every point it is handed.
struct QuantHook<'a, T> {
    points: &'a mut [QuantPoint<T>],
    lambda: T,
    bits: u32,
    rounding: RoundingMode,
    observe_weights: bool,
    observe_activations: bool,
}

impl<T: Scalar> QuantHook<'_, T> {
    fn apply(
        &mut self,
        graph: &mut Graph<T>,
        point: usize,
        x: crate::autograd::Var,
    ) -> Result<crate::autograd::Var> {
        let p = self.points.get_mut(point).ok_or_else(|| {
            Error::invalid(format!("forward reached unknown quant point {point}"))
        })?;
        let observe = if p.is_weight() {
            self.observe_weights
        } else {
            self.observe_activations
        };
        if observe {
            let value = graph.try_value(x)?;
            if p.is_weight() {
                p.observer.update_weight_stats(value)?;
            } else {
                p.observer.update_activation_stats(value)?;
            }
        }
        if self.lambda == T::zero() {
            return Ok(x);
        }
        let qp = p.qparams(self.bits)?;
        blend(graph, x, &qp, self.lambda, self.rounding)
    }
}

impl<T: Scalar> ForwardHook<T> for QuantHook<'_, T> {
    fn weight(
        &mut self,
        graph: &mut Graph<T>,
        point: usize,
        w: crate::autograd::Var,
    ) -> Result<crate::autograd::Var> {
        self.apply(graph, point, w)
    }
    fn activation(
        &mut self,
        graph: &mut Graph<T>,
        point: usize,
        x: crate::autograd::Var,
    ) -> Result<crate::autograd::Var> {
        self.apply(graph, point, x)
    }
}

/// Blended forward with frozen observers.
pub fn fake_quant_logits<T: Scalar>(
    model: &Model<T>,
    points: &[QuantPoint<T>],
    x: &Tensor<T>,
    lambda: T,
    bits: u32,
    rounding: RoundingMode,
) -> Result<Tensor<T>> {
    let mut points = points.to_vec();
    let mut hook = QuantHook {
        points: &mut points,
        lambda,
        bits,
        rounding,
        observe_weights: false,
        observe_activations: false,
    };
    model.predict_with(x, &mut hook)
}

fn mean_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.softmax_cross_entropy(l, labels)?;
    g.value(loss).item()
}

fn scales_of<T: Scalar>(points: &[QuantPoint<T>], bits: u32) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| match p.qparams(bits) {
            Ok(qp) => qp.scales().iter().map(|s| s.f64()).collect(),
            Err(_) => Vec::new(),
        })
        .collect()
}

fn divergence_detail<T: Scalar>(model: &Model<T>, lambda: T, lr: f64, loss: T) -> String {
    let maxes: Vec<String> = model
        .layers()
        .iter()
        .filter_map(|l| l.weight())
        .map(|w| format!("{:.6e}", w.max_abs().f64()))
        .collect();
    format!(
        "loss={loss}, lambda={lambda}, lr={lr:.3e}, max|w| per layer=[{}]",
        maxes.join(", ")
    )
}

/// Runs the full schedule. Epochs are numbered `1..=epochs`.
pub fn train<T: Scalar>(
    model: Model<T>,
    train_set: &Dataset<T>,
    val_set: &Dataset<T>,
    config: &TrainConfig<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    let mut model = model;
    let mut points =
        attach_quant_points(&model, &config.observer, config.granularity, config.seed)?;
    let quantizable = model.quantizable_layers();
    let mut prune = PruneState::new(
        config.prune.clone(),
        quantizable.len(),
        config.seed ^ 0xa5a5,
    )?;

    let sizes: Vec<usize> = model
        .layers()
        .iter()
        .filter_map(|l| Some([l.weight()?.numel(), l.bias()?.numel()]))
        .flatten()
        .collect();
    let mut opt = OptimizerState::<T>::new(config.optimizer, &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup_end = config.schedule.warmup_end();

    let mut report = TrainReport {
        rows: Vec::with_capacity(config.epochs),
        warnings: config.warnings(),
    };
    let mut global_step = 0;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        let lambda = config.lambda(epoch);
        let observing = epoch >= warmup_end;

        let mut pins = Vec::new();
        if config.enable_reverse_prune && observing {
            let due = pin_due(epoch, warmup_end, config.prune.period_k);
            for (slot, &li) in quantizable.iter().enumerate() {
                let (w, _) = model
                    .params_mut(li)
                    .expect("quantizable layer has parameters");
                prune.refresh(slot, w)?;
                if due {
                    let rec = prune.pin(slot, w)?;
                    pins.push(PinRecord {
                        layer: li,
                        tau: rec.tau.iter().map(|t| t.f64()).collect(),
                        max_before: rec.max_before.f64(),
                        max_after: rec.max_after.f64(),
                    });
                }
            }
        }

        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (xb, yb) = train_set.batch(chunk)?;
            let first = step == 0;
            let due = |c: Cadence| observing && (c == Cadence::Step || first);
            let mut g = Graph::new();
            let params = model.bind(&mut g, true);
            let xv = g.constant(xb);
            let logits = {
                let mut hook = QuantHook {
                    points: &mut points,
                    lambda,
                    bits: config.bits,
                    rounding: config.rounding,
                    observe_weights: due(config.weight_cadence),
                    observe_activations: due(config.activation_cadence),
                };
                model.forward(&mut g, &params, xv, &mut hook)?
            };
            let loss = g.softmax_cross_entropy(logits, &yb)?;
            let loss_value = g.value(loss).item()?;
            let lr = config
                .lr_schedule
                .at(config.optimizer.lr(), global_step, total_steps);
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: divergence_detail(&model, lambda, lr, loss_value),
                });
            }
            loss_sum += loss_value.f64() * chunk.len() as f64;
            g.backward(loss)?;

            opt.begin_step();
            for (slot, (&li, bound)) in quantizable.iter().zip(&params).enumerate() {
                let gw = g
                    .grad(bound.weight)
                    .expect("parameter has a gradient")
                    .to_vec();
                let gb = g
                    .grad(bound.bias)
                    .expect("parameter has a gradient")
                    .to_vec();
                let (w, b) = model
                    .params_mut(li)
                    .expect("quantizable layer has parameters");
                opt.update(2 * slot, w.data_mut(), &gw, lr);
                opt.update(2 * slot + 1, b.data_mut(), &gb, lr);
            }
            global_step += 1;
            if model
                .layers()
                .iter()
                .filter_map(|l| l.weight())
                .any(|w| !w.all_finite())
            {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: divergence_detail(&model, lambda, lr, loss_value),
                });
            }
        }

        let val_logits = fake_quant_logits(
            &model,
            &points,
            &val_set.inputs,
            lambda,
            config.bits,
            config.rounding,
        )?;
        let val_loss = mean_cross_entropy(&val_logits, &val_set.labels)?;
        if !val_loss.is_finite() || !val_logits.all_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps_per_epoch,
                detail: divergence_detail(&model, lambda, 0.0, val_loss),
            });
        }
        report.rows.push(EpochRecord {
            epoch,
            lambda: lambda.f64(),
            train_loss: loss_sum / n as f64,
            val_loss: val_loss.f64(),
            val_top1: top_k(&val_logits, &val_set.labels, 1)?.f64(),
            pins,
            taus: (0..quantizable.len())
                .map(|s| {
                    prune
                        .tau(s)
                        .map(|t| t.iter().map(|v| v.f64()).collect())
                        .unwrap_or_default()
                })
                .collect(),
            scales: scales_of(&points, config.bits),
        });
    }

    Ok(TrainOutcome {
        model,
        points,
        prune,
        config: config.clone(),
        report,
    })
}

/// What to compare against the FP reference during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode<'a> {
    Fp,
    FakeQuant(f64),
    /// Integer execution; recalibrating profiles need a calibration set.
    IntegerSim {
        profile: &'a crate::backend::BackendProfile,
        calib: Option<&'a crate::backend::CalibrationSet>,
    },
}

/// Metrics of `mode` logits on `data`; the FP forward is the reference.
pub fn evaluate<T: Scalar>(
    outcome: &TrainOutcome<T>,
    data: &Dataset<T>,
    mode: EvalMode<'_>,
    ece_bins: usize,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let x = &data.inputs;
    let reference = outcome.model.predict(x)?;
    let logits = match mode {
        EvalMode::Fp => reference.clone(),
        EvalMode::FakeQuant(lambda) => fake_quant_logits(
            &outcome.model,
            &outcome.points,
            x,
            T::of(lambda),
            outcome.config.bits,
            outcome.config.rounding,
        )?,
        EvalMode::IntegerSim { profile, calib } => {
            let ckpt = crate::backend::export_checkpoint(outcome)?;
            crate::backend::integer_infer(&ckpt, &x.cast::<f64>(), profile, calib)?.cast::<T>()
        }
    };
    MetricsReport::compute(&logits, &reference, &data.labels, ece_bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_spiral;
    use crate::model::{build_model, ModelKind, ModelSpec};

    fn spec(widths: &[usize]) -> ModelSpec {
        ModelSpec {
            kind: ModelKind::Mlp {
                widths: widths.to_vec(),
            },
            input_shape: vec![widths[0]],
            classes: *widths.last().unwrap(),
            seed: 3,
        }
    }

    fn small_config(epochs: usize) -> TrainConfig<f64> {
        let mut c = TrainConfig::new(Schedule::new(3, 6, 3).unwrap());
        c.prune.warmup_end = 3;
        c.prune.period_k = 2;
        c.epochs = epochs;
        c.optimizer = Optimizer::AdamW {
            lr: 1e-2,
            weight_decay: 0.0,
        };
        c.observer.mu = 0.05;
        c
    }

    #[test]
    fn quant_point_enumeration() {
        let m = build_model::<f64>(&spec(&[2, 8, 3])).unwrap();
        let pts =
            attach_quant_points(&m, &ObserverConfig::default(), Granularity::PerTensor, 0).unwrap();
        assert_eq!(pts.iter().filter(|p| p.is_weight()).count(), 2);
        assert_eq!(pts.iter().filter(|p| !p.is_weight()).count(), 2);
        let err = pts[0].qparams(8).unwrap_err();
        assert!(err.to_string().contains("input.activation"), "{err}");
    }

    #[test]
    fn pin_epochs_follow_rule() {
        let data = make_spiral::<f64>(20, 3, 0.1, 1).unwrap();
        let mut cfg = small_config(20);
        cfg.schedule = Schedule::new(10, 14, 4).unwrap();
        cfg.prune.warmup_end = 10;
        cfg.prune.period_k = 5;
        let out = train(
            build_model(&spec(&[2, 8, 3])).unwrap(),
            &data.train,
            &data.val,
            &cfg,
        )
        .unwrap();
        let pinned: Vec<usize> = out
            .report
            .rows
            .iter()
            .filter(|r| r.pin_event())
            .map(|r| r.epoch)
            .collect();
        assert_eq!(pinned, [10, 15, 20]);
        for r in &out.report.rows {
            assert_eq!(r.lambda, cfg.schedule.lambda::<f64>(r.epoch));
            for p in &r.pins {
                assert!(p.max_after <= p.tau[0]);
            }
        }
    }

    #[test]
    fn deterministic_report() {
        let data = make_spiral::<f64>(20, 3, 0.1, 2).unwrap();
        let cfg = small_config(8);
        let run = || {
            train(
                build_model(&spec(&[2, 8, 3])).unwrap(),
                &data.train,
                &data.val,
                &cfg,
            )
            .unwrap()
            .report
            .to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn disabled_quantization_matches_plain_loop() {
        let data = make_spiral::<f64>(20, 3, 0.1, 4).unwrap();
        let mut cfg = small_config(6);
        cfg.enable_fake_quant = false;
        cfg.enable_reverse_prune = false;
        let model = build_model::<f64>(&spec(&[2, 8, 3])).unwrap();
        let out = train(model.clone(), &data.train, &data.val, &cfg).unwrap();

        // Reference loop without any quantization machinery.
        let mut plain = model;
        let layers = plain.quantizable_layers();
        let sizes: Vec<usize> = layers
            .iter()
            .flat_map(|&i| {
                let l = &plain.layers()[i];
                [l.weight().unwrap().numel(), l.bias().unwrap().numel()]
            })
            .collect();
        let mut opt = OptimizerState::new(cfg.optimizer, &sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let total = data.train.len().div_ceil(cfg.batch_size) * cfg.epochs;
        let mut step = 0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let (x, y) = data.train.batch(chunk).unwrap();
                let mut g = Graph::new();
                let params = plain.bind(&mut g, true);
                let xv = g.constant(x);
                let logits = plain
                    .forward(&mut g, &params, xv, &mut crate::model::Identity)
                    .unwrap();
                let loss = g.softmax_cross_entropy(logits, &y).unwrap();
                g.backward(loss).unwrap();
                let lr = cfg.lr_schedule.at(cfg.optimizer.lr(), step, total);
                opt.begin_step();
                for (slot, (&li, b)) in layers.iter().zip(&params).enumerate() {
                    let gw = g.grad(b.weight).unwrap().to_vec();
                    let gb = g.grad(b.bias).unwrap().to_vec();
                    let (w, bias) = plain.params_mut(li).unwrap();
                    opt.update(2 * slot, w.data_mut(), &gw, lr);
                    opt.update(2 * slot + 1, bias.data_mut(), &gb, lr);
                }
                step += 1;
            }
        }
        assert_eq!(out.model, plain);
    }

    #[test]
    fn master_weights_stay_off_grid() {
        let data = make_spiral::<f64>(20, 3, 0.1, 5).unwrap();
        let mut cfg = small_config(10);
        cfg.enable_reverse_prune = false;
        let out = train(
            build_model(&spec(&[2, 8, 3])).unwrap(),
            &data.train,
            &data.val,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.report.final_row().unwrap().lambda, 1.0);
        let w = out.model.layers()[0].weight().unwrap();
        let qp = out.points[1].qparams(8).unwrap();
        let s = qp.scales()[0];
        let on_grid = w
            .data()
            .iter()
            .filter(|&&v| ((v / s) - (v / s).round()).abs() < 1e-9)
            .count();
        assert!(
            on_grid < w.numel() / 2,
            "{on_grid} of {} weights on grid",
            w.numel()
        );
    }

    #[test]
    fn eval_modes_agree_at_zero_blend() {
        let data = make_spiral::<f64>(20, 3, 0.1, 6).unwrap();
        let cfg = small_config(6);
        let out = train(
            build_model(&spec(&[2, 8, 3])).unwrap(),
            &data.train,
            &data.val,
            &cfg,
        )
        .unwrap();
        let fp = evaluate(&out, &data.val, EvalMode::Fp, 15).unwrap();
        let fq = evaluate(&out, &data.val, EvalMode::FakeQuant(0.0), 15).unwrap();
        assert_eq!(fp, fq);
        assert_eq!(fp.logit_mse, 0.0);
        let last = out.report.final_row().unwrap();
        let at_final = evaluate(&out, &data.val, EvalMode::FakeQuant(last.lambda), 15).unwrap();
        assert_eq!(at_final.top1, last.val_top1);
    }

    #[test]
    fn optimizer_steps() {
        let mut sgd = OptimizerState::<f64>::new(
            Optimizer::Sgd {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            &[1],
        );
        let mut w = [1.0];
        sgd.begin_step();
        sgd.update(0, &mut w, &[1.0], 0.1);
        assert!((w[0] - 0.9).abs() < 1e-15);
        sgd.begin_step();
        sgd.update(0, &mut w, &[1.0], 0.1);
        assert!((w[0] - (0.9 - 0.1 * 1.9)).abs() < 1e-15);

        // First Adam step moves each coordinate by lr regardless of gradient scale.
        let mut adam = OptimizerState::<f64>::new(
            Optimizer::AdamW {
                lr: 0.01,
                weight_decay: 0.0,
            },
            &[2],
        );
        let mut w = [0.0, 0.0];
        adam.begin_step();
        adam.update(0, &mut w, &[3.0, -1e-3], 0.01);
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(LrSchedule::Cosine.at(1.0, 0, 10), 1.0);
        assert!((LrSchedule::Cosine.at(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.at(0.3, 7, 10), 0.3);
    }

    #[test]
    fn divergence_is_reported() {
        let data = make_spiral::<f64>(10, 3, 0.1, 7).unwrap();
        let mut cfg = small_config(3);
        cfg.optimizer = Optimizer::Sgd {
            lr: 1e200,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        cfg.lr_schedule = LrSchedule::Constant;
        let err = train(
            build_model(&spec(&[2, 8, 3])).unwrap(),
            &data.train,
            &data.val,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(err.to_string().contains("max|w|"));
    }
}
