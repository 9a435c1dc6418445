//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines are always printed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use qtlab::autograd::{Graph, Var};
use qtlab::backend::{
    integer_infer, ActivationSite, BackendProfile, Checkpoint, CheckpointMeta, LayerDesc, LayerTag,
    QuantLayer,
};
use qtlab::config::RunConfig;
use qtlab::curriculum::Schedule;
use qtlab::data::make_spiral;
use qtlab::experiment::{run, with_overrides, Comparison, ABLATION, ABLATION_PRESET};
use qtlab::metrics::{brier, ece, snr_db};
use qtlab::model::{build_model, ForwardHook, Identity, Model, ModelKind, ModelSpec};
use qtlab::observer::empirical_quantile;
use qtlab::prune::step_size_contraction;
use qtlab::quant::{fake_quantize, quantize, Granularity, QuantParams, RoundingMode};
use qtlab::trainer::{evaluate, EvalMode};
use qtlab::{Result, Tensor64};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .expect("global pool");
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("schedule exactness", schedule_exactness),
        ("quantizer suite", quantizer_suite),
        ("quantile oracle", quantile_oracle),
        ("STE contract", ste_contract),
        ("reverse-pruning contract", prune_contract),
        ("quant-trim vs baseline", quant_trim_vs_baseline),
        ("ablation convergence", ablation_convergence),
        ("training dip and recovery", dip_and_recovery),
        ("checkpoint and metrics plumbing", plumbing),
        ("rounding-mode divergence", rounding_divergence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "criterion {:>2} {}: {} ({}) [{:.2?}]",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(t: Duration, limit: Duration) -> bool {
    t < limit
}

// 1

fn lambda_oracle(ew: f64, ef: f64, h: f64, cap: f64, t: f64) -> f64 {
    if t < ew {
        0.0
    } else if t < ef {
        0.5 * ((t - ew) / (ef - ew)).powi(4)
    } else {
        let r = ((t - ef) / h).min(1.0);
        0.5 + (cap - 0.5) * r * r
    }
}

fn schedule_exactness() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let ew = rng.random_range(0..30usize);
        let ef = ew + rng.random_range(1..60usize);
        let h = rng.random_range(1..60usize);
        let cap = rng.random_range(0.5..=1.0);
        let s = Schedule::with_cap(ew, ef, h, cap).unwrap();
        let end = (ef + h + 10) as f64;
        for i in 0..10_000 {
            let t = end * i as f64 / 9_999.0;
            let got: f64 = s.lambda_at(t);
            worst = worst.max((got - lambda_oracle(ew as f64, ef as f64, h as f64, cap, t)).abs());
        }
    }
    let el = t0.elapsed();
    verdict(
        worst <= 1e-12 && within(el, Duration::from_secs(1)),
        format!("max abs error {worst:.1e} over 200000 points"),
    )
}

// 2

#[derive(Clone, Debug)]
struct QuantCase {
    qp: QuantParams<f64>,
    x: f64,
    y: f64,
    rounding: RoundingMode,
}

fn quant_case() -> impl Strategy<Value = QuantCase> {
    (
        prop::sample::select(vec![4u32, 8]),
        any::<bool>(),
        -3.0..2.0f64,
        0.0..1.0f64,
        any::<bool>(),
        prop_oneof![
            3 => -400.0..400.0f64,
            1 => (-300i32..300).prop_map(|k| k as f64 + 0.5),
            1 => -1e6..1e6f64,
        ],
        -400.0..400.0f64,
    )
        .prop_map(|(bits, symmetric, log_s, zf, away, xu, yu)| {
            let s = 10f64.powf(log_s);
            let qp = if symmetric {
                QuantParams::symmetric(bits, s).unwrap()
            } else {
                let z = (zf * ((1 << bits) - 1) as f64).round() as i32;
                QuantParams::asymmetric(bits, s, z).unwrap()
            };
            let rounding = if away {
                RoundingMode::HalfAwayFromZero
            } else {
                RoundingMode::HalfToEven
            };
            // Offsets in units of the step so ties and the saturation region are hit.
            QuantCase {
                x: xu * s,
                y: yu * s,
                qp,
                rounding,
            }
        })
}

fn fq(qp: &QuantParams<f64>, x: f64, r: RoundingMode) -> f64 {
    fake_quantize(&Tensor64::vector(vec![x]), qp, r)
        .unwrap()
        .data()[0]
}

fn check_quant_case(c: &QuantCase) -> std::result::Result<(), TestCaseError> {
    let (qp, r) = (&c.qp, c.rounding);
    let s = qp.scales()[0];
    let z = qp.zero_points()[0] as f64;
    let (lo, hi) = (s * (qp.q_min() as f64 - z), s * (qp.q_max() as f64 - z));
    let fx = fq(qp, c.x, r);
    if (lo..=hi).contains(&c.x) {
        prop_assert!(
            (fx - c.x).abs() <= s / 2.0 * (1.0 + 1e-12),
            "error bound at x={}",
            c.x
        );
    } else if c.x > hi {
        prop_assert_eq!(fx, hi);
    } else {
        prop_assert_eq!(fx, lo);
    }
    let fy = fq(qp, c.y, r);
    if c.x <= c.y {
        prop_assert!(fx <= fy, "monotonicity {} {}", c.x, c.y);
    } else {
        prop_assert!(fy <= fx, "monotonicity {} {}", c.y, c.x);
    }
    prop_assert_eq!(fq(qp, fx, r), fx, "idempotence");
    let q = quantize(&Tensor64::vector(vec![c.x, c.y]), qp, r).unwrap();
    prop_assert!(q
        .values
        .iter()
        .all(|v| (qp.q_min()..=qp.q_max()).contains(v)));
    Ok(())
}

fn quantizer_suite() -> Verdict {
    let t0 = Instant::now();
    let cases = 100_000;
    let mut runner = TestRunner::new(PtConfig {
        cases,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let result = runner.run(&quant_case(), |c| check_quant_case(&c));
    let el = t0.elapsed();
    match result {
        Ok(()) => verdict(
            within(el, Duration::from_secs(30)),
            format!("{cases} cases, 0 violations"),
        ),
        Err(e) => verdict(false, format!("violation: {e}")),
    }
}

// 3

const LEVELS_PER_MILLE: [usize; 6] = [1, 250, 500, 750, 950, 999];

fn oracle_quantile(sorted: &[f64], per_mille: usize) -> f64 {
    let rank = (per_mille * sorted.len()).div_ceil(1000).max(1);
    sorted[rank - 1]
}

fn quantile_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut checked = 0;
    let mut sets: Vec<Vec<f64>> = Vec::new();
    for i in 0..100 {
        let n = if i < 10 {
            i + 1
        } else {
            rng.random_range(1..=10_000)
        };
        // Half the sets draw from a small pool so duplicates are common.
        let pool = if i % 2 == 0 { 7 } else { 1_000_000 };
        sets.push(
            (0..n)
                .map(|_| rng.random_range(0..pool) as f64 - pool as f64 / 2.0)
                .collect(),
        );
    }
    sets.push((0..10_000).map(|i| (i % 13) as f64).collect());
    for v in &sets {
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        for &pm in &LEVELS_PER_MILLE {
            let got = empirical_quantile(v, pm as f64 / 1000.0).unwrap();
            checked += 1;
            mismatches += usize::from(got != oracle_quantile(&sorted, pm));
        }
    }
    let el = t0.elapsed();
    verdict(
        mismatches == 0 && within(el, Duration::from_secs(30)),
        format!("{checked} (set, p) pairs, {mismatches} mismatches"),
    )
}

// 4

/// Blends every quantization point. The first forward records the residual
/// `fake_quantize(v) - v`; later forwards replay it as a constant.
struct Blend {
    lambda: f64,
    qps: Vec<Option<QuantParams<f64>>>,
    residuals: Vec<Option<Tensor64>>,
    replay: bool,
}

impl Blend {
    fn new(lambda: f64, points: usize) -> Self {
        Self {
            lambda,
            qps: vec![None; points],
            residuals: vec![None; points],
            replay: false,
        }
    }

    fn apply(&mut self, g: &mut Graph<f64>, point: usize, v: Var, weight: bool) -> Result<Var> {
        let value = g.value(v).clone();
        let target = if self.replay {
            let r = self.residuals[point].as_ref().expect("recorded");
            Tensor64::new(
                value.shape().to_vec(),
                value
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a + b)
                    .collect(),
            )?
        } else {
            let qp = self.qps[point]
                .get_or_insert_with(|| {
                    if weight {
                        QuantParams::symmetric(8, value.max_abs() / 127.0).unwrap()
                    } else {
                        let lo = value.data().iter().cloned().fold(0.0, f64::min);
                        let hi = value.data().iter().cloned().fold(0.0, f64::max);
                        let s = (hi - lo).max(1e-6) / 255.0;
                        QuantParams::asymmetric(8, s, (-lo / s).round() as i32).unwrap()
                    }
                })
                .clone();
            let t = fake_quantize(&value, &qp, RoundingMode::HalfToEven)?;
            self.residuals[point] = Some(Tensor64::new(
                value.shape().to_vec(),
                t.data()
                    .iter()
                    .zip(value.data())
                    .map(|(a, b)| a - b)
                    .collect(),
            )?);
            t
        };
        g.ste_blend(v, &target, self.lambda)
    }
}

impl ForwardHook<f64> for Blend {
    fn weight(&mut self, g: &mut Graph<f64>, point: usize, w: Var) -> Result<Var> {
        self.apply(g, point, w, true)
    }
    fn activation(&mut self, g: &mut Graph<f64>, point: usize, x: Var) -> Result<Var> {
        self.apply(g, point, x, false)
    }
}

fn loss_and_grads(
    model: &Model<f64>,
    x: &Tensor64,
    labels: &[usize],
    hook: &mut dyn ForwardHook<f64>,
) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, &params, xv, hook).unwrap();
    let loss = g.softmax_cross_entropy(out, labels).unwrap();
    let value = g.value(loss).item().unwrap();
    g.backward(loss).unwrap();
    let grads = params
        .iter()
        .flat_map(|p| {
            let mut v = g.grad(p.weight).unwrap().to_vec();
            v.extend_from_slice(g.grad(p.bias).unwrap());
            v
        })
        .collect();
    (value, grads)
}

fn perturbed(model: &Model<f64>, coord: usize, delta: f64) -> Model<f64> {
    let mut m = model.clone();
    let mut left = coord;
    let mut done = false;
    for i in 0..m.layers().len() {
        let Some((w, b)) = m.params_mut(i) else {
            continue;
        };
        for t in [w, b] {
            if !done && left < t.numel() {
                t.data_mut()[left] += delta;
                done = true;
            } else if !done {
                left -= t.numel();
            }
        }
    }
    assert!(done, "coordinate {coord} out of range");
    m
}

fn ste_contract() -> Verdict {
    let spec = ModelSpec {
        kind: ModelKind::Mlp {
            widths: vec![2, 16, 3],
        },
        input_shape: vec![2],
        classes: 3,
        seed: 5,
    };
    let model = build_model::<f64>(&spec).unwrap();
    let data = make_spiral::<f64>(20, 3, 0.1, 5).unwrap().train;
    let (x, labels) = data.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let points = model.quant_sites().len();

    let (_, fp) = loss_and_grads(&model, &x, &labels, &mut Identity);
    let (_, at_zero) = loss_and_grads(&model, &x, &labels, &mut Blend::new(0.0, points));
    let bitwise = fp
        .iter()
        .map(|v| v.to_bits())
        .eq(at_zero.iter().map(|v| v.to_bits()));

    let h = 1e-6;
    let mut worst = 0.0f64;
    for lambda in [0.0, 0.3, 0.7, 1.0] {
        let mut hook = Blend::new(lambda, points);
        let (_, analytic) = loss_and_grads(&model, &x, &labels, &mut hook);
        hook.replay = true;
        for (i, &a) in analytic.iter().enumerate() {
            let plus = loss_and_grads(&perturbed(&model, i, h), &x, &labels, &mut hook).0;
            let minus = loss_and_grads(&perturbed(&model, i, -h), &x, &labels, &mut hook).0;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    verdict(
        bitwise && worst <= 1e-4,
        format!(
            "lambda=0 bitwise equal: {bitwise}; max relative FD error {worst:.2e} over 4 lambdas"
        ),
    )
}

// 5

fn prune_contract() -> Verdict {
    let cfg = with_overrides(&RunConfig::default(), &["trainer.epochs=30"]).unwrap();
    let settings = cfg.settings().unwrap();
    let r = run(&settings).unwrap();
    let rows = &r.report().rows;
    let pin_epochs: Vec<usize> = rows
        .iter()
        .filter(|e| e.pin_event())
        .map(|e| e.epoch)
        .collect();
    let mut bound = true;
    let mut contraction = true;
    let mut events = 0;
    for row in rows.iter().filter(|e| e.pin_event()) {
        for p in &row.pins {
            events += 1;
            let tau = p.tau.iter().cloned().fold(0.0, f64::max);
            bound &= p.max_after <= tau;
            if tau < p.max_before {
                let (d, d_pinned) =
                    step_size_contraction(&Tensor64::vector(vec![p.max_before]), tau, 8).unwrap();
                contraction &= d_pinned < d;
            }
        }
    }
    let epochs_ok = pin_epochs == [10, 15, 20, 25, 30];
    verdict(
        epochs_ok && bound && contraction,
        format!("pin epochs {pin_epochs:?}, {events} layer pins, bound held: {bound}, step contracted: {contraction}"),
    )
}

// 6 and 8 share their runs.

fn comparisons() -> &'static (Vec<Comparison>, Duration) {
    static RUNS: std::sync::OnceLock<(Vec<Comparison>, Duration)> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = RunConfig::default();
        let runs = SEEDS
            .iter()
            .map(|&s| Comparison::run(&cfg, s).unwrap())
            .collect();
        (runs, t0.elapsed())
    })
}

fn quant_trim_vs_baseline() -> Verdict {
    let (runs, el) = comparisons();
    let mut fp_gap_ok = true;
    let (mut mse_wins, mut std_wins) = (0, 0);
    let mut notes = Vec::new();
    for c in runs {
        let q = evaluate(
            &c.quant_trim.outcome,
            &c.quant_trim.data.val,
            EvalMode::Fp,
            15,
        )
        .unwrap()
        .top1;
        let b = evaluate(&c.baseline.outcome, &c.baseline.data.val, EvalMode::Fp, 15)
            .unwrap()
            .top1;
        fp_gap_ok &= (q - b).abs() * 100.0 <= 2.0;
        let (qm, bm) = (
            c.quant_trim_sweep.rows[0].metrics.logit_mse,
            c.baseline_sweep.rows[0].metrics.logit_mse,
        );
        mse_wins += usize::from(qm < bm);
        let (qs, bs) = (c.quant_trim_sweep.top1_std(), c.baseline_sweep.top1_std());
        std_wins += usize::from(qs <= bs);
        notes.push(format!(
            "seed {}: fp {:.1}/{:.1}, mse {qm:.3e}/{bm:.3e}, std {:.2}/{:.2}",
            c.seed,
            q * 100.0,
            b * 100.0,
            qs * 100.0,
            bs * 100.0
        ));
    }
    verdict(
        fp_gap_ok && mse_wins >= 2 && std_wins >= 2 && within(*el, Duration::from_secs(600)),
        format!(
            "(a) {fp_gap_ok} (b) {mse_wins}/3 (c) {std_wins}/3; {}",
            notes.join("; ")
        ),
    )
}

fn dip_and_recovery() -> Verdict {
    let (runs, _) = comparisons();
    let ef = RunConfig::default()
        .settings()
        .unwrap()
        .train
        .schedule
        .ramp_end();
    let mut ok = 0;
    let mut notes = Vec::new();
    for c in runs {
        let rows = &c.quant_trim.report().rows;
        let acc = |e: usize| rows[e - 1].val_top1 * 100.0;
        let plateau = (ef - 10..ef - 5).map(acc).sum::<f64>() / 5.0;
        let dip = (ef - 5..=ef + 5).map(acc).fold(f64::INFINITY, f64::min);
        let n = rows.len();
        let last = (n - 4..=n).map(acc).sum::<f64>() / 5.0;
        let pass = dip < plateau && last >= plateau - 2.0;
        ok += usize::from(pass);
        notes.push(format!(
            "seed {}: plateau {plateau:.1}, min {dip:.1}, final {last:.1}",
            c.seed
        ));
    }
    verdict(ok >= 2, format!("{ok}/3 seeds; {}", notes.join("; ")))
}

// 7

fn ablation_convergence() -> Verdict {
    let t0 = Instant::now();
    let base = with_overrides(&RunConfig::default(), &ABLATION_PRESET).unwrap();
    let jobs: Vec<(usize, u64)> = (0..ABLATION.len())
        .flat_map(|r| SEEDS.map(|s| (r, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let finals: Vec<(usize, f64)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, s)| {
                let settings = ABLATION[r].configure(&base, s).unwrap().settings().unwrap();
                (
                    r,
                    run(&settings)
                        .unwrap()
                        .report()
                        .final_row()
                        .unwrap()
                        .val_top1
                        * 100.0,
                )
            })
            .collect()
    });
    let means: Vec<f64> = (0..ABLATION.len())
        .map(|r| {
            finals
                .iter()
                .filter(|(i, _)| *i == r)
                .map(|(_, a)| a)
                .sum::<f64>()
                / SEEDS.len() as f64
        })
        .collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max)
        - means.iter().cloned().fold(f64::MAX, f64::min);
    let listed: Vec<String> = ABLATION
        .iter()
        .zip(&means)
        .map(|(r, m)| format!("{} {m:.1}", r.name))
        .collect();
    verdict(
        spread <= 3.0 && within(t0.elapsed(), Duration::from_secs(1800)),
        format!("spread {spread:.2} points; {}", listed.join(", ")),
    )
}

// 9

fn plumbing() -> Verdict {
    let (runs, _) = comparisons();
    let ckpt = &runs[0].quant_trim.checkpoint;
    let bytes = ckpt.to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.qtck");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let round_trip =
        loaded.to_bytes() == bytes && std::fs::read(&path).unwrap() == bytes && &loaded == ckpt;

    let snr: f64 = snr_db(&[3.0, 4.0], &[3.0, 4.5]).unwrap();
    let probs = Tensor64::new(vec![2, 2], vec![0.9, 0.1, 0.6, 0.4]).unwrap();
    let e: f64 = ece(&probs, &[0, 1], 2).unwrap();
    let b: f64 = brier(&Tensor64::new(vec![1, 2], vec![0.8, 0.2]).unwrap(), &[0]).unwrap();
    let metrics =
        (snr - 20.0).abs() <= 1e-12 && (e - 0.25).abs() <= 1e-12 && (b - 0.08).abs() <= 1e-12;
    verdict(
        round_trip && metrics,
        format!(
            "round trip {round_trip} ({} bytes); snr {snr}, ece {e}, brier {b}",
            bytes.len()
        ),
    )
}

// 10

fn rounding_divergence() -> Verdict {
    let ckpt = Checkpoint {
        input_shape: vec![1],
        classes: 1,
        topology: vec![LayerDesc {
            tag: LayerTag::Dense,
            weight_shape: vec![1, 1],
            activation_site: false,
        }],
        layers: vec![QuantLayer {
            position: 0,
            qparams: QuantParams::symmetric(8, 1.0).unwrap(),
            payload: vec![1],
            master: vec![1.0],
            bias: vec![0.0],
            bias_q: vec![0],
        }],
        sites: vec![ActivationSite {
            id: "input.activation".into(),
            after: None,
            lo: 0.0,
            hi: 255.0,
            qparams: QuantParams::asymmetric(8, 1.0, 0).unwrap(),
        }],
        meta: CheckpointMeta {
            seed: 0,
            config_hash: "tie".into(),
            terminal_lambda: 1.0,
            bits: 8,
            granularity: Granularity::PerTensor,
            rounding: RoundingMode::HalfToEven,
        },
    };
    let x = Tensor64::new(vec![1, 1], vec![0.5]).unwrap();
    let even: BackendProfile = "pt-static".parse().unwrap();
    let away: BackendProfile = "pt-static-away".parse().unwrap();
    let a = integer_infer(&ckpt, &x, &even, None).unwrap().data()[0];
    let b = integer_infer(&ckpt, &x, &away, None).unwrap().data()[0];
    verdict(
        a != b,
        format!(
            "input 0.5 at scale 1: {} -> {a}, {} -> {b}",
            even.id(),
            away.id()
        ),
    )
}
