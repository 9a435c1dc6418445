//! Robust quantile statistics with subsampling and EMA smoothing.
//!
//! Weight observers track the `p_hi` quantile of `|w|` and produce symmetric
//! parameters. Activation observers track the `p_lo`/`p_hi` quantiles of the
//! raw values and produce asymmetric parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::{
    derive_qrange, grid_levels, scale_floor, Granularity, QuantParams, RoundingMode,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index `ceil(p * n)`, clamped to `1..=n`.
///
/// Products within a few ulps of an integer snap to it, so decimal levels
/// such as `0.07 * 100` give rank 7 rather than the 8 that the binary
/// representation of `0.07` would produce.
pub fn quantile_rank<T: Scalar>(p: T, n: usize) -> usize {
    let prod = p * T::count(n);
    let slack = prod.abs() * T::epsilon() * T::of(8.0);
    (prod - slack).ceil().to_usize().unwrap_or(0).clamp(1, n)
}

/// The `ceil(p * n)`-th order statistic (1-indexed) of `samples`.
pub fn empirical_quantile<T: Scalar>(samples: &[T], p: T) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::Empty("quantile sample set"));
    }
    if !(p > T::zero() && p <= T::one()) {
        return Err(Error::invalid(format!("quantile level {p} outside (0, 1]")));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::invalid("quantile of NaN samples"));
    }
    let k = quantile_rank(p, samples.len()) - 1;
    let mut buf = samples.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(*nth)
}

/// All values when `values.len() <= s_max`, otherwise `s_max` values drawn
/// uniformly without replacement.
pub fn subsample<T: Copy>(values: &[T], s_max: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if values.len() <= s_max {
        return values.to_vec();
    }
    rand::seq::index::sample(rng, values.len(), s_max)
        .into_iter()
        .map(|i| values[i])
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObserverKind {
    Weight,
    Activation,
}

/// Hyperparameters shared by all observers of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverConfig<T> {
    pub mu: T,
    pub p_hi: T,
    pub p_lo: T,
    pub s_max: usize,
    pub epsilon: T,
}

impl<T: Scalar> Default for ObserverConfig<T> {
    fn default() -> Self {
        Self {
            mu: T::of(1e-3),
            p_hi: T::of(0.999),
            p_lo: T::of(0.001),
            s_max: 100_000,
            epsilon: T::of(1e-6),
        }
    }
}

impl<T: Scalar> ObserverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let inside = |v: T| v > T::zero() && v < T::one();
        if !inside(self.mu) || !inside(self.p_hi) || !inside(self.p_lo) {
            return Err(Error::invalid(
                "observer mu, p_hi and p_lo must lie strictly inside (0, 1)",
            ));
        }
        if self.p_lo >= self.p_hi {
            return Err(Error::invalid("observer p_lo must be below p_hi"));
        }
        if self.s_max == 0 {
            return Err(Error::invalid("observer s_max must be at least 1"));
        }
        if !(self.epsilon > T::zero()) {
            return Err(Error::invalid("observer epsilon must be positive"));
        }
        Ok(())
    }
}

fn ema<T: Scalar>(prev: Option<T>, obs: T, mu: T) -> T {
    match prev {
        None => obs,
        Some(p) => (T::one() - mu) * p + mu * obs,
    }
}

/// EMA quantile state of one quantization point.
#[derive(Clone, Debug)]
pub struct ObserverState<T> {
    kind: ObserverKind,
    granularity: Granularity,
    config: ObserverConfig<T>,
    m_ema: Option<Vec<T>>,
    a_ema: Option<T>,
    b_ema: Option<T>,
    updates: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ObserverState<T> {
    pub fn new(
        kind: ObserverKind,
        granularity: Granularity,
        config: ObserverConfig<T>,
        rng_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if kind == ObserverKind::Activation && granularity != Granularity::PerTensor {
            return Err(Error::invalid("activation observers are per-tensor only"));
        }
        Ok(Self {
            kind,
            granularity,
            config,
            m_ema: None,
            a_ema: None,
            b_ema: None,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn weight(config: ObserverConfig<T>, granularity: Granularity, seed: u64) -> Result<Self> {
        Self::new(ObserverKind::Weight, granularity, config, seed)
    }

    pub fn activation(config: ObserverConfig<T>, seed: u64) -> Result<Self> {
        Self::new(
            ObserverKind::Activation,
            Granularity::PerTensor,
            config,
            seed,
        )
    }

    pub fn kind(&self) -> ObserverKind {
        self.kind
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn config(&self) -> &ObserverConfig<T> {
        &self.config
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_initialized(&self) -> bool {
        self.updates > 0
    }

    /// Smoothed `|w|` quantile, one entry per channel when per-channel.
    pub fn m_ema(&self) -> Option<&[T]> {
        self.m_ema.as_deref()
    }

    pub fn a_ema(&self) -> Option<T> {
        self.a_ema
    }

    pub fn b_ema(&self) -> Option<T> {
        self.b_ema
    }

    /// Overrides the smoothed weight statistic (used when restoring state).
    pub fn set_weight_stats(&mut self, m: Vec<T>) {
        self.m_ema = Some(m);
        self.updates = self.updates.max(1);
    }

    /// Overrides the smoothed activation range (used when restoring state).
    pub fn set_activation_stats(&mut self, a: T, b: T) {
        self.a_ema = Some(a);
        self.b_ema = Some(b);
        self.updates = self.updates.max(1);
    }

    pub fn update_weight_stats(&mut self, w: &Tensor<T>) -> Result<()> {
        if self.kind != ObserverKind::Weight {
            return Err(Error::invalid(
                "update_weight_stats on an activation observer",
            ));
        }
        let abs: Vec<T> = w.data().iter().map(|x| x.abs()).collect();
        let stats = match self.granularity {
            Granularity::PerTensor => {
                let sample = subsample(&abs, self.config.s_max, &mut self.rng);
                vec![empirical_quantile(&sample, self.config.p_hi)?]
            }
            Granularity::PerChannel { axis } => {
                let channels = channel_slices(&abs, w.shape(), axis)?;
                channels
                    .iter()
                    .map(|c| {
                        let sample = subsample(c, self.config.s_max, &mut self.rng);
                        empirical_quantile(&sample, self.config.p_hi)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let mu = self.config.mu;
        let next = match &self.m_ema {
            None => stats,
            Some(prev) => {
                if prev.len() != stats.len() {
                    return Err(Error::Shape {
                        op: "update_weight_stats",
                        lhs: vec![prev.len()],
                        rhs: vec![stats.len()],
                    });
                }
                prev.iter()
                    .zip(&stats)
                    .map(|(&p, &m)| ema(Some(p), m, mu))
                    .collect()
            }
        };
        self.m_ema = Some(next);
        self.updates += 1;
        Ok(())
    }

    pub fn update_activation_stats(&mut self, x: &Tensor<T>) -> Result<()> {
        if self.kind != ObserverKind::Activation {
            return Err(Error::invalid(
                "update_activation_stats on a weight observer",
            ));
        }
        let sample = subsample(x.data(), self.config.s_max, &mut self.rng);
        let a = empirical_quantile(&sample, self.config.p_lo)?;
        let b = empirical_quantile(&sample, self.config.p_hi)?;
        let mu = self.config.mu;
        self.a_ema = Some(ema(self.a_ema, a, mu));
        self.b_ema = Some(ema(self.b_ema, b, mu));
        self.updates += 1;
        Ok(())
    }

    /// Symmetric parameters `s = max(m, eps) / (2^(b-1) - 1)`, `z = 0`.
    pub fn weight_qparams(&self, bits: u32) -> Result<QuantParams<T>> {
        let m = self
            .m_ema
            .as_ref()
            .ok_or_else(|| Error::UninitializedObserver("weight".into()))?;
        weight_qparams_from(m, self.config.epsilon, bits, self.granularity)
    }

    /// Asymmetric parameters from the smoothed `[a, b]` range.
    pub fn activation_qparams(&self, bits: u32) -> Result<QuantParams<T>> {
        match (self.a_ema, self.b_ema) {
            (Some(a), Some(b)) => activation_qparams_from(a, b, self.config.epsilon, bits),
            _ => Err(Error::UninitializedObserver("activation".into())),
        }
    }

    pub fn qparams(&self, bits: u32) -> Result<QuantParams<T>> {
        match self.kind {
            ObserverKind::Weight => self.weight_qparams(bits),
            ObserverKind::Activation => self.activation_qparams(bits),
        }
    }
}

/// Symmetric parameters from per-tensor (`m.len() == 1`) or per-channel magnitudes.
pub fn weight_qparams_from<T: Scalar>(
    m: &[T],
    epsilon: T,
    bits: u32,
    granularity: Granularity,
) -> Result<QuantParams<T>> {
    let levels = T::of(grid_levels(bits, true)? as f64);
    let floor = scale_floor::<T>(bits, true)?;
    let scales: Vec<T> = m
        .iter()
        .map(|&v| (v.max(epsilon) / levels).max(floor))
        .collect();
    match granularity {
        Granularity::PerTensor => QuantParams::symmetric(bits, scales[0]),
        Granularity::PerChannel { axis } => QuantParams::symmetric_per_channel(bits, scales, axis),
    }
}

/// Asymmetric parameters `s = max(b - a, eps) / (2^b - 1)`,
/// `z = clip(round(-a / s), q_min, q_max)`.
pub fn activation_qparams_from<T: Scalar>(
    a: T,
    b: T,
    epsilon: T,
    bits: u32,
) -> Result<QuantParams<T>> {
    let (q_min, q_max) = derive_qrange(bits, false)?;
    let levels = T::of(grid_levels(bits, false)? as f64);
    let s = ((b - a).max(epsilon) / levels).max(scale_floor::<T>(bits, false)?);
    let z = RoundingMode::HalfToEven
        .round(-a / s)
        .max(T::of(q_min as f64))
        .min(T::of(q_max as f64));
    QuantParams::asymmetric(bits, s, z.to_i32().expect("clipped zero point fits in i32"))
}

/// Splits a flat buffer laid out with `shape` into one vector per slice of `axis`.
pub(crate) fn channel_slices<T: Copy>(
    data: &[T],
    shape: &[usize],
    axis: usize,
) -> Result<Vec<Vec<T>>> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let channels = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let mut out = vec![Vec::with_capacity(data.len() / channels); channels];
    for (i, &v) in data.iter().enumerate() {
        out[(i / stride) % channels].push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mu: f64, p_lo: f64, p_hi: f64) -> ObserverConfig<f64> {
        ObserverConfig {
            mu,
            p_lo,
            p_hi,
            ..ObserverConfig::default()
        }
    }

    fn sort_index_oracle(samples: &[f64], p: f64) -> f64 {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let k = (p * s.len() as f64).ceil() as usize;
        s[k.clamp(1, s.len()) - 1]
    }

    #[test]
    fn quantile_examples() {
        let s = [0.0, 1.0, 1.0, 3.0, 5.0];
        assert_eq!(sort_index_oracle(&s, 0.8), 3.0);
        assert_eq!(empirical_quantile(&s, 0.8).unwrap(), 3.0);
        assert_eq!(sort_index_oracle(&s, 0.999), 5.0);
        assert_eq!(empirical_quantile(&s, 0.999).unwrap(), 5.0);
        for p in [0.001, 0.5, 0.999] {
            assert_eq!(empirical_quantile(&[7.0], p).unwrap(), 7.0);
        }
        assert!(matches!(
            empirical_quantile::<f64>(&[], 0.5),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn quantile_rank_follows_decimal_levels() {
        assert_eq!(quantile_rank(0.07f64, 100), 7);
        assert_eq!(quantile_rank(0.001f64, 1000), 1);
        assert_eq!(quantile_rank(0.1f64, 30), 3);
        assert_eq!(quantile_rank(0.95f64, 20), 19);
        assert_eq!(quantile_rank(0.999f64, 5), 5);
        assert_eq!(quantile_rank(1e-9f64, 5), 1);
        assert_eq!(quantile_rank(0.8f32, 5), 4);
    }

    #[test]
    fn subsample_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..10).map(f64::from).collect();
        let mut all = subsample(&v, 100, &mut rng);
        all.sort_by(f64::total_cmp);
        assert_eq!(all, v);

        let a = subsample(&v, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let b = subsample(&v, 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);

        let big: Vec<u32> = (0..200_000).collect();
        let mut s = subsample(&big, 100_000, &mut rng);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 100_000);
    }

    #[test]
    fn weight_ema_examples() {
        let mut obs =
            ObserverState::weight(cfg(0.1, 0.001, 0.999), Granularity::PerTensor, 0).unwrap();
        obs.update_weight_stats(&Tensor::from_f64([2], &[2.0, -1.0]).unwrap())
            .unwrap();
        assert_eq!(obs.m_ema().unwrap(), &[2.0]);
        obs.update_weight_stats(&Tensor::from_f64([1], &[4.0]).unwrap())
            .unwrap();
        assert!((obs.m_ema().unwrap()[0] - 2.2).abs() < 1e-15);

        let mut obs =
            ObserverState::weight(cfg(0.1, 0.001, 0.999), Granularity::PerTensor, 0).unwrap();
        obs.update_weight_stats(&Tensor::from_f64([3], &[-3.0, 1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(
            obs.m_ema().unwrap(),
            &[sort_index_oracle(&[3.0, 1.0, 2.0], 0.999)]
        );
        assert_eq!(obs.m_ema().unwrap(), &[3.0]);
    }

    #[test]
    fn activation_ema_examples() {
        let mut obs = ObserverState::activation(cfg(0.5, 0.25, 0.75), 0).unwrap();
        let x = [0.0, 1.0, 2.0, 3.0];
        obs.update_activation_stats(&Tensor::from_f64([4], &x).unwrap())
            .unwrap();
        assert_eq!(obs.a_ema(), Some(sort_index_oracle(&x, 0.25)));
        assert_eq!(obs.b_ema(), Some(sort_index_oracle(&x, 0.75)));
        assert_eq!((obs.a_ema(), obs.b_ema()), (Some(0.0), Some(2.0)));

        // Batch whose quantiles are a = -1, b = 3.
        obs.update_activation_stats(&Tensor::from_f64([4], &[-1.0, -1.0, 3.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!((obs.a_ema(), obs.b_ema()), (Some(-0.5), Some(2.5)));

        let mut obs = ObserverState::activation(ObserverConfig::default(), 0).unwrap();
        obs.update_activation_stats(&Tensor::from_f64([3], &[5.0, 5.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!((obs.a_ema(), obs.b_ema()), (Some(5.0), Some(5.0)));
    }

    #[test]
    fn kind_mismatch_and_empty_errors() {
        let mut w =
            ObserverState::<f64>::weight(ObserverConfig::default(), Granularity::PerTensor, 0)
                .unwrap();
        assert!(w.update_activation_stats(&Tensor::scalar(1.0)).is_err());
        assert!(matches!(
            w.weight_qparams(8),
            Err(Error::UninitializedObserver(_))
        ));
        let a = ObserverState::<f64>::activation(ObserverConfig::default(), 0).unwrap();
        assert!(matches!(
            a.activation_qparams(8),
            Err(Error::UninitializedObserver(_))
        ));
        assert!(ObserverState::<f64>::new(
            ObserverKind::Activation,
            Granularity::OUTPUT_CHANNEL,
            ObserverConfig::default(),
            0
        )
        .is_err());
        assert!(ObserverState::<f64>::activation(cfg(1.0, 0.001, 0.999), 0).is_err());
    }

    #[test]
    fn weight_qparams_examples() {
        let qp = weight_qparams_from(&[1.27f64], 1e-6, 8, Granularity::PerTensor).unwrap();
        assert!((qp.scales()[0] - 0.01).abs() < 1e-15);
        assert_eq!(qp.zero_points(), &[0]);

        let qp = weight_qparams_from(&[0.0f64], 1e-6, 8, Granularity::PerTensor).unwrap();
        assert!((qp.scales()[0] - 7.874015748031496e-9).abs() < 1e-20);

        let qp =
            weight_qparams_from(&[1.0f64, 10.0], 1e-6, 8, Granularity::OUTPUT_CHANNEL).unwrap();
        assert_eq!(qp.scales(), &[1.0 / 127.0, 10.0 / 127.0]);
    }

    #[test]
    fn activation_qparams_examples() {
        let qp = activation_qparams_from(-1.0f64, 1.55, 1e-6, 8).unwrap();
        assert!((qp.scales()[0] - 0.01).abs() < 1e-15);
        assert_eq!(qp.zero_points(), &[100]);

        let qp = activation_qparams_from(0.0f64, 2.55, 1e-6, 8).unwrap();
        assert!((qp.scales()[0] - 0.01).abs() < 1e-15);
        assert_eq!(qp.zero_points(), &[0]);

        // -a / s = -5 * 255 / 1e-6 < 0, clipped to q_min.
        let qp = activation_qparams_from(5.0f64, 5.0, 1e-6, 8).unwrap();
        assert!((qp.scales()[0] - 1e-6 / 255.0).abs() < 1e-22);
        assert_eq!(qp.zero_points(), &[0]);

        // Negative-only range clips to q_max.
        let qp = activation_qparams_from(-5.0f64, -4.0, 1e-6, 8).unwrap();
        assert_eq!(qp.zero_points(), &[255]);
    }

    #[test]
    fn per_channel_weight_stats() {
        let mut obs =
            ObserverState::weight(cfg(0.5, 0.001, 0.999), Granularity::OUTPUT_CHANNEL, 3).unwrap();
        let w = Tensor::from_f64([2, 3], &[1.0, -0.5, 0.2, 10.0, -3.0, 4.0]).unwrap();
        obs.update_weight_stats(&w).unwrap();
        assert_eq!(obs.m_ema().unwrap(), &[1.0, 10.0]);
        let qp = obs.weight_qparams(8).unwrap();
        assert_eq!(qp.scales(), &[1.0 / 127.0, 10.0 / 127.0]);
    }
}
