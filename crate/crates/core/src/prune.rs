//! Reverse pruning: tail pinning of master weights at robust thresholds.
//!
//! Weights are clipped to `[-tau, tau]`, never zeroed. `tau` is an EMA of
//! the `p_clip` quantile of `|w|`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::observer::{channel_slices, empirical_quantile, subsample};
use crate::quant::grid_levels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig<T> {
    pub p_clip: T,
    pub beta: T,
    pub period_k: usize,
    pub warmup_end: usize,
    /// One threshold per output channel instead of per tensor.
    pub per_channel: bool,
    pub s_max: usize,
}

impl<T: Scalar> Default for PruneConfig<T> {
    fn default() -> Self {
        Self {
            p_clip: T::of(0.95),
            beta: T::of(0.5),
            period_k: 5,
            warmup_end: 10,
            per_channel: false,
            s_max: 100_000,
        }
    }
}

impl<T: Scalar> PruneConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_clip > T::zero() && self.p_clip < T::one()) {
            return Err(Error::invalid("p_clip must lie inside (0, 1)"));
        }
        if !(self.beta > T::zero() && self.beta <= T::one()) {
            return Err(Error::invalid("beta must lie in (0, 1]"));
        }
        if self.period_k == 0 {
            return Err(Error::invalid("pin period K must be at least 1"));
        }
        if self.s_max == 0 {
            return Err(Error::invalid("prune s_max must be at least 1"));
        }
        Ok(())
    }
}

/// `p_clip` quantile of `|w|` over a subsample of at most `s_max` values.
pub fn robust_threshold<T: Scalar>(
    w: &[T],
    p_clip: T,
    s_max: usize,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    if w.is_empty() {
        return Err(Error::Empty("weight tensor"));
    }
    let abs: Vec<T> = w.iter().map(|x| x.abs()).collect();
    empirical_quantile(&subsample(&abs, s_max, rng), p_clip)
}

/// Elementwise clip to `[-tau, tau]`.
pub fn pin_weights<T: Scalar>(w: &Tensor<T>, tau: T) -> Tensor<T> {
    let mut out = w.clone();
    pin_in_place(out.data_mut(), tau);
    out
}

fn pin_in_place<T: Scalar>(w: &mut [T], tau: T) {
    for v in w {
        if *v > tau {
            *v = tau;
        } else if *v < -tau {
            *v = -tau;
        }
    }
}

/// Whether epoch `epoch` is a pin event.
pub fn pin_due(epoch: usize, warmup_end: usize, period_k: usize) -> bool {
    assert!(period_k >= 1, "pin period must be positive");
    epoch >= warmup_end && (epoch - warmup_end).is_multiple_of(period_k)
}

/// Symmetric step sizes before (`max|w| / L`) and after (`tau / L`) pinning.
pub fn step_size_contraction<T: Scalar>(w_before: &Tensor<T>, tau: T, bits: u32) -> Result<(T, T)> {
    let levels = T::of(grid_levels(bits, true)? as f64);
    Ok((w_before.max_abs() / levels, tau / levels))
}

/// Threshold EMA for every prunable layer of a model.
#[derive(Clone, Debug)]
pub struct PruneState<T> {
    config: PruneConfig<T>,
    taus: Vec<Option<Vec<T>>>,
    rng: ChaCha8Rng,
}

/// What happened to one layer at a pin event.
#[derive(Clone, Debug, PartialEq)]
pub struct PinRecord<T> {
    pub layer: usize,
    pub tau: Vec<T>,
    pub max_before: T,
    pub max_after: T,
}

impl<T: Scalar> PruneState<T> {
    pub fn new(config: PruneConfig<T>, layers: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            taus: vec![None; layers],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &PruneConfig<T> {
        &self.config
    }

    pub fn tau(&self, layer: usize) -> Option<&[T]> {
        self.taus.get(layer).and_then(|t| t.as_deref())
    }

    /// First call sets `tau = tau_hat`; later calls apply the EMA.
    pub fn update_threshold(&mut self, layer: usize, tau_hat: &[T]) -> Result<()> {
        if tau_hat.iter().any(|&t| !(t >= T::zero())) {
            return Err(Error::invalid("threshold estimate must be non-negative"));
        }
        let beta = self.config.beta;
        let slot = self
            .taus
            .get_mut(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} has no prune state")))?;
        *slot = Some(match slot.take() {
            None => tau_hat.to_vec(),
            Some(prev) => {
                if prev.len() != tau_hat.len() {
                    return Err(Error::invalid("threshold arity changed between updates"));
                }
                prev.iter()
                    .zip(tau_hat)
                    .map(|(&t, &h)| (T::one() - beta) * t + beta * h)
                    .collect()
            }
        });
        Ok(())
    }

    /// Robust threshold estimate(s) for `w` under the configured granularity.
    pub fn estimate(&mut self, w: &Tensor<T>) -> Result<Vec<T>> {
        let (p, s_max) = (self.config.p_clip, self.config.s_max);
        if self.config.per_channel {
            channel_slices(w.data(), w.shape(), 0)?
                .iter()
                .map(|c| robust_threshold(c, p, s_max, &mut self.rng))
                .collect()
        } else {
            Ok(vec![robust_threshold(w.data(), p, s_max, &mut self.rng)?])
        }
    }

    /// Refreshes the threshold of `layer` from its current weights.
    pub fn refresh(&mut self, layer: usize, w: &Tensor<T>) -> Result<()> {
        let est = self.estimate(w)?;
        self.update_threshold(layer, &est)
    }

    /// Clips `w` in place to the current threshold of `layer`.
    pub fn pin(&self, layer: usize, w: &mut Tensor<T>) -> Result<PinRecord<T>> {
        let tau = self
            .tau(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} threshold not initialized")))?
            .to_vec();
        let max_before = w.max_abs();
        if tau.len() == 1 {
            pin_in_place(w.data_mut(), tau[0]);
        } else {
            let channels = w.shape()[0];
            if channels != tau.len() {
                return Err(Error::Shape {
                    op: "pin",
                    lhs: w.shape().to_vec(),
                    rhs: vec![tau.len()],
                });
            }
            let inner = w.numel() / channels;
            for (row, &t) in w.data_mut().chunks_mut(inner).zip(&tau) {
                pin_in_place(row, t);
            }
        }
        Ok(PinRecord {
            layer,
            tau,
            max_before,
            max_after: w.max_abs(),
        })
    }
}
