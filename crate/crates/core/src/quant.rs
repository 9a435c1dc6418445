//! Uniform affine quantizer, dequantizer and progressive blend.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Range guard applied to scales before division.
pub const SCALE_EPSILON: f64 = 1e-6;

/// Tie-breaking rule for `round(x / s + z)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoundingMode {
    #[default]
    HalfToEven,
    HalfAwayFromZero,
}

impl RoundingMode {
    pub fn round<T: Scalar>(self, x: T) -> T {
        let r = x.round();
        match self {
            RoundingMode::HalfAwayFromZero => r,
            RoundingMode::HalfToEven => {
                if (r - x).abs() == T::of(0.5) {
                    T::of(2.0) * (x / T::of(2.0)).round()
                } else {
                    r
                }
            }
        }
    }
}

/// One scale per tensor, or one per slice along `axis`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[default]
    PerTensor,
    PerChannel {
        axis: usize,
    },
}

impl Granularity {
    /// Per-output-channel granularity on axis 0.
    pub const OUTPUT_CHANNEL: Granularity = Granularity::PerChannel { axis: 0 };
}

/// Integer range `(q_min, q_max)` for a bit width.
pub fn derive_qrange(bits: u32, symmetric: bool) -> Result<(i32, i32)> {
    if bits != 4 && bits != 8 {
        return Err(Error::UnsupportedBits(bits));
    }
    Ok(if symmetric {
        (-(1 << (bits - 1)), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    })
}

/// Number of positive (symmetric) or total (asymmetric) steps of the grid.
pub fn grid_levels(bits: u32, symmetric: bool) -> Result<i32> {
    let (lo, hi) = derive_qrange(bits, symmetric)?;
    Ok(if symmetric { hi } else { hi - lo })
}

/// Smallest admissible scale for a grid.
pub fn scale_floor<T: Scalar>(bits: u32, symmetric: bool) -> Result<T> {
    Ok(T::of(SCALE_EPSILON) / T::of(grid_levels(bits, symmetric)? as f64))
}

/// Scale, zero-point and integer range of a uniform quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams<T> {
    bits: u32,
    scales: Vec<T>,
    zero_points: Vec<i32>,
    q_min: i32,
    q_max: i32,
    symmetric: bool,
    granularity: Granularity,
}

impl<T: Scalar> QuantParams<T> {
    pub fn symmetric(bits: u32, scale: T) -> Result<Self> {
        Self::build(bits, vec![scale], vec![0], true, Granularity::PerTensor)
    }

    pub fn asymmetric(bits: u32, scale: T, zero_point: i32) -> Result<Self> {
        Self::build(
            bits,
            vec![scale],
            vec![zero_point],
            false,
            Granularity::PerTensor,
        )
    }

    /// Symmetric per-channel parameters; one scale per slice of `axis`.
    pub fn symmetric_per_channel(bits: u32, scales: Vec<T>, axis: usize) -> Result<Self> {
        let zeros = vec![0; scales.len()];
        Self::build(bits, scales, zeros, true, Granularity::PerChannel { axis })
    }

    /// General constructor; validates every invariant.
    pub fn build(
        bits: u32,
        scales: Vec<T>,
        zero_points: Vec<i32>,
        symmetric: bool,
        granularity: Granularity,
    ) -> Result<Self> {
        let (q_min, q_max) = derive_qrange(bits, symmetric)?;
        if scales.is_empty() || scales.len() != zero_points.len() {
            return Err(Error::invalid(format!(
                "{} scales vs {} zero points",
                scales.len(),
                zero_points.len()
            )));
        }
        if granularity == Granularity::PerTensor && scales.len() != 1 {
            return Err(Error::invalid(
                "per-tensor parameters carry exactly one scale",
            ));
        }
        let floor = scale_floor::<T>(bits, symmetric)?;
        for &s in &scales {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(Error::invalid(format!(
                    "scale must be positive and finite, got {s}"
                )));
            }
            if s < floor {
                return Err(Error::invalid(format!("scale {s} below floor {floor}")));
            }
        }
        for &z in &zero_points {
            if symmetric && z != 0 {
                return Err(Error::invalid(
                    "symmetric quantization requires zero_point 0",
                ));
            }
            if !(q_min..=q_max).contains(&z) {
                return Err(Error::OutOfRange {
                    value: z as i64,
                    q_min,
                    q_max,
                });
            }
        }
        Ok(Self {
            bits,
            scales,
            zero_points,
            q_min,
            q_max,
            symmetric,
            granularity,
        })
    }

    /// Same grid in another scalar type; scales are kept at or above the target floor.
    pub fn cast<U: Scalar>(&self) -> Result<QuantParams<U>> {
        let floor = scale_floor::<U>(self.bits, self.symmetric)?;
        let scales = self
            .scales
            .iter()
            .map(|s| U::of(s.f64()).max(floor))
            .collect();
        QuantParams::build(
            self.bits,
            scales,
            self.zero_points.clone(),
            self.symmetric,
            self.granularity,
        )
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    /// The per-tensor scale, or the largest per-channel scale.
    pub fn max_scale(&self) -> T {
        self.scales.iter().copied().fold(T::zero(), T::max)
    }

    pub fn q_min(&self) -> i32 {
        self.q_min
    }

    pub fn q_max(&self) -> i32 {
        self.q_max
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// Maps each flat index of a tensor with `shape` to its parameter slot.
    fn channel_map(&self, shape: &[usize]) -> Result<ChannelMap> {
        match self.granularity {
            Granularity::PerTensor => Ok(ChannelMap {
                stride: 1,
                channels: 1,
                single: true,
            }),
            Granularity::PerChannel { axis } => {
                if axis >= shape.len() || shape[axis] != self.scales.len() {
                    return Err(Error::Shape {
                        op: "per-channel quantization",
                        lhs: shape.to_vec(),
                        rhs: vec![self.scales.len()],
                    });
                }
                Ok(ChannelMap {
                    stride: shape[axis + 1..].iter().product(),
                    channels: shape[axis],
                    single: false,
                })
            }
        }
    }

    /// `clip(round(x / s + z), q_min, q_max)` for a single value in slot `c`.
    pub fn quantize_value(&self, x: T, c: usize, rounding: RoundingMode) -> Result<i32> {
        let v = x / self.scales[c] + T::of(self.zero_points[c] as f64);
        let r = rounding.round(v);
        if r.is_nan() {
            return Err(Error::invalid(format!(
                "cannot quantize non-finite value {x}"
            )));
        }
        let clipped = r
            .max(T::of(self.q_min as f64))
            .min(T::of(self.q_max as f64));
        Ok(clipped.to_i32().expect("clipped value fits in i32"))
    }

    /// `s * (q - z)` for a single value in slot `c`.
    pub fn dequantize_value(&self, q: i32, c: usize) -> T {
        self.scales[c] * T::of((q - self.zero_points[c]) as f64)
    }
}

struct ChannelMap {
    stride: usize,
    channels: usize,
    single: bool,
}

impl ChannelMap {
    fn slot(&self, flat: usize) -> usize {
        if self.single {
            0
        } else {
            (flat / self.stride) % self.channels
        }
    }
}

/// Integer tensor on a quantization grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
}

pub fn quantize<T: Scalar>(
    x: &Tensor<T>,
    qp: &QuantParams<T>,
    rounding: RoundingMode,
) -> Result<QuantizedTensor> {
    let map = qp.channel_map(x.shape())?;
    let values = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| qp.quantize_value(v, map.slot(i), rounding))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedTensor {
        shape: x.shape().to_vec(),
        values,
    })
}

pub fn dequantize<T: Scalar>(q: &QuantizedTensor, qp: &QuantParams<T>) -> Result<Tensor<T>> {
    let map = qp.channel_map(&q.shape)?;
    let data = q
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(qp.q_min..=qp.q_max).contains(&v) {
                return Err(Error::OutOfRange {
                    value: v as i64,
                    q_min: qp.q_min,
                    q_max: qp.q_max,
                });
            }
            Ok(qp.dequantize_value(v, map.slot(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(q.shape.clone(), data)
}

/// `dequantize(quantize(x))`.
pub fn fake_quantize<T: Scalar>(
    x: &Tensor<T>,
    qp: &QuantParams<T>,
    rounding: RoundingMode,
) -> Result<Tensor<T>> {
    dequantize(&quantize(x, qp, rounding)?, qp)
}

/// Records `x + lambda * (fake_quantize(x) - x)` with a straight-through gradient.
pub fn blend<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    qp: &QuantParams<T>,
    lambda: T,
    rounding: RoundingMode,
) -> Result<Var> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(Error::invalid(format!(
            "blend coefficient {lambda} outside [0, 1]"
        )));
    }
    let target = fake_quantize(graph.try_value(x)?, qp, rounding)?;
    graph.ste_blend(x, &target, lambda)
}
