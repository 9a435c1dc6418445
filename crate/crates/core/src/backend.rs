//! Quantized checkpoints and an integer-only backend simulator.
//!
//! A [`BackendProfile`] is one compiler personality: weight granularity,
//! activation scaling policy, rounding mode and bit-width. Every dense/conv
//! runs as `sum (q_w - z_w)(q_x - z_x)` in checked 32-bit accumulators and
//! is requantized to the next activation grid with an FP64 multiplier.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Layer, Model, PointKind};
use crate::observer::{
    activation_qparams_from, empirical_quantile, weight_qparams_from, ObserverConfig,
};
use crate::quant::{Granularity, QuantParams, RoundingMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{QuantPoint, TrainOutcome};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"QTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerTag {
    Dense,
    Conv,
    Relu,
    Flatten,
}

impl LayerTag {
    fn code(self) -> u8 {
        match self {
            LayerTag::Dense => 0,
            LayerTag::Conv => 1,
            LayerTag::Relu => 2,
            LayerTag::Flatten => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => LayerTag::Dense,
            1 => LayerTag::Conv,
            2 => LayerTag::Relu,
            3 => LayerTag::Flatten,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDesc {
    pub tag: LayerTag,
    /// Weight shape for dense/conv, empty otherwise.
    pub weight_shape: Vec<usize>,
    /// Whether an activation site follows this layer.
    pub activation_site: bool,
}

/// Frozen dense/conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    /// Position in the topology.
    pub position: usize,
    pub qparams: QuantParams<f64>,
    pub payload: Vec<i32>,
    /// Full-precision master weights at export, kept for the FP reference.
    pub master: Vec<f64>,
    pub bias: Vec<f64>,
    /// Bias at scale `s_w * s_x` of the trained grids.
    pub bias_q: Vec<i32>,
}

/// Activation site with its trained range.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSite {
    pub id: String,
    /// Layer the site follows; `None` for the network input.
    pub after: Option<usize>,
    pub lo: f64,
    pub hi: f64,
    pub qparams: QuantParams<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    pub terminal_lambda: f64,
    pub bits: u32,
    pub granularity: Granularity,
    pub rounding: RoundingMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub topology: Vec<LayerDesc>,
    pub layers: Vec<QuantLayer>,
    pub sites: Vec<ActivationSite>,
    pub meta: CheckpointMeta,
}

/// Hex SHA-256 prefix (16 chars) of arbitrary text.
pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Freezes a finished training run.
pub fn export_checkpoint<T: Scalar>(outcome: &TrainOutcome<T>) -> Result<Checkpoint> {
    let cfg = &outcome.config;
    export_with(
        &outcome.model,
        &outcome.points,
        cfg.bits,
        cfg.rounding,
        CheckpointMeta {
            seed: cfg.seed,
            config_hash: short_hash(&format!("{cfg:?}")),
            terminal_lambda: outcome.terminal_lambda().f64(),
            bits: cfg.bits,
            granularity: cfg.granularity,
            rounding: cfg.rounding,
        },
    )
}

/// Quantizes every weight with its observer parameters and records activation grids.
///
/// Weights beyond the observed range saturate at the grid edge.
pub fn export_with<T: Scalar>(
    model: &Model<T>,
    points: &[QuantPoint<T>],
    bits: u32,
    rounding: RoundingMode,
    meta: CheckpointMeta,
) -> Result<Checkpoint> {
    let n_layers = model.layers().len();
    let mut sites = Vec::new();
    let mut weight_qp = vec![None; n_layers];
    for p in points {
        let qp = p.qparams(bits)?.cast::<f64>()?;
        match p.kind {
            PointKind::Weight => {
                let li = p
                    .layer
                    .ok_or_else(|| Error::invalid(format!("weight point {} has no layer", p.id)))?;
                weight_qp[li] = Some(qp);
            }
            PointKind::Activation => {
                let (lo, hi) = match (p.observer.a_ema(), p.observer.b_ema()) {
                    (Some(a), Some(b)) => (a.f64(), b.f64()),
                    _ => return Err(Error::UninitializedObserver(p.id.clone())),
                };
                sites.push(ActivationSite {
                    id: p.id.clone(),
                    after: p.layer,
                    lo,
                    hi,
                    qparams: qp,
                });
            }
        }
    }

    let topology: Vec<LayerDesc> = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerDesc {
            tag: match l {
                Layer::Dense { .. } => LayerTag::Dense,
                Layer::Conv { .. } => LayerTag::Conv,
                Layer::Relu => LayerTag::Relu,
                Layer::Flatten => LayerTag::Flatten,
            },
            weight_shape: l.weight().map(|w| w.shape().to_vec()).unwrap_or_default(),
            activation_site: sites.iter().any(|s| s.after == Some(i)),
        })
        .collect();

    let mut layers = Vec::new();
    for (i, l) in model.layers().iter().enumerate() {
        let (Some(w), Some(b)) = (l.weight(), l.bias()) else {
            continue;
        };
        let qp = weight_qp[i].take().ok_or_else(|| {
            Error::UninitializedObserver(format!("layers.{i}.{}.weight", l.name()))
        })?;
        let w64 = w.cast::<f64>();
        let payload = crate::quant::quantize(&w64, &qp, rounding)?.values;
        let s_x = input_site(&sites, i)?.qparams.scales()[0];
        let bias: Vec<f64> = b.data().iter().map(|v| v.f64()).collect();
        let bias_q = quantize_bias(&bias, qp.scales(), s_x, rounding, i)?;
        layers.push(QuantLayer {
            position: i,
            qparams: qp,
            payload,
            master: w64.into_data(),
            bias,
            bias_q,
        });
    }
    Ok(Checkpoint {
        input_shape: model.input_shape().to_vec(),
        classes: model.classes(),
        topology,
        layers,
        sites,
        meta,
    })
}

/// Most recent activation site at or before the input of layer `layer`.
fn input_site(sites: &[ActivationSite], layer: usize) -> Result<&ActivationSite> {
    sites
        .iter()
        .filter(|s| s.after.is_none_or(|a| a < layer))
        .max_by_key(|s| s.after.map_or(0, |a| a + 1))
        .ok_or_else(|| Error::invalid(format!("layer {layer} has no preceding activation site")))
}

fn quantize_bias(
    bias: &[f64],
    s_w: &[f64],
    s_x: f64,
    rounding: RoundingMode,
    layer: usize,
) -> Result<Vec<i32>> {
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let s = s_w[if s_w.len() == 1 { 0 } else { o }] * s_x;
            let q = rounding.round(b / s);
            if q.is_finite() && q >= i32::MIN as f64 && q <= i32::MAX as f64 {
                Ok(q as i32)
            } else {
                Err(Error::AccumulatorOverflow { layer })
            }
        })
        .collect()
}

impl Checkpoint {
    /// Full-precision model from the stored master weights.
    pub fn fp_model(&self) -> Result<Model<f64>> {
        let mut qlayers = self.layers.iter();
        let layers = self
            .topology
            .iter()
            .map(|d| {
                Ok(match d.tag {
                    LayerTag::Relu => Layer::Relu,
                    LayerTag::Flatten => Layer::Flatten,
                    LayerTag::Dense | LayerTag::Conv => {
                        let q = qlayers.next().ok_or_else(|| {
                            Error::invalid("topology lists more layers than payloads")
                        })?;
                        let weight = Tensor::new(d.weight_shape.clone(), q.master.clone())?;
                        let bias = Tensor::new(vec![d.weight_shape[0]], q.bias.clone())?;
                        if d.tag == LayerTag::Dense {
                            Layer::Dense { weight, bias }
                        } else {
                            Layer::Conv { weight, bias }
                        }
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(layers, self.input_shape.clone(), self.classes)
    }

    pub fn layer_at(&self, position: usize) -> Option<&QuantLayer> {
        self.layers.iter().find(|l| l.position == position)
    }

    pub fn max_weight_scale(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.qparams.max_scale())
            .fold(0.0, f64::max)
    }

    /// Serializes to the versioned little-endian format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();

        let mut topo = Vec::new();
        put_usizes(&mut topo, &self.input_shape);
        put_u32(&mut topo, self.classes as u32);
        put_u32(&mut topo, self.topology.len() as u32);
        for d in &self.topology {
            topo.push(d.tag.code());
            topo.push(u8::from(d.activation_site));
            put_usizes(&mut topo, &d.weight_shape);
        }
        sections.push((*b"TOPO", topo));

        for l in &self.layers {
            let mut b = Vec::new();
            put_u32(&mut b, l.position as u32);
            put_qparams(&mut b, &l.qparams);
            put_i32s(&mut b, &l.payload);
            put_f64s(&mut b, &l.master);
            put_f64s(&mut b, &l.bias);
            put_i32s(&mut b, &l.bias_q);
            sections.push((*b"LAYR", b));
        }

        let mut acts = Vec::new();
        put_u32(&mut acts, self.sites.len() as u32);
        for s in &self.sites {
            put_str(&mut acts, &s.id);
            put_u32(&mut acts, s.after.map_or(u32::MAX, |a| a as u32));
            put_f64(&mut acts, s.lo);
            put_f64(&mut acts, s.hi);
            put_qparams(&mut acts, &s.qparams);
        }
        sections.push((*b"ACTS", acts));

        let mut meta = Vec::new();
        let m = &self.meta;
        meta.write_u64::<LittleEndian>(m.seed).expect("vec write");
        put_str(&mut meta, &m.config_hash);
        put_f64(&mut meta, m.terminal_lambda);
        put_u32(&mut meta, m.bits);
        put_granularity(&mut meta, m.granularity);
        meta.push(rounding_code(m.rounding));
        sections.push((*b"META", meta));

        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, sections.len() as u32);
        for (tag, body) in sections {
            out.extend_from_slice(&tag);
            out.write_u64::<LittleEndian>(body.len() as u64)
                .expect("vec write");
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected QTCK".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()?;
        let (mut topo, mut acts, mut meta) = (None, None, None);
        let mut layers = Vec::new();
        for _ in 0..count {
            let tag_at = r.pos;
            let tag: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
            let len = r.u64()? as usize;
            let body_start = r.pos;
            let body = r.take(len)?;
            let mut s = Reader {
                bytes: &bytes[..body_start + len],
                pos: body_start,
            };
            debug_assert_eq!(&s.bytes[s.pos..], body);
            match &tag {
                b"TOPO" => topo = Some(read_topo(&mut s)?),
                b"LAYR" => layers.push(read_layer(&mut s)?),
                b"ACTS" => acts = Some(read_acts(&mut s)?),
                b"META" => meta = Some(read_meta(&mut s)?),
                _ => {
                    return Err(Error::Format {
                        offset: tag_at as u64,
                        msg: format!("unknown section {:?}", String::from_utf8_lossy(&tag)),
                    })
                }
            }
            if s.pos != body_start + len {
                return Err(Error::Format {
                    offset: s.pos as u64,
                    msg: "section has trailing bytes".into(),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after last section".into(),
            });
        }
        let missing = |name: &str| Error::Format {
            offset: bytes.len() as u64,
            msg: format!("missing {name} section"),
        };
        let (input_shape, classes, topology) = topo.ok_or_else(|| missing("TOPO"))?;
        let ckpt = Checkpoint {
            input_shape,
            classes,
            topology,
            layers,
            sites: acts.ok_or_else(|| missing("ACTS"))?,
            meta: meta.ok_or_else(|| missing("META"))?,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        let quantizable: Vec<usize> = (0..self.topology.len())
            .filter(|&i| matches!(self.topology[i].tag, LayerTag::Dense | LayerTag::Conv))
            .collect();
        if quantizable != self.layers.iter().map(|l| l.position).collect::<Vec<_>>() {
            return Err(Error::invalid("layer payloads do not match the topology"));
        }
        for l in &self.layers {
            let shape = &self.topology[l.position].weight_shape;
            let numel: usize = shape.iter().product();
            if l.payload.len() != numel
                || l.master.len() != numel
                || l.bias.len() != shape[0]
                || l.bias_q.len() != shape[0]
            {
                return Err(Error::invalid(format!(
                    "layer {} payload sizes disagree with its shape",
                    l.position
                )));
            }
            if let Some(&v) = l
                .payload
                .iter()
                .find(|&&v| !(l.qparams.q_min()..=l.qparams.q_max()).contains(&v))
            {
                return Err(Error::OutOfRange {
                    value: v as i64,
                    q_min: l.qparams.q_min(),
                    q_max: l.qparams.q_max(),
                });
            }
        }
        self.fp_model().map(|_| ())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        std::fs::write(meta_path(path), self.meta_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Human-readable `key=value` sidecar.
    pub fn meta_text(&self) -> String {
        let m = &self.meta;
        let mut out = Vec::new();
        let _ = writeln!(out, "format_version={CHECKPOINT_VERSION}");
        let _ = writeln!(out, "seed={}", m.seed);
        let _ = writeln!(out, "config_hash={}", m.config_hash);
        let _ = writeln!(out, "terminal_lambda={}", m.terminal_lambda);
        let _ = writeln!(out, "bits={}", m.bits);
        let _ = writeln!(out, "granularity={}", granularity_name(m.granularity));
        let _ = writeln!(out, "rounding={}", rounding_name(m.rounding));
        let _ = writeln!(out, "input_shape={:?}", self.input_shape);
        let _ = writeln!(out, "classes={}", self.classes);
        let _ = writeln!(out, "quantized_layers={}", self.layers.len());
        let _ = writeln!(out, "activation_sites={}", self.sites.len());
        String::from_utf8(out).expect("ascii")
    }

    /// Re-freezes the master weights at other bit-width / granularity with
    /// max-abs scales; activation grids are rebuilt from the stored ranges.
    pub fn requantize(&self, bits: u32, granularity: Granularity) -> Result<Self> {
        let mut out = self.clone();
        let eps = ObserverConfig::<f64>::default().epsilon;
        for site in &mut out.sites {
            site.qparams = activation_qparams_from(site.lo, site.hi, eps, bits)?;
        }
        for l in &mut out.layers {
            let shape = self.topology[l.position].weight_shape.clone();
            let w = Tensor::new(shape, l.master.clone())?;
            l.qparams = max_abs_qparams(&w, bits, granularity)?;
            l.payload = crate::quant::quantize(&w, &l.qparams, self.meta.rounding)?.values;
            let s_x = input_site(&out.sites, l.position)?.qparams.scales()[0];
            l.bias_q = quantize_bias(
                &l.bias,
                l.qparams.scales(),
                s_x,
                self.meta.rounding,
                l.position,
            )?;
        }
        out.meta.bits = bits;
        out.meta.granularity = granularity;
        Ok(out)
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

fn max_abs_qparams(
    w: &Tensor<f64>,
    bits: u32,
    granularity: Granularity,
) -> Result<QuantParams<f64>> {
    let eps = ObserverConfig::<f64>::default().epsilon;
    let m: Vec<f64> = match granularity {
        Granularity::PerTensor => vec![w.max_abs()],
        Granularity::PerChannel { axis } => {
            crate::observer::channel_slices(w.data(), w.shape(), axis)?
                .iter()
                .map(|c| c.iter().fold(0.0f64, |a, v| a.max(v.abs())))
                .collect()
        }
    };
    weight_qparams_from(&m, eps, bits, granularity)
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.write_u32::<LittleEndian>(v).expect("vec write");
}

fn put_f64(b: &mut Vec<u8>, v: f64) {
    b.write_f64::<LittleEndian>(v).expect("vec write");
}

fn put_usizes(b: &mut Vec<u8>, v: &[usize]) {
    put_u32(b, v.len() as u32);
    for &x in v {
        put_u32(b, x as u32);
    }
}

fn put_i32s(b: &mut Vec<u8>, v: &[i32]) {
    put_u32(b, v.len() as u32);
    for &x in v {
        b.write_i32::<LittleEndian>(x).expect("vec write");
    }
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    put_u32(b, v.len() as u32);
    for &x in v {
        put_f64(b, x);
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len() as u32);
    b.extend_from_slice(s.as_bytes());
}

fn put_granularity(b: &mut Vec<u8>, g: Granularity) {
    match g {
        Granularity::PerTensor => {
            b.push(0);
            put_u32(b, 0);
        }
        Granularity::PerChannel { axis } => {
            b.push(1);
            put_u32(b, axis as u32);
        }
    }
}

fn put_qparams(b: &mut Vec<u8>, qp: &QuantParams<f64>) {
    put_u32(b, qp.bits());
    b.push(u8::from(qp.is_symmetric()));
    put_granularity(b, qp.granularity());
    b.write_i32::<LittleEndian>(qp.q_min()).expect("vec write");
    b.write_i32::<LittleEndian>(qp.q_max()).expect("vec write");
    put_f64s(b, qp.scales());
    put_i32s(b, qp.zero_points());
}

fn rounding_code(r: RoundingMode) -> u8 {
    match r {
        RoundingMode::HalfToEven => 0,
        RoundingMode::HalfAwayFromZero => 1,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated: need {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(LittleEndian::read_i32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.bytes.len() - self.pos {
            return Err(self.err(format!("length {n} exceeds remaining bytes")));
        }
        Ok(n)
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(4)?;
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }

    fn i32s(&mut self) -> Result<Vec<i32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.i32()).collect()
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: "invalid utf-8 string".into(),
        })
    }

    fn granularity(&mut self) -> Result<Granularity> {
        let tag = self.u8()?;
        let axis = self.u32()? as usize;
        match tag {
            0 => Ok(Granularity::PerTensor),
            1 => Ok(Granularity::PerChannel { axis }),
            t => Err(self.err(format!("unknown granularity tag {t}"))),
        }
    }

    fn qparams(&mut self) -> Result<QuantParams<f64>> {
        let at = self.pos;
        let bits = self.u32()?;
        let symmetric = self.u8()? != 0;
        let granularity = self.granularity()?;
        let (q_min, q_max) = (self.i32()?, self.i32()?);
        let scales = self.f64s()?;
        let zero_points = self.i32s()?;
        let qp =
            QuantParams::build(bits, scales, zero_points, symmetric, granularity).map_err(|e| {
                Error::Format {
                    offset: at as u64,
                    msg: format!("invalid quantization parameters: {e}"),
                }
            })?;
        if (qp.q_min(), qp.q_max()) != (q_min, q_max) {
            return Err(Error::Format {
                offset: at as u64,
                msg: format!("stored range ({q_min}, {q_max}) disagrees with {bits}-bit grid"),
            });
        }
        Ok(qp)
    }
}

fn read_topo(r: &mut Reader) -> Result<(Vec<usize>, usize, Vec<LayerDesc>)> {
    let input_shape = r.usizes()?;
    let classes = r.u32()? as usize;
    let n = r.len(6)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let code = r.u8()?;
        let tag =
            LayerTag::from_code(code).ok_or_else(|| r.err(format!("unknown layer tag {code}")))?;
        let activation_site = r.u8()? != 0;
        let weight_shape = r.usizes()?;
        out.push(LayerDesc {
            tag,
            weight_shape,
            activation_site,
        });
    }
    Ok((input_shape, classes, out))
}

fn read_layer(r: &mut Reader) -> Result<QuantLayer> {
    Ok(QuantLayer {
        position: r.u32()? as usize,
        qparams: r.qparams()?,
        payload: r.i32s()?,
        master: r.f64s()?,
        bias: r.f64s()?,
        bias_q: r.i32s()?,
    })
}

fn read_acts(r: &mut Reader) -> Result<Vec<ActivationSite>> {
    let n = r.len(1)?;
    (0..n)
        .map(|_| {
            let id = r.string()?;
            let after = match r.u32()? {
                u32::MAX => None,
                a => Some(a as usize),
            };
            Ok(ActivationSite {
                id,
                after,
                lo: r.f64()?,
                hi: r.f64()?,
                qparams: r.qparams()?,
            })
        })
        .collect()
}

fn read_meta(r: &mut Reader) -> Result<CheckpointMeta> {
    let seed = r.u64()?;
    let config_hash = r.string()?;
    let terminal_lambda = r.f64()?;
    let bits = r.u32()?;
    let granularity = r.granularity()?;
    let rounding = match r.u8()? {
        0 => RoundingMode::HalfToEven,
        1 => RoundingMode::HalfAwayFromZero,
        c => return Err(r.err(format!("unknown rounding code {c}"))),
    };
    Ok(CheckpointMeta {
        seed,
        config_hash,
        terminal_lambda,
        bits,
        granularity,
        rounding,
    })
}

fn granularity_name(g: Granularity) -> &'static str {
    match g {
        Granularity::PerTensor => "per-tensor",
        Granularity::PerChannel { .. } => "per-channel",
    }
}

fn rounding_name(r: RoundingMode) -> &'static str {
    match r {
        RoundingMode::HalfToEven => "half-to-even",
        RoundingMode::HalfAwayFromZero => "half-away-from-zero",
    }
}

/// Offline range estimator for recalibrated static profiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Calibration {
    MinMax,
    /// `[Q(1 - p), Q(p)]` of the pooled activations.
    Percentile(f64),
    /// Tightest contiguous window of a `bins`-bucket histogram holding at
    /// least `coverage` of the mass.
    Histogram {
        bins: usize,
        coverage: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActivationScaling {
    /// Ranges recorded by the training observers.
    StaticTrained,
    StaticRecalibrated(Calibration),
    /// Per-input min/max, widened to include zero.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackendProfile {
    pub granularity: Granularity,
    pub activation: ActivationScaling,
    pub rounding: RoundingMode,
    /// Applies to weights and activations; accumulators are always 32-bit.
    pub bits: u32,
}

impl BackendProfile {
    pub fn new(granularity: Granularity, activation: ActivationScaling) -> Self {
        Self {
            granularity,
            activation,
            rounding: RoundingMode::HalfToEven,
            bits: 8,
        }
    }

    /// The six standard personalities.
    pub fn defaults() -> Vec<Self> {
        use ActivationScaling::*;
        let (pt, pc) = (Granularity::PerTensor, Granularity::OUTPUT_CHANNEL);
        vec![
            Self::new(pt, StaticTrained),
            Self::new(pc, StaticTrained),
            Self::new(pt, Dynamic),
            Self::new(pc, Dynamic),
            Self::new(pt, StaticRecalibrated(Calibration::MinMax)),
            Self::new(pt, StaticRecalibrated(Calibration::Percentile(0.999))),
        ]
    }

    pub fn needs_calibration(&self) -> bool {
        matches!(self.activation, ActivationScaling::StaticRecalibrated(_))
    }

    pub fn id(&self) -> String {
        self.to_string()
    }
}

/// Ids read `{pt|pc}-{static|dynamic|minmax|pct<p>|hist<bins>x<coverage>}[-away][-int4]`.
impl fmt::Display for BackendProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = match self.granularity {
            Granularity::PerTensor => "pt",
            Granularity::PerChannel { .. } => "pc",
        };
        write!(f, "{g}-")?;
        match self.activation {
            ActivationScaling::StaticTrained => write!(f, "static")?,
            ActivationScaling::Dynamic => write!(f, "dynamic")?,
            ActivationScaling::StaticRecalibrated(Calibration::MinMax) => write!(f, "minmax")?,
            ActivationScaling::StaticRecalibrated(Calibration::Percentile(p)) => {
                write!(f, "pct{p}")?
            }
            ActivationScaling::StaticRecalibrated(Calibration::Histogram { bins, coverage }) => {
                write!(f, "hist{bins}x{coverage}")?
            }
        }
        if self.rounding == RoundingMode::HalfAwayFromZero {
            write!(f, "-away")?;
        }
        if self.bits != 8 {
            write!(f, "-int{}", self.bits)?;
        }
        Ok(())
    }
}

impl FromStr for BackendProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::invalid(format!("bad profile id {s:?}: {why}"));
        let mut parts = s.trim().split('-');
        let granularity = match parts.next() {
            Some("pt") => Granularity::PerTensor,
            Some("pc") => Granularity::OUTPUT_CHANNEL,
            _ => return Err(bad("expected pt or pc")),
        };
        let scaling = parts
            .next()
            .ok_or_else(|| bad("missing activation scaling"))?;
        let number = |v: &str| v.parse::<f64>().map_err(|_| bad("malformed number"));
        let activation = match scaling {
            "static" => ActivationScaling::StaticTrained,
            "dynamic" => ActivationScaling::Dynamic,
            "minmax" => ActivationScaling::StaticRecalibrated(Calibration::MinMax),
            _ if scaling.starts_with("pct") => {
                let p = number(&scaling[3..])?;
                if !(p > 0.5 && p <= 1.0) {
                    return Err(bad("percentile must lie in (0.5, 1]"));
                }
                ActivationScaling::StaticRecalibrated(Calibration::Percentile(p))
            }
            _ if scaling.starts_with("hist") => {
                let (b, c) = scaling[4..]
                    .split_once('x')
                    .ok_or_else(|| bad("expected hist<bins>x<coverage>"))?;
                let bins = b.parse::<usize>().map_err(|_| bad("malformed bin count"))?;
                let coverage = number(c)?;
                if bins == 0 || !(coverage > 0.0 && coverage <= 1.0) {
                    return Err(bad("need bins >= 1 and coverage in (0, 1]"));
                }
                ActivationScaling::StaticRecalibrated(Calibration::Histogram { bins, coverage })
            }
            _ => return Err(bad("unknown activation scaling")),
        };
        let mut p = BackendProfile::new(granularity, activation);
        for flag in parts {
            match flag {
                "away" => p.rounding = RoundingMode::HalfAwayFromZero,
                "int4" => p.bits = 4,
                "int8" => p.bits = 8,
                _ => return Err(bad("unknown suffix")),
            }
        }
        Ok(p)
    }
}

/// Representative inputs for offline range calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub source: String,
    pub seed: u64,
    pub inputs: Tensor<f64>,
}

impl CalibrationSet {
    /// The first `size` samples of `data`.
    pub fn from_dataset<T: Scalar>(data: &Dataset<T>, size: usize) -> Result<Self> {
        if data.is_empty() || size == 0 {
            return Err(Error::Empty("calibration set"));
        }
        let head = data.head(size)?;
        Ok(Self {
            source: format!("{}:{:?}", data.name, data.split),
            seed: data.seed,
            inputs: head.inputs.cast(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// FP activations at every site of `model` for inputs `x`, in site order.
fn site_activations(model: &Model<f64>, x: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    struct Capture(Vec<Vec<f64>>);
    impl crate::model::ForwardHook<f64> for Capture {
        fn weight(
            &mut self,
            _: &mut crate::autograd::Graph<f64>,
            _: usize,
            w: crate::autograd::Var,
        ) -> Result<crate::autograd::Var> {
            Ok(w)
        }
        fn activation(
            &mut self,
            g: &mut crate::autograd::Graph<f64>,
            _: usize,
            x: crate::autograd::Var,
        ) -> Result<crate::autograd::Var> {
            self.0.push(g.try_value(x)?.data().to_vec());
            Ok(x)
        }
    }
    let mut cap = Capture(Vec::new());
    model.predict_with(x, &mut cap)?;
    Ok(cap.0)
}

/// Range `(lo, hi)` of `values` under `method`.
pub fn calibrate_range(values: &[f64], method: Calibration) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("calibration activations"));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    match method {
        Calibration::MinMax => Ok((min, max)),
        Calibration::Percentile(p) => Ok((
            empirical_quantile(values, 1.0 - p)?,
            empirical_quantile(values, p)?,
        )),
        Calibration::Histogram { bins, coverage } => {
            if max == min {
                return Ok((min, max));
            }
            let width = (max - min) / bins as f64;
            let mut counts = vec![0usize; bins];
            for &v in values {
                let b = (((v - min) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let need = (coverage * values.len() as f64 - 1e-9).ceil().max(1.0) as usize;
            let edge = |i: usize| {
                if i == bins {
                    max
                } else {
                    min + i as f64 * width
                }
            };
            // Two-pointer scan for the narrowest window; ties keep the leftmost.
            let (mut best, mut lo, mut sum) = ((0, bins), 0, 0);
            for hi in 0..bins {
                sum += counts[hi];
                while sum - counts[lo] >= need && lo < hi {
                    sum -= counts[lo];
                    lo += 1;
                }
                if sum >= need && hi + 1 - lo < best.1 - best.0 {
                    best = (lo, hi + 1);
                }
            }
            Ok((edge(best.0), edge(best.1)))
        }
    }
}

/// Activation parameters per site for a recalibrating profile.
pub fn calibrate(
    ckpt: &Checkpoint,
    profile: &BackendProfile,
    calib: &CalibrationSet,
) -> Result<Vec<QuantParams<f64>>> {
    let ActivationScaling::StaticRecalibrated(method) = profile.activation else {
        return Err(Error::invalid(format!(
            "profile {profile} does not recalibrate"
        )));
    };
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let eps = ObserverConfig::<f64>::default().epsilon;
    site_activations(&ckpt.fp_model()?, &calib.inputs)?
        .iter()
        .map(|v| {
            let (lo, hi) = calibrate_range(v, method)?;
            activation_qparams_from(lo, hi, eps, profile.bits)
        })
        .collect()
}

/// Weights and grids resolved for one profile.
struct ExecPlan<'a> {
    ckpt: &'a Checkpoint,
    profile: BackendProfile,
    weights: Vec<(QuantParams<f64>, Vec<i32>)>,
    /// `None` for dynamic scaling.
    sites: Option<Vec<QuantParams<f64>>>,
    stored_bias: bool,
}

impl<'a> ExecPlan<'a> {
    fn new(
        ckpt: &'a Checkpoint,
        profile: &BackendProfile,
        calib: Option<&CalibrationSet>,
    ) -> Result<Self> {
        let same_weights = std::mem::discriminant(&profile.granularity)
            == std::mem::discriminant(&ckpt.meta.granularity)
            && profile.bits == ckpt.meta.bits;
        let weights = ckpt
            .layers
            .iter()
            .map(|l| {
                if same_weights {
                    Ok((l.qparams.clone(), l.payload.clone()))
                } else {
                    let w = Tensor::new(
                        ckpt.topology[l.position].weight_shape.clone(),
                        l.master.clone(),
                    )?;
                    let qp = max_abs_qparams(&w, profile.bits, profile.granularity)?;
                    let q = crate::quant::quantize(&w, &qp, profile.rounding)?.values;
                    Ok((qp, q))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let sites = match profile.activation {
            ActivationScaling::Dynamic => None,
            ActivationScaling::StaticTrained => {
                let eps = ObserverConfig::<f64>::default().epsilon;
                Some(
                    ckpt.sites
                        .iter()
                        .map(|s| {
                            if profile.bits == ckpt.meta.bits {
                                Ok(s.qparams.clone())
                            } else {
                                activation_qparams_from(s.lo, s.hi, eps, profile.bits)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            ActivationScaling::StaticRecalibrated(_) => {
                let calib = calib.ok_or(Error::Empty("calibration set"))?;
                Some(calibrate(ckpt, profile, calib)?)
            }
        };
        let stored_bias = same_weights
            && profile.activation == ActivationScaling::StaticTrained
            && profile.bits == ckpt.meta.bits
            && profile.rounding == ckpt.meta.rounding;
        Ok(Self {
            ckpt,
            profile: *profile,
            weights,
            sites,
            stored_bias,
        })
    }

    fn dynamic_qparams(&self, values: impl Iterator<Item = f64>) -> Result<QuantParams<f64>> {
        let (lo, hi) = values.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
        activation_qparams_from(
            lo,
            hi,
            ObserverConfig::<f64>::default().epsilon,
            self.profile.bits,
        )
    }

    fn quantize_input(&self, x: &[f64]) -> Result<(Vec<i32>, f64, i32)> {
        let qp = match &self.sites {
            Some(s) => s[0].clone(),
            None => self.dynamic_qparams(x.iter().copied())?,
        };
        let q = x
            .iter()
            .map(|&v| qp.quantize_value(v, 0, self.profile.rounding))
            .collect::<Result<Vec<_>>>()?;
        Ok((q, qp.scales()[0], qp.zero_points()[0]))
    }

    /// Logits of one sample with per-sample shape `ckpt.input_shape`.
    fn run(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ckpt = self.ckpt;
        let (mut q, mut s_x, mut z_x) = self.quantize_input(x)?;
        let mut dims = ckpt.input_shape.clone();
        let mut site = 1;
        let mut qlayer = 0;
        let topo = &ckpt.topology;
        let mut i = 0;
        while i < topo.len() {
            let desc = &topo[i];
            match desc.tag {
                LayerTag::Flatten => {
                    dims = vec![dims.iter().product()];
                    i += 1;
                }
                LayerTag::Relu => {
                    return Err(Error::UnsupportedLayer(format!(
                        "relu at layer {i} must directly follow a dense or conv layer"
                    )))
                }
                LayerTag::Dense | LayerTag::Conv => {
                    let (qp_w, payload) = &self.weights[qlayer];
                    let stored = &ckpt.layers[qlayer];
                    let bias = if self.stored_bias {
                        stored.bias_q.clone()
                    } else {
                        quantize_bias(&stored.bias, qp_w.scales(), s_x, self.profile.rounding, i)?
                    };
                    let (acc, out_dims, per_out) = if desc.tag == LayerTag::Dense {
                        (
                            dense_acc(payload, &desc.weight_shape, &q, z_x, &bias, i)?,
                            vec![desc.weight_shape[0]],
                            1,
                        )
                    } else {
                        let (h, w) = (dims[1], dims[2]);
                        (
                            conv_acc(payload, &desc.weight_shape, &q, z_x, h, w, &bias, i)?,
                            vec![desc.weight_shape[0], h, w],
                            h * w,
                        )
                    };
                    let scale_of = |k: usize| {
                        let s = qp_w.scales();
                        s[if s.len() == 1 { 0 } else { k / per_out }] * s_x
                    };
                    qlayer += 1;
                    if i == topo.len() - 1 {
                        return Ok(acc
                            .iter()
                            .enumerate()
                            .map(|(k, &a)| a as f64 * scale_of(k))
                            .collect());
                    }
                    if topo[i + 1].tag != LayerTag::Relu || !topo[i + 1].activation_site {
                        return Err(Error::UnsupportedLayer(format!(
                            "layer {i} output needs a relu activation site before further layers"
                        )));
                    }
                    let next = match &self.sites {
                        Some(s) => s[site].clone(),
                        None => self.dynamic_qparams(
                            acc.iter()
                                .enumerate()
                                .map(|(k, &a)| (a as f64 * scale_of(k)).max(0.0)),
                        )?,
                    };
                    let (s_n, z_n) = (next.scales()[0], next.zero_points()[0]);
                    let (lo, hi) = (next.q_min() as f64, next.q_max() as f64);
                    q = acc
                        .iter()
                        .enumerate()
                        .map(|(k, &a)| {
                            let m = scale_of(k) / s_n;
                            let v = self.profile.rounding.round(a as f64 * m) + z_n as f64;
                            (v.clamp(lo, hi) as i32).max(z_n)
                        })
                        .collect();
                    s_x = s_n;
                    z_x = z_n;
                    site += 1;
                    dims = out_dims;
                    i += 2;
                }
            }
        }
        Err(Error::UnsupportedLayer(
            "network must end with a dense or conv layer".into(),
        ))
    }
}

fn dense_acc(
    w: &[i32],
    shape: &[usize],
    x: &[i32],
    z_x: i32,
    bias: &[i32],
    layer: usize,
) -> Result<Vec<i32>> {
    let (out, inp) = (shape[0], shape[1]);
    if x.len() != inp {
        return Err(Error::Shape {
            op: "integer dense",
            lhs: vec![x.len()],
            rhs: shape.to_vec(),
        });
    }
    let overflow = || Error::AccumulatorOverflow { layer };
    (0..out)
        .map(|o| {
            let mut acc = bias[o];
            for (qw, &qx) in w[o * inp..(o + 1) * inp].iter().zip(x) {
                let term = qw
                    .checked_mul(qx.checked_sub(z_x).ok_or_else(overflow)?)
                    .ok_or_else(overflow)?;
                acc = acc.checked_add(term).ok_or_else(overflow)?;
            }
            Ok(acc)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn conv_acc(
    w: &[i32],
    shape: &[usize],
    x: &[i32],
    z_x: i32,
    h: usize,
    width: usize,
    bias: &[i32],
    layer: usize,
) -> Result<Vec<i32>> {
    let (out, cin) = (shape[0], shape[1]);
    if x.len() != cin * h * width {
        return Err(Error::Shape {
            op: "integer conv",
            lhs: vec![cin, h, width],
            rhs: shape.to_vec(),
        });
    }
    let overflow = || Error::AccumulatorOverflow { layer };
    let mut res = Vec::with_capacity(out * h * width);
    for o in 0..out {
        for r in 0..h {
            for c in 0..width {
                let mut acc = bias[o];
                for ci in 0..cin {
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let (ir, ic) = ((r + kr) as isize - 1, (c + kc) as isize - 1);
                            if ir < 0 || ic < 0 || ir >= h as isize || ic >= width as isize {
                                continue;
                            }
                            let qx = x[(ci * h + ir as usize) * width + ic as usize];
                            let qw = w[((o * cin + ci) * 3 + kr) * 3 + kc];
                            let term = qw
                                .checked_mul(qx.checked_sub(z_x).ok_or_else(overflow)?)
                                .ok_or_else(overflow)?;
                            acc = acc.checked_add(term).ok_or_else(overflow)?;
                        }
                    }
                }
                res.push(acc);
            }
        }
    }
    Ok(res)
}

/// Integer execution of a batch `x: [n, ...input_shape]`, returning FP logits `[n, classes]`.
pub fn integer_infer(
    ckpt: &Checkpoint,
    x: &Tensor<f64>,
    profile: &BackendProfile,
    calib: Option<&CalibrationSet>,
) -> Result<Tensor<f64>> {
    if x.shape()[1..] != ckpt.input_shape[..] {
        return Err(Error::Shape {
            op: "integer_infer input",
            lhs: x.shape().to_vec(),
            rhs: ckpt.input_shape.clone(),
        });
    }
    let plan = ExecPlan::new(ckpt, profile, calib)?;
    let n = x.shape()[0];
    let inner = x.numel() / n;
    let rows = x
        .data()
        .par_chunks(inner)
        .map(|sample| plan.run(sample))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![n, ckpt.classes], rows.concat())
}

/// Metrics of one profile, or of the FP reference.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub profile_id: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub reference: SweepRow,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const CSV_HEADER: &'static str = "profile_id,top1,top5,logit_mse,snr_db,brier,ece";
    pub const REFERENCE_ID: &'static str = "fp-reference";

    /// Sample standard deviation of top-1 across profiles (0 for one profile).
    pub fn top1_std(&self) -> f64 {
        let v: Vec<f64> = self.rows.iter().map(|r| r.metrics.top1).collect();
        sample_std(&v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in std::iter::once(&self.reference).chain(&self.rows) {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.profile_id, m.top1, m.top5, m.logit_mse, m.snr_db, m.brier, m.ece
            ));
        }
        out
    }
}

pub(crate) fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 || v.iter().all(|&x| x == v[0]) {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Runs every profile on `data`; the FP reference is computed once.
pub fn profile_sweep<T: Scalar>(
    ckpt: &Checkpoint,
    profiles: &[BackendProfile],
    data: &Dataset<T>,
    calib: Option<&CalibrationSet>,
    ece_bins: usize,
) -> Result<SweepTable> {
    if profiles.is_empty() {
        return Err(Error::invalid("profile sweep needs at least one profile"));
    }
    let x = data.inputs.cast::<f64>();
    let reference = ckpt.fp_model()?.predict(&x)?;
    let rows = profiles
        .iter()
        .map(|p| {
            let logits = integer_infer(ckpt, &x, p, calib)?;
            Ok(SweepRow {
                profile_id: p.id(),
                metrics: MetricsReport::compute(&logits, &reference, &data.labels, ece_bins)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        reference: SweepRow {
            profile_id: SweepTable::REFERENCE_ID.into(),
            metrics: MetricsReport::compute(&reference, &reference, &data.labels, ece_bins)?,
        },
        rows,
    })
}
