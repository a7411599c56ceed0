//! The two-layer mapping network shared by anchor, positive and negative
//! branches, with its per-slot margins.
//!
//! Parameters are kept in one flat buffer laid out as `w1 (D×H1, row-major),
//! b1, w2 (H1×H2), b2, margins`, which is also the checkpoint order. All
//! arithmetic runs in `f64`; storage is `f32` by default.

use std::borrow::Cow;
use std::fmt::Debug;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Lower bound applied to every raw margin.
pub const MARGIN_FLOOR: f64 = 1e-3;
pub const DEFAULT_HIDDEN1: usize = 1024;
pub const DEFAULT_HIDDEN2: usize = 512;
const CHECKPOINT_MAGIC: &[u8; 5] = b"MTN1\0";

/// Storage scalar for parameters.
pub trait Scalar: Copy + Debug + PartialEq + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn widen(values: &[Self]) -> Cow<'_, [f64]>;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn widen(values: &[Self]) -> Cow<'_, [f64]> {
        Cow::Owned(values.iter().map(|&v| v as f64).collect())
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn widen(values: &[Self]) -> Cow<'_, [f64]> {
        Cow::Borrowed(values)
    }
}

/// Layer widths and margin count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub dim_in: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub n_margins: usize,
}

impl NetShape {
    pub fn new(dim_in: usize, n_margins: usize) -> Self {
        Self {
            dim_in,
            hidden1: DEFAULT_HIDDEN1,
            hidden2: DEFAULT_HIDDEN2,
            n_margins,
        }
    }

    pub fn with_hidden(self, hidden1: usize, hidden2: usize) -> Self {
        Self {
            hidden1,
            hidden2,
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim_in == 0 || self.hidden1 == 0 || self.hidden2 == 0 || self.n_margins == 0 {
            return Err(Error::InvalidConfig(format!("degenerate network shape {self:?}")));
        }
        Ok(())
    }

    fn offsets(&self) -> [usize; 6] {
        let w1 = 0;
        let b1 = w1 + self.dim_in * self.hidden1;
        let w2 = b1 + self.hidden1;
        let b2 = w2 + self.hidden1 * self.hidden2;
        let m = b2 + self.hidden2;
        [w1, b1, w2, b2, m, m + self.n_margins]
    }

    pub fn n_params(&self) -> usize {
        self.offsets()[5]
    }

    /// Range of the margin block in the flat layout.
    pub fn margin_range(&self) -> std::ops::Range<usize> {
        let o = self.offsets();
        o[4]..o[5]
    }
}

/// Weights, biases and raw margins of the mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletNetParams<F: Scalar = f32> {
    shape: NetShape,
    values: Vec<F>,
}

/// He-initialized parameters: Gaussian weights with std `sqrt(2 / fan_in)`,
/// zero biases, raw margins 1.0.
pub fn init_params(shape: NetShape, seed: u64) -> Result<TripletNetParams<f32>> {
    shape.validate()?;
    let mut rng = stream(seed, "init");
    let mut values = Vec::with_capacity(shape.n_params());
    for (fan_in, fan_out) in [
        (shape.dim_in, shape.hidden1),
        (shape.hidden1, shape.hidden2),
    ] {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        values.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng) as f32));
        values.extend(std::iter::repeat_n(0.0f32, fan_out));
    }
    values.extend(std::iter::repeat_n(1.0f32, shape.n_margins));
    Ok(TripletNetParams { shape, values })
}

impl<F: Scalar> TripletNetParams<F> {
    /// Builds parameters from a flat buffer in checkpoint order.
    pub fn from_flat(shape: NetShape, values: Vec<F>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.n_params() {
            return Err(Error::DimensionMismatch {
                expected: shape.n_params(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.to_f64().is_finite()) {
            return Err(Error::NonFiniteValue("parameters".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn raw_margins(&self) -> &[F] {
        &self.values[self.shape.margin_range()]
    }

    /// `max(raw_i, MARGIN_FLOOR)` for each slot.
    pub fn effective_margins(&self) -> Vec<f64> {
        self.raw_margins()
            .iter()
            .map(|m| m.to_f64().max(MARGIN_FLOOR))
            .collect()
    }

    pub fn to_f64(&self) -> TripletNetParams<f64> {
        TripletNetParams {
            shape: self.shape,
            values: self.values.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> TripletNetParams<f32> {
        TripletNetParams {
            shape: self.shape,
            values: self.values.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }

    /// In-place `θ ← θ − lr · g`, then floor the margins.
    pub fn apply_step(&mut self, grad: &Gradient, lr: f64) -> Result<()> {
        self.apply_delta(grad.values.iter().map(|g| -lr * g))
    }

    /// Adds `delta` elementwise (in `f64`), then floors the margins.
    pub(crate) fn apply_delta<I: IntoIterator<Item = f64>>(&mut self, delta: I) -> Result<()> {
        let mut next = self.values.clone();
        for (v, d) in next.iter_mut().zip(delta) {
            let updated = v.to_f64() + d;
            if !updated.is_finite() {
                return Err(Error::NonFiniteUpdate);
            }
            *v = F::from_f64(updated);
        }
        for m in &mut next[self.shape.margin_range()] {
            if m.to_f64() < MARGIN_FLOOR {
                *m = F::from_f64(MARGIN_FLOOR);
            }
        }
        self.values = next;
        Ok(())
    }

    /// FNV-1a over the little-endian bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let bytes: Vec<u8> = self
            .values
            .iter()
            .flat_map(|v| v.to_f64().to_bits().to_le_bytes())
            .collect();
        crate::rng::fnv1a64(&bytes)
    }
}

impl TripletNetParams<f64> {
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

impl TripletNetParams<f32> {
    /// Writes the `MTN1` checkpoint.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let s = self.shape;
        let mut buf = Vec::with_capacity(21 + 4 * self.values.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for d in [s.dim_in, s.hidden1, s.hidden2, s.n_margins] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 5 {
            return Err(Error::TruncatedStream("checkpoint magic".into()));
        }
        if &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 21 {
            return Err(Error::TruncatedStream("checkpoint header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let shape = NetShape {
            dim_in: word(0),
            hidden1: word(1),
            hidden2: word(2),
            n_margins: word(3),
        };
        shape.validate()?;
        let payload = &bytes[21..];
        let want = 4 * shape.n_params();
        if payload.len() < want {
            return Err(Error::TruncatedStream(format!(
                "checkpoint payload: {} of {want} bytes",
                payload.len()
            )));
        }
        if payload.len() > want {
            return Err(Error::TrailingBytes(payload.len() - want));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(shape, values)
    }
}

/// Gradient in the same flat layout as [`TripletNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    shape: NetShape,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.n_params()],
        }
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn margins(&self) -> &[f64] {
        &self.values[self.shape.margin_range()]
    }

    pub fn margins_mut(&mut self) -> &mut [f64] {
        let r = self.shape.margin_range();
        &mut self.values[r]
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Cached activations of one batched forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    shape: NetShape,
    input: Array2<f64>,
    pre1: Array2<f64>,
    mask: Option<Array2<f64>>,
    hidden: Array2<f64>,
}

impl ForwardTrace {
    /// First-layer pre-activations `w1ᵀx + b1`, one row per input.
    pub fn pre_activations(&self) -> ArrayView2<'_, f64> {
        self.pre1.view()
    }

    pub fn rows(&self) -> usize {
        self.input.nrows()
    }
}

struct Views<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

fn views<'a>(shape: &NetShape, flat: &'a [f64]) -> Views<'a> {
    let o = shape.offsets();
    Views {
        w1: ArrayView2::from_shape((shape.dim_in, shape.hidden1), &flat[o[0]..o[1]]).unwrap(),
        b1: ArrayView1::from(&flat[o[1]..o[2]]),
        w2: ArrayView2::from_shape((shape.hidden1, shape.hidden2), &flat[o[2]..o[3]]).unwrap(),
        b2: ArrayView1::from(&flat[o[3]..o[4]]),
    }
}

/// Dropout setting for a training-mode forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

/// Maps each row of `x` (`n × D`) to the output space (`n × H2`).
///
/// With `dropout` set, inverted dropout is applied to the hidden layer:
/// kept units are scaled by `1 / (1 − rate)`. Without it the pass is
/// deterministic.
pub fn forward_batch<F: Scalar>(
    p: &TripletNetParams<F>,
    x: ArrayView2<'_, f64>,
    dropout: Option<Dropout<'_>>,
) -> Result<(Array2<f64>, ForwardTrace)> {
    let shape = p.shape;
    if x.ncols() != shape.dim_in {
        return Err(Error::DimensionMismatch {
            expected: shape.dim_in,
            got: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let flat = F::widen(&p.values);
    let v = views(&shape, &flat);
    let pre1 = x.dot(&v.w1) + v.b1;
    let mut hidden = pre1.mapv(|z| z.max(0.0));
    let mask = match dropout {
        Some(Dropout { rate, rng }) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = Array2::from_shape_simple_fn(hidden.raw_dim(), || {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            });
            hidden *= &mask;
            Some(mask)
        }
        _ => None,
    };
    let out = hidden.dot(&v.w2) + v.b2;
    let trace = ForwardTrace {
        shape,
        input: x.to_owned(),
        pre1,
        mask,
        hidden,
    };
    Ok((out, trace))
}

/// Single-vector forward pass.
pub fn forward<F: Scalar>(
    p: &TripletNetParams<F>,
    x: &[f64],
    dropout: Option<Dropout<'_>>,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
    let (out, trace) = forward_batch(p, view, dropout)?;
    Ok((out.row(0).to_vec(), trace))
}

/// Reverse-mode gradient of `Σ ⟨grad_out_r, f(x_r)⟩` for the realized
/// dropout mask. The margin block of the result is zero.
pub fn backward<F: Scalar>(
    p: &TripletNetParams<F>,
    trace: &ForwardTrace,
    grad_out: ArrayView2<'_, f64>,
) -> Result<Gradient> {
    let shape = p.shape;
    if trace.shape != shape {
        return Err(Error::TraceMismatch("trace was produced by a different network shape".into()));
    }
    if grad_out.dim() != (trace.rows(), shape.hidden2) {
        return Err(Error::TraceMismatch(format!(
            "gradient is {:?}, trace covers {} rows of width {}",
            grad_out.dim(),
            trace.rows(),
            shape.hidden2
        )));
    }
    let flat = F::widen(&p.values);
    let v = views(&shape, &flat);

    let d_w2 = trace.hidden.t().dot(&grad_out);
    let d_b2 = grad_out.sum_axis(Axis(0));
    let mut d_pre1 = grad_out.dot(&v.w2.t());
    ndarray::Zip::from(&mut d_pre1)
        .and(&trace.pre1)
        .for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
    if let Some(mask) = &trace.mask {
        d_pre1 *= mask;
    }
    let d_w1 = trace.input.t().dot(&d_pre1);
    let d_b1 = d_pre1.sum_axis(Axis(0));

    let mut g = Gradient::zeros(shape);
    let o = shape.offsets();
    let parts: [(usize, Vec<f64>); 4] = [
        (o[0], d_w1.iter().copied().collect()),
        (o[1], d_b1.to_vec()),
        (o[2], d_w2.iter().copied().collect()),
        (o[3], d_b2.to_vec()),
    ];
    for (start, part) in parts {
        g.values[start..start + part.len()].copy_from_slice(&part);
    }
    Ok(g)
}
