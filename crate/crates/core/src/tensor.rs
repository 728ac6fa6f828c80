//! Dense row-major `f64` tensors and the small operation kernel everything
//! else is built from: matrix products, same-padding convolution, pooling,
//! nearest-neighbor resizing, reductions, activations, and a
//! central-difference gradient checker.
//!
//! Every operation is a pure function with a fixed accumulation order, so
//! repeated calls on equal inputs are bit-identical.

use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("tensor i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt tensor stream: {0}")]
    Corrupt(String),
}

/// Dense numeric array with an explicit shape. `data.len()` always equals
/// the product of the extents and all stored values are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn element_count(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "element count overflows".into(),
        })
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("shape implies {expected} elements, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = element_count(shape).expect("zeros: invalid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "filled: non-finite value");
        let n = element_count(shape).expect("filled: invalid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data).expect("vector: invalid data")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access for optimizers. The caller is responsible for
    /// keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip("sub", other, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip("hadamard", other, |a, b| a * b)
    }

    fn zip(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy of the data as a 1-D tensor.
    pub fn flattened(&self) -> Tensor {
        Tensor {
            shape: vec![self.data.len()],
            data: self.data.clone(),
        }
    }
}

/// Elementwise activations used by the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    /// `x` for `x >= 0`, `slope * x` otherwise.
    PRelu(f64),
    Sigmoid,
    Tanh,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::PRelu(slope) => {
            assert!(slope.is_finite(), "activate: non-finite PReLU slope");
            x.map(|v| if v >= 0.0 { v } else { slope * v })
        }
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
    }
}

/// Textbook matrix product with row-major accumulation order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (p, &av) in arow.iter().enumerate() {
                acc += av * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite("matmul"));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `m` is `rows x cols`, `v` a length-`cols` vector; returns length-`rows`.
pub fn matvec(m: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
    if m.rank() != 2 || v.rank() != 1 || m.shape[1] != v.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matvec",
            lhs: m.shape.clone(),
            rhs: v.shape.clone(),
        });
    }
    let (rows, cols) = (m.shape[0], m.shape[1]);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mrow = &m.data[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (c, &mv) in mrow.iter().enumerate() {
            acc += mv * v.data[c];
        }
        out[r] = acc;
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite("matvec"));
    }
    Ok(Tensor {
        shape: vec![rows],
        data: out,
    })
}

/// `m` transposed times `v`: for `m` of `rows x cols` and `v` length `rows`,
/// returns length-`cols`.
pub fn matvec_transpose(m: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
    if m.rank() != 2 || v.rank() != 1 || m.shape[0] != v.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matvec_transpose",
            lhs: m.shape.clone(),
            rhs: v.shape.clone(),
        });
    }
    let (rows, cols) = (m.shape[0], m.shape[1]);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let vr = v.data[r];
        let mrow = &m.data[r * cols..(r + 1) * cols];
        for (c, &mv) in mrow.iter().enumerate() {
            out[c] += mv * vr;
        }
    }
    Ok(Tensor {
        shape: vec![cols],
        data: out,
    })
}

/// Outer product of two vectors: `rows(a) x cols(b)`.
pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.rank() != 1 || b.rank() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "outer",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &av in &a.data {
        for &bv in &b.data {
            out.push(av * bv);
        }
    }
    Ok(Tensor {
        shape: vec![a.len(), b.len()],
        data: out,
    })
}

/// Concatenate 1-D tensors end to end.
pub fn concat_vec(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concat_vec",
            reason: "no parts".into(),
        });
    }
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "concat_vec",
                reason: format!("expected vectors, got shape {:?}", p.shape),
            });
        }
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![data.len()],
        data,
    })
}

/// Same-padding stride-1 cross-correlation. `input` is `C x H x W`,
/// `kernels` is `K x C x s x s` with `s` either 1 or 3; output is `K x H x W`.
/// `bias`, when given, is a length-`K` vector added per output channel.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape.clone(),
            rhs: kernels.shape.clone(),
        });
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (k, kc, s0, s1) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if kc != c || s0 != s1 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape.clone(),
            rhs: kernels.shape.clone(),
        });
    }
    if s0 != 1 && s0 != 3 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            reason: format!("kernel size {s0} not in {{1, 3}}"),
        });
    }
    if let Some(b) = bias {
        if b.rank() != 1 || b.shape[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![k],
                rhs: b.shape.clone(),
            });
        }
    }
    let pad = (s0 / 2) as isize;
    let mut out = vec![0.0; k * h * w];
    for ko in 0..k {
        let base = bias.map_or(0.0, |b| b.data[ko]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = base;
                for ci in 0..c {
                    for dy in 0..s0 {
                        let sy = y as isize + dy as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..s0 {
                            let sx = x as isize + dx as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let iv = input.data[(ci * h + sy as usize) * w + sx as usize];
                            let kv = kernels.data[((ko * c + ci) * s0 + dy) * s0 + dx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(ko * h + y) * w + x] = acc;
            }
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite("conv2d"));
    }
    Ok(Tensor {
        shape: vec![k, h, w],
        data: out,
    })
}

/// Replicate each source pixel of a `C x H x W` map into an `f x f` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor, TensorError> {
    if input.rank() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "upsample_nearest",
            reason: format!("expected C x H x W, got {:?}", input.shape),
        });
    }
    if factor == 0 {
        return Err(TensorError::InvalidArgument {
            op: "upsample_nearest",
            reason: "factor must be >= 1".into(),
        });
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let sy = y / factor;
            for x in 0..ow {
                out[(ci * oh + y) * ow + x] = input.data[(ci * h + sy) * w + x / factor];
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, oh, ow],
        data: out,
    })
}

/// Nearest-neighbor resize of a `C x H x W` map to an arbitrary target
/// extent. Source index is `floor(dst * in / out)`, which reduces to exact
/// block replication for integer upscales and strided sampling for integer
/// downscales.
pub fn resize_nearest(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, TensorError> {
    if input.rank() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "resize_nearest",
            reason: format!("expected C x H x W, got {:?}", input.shape),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "resize_nearest",
            reason: "target extents must be positive".into(),
        });
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut out = vec![0.0; c * out_h * out_w];
    for ci in 0..c {
        for y in 0..out_h {
            let sy = y * h / out_h;
            for x in 0..out_w {
                let sx = x * w / out_w;
                out[(ci * out_h + y) * out_w + x] = input.data[(ci * h + sy) * w + sx];
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, out_h, out_w],
        data: out,
    })
}

/// 2x2 average pooling with window clipping at odd borders, so the output
/// extent is `ceil(H/2) x ceil(W/2)`.
pub fn avg_pool2(input: &Tensor) -> Result<Tensor, TensorError> {
    if input.rank() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "avg_pool2",
            reason: format!("expected C x H x W, got {:?}", input.shape),
        });
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dy in 0..2 {
                    let sy = y * 2 + dy;
                    if sy >= h {
                        continue;
                    }
                    for dx in 0..2 {
                        let sx = x * 2 + dx;
                        if sx >= w {
                            continue;
                        }
                        acc += input.data[(ci * h + sy) * w + sx];
                        count += 1.0;
                    }
                }
                out[(ci * oh + y) * ow + x] = acc / count;
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, oh, ow],
        data: out,
    })
}

/// Concatenate `C_i x H x W` maps along the channel axis, preserving
/// argument order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concat_channels",
            reason: "no parts".into(),
        });
    }
    let (h, w) = match parts[0].shape() {
        [_, h, w] => (*h, *w),
        other => {
            return Err(TensorError::InvalidArgument {
                op: "concat_channels",
                reason: format!("expected C x H x W, got {other:?}"),
            })
        }
    };
    let mut channels = 0;
    for p in parts {
        match p.shape() {
            [c, ph, pw] if *ph == h && *pw == w => channels += c,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                })
            }
        }
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![channels, h, w],
        data,
    })
}

const NORM_EPSILON: f64 = 1e-12;

/// Scale every slice along `axis` to unit Euclidean norm. Slices whose norm
/// is at most 1e-12 come back as zeros instead of erroring, so degenerate
/// inputs cannot poison batched paths.
pub fn l2_normalize(x: &Tensor, axis: usize) -> Tensor {
    assert!(axis < x.rank(), "l2_normalize: axis out of range");
    let n = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer_n: usize = x.shape[..axis].iter().product();
    let mut data = x.data.clone();
    for o in 0..outer_n {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut sq = 0.0;
            for j in 0..n {
                let v = data[base + j * inner];
                sq += v * v;
            }
            let norm = sq.sqrt();
            let scale = if norm > NORM_EPSILON { 1.0 / norm } else { 0.0 };
            for j in 0..n {
                data[base + j * inner] *= scale;
            }
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Per-pixel mean over channels of a `C x H x W` map, as `1 x H x W`.
pub fn mean_channel(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.rank() != 3 {
        return Err(TensorError::InvalidArgument {
            op: "mean_channel",
            reason: format!("expected C x H x W, got {:?}", x.shape),
        });
    }
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let mut out = vec![0.0; h * w];
    for ci in 0..c {
        for p in 0..h * w {
            out[p] += x.data[ci * h * w + p];
        }
    }
    let inv = 1.0 / c as f64;
    for v in &mut out {
        *v *= inv;
    }
    Ok(Tensor {
        shape: vec![1, h, w],
        data: out,
    })
}

pub fn mean_all(x: &Tensor) -> f64 {
    x.data.iter().sum::<f64>() / x.len() as f64
}

/// Add a `1 x H x W` per-pixel field to every channel of a `C x H x W` map.
pub fn add_broadcast_channel(map: &Tensor, field: &Tensor) -> Result<Tensor, TensorError> {
    if map.rank() != 3 || field.rank() != 3 || field.shape[0] != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "add_broadcast_channel",
            lhs: map.shape.clone(),
            rhs: field.shape.clone(),
        });
    }
    if map.shape[1..] != field.shape[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "add_broadcast_channel",
            lhs: map.shape.clone(),
            rhs: field.shape.clone(),
        });
    }
    let (c, hw) = (map.shape[0], map.shape[1] * map.shape[2]);
    let mut data = map.data.clone();
    for ci in 0..c {
        for p in 0..hw {
            data[ci * hw + p] += field.data[p];
        }
    }
    Ok(Tensor {
        shape: map.shape.clone(),
        data,
    })
}

/// Central-difference gradient of a scalar function: per element,
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor, TensorError>
where
    F: Fn(&Tensor) -> f64,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_grad",
            reason: "eps must be positive and finite".into(),
        });
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite("finite_diff_grad"));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data: grad,
    })
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

const TENSOR_MAGIC: &[u8; 4] = b"XTEN";

/// Serialize as little-endian binary: magic `XTEN`, u32 rank, u64 extents,
/// then the raw f64 payload.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| TensorError::Corrupt(format!("missing magic: {e}")))?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorError::Corrupt(format!(
            "bad magic {:?}, expected XTEN",
            magic
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|e| TensorError::Corrupt(format!("truncated rank: {e}")))?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank == 0 || rank > 8 {
        return Err(TensorError::Corrupt(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)
            .map_err(|e| TensorError::Corrupt(format!("truncated extents: {e}")))?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n = element_count(&shape).map_err(|e| TensorError::Corrupt(e.to_string()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)
            .map_err(|e| TensorError::Corrupt(format!("truncated payload: {e}")))?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::new(shape, data).map_err(|e| TensorError::Corrupt(e.to_string()))
}
