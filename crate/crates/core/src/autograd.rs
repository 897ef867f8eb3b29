//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] during the forward pass and replayed
//! in reverse to accumulate gradients. The op set is exactly what the encoder
//! and its heads need: matrix products, elementwise arithmetic, softmax,
//! layer normalization, gelu, row gathers (embedding lookup), dropout and the
//! two training losses.
//!
//! Gradient accumulation is additive: callers zero gradients between steps
//! (in practice by starting a fresh tape per step). A tape is single-threaded;
//! independent tapes may run on independent threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Element type for all tensor math. `f32` by default; the `f64` feature
/// switches the whole library to double precision for gradient-check builds.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;

/// Additive mask value that drives a softmax weight to exactly zero without
/// producing non-finite intermediates.
pub const NEG_ATTENTION: Scalar = -1.0e9;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Dense n-dimensional value with an optional gradient of identical shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<Scalar>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Scalar>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One recorded operation, holding whatever the backward pass needs.
#[derive(Debug)]
enum Op {
    Matmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    /// out = a @ b^T with a: [m,k], b: [n,k].
    MatmulNT {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Scale {
        a: TensorId,
        factor: Scalar,
        out: TensorId,
    },
    AddScalar {
        a: TensorId,
        out: TensorId,
    },
    AddRowBias {
        a: TensorId,
        bias: TensorId,
        out: TensorId,
    },
    Softmax {
        x: TensorId,
        out: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        out: TensorId,
        inv_std: Vec<Scalar>,
        normalized: Vec<Scalar>,
    },
    Gelu {
        x: TensorId,
        out: TensorId,
    },
    GatherRows {
        table: TensorId,
        out: TensorId,
        ids: Vec<usize>,
    },
    SliceRows {
        x: TensorId,
        out: TensorId,
        start: usize,
    },
    SliceCols {
        x: TensorId,
        out: TensorId,
        start: usize,
    },
    ConcatRows {
        xs: Vec<TensorId>,
        out: TensorId,
    },
    ConcatCols {
        xs: Vec<TensorId>,
        out: TensorId,
    },
    Dropout {
        x: TensorId,
        out: TensorId,
        mask: Vec<Scalar>,
    },
    CrossEntropy {
        logits: TensorId,
        out: TensorId,
        labels: Vec<usize>,
        weights: Vec<Scalar>,
        probs: Vec<Scalar>,
    },
    Mse {
        pred: TensorId,
        out: TensorId,
        targets: Vec<Scalar>,
    },
    Sum {
        x: TensorId,
        out: TensorId,
    },
    Reshape {
        x: TensorId,
        out: TensorId,
    },
}

impl Op {
    fn out(&self) -> TensorId {
        match self {
            Op::Matmul { out, .. }
            | Op::MatmulNT { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::AddScalar { out, .. }
            | Op::AddRowBias { out, .. }
            | Op::Softmax { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::Gelu { out, .. }
            | Op::GatherRows { out, .. }
            | Op::SliceRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::Dropout { out, .. }
            | Op::CrossEntropy { out, .. }
            | Op::Mse { out, .. }
            | Op::Sum { out, .. }
            | Op::Reshape { out, .. } => *out,
        }
    }
}

/// Ordered record of executed operations. Replaying backward visits each
/// recorded operation exactly once, in reverse order of execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

/// sqrt(2/pi), kept at f64 precision for the double-precision build.
#[allow(clippy::excessive_precision)]
const SQRT_2_OVER_PI: Scalar = 0.797_884_560_802_865_4;

fn gelu_scalar(x: Scalar) -> Scalar {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: Scalar) -> Scalar {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<Scalar>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        id
    }

    /// Record a constant input. Gradients do not flow into leaves.
    pub fn leaf(&mut self, data: Vec<Scalar>, shape: &[usize]) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data does not match shape"
        );
        self.push(shape.to_vec(), data, false)
    }

    /// Record a trainable input; `backward` accumulates into its `grad`.
    pub fn param(&mut self, data: Vec<Scalar>, shape: &[usize]) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param data does not match shape"
        );
        self.push(shape.to_vec(), data, true)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[Scalar] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[Scalar]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> Scalar {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn dims2(&self, id: TensorId, what: &str) -> Result<(usize, usize), TensorError> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: expected 2-d tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0 as Scalar; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.requires(&[a, b]);
        let id = self.push(vec![m, n], out, rg);
        self.ops.push(Op::Matmul { a, b, out: id });
        Ok(id)
    }

    /// a @ b^T for a: [m,k], b: [n,k]. Used for attention scores.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.dims2(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul_nt: inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0 as Scalar; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut s = 0.0 as Scalar;
                    for p in 0..k {
                        s += arow[p] * brow[p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
        let rg = self.requires(&[a, b]);
        let id = self.push(vec![m, n], out, rg);
        self.ops.push(Op::MatmulNT { a, b, out: id });
        Ok(id)
    }

    fn elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Result<(Vec<usize>, Vec<Scalar>), TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch(format!(
                "{name}: {sa:?} vs {sb:?}"
            )));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa.clone(), data))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (shape, data) = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.requires(&[a, b]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::Add { a, b, out: id });
        Ok(id)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (shape, data) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        let rg = self.requires(&[a, b]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::Sub { a, b, out: id });
        Ok(id)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (shape, data) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.requires(&[a, b]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::Mul { a, b, out: id });
        Ok(id)
    }

    /// Multiply every element by a scalar.
    pub fn scale(&mut self, a: TensorId, factor: Scalar) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(&[a]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::Scale { a, factor, out: id });
        id
    }

    /// Add a scalar to every element.
    pub fn add_scalar(&mut self, a: TensorId, value: Scalar) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x + value).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(&[a]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::AddScalar { a, out: id });
        id
    }

    /// Broadcast-add a length-c bias vector to every row of a [r,c] matrix.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = self.dims2(a, "add_row_bias input")?;
        let bs = &self.nodes[bias.0].shape;
        if bs.len() != 1 || bs[0] != c {
            return Err(TensorError::ShapeMismatch(format!(
                "add_row_bias: bias {bs:?} vs row width {c}"
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        {
            let bd = &self.nodes[bias.0].data;
            for i in 0..r {
                for j in 0..c {
                    data[i * c + j] += bd[j];
                }
            }
        }
        let rg = self.requires(&[a, bias]);
        let id = self.push(vec![r, c], data, rg);
        self.ops.push(Op::AddRowBias { a, bias, out: id });
        Ok(id)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::InvalidParameter(format!(
                "softmax: axis {axis} for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.nodes[x.0].data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = Scalar::NEG_INFINITY;
                for s in 0..len {
                    max = max.max(data[base + s * inner]);
                }
                let mut sum = 0.0 as Scalar;
                for s in 0..len {
                    let e = (data[base + s * inner] - max).exp();
                    data[base + s * inner] = e;
                    sum += e;
                }
                for s in 0..len {
                    data[base + s * inner] /= sum;
                }
            }
        }
        let rg = self.requires(&[x]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::Softmax { x, out: id, axis });
        Ok(id)
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        epsilon: Scalar,
    ) -> Result<TensorId, TensorError> {
        if epsilon <= 0.0 {
            return Err(TensorError::InvalidParameter(format!(
                "layer_norm: epsilon {epsilon} must be positive"
            )));
        }
        let shape = self.nodes[x.0].shape.clone();
        let width = *shape
            .last()
            .ok_or_else(|| TensorError::ShapeMismatch("layer_norm: scalar input".into()))?;
        for (t, name) in [(gain, "gain"), (bias, "bias")] {
            let s = &self.nodes[t.0].shape;
            if s.len() != 1 || s[0] != width {
                return Err(TensorError::ShapeMismatch(format!(
                    "layer_norm: {name} {s:?} vs width {width}"
                )));
            }
        }
        let rows = self.nodes[x.0].data.len() / width;
        let mut out = vec![0.0 as Scalar; rows * width];
        let mut inv_std = vec![0.0 as Scalar; rows];
        let mut normalized = vec![0.0 as Scalar; rows * width];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gain.0].data;
            let bd = &self.nodes[bias.0].data;
            for r in 0..rows {
                let row = &xd[r * width..(r + 1) * width];
                let mean = row.iter().sum::<Scalar>() / width as Scalar;
                let var =
                    row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Scalar>() / width as Scalar;
                let inv = 1.0 / (var + epsilon).sqrt();
                inv_std[r] = inv;
                for j in 0..width {
                    let nh = (row[j] - mean) * inv;
                    normalized[r * width + j] = nh;
                    out[r * width + j] = nh * gd[j] + bd[j];
                }
            }
        }
        let rg = self.requires(&[x, gain, bias]);
        let id = self.push(shape, out, rg);
        self.ops.push(Op::LayerNorm {
            x,
            gain,
            bias,
            out: id,
            inv_std,
            normalized,
        });
        Ok(id)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| gelu_scalar(v))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(&[x]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::Gelu { x, out: id });
        id
    }

    /// Row gather: `out[i] = table[ids[i]]`. Embedding lookup and row
    /// selection share this op; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId, TensorError> {
        let (rows, width) = self.dims2(table, "gather_rows table")?;
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange(format!(
                    "gather_rows: id {id} >= {rows}"
                )));
            }
        }
        let mut data = vec![0.0 as Scalar; ids.len() * width];
        {
            let td = &self.nodes[table.0].data;
            for (i, &rid) in ids.iter().enumerate() {
                data[i * width..(i + 1) * width]
                    .copy_from_slice(&td[rid * width..(rid + 1) * width]);
            }
        }
        let rg = self.requires(&[table]);
        let id = self.push(vec![ids.len(), width], data, rg);
        self.ops.push(Op::GatherRows {
            table,
            out: id,
            ids: ids.to_vec(),
        });
        Ok(id)
    }

    /// Contiguous row slice of a 2-d tensor.
    pub fn slice_rows(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (rows, width) = self.dims2(x, "slice_rows input")?;
        if start + len > rows {
            return Err(TensorError::IndexOutOfRange(format!(
                "slice_rows: {start}+{len} > {rows}"
            )));
        }
        let data = self.nodes[x.0].data[start * width..(start + len) * width].to_vec();
        let rg = self.requires(&[x]);
        let id = self.push(vec![len, width], data, rg);
        self.ops.push(Op::SliceRows { x, out: id, start });
        Ok(id)
    }

    /// Contiguous column slice of a 2-d tensor.
    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let (rows, width) = self.dims2(x, "slice_cols input")?;
        if start + len > width {
            return Err(TensorError::IndexOutOfRange(format!(
                "slice_cols: {start}+{len} > {width}"
            )));
        }
        let mut data = vec![0.0 as Scalar; rows * len];
        {
            let xd = &self.nodes[x.0].data;
            for r in 0..rows {
                data[r * len..(r + 1) * len]
                    .copy_from_slice(&xd[r * width + start..r * width + start + len]);
            }
        }
        let rg = self.requires(&[x]);
        let id = self.push(vec![rows, len], data, rg);
        self.ops.push(Op::SliceCols { x, out: id, start });
        Ok(id)
    }

    /// Stack 2-d tensors of equal width vertically.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidParameter(
                "concat_rows: empty input list".into(),
            ));
        }
        let (_, width) = self.dims2(xs[0], "concat_rows input")?;
        let mut rows = 0;
        for &x in xs {
            let (r, w) = self.dims2(x, "concat_rows input")?;
            if w != width {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_rows: width {w} vs {width}"
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * width);
        for &x in xs {
            data.extend_from_slice(&self.nodes[x.0].data);
        }
        let rg = self.requires(xs);
        let id = self.push(vec![rows, width], data, rg);
        self.ops.push(Op::ConcatRows {
            xs: xs.to_vec(),
            out: id,
        });
        Ok(id)
    }

    /// Stack 2-d tensors of equal row count horizontally.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidParameter(
                "concat_cols: empty input list".into(),
            ));
        }
        let (rows, _) = self.dims2(xs[0], "concat_cols input")?;
        let mut width = 0;
        for &x in xs {
            let (r, w) = self.dims2(x, "concat_cols input")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_cols: rows {r} vs {rows}"
                )));
            }
            width += w;
        }
        let mut data = vec![0.0 as Scalar; rows * width];
        let mut offset = 0;
        for &x in xs {
            let w = self.nodes[x.0].shape[1];
            let xd = &self.nodes[x.0].data;
            for r in 0..rows {
                data[r * width + offset..r * width + offset + w]
                    .copy_from_slice(&xd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = self.requires(xs);
        let id = self.push(vec![rows, width], data, rg);
        self.ops.push(Op::ConcatCols {
            xs: xs.to_vec(),
            out: id,
        });
        Ok(id)
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// 1/(1-p). Identity outside training mode and for p = 0.
    pub fn dropout(
        &mut self,
        x: TensorId,
        p: Scalar,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidParameter(format!(
                "dropout: p {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<Scalar> = self.nodes[x.0]
            .data
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < p as f64 {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(&[x]);
        let id = self.push(shape, data, rg);
        self.ops.push(Op::Dropout { x, out: id, mask });
        Ok(id)
    }

    /// Mean over examples of `w[label] * (-log softmax(logits)[label])`.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: TensorId,
        labels: &[usize],
        class_weights: &[Scalar],
    ) -> Result<TensorId, TensorError> {
        let (n, c) = self.dims2(logits, "cross_entropy logits")?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "cross_entropy: {n} rows vs {} labels",
                labels.len()
            )));
        }
        if class_weights.len() != c {
            return Err(TensorError::ShapeMismatch(format!(
                "cross_entropy: {c} classes vs {} weights",
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|&w| w <= 0.0) {
            return Err(TensorError::InvalidParameter(
                "cross_entropy: class weights must be positive".into(),
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(TensorError::IndexOutOfRange(format!(
                    "cross_entropy: label {l} at row {i} >= {c}"
                )));
            }
        }
        let mut probs = vec![0.0 as Scalar; n * c];
        let mut loss = 0.0 as Scalar;
        {
            let ld = &self.nodes[logits.0].data;
            for i in 0..n {
                let row = &ld[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
                let mut sum = 0.0 as Scalar;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    probs[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    probs[i * c + j] /= sum;
                }
                let lse = max + sum.ln();
                loss += class_weights[labels[i]] * (lse - row[labels[i]]);
            }
        }
        loss /= n as Scalar;
        let rg = self.requires(&[logits]);
        let id = self.push(vec![1], vec![loss], rg);
        self.ops.push(Op::CrossEntropy {
            logits,
            out: id,
            labels: labels.to_vec(),
            weights: class_weights.to_vec(),
            probs,
        });
        Ok(id)
    }

    /// Mean squared residual between predictions and targets.
    pub fn mse_loss(
        &mut self,
        pred: TensorId,
        targets: &[Scalar],
    ) -> Result<TensorId, TensorError> {
        let n = self.nodes[pred.0].data.len();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "mse: {n} predictions vs {} targets",
                targets.len()
            )));
        }
        if n == 0 {
            return Err(TensorError::ShapeMismatch("mse: empty input".into()));
        }
        let loss = self.nodes[pred.0]
            .data
            .iter()
            .zip(targets.iter())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<Scalar>()
            / n as Scalar;
        let rg = self.requires(&[pred]);
        let id = self.push(vec![1], vec![loss], rg);
        self.ops.push(Op::Mse {
            pred,
            out: id,
            targets: targets.to_vec(),
        });
        Ok(id)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x.0].data.iter().sum::<Scalar>();
        let rg = self.requires(&[x]);
        let id = self.push(vec![1], vec![s], rg);
        self.ops.push(Op::Sum { x, out: id });
        id
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape: {:?} to {shape:?}",
                self.nodes[x.0].shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires(&[x]);
        let id = self.push(shape.to_vec(), data, rg);
        self.ops.push(Op::Reshape { x, out: id });
        Ok(id)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Accumulate gradients of a scalar loss into every reachable tensor
    /// with `requires_grad`. Repeated calls without `zero_grad` add up.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut g: Vec<Option<Vec<Scalar>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            let out = op.out();
            if !self.nodes[out.0].requires_grad {
                continue;
            }
            let go = match &g[out.0] {
                Some(v) => v.clone(),
                None => continue,
            };
            match op {
                Op::Matmul { a, b, out: _ } => {
                    let m = self.nodes[a.0].shape[0];
                    let k = self.nodes[a.0].shape[1];
                    let n = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].requires_grad {
                        let bd = &self.nodes[b.0].data;
                        let da = acc(&mut g, *a, m * k);
                        for i in 0..m {
                            for j in 0..n {
                                let gv = go[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += gv * bd[p * n + j];
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let ad = &self.nodes[a.0].data;
                        let db = acc(&mut g, *b, k * n);
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += av * go[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::MatmulNT { a, b, out: _ } => {
                    let m = self.nodes[a.0].shape[0];
                    let k = self.nodes[a.0].shape[1];
                    let n = self.nodes[b.0].shape[0];
                    if self.nodes[a.0].requires_grad {
                        let bd = &self.nodes[b.0].data;
                        let da = acc(&mut g, *a, m * k);
                        for i in 0..m {
                            for j in 0..n {
                                let gv = go[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += gv * bd[j * k + p];
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let ad = &self.nodes[a.0].data;
                        let db = acc(&mut g, *b, n * k);
                        for i in 0..m {
                            for j in 0..n {
                                let gv = go[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    db[j * k + p] += gv * ad[i * k + p];
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b, out: _ } => {
                    for t in [a, b] {
                        if self.nodes[t.0].requires_grad {
                            let d = acc(&mut g, *t, go.len());
                            for (dv, &gv) in d.iter_mut().zip(go.iter()) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::Sub { a, b, out: _ } => {
                    if self.nodes[a.0].requires_grad {
                        let d = acc(&mut g, *a, go.len());
                        for (dv, &gv) in d.iter_mut().zip(go.iter()) {
                            *dv += gv;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let d = acc(&mut g, *b, go.len());
                        for (dv, &gv) in d.iter_mut().zip(go.iter()) {
                            *dv -= gv;
                        }
                    }
                }
                Op::Mul { a, b, out: _ } => {
                    if self.nodes[a.0].requires_grad {
                        let bd = self.nodes[b.0].data.clone();
                        let d = acc(&mut g, *a, go.len());
                        for i in 0..go.len() {
                            d[i] += go[i] * bd[i];
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let ad = self.nodes[a.0].data.clone();
                        let d = acc(&mut g, *b, go.len());
                        for i in 0..go.len() {
                            d[i] += go[i] * ad[i];
                        }
                    }
                }
                Op::Scale { a, factor, out: _ } => {
                    if self.nodes[a.0].requires_grad {
                        let d = acc(&mut g, *a, go.len());
                        for (dv, &gv) in d.iter_mut().zip(go.iter()) {
                            *dv += gv * factor;
                        }
                    }
                }
                Op::AddScalar { a, out: _ } => {
                    if self.nodes[a.0].requires_grad {
                        let d = acc(&mut g, *a, go.len());
                        for (dv, &gv) in d.iter_mut().zip(go.iter()) {
                            *dv += gv;
                        }
                    }
                }
                Op::AddRowBias { a, bias, out: _ } => {
                    let c = self.nodes[bias.0].shape[0];
                    if self.nodes[a.0].requires_grad {
                        let d = acc(&mut g, *a, go.len());
                        for (dv, &gv) in d.iter_mut().zip(go.iter()) {
                            *dv += gv;
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let d = acc(&mut g, *bias, c);
                        for (i, &gv) in go.iter().enumerate() {
                            d[i % c] += gv;
                        }
                    }
                }
                Op::Softmax { x, out, axis } => {
                    if self.nodes[x.0].requires_grad {
                        let shape = self.nodes[out.0].shape.clone();
                        let len = shape[*axis];
                        let inner: usize = shape[*axis + 1..].iter().product();
                        let outer: usize = shape[..*axis].iter().product();
                        let y = self.nodes[out.0].data.clone();
                        let d = acc(&mut g, *x, y.len());
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = 0.0 as Scalar;
                                for s in 0..len {
                                    dot += go[base + s * inner] * y[base + s * inner];
                                }
                                for s in 0..len {
                                    let idx = base + s * inner;
                                    d[idx] += y[idx] * (go[idx] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    out: _,
                    inv_std,
                    normalized,
                } => {
                    let width = self.nodes[gain.0].shape[0];
                    let rows = normalized.len() / width;
                    if self.nodes[gain.0].requires_grad {
                        let d = acc(&mut g, *gain, width);
                        for r in 0..rows {
                            for j in 0..width {
                                d[j] += go[r * width + j] * normalized[r * width + j];
                            }
                        }
                    }
                    if self.nodes[bias.0].requires_grad {
                        let d = acc(&mut g, *bias, width);
                        for r in 0..rows {
                            for j in 0..width {
                                d[j] += go[r * width + j];
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        let gd = self.nodes[gain.0].data.clone();
                        let d = acc(&mut g, *x, normalized.len());
                        for r in 0..rows {
                            let mut m1 = 0.0 as Scalar;
                            let mut m2 = 0.0 as Scalar;
                            for j in 0..width {
                                let gg = go[r * width + j] * gd[j];
                                m1 += gg;
                                m2 += gg * normalized[r * width + j];
                            }
                            m1 /= width as Scalar;
                            m2 /= width as Scalar;
                            for j in 0..width {
                                let gg = go[r * width + j] * gd[j];
                                d[r * width + j] +=
                                    inv_std[r] * (gg - m1 - normalized[r * width + j] * m2);
                            }
                        }
                    }
                }
                Op::Gelu { x, out: _ } => {
                    if self.nodes[x.0].requires_grad {
                        let xd = self.nodes[x.0].data.clone();
                        let d = acc(&mut g, *x, xd.len());
                        for i in 0..xd.len() {
                            d[i] += go[i] * gelu_grad_scalar(xd[i]);
                        }
                    }
                }
                Op::GatherRows { table, out: _, ids } => {
                    if self.nodes[table.0].requires_grad {
                        let width = self.nodes[table.0].shape[1];
                        let numel = self.nodes[table.0].data.len();
                        let d = acc(&mut g, *table, numel);
                        for (i, &rid) in ids.iter().enumerate() {
                            for j in 0..width {
                                d[rid * width + j] += go[i * width + j];
                            }
                        }
                    }
                }
                Op::SliceRows { x, out, start } => {
                    if self.nodes[x.0].requires_grad {
                        let width = self.nodes[x.0].shape[1];
                        let len = self.nodes[out.0].shape[0];
                        let numel = self.nodes[x.0].data.len();
                        let d = acc(&mut g, *x, numel);
                        for r in 0..len {
                            for j in 0..width {
                                d[(start + r) * width + j] += go[r * width + j];
                            }
                        }
                    }
                }
                Op::SliceCols { x, out, start } => {
                    if self.nodes[x.0].requires_grad {
                        let width = self.nodes[x.0].shape[1];
                        let rows = self.nodes[x.0].shape[0];
                        let len = self.nodes[out.0].shape[1];
                        let d = acc(&mut g, *x, rows * width);
                        for r in 0..rows {
                            for j in 0..len {
                                d[r * width + start + j] += go[r * len + j];
                            }
                        }
                    }
                }
                Op::ConcatRows { xs, out: _ } => {
                    let mut offset = 0;
                    for &x in xs {
                        let numel = self.nodes[x.0].data.len();
                        if self.nodes[x.0].requires_grad {
                            let d = acc(&mut g, x, numel);
                            for i in 0..numel {
                                d[i] += go[offset + i];
                            }
                        }
                        offset += numel;
                    }
                }
                Op::ConcatCols { xs, out } => {
                    let width = self.nodes[out.0].shape[1];
                    let rows = self.nodes[out.0].shape[0];
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.nodes[x.0].shape[1];
                        if self.nodes[x.0].requires_grad {
                            let d = acc(&mut g, x, rows * w);
                            for r in 0..rows {
                                for j in 0..w {
                                    d[r * w + j] += go[r * width + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::Dropout { x, out: _, mask } => {
                    if self.nodes[x.0].requires_grad {
                        let d = acc(&mut g, *x, mask.len());
                        for i in 0..mask.len() {
                            d[i] += go[i] * mask[i];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    out: _,
                    labels,
                    weights,
                    probs,
                } => {
                    if self.nodes[logits.0].requires_grad {
                        let n = labels.len();
                        let c = weights.len();
                        let gs = go[0];
                        let d = acc(&mut g, *logits, n * c);
                        for i in 0..n {
                            let w = weights[labels[i]] / n as Scalar;
                            for j in 0..c {
                                let delta = if j == labels[i] { 1.0 } else { 0.0 };
                                d[i * c + j] += gs * w * (probs[i * c + j] - delta);
                            }
                        }
                    }
                }
                Op::Mse {
                    pred,
                    out: _,
                    targets,
                } => {
                    if self.nodes[pred.0].requires_grad {
                        let n = targets.len();
                        let gs = go[0];
                        let pd = self.nodes[pred.0].data.clone();
                        let d = acc(&mut g, *pred, n);
                        for i in 0..n {
                            d[i] += gs * 2.0 * (pd[i] - targets[i]) / n as Scalar;
                        }
                    }
                }
                Op::Sum { x, out: _ } => {
                    if self.nodes[x.0].requires_grad {
                        let numel = self.nodes[x.0].data.len();
                        let gs = go[0];
                        let d = acc(&mut g, *x, numel);
                        for dv in d.iter_mut() {
                            *dv += gs;
                        }
                    }
                }
                Op::Reshape { x, out: _ } => {
                    if self.nodes[x.0].requires_grad {
                        let d = acc(&mut g, *x, go.len());
                        for (dv, &gv) in d.iter_mut().zip(go.iter()) {
                            *dv += gv;
                        }
                    }
                }
            }
        }

        for (i, gi) in g.into_iter().enumerate() {
            if let Some(gi) = gi {
                if self.nodes[i].requires_grad {
                    match &mut self.nodes[i].grad {
                        Some(existing) => {
                            for (e, v) in existing.iter_mut().zip(gi.iter()) {
                                *e += v;
                            }
                        }
                        None => self.nodes[i].grad = Some(gi),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fetch (allocating on first touch) the gradient buffer for `id`.
fn acc(g: &mut [Option<Vec<Scalar>>], id: TensorId, numel: usize) -> &mut Vec<Scalar> {
    g[id.0].get_or_insert_with(|| vec![0.0; numel])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_all_ops, gradient_suite};
    use rand::{Rng, SeedableRng};

    fn tape() -> Tape {
        Tape::new()
    }

    fn assert_close(actual: &[Scalar], expected: &[Scalar], tol: Scalar) {
        assert_eq!(actual.len(), expected.len());
        for (i, (&a, &e)) in actual.iter().zip(expected.iter()).enumerate() {
            assert!((a - e).abs() <= tol, "element {i}: {a} vs {e}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let i = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2]);
        let b = t.leaf(vec![3.0, 4.0], &[2, 1]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = tape();
        let a = t.leaf(vec![0.0; 6], &[2, 3]);
        let b = t.leaf(vec![0.0; 8], &[4, 2]);
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_grad_of_sum_is_column_sums() {
        // d(sum(A B))/dA[i,p] = sum_j B[p,j], the column sums of B broadcast
        // over rows of A.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a_data: Vec<Scalar> = (0..12).map(|_| rng.gen::<Scalar>()).collect();
        let b_data: Vec<Scalar> = (0..8).map(|_| rng.gen::<Scalar>()).collect();
        let mut t = tape();
        let a = t.param(a_data, &[3, 4]);
        let b = t.leaf(b_data.clone(), &[4, 2]);
        let c = t.matmul(a, b).unwrap();
        let loss = t.sum(c);
        t.backward(loss).unwrap();
        let grad = t.grad(a).unwrap();
        for i in 0..3 {
            for p in 0..4 {
                let row_sum: Scalar = b_data[p * 2..(p + 1) * 2].iter().sum();
                assert!((grad[i * 4 + p] - row_sum).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn add_identity() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0], &[2]);
        let z = t.leaf(vec![0.0, 0.0], &[2]);
        let c = t.add(a, z).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0]);
    }

    #[test]
    fn scale_by_two() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0], &[3]);
        let c = t.scale(a, 2.0);
        assert_eq!(t.data(c), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0], &[2]);
        let b = t.leaf(vec![1.0, 2.0, 3.0], &[3]);
        assert!(matches!(t.add(a, b), Err(TensorError::ShapeMismatch(_))));
        assert!(matches!(t.mul(a, b), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_uniform() {
        let mut t = tape();
        let x = t.leaf(vec![0.0, 0.0, 0.0], &[3]);
        let y = t.softmax(x, 0).unwrap();
        let third = 1.0 / 3.0;
        assert_close(t.data(y), &[third, third, third], 1e-6);
    }

    #[test]
    fn softmax_large_magnitude_is_stable() {
        let mut t = tape();
        let x = t.leaf(vec![1000.0, 0.0], &[2]);
        let y = t.softmax(x, 0).unwrap();
        let d = t.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!(d[1] < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_at_magnitude_1e4() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<Scalar> = (0..12)
                .map(|_| (rng.gen::<Scalar>() - 0.5) * 2.0e4)
                .collect();
            let mut t = tape();
            let x = t.leaf(data, &[3, 4]);
            let y = t.softmax(x, 1).unwrap();
            for row in t.data(y).chunks(4) {
                let s: Scalar = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-6, "row sum {s}");
                assert!(row.iter().all(|&v| v >= 0.0 && v <= 1.0));
            }
        }
    }

    #[test]
    fn softmax_axis_zero() {
        let mut t = tape();
        let x = t.leaf(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0], &[2, 3]);
        let y = t.softmax(x, 0).unwrap();
        for col in 0..3 {
            let s = t.data(y)[col] + t.data(y)[3 + col];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut t = tape();
        let x = t.leaf(vec![5.0, 5.0, 5.0], &[1, 3]);
        let g = t.leaf(vec![1.0, 1.0, 1.0], &[3]);
        let b = t.leaf(vec![0.0, 0.0, 0.0], &[3]);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_close(t.data(y), &[0.0, 0.0, 0.0], 1e-3);
    }

    #[test]
    fn layer_norm_population_variance_convention() {
        // Row [1, 3]: mean 2, population variance 1, so unit gain gives [-1, 1].
        let mut t = tape();
        let x = t.leaf(vec![1.0, 3.0], &[1, 2]);
        let g = t.leaf(vec![1.0, 1.0], &[2]);
        let b = t.leaf(vec![0.0, 0.0], &[2]);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_close(t.data(y), &[-1.0, 1.0], 1e-3);
    }

    #[test]
    fn layer_norm_rejects_bad_epsilon() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], &[1, 2]);
        let g = t.leaf(vec![1.0, 1.0], &[2]);
        let b = t.leaf(vec![0.0, 0.0], &[2]);
        assert!(matches!(
            t.layer_norm(x, g, b, 0.0),
            Err(TensorError::InvalidParameter(_))
        ));
    }

    #[test]
    fn gelu_fixed_points() {
        let mut t = tape();
        let x = t.leaf(vec![0.0, 10.0], &[2]);
        let y = t.gelu(x);
        assert_eq!(t.data(y)[0], 0.0);
        assert!((t.data(y)[1] - 10.0).abs() < 1e-3);
    }

    #[test]
    fn gather_row_zero_is_exact() {
        let mut t = tape();
        let table = t.leaf(vec![1.5, -2.0, 0.25, 3.0], &[2, 2]);
        let y = t.gather_rows(table, &[0]).unwrap();
        assert_eq!(t.data(y), &[1.5, -2.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let mut t = tape();
        let table = t.leaf(vec![0.0; 4], &[2, 2]);
        assert!(matches!(
            t.gather_rows(table, &[2]),
            Err(TensorError::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn gather_repeated_ids_accumulate_double_gradient() {
        let mut t = tape();
        let table = t.param(vec![0.0; 8], &[4, 2]);
        let y = t.gather_rows(table, &[2, 2]).unwrap();
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let grad = t.grad(table).unwrap();
        assert_eq!(&grad[4..6], &[2.0, 2.0]);
        assert_eq!(&grad[0..4], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_backward_matches_one_hot_matmul() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let table_data: Vec<Scalar> = (0..32).map(|_| rng.gen::<Scalar>()).collect();
        let ids = [3usize, 1, 3];
        let w: Vec<Scalar> = (0..12).map(|_| rng.gen::<Scalar>()).collect();

        let mut t1 = tape();
        let table = t1.param(table_data.clone(), &[8, 4]);
        let y = t1.gather_rows(table, &ids).unwrap();
        let wl = t1.leaf(w.clone(), &[3, 4]);
        let p = t1.mul(y, wl).unwrap();
        let loss = t1.sum(p);
        t1.backward(loss).unwrap();
        let gather_grad = t1.grad(table).unwrap().to_vec();

        // Oracle: the same lookup as a one-hot selection matrix product.
        let mut one_hot = vec![0.0 as Scalar; 3 * 8];
        for (row, &id) in ids.iter().enumerate() {
            one_hot[row * 8 + id] = 1.0;
        }
        let mut t2 = tape();
        let table2 = t2.param(table_data, &[8, 4]);
        let sel = t2.leaf(one_hot, &[3, 8]);
        let y2 = t2.matmul(sel, table2).unwrap();
        let wl2 = t2.leaf(w, &[3, 4]);
        let p2 = t2.mul(y2, wl2).unwrap();
        let loss2 = t2.sum(p2);
        t2.backward(loss2).unwrap();
        let matmul_grad = t2.grad(table2).unwrap();

        assert_eq!(gather_grad, matmul_grad);
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], &[2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = t.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], &[2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = t.dropout(x, 0.9, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let mut t = tape();
        let x = t.leaf(vec![1.0], &[1]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            t.dropout(x, 1.0, true, &mut rng),
            Err(TensorError::InvalidParameter(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean_at_half_rate() {
        let mut t = tape();
        let x = t.leaf(vec![1.0; 10_000], &[10_000]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let y = t.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean: Scalar = t.data(y).iter().sum::<Scalar>() / 10_000.0;
        assert!((0.95..=1.05).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        let run = || {
            let mut t = tape();
            let x = t.leaf(vec![1.0; 64], &[64]);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let y = t.dropout(x, 0.3, true, &mut rng).unwrap();
            t.data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cross_entropy_confident_correct_is_zero() {
        let mut t = tape();
        let logits = t.leaf(vec![100.0, 0.0, 0.0], &[1, 3]);
        let loss = t
            .cross_entropy_weighted(logits, &[0], &[1.0, 1.0, 1.0])
            .unwrap();
        assert!(t.value(loss).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let mut t = tape();
        let logits = t.leaf(vec![0.0; 3], &[1, 3]);
        let loss = t
            .cross_entropy_weighted(logits, &[1], &[1.0, 1.0, 1.0])
            .unwrap();
        assert!((t.value(loss) - (3.0 as Scalar).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_applies_class_weight() {
        // A class at 25% frequency carries weight 2: its loss terms double.
        let logits = vec![0.3, -0.2, 0.9];
        let mut t1 = tape();
        let l1 = t1.leaf(logits.clone(), &[1, 3]);
        let unweighted = t1
            .cross_entropy_weighted(l1, &[0], &[1.0, 1.0, 1.0])
            .unwrap();
        let mut t2 = tape();
        let l2 = t2.leaf(logits, &[1, 3]);
        let weighted = t2
            .cross_entropy_weighted(l2, &[0], &[2.0, 1.0, 1.0])
            .unwrap();
        let ratio = t2.value(weighted) / t1.value(unweighted);
        assert!((ratio - 2.0).abs() < 1e-5, "ratio {ratio}");
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = tape();
        let logits = t.leaf(vec![0.0; 3], &[1, 3]);
        assert!(matches!(
            t.cross_entropy_weighted(logits, &[3], &[1.0, 1.0, 1.0]),
            Err(TensorError::IndexOutOfRange(_))
        ));
    }

    #[test]
    fn mse_zero_on_equal() {
        let mut t = tape();
        let p = t.leaf(vec![0.5, -1.0], &[2]);
        let loss = t.mse_loss(p, &[0.5, -1.0]).unwrap();
        assert_eq!(t.value(loss), 0.0);
    }

    #[test]
    fn mse_half_on_single_miss() {
        let mut t = tape();
        let p = t.leaf(vec![0.0, 1.0], &[2]);
        let loss = t.mse_loss(p, &[1.0, 1.0]).unwrap();
        assert!((t.value(loss) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn mse_length_mismatch() {
        let mut t = tape();
        let p = t.leaf(vec![0.0, 1.0], &[2]);
        assert!(matches!(
            t.mse_loss(p, &[1.0]),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut t = tape();
        let p = t.param(vec![0.0, 1.0, 2.0], &[3]);
        let targets = [1.0 as Scalar, 1.0, 1.0];
        let loss = t.mse_loss(p, &targets).unwrap();
        t.backward(loss).unwrap();
        let grad = t.grad(p).unwrap();
        for i in 0..3 {
            let expected = 2.0 * (t.data(p)[i] - targets[i]) / 3.0;
            assert!((grad[i] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = tape();
        let x = t.param(vec![4.0, -1.0, 2.5], &[3]);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square() {
        let mut t = tape();
        let x = t.param(vec![3.0], &[1]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_ignores_unreachable_params() {
        let mut t = tape();
        let x = t.param(vec![1.0, 2.0], &[2]);
        let unused = t.param(vec![5.0], &[1]);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert!(t.grad(x).is_some());
        assert!(t.grad(unused).is_none());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut t = tape();
        let x = t.param(vec![1.0, 1.0], &[2]);
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
        t.zero_grad();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = tape();
        let x = t.param(vec![1.0, 2.0], &[2]);
        assert!(matches!(t.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = tape();
            let a = t.leaf(vec![0.1, 0.7, -0.3, 0.9], &[2, 2]);
            let b = t.leaf(vec![1.3, -0.4, 0.2, 0.8], &[2, 2]);
            let c = t.matmul(a, b).unwrap();
            let s = t.softmax(c, 1).unwrap();
            let g = t.gelu(s);
            t.data(g).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_checks_random_ops() {
        for check in check_all_ops(17) {
            assert!(
                check.rel_err < 1e-3,
                "{} seed {}: rel err {}",
                check.op,
                check.seed,
                check.rel_err
            );
        }
    }

    #[test]
    fn gradient_checks_multiple_seeds() {
        for check in gradient_suite(&[1, 2, 3]) {
            assert!(
                check.rel_err < 1e-3,
                "{} seed {}: rel err {}",
                check.op,
                check.seed,
                check.rel_err
            );
        }
    }
}
