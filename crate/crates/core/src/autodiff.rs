//! Reverse-mode automatic differentiation on dense tensors, a differentiable
//! squared structural-similarity distance, gradient checking, and Adam.
//!
//! A [`Tape`] records every forward op; [`Tape::backward`] accumulates exact
//! gradients in one reverse pass. Any NaN or infinity in a forward value or a
//! final gradient is a hard error, never a warning.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("output node is not scalar: shape {0:?}")]
    NotScalarOutput(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(AdError::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Tensor {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Affine { w: NodeId, x: NodeId, b: NodeId, m: usize, k: usize },
    Sum(NodeId),
    Mean(NodeId),
    Variance { x: NodeId, mu: f64 },
    Sqrt(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Reshape(NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    BroadcastScalar(NodeId),
    WeightedSum { xs: Vec<NodeId>, ws: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Op recorder for one differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, what: &str) -> Result<NodeId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { op, shape, values });
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t.shape, t.values, "leaf")
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Result<NodeId> {
        self.leaf(Tensor::scalar(v))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(AdError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let values: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, self.nodes[a].shape.clone(), values, what)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let lhs = self.nodes[a].values[i * k + p];
                for j in 0..n {
                    values[i * n + j] += lhs * self.nodes[b].values[p * n + j];
                }
            }
        }
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], values, "matmul")
    }

    /// `W x + b` for a weight matrix, input vector, and bias vector.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (sw, sx, sb) = (&self.nodes[w].shape, &self.nodes[x].shape, &self.nodes[b].shape);
        if sw.len() != 2 || sx.len() != 1 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
            return Err(AdError::ShapeMismatch(format!("affine: W {sw:?}, x {sx:?}, b {sb:?}")));
        }
        let (m, k) = (sw[0], sw[1]);
        let mut values = self.nodes[b].values.clone();
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += self.nodes[w].values[i * k + j] * self.nodes[x].values[j];
            }
            values[i] += acc;
        }
        self.push(Op::Affine { w, x, b, m, k }, vec![m], values, "affine")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x].values.iter().sum();
        self.push(Op::Sum(x), vec![], vec![s], "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].values.len() as f64;
        let s = self.nodes[x].values.iter().sum::<f64>() / n;
        self.push(Op::Mean(x), vec![], vec![s], "mean")
    }

    /// Variance over all elements with the 1/(q-1) denominator.
    pub fn variance(&mut self, x: NodeId) -> Result<NodeId> {
        let q = self.nodes[x].values.len();
        if q < 2 {
            return Err(AdError::ShapeMismatch(format!(
                "variance needs at least 2 elements, got {q}"
            )));
        }
        let mu = self.nodes[x].values.iter().sum::<f64>() / q as f64;
        let v = self.nodes[x].values.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>()
            / (q - 1) as f64;
        self.push(Op::Variance { x, mu }, vec![], vec![v], "variance")
    }

    /// Elementwise square root. Values in `[-1e-12, 0]` clamp to 0 and are
    /// treated as constants in the backward pass (zero subgradient at the
    /// clamp); more negative values are domain errors.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let mut values = Vec::with_capacity(self.nodes[x].values.len());
        for &v in &self.nodes[x].values {
            if v < -1e-12 {
                return Err(AdError::DomainError(format!("sqrt of {v}")));
            }
            values.push(v.max(0.0).sqrt());
        }
        self.push(Op::Sqrt(x), self.nodes[x].shape.clone(), values, "sqrt")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| v * v).collect();
        self.push(Op::Square(x), self.nodes[x].shape.clone(), values, "square")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| v.exp()).collect();
        self.push(Op::Exp(x), self.nodes[x].shape.clone(), values, "exp")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        for &v in &self.nodes[x].values {
            if v <= 0.0 {
                return Err(AdError::DomainError(format!("log of {v}")));
            }
        }
        let values = self.nodes[x].values.iter().map(|&v| v.ln()).collect();
        self.push(Op::Log(x), self.nodes[x].shape.clone(), values, "log")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| stable_sigmoid(v)).collect();
        self.push(Op::Sigmoid(x), self.nodes[x].shape.clone(), values, "sigmoid")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| v.tanh()).collect();
        self.push(Op::Tanh(x), self.nodes[x].shape.clone(), values, "tanh")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(x), self.nodes[x].shape.clone(), values, "relu")
    }

    /// `ln(1 + e^x)`, computed overflow-free.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| stable_softplus(v)).collect();
        self.push(Op::Softplus(x), self.nodes[x].shape.clone(), values, "softplus")
    }

    /// Concatenate vectors end to end.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(AdError::ShapeMismatch("concat of nothing".into()));
        }
        let mut values = Vec::new();
        for &x in xs {
            if self.nodes[x].shape.len() > 1 {
                return Err(AdError::ShapeMismatch(format!(
                    "concat expects vectors, got {:?}",
                    self.nodes[x].shape
                )));
            }
            values.extend_from_slice(&self.nodes[x].values);
        }
        let n = values.len();
        self.push(Op::Concat(xs.to_vec()), vec![n], values, "concat")
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let total = self.nodes[x].values.len();
        if start + len > total {
            return Err(AdError::ShapeMismatch(format!(
                "slice [{start}, {}) of {total} elements",
                start + len
            )));
        }
        let values = self.nodes[x].values[start..start + len].to_vec();
        self.push(Op::Slice { x, start }, vec![len], values, "slice")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| v + c).collect();
        self.push(Op::AddScalar(x), self.nodes[x].shape.clone(), values, "add_scalar")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let values = self.nodes[x].values.iter().map(|&v| v * c).collect();
        self.push(Op::Scale(x, c), self.nodes[x].shape.clone(), values, "scale")
    }

    /// Scalar to a length-`n` vector.
    pub fn broadcast_scalar(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        if self.nodes[x].values.len() != 1 {
            return Err(AdError::ShapeMismatch(format!(
                "broadcast expects a scalar, got shape {:?}",
                self.nodes[x].shape
            )));
        }
        let values = vec![self.nodes[x].values[0]; n];
        self.push(Op::BroadcastScalar(x), vec![n], values, "broadcast_scalar")
    }

    /// Fixed-weight linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[NodeId], ws: &[f64]) -> Result<NodeId> {
        if xs.len() != ws.len() {
            return Err(AdError::ShapeMismatch(format!(
                "{} nodes vs {} weights",
                xs.len(),
                ws.len()
            )));
        }
        let mut acc = 0.0;
        for (&x, &w) in xs.iter().zip(ws) {
            if self.nodes[x].values.len() != 1 {
                return Err(AdError::ShapeMismatch(format!(
                    "weighted_sum expects scalars, got shape {:?}",
                    self.nodes[x].shape
                )));
            }
            acc += w * self.nodes[x].values[0];
        }
        self.push(
            Op::WeightedSum { xs: xs.to_vec(), ws: ws.to_vec() },
            vec![],
            vec![acc],
            "weighted_sum",
        )
    }

    /// Reverse accumulation from a scalar output. Returns one gradient buffer
    /// per node; leaves not reachable from `out` get zeros.
    pub fn backward(&self, out: NodeId) -> Result<Vec<Vec<f64>>> {
        let node = &self.nodes[out];
        if node.values.len() != 1 {
            return Err(AdError::NotScalarOutput(node.shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        grads[out][0] = 1.0;
        for id in (0..=out).rev() {
            let g = std::mem::take(&mut grads[id]);
            if g.iter().all(|&v| v == 0.0) {
                grads[id] = g;
                continue;
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*a][i] += gi;
                        grads[*b][i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*a][i] += gi;
                        grads[*b][i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*a][i] += gi * self.nodes[*b].values[i];
                        grads[*b][i] += gi * self.nodes[*a].values[i];
                    }
                }
                Op::Div(a, b) => {
                    for (i, &gi) in g.iter().enumerate() {
                        let bv = self.nodes[*b].values[i];
                        grads[*a][i] += gi / bv;
                        grads[*b][i] -= gi * self.nodes[*a].values[i] / (bv * bv);
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                grads[*a][i * k + p] += gij * self.nodes[*b].values[p * n + j];
                                grads[*b][p * n + j] += gij * self.nodes[*a].values[i * k + p];
                            }
                        }
                    }
                }
                Op::Affine { w, x, b, m, k } => {
                    let (m, k) = (*m, *k);
                    for i in 0..m {
                        let gi = g[i];
                        grads[*b][i] += gi;
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            grads[*w][i * k + j] += gi * self.nodes[*x].values[j];
                            grads[*x][j] += gi * self.nodes[*w].values[i * k + j];
                        }
                    }
                }
                Op::Sum(x) => {
                    for gx in grads[*x].iter_mut() {
                        *gx += g[0];
                    }
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].values.len() as f64;
                    for gx in grads[*x].iter_mut() {
                        *gx += g[0] / n;
                    }
                }
                Op::Variance { x, mu } => {
                    let q1 = (self.nodes[*x].values.len() - 1) as f64;
                    for (gx, &xv) in grads[*x].iter_mut().zip(&self.nodes[*x].values) {
                        *gx += g[0] * 2.0 * (xv - mu) / q1;
                    }
                }
                Op::Sqrt(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        let y = node.values[i];
                        // Clamped inputs froze at zero; leave them constant.
                        if y > 0.0 {
                            grads[*x][i] += gi * 0.5 / y;
                        }
                    }
                }
                Op::Square(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += gi * 2.0 * self.nodes[*x].values[i];
                    }
                }
                Op::Exp(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += gi * node.values[i];
                    }
                }
                Op::Log(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += gi / self.nodes[*x].values[i];
                    }
                }
                Op::Sigmoid(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        let s = node.values[i];
                        grads[*x][i] += gi * s * (1.0 - s);
                    }
                }
                Op::Tanh(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        let t = node.values[i];
                        grads[*x][i] += gi * (1.0 - t * t);
                    }
                }
                Op::Relu(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        if self.nodes[*x].values[i] > 0.0 {
                            grads[*x][i] += gi;
                        }
                    }
                }
                Op::Softplus(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += gi * stable_sigmoid(self.nodes[*x].values[i]);
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for &x in xs {
                        let len = self.nodes[x].values.len();
                        for i in 0..len {
                            grads[x][i] += g[off + i];
                        }
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][start + i] += gi;
                    }
                }
                Op::AddScalar(x) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += gi;
                    }
                }
                Op::Scale(x, c) => {
                    for (i, &gi) in g.iter().enumerate() {
                        grads[*x][i] += gi * c;
                    }
                }
                Op::BroadcastScalar(x) => {
                    grads[*x][0] += g.iter().sum::<f64>();
                }
                Op::WeightedSum { xs, ws } => {
                    for (&x, &w) in xs.iter().zip(ws) {
                        grads[x][0] += g[0] * w;
                    }
                }
            }
            grads[id] = g;
        }
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite("backward".into()));
        }
        Ok(grads)
    }

    /// Center a vector node by subtracting its mean.
    pub fn center(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].values.len();
        let mu = self.mean(x)?;
        let mub = self.broadcast_scalar(mu, n)?;
        self.sub(x, mub)
    }

    /// Differentiable squared distance between two blocks: both are
    /// mean-centered in-graph, then `|x - y|^2 / (|x|^2 + |y|^2 + c)`.
    /// Smooth everywhere since the denominator stays at or above `c`.
    pub fn ssim_dist2_diff(&mut self, x: NodeId, y: NodeId, c: f64) -> Result<NodeId> {
        if self.nodes[x].values.len() != self.nodes[y].values.len() {
            return Err(AdError::ShapeMismatch(format!(
                "block lengths {} vs {}",
                self.nodes[x].values.len(),
                self.nodes[y].values.len()
            )));
        }
        if !(c > 0.0) {
            return Err(AdError::InvalidParam(format!("stabilizer c must be positive, got {c}")));
        }
        let xc = self.center(x)?;
        let yc = self.center(y)?;
        let diff = self.sub(xc, yc)?;
        let diff2 = self.square(diff)?;
        let num = self.sum(diff2)?;
        let x2 = self.square(xc)?;
        let sx = self.sum(x2)?;
        let y2 = self.square(yc)?;
        let sy = self.sum(y2)?;
        let norms = self.add(sx, sy)?;
        let den = self.add_scalar(norms, c)?;
        self.div(num, den)
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of a scalar function of several leaf tensors. The builder must create its
/// leaves from `points` in order via the provided tape.
pub fn grad_check_multi<F>(build: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(AdError::InvalidParam(format!(
            "eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let eval = |points: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &ids)?;
        let value = tape.value(out)[0];
        let grads = tape.backward(out)?;
        Ok((value, grads, ids))
    };
    let (_, grads, ids) = eval(points)?;
    let mut worst = 0.0f64;
    for (pi, point) in points.iter().enumerate() {
        let analytic = &grads[ids[pi]];
        for i in 0..point.numel() {
            let mut plus = points.to_vec();
            plus[pi].values[i] += eps;
            let mut minus = points.to_vec();
            minus[pi].values[i] -= eps;
            let (f_plus, _, _) = eval(&plus)?;
            let (f_minus, _, _) = eval(&minus)?;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let rel = (numeric - analytic[i]).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// [`grad_check_multi`] for a function of a single tensor.
pub fn grad_check<F>(build: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    grad_check_multi(|tape, ids| build(tape, ids[0]), std::slice::from_ref(point), eps)
}

/// Adam accumulators and hyperparameters for one parameter vector.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> AdamState {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AdError::ShapeMismatch(format!(
            "params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(AdError::NonFinite("adam_step gradient".into()));
    }
    state.t += 1;
    let b1t = 1.0 - state.beta1.powi(state.t as i32);
    let b2t = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity_and_reductions() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let eye = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let prod = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(prod), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m), &[2.0]);
        let v = tape.variance(x).unwrap();
        assert_eq!(tape.value(v), &[1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let sq = tape.square(x).unwrap();
        let out = tape.sum(sq).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads[x], vec![2.0, 4.0]);
    }

    #[test]
    fn backward_ignores_unreachable_leaves() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let unused = tape.leaf(Tensor::vector(vec![5.0])).unwrap();
        let c = tape.scalar_leaf(3.0).unwrap();
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let out = tape.add(s, c).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads[unused], vec![0.0]);
        // A constant's gradient flows (it is 1 here), but a separately built
        // constant-only output has zero gradient for x.
        let grads_const = tape.backward(c).unwrap();
        assert_eq!(grads_const[x], vec![0.0, 0.0]);
    }

    #[test]
    fn dist2_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0])).unwrap();
        let y = tape.leaf(Tensor::vector(vec![-1.0, 1.0])).unwrap();
        let d = tape.ssim_dist2_diff(x, y, 9e-4).unwrap();
        assert!((tape.value(d)[0] - 8.0 / 4.0009).abs() < 1e-15);
        assert!((tape.value(d)[0] - 1.999550).abs() < 1e-5);

        let same = tape.ssim_dist2_diff(x, x, 9e-4).unwrap();
        assert_eq!(tape.value(same)[0], 0.0);
        let grads = tape.backward(same).unwrap();
        assert_eq!(grads[x], vec![0.0, 0.0]);
    }

    #[test]
    fn dist2_matches_nondifferentiable_path() {
        use crate::ssim::{dist_eq1, Block};
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let q = 8;
            let va: Vec<f64> = (0..q).map(|_| rng.random::<f64>() * 255.0).collect();
            let vb: Vec<f64> = (0..q).map(|_| rng.random::<f64>() * 255.0).collect();
            let c = (q - 1) as f64 * crate::ssim::c2(255.0);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(va.clone())).unwrap();
            let y = tape.leaf(Tensor::vector(vb.clone())).unwrap();
            let d2 = tape.ssim_dist2_diff(x, y, c).unwrap();
            let reference = dist_eq1(
                &Block::new(va, 255.0).unwrap(),
                &Block::new(vb, 255.0).unwrap(),
                true,
            )
            .unwrap();
            assert!((tape.value(d2)[0] - reference * reference).abs() < 1e-10);
        }
    }

    #[test]
    fn grad_check_quadratic_is_nearly_exact() {
        let point = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let err = grad_check(
            |tape, x| {
                let sq = tape.square(x)?;
                tape.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn grad_check_dist2_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let vx: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let vy: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let err = grad_check_multi(
                |tape, ids| tape.ssim_dist2_diff(ids[0], ids[1], 9e-4),
                &[Tensor::vector(vx), Tensor::vector(vy)],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "err = {err}");
        }
    }

    #[test]
    fn grad_check_two_layer_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut randv = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random::<f64>() * 0.8 - 0.4).collect()
        };
        let w1 = Tensor::matrix(3, 4, randv(12)).unwrap();
        let b1 = Tensor::vector(randv(3));
        let w2 = Tensor::matrix(1, 3, randv(3)).unwrap();
        let b2 = Tensor::vector(randv(1));
        let x = Tensor::vector(randv(4));
        let err = grad_check_multi(
            |tape, ids| {
                let (w1, b1, w2, b2, x) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
                let h = tape.affine(w1, x, b1)?;
                let a = tape.tanh(h)?;
                let o = tape.affine(w2, a, b2)?;
                let sq = tape.square(o)?;
                tape.sum(sq)
            },
            &[w1, b1, w2, b2, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn backward_is_linear_over_losses() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.7, 1.1])).unwrap();
        let sq = tape.square(x).unwrap();
        let l1 = tape.sum(sq).unwrap();
        let sg = tape.sigmoid(x).unwrap();
        let l2 = tape.mean(sg).unwrap();
        let total = tape.add(l1, l2).unwrap();
        let g_total = tape.backward(total).unwrap();
        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        for i in 0..3 {
            assert_eq!(g_total[x][i], g1[x][i] + g2[x][i]);
        }
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.25, -0.5, 0.75, 1.5])).unwrap();
            let y = tape.leaf(Tensor::vector(vec![1.0, 0.5, -0.25, 0.1])).unwrap();
            let d = tape.ssim_dist2_diff(x, y, 0.09).unwrap();
            let s = tape.sigmoid(d).unwrap();
            let out = tape.sum(s).unwrap();
            (tape.value(out)[0], tape.backward(out).unwrap()[x].clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn error_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.leaf(Tensor::vector(vec![1.0])).unwrap();
        assert!(matches!(tape.add(a, b), Err(AdError::ShapeMismatch(_))));

        let neg = tape.leaf(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(tape.sqrt(neg), Err(AdError::DomainError(_))));
        assert!(matches!(tape.log(neg), Err(AdError::DomainError(_))));

        assert!(matches!(tape.backward(a), Err(AdError::NotScalarOutput(_))));

        let big = tape.leaf(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(tape.exp(big), Err(AdError::NonFinite(_))));
        assert!(tape.leaf(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn sqrt_clamp_freezes_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-5e-13, 4.0])).unwrap();
        let r = tape.sqrt(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 2.0]);
        let s = tape.sum(r).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads[x], vec![0.0, 0.25]);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1, 0.1);
        adam_step(&mut p, &[0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0]);

        let mut p = vec![1.0];
        let mut st = AdamState::new(1, 0.1);
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        assert!((p[0] - (1.0 - 0.09999999900000009)).abs() < 1e-15);

        let mut a = vec![0.4, -0.2];
        let mut b = vec![0.4, -0.2];
        let mut sa = AdamState::new(2, 0.01);
        let mut sb = AdamState::new(2, 0.01);
        for _ in 0..5 {
            adam_step(&mut a, &[0.3, -0.1], &mut sa).unwrap();
            adam_step(&mut b, &[0.3, -0.1], &mut sb).unwrap();
        }
        assert_eq!(a, b);

        let mut p = vec![0.0];
        let mut st = AdamState::new(1, 0.1);
        assert!(matches!(
            adam_step(&mut p, &[1.0, 2.0], &mut st),
            Err(AdError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn grad_check_validates_eps() {
        let point = Tensor::vector(vec![1.0]);
        let res = grad_check(|tape, x| tape.sum(x), &point, 1e-2);
        assert!(matches!(res, Err(AdError::InvalidParam(_))));
    }
}
