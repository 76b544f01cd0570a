use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{NumericsError, ParameterStore, Tensor};

pub type NodeId = usize;

/// Named data tensors fed to [`Op::Input`] nodes.
pub type Inputs = BTreeMap<String, Tensor>;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Variance floor inside scale-shift normalization.
pub const NORM_VARIANCE_EPS: f64 = 1e-5;

/// Where a normalization node gets its per-channel statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormStats {
    /// Mean and (biased) variance of the current batch.
    Batch,
    /// Stored running averages.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

/// Supported operations. Image tensors are channels-last (`N x H x W x C`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Op {
    Input {
        name: String,
    },
    Param {
        name: String,
    },
    Const {
        value: Tensor,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// Adds a vector along the last axis.
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    Relu {
        a: NodeId,
    },
    /// Input `N x H x W x C`, kernel `KH x KW x C x O`, zero padding.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    /// `N x H x W x C -> N x C`
    GlobalAvgPool {
        a: NodeId,
    },
    /// Per-channel (last axis) standardization followed by `gamma * x + beta`.
    ScaleShiftNorm {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats,
    },
    L2NormalizeRows {
        a: NodeId,
    },
    /// `n x m -> n`
    LogSumExpRows {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    /// Concatenates matrices along columns.
    Concat {
        parts: Vec<NodeId>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
        end: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Const { .. } => "const",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::ScaleShiftNorm { .. } => "scale_shift_norm",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::LogSumExpRows { .. } => "log_sum_exp_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
        }
    }

    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } | Op::Const { .. } => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::ScaleShiftNorm { a, gamma, beta, .. } => vec![*a, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::GlobalAvgPool { a }
            | Op::L2NormalizeRows { a }
            | Op::LogSumExpRows { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::SliceRows { a, .. } => vec![*a],
        }
    }
}

/// A recorded computation graph plus the values of its last evaluation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Tape {
    nodes: Vec<Op>,
    outputs: BTreeMap<String, NodeId>,
    #[serde(skip)]
    values: Vec<Option<Tensor>>,
    #[serde(skip)]
    param_nodes: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses a serialized tape, validating op kinds and topological order.
    pub fn from_json(json: &str) -> Result<Self, NumericsError> {
        let raw: serde_json::Value =
            serde_json::from_str(json).map_err(|e| NumericsError::MalformedTape(e.to_string()))?;
        let nodes = raw
            .get("nodes")
            .and_then(|n| n.as_array())
            .ok_or_else(|| NumericsError::MalformedTape("missing 'nodes' array".into()))?;
        let mut tape = Tape::new();
        for (i, node) in nodes.iter().enumerate() {
            let kind = node
                .get("op")
                .and_then(|k| k.as_str())
                .unwrap_or("<missing>");
            let op: Op = serde_json::from_value(node.clone()).map_err(|e| {
                if e.to_string().contains("unknown variant") {
                    NumericsError::UnsupportedOp(kind.to_string())
                } else {
                    NumericsError::MalformedTape(format!("node {i}: {e}"))
                }
            })?;
            if op.operands().iter().any(|&o| o >= i) {
                return Err(NumericsError::MalformedTape(format!(
                    "node {i} consumes a node that does not precede it"
                )));
            }
            if let Op::Param { name } = &op {
                tape.param_nodes.entry(name.clone()).or_insert(i);
            }
            tape.nodes.push(op);
        }
        let outputs: BTreeMap<String, NodeId> = match raw.get("outputs") {
            Some(o) => serde_json::from_value(o.clone())
                .map_err(|e| NumericsError::MalformedTape(e.to_string()))?,
            None => BTreeMap::new(),
        };
        for (name, &id) in &outputs {
            if id >= tape.nodes.len() {
                return Err(NumericsError::MalformedTape(format!(
                    "output '{name}' refers to missing node {id}"
                )));
            }
        }
        tape.outputs = outputs;
        Ok(tape)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tape serializes")
    }

    pub fn nodes(&self) -> &[Op] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a node. Operands must already be on the tape.
    pub fn push(&mut self, op: Op) -> NodeId {
        let id = self.nodes.len();
        for o in op.operands() {
            assert!(o < id, "operand {o} of node {id} is not on the tape");
        }
        if let Op::Param { name } = &op {
            if let Some(&existing) = self.param_nodes.get(name) {
                return existing;
            }
            self.param_nodes.insert(name.clone(), id);
        }
        self.nodes.push(op);
        self.values.clear();
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input { name: name.into() })
    }

    /// Reference to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param { name: name.into() })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const { value })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul { a, b })
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu { a })
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.push(Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        })
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool { a })
    }

    pub fn scale_shift_norm(
        &mut self,
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats,
    ) -> NodeId {
        self.push(Op::ScaleShiftNorm {
            a,
            gamma,
            beta,
            stats,
        })
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2NormalizeRows { a })
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExpRows { a })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean { a })
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat { parts })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceRows { a, start, end })
    }

    pub fn set_output(&mut self, name: &str, node: NodeId) {
        assert!(node < self.nodes.len());
        self.outputs.insert(name.into(), node);
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    /// Value recorded for `node` by the last [`Tape::forward_eval`].
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node).and_then(Option::as_ref)
    }

    /// Evaluates every node in order and returns the named outputs.
    pub fn forward_eval(
        &mut self,
        params: &ParameterStore,
        inputs: &Inputs,
    ) -> Result<BTreeMap<String, Tensor>, NumericsError> {
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (id, op) in self.nodes.iter().enumerate() {
            let v = eval_node(id, op, &values, params, inputs)?;
            values.push(Some(v));
        }
        self.values = values;
        Ok(self
            .outputs
            .iter()
            .map(|(name, &id)| (name.clone(), self.values[id].clone().unwrap()))
            .collect())
    }

    /// Per-channel mean and biased variance seen by a batch-mode norm node
    /// during the last forward pass.
    pub fn batch_stats(&self, node: NodeId) -> Option<(Vec<f64>, Vec<f64>)> {
        match self.nodes.get(node)? {
            Op::ScaleShiftNorm {
                a,
                stats: NormStats::Batch,
                ..
            } => {
                let x = self.value(*a)?;
                Some(channel_stats(x))
            }
            _ => None,
        }
    }

    /// Reverse pass from the named scalar output. Returns gradients for every
    /// trainable parameter; frozen parameters get no entry.
    pub fn backward(
        &self,
        params: &ParameterStore,
        output: &str,
    ) -> Result<Gradients, NumericsError> {
        let out = self
            .output_node(output)
            .ok_or_else(|| NumericsError::UnknownOutput(output.into()))?;
        let adjoints = self.backward_from(params, out)?;
        let mut grads = Gradients::new();
        for (id, op) in self.nodes.iter().enumerate() {
            if let Op::Param { name } = op {
                if params.is_trainable(name) {
                    let g = adjoints[id]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape()));
                    grads.insert(name.clone(), g);
                }
            }
        }
        Ok(grads)
    }

    /// Adjoint of every node with respect to the scalar at `out`. Nodes that
    /// do not lead to a trainable parameter are left as `None`.
    pub fn backward_from(
        &self,
        params: &ParameterStore,
        out: NodeId,
    ) -> Result<Vec<Option<Tensor>>, NumericsError> {
        if self.values.len() != self.nodes.len() {
            return Err(NumericsError::NotEvaluated);
        }
        let out_val = self.values[out].as_ref().unwrap();
        if out_val.shape() != [1] {
            return Err(NumericsError::NonScalarOutput(out_val.shape().to_vec()));
        }

        let mut needs = vec![false; self.nodes.len()];
        for (id, op) in self.nodes.iter().enumerate() {
            needs[id] = match op {
                Op::Param { name } => params.is_trainable(name),
                Op::Input { .. } | Op::Const { .. } => false,
                other => other.operands().iter().any(|&o| needs[o]),
            };
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[out] = Some(Tensor::ones(&[1]));
        for id in (0..=out).rev() {
            if !needs[id] {
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            let op = &self.nodes[id];
            for (operand, g) in self.node_vjp(id, op, &dy, &needs)? {
                match &mut adj[operand] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            adj[id] = Some(dy);
        }
        Ok(adj)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id].as_ref().expect("evaluated")
    }

    /// Vector-Jacobian products of one node for the operands that need them.
    fn node_vjp(
        &self,
        id: NodeId,
        op: &Op,
        dy: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<(NodeId, Tensor)>, NumericsError> {
        let mut out = Vec::new();
        match op {
            Op::Input { .. } | Op::Param { .. } | Op::Const { .. } => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = av.dims2().unwrap();
                let n = bv.shape()[1];
                if needs[*a] {
                    let mut g = vec![0.0; m * k];
                    matmul_nt_into(dy.data(), bv.data(), &mut g, m, n, k);
                    out.push((*a, Tensor::new(vec![m, k], g)?));
                }
                if needs[*b] {
                    let mut g = vec![0.0; k * n];
                    matmul_tn_into(av.data(), dy.data(), &mut g, m, k, n);
                    out.push((*b, Tensor::new(vec![k, n], g)?));
                }
            }
            Op::Transpose { a } => out.push((*a, dy.transpose2())),
            Op::Add { a, b } => {
                if needs[*a] {
                    out.push((*a, dy.clone()));
                }
                if needs[*b] {
                    out.push((*b, dy.clone()));
                }
            }
            Op::Mul { a, b } => {
                if needs[*a] {
                    out.push((*a, dy.zip_map(self.val(*b), |g, v| g * v)));
                }
                if needs[*b] {
                    out.push((*b, dy.zip_map(self.val(*a), |g, v| g * v)));
                }
            }
            Op::AddBias { a, bias } => {
                if needs[*a] {
                    out.push((*a, dy.clone()));
                }
                if needs[*bias] {
                    let c = self.val(*bias).len();
                    let mut g = vec![0.0; c];
                    for chunk in dy.data().chunks_exact(c) {
                        for (acc, v) in g.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    out.push((*bias, Tensor::new(vec![c], g)?));
                }
            }
            Op::Scale { a, factor } => out.push((*a, dy.map(|g| g * factor))),
            Op::Relu { a } => {
                out.push((
                    *a,
                    dy.zip_map(self.val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                ));
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let x = self.val(*input);
                let k = self.val(*kernel);
                let geo = ConvGeometry::new(x.shape(), k.shape(), *stride, *padding)
                    .map_err(|d| shape_err(id, op, d))?;
                let patches = im2col(x.data(), &geo);
                let rows = geo.rows();
                let kdim = geo.patch_len();
                if needs[*kernel] {
                    let mut g = vec![0.0; kdim * geo.cout];
                    matmul_tn_into(&patches, dy.data(), &mut g, rows, kdim, geo.cout);
                    out.push((*kernel, Tensor::new(k.shape().to_vec(), g)?));
                }
                if needs[*input] {
                    let mut gp = vec![0.0; rows * kdim];
                    matmul_nt_into(dy.data(), k.data(), &mut gp, rows, geo.cout, kdim);
                    out.push((*input, Tensor::new(x.shape().to_vec(), col2im(&gp, &geo))?));
                }
            }
            Op::GlobalAvgPool { a } => {
                let x = self.val(*a);
                let (n, h, w, c) = nhwc(x.shape());
                let inv = 1.0 / (h * w) as f64;
                let mut g = vec![0.0; x.len()];
                for b in 0..n {
                    let dyr = &dy.data()[b * c..(b + 1) * c];
                    for px in g[b * h * w * c..(b + 1) * h * w * c].chunks_exact_mut(c) {
                        for (o, d) in px.iter_mut().zip(dyr) {
                            *o = d * inv;
                        }
                    }
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), g)?));
            }
            Op::ScaleShiftNorm {
                a,
                gamma,
                beta,
                stats,
            } => {
                let x = self.val(*a);
                let gm = self.val(*gamma).data();
                let c = gm.len();
                let rows = x.len() / c;
                let (mean, var) = match stats {
                    NormStats::Batch => channel_stats(x),
                    NormStats::Fixed { mean, var } => (mean.clone(), var.clone()),
                };
                let inv_std: Vec<f64> = var
                    .iter()
                    .map(|v| 1.0 / (v + NORM_VARIANCE_EPS).sqrt())
                    .collect();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (xr, dr) in x.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
                    for j in 0..c {
                        let xhat = (xr[j] - mean[j]) * inv_std[j];
                        sum_dy[j] += dr[j];
                        sum_dy_xhat[j] += dr[j] * xhat;
                    }
                }
                if needs[*a] {
                    let mut g = vec![0.0; x.len()];
                    let rf = rows as f64;
                    for ((gr, xr), dr) in g
                        .chunks_exact_mut(c)
                        .zip(x.data().chunks_exact(c))
                        .zip(dy.data().chunks_exact(c))
                    {
                        for j in 0..c {
                            gr[j] = match stats {
                                NormStats::Batch => {
                                    let xhat = (xr[j] - mean[j]) * inv_std[j];
                                    gm[j] * inv_std[j] / rf
                                        * (rf * dr[j] - sum_dy[j] - xhat * sum_dy_xhat[j])
                                }
                                NormStats::Fixed { .. } => dr[j] * gm[j] * inv_std[j],
                            };
                        }
                    }
                    out.push((*a, Tensor::new(x.shape().to_vec(), g)?));
                }
                if needs[*gamma] {
                    out.push((*gamma, Tensor::new(vec![c], sum_dy_xhat)?));
                }
                if needs[*beta] {
                    out.push((*beta, Tensor::new(vec![c], sum_dy)?));
                }
            }
            Op::L2NormalizeRows { a } => {
                let x = self.val(*a);
                let y = self.val(id);
                let (n, d) = x.dims2().unwrap();
                let mut g = vec![0.0; n * d];
                for i in 0..n {
                    let xr = x.row(i);
                    let yr = y.row(i);
                    let dr = dy.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let proj: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        g[i * d + j] = (dr[j] - yr[j] * proj) / norm;
                    }
                }
                out.push((*a, Tensor::new(vec![n, d], g)?));
            }
            Op::LogSumExpRows { a } => {
                let x = self.val(*a);
                let y = self.val(id);
                let (n, m) = x.dims2().unwrap();
                let mut g = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        g[i * m + j] = dy.data()[i] * (x.data()[i * m + j] - y.data()[i]).exp();
                    }
                }
                out.push((*a, Tensor::new(vec![n, m], g)?));
            }
            Op::Sum { a } => {
                let shape = self.val(*a).shape();
                out.push((*a, Tensor::filled(shape, dy.data()[0])));
            }
            Op::Mean { a } => {
                let x = self.val(*a);
                out.push((*a, Tensor::filled(x.shape(), dy.data()[0] / x.len() as f64)));
            }
            Op::Concat { parts } => {
                let (n, total) = dy.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.val(p).shape()[1];
                    if needs[p] {
                        let mut g = Vec::with_capacity(n * cols);
                        for i in 0..n {
                            g.extend_from_slice(
                                &dy.data()[i * total + offset..i * total + offset + cols],
                            );
                        }
                        out.push((p, Tensor::new(vec![n, cols], g)?));
                    }
                    offset += cols;
                }
            }
            Op::SliceRows { a, start, .. } => {
                let x = self.val(*a);
                let row_len = x.len() / x.shape()[0];
                let mut g = vec![0.0; x.len()];
                g[start * row_len..start * row_len + dy.len()].copy_from_slice(dy.data());
                out.push((*a, Tensor::new(x.shape().to_vec(), g)?));
            }
        }
        Ok(out)
    }
}

fn shape_err(node: NodeId, op: &Op, detail: String) -> NumericsError {
    NumericsError::NodeShape {
        node,
        op: op.kind(),
        detail,
    }
}

fn nhwc(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

/// Per-channel mean and biased variance over all leading axes.
fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = *x.shape().last().unwrap();
    let rows = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for r in x.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut var = vec![0.0; c];
    for r in x.data().chunks_exact(c) {
        for j in 0..c {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= rows);
    (mean, var)
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self, String> {
        if x.len() != 4 || k.len() != 4 {
            return Err(format!(
                "expected NHWC input and 4-d kernel, got {x:?} and {k:?}"
            ));
        }
        if stride == 0 {
            return Err("stride must be positive".into());
        }
        let (n, h, w, cin) = nhwc(x);
        let (kh, kw, kc, cout) = (k[0], k[1], k[2], k[3]);
        if kc != cin {
            return Err(format!("kernel expects {kc} channels, input has {cin}"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(format!("kernel {kh}x{kw} larger than padded input {h}x{w}"));
        }
        Ok(Self {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Visits `(patch row, patch column offset, input offset)` for every
    /// in-bounds tap; padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plen = self.patch_len();
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (ky * self.kw + kx) * self.cin;
                            let src =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row * plen + col, src, self.cin);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let mut patches = vec![0.0; geo.rows() * geo.patch_len()];
    geo.for_each_tap(|dst, src, len| {
        patches[dst..dst + len].copy_from_slice(&x[src..src + len]);
    });
    patches
}

fn col2im(patches: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let mut x = vec![0.0; geo.n * geo.h * geo.w * geo.cin];
    geo.for_each_tap(|src, dst, len| {
        for (o, v) in x[dst..dst + len].iter_mut().zip(&patches[src..src + len]) {
            *o += v;
        }
    });
    x
}

fn eval_node(
    id: NodeId,
    op: &Op,
    values: &[Option<Tensor>],
    params: &ParameterStore,
    inputs: &Inputs,
) -> Result<Tensor, NumericsError> {
    let v = |n: &NodeId| values[*n].as_ref().expect("operand evaluated");
    let bad = |detail: String| shape_err(id, op, detail);
    let wrap = |e: NumericsError| NumericsError::Node {
        node: id,
        op: op.kind(),
        source: Box::new(e),
    };
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<(), NumericsError> {
        if a.shape() != b.shape() {
            return Err(bad(format!(
                "operands {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    };
    Ok(match op {
        Op::Input { name } => inputs
            .get(name)
            .cloned()
            .ok_or_else(|| NumericsError::MissingInput(name.clone()))?,
        Op::Param { name } => params
            .get(name)
            .cloned()
            .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?,
        Op::Const { value } => value.clone(),
        Op::MatMul { a, b } => {
            let (av, bv) = (v(a), v(b));
            match (av.dims2(), bv.dims2()) {
                (Some((m, k)), Some((k2, n))) if k == k2 => {
                    let mut o = vec![0.0; m * n];
                    matmul_into(av.data(), bv.data(), &mut o, m, k, n);
                    Tensor::new(vec![m, n], o)?
                }
                _ => {
                    return Err(bad(format!(
                        "cannot multiply {:?} by {:?}",
                        av.shape(),
                        bv.shape()
                    )))
                }
            }
        }
        Op::Transpose { a } => {
            let x = v(a);
            if x.rank() != 2 {
                return Err(bad(format!(
                    "transpose needs a matrix, got {:?}",
                    x.shape()
                )));
            }
            x.transpose2()
        }
        Op::Add { a, b } => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Mul { a, b } => {
            same_shape(v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::AddBias { a, bias } => {
            let (x, bv) = (v(a), v(bias));
            let c = *x.shape().last().unwrap();
            if bv.shape() != [c] {
                return Err(bad(format!(
                    "bias {:?} does not match last axis of {:?}",
                    bv.shape(),
                    x.shape()
                )));
            }
            let mut o = x.clone();
            for chunk in o.data_mut().chunks_exact_mut(c) {
                for (t, b) in chunk.iter_mut().zip(bv.data()) {
                    *t += b;
                }
            }
            o
        }
        Op::Scale { a, factor } => v(a).map(|x| x * factor),
        Op::Relu { a } => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (x, k) = (v(input), v(kernel));
            let geo = ConvGeometry::new(x.shape(), k.shape(), *stride, *padding).map_err(bad)?;
            let patches = im2col(x.data(), &geo);
            let mut o = vec![0.0; geo.rows() * geo.cout];
            matmul_into(
                &patches,
                k.data(),
                &mut o,
                geo.rows(),
                geo.patch_len(),
                geo.cout,
            );
            Tensor::new(vec![geo.n, geo.oh, geo.ow, geo.cout], o)?
        }
        Op::GlobalAvgPool { a } => {
            let x = v(a);
            if x.rank() != 4 {
                return Err(bad(format!("expected NHWC tensor, got {:?}", x.shape())));
            }
            let (n, h, w, c) = nhwc(x.shape());
            let inv = 1.0 / (h * w) as f64;
            let mut o = vec![0.0; n * c];
            for b in 0..n {
                let acc = &mut o[b * c..(b + 1) * c];
                for px in x.data()[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                    for (s, p) in acc.iter_mut().zip(px) {
                        *s += p;
                    }
                }
                acc.iter_mut().for_each(|s| *s *= inv);
            }
            Tensor::new(vec![n, c], o)?
        }
        Op::ScaleShiftNorm {
            a,
            gamma,
            beta,
            stats,
        } => {
            let (x, g, b) = (v(a), v(gamma), v(beta));
            let c = *x.shape().last().unwrap();
            if g.shape() != [c] || b.shape() != [c] {
                return Err(bad(format!(
                    "gamma {:?} / beta {:?} do not match {c} channels",
                    g.shape(),
                    b.shape()
                )));
            }
            let (mean, var) = match stats {
                NormStats::Batch => channel_stats(x),
                NormStats::Fixed { mean, var } => {
                    if mean.len() != c || var.len() != c {
                        return Err(bad(format!("running stats do not match {c} channels")));
                    }
                    (mean.clone(), var.clone())
                }
            };
            let inv_std: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v + NORM_VARIANCE_EPS).sqrt())
                .collect();
            let mut o = x.clone();
            for r in o.data_mut().chunks_exact_mut(c) {
                for j in 0..c {
                    r[j] = g.data()[j] * (r[j] - mean[j]) * inv_std[j] + b.data()[j];
                }
            }
            o
        }
        Op::L2NormalizeRows { a } => {
            let x = v(a);
            if x.rank() != 2 {
                return Err(bad(format!("expected a matrix, got {:?}", x.shape())));
            }
            super::l2_normalize_rows(x).map_err(wrap)?
        }
        Op::LogSumExpRows { a } => {
            let x = v(a);
            let (n, _) = x
                .dims2()
                .ok_or_else(|| bad(format!("expected a matrix, got {:?}", x.shape())))?;
            let o: Vec<f64> = (0..n).map(|i| super::log_sum_exp(x.row(i))).collect();
            Tensor::new(vec![n], o)?
        }
        Op::Sum { a } => Tensor::scalar(v(a).sum()),
        Op::Mean { a } => Tensor::scalar(v(a).sum() / v(a).len() as f64),
        Op::Concat { parts } => {
            if parts.is_empty() {
                return Err(bad("concat of zero tensors".into()));
            }
            let rows = v(&parts[0]).shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                match v(p).dims2() {
                    Some((r, c)) if r == rows => widths.push(c),
                    _ => {
                        return Err(bad(format!(
                            "part {p} has shape {:?}, expected {rows} rows",
                            v(p).shape()
                        )))
                    }
                }
            }
            let total: usize = widths.iter().sum();
            let mut o = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    o.extend_from_slice(v(p).row(i));
                }
            }
            Tensor::new(vec![rows, total], o)?
        }
        Op::SliceRows { a, start, end } => {
            let x = v(a);
            let n = x.shape()[0];
            if start >= end || *end > n {
                return Err(bad(format!(
                    "row range {start}..{end} invalid for {n} rows"
                )));
            }
            let row_len = x.len() / n;
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(shape, x.data()[start * row_len..end * row_len].to_vec())?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone(), true).unwrap();
        }
        s
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let y = tape.relu(x);
        tape.set_output("y", y);
        let mut inputs = Inputs::new();
        inputs.insert(
            "x".into(),
            Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(),
        );
        let out = tape.forward_eval(&ParameterStore::new(), &inputs).unwrap();
        assert_eq!(out["y"].data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn affine_hand_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let w = tape.param("w");
        let b = tape.param("b");
        let xw = tape.matmul(x, w);
        let y = tape.add_bias(xw, b);
        tape.set_output("y", y);
        let params = store(&[
            ("w", Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()),
            ("b", Tensor::scalar(5.0)),
        ]);
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let out = tape.forward_eval(&params, &inputs).unwrap();
        assert_eq!(out["y"].data(), &[16.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x");
        let sq = tape.mul(x, x);
        let l = tape.sum(sq);
        tape.set_output("loss", l);
        let params = store(&[("x", Tensor::scalar(3.0))]);
        tape.forward_eval(&params, &Inputs::new()).unwrap();
        let g = tape.backward(&params, "loss").unwrap();
        assert_eq!(g["x"].data(), &[6.0]);
    }

    #[test]
    fn sum_of_product_gradient_is_other_operand() {
        let mut tape = Tape::new();
        let a = tape.param("a");
        let b = tape.param("b");
        let ab = tape.matmul(a, b);
        let l = tape.sum(ab);
        tape.set_output("loss", l);
        let av = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bv = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap();
        let params = store(&[("a", av), ("b", bv.clone())]);
        tape.forward_eval(&params, &Inputs::new()).unwrap();
        let g = tape.backward(&params, "loss").unwrap();
        // d/dA sum(AB) = 1 * B^T, each row of the gradient is the row sums of B.
        let row_sums: Vec<f64> = (0..3).map(|i| bv.row(i).iter().sum()).collect();
        assert_eq!(g["a"].row(0), &row_sums[..]);
        assert_eq!(g["a"].row(1), &row_sums[..]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a");
        let b = tape.param("b");
        let p = tape.mul(a, b);
        let l = tape.sum(p);
        tape.set_output("loss", l);
        let mut params = store(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(3.0))]);
        params.set_trainable("b", false).unwrap();
        tape.forward_eval(&params, &Inputs::new()).unwrap();
        let g = tape.backward(&params, "loss").unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g["a"].data(), &[3.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let a = tape.param("a");
        tape.set_output("a", a);
        let params = store(&[("a", Tensor::zeros(&[2]))]);
        tape.forward_eval(&params, &Inputs::new()).unwrap();
        assert!(matches!(
            tape.backward(&params, "a"),
            Err(NumericsError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut tape = Tape::new();
        let a = tape.input("a");
        let b = tape.input("b");
        let c = tape.matmul(a, b);
        tape.set_output("c", c);
        let mut inputs = Inputs::new();
        inputs.insert("a".into(), Tensor::zeros(&[2, 3]));
        inputs.insert("b".into(), Tensor::zeros(&[2, 3]));
        let err = tape
            .forward_eval(&ParameterStore::new(), &inputs)
            .unwrap_err();
        assert!(matches!(
            err,
            NumericsError::NodeShape {
                node: 2,
                op: "matmul",
                ..
            }
        ));
    }

    #[test]
    fn unknown_op_kind_rejected() {
        let json = r#"{"nodes":[{"op":"input","name":"x"},{"op":"softmax","a":0}],"outputs":{}}"#;
        assert_eq!(
            Tape::from_json(json).unwrap_err(),
            NumericsError::UnsupportedOp("softmax".into())
        );
    }

    #[test]
    fn json_round_trip_replays() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let r = tape.relu(x);
        let s = tape.sum(r);
        tape.set_output("s", s);
        let mut again = Tape::from_json(&tape.to_json()).unwrap();
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), Tensor::new(vec![2], vec![-1.0, 4.0]).unwrap());
        let a = tape.forward_eval(&ParameterStore::new(), &inputs).unwrap();
        let b = again.forward_eval(&ParameterStore::new(), &inputs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_order_must_be_topological() {
        let json = r#"{"nodes":[{"op":"relu","a":1},{"op":"input","name":"x"}],"outputs":{}}"#;
        assert!(matches!(
            Tape::from_json(json),
            Err(NumericsError::MalformedTape(_))
        ));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1x4x4x2 input, 3x3x2x3 kernel, stride 2, padding 1
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..54).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut tape = Tape::new();
        let xi = tape.input("x");
        let ki = tape.param("k");
        let y = tape.conv2d(xi, ki, 2, 1);
        tape.set_output("y", y);
        let params = store(&[("k", Tensor::new(vec![3, 3, 2, 3], k.clone()).unwrap())]);
        let mut inputs = Inputs::new();
        inputs.insert(
            "x".into(),
            Tensor::new(vec![1, 4, 4, 2], x.clone()).unwrap(),
        );
        let out = tape.forward_eval(&params, &inputs).unwrap();
        let y = &out["y"];
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        for oy in 0..2 {
            for ox in 0..2 {
                for o in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if !(0..4).contains(&iy) || !(0..4).contains(&ix) {
                                continue;
                            }
                            for c in 0..2 {
                                acc += x[((iy as usize) * 4 + ix as usize) * 2 + c]
                                    * k[((ky * 3 + kx) * 2 + c) * 3 + o];
                            }
                        }
                    }
                    let got = y.data()[(oy * 2 + ox) * 3 + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_stats_exposed() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let g = tape.param("g");
        let b = tape.param("b");
        let y = tape.scale_shift_norm(x, g, b, NormStats::Batch);
        tape.set_output("y", y);
        let params = store(&[("g", Tensor::ones(&[2])), ("b", Tensor::zeros(&[2]))]);
        let mut inputs = Inputs::new();
        inputs.insert(
            "x".into(),
            Tensor::new(vec![2, 2], vec![1.0, 10.0, 3.0, 10.0]).unwrap(),
        );
        let out = tape.forward_eval(&params, &inputs).unwrap();
        let (mean, var) = tape.batch_stats(y).unwrap();
        assert_eq!(mean, vec![2.0, 10.0]);
        assert_eq!(var, vec![1.0, 0.0]);
        assert!(out["y"].is_finite());
    }
}
