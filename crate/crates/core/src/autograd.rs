//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to push gradients back to its inputs. Graphs are built fresh
//! for every forward pass and dropped afterwards.
//!
//! The two hot operations of the model, masked multi-head attention and
//! sequence instance normalization, are fused nodes with hand-written
//! backward passes so that neither needs a per-element tape.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row recipe for [`Graph::mix_rows`]: output row `r` is
/// `sum(w * table[i] for (i, w) in rows[r])`.
pub type RowMix = Vec<Vec<(usize, f64)>>;

/// Shape and masking of a fused attention node.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// `true`: position j attends to i < j. `false`: i <= j.
    pub strict: bool,
    /// Relation value per (sequence, query j, key i), laid out
    /// `[b * T * T + j * T + i]`, entries in {0, 1, 2}. Selects the relevance
    /// weight applied to the post-softmax attention value.
    pub relation: Option<Arc<Vec<u8>>>,
}

struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    relevance: Option<Var>,
    spec: AttentionSpec,
    /// Normalized weights, `[(b * heads + h) * T * T + j * T + i]`.
    weights: Vec<f64>,
}

struct SeqInNode {
    x: Var,
    gamma: Var,
    beta: Var,
    pad: Var,
    lens: Arc<Vec<usize>>,
    seq_len: usize,
    eps: f64,
    zhat: Mat,
    mean: Mat,
    std: Mat,
}

struct BceNode {
    pred: Var,
    targets: Arc<Vec<f64>>,
    weights: Arc<Vec<f64>>,
    clamp: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Arc<Vec<f64>>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Ln(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    MixRows(Var, Arc<RowMix>),
    SumAll(Var),
    Attention(Box<AttentionNode>),
    SeqIn(Box<SeqInNode>),
    Bce(Box<BceNode>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies row `r` of `a` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Arc<Vec<f64>>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.nrows(), factors.len());
        for (mut row, &f) in value.axis_iter_mut(Axis(0)).zip(factors.iter()) {
            row *= f;
        }
        let rg = self.rg(a);
        self.push(value, Op::ScaleRows(a, factors), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Ln(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Stacks parts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    /// Weighted row gather: see [`RowMix`]. An empty recipe yields a zero row.
    pub fn mix_rows(&mut self, table: Var, rows: Arc<RowMix>) -> Var {
        let t = self.value(table);
        let mut value = Mat::zeros((rows.len(), t.ncols()));
        for (r, recipe) in rows.iter().enumerate() {
            let mut out = value.row_mut(r);
            for &(i, w) in recipe {
                out.scaled_add(w, &t.row(i));
            }
        }
        let rg = self.rg(table);
        self.push(value, Op::MixRows(table, rows), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Causal multi-head attention. `q`, `k` are `(B*T) x dk`, `v` is
    /// `(B*T) x dv`; both widths must divide by `spec.heads`. With a relation
    /// matrix, `relevance` must be a positive `1 x 3` row `(a, b, c)` and the
    /// softmax weight on key i for query j is multiplied by the entry selected
    /// by the relation value, then renormalized to sum to one.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        relevance: Option<Var>,
        spec: AttentionSpec,
    ) -> Var {
        let (bsz, t_len, heads) = (spec.batch, spec.seq_len, spec.heads);
        let qm = self.value(q).as_standard_layout().into_owned();
        let km = self.value(k).as_standard_layout().into_owned();
        let vm = self.value(v).as_standard_layout().into_owned();
        assert_eq!(qm.nrows(), bsz * t_len);
        assert_eq!(km.dim(), qm.dim());
        assert_eq!(vm.nrows(), bsz * t_len);
        let dk = qm.ncols() / heads;
        let dv = vm.ncols() / heads;
        assert_eq!(dk * heads, qm.ncols());
        assert_eq!(dv * heads, vm.ncols());
        let log_rel: Option<[f64; 3]> = relevance.map(|r| {
            let row = self.value(r);
            [row[[0, 0]].ln(), row[[0, 1]].ln(), row[[0, 2]].ln()]
        });
        if log_rel.is_some() {
            assert!(spec.relation.is_some(), "relevance weights need a relation matrix");
        }
        let scale = 1.0 / (dk as f64).sqrt();
        let qs = qm.as_slice().unwrap();
        let ks = km.as_slice().unwrap();
        let vs = vm.as_slice().unwrap();
        let (qw, vw) = (qm.ncols(), vm.ncols());
        let mut out = Mat::zeros((bsz * t_len, vw));
        let mut weights = vec![0.0; bsz * heads * t_len * t_len];
        let mut logits = vec![0.0; t_len];
        {
            let os = out.as_slice_mut().unwrap();
            for b in 0..bsz {
                for h in 0..heads {
                    let wbase = (b * heads + h) * t_len * t_len;
                    for j in 0..t_len {
                        let n_keys = if spec.strict { j } else { j + 1 };
                        if n_keys == 0 {
                            continue;
                        }
                        let qrow = &qs[(b * t_len + j) * qw + h * dk..][..dk];
                        let mut max = f64::NEG_INFINITY;
                        for (i, logit) in logits.iter_mut().enumerate().take(n_keys) {
                            let krow = &ks[(b * t_len + i) * qw + h * dk..][..dk];
                            let mut acc = 0.0;
                            for (x, y) in qrow.iter().zip(krow) {
                                acc += x * y;
                            }
                            acc *= scale;
                            if let (Some(lr), Some(rel)) = (&log_rel, &spec.relation) {
                                acc += lr[rel[b * t_len * t_len + j * t_len + i] as usize];
                            }
                            *logit = acc;
                            max = max.max(acc);
                        }
                        let wrow = &mut weights[wbase + j * t_len..][..t_len];
                        let mut total = 0.0;
                        for i in 0..n_keys {
                            let e = (logits[i] - max).exp();
                            wrow[i] = e;
                            total += e;
                        }
                        let orow = &mut os[(b * t_len + j) * vw + h * dv..][..dv];
                        for i in 0..n_keys {
                            wrow[i] /= total;
                            let w = wrow[i];
                            let vrow = &vs[(b * t_len + i) * vw + h * dv..][..dv];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += w * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || relevance.is_some_and(|r| self.rg(r));
        self.push(
            out,
            Op::Attention(Box::new(AttentionNode {
                q,
                k,
                v,
                relevance,
                spec,
                weights,
            })),
            rg,
        )
    }

    /// Per-head attention weights of an attention node, one `T x T` matrix
    /// per (sequence, head) in `b * heads + h` order; row j holds the weights
    /// query j places on each key.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Mat>> {
        match &self.nodes[v.0].op {
            Op::Attention(node) => {
                let t = node.spec.seq_len;
                Some(
                    node.weights
                        .chunks(t * t)
                        .map(|c| Mat::from_shape_vec((t, t), c.to_vec()).unwrap())
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Causal sequence instance normalization over `B` sequences of `T` rows.
    /// Step t of sequence b is normalized with the running mean and
    /// population standard deviation of `{pad, x_0, ..., x_t}`, per column.
    /// Rows at or beyond `lens[b]` are zero.
    #[allow(clippy::too_many_arguments)]
    pub fn seq_in(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        pad: Var,
        lens: Arc<Vec<usize>>,
        seq_len: usize,
        eps: f64,
    ) -> Var {
        let xm = self.value(x);
        let (rows, d) = xm.dim();
        assert_eq!(rows, lens.len() * seq_len);
        let g = self.value(gamma).row(0).to_owned();
        let bt = self.value(beta).row(0).to_owned();
        let p = self.value(pad).row(0).to_owned();
        let mut zhat = Mat::zeros((rows, d));
        let mut mean = Mat::zeros((rows, d));
        let mut std = Mat::zeros((rows, d));
        let mut out = Mat::zeros((rows, d));
        for (b, &len) in lens.iter().enumerate() {
            for c in 0..d {
                // Welford over {p, x_0, ..., x_t}
                let mut mu = p[c];
                let mut m2 = 0.0;
                for t in 0..len.min(seq_len) {
                    let r = b * seq_len + t;
                    let xv = xm[[r, c]];
                    let n = (t + 2) as f64;
                    let delta = xv - mu;
                    mu += delta / n;
                    m2 += delta * (xv - mu);
                    let sd = (m2.max(0.0) / n).sqrt();
                    let z = (xv - mu) / (sd + eps);
                    mean[[r, c]] = mu;
                    std[[r, c]] = sd;
                    zhat[[r, c]] = z;
                    out[[r, c]] = g[c] * z + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta) || self.rg(pad);
        self.push(
            out,
            Op::SeqIn(Box::new(SeqInNode {
                x,
                gamma,
                beta,
                pad,
                lens,
                seq_len,
                eps,
                zhat,
                mean,
                std,
            })),
            rg,
        )
    }

    /// Weighted mean binary cross-entropy of an `N x 1` probability column.
    /// Probabilities are clamped to `[clamp, 1 - clamp]` inside the loss.
    /// The caller guarantees `sum(weights) > 0`.
    pub fn bce(
        &mut self,
        pred: Var,
        targets: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
        clamp: f64,
    ) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), targets.len());
        assert_eq!(p.len(), weights.len());
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        for ((&pv, &y), &w) in p.iter().zip(targets.iter()).zip(weights.iter()) {
            if w == 0.0 {
                continue;
            }
            let pc = pv.clamp(clamp, 1.0 - clamp);
            acc -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let value = Mat::from_elem((1, 1), acc / total);
        let rg = self.rg(pred);
        self.push(
            value,
            Op::Bce(Box::new(BceNode {
                pred,
                targets,
                weights,
                clamp,
            })),
            rg,
        )
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g * *f),
            Op::ScaleRows(a, factors) => {
                let mut ga = g.clone();
                for (mut row, &f) in ga.axis_iter_mut(Axis(0)).zip(factors.iter()) {
                    row *= f;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                ga.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g * &x.mapv(sigmoid));
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g / x);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.rg(*a) {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*end]).assign(g);
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::MixRows(table, rows) => {
                if self.rg(*table) {
                    let mut gt = Mat::zeros(self.value(*table).dim());
                    for (r, recipe) in rows.iter().enumerate() {
                        let gr = g.row(r);
                        for &(i, w) in recipe {
                            gt.row_mut(i).scaled_add(w, &gr);
                        }
                    }
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::SumAll(a) => {
                let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::Attention(att) => self.attention_backward(att, g, grads),
            Op::SeqIn(sn) => self.seq_in_backward(sn, g, grads),
            Op::Bce(bn) => {
                let p = self.value(bn.pred);
                let total: f64 = bn.weights.iter().sum();
                let scale = g[[0, 0]] / total;
                let mut gp = Mat::zeros(p.dim());
                for (((gv, &pv), &y), &w) in gp
                    .iter_mut()
                    .zip(p.iter())
                    .zip(bn.targets.iter())
                    .zip(bn.weights.iter())
                {
                    if w == 0.0 || pv < bn.clamp || pv > 1.0 - bn.clamp {
                        continue;
                    }
                    *gv = -scale * w * (y / pv - (1.0 - y) / (1.0 - pv));
                }
                self.accumulate(grads, bn.pred, gp);
            }
        }
    }

    fn attention_backward(&self, att: &AttentionNode, g: &Mat, grads: &mut [Option<Mat>]) {
        let spec = &att.spec;
        let (bsz, t_len, heads) = (spec.batch, spec.seq_len, spec.heads);
        let qm = self.value(att.q).as_standard_layout().into_owned();
        let km = self.value(att.k).as_standard_layout().into_owned();
        let vm = self.value(att.v).as_standard_layout().into_owned();
        let gm = g.as_standard_layout().into_owned();
        let (qw, vw) = (qm.ncols(), vm.ncols());
        let dk = qw / heads;
        let dv = vw / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs, gs) = (
            qm.as_slice().unwrap(),
            km.as_slice().unwrap(),
            vm.as_slice().unwrap(),
            gm.as_slice().unwrap(),
        );
        let mut dq = Mat::zeros(qm.dim());
        let mut dk_m = Mat::zeros(km.dim());
        let mut dv_m = Mat::zeros(vm.dim());
        let mut drel = [0.0f64; 3];
        let mut dw = vec![0.0; t_len];
        {
            let dqs = dq.as_slice_mut().unwrap();
            let dks = dk_m.as_slice_mut().unwrap();
            let dvs = dv_m.as_slice_mut().unwrap();
            for b in 0..bsz {
                for h in 0..heads {
                    let wbase = (b * heads + h) * t_len * t_len;
                    for j in 0..t_len {
                        let n_keys = if spec.strict { j } else { j + 1 };
                        if n_keys == 0 {
                            continue;
                        }
                        let wrow = &att.weights[wbase + j * t_len..][..t_len];
                        let grow = &gs[(b * t_len + j) * vw + h * dv..][..dv];
                        let mut dot_wdw = 0.0;
                        for i in 0..n_keys {
                            let vrow_idx = (b * t_len + i) * vw + h * dv;
                            let mut acc = 0.0;
                            for c in 0..dv {
                                acc += grow[c] * vs[vrow_idx + c];
                                dvs[vrow_idx + c] += wrow[i] * grow[c];
                            }
                            dw[i] = acc;
                            dot_wdw += wrow[i] * acc;
                        }
                        let qrow_idx = (b * t_len + j) * qw + h * dk;
                        for i in 0..n_keys {
                            let ds = wrow[i] * (dw[i] - dot_wdw);
                            if ds == 0.0 {
                                continue;
                            }
                            if let Some(rel) = &spec.relation {
                                drel[rel[b * t_len * t_len + j * t_len + i] as usize] += ds;
                            }
                            let krow_idx = (b * t_len + i) * qw + h * dk;
                            let f = ds * scale;
                            for c in 0..dk {
                                dqs[qrow_idx + c] += f * ks[krow_idx + c];
                                dks[krow_idx + c] += f * qs[qrow_idx + c];
                            }
                        }
                    }
                }
            }
        }
        self.accumulate(grads, att.q, dq);
        self.accumulate(grads, att.k, dk_m);
        self.accumulate(grads, att.v, dv_m);
        if let Some(r) = att.relevance {
            if self.rg(r) {
                // logits carry ln(lambda); d ln(lambda) / d lambda = 1 / lambda
                let lam = self.value(r);
                let gr = Mat::from_shape_fn((1, 3), |(_, c)| drel[c] / lam[[0, c]]);
                self.accumulate(grads, r, gr);
            }
        }
    }

    fn seq_in_backward(&self, sn: &SeqInNode, g: &Mat, grads: &mut [Option<Mat>]) {
        let xm = self.value(sn.x);
        let (rows, d) = xm.dim();
        let gamma = self.value(sn.gamma);
        let p = self.value(sn.pad);
        let mut dx = Mat::zeros((rows, d));
        let mut dgamma = Mat::zeros((1, d));
        let mut dbeta = Mat::zeros((1, d));
        let mut dpad = Mat::zeros((1, d));
        let t_len = sn.seq_len;
        for (b, &len) in sn.lens.iter().enumerate() {
            let len = len.min(t_len);
            for c in 0..d {
                let gam = gamma[[0, c]];
                // Reverse cumulative sums of the per-step coefficients of the
                // statistics' gradient: d x_s += sum_{t>=s} (A_t + x_s * B_t).
                let mut sum_a = 0.0;
                let mut sum_b = 0.0;
                for t in (0..len).rev() {
                    let r = b * t_len + t;
                    let dy = g[[r, c]];
                    dgamma[[0, c]] += dy * sn.zhat[[r, c]];
                    dbeta[[0, c]] += dy;
                    let gz = dy * gam;
                    let sd = sn.std[[r, c]];
                    let mu = sn.mean[[r, c]];
                    let denom = sd + sn.eps;
                    let n = (t + 2) as f64;
                    let g_mu = -gz / denom;
                    let g_sd = -gz * (xm[[r, c]] - mu) / (denom * denom);
                    let g_var = if sd > 0.0 { g_sd / (2.0 * sd) } else { 0.0 };
                    sum_a += g_mu / n - 2.0 * g_var * mu / n;
                    sum_b += 2.0 * g_var / n;
                    dx[[r, c]] = gz / denom + sum_a + xm[[r, c]] * sum_b;
                }
                dpad[[0, c]] += sum_a + p[[0, c]] * sum_b;
            }
        }
        self.accumulate(grads, sn.x, dx);
        self.accumulate(grads, sn.gamma, dgamma);
        self.accumulate(grads, sn.beta, dbeta);
        self.accumulate(grads, sn.pad, dpad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_shape_vec((rows, cols), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_and_sum_gradients() {
        let mut g = Graph::new();
        let a = g.param(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(mat(2, 1, &[5.0, 6.0]));
        let c = g.matmul(a, b);
        let s = g.sum_all(c);
        assert_eq!(g.scalar(s), 17.0 + 39.0);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &mat(2, 2, &[5.0, 6.0, 5.0, 6.0]));
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn mix_rows_scatters_back() {
        let mut g = Graph::new();
        let t = g.param(mat(3, 1, &[1.0, 2.0, 4.0]));
        let m = g.mix_rows(t, Arc::new(vec![vec![(0, 0.5), (2, 0.5)], vec![], vec![(2, 1.0)]]));
        assert_eq!(g.value(m), &mat(3, 1, &[2.5, 0.0, 4.0]));
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(t).unwrap(), &mat(3, 1, &[0.5, 0.0, 1.5]));
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.param(Mat::from_elem((4, 1), 0.5));
        let l = g.bce(
            p,
            Arc::new(vec![1.0, 0.0, 1.0, 0.0]),
            Arc::new(vec![1.0; 4]),
            1e-7,
        );
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
