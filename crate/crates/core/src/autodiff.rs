//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! after their inputs, so reverse insertion order is a valid topological order
//! for [`Graph::backward`]. Composite operations that appear on hot paths
//! (attention, layer norm, the loss functions) are recorded as single fused
//! nodes with hand-written adjoints.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix, Real, View, ViewMut};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node inside a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: u64,
    index: usize,
}

/// Row layout of a padded batch for the attention operator.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    /// Number of sequences.
    pub batch: usize,
    /// Padded row count per sequence.
    pub width: usize,
    /// Valid (attendable) rows per sequence; pad rows follow.
    pub lengths: Vec<usize>,
    pub heads: usize,
    pub causal: bool,
}

impl AttentionLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j < self.lengths[b] && (!self.causal || j <= i)
    }
}

/// One inter-event interval contributing to the point-process likelihood.
#[derive(Clone, Debug)]
pub struct TppInterval<F> {
    /// Row of the score matrix holding `w_k . h + b_k` for the preceding event.
    pub row: usize,
    pub t_prev: F,
    pub t_next: F,
    /// Mark of the event closing the interval.
    pub mark: usize,
    /// Uniform draws in (0, 1) locating the Monte-Carlo points of the interval.
    pub samples: Vec<F>,
    /// Multiplier applied to the interval's whole contribution.
    pub weight: F,
}

/// Which intensity enters the event log-likelihood term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventTerm {
    /// `log lambda_{m_i}(t_i)`: the intensity of the observed mark.
    Marked,
    /// `log lambda(t_i)`: the total intensity, ignoring marks.
    Total,
}

enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Matrix<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: AttentionLayout,
        probs: Vec<F>,
    },
    GatherRows {
        src: NodeId,
        index: Vec<usize>,
    },
    Assemble {
        sources: Vec<NodeId>,
        map: Vec<Option<(usize, usize)>>,
    },
    ConcatCols(NodeId, NodeId),
    RowNormalize {
        x: NodeId,
        norms: Vec<F>,
    },
    Mercer {
        c: NodeId,
        omega: NodeId,
        times: Vec<F>,
    },
    Mtan {
        w: NodeId,
        times: Vec<F>,
    },
    /// Scalar-valued op whose local gradients were computed during the
    /// forward pass; backward only rescales them by the upstream gradient.
    Reduction {
        inputs: Vec<NodeId>,
        local: Vec<Matrix<F>>,
    },
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    graph: u64,
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Matrix<F>> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get(id.index).and_then(|g| g.as_ref())
    }
}

/// Tape of recorded operations.
pub struct Graph<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, NodeId>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> &Node<F> {
        assert_eq!(id.graph, self.id, "node belongs to a different graph");
        &self.nodes[id.index]
    }

    pub fn value(&self, id: NodeId) -> &Matrix<F> {
        &self.node(id).value
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        let id = NodeId {
            graph: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.node(i).needs_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Matrix<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn variable(&mut self, value: Matrix<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Named trainable leaf. Repeated calls with the same name return the same
    /// node, so a parameter used twice accumulates both contributions.
    pub fn param(&mut self, name: &str, value: &Matrix<F>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.variable(value.clone());
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// Copy of `x` with gradient flow blocked.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// Adds a `1 x n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(bv.cols(), xv.cols(), "bias width");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let g = self.any_grad(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), g)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    fn zip_values(&self, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Matrix<F> {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_values(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_values(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_values(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Gelu(a), g)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = F::lit(1e-5);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (rows, cols) = xv.shape();
        assert_eq!(gv.cols(), cols, "layer norm gamma width");
        assert_eq!(bv.cols(), cols, "layer norm beta width");
        let n = F::lit(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.data()[c] + bv.data()[c]);
            }
        }
        let g = self.any_grad(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            g,
        )
    }

    /// Multi-head scaled dot-product attention over a padded batch. `q`, `k`,
    /// `v` are `(batch * width) x d_model`; heads split the columns evenly.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: AttentionLayout) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (rows, d) = qv.shape();
        assert_eq!(rows, layout.batch * layout.width, "attention row layout");
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert_eq!(d % layout.heads, 0, "d_model divisible by heads");
        let dh = d / layout.heads;
        let w = layout.width;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut probs = vec![F::zero(); layout.batch * layout.heads * w * w];
        let mut out = Matrix::zeros(rows, d);
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                let off = b * w * d + h * dh;
                let pbase = (b * layout.heads + h) * w * w;
                let p = &mut probs[pbase..pbase + w * w];
                gemm(
                    scale,
                    head_view(qv.data(), off, w, dh, d),
                    head_view(kv.data(), off, w, dh, d).t(),
                    F::zero(),
                    ViewMut {
                        data: p,
                        offset: 0,
                        rows: w,
                        cols: w,
                        rs: w,
                        cs: 1,
                    },
                );
                for i in 0..w {
                    let row = &mut p[i * w..(i + 1) * w];
                    let mut max = F::neg_infinity();
                    for (j, &s) in row.iter().enumerate() {
                        if layout.allowed(b, i, j) && s > max {
                            max = s;
                        }
                    }
                    let mut total = F::zero();
                    for (j, s) in row.iter_mut().enumerate() {
                        if layout.allowed(b, i, j) {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = F::zero();
                        }
                    }
                    for s in row.iter_mut() {
                        *s = *s / total;
                    }
                }
                gemm(
                    F::one(),
                    View {
                        data: p,
                        offset: 0,
                        rows: w,
                        cols: w,
                        rs: w,
                        cs: 1,
                    },
                    head_view(vv.data(), off, w, dh, d),
                    F::zero(),
                    ViewMut {
                        data: out.data_mut(),
                        offset: off,
                        rows: w,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        let g = self.any_grad(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            g,
        )
    }

    /// `out[i] = src[index[i]]`.
    pub fn gather_rows(&mut self, src: NodeId, index: Vec<usize>) -> NodeId {
        let sv = self.value(src);
        let cols = sv.cols();
        let mut out = Matrix::zeros(index.len(), cols);
        for (i, &r) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(sv.row(r));
        }
        let g = self.any_grad(&[src]);
        self.push(out, Op::GatherRows { src, index }, g)
    }

    /// Builds a matrix whose row `r` is `sources[s].row(i)` for
    /// `map[r] = Some((s, i))`, or zeros for `None`. All sources share a width.
    pub fn assemble(&mut self, sources: Vec<NodeId>, map: Vec<Option<(usize, usize)>>, cols: usize) -> NodeId {
        let mut out = Matrix::zeros(map.len(), cols);
        for (r, m) in map.iter().enumerate() {
            if let Some((s, i)) = *m {
                let sv = self.value(sources[s]);
                assert_eq!(sv.cols(), cols, "assemble source width");
                out.row_mut(r).copy_from_slice(sv.row(i));
            }
        }
        let g = self.any_grad(&sources);
        self.push(out, Op::Assemble { sources, map }, g)
    }

    /// Stacks the rows of several equal-width nodes.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut map = Vec::new();
        for (s, &p) in parts.iter().enumerate() {
            for i in 0..self.value(p).rows() {
                map.push(Some((s, i)));
            }
        }
        self.assemble(parts.to_vec(), map, cols)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rows(), bv.rows(), "concat_cols row mismatch");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Matrix::zeros(av.rows(), ca + cb);
        for r in 0..av.rows() {
            out.row_mut(r)[..ca].copy_from_slice(av.row(r));
            out.row_mut(r)[ca..].copy_from_slice(bv.row(r));
        }
        let g = self.any_grad(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), g)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let floor = F::lit(1e-12);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|&v| v * v).sum::<F>().sqrt().max(floor);
            norms.push(n);
            for v in out.row_mut(r) {
                *v = *v / n;
            }
        }
        let g = self.any_grad(&[x]);
        self.push(out, Op::RowNormalize { x, norms }, g)
    }

    /// Mercer time features: column 0 is `sqrt(c_0)`; column `2j-1` is
    /// `sqrt(c_{2j-1}) cos(j pi t / omega)` and column `2j` is
    /// `sqrt(c_{2j}) sin(j pi t / omega)`.
    pub fn mercer_time(&mut self, c: NodeId, omega: NodeId, times: Vec<F>) -> NodeId {
        let cv = self.value(c);
        let om = self.value(omega).item();
        let d = cv.cols();
        let mut out = Matrix::zeros(times.len(), d);
        for (r, &t) in times.iter().enumerate() {
            for i in 0..d {
                let amp = safe_sqrt(cv.data()[i]);
                out.set(r, i, amp * mercer_basis(i, t, om));
            }
        }
        let g = self.any_grad(&[c, omega]);
        self.push(out, Op::Mercer { c, omega, times }, g)
    }

    /// mTAN-style features: `w_0 t` then `sin(w_i t)`.
    pub fn mtan_time(&mut self, w: NodeId, times: Vec<F>) -> NodeId {
        let wv = self.value(w);
        let d = wv.cols();
        let mut out = Matrix::zeros(times.len(), d);
        for (r, &t) in times.iter().enumerate() {
            for i in 0..d {
                let wi = wv.data()[i];
                out.set(r, i, if i == 0 { wi * t } else { (wi * t).sin() });
            }
        }
        let g = self.any_grad(&[w]);
        self.push(out, Op::Mtan { w, times }, g)
    }

    fn reduction(&mut self, value: F, inputs: Vec<NodeId>, local: Vec<Matrix<F>>) -> NodeId {
        let g = self.any_grad(&inputs);
        self.push(Matrix::scalar(value), Op::Reduction { inputs, local }, g)
    }

    /// `sum_r weights[r] * sum_c x[r, c]`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[F]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(weights.len(), xv.rows(), "one weight per row");
        let mut total = F::zero();
        let mut local = Matrix::zeros(xv.rows(), xv.cols());
        for (r, &w) in weights.iter().enumerate() {
            total += w * xv.row(r).iter().copied().sum::<F>();
            for v in local.row_mut(r) {
                *v = w;
            }
        }
        self.reduction(total, vec![x], vec![local])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let w = vec![F::one(); self.value(x).rows()];
        self.weighted_sum(x, &w)
    }

    /// Mean binary cross-entropy with logits. `logits` is `n x 1`.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[F]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logits but {} labels",
                lv.len(),
                labels.len()
            )));
        }
        let (loss, grad) = bce_with_logits(lv.data(), labels);
        let local = Matrix::from_vec(lv.rows(), lv.cols(), grad);
        Ok(self.reduction(loss, vec![logits], vec![local]))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logit rows but {} targets",
                lv.rows(),
                targets.len()
            )));
        }
        let n = F::lit(targets.len().max(1) as f64);
        let mut loss = F::zero();
        let mut local = Matrix::zeros(lv.rows(), lv.cols());
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[t];
            for (c, g) in local.row_mut(r).iter_mut().enumerate() {
                let p = (row[c] - lse).exp();
                *g = (p - if c == t { F::one() } else { F::zero() }) / n;
            }
        }
        Ok(self.reduction(loss / n, vec![logits], vec![local]))
    }

    /// NT-Xent over consecutive groups of `group` rows of `z`, with raw dot
    /// product similarity scaled by `1 / eta`.
    pub fn nt_xent(&mut self, z: NodeId, group: usize, eta: F) -> Result<NodeId> {
        let (loss, grad, _) = nt_xent(self.value(z), group, eta)?;
        Ok(self.reduction(loss, vec![z], vec![grad]))
    }

    /// Point-process negative log-likelihood with softplus intensities
    /// `softplus(alpha_k (t - t_prev) / t_prev + scores[row, k])`.
    pub fn tpp_nll(&mut self, scores: NodeId, alpha: NodeId, intervals: &[TppInterval<F>], term: EventTerm) -> NodeId {
        let (loss, gs, ga) = tpp_nll(self.value(scores), self.value(alpha), intervals, term);
        self.reduction(loss, vec![scores, alpha], vec![gs, ga])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(Error::NoGraph);
        }
        if self.nodes[loss.index].value.shape() != (1, 1) {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Matrix::scalar(F::one()));
        for idx in (0..=loss.index).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { graph: self.id, grads })
    }

    /// Gradient of every named parameter; parameters that did not influence
    /// the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients<F>) -> BTreeMap<String, Matrix<F>> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = grads.get(id).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(id).shape();
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }

    fn propagate(&self, node: &Node<F>, gout: &Matrix<F>, grads: &mut [Option<Matrix<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.node(*a).needs_grad {
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    gemm(F::one(), gout.view(), bv.view().t(), F::zero(), ga.view_mut());
                    accumulate(grads, *a, ga);
                }
                if self.node(*b).needs_grad {
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(F::one(), av.view().t(), gout.view(), F::zero(), gb.view_mut());
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if self.node(*x).needs_grad {
                    accumulate(grads, *x, gout.clone());
                }
                if self.node(*b).needs_grad {
                    let mut gb = Matrix::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (acc, &g) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *acc += g;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.node(*a).needs_grad {
                    accumulate(grads, *a, gout.clone());
                }
                if self.node(*b).needs_grad {
                    accumulate(grads, *b, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.node(*a).needs_grad {
                    accumulate(grads, *a, gout.clone());
                }
                if self.node(*b).needs_grad {
                    accumulate(grads, *b, gout.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.node(*a).needs_grad {
                    let data = gout.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, Matrix::from_vec(av.rows(), av.cols(), data));
                }
                if self.node(*b).needs_grad {
                    let data = gout.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, Matrix::from_vec(bv.rows(), bv.cols(), data));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, gout.map(|g| g * s));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let data = gout
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect();
                accumulate(grads, *a, Matrix::from_vec(av.rows(), av.cols(), data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => self.layer_norm_backward(*x, *gamma, *beta, xhat, rstd, gout, grads),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, gout, grads),
            Op::GatherRows { src, index } => {
                let sv = self.value(*src);
                let mut gs = Matrix::zeros(sv.rows(), sv.cols());
                for (i, &r) in index.iter().enumerate() {
                    for (acc, &g) in gs.row_mut(r).iter_mut().zip(gout.row(i)) {
                        *acc += g;
                    }
                }
                accumulate(grads, *src, gs);
            }
            Op::Assemble { sources, map } => {
                let mut parts: Vec<Option<Matrix<F>>> = sources
                    .iter()
                    .map(|&s| {
                        self.node(s).needs_grad.then(|| {
                            let (r, c) = self.value(s).shape();
                            Matrix::zeros(r, c)
                        })
                    })
                    .collect();
                for (r, m) in map.iter().enumerate() {
                    if let Some((s, i)) = *m {
                        if let Some(p) = parts[s].as_mut() {
                            for (acc, &g) in p.row_mut(i).iter_mut().zip(gout.row(r)) {
                                *acc += g;
                            }
                        }
                    }
                }
                for (s, p) in sources.iter().zip(parts) {
                    if let Some(p) = p {
                        accumulate(grads, *s, p);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = gout.rows();
                if self.node(*a).needs_grad {
                    let mut ga = Matrix::zeros(rows, ca);
                    for r in 0..rows {
                        ga.row_mut(r).copy_from_slice(&gout.row(r)[..ca]);
                    }
                    accumulate(grads, *a, ga);
                }
                if self.node(*b).needs_grad {
                    let mut gb = Matrix::zeros(rows, cb);
                    for r in 0..rows {
                        gb.row_mut(r).copy_from_slice(&gout.row(r)[ca..]);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::RowNormalize { x, norms } => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = gout.row(r);
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..y.cols() {
                        gx.set(r, c, (gr[c] - yr[c] * dot) / norms[r]);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Mercer { c, omega, times } => {
                let cv = self.value(*c);
                let om = self.value(*omega).item();
                let d = cv.cols();
                let mut gc = Matrix::zeros(1, d);
                let mut gom = F::zero();
                for (r, &t) in times.iter().enumerate() {
                    for i in 0..d {
                        let g = gout.get(r, i);
                        let amp = safe_sqrt(cv.data()[i]);
                        let basis = mercer_basis(i, t, om);
                        gc.data_mut()[i] += g * basis / (F::lit(2.0) * amp);
                        if i > 0 {
                            let j = F::lit(i.div_ceil(2) as f64);
                            let theta = j * F::lit(std::f64::consts::PI) * t / om;
                            let dtheta = -theta / om;
                            let dbasis = if i % 2 == 1 {
                                -theta.sin() * dtheta
                            } else {
                                theta.cos() * dtheta
                            };
                            gom += g * amp * dbasis;
                        }
                    }
                }
                if self.node(*c).needs_grad {
                    accumulate(grads, *c, gc);
                }
                if self.node(*omega).needs_grad {
                    accumulate(grads, *omega, Matrix::scalar(gom));
                }
            }
            Op::Mtan { w, times } => {
                let wv = self.value(*w);
                let d = wv.cols();
                let mut gw = Matrix::zeros(1, d);
                for (r, &t) in times.iter().enumerate() {
                    for i in 0..d {
                        let g = gout.get(r, i);
                        let wi = wv.data()[i];
                        gw.data_mut()[i] += if i == 0 { g * t } else { g * t * (wi * t).cos() };
                    }
                }
                accumulate(grads, *w, gw);
            }
            Op::Reduction { inputs, local } => {
                let g = gout.item();
                for (&inp, l) in inputs.iter().zip(local) {
                    if self.node(inp).needs_grad {
                        accumulate(grads, inp, l.map(|x| x * g));
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: &Matrix<F>,
        rstd: &[F],
        gout: &Matrix<F>,
        grads: &mut [Option<Matrix<F>>],
    ) {
        let gv = self.value(gamma);
        let (rows, cols) = xhat.shape();
        let n = F::lit(cols as f64);
        if self.node(gamma).needs_grad || self.node(beta).needs_grad {
            let mut gg = Matrix::zeros(1, cols);
            let mut gb = Matrix::zeros(1, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let g = gout.get(r, c);
                    gg.data_mut()[c] += g * xhat.get(r, c);
                    gb.data_mut()[c] += g;
                }
            }
            if self.node(gamma).needs_grad {
                accumulate(grads, gamma, gg);
            }
            if self.node(beta).needs_grad {
                accumulate(grads, beta, gb);
            }
        }
        if self.node(x).needs_grad {
            let mut gx = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let mut mean_d = F::zero();
                let mut mean_dx = F::zero();
                for c in 0..cols {
                    let d = gout.get(r, c) * gv.data()[c];
                    mean_d += d;
                    mean_dx += d * xhat.get(r, c);
                }
                mean_d = mean_d / n;
                mean_dx = mean_dx / n;
                for c in 0..cols {
                    let d = gout.get(r, c) * gv.data()[c];
                    gx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                }
            }
            accumulate(grads, x, gx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &AttentionLayout,
        probs: &[F],
        gout: &Matrix<F>,
        grads: &mut [Option<Matrix<F>>],
    ) {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (rows, d) = qv.shape();
        let dh = d / layout.heads;
        let w = layout.width;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut gq = Matrix::zeros(rows, d);
        let mut gk = Matrix::zeros(rows, d);
        let mut gvv = Matrix::zeros(rows, d);
        let mut dp = vec![F::zero(); w * w];
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                let off = b * w * d + h * dh;
                let pbase = (b * layout.heads + h) * w * w;
                let p = &probs[pbase..pbase + w * w];
                let pview = View {
                    data: p,
                    offset: 0,
                    rows: w,
                    cols: w,
                    rs: w,
                    cs: 1,
                };
                // dV = P^T dO
                gemm(
                    F::one(),
                    pview.t(),
                    head_view(gout.data(), off, w, dh, d),
                    F::zero(),
                    head_view_mut(gvv.data_mut(), off, w, dh, d),
                );
                // dP = dO V^T
                gemm(
                    F::one(),
                    head_view(gout.data(), off, w, dh, d),
                    head_view(vv.data(), off, w, dh, d).t(),
                    F::zero(),
                    ViewMut {
                        data: &mut dp,
                        offset: 0,
                        rows: w,
                        cols: w,
                        rs: w,
                        cs: 1,
                    },
                );
                // dS = P * (dP - rowsum(P * dP))
                for i in 0..w {
                    let pr = &p[i * w..(i + 1) * w];
                    let dr = &mut dp[i * w..(i + 1) * w];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot);
                    }
                }
                let ds = View {
                    data: &dp,
                    offset: 0,
                    rows: w,
                    cols: w,
                    rs: w,
                    cs: 1,
                };
                gemm(
                    scale,
                    ds,
                    head_view(kv.data(), off, w, dh, d),
                    F::zero(),
                    head_view_mut(gq.data_mut(), off, w, dh, d),
                );
                gemm(
                    scale,
                    ds.t(),
                    head_view(qv.data(), off, w, dh, d),
                    F::zero(),
                    head_view_mut(gk.data_mut(), off, w, dh, d),
                );
            }
        }
        if self.node(q).needs_grad {
            accumulate(grads, q, gq);
        }
        if self.node(k).needs_grad {
            accumulate(grads, k, gk);
        }
        if self.node(v).needs_grad {
            accumulate(grads, v, gvv);
        }
    }
}

fn head_view<F>(data: &[F], offset: usize, rows: usize, cols: usize, stride: usize) -> View<'_, F> {
    View {
        data,
        offset,
        rows,
        cols,
        rs: stride,
        cs: 1,
    }
}

fn head_view_mut<F>(data: &mut [F], offset: usize, rows: usize, cols: usize, stride: usize) -> ViewMut<'_, F> {
    ViewMut {
        data,
        offset,
        rows,
        cols,
        rs: stride,
        cs: 1,
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Matrix<F>>], id: NodeId, g: Matrix<F>) {
    match &mut grads[id.index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<F: Real>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(0.044715);
    let u = k * (x + c * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(0.044715);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x)
}

fn safe_sqrt<F: Real>(c: F) -> F {
    c.max(F::lit(1e-12)).sqrt()
}

fn mercer_basis<F: Real>(i: usize, t: F, omega: F) -> F {
    if i == 0 {
        return F::one();
    }
    let j = F::lit(i.div_ceil(2) as f64);
    let theta = j * F::lit(std::f64::consts::PI) * t / omega;
    if i % 2 == 1 {
        theta.cos()
    } else {
        theta.sin()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<F: Real>(x: F) -> F {
    if x > F::lit(30.0) {
        x
    } else if x < F::lit(-30.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Mean BCE-with-logits and its gradient with respect to each logit.
pub fn bce_with_logits<F: Real>(logits: &[F], labels: &[F]) -> (F, Vec<F>) {
    let n = F::lit(logits.len().max(1) as f64);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        loss += x.max(F::zero()) - x * y + (-x.abs()).exp().ln_1p();
        grad.push((sigmoid(x) - y) / n);
    }
    (loss / n, grad)
}

/// NT-Xent value, gradient and the number of ordered positive pairs visited.
pub fn nt_xent<F: Real>(z: &Matrix<F>, group: usize, eta: F) -> Result<(F, Matrix<F>, usize)> {
    let n = z.rows();
    if group < 2 || n == 0 || !n.is_multiple_of(group) {
        return Err(Error::Shape(format!(
            "{n} embeddings cannot be split into groups of {group}"
        )));
    }
    if eta <= F::zero() {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let groups = n / group;
    let mut sim = z.matmul(&z.transpose());
    sim.scale(F::one() / eta);
    let pairs_per_anchor = group - 1;
    let coef = F::one() / F::lit((groups * group * pairs_per_anchor) as f64);
    let mut loss = F::zero();
    let mut dsim = Matrix::zeros(n, n);
    let mut pairs = 0usize;
    for a in 0..n {
        let row = sim.row(a);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &s)| s)
            .fold(F::neg_infinity(), F::max);
        let total: F = row
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &s)| (s - max).exp())
            .sum();
        let lse = max + total.ln();
        let ga = a / group;
        for p in ga * group..(ga + 1) * group {
            if p == a {
                continue;
            }
            loss += coef * (lse - row[p]);
            dsim.set(a, p, dsim.get(a, p) - coef);
            pairs += 1;
        }
        let w = coef * F::lit(pairs_per_anchor as f64);
        for b in 0..n {
            if b != a {
                let sm = (row[b] - lse).exp();
                dsim.set(a, b, dsim.get(a, b) + w * sm);
            }
        }
    }
    // dZ = (dS + dS^T) Z / eta
    let mut sym = dsim.clone();
    sym.add_assign(&dsim.transpose());
    let mut dz = sym.matmul(z);
    dz.scale(F::one() / eta);
    Ok((loss, dz, pairs))
}

/// Value and gradients (scores, alpha) of the point-process NLL.
pub fn tpp_nll<F: Real>(
    scores: &Matrix<F>,
    alpha: &Matrix<F>,
    intervals: &[TppInterval<F>],
    term: EventTerm,
) -> (F, Matrix<F>, Matrix<F>) {
    let k = scores.cols();
    assert_eq!(alpha.cols(), k, "one alpha per type");
    let a = alpha.data();
    let mut loss = F::zero();
    let mut gs = Matrix::zeros(scores.rows(), k);
    let mut ga = Matrix::zeros(1, k);
    let mut lam = vec![F::zero(); k];
    let mut sig = vec![F::zero(); k];
    for iv in intervals {
        let s = scores.row(iv.row);
        let tau = iv.t_next - iv.t_prev;
        // event term at t_next
        let delta = tau / iv.t_prev;
        for j in 0..k {
            let x = a[j] * delta + s[j];
            lam[j] = softplus(x);
            sig[j] = sigmoid(x);
        }
        match term {
            EventTerm::Marked => {
                let m = iv.mark;
                loss -= iv.weight * lam[m].ln();
                let dx = -iv.weight * sig[m] / lam[m];
                gs.row_mut(iv.row)[m] += dx;
                ga.data_mut()[m] += dx * delta;
            }
            EventTerm::Total => {
                let total: F = lam.iter().copied().sum();
                loss -= iv.weight * total.ln();
                for j in 0..k {
                    let dx = -iv.weight * sig[j] / total;
                    gs.row_mut(iv.row)[j] += dx;
                    ga.data_mut()[j] += dx * delta;
                }
            }
        }
        // Monte-Carlo estimate of the integral over the interval
        if iv.samples.is_empty() {
            continue;
        }
        let wmc = iv.weight * tau / F::lit(iv.samples.len() as f64);
        for &u in &iv.samples {
            let delta = u * tau / iv.t_prev;
            for j in 0..k {
                let x = a[j] * delta + s[j];
                loss += wmc * softplus(x);
                let dx = wmc * sigmoid(x);
                gs.row_mut(iv.row)[j] += dx;
                ga.data_mut()[j] += dx * delta;
            }
        }
    }
    (loss, gs, ga)
}
