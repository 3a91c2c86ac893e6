//! Wengert-list tape: forward ops append nodes, `backward` replays them in
//! reverse and accumulates gradients.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{numel, Tensor};
use crate::error::{Result, SvitError};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Mean {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape(Var),
    GatherRows {
        src: Var,
        index: Vec<Option<usize>>,
        width: usize,
    },
    ConcatRows(Var, Var),
    Pick {
        x: Var,
        index: usize,
    },
    SplitHeads {
        x: Var,
        layout: HeadLayout,
        part: usize,
    },
    MergeHeads {
        x: Var,
        layout: HeadLayout,
    },
}

/// Geometry of a fused `[batch·seq, parts·heads·dim]` projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
    pub parts: usize,
}

impl HeadLayout {
    #[inline]
    fn src_index(&self, b: usize, h: usize, l: usize, e: usize, part: usize) -> usize {
        let width = self.parts * self.heads * self.dim;
        (b * self.seq + l) * width + part * self.heads * self.dim + h * self.dim + e
    }

    #[inline]
    fn head_index(&self, b: usize, h: usize, l: usize, e: usize) -> usize {
        ((b * self.heads + h) * self.seq + l) * self.dim + e
    }
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed operations in topological order.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    visits: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(SvitError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_SCALE) * (x + T::lit(GELU_COEF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_SCALE);
    let a = T::lit(GELU_COEF);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            visits: 0,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes visited by the most recent backward pass.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    /// Drops all nodes and gradients so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
        self.visits = 0;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape; gradient tracking follows its flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.new_leaf(shape, data, false)
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.new_leaf(shape, data, true)
    }

    fn new_leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(SvitError::Dimension {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by `backward`, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Snapshot of a node as a standalone tensor, gradient included.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone())
            .expect("tape nodes are shape-consistent");
        t.set_requires_grad(node.requires_grad);
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g).expect("gradient matches node shape");
        }
        t
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SvitError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SvitError::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched matmul over the leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = sa.len() != 3
            || sb.len() != 3
            || sa[0] != sb[0]
            || (!trans_b && sa[2] != sb[1])
            || (trans_b && sa[2] != sb[2]);
        if bad {
            return Err(SvitError::Dimension {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); groups * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for g in 0..groups {
                let ag = &av[g * m * k..(g + 1) * m * k];
                let bg = &bv[g * k * n..(g + 1) * k * n];
                let cg = &mut out[g * m * n..(g + 1) * m * n];
                if trans_b {
                    gemm_nt(ag, bg, cg, m, k, n);
                } else {
                    gemm_nn(ag, bg, cg, m, k, n);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let op = Op::Bmm {
            a,
            b,
            groups,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(vec![groups, m, n], out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    fn check_row(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let (sx, sr) = (self.shape(x), self.shape(r));
        match (sx.last(), sr) {
            (Some(&n), [m]) if n == *m => Ok(n),
            _ => Err(SvitError::Dimension {
                op,
                lhs: sx.to_vec(),
                rhs: sr.to_vec(),
            }),
        }
    }

    /// `x[..., n] + r[n]`, broadcasting `r` over leading axes.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.check_row("add_row", x, r)?;
        let rv = self.value(r);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, r), rg))
    }

    /// `x[..., n] * r[n]`, broadcasting `r` over leading axes.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let n = self.check_row("mul_row", x, r)?;
        let rv = self.value(r);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * rv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow(x, r), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        let xv = self.value(x);
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Mean { x, outer, n, inner }, rg))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..n {
                    max = max.max(xv[at(a)]);
                }
                let mut total = T::zero();
                for a in 0..n {
                    let e = (xv[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                let inv = T::one() / total;
                for a in 0..n {
                    out[at(a)] *= inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::Softmax { x, outer, n, inner },
            rg,
        ))
    }

    /// Normalizes to zero mean and unit (biased) variance along `axis`,
    /// without affine parameters.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(SvitError::contract("layer_norm eps must be positive"));
        }
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        let xv = self.value(x);
        let nf = T::lit(n as f64);
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mean = (0..n).map(|a| xv[at(a)]).sum::<T>() / nf;
                let var = (0..n)
                    .map(|a| {
                        let d = xv[at(a)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    / nf;
                let r = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for a in 0..n {
                    out[at(a)] = (xv[at(a)] - mean) * r;
                }
            }
        }
        let rg = self.rg(x);
        let op = Op::LayerNorm {
            x,
            outer,
            n,
            inner,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(SvitError::Dimension {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if b == 0 {
            return Err(SvitError::contract("cross_entropy over an empty batch"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(SvitError::Label { label, classes: c });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        loss /= T::lit(b as f64);
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), vec![loss], op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(SvitError::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Builds `[index.len(), width]` from rows of a 2-D `src`; `None` rows
    /// are zero.
    pub fn gather_rows(&mut self, src: Var, index: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(src);
        if shape.len() != 2 {
            return Err(SvitError::Dimension {
                op: "gather_rows",
                lhs: shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&Some(r)) = index.iter().find(|r| matches!(r, Some(r) if *r >= rows)) {
            return Err(SvitError::contract(format!(
                "gather_rows index {r} out of range for {rows} rows"
            )));
        }
        let sv = self.value(src);
        let mut out = vec![T::zero(); index.len() * width];
        for (dst, r) in index.iter().enumerate() {
            if let Some(r) = r {
                out[dst * width..(dst + 1) * width]
                    .copy_from_slice(&sv[r * width..(r + 1) * width]);
            }
        }
        let rg = self.rg(src);
        let op = Op::GatherRows {
            src,
            index: index.to_vec(),
            width,
        };
        Ok(self.push(vec![index.len(), width], out, op, rg))
    }

    /// Stacks two 2-D tensors with equal width.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(SvitError::Dimension {
                op: "concat_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::ConcatRows(a, b), rg))
    }

    /// Single element (flat row-major index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let len = self.value(x).len();
        if index >= len {
            return Err(SvitError::contract(format!(
                "pick index {index} out of range for {len} elements"
            )));
        }
        let v = self.value(x)[index];
        let rg = self.rg(x);
        Ok(self.push(Vec::new(), vec![v], Op::Pick { x, index }, rg))
    }

    /// Extracts projection `part` of a fused `[batch·seq, parts·heads·dim]`
    /// tensor as `[batch·heads, seq, dim]`.
    pub fn split_heads(&mut self, x: Var, layout: HeadLayout, part: usize) -> Result<Var> {
        let width = layout.parts * layout.heads * layout.dim;
        let want = [layout.batch * layout.seq, width];
        if self.shape(x) != want || part >= layout.parts {
            return Err(SvitError::Dimension {
                op: "split_heads",
                lhs: self.shape(x).to_vec(),
                rhs: want.to_vec(),
            });
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); layout.batch * layout.seq * layout.heads * layout.dim];
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                for l in 0..layout.seq {
                    let s = layout.src_index(b, h, l, 0, part);
                    let d = layout.head_index(b, h, l, 0);
                    out[d..d + layout.dim].copy_from_slice(&xv[s..s + layout.dim]);
                }
            }
        }
        let rg = self.rg(x);
        let shape = vec![layout.batch * layout.heads, layout.seq, layout.dim];
        Ok(self.push(shape, out, Op::SplitHeads { x, layout, part }, rg))
    }

    /// Inverse of [`Tape::split_heads`] for one part: `[batch·heads, seq,
    /// dim]` to `[batch·seq, heads·dim]`.
    pub fn merge_heads(&mut self, x: Var, layout: HeadLayout) -> Result<Var> {
        let layout = HeadLayout { parts: 1, ..layout };
        let want = [layout.batch * layout.heads, layout.seq, layout.dim];
        if self.shape(x) != want {
            return Err(SvitError::Dimension {
                op: "merge_heads",
                lhs: self.shape(x).to_vec(),
                rhs: want.to_vec(),
            });
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..layout.batch {
            for h in 0..layout.heads {
                for l in 0..layout.seq {
                    let s = layout.head_index(b, h, l, 0);
                    let d = layout.src_index(b, h, l, 0, 0);
                    out[d..d + layout.dim].copy_from_slice(&xv[s..s + layout.dim]);
                }
            }
        }
        let rg = self.rg(x);
        let shape = vec![layout.batch * layout.seq, layout.heads * layout.dim];
        Ok(self.push(shape, out, Op::MergeHeads { x, layout }, rg))
    }

    /// Reverse pass from a scalar `loss`. A tape supports one backward
    /// pass; call [`Tape::reset`] before recording again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(SvitError::contract(
                "backward already ran on this tape; reset it first",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(SvitError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.visits = 0;
        if self.rg(loss) {
            self.grads[loss.0] = Some(vec![T::one()]);
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..nodes.len()).rev() {
            self.visits += 1;
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, &nodes[i], &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, grads, a) {
                gemm_nt(g, val(b), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                gemm_tn(val(a), g, gb, k, m, n);
            }
        }
        &Op::Bmm {
            a,
            b,
            groups,
            m,
            k,
            n,
            trans_b,
        } => {
            if let Some(ga) = slot(nodes, grads, a) {
                let bv = val(b);
                for grp in 0..groups {
                    let gg = &g[grp * m * n..(grp + 1) * m * n];
                    let bg = &bv[grp * k * n..(grp + 1) * k * n];
                    let out = &mut ga[grp * m * k..(grp + 1) * m * k];
                    if trans_b {
                        gemm_nn(gg, bg, out, m, n, k);
                    } else {
                        gemm_nt(gg, bg, out, m, n, k);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let av = val(a);
                for grp in 0..groups {
                    let gg = &g[grp * m * n..(grp + 1) * m * n];
                    let ag = &av[grp * m * k..(grp + 1) * m * k];
                    let out = &mut gb[grp * k * n..(grp + 1) * k * n];
                    if trans_b {
                        gemm_tn(gg, ag, out, n, m, k);
                    } else {
                        gemm_tn(ag, gg, out, k, m, n);
                    }
                }
            }
        }
        &Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(val(b)) {
                    *x += y * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((x, &y), &o) in gb.iter_mut().zip(g).zip(val(a)) {
                    *x += y * o;
                }
            }
        }
        &Op::AddRow(x, r) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            if let Some(gr) = slot(nodes, grads, r) {
                let n = gr.len();
                for (i, &gi) in g.iter().enumerate() {
                    gr[i % n] += gi;
                }
            }
        }
        &Op::MulRow(x, r) => {
            let n = nodes[r.0].value.len();
            if let Some(gx) = slot(nodes, grads, x) {
                let rv = val(r);
                for (i, (a, &gi)) in gx.iter_mut().zip(g).enumerate() {
                    *a += gi * rv[i % n];
                }
            }
            if let Some(gr) = slot(nodes, grads, r) {
                let xv = val(x);
                for (i, &gi) in g.iter().enumerate() {
                    gr[i % n] += gi * xv[i];
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c);
            }
        }
        &Op::Relu(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(val(x)) {
                    if xv > T::zero() {
                        *a += b;
                    }
                }
            }
        }
        &Op::Gelu(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for ((a, &b), &xv) in gx.iter_mut().zip(g).zip(val(x)) {
                    *a += b * gelu_grad(xv);
                }
            }
        }
        &Op::Mean { x, outer, n, inner } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let inv = T::one() / T::lit(n as f64);
                for o in 0..outer {
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        for i in 0..inner {
                            gx[base + i] += g[o * inner + i] * inv;
                        }
                    }
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        &Op::Softmax { x, outer, n, inner } => {
            if let Some(gx) = slot(nodes, grads, x) {
                let y = &node.value;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let dot: T = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                        for a in 0..n {
                            gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            outer,
            n,
            inner,
            inv_std,
        } => {
            let (outer, n, inner) = (*outer, *n, *inner);
            if let Some(gx) = slot(nodes, grads, *x) {
                let y = &node.value;
                let nf = T::lit(n as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let sum_g: T = (0..n).map(|a| g[at(a)]).sum();
                        let sum_gy: T = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                        let r = inv_std[o * inner + i] / nf;
                        for a in 0..n {
                            gx[at(a)] += r * (nf * g[at(a)] - sum_g - y[at(a)] * sum_gy);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / T::lit(b as f64);
                for r in 0..b {
                    for j in 0..c {
                        let target = if labels[r] == j { T::one() } else { T::zero() };
                        gl[r * c + j] += (probs[r * c + j] - target) * scale;
                    }
                }
            }
        }
        &Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
        Op::GatherRows { src, index, width } => {
            let width = *width;
            if let Some(gs) = slot(nodes, grads, *src) {
                for (dst, r) in index.iter().enumerate() {
                    if let Some(r) = r {
                        let from = &g[dst * width..(dst + 1) * width];
                        for (a, &b) in gs[r * width..(r + 1) * width].iter_mut().zip(from) {
                            *a += b;
                        }
                    }
                }
            }
        }
        &Op::ConcatRows(a, b) => {
            let split = nodes[a.0].value.len();
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().zip(&g[..split]).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                gb.iter_mut().zip(&g[split..]).for_each(|(x, &y)| *x += y);
            }
        }
        &Op::Pick { x, index } => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx[index] += g[0];
            }
        }
        &Op::SplitHeads { x, layout, part } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for b in 0..layout.batch {
                    for h in 0..layout.heads {
                        for l in 0..layout.seq {
                            let s = layout.src_index(b, h, l, 0, part);
                            let d = layout.head_index(b, h, l, 0);
                            for e in 0..layout.dim {
                                gx[s + e] += g[d + e];
                            }
                        }
                    }
                }
            }
        }
        &Op::MergeHeads { x, layout } => {
            if let Some(gx) = slot(nodes, grads, x) {
                for b in 0..layout.batch {
                    for h in 0..layout.heads {
                        for l in 0..layout.seq {
                            let s = layout.head_index(b, h, l, 0);
                            let d = layout.src_index(b, h, l, 0, 0);
                            for e in 0..layout.dim {
                                gx[s + e] += g[d + e];
                            }
                        }
                    }
                }
            }
        }
    }
}
