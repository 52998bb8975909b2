//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes; each operation records its
//! output values plus enough bookkeeping to push gradients back to its
//! parents. Node ids are topologically ordered by construction, so the
//! backward pass is a single reverse sweep. Gradients live in a buffer
//! parallel to the node arena, which keeps borrows of node values and
//! gradient accumulation disjoint.
//!
//! The op set is exactly what the model needs; every backward rule is
//! verified against central differences by the gradient checker.

use std::sync::Arc;

use crate::rng::RngStream;
use crate::tensor::{dropout_coeffs, kernels, numel, Mode, Scalar, Tensor, TensorError};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf {
        requires_grad: bool,
    },
    /// `x [..., k] @ w [k, n]`, leading axes flattened to rows.
    Matmul {
        x: Var,
        w: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Per-slice `a [g, m, k] @ b [g, k, n]` (`transpose_b`: `b [g, n, k]`,
    /// contracting over the last axis of both).
    BatchMatmul {
        a: Var,
        b: Var,
        transpose_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `x [..., d] + bias [d]`, the one documented broadcast.
    AddBias {
        x: Var,
        bias: Var,
        d: usize,
    },
    /// `x [b, s, d] + rows [s, d]` broadcast over the leading axis.
    AddRows {
        x: Var,
        rows: Var,
        rows_len: usize,
    },
    Scale {
        x: Var,
        c: S,
    },
    /// Elementwise product with a constant coefficient vector (dropout).
    CoeffMul {
        x: Var,
        coeffs: Arc<Vec<S>>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    /// Row softmax over keys; masked keys got weight exactly 0 at
    /// forward time, so backward only needs the output and row width.
    MaskedSoftmax {
        x: Var,
        kdim: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    /// Row gather: `out[r] = table[ids[r]]`.
    Gather {
        table: Var,
        ids: Arc<Vec<usize>>,
        d: usize,
    },
    /// Concatenation along the sequence axis of `[b, s_i, d]` parts.
    ConcatSeq {
        parts: Vec<Var>,
        batch: usize,
        lens: Vec<usize>,
        d: usize,
    },
    /// `out[b] = x[b, index]` for `x [batch, seq, d]`.
    SelectSeq {
        x: Var,
        index: usize,
        seq: usize,
        d: usize,
    },
    /// `[b, s, h·dh] → [b·h, s, dh]`.
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// `[b·h, s, dh] → [b, s, h·dh]`.
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// One row repeated `reps` times.
    TileRows {
        x: Var,
        reps: usize,
        d: usize,
    },
    Reshape {
        x: Var,
    },
    /// Mean over the batch of stable per-sample BCE from logits.
    BceWithLogits {
        logits: Var,
        labels: Arc<Vec<S>>,
    },
    /// Scalar `Σ wᵢ xᵢ` against fixed weights.
    WeightedSum {
        x: Var,
        weights: Arc<Vec<S>>,
    },
    MeanAll {
        x: Var,
        n: usize,
    },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    values: Vec<S>,
    op: Op<S>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<S: Scalar> {
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<S>, op: Op<S>) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node { shape, values, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[S] {
        &self.nodes[v.0].values
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].values.clone())
            .expect("tape values stay finite")
    }

    // ── Node constructors ───────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf { requires_grad },
        )
    }

    pub fn leaf_values(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool) -> Var {
        self.push(shape, values, Op::Leaf { requires_grad })
    }

    /// `x [..., k] @ w [k, n]`; leading axes of `x` are preserved.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: xs,
                right: ws,
            });
        }
        let n = ws[1];
        let m = numel(&xs) / k;
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(&mut out, self.values(x), self.values(w), m, k, n, false, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::Matmul { x, w, m, k, n }))
    }

    /// Per-slice matmul over a shared leading group axis. With
    /// `transpose_b`, computes `a[g] @ b[g]ᵀ` for `b [g, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                left: ash,
                right: bsh,
            });
        }
        let (groups, m, k) = (ash[0], ash[1], ash[2]);
        let (bk, n) = if transpose_b {
            (bsh[2], bsh[1])
        } else {
            (bsh[1], bsh[2])
        };
        if bk != k {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                left: ash,
                right: bsh,
            });
        }
        let mut out = vec![S::zero(); groups * m * n];
        {
            let av = self.values(a);
            let bv = self.values(b);
            for g in 0..groups {
                kernels::matmul_acc(
                    &mut out[g * m * n..(g + 1) * m * n],
                    &av[g * m * k..(g + 1) * m * k],
                    &bv[g * k * n..(g + 1) * k * n],
                    m,
                    k,
                    n,
                    false,
                    transpose_b,
                );
            }
        }
        Ok(self.push(
            vec![groups, m, n],
            out,
            Op::BatchMatmul {
                a,
                b,
                transpose_b,
                groups,
                m,
                k,
                n,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), values, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bv = self.values(bias).to_vec();
        let values = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), values, Op::AddBias { x, bias, d }))
    }

    /// `x [b, s, d] + rows` where `rows` holds `s·d` values.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var, TensorError> {
        let rows_len = numel(self.shape(rows));
        let xlen = numel(self.shape(x));
        if rows_len == 0 || xlen % rows_len != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows",
                left: self.shape(x).to_vec(),
                right: self.shape(rows).to_vec(),
            });
        }
        let rv = self.values(rows).to_vec();
        let values = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv[i % rows_len])
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            values,
            Op::AddRows { x, rows, rows_len },
        ))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let values = self.values(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), values, Op::Scale { x, c })
    }

    /// Elementwise multiply by fixed coefficients (no gradient for them).
    pub fn coeff_mul(&mut self, x: Var, coeffs: Vec<S>) -> Result<Var, TensorError> {
        if coeffs.len() != numel(self.shape(x)) {
            return Err(TensorError::ShapeMismatch {
                op: "coeff_mul",
                left: self.shape(x).to_vec(),
                right: vec![coeffs.len()],
            });
        }
        let coeffs = Arc::new(coeffs);
        let values = self
            .values(x)
            .iter()
            .zip(coeffs.iter())
            .map(|(&v, &c)| v * c)
            .collect();
        Ok(self.push(self.shape(x).to_vec(), values, Op::CoeffMul { x, coeffs }))
    }

    /// Inverted dropout as a tape op; identity (no node) in infer mode.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut RngStream,
    ) -> Result<Var, TensorError> {
        match dropout_coeffs::<S>(numel(self.shape(x)), rate, mode, rng)? {
            None => Ok(x),
            Some(coeffs) => self.coeff_mul(x, coeffs),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values = self.values(x).iter().map(|&v| kernels::relu(v)).collect();
        self.push(self.shape(x).to_vec(), values, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let values = self.values(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(self.shape(x).to_vec(), values, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let values = self
            .values(x)
            .iter()
            .map(|&v| kernels::sigmoid(v))
            .collect();
        self.push(self.shape(x).to_vec(), values, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let values = self.values(x).iter().map(|&v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), values, Op::Tanh { x })
    }

    /// Softmax over the key axis of `x [groups, q, kdim]` where
    /// `groups = batches · heads` and `mask` has one 0/1 entry per
    /// `(batch, key)`. Masked keys get weight exactly 0; each row over
    /// the surviving keys sums to 1.
    pub fn masked_softmax(
        &mut self,
        x: Var,
        mask: Arc<Vec<u8>>,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: sh,
                right: vec![],
            });
        }
        let (groups, q, kdim) = (sh[0], sh[1], sh[2]);
        if heads == 0 || groups % heads != 0 || mask.len() != (groups / heads) * kdim {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: sh,
                right: vec![mask.len()],
            });
        }
        let mut out = self.values(x).to_vec();
        for g in 0..groups {
            let b = g / heads;
            let mrow = &mask[b * kdim..(b + 1) * kdim];
            for r in 0..q {
                let row = &mut out[(g * q + r) * kdim..(g * q + r + 1) * kdim];
                let mut max = S::neg_infinity();
                for (v, &m) in row.iter().zip(mrow) {
                    if m != 0 {
                        max = max.max(*v);
                    }
                }
                if max == S::neg_infinity() {
                    // fully masked row: no keys to attend to
                    row.iter_mut().for_each(|v| *v = S::zero());
                    continue;
                }
                let mut sum = S::zero();
                for (v, &m) in row.iter_mut().zip(mrow) {
                    if m != 0 {
                        *v = (*v - max).exp();
                        sum = sum + *v;
                    } else {
                        *v = S::zero();
                    }
                }
                row.iter_mut().for_each(|v| *v = *v / sum);
            }
        }
        let _ = q;
        Ok(self.push(sh, out, Op::MaskedSoftmax { x, kdim }))
    }

    /// Layer norm over `d`-length rows (population variance).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        if eps <= S::zero() {
            return Err(TensorError::InvalidParam(
                "layer_norm eps must be positive".into(),
            ));
        }
        let rows = numel(self.shape(x)) / d;
        let mut out = vec![S::zero(); rows * d];
        let mut mean = vec![S::zero(); rows];
        let mut rstd = vec![S::zero(); rows];
        kernels::layer_norm_rows(
            &mut out,
            self.values(x),
            self.values(gamma),
            self.values(beta),
            eps,
            d,
            &mut mean,
            &mut rstd,
        );
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                mean,
                rstd,
            },
        ))
    }

    /// `out[r] = table[ids[r]]` for a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, ids: Arc<Vec<usize>>) -> Result<Var, TensorError> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                left: tsh,
                right: vec![],
            });
        }
        let (rows, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::IdOutOfRange { id: bad, rows });
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let n = ids.len();
        Ok(self.push(vec![n, d], out, Op::Gather { table, ids, d }))
    }

    /// Concatenate `[batch, s_i, d]` parts along the sequence axis.
    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput("concat_seq"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_seq",
                left: first,
                right: vec![],
            });
        }
        let (batch, d) = (first[0], first[2]);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != 3 || sh[0] != batch || sh[2] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_seq",
                    left: first,
                    right: sh.to_vec(),
                });
            }
            lens.push(sh[1]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for (pi, &p) in parts.iter().enumerate() {
                let s = lens[pi];
                let pv = self.values(p);
                out.extend_from_slice(&pv[b * s * d..(b + 1) * s * d]);
            }
        }
        Ok(self.push(
            vec![batch, total, d],
            out,
            Op::ConcatSeq {
                parts: parts.to_vec(),
                batch,
                lens,
                d,
            },
        ))
    }

    /// Take one sequence position: `x [batch, seq, d] → [batch, d]`.
    pub fn select_seq(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || index >= sh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "select_seq",
                left: sh,
                right: vec![index],
            });
        }
        let (batch, seq, d) = (sh[0], sh[1], sh[2]);
        let xv = self.values(x);
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(&xv[(b * seq + index) * d..(b * seq + index + 1) * d]);
        }
        Ok(self.push(vec![batch, d], out, Op::SelectSeq { x, index, seq, d }))
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || sh[2] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "split_heads",
                left: sh,
                right: vec![heads],
            });
        }
        let (batch, seq, dim) = (sh[0], sh[1], sh[2]);
        let head_dim = dim / heads;
        let xv = self.values(x);
        let mut out = vec![S::zero(); batch * seq * dim];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + s) * dim + h * head_dim;
                    let dst = ((b * heads + h) * seq + s) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xv[src..src + head_dim]);
                }
            }
        }
        Ok(self.push(
            vec![batch * heads, seq, head_dim],
            out,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
        ))
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var, TensorError> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 || sh[0] % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "merge_heads",
                left: sh,
                right: vec![heads],
            });
        }
        let (batch, seq, head_dim) = (sh[0] / heads, sh[1], sh[2]);
        let dim = heads * head_dim;
        let xv = self.values(x);
        let mut out = vec![S::zero(); batch * seq * dim];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + s) * head_dim;
                    let dst = (b * seq + s) * dim + h * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xv[src..src + head_dim]);
                }
            }
        }
        Ok(self.push(
            vec![batch, seq, dim],
            out,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
        ))
    }

    /// Repeat a flat vector as `reps` identical rows.
    pub fn tile_rows(&mut self, x: Var, reps: usize) -> Var {
        let d = numel(self.shape(x));
        let xv = self.values(x).to_vec();
        let mut out = Vec::with_capacity(reps * d);
        for _ in 0..reps {
            out.extend_from_slice(&xv);
        }
        self.push(vec![reps, d], out, Op::TileRows { x, reps, d })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let values = self.values(x).to_vec();
        Ok(self.push(shape, values, Op::Reshape { x }))
    }

    /// Mean over the batch of per-sample BCE computed from logits in the
    /// stable softplus form; labels are 0/1 constants.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<S>) -> Result<Var, TensorError> {
        let n = numel(self.shape(logits));
        if labels.len() != n || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        let labels = Arc::new(labels);
        let sum: S = self
            .values(logits)
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| kernels::bce_from_logit(z, y))
            .sum();
        let mean = sum / S::from_f64(n as f64);
        Ok(self.push(vec![1], vec![mean], Op::BceWithLogits { logits, labels }))
    }

    /// Scalar dot product against fixed weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<S>) -> Result<Var, TensorError> {
        if weights.len() != numel(self.shape(x)) {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                left: self.shape(x).to_vec(),
                right: vec![weights.len()],
            });
        }
        let weights = Arc::new(weights);
        let sum: S = self
            .values(x)
            .iter()
            .zip(weights.iter())
            .map(|(&v, &w)| v * w)
            .sum();
        Ok(self.push(vec![1], vec![sum], Op::WeightedSum { x, weights }))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = numel(self.shape(x));
        let mean = self.values(x).iter().cloned().sum::<S>() / S::from_f64(n as f64);
        self.push(vec![1], vec![mean], Op::MeanAll { x, n })
    }

    // ── Backward ────────────────────────────────────────────────────

    fn parents(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Matmul { x, w, .. } => vec![*x, *w],
            Op::BatchMatmul { a, b, .. } => vec![*a, *b],
            Op::Add { a, b } => vec![*a, *b],
            Op::AddBias { x, bias, .. } => vec![*x, *bias],
            Op::AddRows { x, rows, .. } => vec![*x, *rows],
            Op::Scale { x, .. }
            | Op::CoeffMul { x, .. }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::MaskedSoftmax { x, .. }
            | Op::SelectSeq { x, .. }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::TileRows { x, .. }
            | Op::Reshape { x }
            | Op::WeightedSum { x, .. }
            | Op::MeanAll { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::ConcatSeq { parts, .. } => parts.clone(),
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }

    /// `needs[i]`: node `i` sits above at least one gradient-requiring
    /// leaf, so a gradient must flow into it.
    fn needs_grad_flags(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf { requires_grad } => *requires_grad,
                op => self.parents(op).iter().any(|v| needs[v.0]),
            };
        }
        needs
    }

    /// Reverse sweep from a scalar `root`; returns per-node gradients.
    /// Leaves registered without `requires_grad` (and subgraphs built
    /// only from them) receive no gradient.
    pub fn backward(&self, root: Var) -> Result<Grads<S>, TensorError> {
        if numel(self.shape(root)) != 1 {
            return Err(TensorError::InvalidParam(
                "backward root must be a scalar".into(),
            ));
        }
        let needs = self.needs_grad_flags();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![S::one()]);

        for id in (0..=root.0).rev() {
            if !needs[id] {
                grads[id] = None;
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &gout, &needs, &mut grads);
            // keep the gradient available for callers
            grads[id] = Some(gout);
        }
        Ok(Grads { by_node: grads })
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<S>>],
        v: Var,
        len: usize,
    ) -> &'a mut Vec<S> {
        grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
    }

    fn accumulate(&self, id: usize, gout: &[S], needs: &[bool], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul { x, w, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs[x.0] {
                    let gx = Self::ensure(grads, *x, m * k);
                    kernels::matmul_acc(gx, gout, self.values(*w), m, n, k, false, true);
                }
                if needs[w.0] {
                    let gw = Self::ensure(grads, *w, k * n);
                    kernels::matmul_acc(gw, self.values(*x), gout, k, m, n, true, false);
                }
            }
            Op::BatchMatmul {
                a,
                b,
                transpose_b,
                groups,
                m,
                k,
                n,
            } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                if needs[a.0] {
                    let bv = self.values(*b).to_vec();
                    let ga = Self::ensure(grads, *a, groups * m * k);
                    for g in 0..groups {
                        let gc = &gout[g * m * n..(g + 1) * m * n];
                        let bg = &bv[g * k * n..(g + 1) * k * n];
                        // dA = dC @ B   (nt: B stored [n,k] so dA = dC @ B without transpose)
                        kernels::matmul_acc(
                            &mut ga[g * m * k..(g + 1) * m * k],
                            gc,
                            bg,
                            m,
                            n,
                            k,
                            false,
                            !*transpose_b,
                        );
                    }
                }
                if needs[b.0] {
                    let av = self.values(*a).to_vec();
                    let gb = Self::ensure(grads, *b, groups * k * n);
                    for g in 0..groups {
                        let gc = &gout[g * m * n..(g + 1) * m * n];
                        let ag = &av[g * m * k..(g + 1) * m * k];
                        let gbg = &mut gb[g * k * n..(g + 1) * k * n];
                        if *transpose_b {
                            // B stored [n, k]; dB = dCᵀ @ A
                            kernels::matmul_acc(gbg, gc, ag, n, m, k, true, false);
                        } else {
                            // dB = Aᵀ @ dC
                            kernels::matmul_acc(gbg, ag, gc, k, m, n, true, false);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for &side in &[*a, *b] {
                    if !needs[side.0] {
                        continue;
                    }
                    let g = Self::ensure(grads, side, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                }
            }
            Op::AddBias { x, bias, d } => {
                if needs[x.0] {
                    let gx = Self::ensure(grads, *x, gout.len());
                    for (gi, &go) in gx.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                }
                if needs[bias.0] {
                    let gb = Self::ensure(grads, *bias, *d);
                    for (i, &go) in gout.iter().enumerate() {
                        gb[i % d] = gb[i % d] + go;
                    }
                }
            }
            Op::AddRows { x, rows, rows_len } => {
                if needs[x.0] {
                    let gx = Self::ensure(grads, *x, gout.len());
                    for (gi, &go) in gx.iter_mut().zip(gout) {
                        *gi = *gi + go;
                    }
                }
                if needs[rows.0] {
                    let gr = Self::ensure(grads, *rows, *rows_len);
                    for (i, &go) in gout.iter().enumerate() {
                        gr[i % rows_len] = gr[i % rows_len] + go;
                    }
                }
            }
            Op::Scale { x, c } => {
                if !needs[x.0] {
                    return;
                }
                let gx = Self::ensure(grads, *x, gout.len());
                for (gi, &go) in gx.iter_mut().zip(gout) {
                    *gi = *gi + go * *c;
                }
            }
            Op::CoeffMul { x, coeffs } => {
                if !needs[x.0] {
                    return;
                }
                let gx = Self::ensure(grads, *x, gout.len());
                for ((gi, &go), &c) in gx.iter_mut().zip(gout).zip(coeffs.iter()) {
                    *gi = *gi + go * c;
                }
            }
            Op::Relu { x } => {
                if !needs[x.0] {
                    return;
                }
                let xv = self.values(*x);
                let gx = Self::ensure(grads, *x, gout.len());
                for ((gi, &go), &v) in gx.iter_mut().zip(gout).zip(xv) {
                    if v > S::zero() {
                        *gi = *gi + go;
                    }
                }
            }
            Op::Gelu { x } => {
                if !needs[x.0] {
                    return;
                }
                let xv = self.values(*x).to_vec();
                let gx = Self::ensure(grads, *x, gout.len());
                for ((gi, &go), &v) in gx.iter_mut().zip(gout).zip(&xv) {
                    *gi = *gi + go * kernels::gelu_derivative(v);
                }
            }
            Op::Sigmoid { x } => {
                if !needs[x.0] {
                    return;
                }
                let yv = &node.values;
                let gx = Self::ensure(grads, *x, gout.len());
                for ((gi, &go), &y) in gx.iter_mut().zip(gout).zip(yv) {
                    *gi = *gi + go * y * (S::one() - y);
                }
            }
            Op::Tanh { x } => {
                if !needs[x.0] {
                    return;
                }
                let yv = &node.values;
                let gx = Self::ensure(grads, *x, gout.len());
                for ((gi, &go), &y) in gx.iter_mut().zip(gout).zip(yv) {
                    *gi = *gi + go * (S::one() - y * y);
                }
            }
            Op::MaskedSoftmax { x, kdim } => {
                if !needs[x.0] {
                    return;
                }
                // dx = y ⊙ (dy − Σ_j dy_j y_j); masked entries have y = 0.
                let yv = &node.values;
                let rows = numel(&node.shape) / kdim;
                let gx = Self::ensure(grads, *x, gout.len());
                for r in 0..rows {
                    let ys = &yv[r * kdim..(r + 1) * kdim];
                    let gs = &gout[r * kdim..(r + 1) * kdim];
                    let dot: S = ys.iter().zip(gs).map(|(&y, &g)| y * g).sum();
                    let gxs = &mut gx[r * kdim..(r + 1) * kdim];
                    for i in 0..*kdim {
                        gxs[i] = gxs[i] + ys[i] * (gs[i] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                mean,
                rstd,
            } => {
                let d = *d;
                let xv = self.values(*x).to_vec();
                let gv = self.values(*gamma).to_vec();
                let rows = xv.len() / d;
                let dn = S::from_f64(d as f64);
                if needs[beta.0] {
                    let gb = Self::ensure(grads, *beta, d);
                    for r in 0..rows {
                        let gs = &gout[r * d..(r + 1) * d];
                        for i in 0..d {
                            gb[i] = gb[i] + gs[i];
                        }
                    }
                }
                if needs[gamma.0] {
                    let gg = Self::ensure(grads, *gamma, d);
                    for r in 0..rows {
                        let gs = &gout[r * d..(r + 1) * d];
                        let xs = &xv[r * d..(r + 1) * d];
                        for i in 0..d {
                            let xhat = (xs[i] - mean[r]) * rstd[r];
                            gg[i] = gg[i] + gs[i] * xhat;
                        }
                    }
                }
                if needs[x.0] {
                    let gx = Self::ensure(grads, *x, xv.len());
                    for r in 0..rows {
                        let gs = &gout[r * d..(r + 1) * d];
                        let xs = &xv[r * d..(r + 1) * d];
                        let mut sum_dxhat = S::zero();
                        let mut sum_dxhat_xhat = S::zero();
                        for i in 0..d {
                            let xhat = (xs[i] - mean[r]) * rstd[r];
                            let dxhat = gs[i] * gv[i];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        let m1 = sum_dxhat / dn;
                        let m2 = sum_dxhat_xhat / dn;
                        for i in 0..d {
                            let xhat = (xs[i] - mean[r]) * rstd[r];
                            let dxhat = gs[i] * gv[i];
                            gx[r * d + i] = gx[r * d + i] + rstd[r] * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids, d } => {
                if !needs[table.0] {
                    return;
                }
                let rows = self.shape(*table)[0];
                let gt = Self::ensure(grads, *table, rows * d);
                for (r, &id) in ids.iter().enumerate() {
                    let gs = &gout[r * d..(r + 1) * d];
                    let ts = &mut gt[id * d..(id + 1) * d];
                    for i in 0..*d {
                        ts[i] = ts[i] + gs[i];
                    }
                }
            }
            Op::ConcatSeq {
                parts,
                batch,
                lens,
                d,
            } => {
                let total: usize = lens.iter().sum();
                for (pi, &p) in parts.iter().enumerate() {
                    if !needs[p.0] {
                        continue;
                    }
                    let s = lens[pi];
                    let offset: usize = lens[..pi].iter().sum();
                    let gp = Self::ensure(grads, p, batch * s * d);
                    for b in 0..*batch {
                        let src = (b * total + offset) * d;
                        let dst = b * s * d;
                        for i in 0..s * d {
                            gp[dst + i] = gp[dst + i] + gout[src + i];
                        }
                    }
                }
            }
            Op::SelectSeq { x, index, seq, d } => {
                if !needs[x.0] {
                    return;
                }
                let batch = self.shape(*x)[0];
                let gx = Self::ensure(grads, *x, batch * seq * d);
                for b in 0..batch {
                    let dst = (b * seq + index) * d;
                    let src = b * d;
                    for i in 0..*d {
                        gx[dst + i] = gx[dst + i] + gout[src + i];
                    }
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                if !needs[x.0] {
                    return;
                }
                let dim = heads * head_dim;
                let gx = Self::ensure(grads, *x, batch * seq * dim);
                for b in 0..*batch {
                    for s in 0..*seq {
                        for h in 0..*heads {
                            let dst = (b * seq + s) * dim + h * head_dim;
                            let src = ((b * heads + h) * seq + s) * head_dim;
                            for i in 0..*head_dim {
                                gx[dst + i] = gx[dst + i] + gout[src + i];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                if !needs[x.0] {
                    return;
                }
                let dim = heads * head_dim;
                let gx = Self::ensure(grads, *x, batch * heads * seq * head_dim);
                for b in 0..*batch {
                    for s in 0..*seq {
                        for h in 0..*heads {
                            let dst = ((b * heads + h) * seq + s) * head_dim;
                            let src = (b * seq + s) * dim + h * head_dim;
                            for i in 0..*head_dim {
                                gx[dst + i] = gx[dst + i] + gout[src + i];
                            }
                        }
                    }
                }
            }
            Op::TileRows { x, reps, d } => {
                if !needs[x.0] {
                    return;
                }
                let gx = Self::ensure(grads, *x, *d);
                for r in 0..*reps {
                    for i in 0..*d {
                        gx[i] = gx[i] + gout[r * d + i];
                    }
                }
            }
            Op::Reshape { x } => {
                if !needs[x.0] {
                    return;
                }
                let gx = Self::ensure(grads, *x, gout.len());
                for (gi, &go) in gx.iter_mut().zip(gout) {
                    *gi = *gi + go;
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if !needs[logits.0] {
                    return;
                }
                let zv = self.values(*logits).to_vec();
                let n = S::from_f64(zv.len() as f64);
                let g = gout[0];
                let gz = Self::ensure(grads, *logits, zv.len());
                for ((gi, &z), &y) in gz.iter_mut().zip(&zv).zip(labels.iter()) {
                    *gi = *gi + g * (kernels::sigmoid(z) - y) / n;
                }
            }
            Op::WeightedSum { x, weights } => {
                if !needs[x.0] {
                    return;
                }
                let g = gout[0];
                let gx = Self::ensure(grads, *x, weights.len());
                for (gi, &w) in gx.iter_mut().zip(weights.iter()) {
                    *gi = *gi + g * w;
                }
            }
            Op::MeanAll { x, n } => {
                if !needs[x.0] {
                    return;
                }
                let g = gout[0] / S::from_f64(*n as f64);
                let gx = Self::ensure(grads, *x, *n);
                for gi in gx.iter_mut() {
                    *gi = *gi + g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_forward_matches_plain_tensor_path() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let mut tape = Tape::new();
        let va = tape.leaf(&a, true);
        let vb = tape.leaf(&b, true);
        let c = tape.matmul(va, vb).unwrap();
        let plain = crate::tensor::matmul(&a, &b).unwrap();
        assert_eq!(tape.values(c), plain.values());
    }

    #[test]
    fn simple_chain_backward() {
        // loss = Σ sigmoid(x); dloss/dx = σ(x)(1−σ(x))
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let vx = tape.leaf(&x, true);
        let s = tape.sigmoid(vx);
        let loss = tape.weighted_sum(s, vec![1.0; 3]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(vx).unwrap();
        for (i, &xi) in x.values().iter().enumerate() {
            let si: f64 = kernels::sigmoid(xi);
            assert!((g[i] - si * (1.0 - si)).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys_and_rows_sum_to_one() {
        let x = Tensor::new(vec![1, 2, 3], vec![0.3, -0.2, 5.0, 1.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::<f64>::new();
        let vx = tape.leaf(&x, true);
        let mask = Arc::new(vec![1u8, 1, 0]);
        let y = tape.masked_softmax(vx, mask, 1).unwrap();
        let v = tape.values(y);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_then_merge_heads_round_trips() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| i as f64);
        let mut tape = Tape::new();
        let vx = tape.leaf(&x, false);
        let split = tape.split_heads(vx, 2).unwrap();
        assert_eq!(tape.shape(split), &[4, 3, 2]);
        let merged = tape.merge_heads(split, 2).unwrap();
        assert_eq!(tape.values(merged), x.values());
    }

    #[test]
    fn bce_with_logits_examples() {
        // p = 0.5 (logit 0), y = 1 → ln 2
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf_values(vec![1], vec![0.0], true);
        let loss = tape.bce_with_logits(z, vec![1.0]).unwrap();
        assert!((tape.values(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // batch [0.5, 0.5] vs [1, 0] → ln 2
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf_values(vec![2], vec![0.0, 0.0], true);
        let loss = tape.bce_with_logits(z, vec![1.0, 0.0]).unwrap();
        assert!((tape.values(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // y = 1 with a strongly positive logit → loss → 0, finite
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf_values(vec![1], vec![500.0], true);
        let loss = tape.bce_with_logits(z, vec![1.0]).unwrap();
        assert!(tape.values(loss)[0].is_finite());
        assert!(tape.values(loss)[0] < 1e-12);
    }

    #[test]
    fn dropout_in_infer_mode_adds_no_node() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_values(vec![4], vec![1.0, 2.0, 3.0, 4.0], true);
        let mut rng = RngStream::new(1, 0);
        let y = tape.dropout(x, 0.5, Mode::Infer, &mut rng).unwrap();
        assert_eq!(x, y);
    }
}
