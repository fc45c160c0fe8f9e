//! Reverse-mode tape. Each forward op appends a node holding its output
//! value; `backward` walks the recorded order in reverse and accumulates
//! adjoints into every node that needs one. Graphs are cheap, single-use
//! objects: one per forward pass, never shared across threads.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self};
use crate::tensor::{BoolMat, Buf, Dtype, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f64,
    },
    Gelu(Var),
    Embed {
        table: Var,
        d: usize,
        ids: Arc<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        k: usize,
        targets: Arc<Vec<usize>>,
    },
    Mse(Var, Var),
    ConcatRows {
        parts: Vec<Var>,
        row_size: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
        row_size: usize,
    },
    Patches {
        img: Var,
        h: usize,
        w: usize,
        c: usize,
        p: usize,
    },
    MeanRows {
        x: Var,
        d: usize,
    },
    Sum(Var),
    Reshape(Var),
    SplitHeads {
        x: Var,
        t: usize,
        d: usize,
        h: usize,
    },
    MergeHeads {
        x: Var,
        h: usize,
        t: usize,
        dk: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Buf>,
    grad: Option<Buf>,
    needs_grad: bool,
    op: Op,
}

/// Recorded forward computation with reverse-mode gradients.
pub struct Graph {
    dtype: Dtype,
    nodes: Vec<Node>,
}

macro_rules! buf1 {
    ($x:expr, $f:path $(, $arg:expr)*) => {
        match $x {
            Buf::F32(v) => Buf::F32($f(v $(, $arg)*)),
            Buf::F64(v) => Buf::F64($f(v $(, $arg)*)),
        }
    };
}

macro_rules! buf2 {
    ($a:expr, $b:expr, $f:path $(, $arg:expr)*) => {
        match ($a, $b) {
            (Buf::F32(x), Buf::F32(y)) => Buf::F32($f(x, y $(, $arg)*)),
            (Buf::F64(x), Buf::F64(y)) => Buf::F64($f(x, y $(, $arg)*)),
            _ => unreachable!("graph enforces a single dtype"),
        }
    };
}

#[inline]
fn view_strides(cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

#[inline]
fn swap(s: (isize, isize)) -> (isize, isize) {
    (s.1, s.0)
}

impl Graph {
    pub fn new(dtype: Dtype) -> Graph {
        Graph {
            dtype,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bind a tensor as a leaf; gradient tracking follows `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_with(t, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_with(t, false)
    }

    pub fn leaf_with(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        if t.dtype() != self.dtype {
            return Err(Error::Dtype { op: "leaf" });
        }
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Materialize a node's value as a tensor (shares storage).
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::from_parts(
            self.nodes[v.0].shape.clone(),
            Arc::clone(&self.nodes[v.0].value),
        )
    }

    /// Gradient accumulated at a node, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].shape.clone(), Arc::new(g.clone())))
    }

    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Buf, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Buf {
        &self.nodes[v.0].value
    }

    // ── elementwise and shape ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let out = buf2!(self.val(a), self.val(b), kernels::add);
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Add(a, b), needs)
    }

    /// [rows, c] + [c] with the bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let c = *sa.last().ok_or_else(|| Error::Shape {
            op: "add-bias",
            lhs: sa.clone(),
            rhs: self.nodes[bias.0].shape.clone(),
        })?;
        if self.nodes[bias.0].shape != [c] {
            return Err(Error::Shape {
                op: "add-bias",
                lhs: sa,
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let out = buf2!(self.val(a), self.val(bias), kernels::add_bias);
        let needs = self.needs(a) || self.needs(bias);
        self.push(sa, out, Op::AddBias(a, bias), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out = buf2!(self.val(a), self.val(b), kernels::mul);
        let needs = self.needs(a) || self.needs(b);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = buf1!(self.val(a), kernels::scale, c);
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = buf1!(self.val(a), kernels::add_scalar, c);
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), out, Op::AddScalar(a), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = buf1!(self.val(a), kernels::gelu_fwd);
        let needs = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), out, Op::Gelu(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.val(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let needs = self.needs(a);
        // Shares the value buffer; only the shape changes.
        self.nodes.push(Node {
            shape,
            value: Arc::clone(&self.nodes[a.0].value),
            grad: None,
            needs_grad: needs,
            op: Op::Reshape(a),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_rows on empty list"));
        }
        let trailing: Vec<usize> = self.nodes[parts[0].0].shape[1..].to_vec();
        let row_size: usize = trailing.iter().product();
        let mut rows = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.is_empty() || s[1..] != trailing[..] {
                return Err(Error::Shape {
                    op: "concat-rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: s.clone(),
                });
            }
            rows += s[0];
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let out = match self.dtype {
            Dtype::F32 => {
                let mut v = Vec::with_capacity(rows * row_size);
                for p in parts {
                    v.extend_from_slice(self.val(*p).as_f32());
                }
                Buf::F32(v)
            }
            Dtype::F64 => {
                let mut v = Vec::with_capacity(rows * row_size);
                for p in parts {
                    v.extend_from_slice(self.val(*p).as_f64());
                }
                Buf::F64(v)
            }
        };
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            shape,
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
                row_size,
            },
            needs,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::Shape {
                op: "slice-rows",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let row_size: usize = s[1..].iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let out = match self.val(x) {
            Buf::F32(v) => Buf::F32(v[start * row_size..(start + len) * row_size].to_vec()),
            Buf::F64(v) => Buf::F64(v[start * row_size..(start + len) * row_size].to_vec()),
        };
        let needs = self.needs(x);
        self.push(
            shape,
            out,
            Op::SliceRows {
                x,
                start,
                len,
                row_size,
            },
            needs,
        )
    }

    // ── matrix products ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = buf2!(self.val(a), self.val(b), kernels::matmul_fwd, ta, tb, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            vec![m, n],
            out,
            Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                k: ka,
                n,
            },
            needs,
        )
    }

    /// Batched matmul over a shared leading dimension.
    pub fn bmm_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let batch = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let out = buf2!(
            self.val(a),
            self.val(b),
            kernels::bmm_fwd,
            ta,
            tb,
            batch,
            m,
            ka,
            n
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(
            vec![batch, m, n],
            out,
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k: ka,
                n,
            },
            needs,
        )
    }

    // ── neural ops ─────────────────────────────────────────────────────

    /// Softmax over the last axis with optional visibility mask. Mask rows
    /// broadcast cyclically over leading dimensions; masked outputs are
    /// exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<BoolMat>>) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let n = *shape.last().ok_or_else(|| Error::Shape {
            op: "softmax",
            lhs: shape.clone(),
            rhs: vec![],
        })?;
        let rows = self.val(x).len() / n;
        if let Some(m) = &mask {
            if m.cols() != n || rows % m.rows() != 0 {
                return Err(Error::Shape {
                    op: "softmax-mask",
                    lhs: shape,
                    rhs: vec![m.rows(), m.cols()],
                });
            }
        }
        let mask_view = mask.as_ref().map(|m| (m.data(), m.rows()));
        let out = match self.val(x) {
            Buf::F32(v) => Buf::F32(
                kernels::softmax_fwd(v, n, mask_view).map_err(|row| Error::DegenerateMask { row })?,
            ),
            Buf::F64(v) => Buf::F64(
                kernels::softmax_fwd(v, n, mask_view).map_err(|row| Error::DegenerateMask { row })?,
            ),
        };
        let needs = self.needs(x);
        self.push(shape, out, Op::Softmax { x, n }, needs)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config(format!("rms_norm eps must be > 0, got {eps}")));
        }
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if self.nodes[gain.0].shape != [d] {
            return Err(Error::Shape {
                op: "rms-norm",
                lhs: shape,
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let out = buf2!(self.val(x), self.val(gain), kernels::rms_norm_fwd, eps);
        let needs = self.needs(x) || self.needs(gain);
        self.push(shape, out, Op::RmsNorm { x, gain, eps }, needs)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.nodes[table.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embed",
                lhs: s,
                rhs: vec![ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::usage(format!(
                "embedding id {bad} out of range for table of {} rows",
                s[0]
            )));
        }
        let d = s[1];
        let out = buf1!(self.val(table), kernels::embed_fwd, d, ids);
        let needs = self.needs(table);
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embed {
                table,
                d,
                ids: Arc::new(ids.to_vec()),
            },
            needs,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits` [n, k].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.nodes[logits.0].shape.clone();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross-entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::usage(format!(
                "target class {bad} out of range for {k} logits"
            )));
        }
        let out = match self.val(logits) {
            Buf::F32(v) => Buf::F32(vec![kernels::cross_entropy_fwd(v, k, targets)]),
            Buf::F64(v) => Buf::F64(vec![kernels::cross_entropy_fwd(v, k, targets)]),
        };
        let needs = self.needs(logits);
        self.push(
            vec![1],
            out,
            Op::CrossEntropy {
                logits,
                k,
                targets: Arc::new(targets.to_vec()),
            },
            needs,
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mse", a, b)?;
        let out = match (self.val(a), self.val(b)) {
            (Buf::F32(x), Buf::F32(y)) => Buf::F32(vec![kernels::mse_fwd(x, y)]),
            (Buf::F64(x), Buf::F64(y)) => Buf::F64(vec![kernels::mse_fwd(x, y)]),
            _ => unreachable!(),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![1], out, Op::Mse(a, b), needs)
    }

    /// Non-overlapping p x p patch extraction from an [H, W, C] image.
    pub fn patches(&mut self, img: Var, p: usize) -> Result<Var> {
        let s = self.nodes[img.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "patches",
                lhs: s,
                rhs: vec![p],
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(format!(
                "patch size {p} does not divide image {h}x{w}"
            )));
        }
        let out = buf1!(self.val(img), kernels::patches_fwd, h, w, c, p);
        let needs = self.needs(img);
        self.push(
            vec![(h / p) * (w / p), p * p * c],
            out,
            Op::Patches { img, h, w, c, p },
            needs,
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "mean-rows",
                lhs: s,
                rhs: vec![],
            });
        }
        let d = s[1];
        let out = buf1!(self.val(x), kernels::mean_rows_fwd, d);
        let needs = self.needs(x);
        self.push(vec![d], out, Op::MeanRows { x, d }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = match self.val(x) {
            Buf::F32(v) => Buf::F32(vec![v.iter().sum()]),
            Buf::F64(v) => Buf::F64(vec![v.iter().sum()]),
        };
        let needs = self.needs(x);
        self.push(vec![1], out, Op::Sum(x), needs)
    }

    pub fn split_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 2 || h == 0 || s[1] % h != 0 {
            return Err(Error::Shape {
                op: "split-heads",
                lhs: s,
                rhs: vec![h],
            });
        }
        let (t, d) = (s[0], s[1]);
        let out = buf1!(self.val(x), kernels::split_heads_fwd, t, d, h);
        let needs = self.needs(x);
        self.push(vec![h, t, d / h], out, Op::SplitHeads { x, t, d, h }, needs)
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "merge-heads",
                lhs: s,
                rhs: vec![],
            });
        }
        let (h, t, dk) = (s[0], s[1], s[2]);
        let out = buf1!(self.val(x), kernels::merge_heads_fwd, h, t, dk);
        let needs = self.needs(x);
        self.push(vec![t, h * dk], out, Op::MergeHeads { x, h, t, dk }, needs)
    }

    /// Scaled dot-product attention with a hard boolean mask, returning
    /// (output, weights). Weights are row-stochastic over visible entries
    /// and exactly zero elsewhere.
    ///
    /// q: [h, Tq, dk], k: [h, Tk, dk], v: [h, Tk, dv], mask: [Tq, Tk].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Arc<BoolMat>) -> Result<(Var, Var)> {
        let sq = self.nodes[q.0].shape.clone();
        let sk = self.nodes[k.0].shape.clone();
        let sv = self.nodes[v.0].shape.clone();
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        if sq[0] != sk[0] || sq[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        if mask.rows() != sq[1] || mask.cols() != sk[1] {
            return Err(Error::Shape {
                op: "attention-mask",
                lhs: vec![sq[1], sk[1]],
                rhs: vec![mask.rows(), mask.cols()],
            });
        }
        let dk = sq[2];
        let scores = self.bmm_t(q, k, false, true)?;
        let scaled = self.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let weights = self.softmax_rows(scaled, Some(mask))?;
        let out = self.bmm_t(weights, v, false, false)?;
        Ok((out, weights))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulate adjoints of `loss` into every reachable node that needs a
    /// gradient. Repeated calls keep accumulating until `zero_grads`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Backward with an explicit seed adjoint (used to fold a 1/batch factor
    /// into gradient accumulation).
    pub fn backward_seeded(&mut self, loss: Var, seed: f64) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing reachable requires gradients
        }
        ensure_grad(&mut self.nodes[loss.0]);
        match self.nodes[loss.0].grad.as_mut().unwrap() {
            Buf::F32(g) => g[0] += seed as f32,
            Buf::F64(g) => g[0] += seed,
        }
        // Intermediate adjoints are consumed as they propagate; only leaf
        // grads persist, so repeated backward calls accumulate exactly one
        // contribution each.
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad
                || self.nodes[id].grad.is_none()
                || matches!(self.nodes[id].op, Op::Leaf)
            {
                continue;
            }
            let g = self.nodes[id].grad.take().expect("grad present");
            let op = self.nodes[id].op.clone();
            let out_val = Arc::clone(&self.nodes[id].value);
            self.propagate(&op, &g, &out_val);
        }
        Ok(())
    }

    fn propagate(&mut self, op: &Op, g: &Buf, out_val: &Buf) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_scaled(*a, g, 1.0);
                self.acc_scaled(*b, g, 1.0);
            }
            Op::AddBias(a, bias) => {
                self.acc_scaled(*a, g, 1.0);
                if self.needs(*bias) {
                    let c = self.nodes[bias.0].shape[0];
                    let gb = grad_of(&mut self.nodes[bias.0], c);
                    match (gb, g) {
                        (Buf::F32(o), Buf::F32(gv)) => {
                            for row in gv.chunks(c) {
                                kernels::axpy(o, row, 1.0);
                            }
                        }
                        (Buf::F64(o), Buf::F64(gv)) => {
                            for row in gv.chunks(c) {
                                kernels::axpy(o, row, 1.0);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = Arc::clone(&self.nodes[b.0].value);
                    let ga = grad_of(&mut self.nodes[a.0], bv.len());
                    match (ga, g, bv.as_ref()) {
                        (Buf::F32(o), Buf::F32(gv), Buf::F32(b)) => kernels::acc_mul(o, gv, b),
                        (Buf::F64(o), Buf::F64(gv), Buf::F64(b)) => kernels::acc_mul(o, gv, b),
                        _ => unreachable!(),
                    }
                }
                if self.needs(*b) {
                    let av = Arc::clone(&self.nodes[a.0].value);
                    let gb = grad_of(&mut self.nodes[b.0], av.len());
                    match (gb, g, av.as_ref()) {
                        (Buf::F32(o), Buf::F32(gv), Buf::F32(a)) => kernels::acc_mul(o, gv, a),
                        (Buf::F64(o), Buf::F64(gv), Buf::F64(a)) => kernels::acc_mul(o, gv, a),
                        _ => unreachable!(),
                    }
                }
            }
            Op::Scale(a, c) => self.acc_scaled(*a, g, *c),
            Op::AddScalar(a) => self.acc_scaled(*a, g, 1.0),
            Op::Matmul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => self.product_bwd(*a, *b, *ta, *tb, 1, *m, *k, *n, g),
            Op::Bmm {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => self.product_bwd(*a, *b, *ta, *tb, *batch, *m, *k, *n, g),
            Op::Softmax { x, n } => {
                if self.needs(*x) {
                    let gx = grad_of(&mut self.nodes[x.0], g.len());
                    match (gx, out_val, g) {
                        (Buf::F32(o), Buf::F32(y), Buf::F32(gr)) => {
                            kernels::softmax_bwd(o, y, gr, *n)
                        }
                        (Buf::F64(o), Buf::F64(y), Buf::F64(gr)) => {
                            kernels::softmax_bwd(o, y, gr, *n)
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = Arc::clone(&self.nodes[x.0].value);
                let gainv = Arc::clone(&self.nodes[gain.0].value);
                let d = self.nodes[gain.0].shape[0];
                let mut gx = Buf::zeros(g.dtype(), xv.len());
                let mut gg = Buf::zeros(g.dtype(), d);
                match (&mut gx, &mut gg, xv.as_ref(), gainv.as_ref(), g) {
                    (Buf::F32(gx), Buf::F32(gg), Buf::F32(x), Buf::F32(gn), Buf::F32(gr)) => {
                        kernels::rms_norm_bwd(gx, gg, x, gn, gr, *eps)
                    }
                    (Buf::F64(gx), Buf::F64(gg), Buf::F64(x), Buf::F64(gn), Buf::F64(gr)) => {
                        kernels::rms_norm_bwd(gx, gg, x, gn, gr, *eps)
                    }
                    _ => unreachable!(),
                }
                if self.needs(*x) {
                    self.acc_buf(*x, &gx);
                }
                if self.needs(*gain) {
                    self.acc_buf(*gain, &gg);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xv = Arc::clone(&self.nodes[a.0].value);
                    let ga = grad_of(&mut self.nodes[a.0], xv.len());
                    match (ga, xv.as_ref(), g) {
                        (Buf::F32(o), Buf::F32(x), Buf::F32(gv)) => kernels::gelu_bwd(o, x, gv),
                        (Buf::F64(o), Buf::F64(x), Buf::F64(gv)) => kernels::gelu_bwd(o, x, gv),
                        _ => unreachable!(),
                    }
                }
            }
            Op::Embed { table, d, ids } => {
                if self.needs(*table) {
                    let len = self.nodes[table.0].value.len();
                    let gt = grad_of(&mut self.nodes[table.0], len);
                    match (gt, g) {
                        (Buf::F32(o), Buf::F32(gv)) => kernels::embed_bwd(o, *d, ids, gv),
                        (Buf::F64(o), Buf::F64(gv)) => kernels::embed_bwd(o, *d, ids, gv),
                        _ => unreachable!(),
                    }
                }
            }
            Op::CrossEntropy { logits, k, targets } => {
                if self.needs(*logits) {
                    let lv = Arc::clone(&self.nodes[logits.0].value);
                    let gl = grad_of(&mut self.nodes[logits.0], lv.len());
                    match (gl, lv.as_ref(), g) {
                        (Buf::F32(o), Buf::F32(l), Buf::F32(gv)) => {
                            kernels::cross_entropy_bwd(o, l, *k, targets, gv[0])
                        }
                        (Buf::F64(o), Buf::F64(l), Buf::F64(gv)) => {
                            kernels::cross_entropy_bwd(o, l, *k, targets, gv[0])
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = Arc::clone(&self.nodes[a.0].value);
                let bv = Arc::clone(&self.nodes[b.0].value);
                if self.needs(*a) {
                    let ga = grad_of(&mut self.nodes[a.0], av.len());
                    match (ga, av.as_ref(), bv.as_ref(), g) {
                        (Buf::F32(o), Buf::F32(x), Buf::F32(y), Buf::F32(gv)) => {
                            kernels::mse_bwd(Some(o), None, x, y, gv[0])
                        }
                        (Buf::F64(o), Buf::F64(x), Buf::F64(y), Buf::F64(gv)) => {
                            kernels::mse_bwd(Some(o), None, x, y, gv[0])
                        }
                        _ => unreachable!(),
                    }
                }
                if self.needs(*b) {
                    let gb = grad_of(&mut self.nodes[b.0], bv.len());
                    match (gb, av.as_ref(), bv.as_ref(), g) {
                        (Buf::F32(o), Buf::F32(x), Buf::F32(y), Buf::F32(gv)) => {
                            kernels::mse_bwd(None, Some(o), x, y, gv[0])
                        }
                        (Buf::F64(o), Buf::F64(x), Buf::F64(y), Buf::F64(gv)) => {
                            kernels::mse_bwd(None, Some(o), x, y, gv[0])
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::ConcatRows { parts, row_size } => {
                let mut offset = 0;
                for p in parts {
                    let rows = self.nodes[p.0].shape[0];
                    let span = rows * row_size;
                    if self.needs(*p) {
                        let gp = grad_of(&mut self.nodes[p.0], span);
                        match (gp, g) {
                            (Buf::F32(o), Buf::F32(gv)) => {
                                kernels::axpy(o, &gv[offset..offset + span], 1.0)
                            }
                            (Buf::F64(o), Buf::F64(gv)) => {
                                kernels::axpy(o, &gv[offset..offset + span], 1.0)
                            }
                            _ => unreachable!(),
                        }
                    }
                    offset += span;
                }
            }
            Op::SliceRows {
                x,
                start,
                len,
                row_size,
            } => {
                if self.needs(*x) {
                    let total = self.nodes[x.0].value.len();
                    let gx = grad_of(&mut self.nodes[x.0], total);
                    let a = start * row_size;
                    let b = (start + len) * row_size;
                    match (gx, g) {
                        (Buf::F32(o), Buf::F32(gv)) => kernels::axpy(&mut o[a..b], gv, 1.0),
                        (Buf::F64(o), Buf::F64(gv)) => kernels::axpy(&mut o[a..b], gv, 1.0),
                        _ => unreachable!(),
                    }
                }
            }
            Op::Patches { img, h, w, c, p } => {
                if self.needs(*img) {
                    let total = self.nodes[img.0].value.len();
                    let gi = grad_of(&mut self.nodes[img.0], total);
                    match (gi, g) {
                        (Buf::F32(o), Buf::F32(gv)) => kernels::patches_bwd(o, *h, *w, *c, *p, gv),
                        (Buf::F64(o), Buf::F64(gv)) => kernels::patches_bwd(o, *h, *w, *c, *p, gv),
                        _ => unreachable!(),
                    }
                }
            }
            Op::MeanRows { x, d } => {
                if self.needs(*x) {
                    let total = self.nodes[x.0].value.len();
                    let rows = total / d;
                    let gx = grad_of(&mut self.nodes[x.0], total);
                    let inv = 1.0 / rows as f64;
                    match (gx, g) {
                        (Buf::F32(o), Buf::F32(gv)) => {
                            for row in o.chunks_mut(*d) {
                                kernels::axpy(row, gv, inv);
                            }
                        }
                        (Buf::F64(o), Buf::F64(gv)) => {
                            for row in o.chunks_mut(*d) {
                                kernels::axpy(row, gv, inv);
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let total = self.nodes[x.0].value.len();
                    let gx = grad_of(&mut self.nodes[x.0], total);
                    match (gx, g) {
                        (Buf::F32(o), Buf::F32(gv)) => {
                            for oo in o.iter_mut() {
                                *oo += gv[0];
                            }
                        }
                        (Buf::F64(o), Buf::F64(gv)) => {
                            for oo in o.iter_mut() {
                                *oo += gv[0];
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
            Op::Reshape(x) => self.acc_scaled(*x, g, 1.0),
            Op::SplitHeads { x, t, d, h } => {
                if self.needs(*x) {
                    let total = self.nodes[x.0].value.len();
                    let gx = grad_of(&mut self.nodes[x.0], total);
                    match (gx, g) {
                        (Buf::F32(o), Buf::F32(gv)) => kernels::split_heads_bwd(o, *t, *d, *h, gv),
                        (Buf::F64(o), Buf::F64(gv)) => kernels::split_heads_bwd(o, *t, *d, *h, gv),
                        _ => unreachable!(),
                    }
                }
            }
            Op::MergeHeads { x, h, t, dk } => {
                if self.needs(*x) {
                    let total = self.nodes[x.0].value.len();
                    let gx = grad_of(&mut self.nodes[x.0], total);
                    match (gx, g) {
                        (Buf::F32(o), Buf::F32(gv)) => kernels::merge_heads_bwd(o, *h, *t, *dk, gv),
                        (Buf::F64(o), Buf::F64(gv)) => kernels::merge_heads_bwd(o, *h, *t, *dk, gv),
                        _ => unreachable!(),
                    }
                }
            }
        }
    }

    /// Shared backward for Matmul (batch = 1) and Bmm.
    ///
    /// With C = A' B' (primes are the transposed views): dA' = dC B'^T and
    /// dB' = A'^T dC, accumulated back through the same strided views so
    /// transposed storage needs no copies.
    #[allow(clippy::too_many_arguments)]
    fn product_bwd(
        &mut self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        g: &Buf,
    ) {
        let av = Arc::clone(&self.nodes[a.0].value);
        let bv = Arc::clone(&self.nodes[b.0].value);
        let va = view_strides(if ta { m } else { k }, ta);
        let vb = view_strides(if tb { k } else { n }, tb);
        let a_sz = m * k;
        let b_sz = k * n;
        let c_sz = m * n;
        let gc = (n as isize, 1);
        if self.needs(a) {
            let ga = grad_of(&mut self.nodes[a.0], av.len());
            match (ga, bv.as_ref(), g) {
                (Buf::F32(o), Buf::F32(bb), Buf::F32(gg)) => {
                    for i in 0..batch {
                        kernels::gemm_raw(
                            m,
                            n,
                            k,
                            1.0,
                            &gg[i * c_sz..(i + 1) * c_sz],
                            gc,
                            &bb[i * b_sz..(i + 1) * b_sz],
                            swap(vb),
                            1.0,
                            &mut o[i * a_sz..(i + 1) * a_sz],
                            va,
                        );
                    }
                }
                (Buf::F64(o), Buf::F64(bb), Buf::F64(gg)) => {
                    for i in 0..batch {
                        kernels::gemm_raw(
                            m,
                            n,
                            k,
                            1.0,
                            &gg[i * c_sz..(i + 1) * c_sz],
                            gc,
                            &bb[i * b_sz..(i + 1) * b_sz],
                            swap(vb),
                            1.0,
                            &mut o[i * a_sz..(i + 1) * a_sz],
                            va,
                        );
                    }
                }
                _ => unreachable!(),
            }
        }
        if self.needs(b) {
            let gb = grad_of(&mut self.nodes[b.0], bv.len());
            match (gb, av.as_ref(), g) {
                (Buf::F32(o), Buf::F32(aa), Buf::F32(gg)) => {
                    for i in 0..batch {
                        kernels::gemm_raw(
                            k,
                            m,
                            n,
                            1.0,
                            &aa[i * a_sz..(i + 1) * a_sz],
                            swap(va),
                            &gg[i * c_sz..(i + 1) * c_sz],
                            gc,
                            1.0,
                            &mut o[i * b_sz..(i + 1) * b_sz],
                            vb,
                        );
                    }
                }
                (Buf::F64(o), Buf::F64(aa), Buf::F64(gg)) => {
                    for i in 0..batch {
                        kernels::gemm_raw(
                            k,
                            m,
                            n,
                            1.0,
                            &aa[i * a_sz..(i + 1) * a_sz],
                            swap(va),
                            &gg[i * c_sz..(i + 1) * c_sz],
                            gc,
                            1.0,
                            &mut o[i * b_sz..(i + 1) * b_sz],
                            vb,
                        );
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    fn acc_scaled(&mut self, v: Var, g: &Buf, c: f64) {
        if !self.needs(v) {
            return;
        }
        let gv = grad_of(&mut self.nodes[v.0], g.len());
        match (gv, g) {
            (Buf::F32(o), Buf::F32(x)) => kernels::axpy(o, x, c),
            (Buf::F64(o), Buf::F64(x)) => kernels::axpy(o, x, c),
            _ => unreachable!(),
        }
    }

    fn acc_buf(&mut self, v: Var, add: &Buf) {
        let gv = grad_of(&mut self.nodes[v.0], add.len());
        match (gv, add) {
            (Buf::F32(o), Buf::F32(x)) => kernels::axpy(o, x, 1.0),
            (Buf::F64(o), Buf::F64(x)) => kernels::axpy(o, x, 1.0),
            _ => unreachable!(),
        }
    }
}

fn ensure_grad(node: &mut Node) {
    if node.grad.is_none() {
        node.grad = Some(Buf::zeros(node.value.dtype(), node.value.len()));
    }
}

fn grad_of(node: &mut Node, len: usize) -> &mut Buf {
    debug_assert_eq!(node.value.len(), len);
    ensure_grad(node);
    node.grad.as_mut().expect("just ensured")
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add-bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add-scalar",
        Op::Matmul { .. } => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Softmax { .. } => "softmax",
        Op::RmsNorm { .. } => "rms-norm",
        Op::Gelu(..) => "gelu",
        Op::Embed { .. } => "embed",
        Op::CrossEntropy { .. } => "cross-entropy",
        Op::Mse(..) => "mse",
        Op::ConcatRows { .. } => "concat-rows",
        Op::SliceRows { .. } => "slice-rows",
        Op::Patches { .. } => "patches",
        Op::MeanRows { .. } => "mean-rows",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
        Op::SplitHeads { .. } => "split-heads",
        Op::MergeHeads { .. } => "merge-heads",
    }
}
