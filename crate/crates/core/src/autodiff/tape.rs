//! Append-only reverse-mode tape over batched matrices.
//!
//! Every node holds a `rows × cols` value where rows are batch samples.
//! Nodes are appended in evaluation order, so the node list is already
//! topologically sorted and `backward` walks it in strict reverse.

use std::fmt;
use std::sync::Arc;

use crate::error::{FodeError, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed real-linear map applied independently to every row of a batch.
///
/// `adjoint` must be the exact transpose of `apply`. `apply` returns a
/// diagnostic scalar (for spectral maps, the imaginary residue that was
/// dropped); maps without one return 0. Output buffers arrive zeroed and
/// correctly shaped.
pub trait RowLinearMap: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn apply(&self, input: &Matrix, output: &mut Matrix) -> f64;
    fn adjoint(&self, grad_out: &Matrix, grad_in: &mut Matrix);
    fn name(&self) -> &'static str {
        "linear-map"
    }
}

enum Op {
    Leaf,
    /// `x · Wᵀ + b`, with `W` shaped `out × in` and `b` a `1 × out` row.
    Linear { x: usize, w: usize, b: usize },
    /// `a · b`.
    MatMul { a: usize, b: usize },
    Relu { x: usize },
    LinComb { terms: Vec<(usize, f64)> },
    /// Elementwise product; `b` may be full-shape, a `1 × cols` row, or `1 × 1`.
    Hadamard { a: usize, b: usize },
    Map { x: usize, map: Arc<dyn RowLinearMap> },
    /// Mean over all elements of `(pred − target)²`, a `1 × 1` node.
    MeanSquaredError { pred: usize, target: Matrix },
    Sum { x: usize },
    /// Mean over rows of `−log softmax(logits)[label]`. Stores the softmax.
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Matrix },
    /// Appends one constant column.
    AppendConst { x: usize },
    /// `rows × (n·c)` grouped as `n` blocks of `c`; averages over `c`.
    GroupMean { x: usize, group: usize },
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    max_residue: f64,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("max_residue", &self.max_residue)
            .finish()
    }
}

/// Neumaier-compensated summation; keeps loss values accurate to about
/// one ulp so that finite-difference checks see little rounding noise.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows(), m.cols())
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Largest diagnostic reported by any [`RowLinearMap`] node so far.
    pub fn max_residue(&self) -> f64 {
        self.max_residue
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.cols() {
            return Err(FodeError::shape("linear input", wv.cols(), xv.cols()));
        }
        if bv.shape() != (1, wv.rows()) {
            return Err(FodeError::shape(
                "linear bias",
                format!("1x{}", wv.rows()),
                shape_str(bv),
            ));
        }
        let (rows, out_dim) = (xv.rows(), wv.rows());
        let mut out = Matrix::zeros(rows, out_dim);
        for r in 0..rows {
            let xr = xv.row(r);
            let dst = out.row_mut(r);
            for o in 0..out_dim {
                let wr = wv.row(o);
                let mut acc = bv.as_slice()[o];
                for (a, b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                dst[o] = acc;
            }
        }
        Ok(self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            out,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu { x: x.0 }, out)
    }

    /// `Σ cᵢ·vᵢ` over equally shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(FodeError::EmptyInput);
        };
        let shape = self.value(first).shape();
        let mut out = Matrix::zeros(shape.0, shape.1);
        for &(v, c) in terms {
            let val = self.value(v);
            if val.shape() != shape {
                return Err(FodeError::shape(
                    "lin_comb",
                    format!("{}x{}", shape.0, shape.1),
                    shape_str(val),
                ));
            }
            out.axpy(c, val);
        }
        let terms = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        Ok(self.push(Op::LinComb { terms }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.lin_comb(&[(x, s)])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = match bv.shape() {
            s if s == av.shape() => Broadcast::Full,
            (1, c) if c == av.cols() => Broadcast::Row,
            (1, 1) => Broadcast::Scalar,
            _ => {
                return Err(FodeError::shape(
                    "hadamard",
                    shape_str(av),
                    shape_str(bv),
                ))
            }
        };
        let mut out = av.clone();
        let cols = av.cols();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            *v *= broadcast.pick(bv.as_slice(), i, cols);
        }
        Ok(self.push(Op::Hadamard { a: a.0, b: b.0 }, out))
    }

    pub fn map(&mut self, x: Var, map: Arc<dyn RowLinearMap>) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != map.in_dim() {
            return Err(FodeError::shape(map.name(), map.in_dim(), xv.cols()));
        }
        let mut out = Matrix::zeros(xv.rows(), map.out_dim());
        let residue = map.apply(xv, &mut out);
        self.max_residue = self.max_residue.max(residue);
        Ok(self.push(Op::Map { x: x.0, map }, out))
    }

    pub fn mse(&mut self, pred: Var, target: &Matrix) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(FodeError::shape("mse", shape_str(target), shape_str(pv)));
        }
        if pv.is_empty() {
            return Err(FodeError::EmptyInput);
        }
        let sum = compensated_sum(
            pv.as_slice()
                .iter()
                .zip(target.as_slice())
                .map(|(p, t)| (p - t) * (p - t)),
        );
        let loss = sum / pv.len() as f64;
        Ok(self.push(
            Op::MeanSquaredError {
                pred: pred.0,
                target: target.clone(),
            },
            Matrix::filled(1, 1, loss),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).as_slice().iter().sum();
        self.push(Op::Sum { x: x.0 }, Matrix::filled(1, 1, s))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(FodeError::shape("cross_entropy labels", lv.rows(), labels.len()));
        }
        if lv.rows() == 0 {
            return Err(FodeError::EmptyInput);
        }
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= lv.cols() {
                return Err(FodeError::InvalidArgument(format!(
                    "class index {label} out of range for {} classes",
                    lv.cols()
                )));
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            total += denom.ln() + max - row[label];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            Matrix::filled(1, 1, loss),
        ))
    }

    pub fn append_const(&mut self, x: Var, value: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.cols() + 1;
        let out = Matrix::from_fn(xv.rows(), cols, |r, c| {
            if c + 1 == cols {
                value
            } else {
                xv[(r, c)]
            }
        });
        self.push(Op::AppendConst { x: x.0 }, out)
    }

    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if group == 0 || xv.cols() % group != 0 {
            return Err(FodeError::shape(
                "group_mean",
                format!("multiple of {group}"),
                xv.cols(),
            ));
        }
        let blocks = xv.cols() / group;
        let out = Matrix::from_fn(xv.rows(), blocks, |r, b| {
            xv.row(r)[b * group..(b + 1) * group].iter().sum::<f64>() / group as f64
        });
        Ok(self.push(Op::GroupMean { x: x.0, group }, out))
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the
    /// output value). Nodes after `output` are ignored.
    pub fn backward(&self, output: Var, seed: &Matrix) -> Result<Gradients> {
        let out_val = self.value(output);
        if out_val.shape() != seed.shape() {
            return Err(FodeError::shape(
                "backward seed",
                shape_str(out_val),
                shape_str(seed),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // Leaf gradients are the result; keep them.
                    grads[i] = Some(g);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (rows, out_dim, in_dim) = (xv.rows(), wv.rows(), wv.cols());
                    let mut gx = Matrix::zeros(rows, in_dim);
                    let mut gw = Matrix::zeros(out_dim, in_dim);
                    let mut gb = Matrix::zeros(1, out_dim);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        for o in 0..out_dim {
                            let go = gr[o];
                            if go == 0.0 {
                                continue;
                            }
                            gb.as_mut_slice()[o] += go;
                            for (d, &wv_) in gx.row_mut(r).iter_mut().zip(wv.row(o)) {
                                *d += go * wv_;
                            }
                            for (d, &xv_) in gw.row_mut(o).iter_mut().zip(xr) {
                                *d += go * xv_;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = g.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = g;
                    for (d, &v) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        // Subgradient at the kink is 0.
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LinComb { terms } => {
                    for &(v, c) in terms {
                        accumulate(&mut grads, v, g.scale(c));
                    }
                }
                Op::Hadamard { a, b } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let cols = av.cols();
                    let broadcast = if bv.shape() == av.shape() {
                        Broadcast::Full
                    } else if bv.rows() == 1 && bv.cols() == cols {
                        Broadcast::Row
                    } else {
                        Broadcast::Scalar
                    };
                    let mut ga = g.clone();
                    for (i, d) in ga.as_mut_slice().iter_mut().enumerate() {
                        *d *= broadcast.pick(bv.as_slice(), i, cols);
                    }
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    for (i, (&gi, &ai)) in g.as_slice().iter().zip(av.as_slice()).enumerate() {
                        let slot = match broadcast {
                            Broadcast::Full => i,
                            Broadcast::Row => i % cols,
                            Broadcast::Scalar => 0,
                        };
                        gb.as_mut_slice()[slot] += gi * ai;
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Map { x, map } => {
                    let mut gx = Matrix::zeros(g.rows(), map.in_dim());
                    map.adjoint(&g, &mut gx);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanSquaredError { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let scale = 2.0 * g.as_slice()[0] / pv.len() as f64;
                    let mut gp = pv.clone();
                    for (d, &t) in gp.as_mut_slice().iter_mut().zip(target.as_slice()) {
                        *d = scale * (*d - t);
                    }
                    accumulate(&mut grads, *pred, gp);
                }
                Op::Sum { x } => {
                    let xv = &self.nodes[*x].value;
                    let gx = Matrix::filled(xv.rows(), xv.cols(), g.as_slice()[0]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.as_slice()[0] / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        gl[(r, label)] -= 1.0;
                    }
                    for v in gl.as_mut_slice() {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::AppendConst { x } => {
                    let cols = self.nodes[*x].value.cols();
                    let gx = Matrix::from_fn(g.rows(), cols, |r, c| g[(r, c)]);
                    accumulate(&mut grads, *x, gx);
                }
                Op::GroupMean { x, group } => {
                    let xv = &self.nodes[*x].value;
                    let inv = 1.0 / *group as f64;
                    let gx = Matrix::from_fn(xv.rows(), xv.cols(), |r, c| g[(r, c / group)] * inv);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Full,
    Row,
    Scalar,
}

impl Broadcast {
    #[inline]
    fn pick(self, b: &[f64], i: usize, cols: usize) -> f64 {
        match self {
            Broadcast::Full => b[i],
            Broadcast::Row => b[i % cols],
            Broadcast::Scalar => b[0],
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient at `v`, or `None` if the output does not depend on it (or
    /// `v` is not a leaf).
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient at `v`, zero-filled to `v`'s shape if absent.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}
