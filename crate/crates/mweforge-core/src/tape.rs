//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in append order; [`Tape::backward`]
//! walks the records in exact reverse order and accumulates gradients into
//! per-node buffers (`+=`, so shared parameters sum their contributions).
//! [`Tape::custom_node`] inserts a node whose backward rule is supplied by
//! the caller and applied verbatim — the hook used for surrogate gradients
//! and gradient reversal.

use std::cell::{Cell, RefCell};

use thiserror::Error;

use crate::tensor::{shape_string, Tensor, TensorError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward already ran on this tape; call reset() first")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got {shape}")]
    LossNotScalar { shape: String },
    #[error("gradients not computed yet; run backward first")]
    NoGradients,
    #[error("gold class index {index} out of range for {classes} classes")]
    GoldIndexOutOfRange { index: usize, classes: usize },
    #[error("gold labels ({labels}) do not match logits rows ({rows})")]
    GoldLengthMismatch { labels: usize, rows: usize },
    #[error("row id {index} out of range for table with {size} rows")]
    RowIdOutOfRange { index: usize, size: usize },
    #[error("custom backward returned {got} gradients for {expected} inputs")]
    CustomGradCount { expected: usize, got: usize },
    #[error("custom backward gradient {index} has shape {got}, input has shape {expected}")]
    CustomGradShape {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("non-finite loss value in {context}")]
    NonFinite { context: String },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &[Tensor<S>]) -> Result<Vec<Tensor<S>>, AutodiffError>>;

enum Rule<S> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: S },
    SigmoidK { a: Var, k: S },
    Matmul { a: Var, b: Var },
    AddRowBias { a: Var, bias: Var },
    ZeroDiag { a: Var },
    Transpose { a: Var },
    Sum { a: Var },
    MeanRows { a: Var },
    SelectRow { a: Var, row: usize },
    ShiftRows { a: Var, offset: isize },
    GatherRows { table: Var, ids: Vec<usize> },
    SoftmaxXent { logits: Var, gold: Vec<usize>, probs: Tensor<S> },
    Custom { inputs: Vec<Var>, backward: BackwardFn<S> },
}

struct Node<S> {
    value: Tensor<S>,
    rule: Rule<S>,
}

/// Append-only operation record with gradient buffers.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    grads: RefCell<Vec<Tensor<S>>>,
    done: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, rule: Rule<S>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, rule });
        Var(nodes.len() - 1)
    }

    /// Registers a leaf (parameter or input constant).
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Rule::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<Tensor<S>, AutodiffError> {
        if !self.done.get() {
            return Err(AutodiffError::NoGradients);
        }
        Ok(self.grads.borrow()[v.0].clone())
    }

    /// Clears gradients so another backward pass may run on the same tape.
    pub fn reset(&self) {
        self.grads.borrow_mut().clear();
        self.done.set(false);
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.add(&nodes[b.0].value)?
        };
        Ok(self.push(value, Rule::Add { a, b }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mul(&nodes[b.0].value)?
        };
        Ok(self.push(value, Rule::Mul { a, b }))
    }

    pub fn scale(&self, a: Var, factor: S) -> Var {
        let value = self.nodes.borrow()[a.0].value.scale(factor);
        self.push(value, Rule::Scale { a, factor })
    }

    /// Scaled logistic `1 / (1 + exp(-k x))`, elementwise.
    pub fn sigmoid_k(&self, a: Var, k: S) -> Var {
        let value = self.nodes.borrow()[a.0].value.sigmoid_k(k);
        self.push(value, Rule::SigmoidK { a, k })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(value, Rule::Matmul { a, b }))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row_bias(&self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.add_row_bias(&nodes[bias.0].value)?
        };
        Ok(self.push(value, Rule::AddRowBias { a, bias }))
    }

    /// Copy with the main diagonal zeroed; diagonal entries get no gradient.
    pub fn zero_diag(&self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes.borrow()[a.0].value.zero_diag()?;
        Ok(self.push(value, Rule::ZeroDiag { a }))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.transpose();
        self.push(value, Rule::Transpose { a })
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes.borrow()[a.0].value.sum());
        self.push(value, Rule::Sum { a })
    }

    /// Mean over rows of a matrix, as a 1-row matrix.
    pub fn mean_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            let n = S::from_usize_lit(t.rows());
            t.column_sums().scale(S::one() / n)
        };
        let cols = value.len();
        let value = Tensor::matrix(1, cols, value.data().to_vec());
        self.push(value, Rule::MeanRows { a })
    }

    /// One row of a matrix, as a 1-row matrix.
    pub fn select_row(&self, a: Var, row: usize) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if row >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    what: "row".to_string(),
                    index: row,
                    size: t.rows(),
                }
                .into());
            }
            Tensor::matrix(1, t.cols(), t.row(row).to_vec())
        };
        Ok(self.push(value, Rule::SelectRow { a, row }))
    }

    /// Row shift with zero padding: `out[i] = a[i + offset]` where valid.
    pub fn shift_rows(&self, a: Var, offset: isize) -> Var {
        let value = self.nodes.borrow()[a.0].value.shift_rows(offset);
        self.push(value, Rule::ShiftRows { a, offset })
    }

    /// Embedding lookup: stacks `table[ids[i]]` rows; backward scatter-adds.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            let rows = t.rows();
            let cols = t.cols();
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(AutodiffError::RowIdOutOfRange { index: id, size: rows });
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), cols, data)
        };
        Ok(self.push(
            value,
            Rule::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of softmaxed logit rows against gold class indices.
    ///
    /// Returns the scalar loss node and the row-stochastic probability
    /// matrix. The backward rule is `(p - onehot) / n` into the logits.
    pub fn softmax_cross_entropy(
        &self,
        logits: Var,
        gold: &[usize],
    ) -> Result<(Var, Tensor<S>), AutodiffError> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[logits.0].value;
            let (n, c) = (t.rows(), t.cols());
            if gold.len() != n {
                return Err(AutodiffError::GoldLengthMismatch {
                    labels: gold.len(),
                    rows: n,
                });
            }
            let mut probs = Tensor::zeros(&[n, c]);
            let mut loss = S::zero();
            for i in 0..n {
                let g = gold[i];
                if g >= c {
                    return Err(AutodiffError::GoldIndexOutOfRange { index: g, classes: c });
                }
                let row = t.row(i);
                let mut max = row[0];
                for &v in row {
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = S::zero();
                for &v in row {
                    sum = sum + (v - max).exp();
                }
                let lse = max + sum.ln();
                for j in 0..c {
                    probs.set2(i, j, (row[j] - lse).exp());
                }
                loss = loss + (lse - row[g]);
            }
            loss = loss / S::from_usize_lit(n);
            (loss, probs)
        };
        let var = self.push(
            Tensor::scalar(loss),
            Rule::SoftmaxXent {
                logits,
                gold: gold.to_vec(),
                probs: probs.clone(),
            },
        );
        Ok((var, probs))
    }

    /// Inserts a node with a caller-supplied forward value and backward rule.
    ///
    /// `forward` receives the input values; `backward` receives the upstream
    /// gradient and the input values and must return one gradient per input,
    /// each matching its input's shape. The backward rule is applied
    /// verbatim: nothing is differentiated through `forward`.
    pub fn custom_node(
        &self,
        inputs: &[Var],
        forward: impl FnOnce(&[Tensor<S>]) -> Result<Tensor<S>, AutodiffError>,
        backward: impl Fn(&Tensor<S>, &[Tensor<S>]) -> Result<Vec<Tensor<S>>, AutodiffError> + 'static,
    ) -> Result<Var, AutodiffError> {
        let values: Vec<Tensor<S>> = {
            let nodes = self.nodes.borrow();
            inputs.iter().map(|v| nodes[v.0].value.clone()).collect()
        };
        let out = forward(&values)?;
        Ok(self.push(
            out,
            Rule::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        ))
    }

    /// Convenience: `sum_i factor_i * var_i` as a chain of scale/add nodes.
    pub fn weighted_sum(&self, terms: &[(Var, S)]) -> Result<Var, AutodiffError> {
        assert!(!terms.is_empty(), "weighted_sum of no terms");
        let mut acc = self.scale(terms[0].0, terms[0].1);
        for &(v, w) in &terms[1..] {
            let scaled = self.scale(v, w);
            acc = self.add(acc, scaled)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar loss node. Visits nodes in exact reverse
    /// append order; every leaf's gradient buffer is populated (zeros when
    /// the leaf does not reach the loss).
    pub fn backward(&self, loss: Var) -> Result<(), AutodiffError> {
        if self.done.get() {
            return Err(AutodiffError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(AutodiffError::LossNotScalar {
                shape: shape_string(nodes[loss.0].value.shape()),
            });
        }

        let mut grads: Vec<Tensor<S>> = nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0] = Tensor::scalar(S::one());

        for idx in (0..nodes.len()).rev() {
            let g = grads[idx].clone();
            match &nodes[idx].rule {
                Rule::Leaf => {}
                Rule::Add { a, b } => {
                    grads[a.0].add_assign(&g);
                    grads[b.0].add_assign(&g);
                }
                Rule::Mul { a, b } => {
                    let da = g.mul(&nodes[b.0].value)?;
                    let db = g.mul(&nodes[a.0].value)?;
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Rule::Scale { a, factor } => {
                    grads[a.0].add_assign(&g.scale(*factor));
                }
                Rule::SigmoidK { a, k } => {
                    // d sigmoid_k / dx = k * y * (1 - y), with y the stored output.
                    let y = &nodes[idx].value;
                    let da = g.zip_map(y, "sigmoid_k backward", |gi, yi| {
                        gi * *k * yi * (S::one() - yi)
                    })?;
                    grads[a.0].add_assign(&da);
                }
                Rule::Matmul { a, b } => {
                    let da = g.matmul(&nodes[b.0].value.transpose())?;
                    let db = nodes[a.0].value.transpose().matmul(&g)?;
                    grads[a.0].add_assign(&da);
                    grads[b.0].add_assign(&db);
                }
                Rule::AddRowBias { a, bias } => {
                    grads[a.0].add_assign(&g);
                    grads[bias.0].add_assign(&g.column_sums());
                }
                Rule::ZeroDiag { a } => {
                    grads[a.0].add_assign(&g.zero_diag()?);
                }
                Rule::Transpose { a } => {
                    grads[a.0].add_assign(&g.transpose());
                }
                Rule::Sum { a } => {
                    let gi = g.item();
                    let da = Tensor::full(nodes[a.0].value.shape(), gi);
                    grads[a.0].add_assign(&da);
                }
                Rule::MeanRows { a } => {
                    let n = nodes[a.0].value.rows();
                    let w = S::one() / S::from_usize_lit(n);
                    let cols = nodes[a.0].value.cols();
                    let mut da = Tensor::zeros(&[n, cols]);
                    for i in 0..n {
                        for j in 0..cols {
                            da.set2(i, j, g.data()[j] * w);
                        }
                    }
                    grads[a.0].add_assign(&da);
                }
                Rule::SelectRow { a, row } => {
                    let cols = nodes[a.0].value.cols();
                    let mut da = Tensor::zeros(nodes[a.0].value.shape());
                    for j in 0..cols {
                        da.set2(*row, j, g.data()[j]);
                    }
                    grads[a.0].add_assign(&da);
                }
                Rule::ShiftRows { a, offset } => {
                    grads[a.0].add_assign(&g.shift_rows(-offset));
                }
                Rule::GatherRows { table, ids } => {
                    let cols = nodes[table.0].value.cols();
                    let mut dt = Tensor::zeros(nodes[table.0].value.shape());
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            let cur = dt.get2(id, j);
                            dt.set2(id, j, cur + g.get2(i, j));
                        }
                    }
                    grads[table.0].add_assign(&dt);
                }
                Rule::SoftmaxXent { logits, gold, probs } => {
                    let gi = g.item();
                    let (n, c) = (probs.rows(), probs.cols());
                    let inv_n = S::one() / S::from_usize_lit(n);
                    let mut dl = probs.clone();
                    for (i, &gidx) in gold.iter().enumerate() {
                        let cur = dl.get2(i, gidx);
                        dl.set2(i, gidx, cur - S::one());
                    }
                    for i in 0..n {
                        for j in 0..c {
                            dl.set2(i, j, dl.get2(i, j) * inv_n * gi);
                        }
                    }
                    grads[logits.0].add_assign(&dl);
                }
                Rule::Custom { inputs, backward } => {
                    let values: Vec<Tensor<S>> =
                        inputs.iter().map(|v| nodes[v.0].value.clone()).collect();
                    let input_grads = backward(&g, &values)?;
                    if input_grads.len() != inputs.len() {
                        return Err(AutodiffError::CustomGradCount {
                            expected: inputs.len(),
                            got: input_grads.len(),
                        });
                    }
                    for (i, (v, ig)) in inputs.iter().zip(&input_grads).enumerate() {
                        if ig.shape() != nodes[v.0].value.shape() {
                            return Err(AutodiffError::CustomGradShape {
                                index: i,
                                expected: shape_string(nodes[v.0].value.shape()),
                                got: shape_string(ig.shape()),
                            });
                        }
                        grads[v.0].add_assign(ig);
                    }
                }
            }
        }

        *self.grads.borrow_mut() = grads;
        self.done.set(true);
        Ok(())
    }
}

/// Relative-error metric used by all gradient checks:
/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error<S: Scalar>(a: S, b: S) -> S {
    let floor = S::from_f64_lit(1e-8);
    let denom = floor.max(a.abs() + b.abs());
    (a - b).abs() / denom
}

/// Compares the tape gradient of `f` against central finite differences and
/// returns the maximum relative error over all coordinates.
///
/// `f` must build the same deterministic scalar computation on any tape it
/// is given. Central differences use `(f(x + eps e_i) - f(x - eps e_i)) /
/// (2 eps)`.
pub fn grad_check<S, F>(f: F, params: &Tensor<S>, eps: S) -> Result<S, AutodiffError>
where
    S: Scalar,
    F: Fn(&Tape<S>, Var) -> Result<Var, AutodiffError>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), &[params.clone()], eps)
}

/// Multi-parameter version of [`grad_check`]; returns the max relative error
/// over the coordinates of every parameter tensor.
pub fn grad_check_multi<S, F>(f: F, params: &[Tensor<S>], eps: S) -> Result<S, AutodiffError>
where
    S: Scalar,
    F: Fn(&Tape<S>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |tensors: &[Tensor<S>]| -> Result<S, AutodiffError> {
        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite {
                context: "grad_check objective".to_string(),
            });
        }
        Ok(v)
    };

    // Tape gradients at the base point.
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(AutodiffError::NonFinite {
            context: "grad_check objective".to_string(),
        });
    }
    tape.backward(loss)?;
    let tape_grads: Vec<Tensor<S>> = vars
        .iter()
        .map(|&v| tape.grad(v))
        .collect::<Result<_, _>>()?;

    let two = S::from_f64_lit(2.0);
    let mut max_err = S::zero();
    let mut work: Vec<Tensor<S>> = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let fd = (plus - minus) / (two * eps);
            let err = relative_error(tape_grads[p].data()[i], fd);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
