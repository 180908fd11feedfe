//! Matrix-level reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so every node's operands have
//! smaller indices and walking the indices backwards is a reverse
//! topological order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    /// `W x (+ b)` with `b` broadcast over columns.
    Affine { w: usize, b: Option<usize>, x: usize },
    Relu { x: usize },
    VStack { parts: Vec<usize> },
    Columns { x: usize, start: usize },
    /// `A z + B u + Σ_i H_i (z ∘ u_i)` with `u` a constant.
    Bilinear { a: usize, b: usize, h: Vec<usize>, z: usize, u: DMatrix<T> },
    Sub { a: usize, b: usize },
    SumSquares { x: usize, scale: T },
    WeightedSum { terms: Vec<(usize, T)> },
    /// Scalar with an externally supplied gradient.
    Linearized { grads: Vec<(usize, DMatrix<T>)> },
}

#[derive(Debug, Clone)]
pub struct Tape<T: Real> {
    values: Vec<DMatrix<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<DMatrix<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: DMatrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|v| self.needs_grad[*v])
    }

    /// Parameter (`requires_grad = true`) or constant input.
    pub fn leaf(&mut self, value: DMatrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &DMatrix<T> {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0][(0, 0)]
    }

    pub fn affine(&mut self, w: Var, b: Option<Var>, x: Var) -> Var {
        let (wv, xv) = (&self.values[w.0], &self.values[x.0]);
        let mut out = DMatrix::zeros(wv.nrows(), xv.ncols());
        T::gemm_t(T::one(), wv, false, xv, false, T::zero(), &mut out);
        if let Some(b) = b {
            let bias = self.values[b.0].column(0).into_owned();
            for mut col in out.column_iter_mut() {
                col += &bias;
            }
        }
        let ng = self.any_grad(&[w.0, x.0]) || b.is_some_and(|b| self.needs_grad[b.0]);
        self.push(out, Op::Affine { w: w.0, b: b.map(|b| b.0), x: x.0 }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs_grad[x.0];
        self.push(out, Op::Relu { x: x.0 }, ng)
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let cols = self.values[parts[0].0].ncols();
        let rows: usize = parts.iter().map(|p| self.values[p.0].nrows()).sum();
        let mut out = DMatrix::zeros(rows, cols);
        let mut r = 0;
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.ncols(), cols, "vstack column mismatch");
            out.rows_mut(r, v.nrows()).copy_from(v);
            r += v.nrows();
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.any_grad(&idx);
        self.push(out, Op::VStack { parts: idx }, ng)
    }

    pub fn columns(&mut self, x: Var, start: usize, count: usize) -> Var {
        let out = self.values[x.0].columns(start, count).into_owned();
        let ng = self.needs_grad[x.0];
        self.push(out, Op::Columns { x: x.0, start }, ng)
    }

    /// Bilinear Koopman step applied column-wise; `h` may be empty.
    pub fn bilinear(&mut self, a: Var, b: Var, h: &[Var], z: Var, u: DMatrix<T>) -> Var {
        let zv = &self.values[z.0];
        let av = &self.values[a.0];
        let mut out = DMatrix::zeros(av.nrows(), zv.ncols());
        T::gemm_t(T::one(), av, false, zv, false, T::zero(), &mut out);
        T::gemm_t(T::one(), &self.values[b.0], false, &u, false, T::one(), &mut out);
        for (i, hv) in h.iter().enumerate() {
            let zu = scale_columns(zv, u.row(i).iter().copied());
            T::gemm_t(T::one(), &self.values[hv.0], false, &zu, false, T::one(), &mut out);
        }
        let mut idx = vec![a.0, b.0, z.0];
        idx.extend(h.iter().map(|v| v.0));
        let ng = self.any_grad(&idx);
        let h = h.iter().map(|v| v.0).collect();
        self.push(out, Op::Bilinear { a: a.0, b: b.0, h, z: z.0, u }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = &self.values[a.0] - &self.values[b.0];
        let ng = self.any_grad(&[a.0, b.0]);
        self.push(out, Op::Sub { a: a.0, b: b.0 }, ng)
    }

    /// `scale · Σ x²` as a 1×1 node.
    pub fn sum_squares(&mut self, x: Var, scale: T) -> Var {
        let out = DMatrix::from_element(1, 1, scale * self.values[x.0].norm_squared());
        let ng = self.needs_grad[x.0];
        self.push(out, Op::SumSquares { x: x.0, scale }, ng)
    }

    /// `Σ w_k s_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms
            .iter()
            .fold(T::zero(), |acc, (v, w)| acc + *w * self.values[v.0][(0, 0)]);
        let idx: Vec<usize> = terms.iter().map(|t| t.0 .0).collect();
        let ng = self.any_grad(&idx);
        let terms = terms.iter().map(|(v, w)| (v.0, *w)).collect();
        self.push(DMatrix::from_element(1, 1, total), Op::WeightedSum { terms }, ng)
    }

    /// Scalar whose value and gradient were computed outside the tape.
    pub fn linearized(&mut self, value: T, grads: Vec<(Var, DMatrix<T>)>) -> Var {
        let ng = grads.iter().any(|(v, _)| self.needs_grad[v.0]);
        let grads = grads.into_iter().map(|(v, g)| (v.0, g)).collect();
        self.push(DMatrix::from_element(1, 1, value), Op::Linearized { grads }, ng)
    }

    /// Reverse pass from a scalar `root`. Leaf gradients are kept and can
    /// be read with [`Tape::grad`]; intermediate adjoints are released.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].shape() != (1, 1) {
            return Err(Error::Dimension("backward needs a scalar root".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[root.0] = Some(DMatrix::from_element(1, 1, T::one()));
        for i in (0..=root.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(adj) = self.grads[i].take() else { continue };
            let mut acc = Adjoints {
                values: &self.values,
                needs_grad: &self.needs_grad,
                grads: &mut self.grads,
            };
            acc.propagate(&self.ops[i], adj, i);
        }
        Ok(())
    }

    /// Gradient of the last backward root with respect to a leaf; zero if
    /// the leaf did not influence it.
    pub fn grad(&self, v: Var) -> DMatrix<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(self.values[v.0].nrows(), self.values[v.0].ncols()))
    }
}

/// Split borrow of a tape during the reverse pass: node values are read
/// while adjoints are written.
struct Adjoints<'a, T: Real> {
    values: &'a [DMatrix<T>],
    needs_grad: &'a [bool],
    grads: &'a mut [Option<DMatrix<T>>],
}

impl<T: Real> Adjoints<'_, T> {
    /// Adds `contribution` to the adjoint of `target`, taking ownership
    /// when it is the first one.
    fn add(&mut self, target: usize, contribution: DMatrix<T>) {
        match &mut self.grads[target] {
            Some(g) => *g += contribution,
            slot => *slot = Some(contribution),
        }
    }

    /// In-place update of the adjoint of `target`, zero-initialized.
    fn update(&mut self, target: usize, f: impl FnOnce(&mut DMatrix<T>)) {
        let (r, c) = self.values[target].shape();
        f(self.grads[target].get_or_insert_with(|| DMatrix::zeros(r, c)));
    }

    /// `adjoint(target) += α · op(a) · op(b)`.
    fn add_product(&mut self, target: usize, a: &DMatrix<T>, ta: bool, b: &DMatrix<T>, tb: bool) {
        let (r, c) = self.values[target].shape();
        let beta = if self.grads[target].is_some() { T::one() } else { T::zero() };
        let g = self.grads[target].get_or_insert_with(|| DMatrix::zeros(r, c));
        T::gemm_t(T::one(), a, ta, b, tb, beta, g);
    }

    fn propagate(&mut self, op: &Op<T>, adj: DMatrix<T>, node: usize) {
        let ng = self.needs_grad;
        let values = self.values;
        match op {
            Op::Leaf => {}
            Op::Affine { w, b, x } => {
                if ng[*w] {
                    self.add_product(*w, &adj, false, &values[*x], true);
                }
                if let Some(b) = *b {
                    if ng[b] {
                        let sums = adj.column_sum();
                        self.update(b, |g| {
                            let mut c = g.column_mut(0);
                            c += &sums;
                        });
                    }
                }
                if ng[*x] {
                    self.add_product(*x, &values[*w], true, &adj, false);
                }
            }
            Op::Relu { x } => {
                if ng[*x] {
                    let out = &values[node];
                    let mut masked = adj;
                    for (a, o) in masked.iter_mut().zip(out.iter()) {
                        if !(*o > T::zero()) {
                            *a = T::zero();
                        }
                    }
                    self.add(*x, masked);
                }
            }
            Op::VStack { parts } => {
                let mut r = 0;
                for p in parts {
                    let rows = values[*p].nrows();
                    if ng[*p] {
                        self.add(*p, adj.rows(r, rows).into_owned());
                    }
                    r += rows;
                }
            }
            Op::Columns { x, start } => {
                if ng[*x] {
                    let start = *start;
                    self.update(*x, |g| {
                        let mut block = g.columns_mut(start, adj.ncols());
                        block += &adj;
                    });
                }
            }
            Op::Bilinear { a, b, h, z, u } => {
                let zv = &values[*z];
                if ng[*a] {
                    self.add_product(*a, &adj, false, zv, true);
                }
                if ng[*b] {
                    self.add_product(*b, &adj, false, u, true);
                }
                // adj (z ∘ u_i)ᵀ = (adj ∘ u_i) zᵀ
                let scaled: Vec<DMatrix<T>> = (0..h.len())
                    .map(|i| scale_columns(&adj, u.row(i).iter().copied()))
                    .collect();
                for (hi, s) in h.iter().zip(&scaled) {
                    if ng[*hi] {
                        self.add_product(*hi, s, false, zv, true);
                    }
                }
                if ng[*z] {
                    // Aᵀ adj + Σ_i H_iᵀ (adj ∘ u_i)
                    self.add_product(*z, &values[*a], true, &adj, false);
                    for (hi, s) in h.iter().zip(&scaled) {
                        self.add_product(*z, &values[*hi], true, s, false);
                    }
                }
            }
            Op::Sub { a, b } => {
                if ng[*b] {
                    self.add(*b, -&adj);
                }
                if ng[*a] {
                    self.add(*a, adj);
                }
            }
            Op::SumSquares { x, scale } => {
                if ng[*x] {
                    let k = T::lit(2.0) * *scale * adj[(0, 0)];
                    self.add(*x, &values[*x] * k);
                }
            }
            Op::WeightedSum { terms } => {
                for (v, w) in terms {
                    if ng[*v] {
                        let d = *w * adj[(0, 0)];
                        self.update(*v, |g| g[(0, 0)] += d);
                    }
                }
            }
            Op::Linearized { grads } => {
                let s = adj[(0, 0)];
                for (v, gr) in grads {
                    if ng[*v] {
                        self.add(*v, gr * s);
                    }
                }
            }
        }
    }
}

/// Multiplies column `j` of `m` by the `j`-th scale.
fn scale_columns<T: Real>(m: &DMatrix<T>, scales: impl Iterator<Item = T>) -> DMatrix<T> {
    let mut out = m.clone();
    for (mut col, s) in out.column_iter_mut().zip(scales) {
        col *= s;
    }
    out
}
