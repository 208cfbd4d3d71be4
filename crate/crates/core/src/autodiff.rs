//! A small tape-based reverse-mode differentiation engine over row-major
//! matrices.
//!
//! Every value in the transformer is a 2-D matrix (sequence × channels), so the
//! tape only needs matrix ops. Parameters live in a [`ParamStore`] and are
//! referenced by the tape without copying; gradients come back keyed by
//! [`ParamId`].

use std::fmt::{Debug, Display};

use ndarray::{s, Array1, Array2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Floating point scalar usable by the tape (`f32` or `f64`).
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the float type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
}

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Element-type conversion, used to evaluate the same weights at another
    /// precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap()),
                })
                .collect(),
        }
    }
}

/// Gradients of a scalar with respect to every parameter touched by a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn squared_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&x| x * x).sum::<T>())
            .sum()
    }

    pub fn scaled(self, factor: T) -> Self {
        Self {
            grads: self.grads.into_iter().map(|g| g.map(|g| g.mapv(|x| x * factor))).collect(),
        }
    }

    /// `self + factor * other`, treating missing entries as zero.
    pub fn add_scaled(mut self, other: &Self, factor: T) -> Self {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(t) = theirs else { continue };
            match mine {
                Some(m) => m.scaled_add(factor, t),
                None => *mine = Some(t.mapv(|x| x * factor)),
            }
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanSquare(Var),
}

struct Node<T> {
    op: Op,
    value: Option<Array2<T>>,
    /// Per-row inverse standard deviation for `NormalizeRows`.
    aux: Option<Array1<T>>,
}

const GELU_C: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Recording of one forward pass.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(value)) => value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(Op::Sub(a, b), out)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(Op::AddRow(a, row), out)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        self.push(Op::MulRow(a, row), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * T::lit(factor);
        self.push(Op::Scale(a, factor), out)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
        let c = T::lit(GELU_C);
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .mapv(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        self.push(Op::Gelu(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum: T = row.iter().copied().sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Zero-mean, unit-variance rows (the affine part of layer norm is
    /// applied separately with `mul_row`/`add_row`).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::lit(x.ncols() as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut out = x.clone();
        let mut inv = Array1::zeros(x.nrows());
        for (mut row, inv_std) in out.rows_mut().into_iter().zip(inv.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            *inv_std = T::one() / (var + eps).sqrt();
            let s = *inv_std;
            row.mapv_inplace(|v| v * s);
        }
        self.nodes.push(Node {
            op: Op::NormalizeRows(a),
            value: Some(out),
            aux: Some(inv),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Mean of squared entries, as a `1 × 1` matrix.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.iter().map(|&v| v * v).sum::<T>() / T::lit(x.len() as f64);
        self.push(Op::MeanSquare(a), Array2::from_elem((1, 1), m))
    }

    pub fn scalar(&self, v: Var) -> T {
        let x = self.value(v);
        debug_assert_eq!(x.dim(), (1, 1));
        x[[0, 0]]
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let seed = Array2::from_elem((1, 1), T::one());
        self.backward_with(output, seed)
    }

    /// Reverse sweep with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Array2<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        let mut param_grads: Vec<Option<Array2<T>>> = vec![None; self.params.len()];

        fn acc<T: Real>(slot: &mut Option<Array2<T>>, delta: Array2<T>) {
            match slot {
                Some(g) => *g += &delta,
                None => *slot = Some(delta),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => acc(&mut param_grads[id.0], g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads[a.0], da);
                    acc(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], g.clone());
                    acc(&mut grads[a.0], g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[b.0], g.mapv(|x| -x));
                    acc(&mut grads[a.0], g);
                }
                Op::AddRow(a, r) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[r.0], dr);
                    acc(&mut grads[a.0], g);
                }
                Op::MulRow(a, r) => {
                    let dr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &g * self.value(*r);
                    acc(&mut grads[r.0], dr);
                    acc(&mut grads[a.0], da);
                }
                Op::Scale(a, f) => acc(&mut grads[a.0], g * T::lit(*f)),
                Op::Gelu(a) => {
                    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
                    let c = T::lit(GELU_C);
                    let half = T::lit(0.5);
                    let three_c = T::lit(3.0 * GELU_C);
                    let mut da = g;
                    Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * k * (T::one() + three_c * x * x);
                        *d *= half * (T::one() + t) + half * x * dt;
                    });
                    acc(&mut grads[a.0], da);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut da = g;
                    for (mut drow, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                        let dot: T = drow.iter().zip(yrow.iter()).map(|(&d, &y)| d * y).sum();
                        Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d = y * (*d - dot));
                    }
                    acc(&mut grads[a.0], da);
                }
                Op::NormalizeRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let inv = node.aux.as_ref().unwrap();
                    let n = T::lit(y.ncols() as f64);
                    let mut da = g;
                    for ((mut drow, yrow), &s) in
                        da.rows_mut().into_iter().zip(y.rows()).zip(inv.iter())
                    {
                        let mean_g = drow.iter().copied().sum::<T>() / n;
                        let mean_gy =
                            drow.iter().zip(yrow.iter()).map(|(&d, &y)| d * y).sum::<T>() / n;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|d, &y| *d = s * (*d - mean_g - y * mean_gy));
                    }
                    acc(&mut grads[a.0], da);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Array2::zeros(src.raw_dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[a.0], da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let dp = g.slice(s![.., offset..offset + w]).to_owned();
                        acc(&mut grads[p.0], dp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        let dp = g.slice(s![offset..offset + h, ..]).to_owned();
                        acc(&mut grads[p.0], dp);
                        offset += h;
                    }
                }
                Op::MeanSquare(a) => {
                    let x = self.value(*a);
                    let f = g[[0, 0]] * T::lit(2.0 / x.len() as f64);
                    acc(&mut grads[a.0], x * f);
                }
            }
        }
        Gradients { grads: param_grads }
    }
}
