//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] is a Wengert list: every operation appends one node holding its
//! output value and the operation that produced it. [`Tape::backward`] walks
//! the list in reverse, accumulating adjoints, and deposits parameter
//! gradients into the owning [`ParamStore`].
//!
//! The same node evaluation routine is used when recording and when
//! replaying ([`Tape::replay`]), so replay reproduces the recorded values
//! bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth hidden nonlinearity, chosen once per network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    #[default]
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (S::one() + (-x).exp()),
        }
    }

    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
            Activation::Silu => {
                let s = S::one() / (S::one() + (-x).exp());
                s * (S::one() + x * (S::one() - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "silu" => Some(Activation::Silu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    ScaleRows(Var, Vec<S>),
    Activate(Var, Activation),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Clamp(Var, S, S),
    Min(Var, Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    /// `out_i = a_i·base_i + b_i·f_i` per row, with `b_i == 0` rows copying
    /// `a_i·base_i` exactly.
    AffineRows {
        base: Tensor<S>,
        base_coef: Vec<S>,
        coef: Vec<S>,
        f: Var,
    },
    /// Per-row isotropic Gaussian log-density of fixed `actions` around `mean`.
    GaussianLogProb {
        mean: Var,
        actions: Tensor<S>,
        stds: Vec<S>,
    },
}

#[derive(Clone, Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Recorded computation. Cheap to create; one per forward pass.
#[derive(Clone, Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of the `Input` nodes after a backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Log-density of `a` under N(mean, std²·I). Shared by the tape op and every
/// non-differentiated caller so stored and recomputed values agree exactly.
#[inline]
pub fn gaussian_logprob_row<S: Scalar>(mean: &[S], a: &[S], std: S) -> S {
    let mut sq = S::zero();
    for (&m, &x) in mean.iter().zip(a) {
        let d = x - m;
        sq += d * d;
    }
    let half_log_2pi = S::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    let dim = S::lit(mean.len() as f64);
    -sq / (S::lit(2.0) * std * std) - dim * (std.ln() + half_log_2pi)
}

impl<S: Scalar> Tape<S> {
    /// A tape whose graph can be differentiated.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape used only for evaluation; `backward` on it is an error.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Moves a node's value out without copying when it is the last node.
    pub fn take_value(mut self, v: Var) -> Tensor<S> {
        if v.0 + 1 == self.nodes.len() {
            self.nodes.pop().map(|n| n.value).unwrap_or_else(|| Tensor::zeros(&[1, 1]))
        } else {
            self.nodes[v.0].value.clone()
        }
    }

    fn push(&mut self, op: Op<S>) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn scale_rows(&mut self, a: Var, coef: Vec<S>) -> Result<Var> {
        self.push(Op::ScaleRows(a, coef))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.push(Op::Activate(a, act))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather(table, ids))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Min(a, b))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn affine_rows(
        &mut self,
        base: Tensor<S>,
        base_coef: Vec<S>,
        coef: Vec<S>,
        f: Var,
    ) -> Result<Var> {
        self.push(Op::AffineRows {
            base,
            base_coef,
            coef,
            f,
        })
    }

    pub fn gaussian_logprob(&mut self, mean: Var, actions: Tensor<S>, stds: Vec<S>) -> Result<Var> {
        self.push(Op::GaussianLogProb {
            mean,
            actions,
            stds,
        })
    }

    /// Re-evaluates every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<S>>> {
        let mut shadow: Vec<Node<S>> = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let value = match n.op {
                Op::Input | Op::Param(_) => n.value.clone(),
                _ => eval(&n.op, &shadow)?,
            };
            shadow.push(Node {
                value,
                op: n.op.clone(),
            });
        }
        Ok(shadow.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep from a scalar `loss`. Parameter adjoints are added to
    /// `params`' gradient slots; input adjoints are returned.
    pub fn backward(self, loss: Var, params: &mut ParamStore<S>) -> Result<Gradients<S>> {
        if !self.grad_enabled {
            return Err(contract("backward on a tape recorded without differentiation"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(contract("loss variable does not belong to this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    if params.grad(*id).shape() != g.shape() {
                        return Err(Error::Shape(format!(
                            "gradient for `{}` has shape {:?}",
                            params.name(*id),
                            g.shape()
                        )));
                    }
                    params.accumulate_grad(*id, &g);
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    accumulate(&mut grads, *a, matmul_nt(&g, bv));
                    accumulate(&mut grads, *b, matmul_tn(av, &g));
                }
                Op::AddBias(a, bias) => {
                    let m = g.cols();
                    let mut gb = vec![S::zero(); m];
                    for r in 0..g.rows() {
                        for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let bshape = nodes[bias.0].value.shape().to_vec();
                    accumulate(&mut grads, *bias, Tensor::raw(bshape, gb));
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    accumulate(&mut grads, *a, zip_map(&g, bv, |x, y| x * y));
                    accumulate(&mut grads, *b, zip_map(&g, av, |x, y| x * y));
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::AddScalar(a, _) => accumulate(&mut grads, *a, g),
                Op::ScaleRows(a, coef) => {
                    let mut out = g;
                    for (r, &c) in coef.iter().enumerate() {
                        out.row_mut(r).iter_mut().for_each(|v| *v *= c);
                    }
                    accumulate(&mut grads, *a, out);
                }
                Op::Activate(a, act) => {
                    let x = &nodes[a.0].value;
                    let act = *act;
                    accumulate(&mut grads, *a, zip_map(&g, x, |gv, xv| gv * act.derivative(xv)));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        let shape = nodes[p.0].value.shape().to_vec();
                        accumulate(&mut grads, *p, Tensor::raw(shape, data));
                    }
                }
                Op::Gather(table, ids) => {
                    let tv = &nodes[table.0].value;
                    let mut out = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in out.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, out);
                }
                Op::Square(a) => {
                    let x = &nodes[a.0].value;
                    let two = S::lit(2.0);
                    accumulate(&mut grads, *a, zip_map(&g, x, |gv, xv| gv * two * xv));
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let half = S::lit(0.5);
                    accumulate(&mut grads, *a, zip_map(&g, y, |gv, yv| gv * half / yv));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip_map(&g, y, |gv, yv| gv * yv));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[a.0].value;
                    let (lo, hi) = (*lo, *hi);
                    accumulate(
                        &mut grads,
                        *a,
                        zip_map(&g, x, |gv, xv| if xv >= lo && xv <= hi { gv } else { S::zero() }),
                    );
                }
                Op::Min(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let n = g.len();
                    let mut ga = vec![S::zero(); n];
                    let mut gb = vec![S::zero(); n];
                    for j in 0..n {
                        if av.data()[j] <= bv.data()[j] {
                            ga[j] = g.data()[j];
                        } else {
                            gb[j] = g.data()[j];
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::raw(av.shape().to_vec(), ga));
                    accumulate(&mut grads, *b, Tensor::raw(bv.shape().to_vec(), gb));
                }
                Op::SumRows(a) => {
                    let x = &nodes[a.0].value;
                    let c = x.cols();
                    let mut data = Vec::with_capacity(x.len());
                    for r in 0..x.rows() {
                        data.extend(std::iter::repeat_n(g.data()[r], c));
                    }
                    accumulate(&mut grads, *a, Tensor::raw(x.shape().to_vec(), data));
                }
                Op::Sum(a) => {
                    let x = &nodes[a.0].value;
                    accumulate(&mut grads, *a, Tensor::filled(x.shape(), g.data()[0]));
                }
                Op::Mean(a) => {
                    let x = &nodes[a.0].value;
                    let v = g.data()[0] / S::lit(x.len() as f64);
                    accumulate(&mut grads, *a, Tensor::filled(x.shape(), v));
                }
                Op::AffineRows { coef, f, .. } => {
                    let mut out = g;
                    for (r, &c) in coef.iter().enumerate() {
                        out.row_mut(r).iter_mut().for_each(|v| *v *= c);
                    }
                    accumulate(&mut grads, *f, out);
                }
                Op::GaussianLogProb {
                    mean,
                    actions,
                    stds,
                } => {
                    let m = &nodes[mean.0].value;
                    let mut out = Tensor::zeros(m.shape());
                    for r in 0..m.rows() {
                        let s = stds[r];
                        let k = g.data()[r] / (s * s);
                        for ((o, &mv), &av) in out.row_mut(r).iter_mut().zip(m.row(r)).zip(actions.row(r)) {
                            *o = k * (av - mv);
                        }
                    }
                    accumulate(&mut grads, *mean, out);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn same<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    a.expect_same_shape(b, what)
}

fn rows_match<S: Scalar>(t: &Tensor<S>, n: usize, what: &str) -> Result<()> {
    if t.rows() != n {
        return Err(Error::Shape(format!("{what}: {} rows vs {n} coefficients", t.rows())));
    }
    Ok(())
}

fn eval<S: Scalar>(op: &Op<S>, nodes: &[Node<S>]) -> Result<Tensor<S>> {
    let val = |v: &Var| -> Result<&Tensor<S>> {
        nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| contract("variable from another tape"))
    };
    Ok(match op {
        Op::Input | Op::Param(_) => return Err(contract("leaf nodes are not evaluated")),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
            }
            matmul(a, b)
        }
        Op::AddBias(a, bias) => {
            let (a, bias) = (val(a)?, val(bias)?);
            if bias.len() != a.cols() {
                return Err(Error::Shape(format!("bias {:?} for {:?}", bias.shape(), a.shape())));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            out
        }
        Op::Add(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            same(a, b, "add")?;
            zip_map(a, b, |x, y| x + y)
        }
        Op::Sub(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            same(a, b, "sub")?;
            zip_map(a, b, |x, y| x - y)
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            same(a, b, "mul")?;
            zip_map(a, b, |x, y| x * y)
        }
        Op::Scale(a, s) => {
            let s = *s;
            val(a)?.map(|x| x * s)
        }
        Op::AddScalar(a, s) => {
            let s = *s;
            val(a)?.map(|x| x + s)
        }
        Op::ScaleRows(a, coef) => {
            let a = val(a)?;
            rows_match(a, coef.len(), "scale_rows")?;
            let mut out = a.clone();
            for (r, &c) in coef.iter().enumerate() {
                out.row_mut(r).iter_mut().for_each(|v| *v *= c);
            }
            out
        }
        Op::Activate(a, act) => {
            let act = *act;
            val(a)?.map(|x| act.apply(x))
        }
        Op::Concat(parts) => {
            let tensors = parts.iter().map(val).collect::<Result<Vec<_>>>()?;
            let n = tensors.first().map(|t| t.rows()).ok_or_else(|| contract("empty concat"))?;
            if tensors.iter().any(|t| t.rows() != n) {
                return Err(Error::Shape("concat: row counts differ".into()));
            }
            let width: usize = tensors.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(n * width);
            for r in 0..n {
                for t in &tensors {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::raw(vec![n, width], data)
        }
        Op::Gather(table, ids) => {
            let t = val(table)?;
            if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
                return Err(contract(format!("row {bad} out of range for table of {}", t.rows())));
            }
            if ids.is_empty() {
                return Err(contract("gather of zero rows"));
            }
            t.select_rows(ids)
        }
        Op::Square(a) => val(a)?.map(|x| x * x),
        Op::Sqrt(a) => val(a)?.map(|x| x.sqrt()),
        Op::Exp(a) => val(a)?.map(|x| x.exp()),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            val(a)?.map(|x| x.max(lo).min(hi))
        }
        Op::Min(a, b) => {
            let (a, b) = (val(a)?, val(b)?);
            same(a, b, "min")?;
            zip_map(a, b, |x, y| if x <= y { x } else { y })
        }
        Op::SumRows(a) => {
            let a = val(a)?;
            let data = (0..a.rows())
                .map(|r| a.row(r).iter().fold(S::zero(), |acc, &v| acc + v))
                .collect();
            Tensor::raw(vec![a.rows(), 1], data)
        }
        Op::Sum(a) => Tensor::scalar(val(a)?.sum()),
        Op::Mean(a) => {
            let a = val(a)?;
            Tensor::scalar(a.sum() / S::lit(a.len() as f64))
        }
        Op::AffineRows {
            base,
            base_coef,
            coef,
            f,
        } => {
            let fv = val(f)?;
            same(base, fv, "affine_rows")?;
            rows_match(fv, coef.len(), "affine_rows")?;
            rows_match(fv, base_coef.len(), "affine_rows")?;
            let mut out = base.clone();
            for r in 0..out.rows() {
                let (a, b) = (base_coef[r], coef[r]);
                let frow = fv.row(r);
                for (o, &fx) in out.row_mut(r).iter_mut().zip(frow) {
                    *o = if b == S::zero() { a * *o } else { a * *o + b * fx };
                }
            }
            out
        }
        Op::GaussianLogProb {
            mean,
            actions,
            stds,
        } => {
            let m = val(mean)?;
            same(m, actions, "gaussian_logprob")?;
            rows_match(m, stds.len(), "gaussian_logprob")?;
            if let Some(s) = stds.iter().find(|s| !(**s > S::zero())) {
                return Err(contract(format!("policy std must be positive, got {s}")));
            }
            let data = (0..m.rows())
                .map(|r| gaussian_logprob_row(m.row(r), actions.row(r), stds[r]))
                .collect();
            Tensor::raw(vec![m.rows(), 1], data)
        }
    })
}
