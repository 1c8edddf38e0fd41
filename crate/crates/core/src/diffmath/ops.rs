use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, IxDyn, Slice, Zip};

use super::tape::Node;
use super::GUARD_EPS;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Atan2(usize, usize),
    MatMul(usize, usize),
    Neg(usize),
    Abs(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Acos(usize),
    PowConst(usize, f64),
    ClampMin(usize, f64),
    AddScalar(usize, f64),
    MulScalar(usize, f64),
    Sum {
        src: usize,
        axis: usize,
        keepdim: bool,
    },
    Mean {
        src: usize,
        axis: usize,
        keepdim: bool,
    },
    SumAll(usize),
    MeanAll(usize),
    CumsumExclusive {
        src: usize,
        axis: usize,
    },
    Softmax {
        src: usize,
        axis: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(usize),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Atan2(..) => "atan2",
            Op::MatMul(..) => "matmul",
            Op::Neg(..) => "neg",
            Op::Abs(..) => "abs",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Acos(..) => "acos",
            Op::PowConst(..) => "pow_const",
            Op::ClampMin(..) => "clamp_min",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sum { .. } => "sum_axis",
            Op::Mean { .. } => "mean_axis",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::CumsumExclusive { .. } => "cumsum_exclusive",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
        }
    }
}

/// Shifts a denominator away from zero while keeping its sign.
pub(crate) fn guard_denom(x: f64) -> f64 {
    x + f64::copysign(GUARD_EPS, x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) computed without overflow for large |x|.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// NumPy-style broadcast shape of two operands, trailing axes aligned.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Vec<usize> {
    let ndim = a.len().max(b.len());
    let mut shape = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() {
            1
        } else {
            a[i - (ndim - a.len())]
        };
        let db = if i < ndim - b.len() {
            1
        } else {
            b[i - (ndim - b.len())]
        };
        shape[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("{op}: shapes {a:?} and {b:?} are not broadcastable");
        };
    }
    shape
}

pub(crate) fn broadcast_zip(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    op: &str,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape(), op);
    let av = a.broadcast(IxDyn(&shape)).expect("checked broadcast");
    let bv = b.broadcast(IxDyn(&shape)).expect("checked broadcast");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sums a broadcast gradient back down to the operand's shape.
pub(crate) fn reduce_to(mut g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(g.shape(), target);
    g
}

fn to_2d<'a>(a: &'a ArrayD<f64>, op: &str) -> ndarray::ArrayView2<'a, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap_or_else(|_| panic!("{op}: expected a 2-d operand, got shape {:?}", a.shape()))
}

pub(crate) fn matmul_forward(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let a2 = to_2d(a, "matmul");
    let b2 = to_2d(b, "matmul");
    assert_eq!(
        a2.ncols(),
        b2.nrows(),
        "matmul: inner dimensions differ, lhs {:?} rhs {:?}",
        a.shape(),
        b.shape()
    );
    a2.dot(&b2).into_dyn()
}

pub(crate) fn reshape_arr(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    assert_eq!(
        a.len(),
        shape.iter().product::<usize>(),
        "reshape: cannot reshape {:?} into {:?}",
        a.shape(),
        shape
    );
    a.as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count checked")
}

/// Applies `f` to broadcast views of `(target, other)` at the output shape,
/// then reduces the result back to `target`'s shape.
fn unbroadcast_pair(
    gout: &ArrayD<f64>,
    f: impl Fn(&ArrayViewD<'_, f64>, &ArrayViewD<'_, f64>) -> ArrayD<f64>,
    target: &ArrayD<f64>,
    other: &ArrayD<f64>,
) -> ArrayD<f64> {
    let shape = gout.shape();
    let tv = target.broadcast(IxDyn(shape)).expect("forward broadcast held");
    let ov = other.broadcast(IxDyn(shape)).expect("forward broadcast held");
    reduce_to(f(&tv, &ov), target.shape())
}

fn softmax_forward_view(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let ax = Axis(axis);
    let max = x.fold_axis(ax, f64::NEG_INFINITY, |m, &v| m.max(v));
    let max = max.insert_axis(ax);
    let mut e = x.clone();
    Zip::from(&mut e)
        .and(&max.broadcast(x.raw_dim()).expect("keepdim broadcast"))
        .for_each(|o, &m| *o = (*o - m).exp());
    let sum = e.sum_axis(ax).insert_axis(ax);
    Zip::from(&mut e)
        .and(&sum.broadcast(x.raw_dim()).expect("keepdim broadcast"))
        .for_each(|o, &s| *o /= s);
    e
}

pub(crate) fn forward_unary(op: &Op, x: &ArrayD<f64>) -> ArrayD<f64> {
    match *op {
        Op::Neg(_) => x.mapv(|v| -v),
        Op::Abs(_) => x.mapv(f64::abs),
        Op::Sin(_) => x.mapv(f64::sin),
        Op::Cos(_) => x.mapv(f64::cos),
        Op::Exp(_) => x.mapv(f64::exp),
        Op::Log(_) => x.mapv(|v| (v + GUARD_EPS).ln()),
        Op::Sqrt(_) => x.mapv(|v| (v + GUARD_EPS).sqrt()),
        Op::Relu(_) => x.mapv(|v| v.max(0.0)),
        Op::Sigmoid(_) => x.mapv(sigmoid),
        Op::Softplus(_) => x.mapv(softplus),
        Op::Acos(_) => x.mapv(|v| v.clamp(-1.0, 1.0).acos()),
        Op::PowConst(_, p) => {
            if p == 0.0 {
                ArrayD::ones(x.raw_dim())
            } else {
                x.mapv(|v| v.powf(p))
            }
        }
        Op::ClampMin(_, c) => x.mapv(|v| v.max(c)),
        Op::AddScalar(_, s) => x.mapv(|v| v + s),
        Op::MulScalar(_, s) => x.mapv(|v| v * s),
        Op::Sum { axis, keepdim, .. } => {
            let s = x.sum_axis(Axis(axis));
            if keepdim {
                s.insert_axis(Axis(axis))
            } else {
                s
            }
        }
        Op::Mean { axis, keepdim, .. } => {
            let n = x.shape()[axis] as f64;
            let s = x.sum_axis(Axis(axis)).mapv(|v| v / n);
            if keepdim {
                s.insert_axis(Axis(axis))
            } else {
                s
            }
        }
        Op::SumAll(_) => ArrayD::from_elem(IxDyn(&[]), x.sum()),
        Op::MeanAll(_) => ArrayD::from_elem(IxDyn(&[]), x.sum() / x.len() as f64),
        Op::CumsumExclusive { axis, .. } => {
            let mut out = x.clone();
            for mut lane in out.lanes_mut(Axis(axis)) {
                let mut run = 0.0;
                for v in lane.iter_mut() {
                    let cur = *v;
                    *v = run;
                    run += cur;
                }
            }
            out
        }
        Op::Softmax { axis, .. } => softmax_forward_view(x, axis),
        Op::Slice {
            axis, start, end, ..
        } => {
            assert!(
                start < end && end <= x.shape()[axis],
                "slice: range {start}..{end} out of bounds for axis {axis} of shape {:?}",
                x.shape()
            );
            x.slice_axis(Axis(axis), Slice::from(start..end)).to_owned()
        }
        _ => unreachable!("forward_unary: {:?} is not unary", op.name()),
    }
}

pub(crate) fn concat_forward(parts: &[&ArrayD<f64>], axis: usize) -> ArrayD<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(axis), &views).unwrap_or_else(|_| {
        let shapes: Vec<_> = parts.iter().map(|p| p.shape().to_vec()).collect();
        panic!("concat: incompatible shapes {shapes:?} along axis {axis}")
    })
}

/// Gradient contributions of one node to its parents. Parents that do not
/// require gradients are skipped.
pub(crate) fn backward_step(
    op: &Op,
    gout: &ArrayD<f64>,
    out: &ArrayD<f64>,
    nodes: &[Node],
) -> Vec<(usize, ArrayD<f64>)> {
    let needs = |i: usize| nodes[i].requires_grad;
    let data = |i: usize| &nodes[i].data;
    let mut contribs: Vec<(usize, ArrayD<f64>)> = Vec::with_capacity(2);
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(a) {
                contribs.push((a, reduce_to(gout.clone(), data(a).shape())));
            }
            if needs(b) {
                contribs.push((b, reduce_to(gout.clone(), data(b).shape())));
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                contribs.push((a, reduce_to(gout.clone(), data(a).shape())));
            }
            if needs(b) {
                contribs.push((b, reduce_to(gout.mapv(|v| -v), data(b).shape())));
            }
        }
        Op::Mul(a, b) => {
            if needs(a) {
                let g = unbroadcast_pair(gout, |_, bv| gout * bv, data(a), data(b));
                contribs.push((a, g));
            }
            if needs(b) {
                let g = unbroadcast_pair(gout, |_, av| gout * av, data(b), data(a));
                contribs.push((b, g));
            }
        }
        Op::Div(a, b) => {
            if needs(a) {
                let g = unbroadcast_pair(
                    gout,
                    |_, bv| {
                        let mut o = gout.clone();
                        Zip::from(&mut o).and(bv).for_each(|g, &d| *g /= guard_denom(d));
                        o
                    },
                    data(a),
                    data(b),
                );
                contribs.push((a, g));
            }
            if needs(b) {
                let g = unbroadcast_pair(
                    gout,
                    |bv, av| {
                        let mut o = gout.clone();
                        Zip::from(&mut o).and(bv).and(av).for_each(|g, &d, &n| {
                            let gd = guard_denom(d);
                            *g *= -n / (gd * gd);
                        });
                        o
                    },
                    data(b),
                    data(a),
                );
                contribs.push((b, g));
            }
        }
        Op::Atan2(y, x) => {
            // d/dy atan2 = x / (x^2 + y^2), d/dx = -y / (x^2 + y^2); zero at the origin.
            if needs(y) {
                let g = unbroadcast_pair(
                    gout,
                    |yv, xv| {
                        let mut o = gout.clone();
                        Zip::from(&mut o).and(yv).and(xv).for_each(|g, &yy, &xx| {
                            let d = xx * xx + yy * yy;
                            *g = if d == 0.0 { 0.0 } else { *g * xx / d };
                        });
                        o
                    },
                    data(y),
                    data(x),
                );
                contribs.push((y, g));
            }
            if needs(x) {
                let g = unbroadcast_pair(
                    gout,
                    |xv, yv| {
                        let mut o = gout.clone();
                        Zip::from(&mut o).and(xv).and(yv).for_each(|g, &xx, &yy| {
                            let d = xx * xx + yy * yy;
                            *g = if d == 0.0 { 0.0 } else { -*g * yy / d };
                        });
                        o
                    },
                    data(x),
                    data(y),
                );
                contribs.push((x, g));
            }
        }
        Op::MatMul(a, b) => {
            let g2 = to_2d(gout, "matmul backward");
            if needs(a) {
                let b2 = to_2d(data(b), "matmul backward");
                contribs.push((a, g2.dot(&b2.t()).into_dyn()));
            }
            if needs(b) {
                let a2 = to_2d(data(a), "matmul backward");
                contribs.push((b, a2.t().dot(&g2).into_dyn()));
            }
        }
        Op::Neg(a) => {
            if needs(a) {
                contribs.push((a, gout.mapv(|v| -v)));
            }
        }
        Op::Abs(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(data(a)).for_each(|g, &x| {
                    *g *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                contribs.push((a, g));
            }
        }
        Op::Sin(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(data(a)).for_each(|g, &x| *g *= x.cos());
                contribs.push((a, g));
            }
        }
        Op::Cos(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(data(a)).for_each(|g, &x| *g *= -x.sin());
                contribs.push((a, g));
            }
        }
        Op::Exp(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(out).for_each(|g, &e| *g *= e);
                contribs.push((a, g));
            }
        }
        Op::Log(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g)
                    .and(data(a))
                    .for_each(|g, &x| *g /= x + GUARD_EPS);
                contribs.push((a, g));
            }
        }
        Op::Sqrt(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(out).for_each(|g, &s| *g *= 0.5 / s);
                contribs.push((a, g));
            }
        }
        Op::Relu(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g)
                    .and(data(a))
                    .for_each(|g, &x| *g *= if x > 0.0 { 1.0 } else { 0.0 });
                contribs.push((a, g));
            }
        }
        Op::Sigmoid(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(out).for_each(|g, &s| *g *= s * (1.0 - s));
                contribs.push((a, g));
            }
        }
        Op::Softplus(a) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(data(a)).for_each(|g, &x| *g *= sigmoid(x));
                contribs.push((a, g));
            }
        }
        Op::Acos(a) => {
            // Zero gradient on the clamped region keeps the pass finite at the poles.
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g).and(data(a)).for_each(|g, &x| {
                    *g *= if x.abs() < 1.0 - GUARD_EPS {
                        -1.0 / (1.0 - x * x).sqrt()
                    } else {
                        0.0
                    }
                });
                contribs.push((a, g));
            }
        }
        Op::PowConst(a, p) => {
            if needs(a) {
                let mut g = gout.clone();
                if p == 0.0 {
                    g.fill(0.0);
                } else {
                    Zip::from(&mut g).and(data(a)).for_each(|g, &x| {
                        let d = if x > 0.0 || (x < 0.0 && p.fract() == 0.0) {
                            p * x.powf(p - 1.0)
                        } else {
                            0.0
                        };
                        *g *= d;
                    });
                }
                contribs.push((a, g));
            }
        }
        Op::ClampMin(a, c) => {
            if needs(a) {
                let mut g = gout.clone();
                Zip::from(&mut g)
                    .and(data(a))
                    .for_each(|g, &x| *g *= if x > c { 1.0 } else { 0.0 });
                contribs.push((a, g));
            }
        }
        Op::AddScalar(a, _) => {
            if needs(a) {
                contribs.push((a, gout.clone()));
            }
        }
        Op::MulScalar(a, s) => {
            if needs(a) {
                contribs.push((a, gout.mapv(|v| v * s)));
            }
        }
        Op::Sum { src, axis, keepdim } => {
            if needs(src) {
                let g = if keepdim {
                    gout.clone()
                } else {
                    gout.clone().insert_axis(Axis(axis))
                };
                let full = g
                    .broadcast(data(src).raw_dim())
                    .expect("sum backward broadcast")
                    .to_owned();
                contribs.push((src, full));
            }
        }
        Op::Mean { src, axis, keepdim } => {
            if needs(src) {
                let n = data(src).shape()[axis] as f64;
                let g = if keepdim {
                    gout.mapv(|v| v / n)
                } else {
                    gout.mapv(|v| v / n).insert_axis(Axis(axis))
                };
                let full = g
                    .broadcast(data(src).raw_dim())
                    .expect("mean backward broadcast")
                    .to_owned();
                contribs.push((src, full));
            }
        }
        Op::SumAll(src) => {
            if needs(src) {
                let g = gout.iter().next().copied().unwrap_or(0.0);
                contribs.push((src, ArrayD::from_elem(data(src).raw_dim(), g)));
            }
        }
        Op::MeanAll(src) => {
            if needs(src) {
                let n = data(src).len() as f64;
                let g = gout.iter().next().copied().unwrap_or(0.0) / n;
                contribs.push((src, ArrayD::from_elem(data(src).raw_dim(), g)));
            }
        }
        Op::CumsumExclusive { src, axis } => {
            // out[i] = sum_{j<i} x[j]  =>  dx[j] = sum_{i>j} g[i].
            if needs(src) {
                let mut g = gout.clone();
                for mut lane in g.lanes_mut(Axis(axis)) {
                    let mut run = 0.0;
                    for v in lane.iter_mut().rev() {
                        let cur = *v;
                        *v = run;
                        run += cur;
                    }
                }
                contribs.push((src, g));
            }
        }
        Op::Softmax { src, axis } => {
            if needs(src) {
                let inner = (gout * out).sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let innerb = inner
                    .broadcast(out.raw_dim())
                    .expect("softmax backward broadcast");
                let mut g = gout.clone();
                Zip::from(&mut g)
                    .and(out)
                    .and(&innerb)
                    .for_each(|g, &s, &i| *g = s * (*g - i));
                contribs.push((src, g));
            }
        }
        Op::Concat { ref srcs, axis } => {
            let mut start = 0;
            for &src in srcs {
                let len = data(src).shape()[axis];
                if needs(src) {
                    let piece = gout
                        .slice_axis(Axis(axis), Slice::from(start..start + len))
                        .to_owned();
                    contribs.push((src, piece));
                }
                start += len;
            }
        }
        Op::Slice {
            src,
            axis,
            start,
            end,
        } => {
            if needs(src) {
                let mut g = ArrayD::zeros(data(src).raw_dim());
                g.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(gout);
                contribs.push((src, g));
            }
        }
        Op::Reshape(src) => {
            if needs(src) {
                contribs.push((src, reshape_arr(gout, data(src).shape())));
            }
        }
    }
    contribs
}
