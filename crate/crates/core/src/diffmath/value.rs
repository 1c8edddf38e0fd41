use ndarray::{ArrayD, IxDyn};

use super::ops::{
    broadcast_zip, concat_forward, forward_unary, guard_denom, matmul_forward, reshape_arr, Op,
};
use super::tape::Tape;

/// Handle to one node on a [`Tape`]. Cheap to clone; all arithmetic records
/// new nodes on the owning tape.
#[derive(Clone)]
pub struct Value {
    pub(crate) tape: Tape,
    pub(crate) idx: usize,
    pub(crate) gen: u32,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Value {
    pub(crate) fn check_live(&self) {
        let inner = self.tape.inner.borrow();
        assert!(
            self.idx < inner.nodes.len() && inner.nodes[self.idx].gen == self.gen,
            "value handle is stale: node {} from generation {} no longer on the tape",
            self.idx,
            self.gen
        );
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn data(&self) -> ArrayD<f64> {
        self.check_live();
        self.tape.inner.borrow().nodes[self.idx].data.clone()
    }

    /// Gradient accumulated by the last backward pass; zeros if none reached
    /// this node.
    pub fn grad(&self) -> ArrayD<f64> {
        self.check_live();
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.idx];
        node.grad
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(node.data.raw_dim()))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.check_live();
        self.tape.inner.borrow().nodes[self.idx].data.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.check_live();
        self.tape.inner.borrow().nodes[self.idx].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.check_live();
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    pub fn scalar(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "scalar: value has shape {:?}", d.shape());
        *d.iter().next().expect("one element")
    }

    /// Overwrites the stored data in place. Only meaningful for leaves and
    /// constants; recorded descendants are not recomputed.
    pub fn set_data(&self, data: ArrayD<f64>) {
        self.check_live();
        let mut inner = self.tape.inner.borrow_mut();
        let node = &mut inner.nodes[self.idx];
        assert_eq!(
            node.data.shape(),
            data.shape(),
            "set_data: shape {:?} does not match stored {:?}",
            data.shape(),
            node.data.shape()
        );
        node.data = data;
    }

    pub fn zero_grad(&self) {
        self.check_live();
        self.tape.inner.borrow_mut().nodes[self.idx].grad = None;
    }

    /// Copy of this value's data as a fresh constant (gradient barrier).
    pub fn detach(&self) -> Value {
        self.tape.constant(self.data())
    }

    fn unary(&self, op: Op) -> Value {
        self.check_live();
        let (data, req) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.idx];
            (forward_unary(&op, &node.data), node.requires_grad)
        };
        self.tape.push(data, op, req)
    }

    fn binary(&self, other: &Value, make: impl Fn(usize, usize) -> Op, f: impl Fn(f64, f64) -> f64) -> Value {
        self.check_live();
        other.check_live();
        assert!(
            std::rc::Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "binary op: operands live on different tapes"
        );
        let op = make(self.idx, other.idx);
        let (data, req) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            (
                broadcast_zip(&a.data, &b.data, op.name(), f),
                a.requires_grad || b.requires_grad,
            )
        };
        self.tape.push(data, op, req)
    }

    pub fn add(&self, other: &Value) -> Value {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Value) -> Value {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Value) -> Value {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    /// Guarded division: the denominator is shifted away from zero by
    /// [`super::GUARD_EPS`] with its sign kept.
    pub fn div(&self, other: &Value) -> Value {
        self.binary(other, Op::Div, |a, b| a / guard_denom(b))
    }

    /// Elementwise `atan2(self, other)` = angle of (other, self).
    pub fn atan2(&self, other: &Value) -> Value {
        self.binary(other, Op::Atan2, f64::atan2)
    }

    /// 2-d matrix product.
    pub fn matmul(&self, other: &Value) -> Value {
        self.check_live();
        other.check_live();
        assert!(
            std::rc::Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "matmul: operands live on different tapes"
        );
        let (data, req) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.idx];
            let b = &inner.nodes[other.idx];
            (
                matmul_forward(&a.data, &b.data),
                a.requires_grad || b.requires_grad,
            )
        };
        self.tape.push(data, Op::MatMul(self.idx, other.idx), req)
    }

    pub fn neg(&self) -> Value {
        self.unary(Op::Neg(self.idx))
    }

    pub fn abs(&self) -> Value {
        self.unary(Op::Abs(self.idx))
    }

    pub fn sin(&self) -> Value {
        self.unary(Op::Sin(self.idx))
    }

    pub fn cos(&self) -> Value {
        self.unary(Op::Cos(self.idx))
    }

    pub fn exp(&self) -> Value {
        self.unary(Op::Exp(self.idx))
    }

    /// Guarded natural log: `ln(x + GUARD_EPS)`. Callers keep `x >= 0`.
    pub fn log(&self) -> Value {
        self.unary(Op::Log(self.idx))
    }

    /// Guarded square root: `sqrt(x + GUARD_EPS)`. Callers keep `x >= 0`.
    pub fn sqrt(&self) -> Value {
        self.unary(Op::Sqrt(self.idx))
    }

    pub fn relu(&self) -> Value {
        self.unary(Op::Relu(self.idx))
    }

    pub fn sigmoid(&self) -> Value {
        self.unary(Op::Sigmoid(self.idx))
    }

    pub fn softplus(&self) -> Value {
        self.unary(Op::Softplus(self.idx))
    }

    /// Arc cosine with the input clamped to `[-1, 1]`; gradient is zero on
    /// the clamped region.
    pub fn acos(&self) -> Value {
        self.unary(Op::Acos(self.idx))
    }

    /// Elementwise power with a constant exponent. `p == 0` gives ones with
    /// zero gradient; negative bases with fractional exponents are the
    /// caller's responsibility to avoid.
    pub fn powc(&self, p: f64) -> Value {
        self.unary(Op::PowConst(self.idx, p))
    }

    pub fn clamp_min(&self, c: f64) -> Value {
        self.unary(Op::ClampMin(self.idx, c))
    }

    pub fn add_s(&self, s: f64) -> Value {
        self.unary(Op::AddScalar(self.idx, s))
    }

    pub fn mul_s(&self, s: f64) -> Value {
        self.unary(Op::MulScalar(self.idx, s))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Value {
        self.unary(Op::Sum {
            src: self.idx,
            axis,
            keepdim,
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Value {
        self.unary(Op::Mean {
            src: self.idx,
            axis,
            keepdim,
        })
    }

    pub fn sum_all(&self) -> Value {
        self.unary(Op::SumAll(self.idx))
    }

    pub fn mean_all(&self) -> Value {
        self.unary(Op::MeanAll(self.idx))
    }

    /// Exclusive prefix sum along an axis: `out[i] = sum_{j < i} x[j]`.
    pub fn cumsum_exclusive(&self, axis: usize) -> Value {
        self.unary(Op::CumsumExclusive {
            src: self.idx,
            axis,
        })
    }

    pub fn softmax(&self, axis: usize) -> Value {
        self.unary(Op::Softmax {
            src: self.idx,
            axis,
        })
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Value {
        self.unary(Op::Slice {
            src: self.idx,
            axis,
            start,
            end,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Value {
        self.check_live();
        let (data, req) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.idx];
            (reshape_arr(&node.data, shape), node.requires_grad)
        };
        self.tape.push(data, Op::Reshape(self.idx), req)
    }

    pub fn concat(parts: &[Value], axis: usize) -> Value {
        assert!(!parts.is_empty(), "concat: no operands");
        let tape = parts[0].tape.clone();
        for p in parts {
            p.check_live();
            assert!(
                std::rc::Rc::ptr_eq(&tape.inner, &p.tape.inner),
                "concat: operands live on different tapes"
            );
        }
        let (data, req) = {
            let inner = tape.inner.borrow();
            let datas: Vec<&ArrayD<f64>> = parts.iter().map(|p| &inner.nodes[p.idx].data).collect();
            (
                concat_forward(&datas, axis),
                parts.iter().any(|p| inner.nodes[p.idx].requires_grad),
            )
        };
        tape.push(
            data,
            Op::Concat {
                srcs: parts.iter().map(|p| p.idx).collect(),
                axis,
            },
            req,
        )
    }

    /// Elementwise select by a constant `{0,1}` mask: `mask*a + (1-mask)*b`.
    /// Gradients flow into the selected branch only.
    pub fn select(mask: &Value, a: &Value, b: &Value) -> Value {
        let picked_a = mask.mul(a);
        let picked_b = mask.neg().add_s(1.0).mul(b);
        picked_a.add(&picked_b)
    }

    /// Dot product over the last axis, keeping it as size 1.
    pub fn dot_last(&self, other: &Value) -> Value {
        let last = self.shape().len() - 1;
        self.mul(other).sum_axis(last, true)
    }

    /// L2 norm over the last axis (guarded sqrt), keeping it as size 1.
    pub fn norm_last(&self) -> Value {
        let last = self.shape().len() - 1;
        self.mul(self).sum_axis(last, true).sqrt()
    }

    /// Unit vectors along the last axis (guarded norm).
    pub fn normalize_last(&self) -> Value {
        self.div(&self.norm_last())
    }

    /// Cross product over a last axis of size 3.
    pub fn cross_last(&self, other: &Value) -> Value {
        let last = self.shape().len() - 1;
        assert_eq!(
            self.shape()[last],
            3,
            "cross: last axis must be 3, got {:?}",
            self.shape()
        );
        let (ax, ay, az) = (
            self.slice_axis(last, 0, 1),
            self.slice_axis(last, 1, 2),
            self.slice_axis(last, 2, 3),
        );
        let (bx, by, bz) = (
            other.slice_axis(last, 0, 1),
            other.slice_axis(last, 1, 2),
            other.slice_axis(last, 2, 3),
        );
        let cx = ay.mul(&bz).sub(&az.mul(&by));
        let cy = az.mul(&bx).sub(&ax.mul(&bz));
        let cz = ax.mul(&by).sub(&ay.mul(&bx));
        Value::concat(&[cx, cy, cz], last)
    }
}

impl Tape {
    /// Constant with the given shape filled by `v`.
    pub fn full_constant(&self, shape: &[usize], v: f64) -> Value {
        self.constant(ArrayD::from_elem(IxDyn(shape), v))
    }
}

macro_rules! impl_binop {
    ($trait:ident, $fn:ident, $method:ident) => {
        impl std::ops::$trait<&Value> for &Value {
            type Output = Value;
            fn $fn(self, rhs: &Value) -> Value {
                self.$method(rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
impl_binop!(Div, div, div);

impl std::ops::Neg for &Value {
    type Output = Value;
    fn neg(self) -> Value {
        Value::neg(self)
    }
}
