use super::{grad_slot, BinaryKind, Op, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Negative-side slope used by every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Result shape of broadcasting `a` against `b` (numpy rules: align
/// trailing axes, singleton axes stretch).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the element of `inp`
/// it reads under broadcasting.
pub(crate) fn broadcast_index_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        strides[i + pad] = if inp[i] == 1 { 0 } else { acc };
        acc *= inp[i];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

#[inline]
fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

fn binary_forward(kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let name = binary_name(kind);
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(name, format!("{:?} and {:?} do not broadcast", a.shape(), b.shape()))
    })?;
    if kind == BinaryKind::Div && b.data().iter().any(|&v| v == 0.0) {
        return Err(Error::invalid("div", "zero denominator"));
    }
    let data = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| apply_binary(kind, x, y))
            .collect()
    } else {
        let ma = broadcast_index_map(&out_shape, a.shape());
        let mb = broadcast_index_map(&out_shape, b.shape());
        ma.iter()
            .zip(&mb)
            .map(|(&i, &j)| apply_binary(kind, a.data()[i], b.data()[j]))
            .collect()
    };
    Tensor::new(out_shape, data)
}

pub(super) fn binary_backward(
    kind: BinaryKind,
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    (ia, ra): (usize, bool),
    (ib, rb): (usize, bool),
    grads: &mut [Option<Vec<f64>>],
) {
    let out_shape = broadcast_shape(a.shape(), b.shape()).expect("checked in forward");
    let same = a.shape() == b.shape();
    let ma = (!same).then(|| broadcast_index_map(&out_shape, a.shape()));
    let mb = (!same).then(|| broadcast_index_map(&out_shape, b.shape()));
    let idx_a = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
    let idx_b = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
    if ra {
        let slot = grad_slot(grads, ia, a.numel());
        for (k, &gk) in g.iter().enumerate() {
            let (i, j) = (idx_a(k), idx_b(k));
            slot[i] += match kind {
                BinaryKind::Add | BinaryKind::Sub => gk,
                BinaryKind::Mul => gk * b.data()[j],
                BinaryKind::Div => gk / b.data()[j],
            };
        }
    }
    if rb {
        let slot = grad_slot(grads, ib, b.numel());
        for (k, &gk) in g.iter().enumerate() {
            let (i, j) = (idx_a(k), idx_b(k));
            slot[j] += match kind {
                BinaryKind::Add => gk,
                BinaryKind::Sub => -gk,
                BinaryKind::Mul => gk * a.data()[i],
                BinaryKind::Div => {
                    let y = b.data()[j];
                    -gk * a.data()[i] / (y * y)
                }
            };
        }
    }
}

fn unary_name(kind: UnaryKind) -> &'static str {
    match kind {
        UnaryKind::AddScalar(_) => "add_scalar",
        UnaryKind::MulScalar(_) => "mul_scalar",
        UnaryKind::Abs => "abs",
        UnaryKind::Exp => "exp",
        UnaryKind::Ln => "ln",
        UnaryKind::Sqrt => "sqrt",
        UnaryKind::Square => "square",
        UnaryKind::Sigmoid => "sigmoid",
        UnaryKind::LeakyRelu(_) => "leaky_relu",
        UnaryKind::Clamp(..) => "clamp",
        UnaryKind::SinOverAngle => "sin_over_angle",
        UnaryKind::VersineOverAngleSq => "versine_over_angle_sq",
    }
}

// Below this θ² the closed forms of the rotation coefficients lose digits to
// cancellation and their series are used instead.
const SERIES_ANGLE_SQ: f64 = 1e-4;

/// `sin θ / θ` with `s = θ²`.
pub(crate) fn sin_over_angle(s: f64) -> f64 {
    if s < SERIES_ANGLE_SQ {
        1.0 - s / 6.0 * (1.0 - s / 20.0 * (1.0 - s / 42.0))
    } else {
        let t = s.sqrt();
        t.sin() / t
    }
}

fn sin_over_angle_deriv(s: f64) -> f64 {
    if s < SERIES_ANGLE_SQ {
        -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
    } else {
        let t = s.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * s * t)
    }
}

/// `(1 − cos θ) / θ²` with `s = θ²`.
pub(crate) fn versine_over_angle_sq(s: f64) -> f64 {
    if s < SERIES_ANGLE_SQ {
        0.5 - s / 24.0 * (1.0 - s / 30.0 * (1.0 - s / 56.0))
    } else {
        let half = (0.5 * s.sqrt()).sin();
        2.0 * half * half / s
    }
}

fn versine_over_angle_sq_deriv(s: f64) -> f64 {
    if s < SERIES_ANGLE_SQ {
        -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
    } else {
        let t = s.sqrt();
        (t * t.sin() - 2.0 * (1.0 - t.cos())) / (2.0 * s * s)
    }
}

#[inline]
fn apply_unary(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::AddScalar(c) => x + c,
        UnaryKind::MulScalar(c) => x * c,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        UnaryKind::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
        UnaryKind::SinOverAngle => sin_over_angle(x),
        UnaryKind::VersineOverAngleSq => versine_over_angle_sq(x),
    }
}

/// Derivative given input `x` and output `y`. Kinks take the conventional
/// one-sided values: `abs'(0) = 0`, `clamp'` on a boundary is 0,
/// `leaky_relu'(0) = slope`, and `sqrt'(0) = 0`.
#[inline]
fn unary_deriv(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::AddScalar(_) => 1.0,
        UnaryKind::MulScalar(c) => c,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Ln => 1.0 / x,
        UnaryKind::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::LeakyRelu(slope) => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        UnaryKind::Clamp(lo, hi) => {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::SinOverAngle => sin_over_angle_deriv(x),
        UnaryKind::VersineOverAngleSq => versine_over_angle_sq_deriv(x),
    }
}

pub(super) fn unary_backward(
    kind: UnaryKind,
    x: &Tensor,
    y: &Tensor,
    g: &[f64],
    ia: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let slot = grad_slot(grads, ia, x.numel());
    for (((s, &gk), &xk), &yk) in slot.iter_mut().zip(g).zip(x.data()).zip(y.data()) {
        *s += gk * unary_deriv(kind, xk, yk);
    }
}

pub(super) fn channel_norm_backward(
    x: &Tensor,
    y: &Tensor,
    g: &[f64],
    ia: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let [n, c, h, w] = x.dims4().expect("checked in forward");
    let hw = h * w;
    let slot = grad_slot(grads, ia, x.numel());
    for b in 0..n {
        for p in 0..hw {
            let norm = y.data()[b * hw + p];
            if norm <= 0.0 {
                continue;
            }
            let gn = g[b * hw + p] / norm;
            for ch in 0..c {
                let k = (b * c + ch) * hw + p;
                slot[k] += gn * x.data()[k];
            }
        }
    }
}

impl<'t> Var<'t> {
    fn binary(self, kind: BinaryKind, other: Var<'t>) -> Result<Var<'t>> {
        let name = binary_name(kind);
        self.same_tape(&other, name)?;
        let value = binary_forward(kind, &self.value(), &other.value())?;
        self.tape.push(
            name,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        )
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let value = self.value().map(|x| apply_unary(kind, x));
        self.tape
            .push(unary_name(kind), value, Op::Unary { kind, a: self.id }, &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, other)
    }

    /// Elementwise quotient; every denominator element must be nonzero.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::AddScalar(c))
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::MulScalar(c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Ln)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Square)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    /// `sin θ / θ` of `θ² = self`, smooth through zero.
    pub fn sin_over_angle(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::SinOverAngle)
    }

    /// `(1 − cos θ) / θ²` of `θ² = self`, smooth through zero.
    pub fn versine_over_angle_sq(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::VersineOverAngleSq)
    }

    /// Euclidean norm across the channel axis of an `[N, C, H, W]` tensor,
    /// giving `[N, 1, H, W]`. The gradient at a zero vector is zero.
    pub fn channel_norm(self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for p in 0..hw {
                    let v = x.data()[base + p];
                    out[b * hw + p] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        self.tape.push(
            "channel_norm",
            Tensor::new([n, 1, h, w], out)?,
            Op::ChannelNorm { a: self.id },
            &[self.id],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn index_map_tiles_singleton_axes() {
        let map = broadcast_index_map(&[2, 3], &[1, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
        let map = broadcast_index_map(&[2, 3], &[2, 1]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let map = broadcast_index_map(&[2, 2], &[]);
        assert_eq!(map, vec![0, 0, 0, 0]);
    }

    #[test]
    fn add_small_vectors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new([2], vec![3.0, 4.0]).unwrap());
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn incompatible_shapes_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        assert!(matches!(a.add(b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn zero_denominator_is_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        assert!(a.div(b).is_err());
    }

    #[test]
    fn nonfinite_output_names_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new([1], vec![800.0]).unwrap());
        match a.exp() {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        let z = tape.constant(Tensor::zeros([1]));
        assert!(matches!(z.ln(), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn kink_derivatives_follow_convention() {
        assert_eq!(unary_deriv(UnaryKind::Abs, 0.0, 0.0), 0.0);
        assert_eq!(unary_deriv(UnaryKind::Clamp(0.0, 1.0), 1.0, 1.0), 0.0);
        assert_eq!(unary_deriv(UnaryKind::Clamp(0.0, 1.0), 0.0, 0.0), 0.0);
        assert_eq!(unary_deriv(UnaryKind::LeakyRelu(0.2), 0.0, 0.0), 0.2);
    }

    #[test]
    fn rotation_coefficients_are_continuous_at_series_switch() {
        // Series branch just below the switch vs closed form just above it.
        let s = SERIES_ANGLE_SQ;
        let (lo, hi) = (s * (1.0 - 1e-12), s * (1.0 + 1e-12));
        assert!((sin_over_angle(lo) - sin_over_angle(hi)).abs() < 1e-15);
        assert!((versine_over_angle_sq(lo) - versine_over_angle_sq(hi)).abs() < 1e-13);
        assert!((sin_over_angle_deriv(lo) - sin_over_angle_deriv(hi)).abs() < 1e-9);
        assert!((versine_over_angle_sq_deriv(lo) - versine_over_angle_sq_deriv(hi)).abs() < 1e-8);
        assert_eq!(sin_over_angle(0.0), 1.0);
        assert_eq!(versine_over_angle_sq(0.0), 0.5);
    }
}
