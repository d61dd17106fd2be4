use super::elementwise::broadcast_index_map;
use super::{grad_slot, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(super) fn sum_axes_backward(
    x: &Tensor,
    y: &Tensor,
    scale: f64,
    g: &[f64],
    ia: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let map = broadcast_index_map(x.shape(), y.shape());
    let slot = grad_slot(grads, ia, x.numel());
    for (s, &j) in slot.iter_mut().zip(&map) {
        *s += g[j] * scale;
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn concat_backward(
    parts: &[(usize, &Tensor, bool)],
    axis: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let total: usize = parts.iter().map(|(_, t, _)| t.shape()[axis]).sum();
    let (outer, _, inner) = split_at_axis(parts[0].1.shape(), axis);
    let mut offset = 0;
    for &(id, t, rg) in parts {
        let len = t.shape()[axis];
        if rg {
            let slot = grad_slot(grads, id, t.numel());
            for o in 0..outer {
                let src = (o * total + offset) * inner;
                let dst = o * len * inner;
                for k in 0..len * inner {
                    slot[dst + k] += g[src + k];
                }
            }
        }
        offset += len;
    }
}

pub(super) fn slice_backward(
    x: &Tensor,
    y: &Tensor,
    axis: usize,
    start: usize,
    g: &[f64],
    ia: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let (outer, full, inner) = split_at_axis(x.shape(), axis);
    let len = y.shape()[axis];
    let slot = grad_slot(grads, ia, x.numel());
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        for k in 0..len * inner {
            slot[dst + k] += g[src + k];
        }
    }
}

/// For each flat index of the permuted tensor, the flat index it reads in
/// the source.
fn permute_source_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        src_strides[d] = src_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub(super) fn permute_backward(
    x: &Tensor,
    perm: &[usize],
    g: &[f64],
    ia: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let map = permute_source_index(x.shape(), perm);
    let slot = grad_slot(grads, ia, x.numel());
    for (k, &src) in map.iter().enumerate() {
        slot[src] += g[k];
    }
}

impl<'t> Var<'t> {
    fn reduce_axes(self, axes: &[usize], mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        let name = if mean { "mean_axes" } else { "sum_axes" };
        let mut out_shape = x.shape().to_vec();
        let mut count = 1usize;
        for &a in axes {
            if a >= out_shape.len() {
                return Err(Error::shape(
                    name,
                    format!("axis {a} out of range for {:?}", x.shape()),
                ));
            }
            if out_shape[a] != 1 {
                count *= out_shape[a];
                out_shape[a] = 1;
            }
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let map = broadcast_index_map(x.shape(), &out_shape);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&v, &j) in x.data().iter().zip(&map) {
            out[j] += v;
        }
        out.iter_mut().for_each(|v| *v *= scale);
        self.tape.push(
            name,
            Tensor::new(out_shape, out)?,
            Op::SumAxes { a: self.id, scale },
            &[self.id],
        )
    }

    /// Sum over `axes`, which are kept as singleton dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce_axes(axes, false)
    }

    /// Mean over `axes`, which are kept as singleton dimensions.
    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        self.reduce_axes(axes, true)
    }

    fn reduce_all(self, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        if x.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let scale = if mean { 1.0 / x.numel() as f64 } else { 1.0 };
        let total = x.data().iter().sum::<f64>() * scale;
        self.tape.push(
            if mean { "mean" } else { "sum" },
            Tensor::scalar(total),
            Op::SumAll { a: self.id, scale },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce_all(false)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce_all(true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().as_ref().clone().reshape(shape.to_vec())?;
        self.tape
            .push("reshape", value, Op::Reshape { a: self.id }, &[self.id])
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_at_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.tape.push(
            "slice",
            Tensor::new(out_shape, out)?,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let map = permute_source_index(x.shape(), perm);
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        self.tape.push(
            "permute",
            Tensor::new(out_shape, data)?,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        )
    }

    /// Concatenates `parts` along `axis`. All other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p, "concat")?;
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
        }
        let (outer, _, inner) = split_at_axis(base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = base.to_vec();
        out_shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push(
            "concat",
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        )
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn mean_of_four() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        assert_eq!(x.mean().unwrap().item().unwrap(), 1.5);
    }

    #[test]
    fn per_axis_mean_keeps_dims() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let m = x.mean_axes(&[1]).unwrap();
        assert_eq!(m.shape(), vec![2, 1]);
        assert_eq!(m.value().data(), &[2.0, 5.0]);
        let s = x.sum_axes(&[0]).unwrap();
        assert_eq!(s.value().data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape = Tape::new();
        let a = tape.param(Tensor::from_fn([1, 2, 2, 2], |i| i as f64));
        let b = tape.param(Tensor::from_fn([1, 1, 2, 2], |i| 10.0 + i as f64));
        let c = crate::autodiff::Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![1, 3, 2, 2]);
        let back = c.slice(1, 2, 1).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        let loss = back.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn permute_moves_channels_last() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 1, 3], |i| i as f64));
        let p = x.permute(&[0, 2, 3, 1]).unwrap();
        assert_eq!(p.shape(), vec![1, 1, 3, 2]);
        assert_eq!(p.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(x.permute(&[0, 0, 1, 2]).is_err());
    }
}
