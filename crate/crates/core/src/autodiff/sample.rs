//! Bilinear sampling at continuous pixel coordinates.
//!
//! Coordinates are `(x, y)` in input pixel units, pixel centers on the
//! integer lattice. A sample is in bounds when `x ∈ [0, W−1]` and
//! `y ∈ [0, H−1]`; out-of-bounds samples read 0 and get mask 0.

use super::{grad_slot, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
}

fn tap(x: f64, y: f64, w: usize, h: usize) -> Option<Tap> {
    let inside = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
    if !inside {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    Some(Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        wx: x - x0 as f64,
        wy: y - y0 as f64,
    })
}

fn check_shapes(input: &Tensor, grid: &Tensor) -> Result<([usize; 4], usize, usize)> {
    let dims = input.dims4()?;
    match grid.shape() {
        &[gn, ho, wo, 2] if gn == dims[0] => Ok((dims, ho, wo)),
        other => Err(Error::shape(
            "grid_sample",
            format!("grid {other:?} does not match input {:?}", input.shape()),
        )),
    }
}

pub(super) fn grid_sample_backward(
    (ii, input, ri): (usize, &Tensor, bool),
    (ig, grid, rgd): (usize, &Tensor, bool),
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let ([n, c, h, w], ho, wo) = check_shapes(input, grid).expect("checked in forward");
    let plane = h * w;
    let opix = ho * wo;
    let mut dgrid = rgd.then(|| vec![0.0; grid.numel()]);
    let mut dinput = ri.then(|| vec![0.0; input.numel()]);
    let src = input.data();
    for b in 0..n {
        for p in 0..opix {
            let gi = (b * opix + p) * 2;
            let Some(t) = tap(grid.data()[gi], grid.data()[gi + 1], w, h) else {
                continue;
            };
            let (mut dx, mut dy) = (0.0, 0.0);
            for ch in 0..c {
                let gv = g[(b * c + ch) * opix + p];
                if gv == 0.0 {
                    continue;
                }
                let base = (b * c + ch) * plane;
                let v00 = src[base + t.y0 * w + t.x0];
                let v01 = src[base + t.y0 * w + t.x1];
                let v10 = src[base + t.y1 * w + t.x0];
                let v11 = src[base + t.y1 * w + t.x1];
                dx += gv * ((1.0 - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                dy += gv * ((1.0 - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                if let Some(di) = dinput.as_mut() {
                    di[base + t.y0 * w + t.x0] += gv * (1.0 - t.wy) * (1.0 - t.wx);
                    di[base + t.y0 * w + t.x1] += gv * (1.0 - t.wy) * t.wx;
                    di[base + t.y1 * w + t.x0] += gv * t.wy * (1.0 - t.wx);
                    di[base + t.y1 * w + t.x1] += gv * t.wy * t.wx;
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                dg[gi] += dx;
                dg[gi + 1] += dy;
            }
        }
    }
    if let Some(di) = dinput {
        let slot = grad_slot(grads, ii, input.numel());
        slot.iter_mut().zip(di).for_each(|(s, d)| *s += d);
    }
    if let Some(dg) = dgrid {
        let slot = grad_slot(grads, ig, grid.numel());
        slot.iter_mut().zip(dg).for_each(|(s, d)| *s += d);
    }
}

impl<'t> Var<'t> {
    /// Samples `self` (`[N, C, H, W]`) at `grid` (`[N, H', W', 2]`, `(x, y)`
    /// pixel coordinates). Returns the `[N, C, H', W']` samples, which are
    /// differentiable in both the values and the coordinates, and a constant
    /// `[N, 1, H', W']` in-bounds mask.
    pub fn grid_sample(self, grid: Var<'t>) -> Result<(Var<'t>, Tensor)> {
        self.same_tape(&grid, "grid_sample")?;
        let input = self.value();
        let coords = grid.value();
        let ([n, c, h, w], ho, wo) = check_shapes(&input, &coords)?;
        let plane = h * w;
        let opix = ho * wo;
        let mut out = vec![0.0; n * c * opix];
        let mut mask = vec![0.0; n * opix];
        let src = input.data();
        for b in 0..n {
            for p in 0..opix {
                let gi = (b * opix + p) * 2;
                let Some(t) = tap(coords.data()[gi], coords.data()[gi + 1], w, h) else {
                    continue;
                };
                mask[b * opix + p] = 1.0;
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let top = src[base + t.y0 * w + t.x0] * (1.0 - t.wx) + src[base + t.y0 * w + t.x1] * t.wx;
                    let bot = src[base + t.y1 * w + t.x0] * (1.0 - t.wx) + src[base + t.y1 * w + t.x1] * t.wx;
                    out[(b * c + ch) * opix + p] = top * (1.0 - t.wy) + bot * t.wy;
                }
            }
        }
        let value = self.tape.push(
            "grid_sample",
            Tensor::new([n, c, ho, wo], out)?,
            Op::GridSample {
                input: self.id,
                grid: grid.id,
            },
            &[self.id, grid.id],
        )?;
        Ok((value, Tensor::new([n, 1, ho, wo], mask)?))
    }
}
