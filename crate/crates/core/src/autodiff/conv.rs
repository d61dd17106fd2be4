//! 2-d cross-correlation (im2col + GEMM) and bilinear upsampling.

use super::{grad_slot, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[Cin, H, W]` into `[Cin·kh·kw, Ho·Wo]`.
    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let cols = self.col_cols();
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - p + ky as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back into an image.
    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let cols = self.col_cols();
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches; all
    // strides fit in isize for tensors that fit in memory.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_geom(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<(usize, usize, ConvGeom)> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, wcin, kh, kw] = weight.dims4()?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} must be odd")));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    Ok((
        n,
        cout,
        ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        },
    ))
}

pub(super) struct ConvBackwardArgs<'a> {
    pub input: (usize, &'a Tensor, bool),
    pub weight: (usize, &'a Tensor, bool),
    pub bias: Option<(usize, bool)>,
    pub stride: usize,
    pub padding: usize,
    pub out_shape: &'a [usize],
}

pub(super) fn conv2d_backward(args: ConvBackwardArgs<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let (ii, x, rx) = args.input;
    let (iw, wt, rw) = args.weight;
    let (n, cout, geom) = conv_geom(x, wt, args.stride, args.padding).expect("checked in forward");
    debug_assert_eq!(args.out_shape, &[n, cout, geom.ho, geom.wo]);
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_per = geom.cin * geom.h * geom.w;
    let out_per = cout * cols;

    if let Some((ib, true)) = args.bias {
        let slot = grad_slot(grads, ib, cout);
        for b in 0..n {
            for (co, s) in slot.iter_mut().enumerate() {
                let base = b * out_per + co * cols;
                *s += g[base..base + cols].iter().sum::<f64>();
            }
        }
    }

    let mut col = vec![0.0; rows * cols];
    if rw {
        let mut dw = vec![0.0; cout * rows];
        for b in 0..n {
            geom.im2col(&x.data()[b * in_per..(b + 1) * in_per], &mut col);
            // dW (Cout×R) += G_b (Cout×P) · colᵀ (P×R)
            gemm(cout, cols, rows, &g[b * out_per..(b + 1) * out_per], (cols, 1), &col, (1, cols), 1.0, &mut dw);
        }
        let slot = grad_slot(grads, iw, wt.numel());
        slot.iter_mut().zip(&dw).for_each(|(s, d)| *s += d);
    }
    if rx {
        let slot = grad_slot(grads, ii, x.numel());
        for b in 0..n {
            // dcol (R×P) = Wᵀ (R×Cout) · G_b (Cout×P)
            gemm(rows, cout, cols, wt.data(), (1, rows), &g[b * out_per..(b + 1) * out_per], (cols, 1), 0.0, &mut col);
            geom.col2im(&col, &mut slot[b * in_per..(b + 1) * in_per]);
        }
    }
}

/// Source index pair and blend weight for each output coordinate of an
/// align-corners-false upsampling along one axis.
fn upsample_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(super) fn upsample_backward(
    x: &Tensor,
    factor: usize,
    g: &[f64],
    ia: usize,
    grads: &mut [Option<Vec<f64>>],
) {
    let [n, c, h, w] = x.dims4().expect("checked in forward");
    let (ty, tx) = (upsample_taps(h, factor), upsample_taps(w, factor));
    let (ho, wo) = (h * factor, w * factor);
    let slot = grad_slot(grads, ia, x.numel());
    for plane in 0..n * c {
        let src = &mut slot[plane * h * w..(plane + 1) * h * w];
        let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = gp[oy * wo + ox];
                src[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                src[y0 * w + x1] += gv * (1.0 - ly) * lx;
                src[y1 * w + x0] += gv * ly * (1.0 - lx);
                src[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Zero-padded cross-correlation of `[N, Cin, H, W]` with
    /// `[Cout, Cin, kh, kw]` (odd kernels) plus an optional `[Cout]` bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight, "conv2d")?;
        let x = self.value();
        let wt = weight.value();
        let (n, cout, geom) = conv_geom(&x, &wt, stride, padding)?;
        let bias_val = match bias {
            Some(b) => {
                self.same_tape(&b, "conv2d")?;
                let v = b.value();
                if v.numel() != cout {
                    return Err(Error::shape("conv2d", format!("bias has {} values, need {cout}", v.numel())));
                }
                Some(v)
            }
            None => None,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_per = geom.cin * geom.h * geom.w;
        let out_per = cout * cols;
        let mut out = vec![0.0; n * out_per];
        let mut col = vec![0.0; rows * cols];
        for b in 0..n {
            geom.im2col(&x.data()[b * in_per..(b + 1) * in_per], &mut col);
            let dst = &mut out[b * out_per..(b + 1) * out_per];
            if let Some(bv) = &bias_val {
                for (co, chunk) in dst.chunks_mut(cols).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bv.data()[co]);
                }
            }
            gemm(cout, rows, cols, wt.data(), (rows, 1), &col, (cols, 1), 1.0, dst);
        }
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        self.tape.push(
            "conv2d",
            Tensor::new([n, cout, geom.ho, geom.wo], out)?,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
            },
            &inputs,
        )
    }

    /// Bilinear upsampling by an integer `factor ≥ 2` (align-corners false).
    pub fn upsample_bilinear(self, factor: usize) -> Result<Var<'t>> {
        if factor < 2 {
            return Err(Error::invalid("upsample_bilinear", format!("factor {factor} < 2")));
        }
        let x = self.value();
        let [n, c, h, w] = x.dims4()?;
        let (ty, tx) = (upsample_taps(h, factor), upsample_taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
        self.tape.push(
            "upsample_bilinear",
            Tensor::new([n, c, ho, wo], out)?,
            Op::Upsample {
                input: self.id,
                factor,
            },
            &[self.id],
        )
    }
}
