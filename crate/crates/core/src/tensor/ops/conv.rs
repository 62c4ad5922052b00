use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dOptions {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one group of one image into `[cin_g*kh*kw, ho*wo]`.
fn im2col<T: Scalar>(x: &[T], c0: usize, g: &Geometry, col: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.cin_g() {
        let plane = &x[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into the group's input planes.
fn col2im<T: Scalar>(col: &[T], c0: usize, g: &Geometry, dx: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.cin_g() {
        let plane = &mut dx[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn forward_image<T: Scalar>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let (cin_g, cout_g, patch, hw) = (g.cin_g(), g.cout_g(), g.patch(), g.out_hw());
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * hw]
    };
    for grp in 0..g.groups {
        let wg = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
        let dst = &mut out[grp * cout_g * hw..(grp + 1) * cout_g * hw];
        if g.pointwise() {
            let xg = &x[grp * cin_g * hw..(grp + 1) * cin_g * hw];
            T::gemm(cout_g, patch, hw, wg, false, xg, false, dst, false);
        } else {
            im2col(x, grp * cin_g, g, &mut col);
            T::gemm(cout_g, patch, hw, wg, false, &col, false, dst, false);
        }
    }
}

fn backward_image<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Geometry,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (cin_g, cout_g, patch, hw) = (g.cin_g(), g.cout_g(), g.patch(), g.out_hw());
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { patch * hw }];
    if let Some(dw) = dw {
        for grp in 0..g.groups {
            let go = &gout[grp * cout_g * hw..(grp + 1) * cout_g * hw];
            let dst = &mut dw[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            if g.pointwise() {
                let xg = &x[grp * cin_g * hw..(grp + 1) * cin_g * hw];
                T::gemm(cout_g, hw, patch, go, false, xg, true, dst, false);
            } else {
                im2col(x, grp * cin_g, g, &mut col);
                T::gemm(cout_g, hw, patch, go, false, &col, true, dst, false);
            }
        }
    }
    if let Some(dx) = dx {
        for grp in 0..g.groups {
            let wg = &w[grp * cout_g * patch..(grp + 1) * cout_g * patch];
            let go = &gout[grp * cout_g * hw..(grp + 1) * cout_g * hw];
            if g.pointwise() {
                let dst = &mut dx[grp * cin_g * hw..(grp + 1) * cin_g * hw];
                T::gemm(patch, cout_g, hw, wg, true, go, false, dst, false);
            } else {
                T::gemm(patch, cout_g, hw, wg, true, go, false, &mut col, false);
                col2im(&col, grp * cin_g, g, dx);
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        opts: Conv2dOptions,
    ) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected rank-4 input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        let Conv2dOptions {
            stride,
            padding: pad,
            groups,
        } = opts;
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d stride and groups must be positive (stride {stride}, groups {groups})"
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("Cin {cin} and Cout {cout} must both divide into {groups} groups"),
            ));
        }
        if cin_g * groups != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {cin_g} input channels per group, input has {cin} over {groups} groups"
                ),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match Cout {cout}", b.shape()),
                ));
            }
        }
        let g = Geometry {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
            groups,
        };
        let (in_sz, out_sz) = (cin * h * w, cout * g.out_hw());
        let mut out = vec![T::zero(); n * out_sz];
        let (xd, wd) = (self.data(), weight.data());
        out.par_chunks_mut(out_sz)
            .enumerate()
            .for_each(|(i, o)| forward_image(&xd[i * in_sz..(i + 1) * in_sz], wd, &g, o));
        if let Some(b) = bias {
            let hw = g.out_hw();
            for o in out.chunks_mut(hw).enumerate() {
                let bv = b.data()[o.0 % cout];
                o.1.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let (x, wt, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        Ok(Tensor::from_op(
            "conv2d",
            vec![n, cout, g.ho, g.wo],
            out,
            parents,
            move |_, gout| {
                let (xd, wd) = (x.data(), wt.data());
                let wsz = wd.len();
                let need_dx = x.requires_grad();
                let need_dw = wt.requires_grad();
                let mut dx = vec![T::zero(); if need_dx { n * in_sz } else { 0 }];
                let mut dw_parts = vec![T::zero(); if need_dw { n * wsz } else { 0 }];
                let dx_chunks: Vec<Option<&mut [T]>> = if need_dx {
                    dx.chunks_mut(in_sz).map(Some).collect()
                } else {
                    (0..n).map(|_| None).collect()
                };
                let dw_chunks: Vec<Option<&mut [T]>> = if need_dw {
                    dw_parts.chunks_mut(wsz).map(Some).collect()
                } else {
                    (0..n).map(|_| None).collect()
                };
                dx_chunks
                    .into_par_iter()
                    .zip(dw_chunks)
                    .enumerate()
                    .for_each(|(i, (dxi, dwi))| {
                        backward_image(
                            &xd[i * in_sz..(i + 1) * in_sz],
                            wd,
                            &gout[i * out_sz..(i + 1) * out_sz],
                            &g,
                            dxi,
                            dwi,
                        )
                    });
                // Reduce per-image weight gradients in image order so the sum does not
                // depend on how work was scheduled.
                let dw = need_dw.then(|| {
                    let mut dw = vec![T::zero(); wsz];
                    for part in dw_parts.chunks(wsz) {
                        dw.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
                    }
                    dw
                });
                let mut grads = vec![need_dx.then_some(dx), dw];
                if has_bias {
                    let hw = g.out_hw();
                    let mut db = vec![T::zero(); cout];
                    for (k, plane) in gout.chunks(hw).enumerate() {
                        db[k % cout] += plane.iter().copied().sum::<T>();
                    }
                    grads.push(Some(db));
                }
                grads
            },
        ))
    }
}
