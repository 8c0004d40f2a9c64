//! 2-D cross-correlation via im2col + GEMM.

use super::gemm;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride-1 convolution that keeps H×W for an odd `kernel`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config(format!(
                "conv2d stride and dilation must be positive, got {self:?}"
            )));
        }
        let out = |size: usize, k: usize| -> Option<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = size + 2 * self.padding;
            (padded >= span).then(|| (padded - span) / self.stride + 1)
        };
        match (out(h, kh), out(w, kw)) {
            (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok((ho, wo)),
            _ => Err(Error::Config(format!(
                "conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, {self:?}"
            ))),
        }
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `ow` whose input column `ow·stride + offset` lies in `0..w`.
fn valid_cols(wo: usize, stride: usize, offset: isize, w: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let end = w as isize - offset;
    let hi = if end <= 0 { 0 } else { ((end + s - 1) / s) as usize };
    (lo.min(wo), hi.min(wo).max(lo.min(wo)))
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        spec,
        ..
    } = *g;
    let pad = spec.padding as isize;
    let stride = spec.stride;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let off = (kj * spec.dilation) as isize - pad;
                let (lo, hi) = valid_cols(wo, stride, off, w);
                for oh in 0..ho {
                    let ih = (oh * stride + ki * spec.dilation) as isize - pad;
                    let out_row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if hi > lo {
                        let start = (lo * stride) as isize + off;
                        let start = start as usize;
                        if stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (o, &v) in out_row[lo..hi].iter_mut().zip(src[start..].iter().step_by(stride)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let ConvGeom {
        cin,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        spec,
        ..
    } = *g;
    let pad = spec.padding as isize;
    let stride = spec.stride;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let off = (kj * spec.dilation) as isize - pad;
                let (lo, hi) = valid_cols(wo, stride, off, w);
                if hi <= lo {
                    continue;
                }
                let start = ((lo * stride) as isize + off) as usize;
                for oh in 0..ho {
                    let ih = (oh * stride + ki * spec.dilation) as isize - pad;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let s_row = &src[oh * wo + lo..oh * wo + hi];
                    if stride == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(s_row) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(stride).zip(s_row) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    bias_len: Option<usize>,
    spec: Conv2dSpec,
) -> Result<ConvGeom> {
    let &[n, cin, h, w] = x_shape else {
        return Err(Error::shape(
            "conv2d",
            format!("input must be N,C,H,W, got {x_shape:?}"),
        ));
    };
    let &[cout, wcin, kh, kw] = w_shape else {
        return Err(Error::shape(
            "conv2d",
            format!("weight must be Cout,Cin,kH,kW, got {w_shape:?}"),
        ));
    };
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    if let Some(b) = bias_len {
        if b != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {b} entries for {cout} output channels"),
            ));
        }
    }
    let (ho, wo) = spec.output_size(h, w, kh, kw)?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
        spec,
    })
}

pub(crate) fn forward(g: &ConvGeom, x: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let k = g.cols_rows();
    let p = g.out_plane();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut y = vec![0.0; g.n * out_len];
    let pointwise = g.spec.is_pointwise(g.kh, g.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..g.n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let yb = &mut y[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, row) in yb.chunks_exact_mut(p).enumerate() {
                row.fill(bias[co]);
            }
        }
        let src = if pointwise {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(g.cout, k, p, weight, false, src, false, 1.0, yb);
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let k = g.cols_rows();
    let p = g.out_plane();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let pointwise = g.spec.is_pointwise(g.kh, g.kw);

    let mut dx = need_dx.then(|| vec![0.0; g.n * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; g.cout * k]);
    let db = need_db.then(|| {
        let mut db = vec![0.0f32; g.cout];
        for b in 0..g.n {
            for (co, row) in dy[b * out_len..(b + 1) * out_len].chunks_exact(p).enumerate() {
                db[co] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        db
    });

    let mut cols = if pointwise || !need_dw { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..g.n {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let src = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(g.cout, p, k, dyb, false, src, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if pointwise {
                gemm(k, g.cout, p, weight, true, dyb, false, 1.0, dxb);
            } else {
                gemm(k, g.cout, p, weight, true, dyb, false, 0.0, &mut dcols);
                col2im(g, &dcols, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
