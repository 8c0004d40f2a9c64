//! Criss-cross attention with single-channel queries and keys.
//!
//! Every pixel `u = (h, w)` attends over its footprint: all pixels of row `h`
//! plus the pixels of column `w` other than itself, `W + H - 1` positions in
//! total. Energies are `q[u] * k[v]`, normalized by a softmax over the
//! footprint, and the output is the attention-weighted sum of `v`.
//!
//! Attention weights for one pixel are laid out as
//! `[row (h, 0..W)] ++ [column (0..H without h, w)]`.

use super::gemm_strided;

pub(crate) fn footprint_len(h: usize, w: usize) -> usize {
    h + w - 1
}

#[inline]
fn column_slot(i: usize, h: usize) -> usize {
    if i < h {
        i
    } else {
        i - 1
    }
}

/// Column attention of one image as dense `W` blocks of `H×H` (`[x][y][i]`),
/// with zeros on the diagonal where a pixel would attend to itself twice.
fn dense_columns(a: &[f32], h: usize, w: usize) -> Vec<f32> {
    let fp = footprint_len(h, w);
    let mut cols = vec![0.0f32; w * h * h];
    for y in 0..h {
        for x in 0..w {
            let src = &a[(y * w + x) * fp + w..(y * w + x + 1) * fp];
            let dst = &mut cols[(x * h + y) * h..(x * h + y + 1) * h];
            dst[..y].copy_from_slice(&src[..y]);
            dst[y + 1..].copy_from_slice(&src[y..]);
        }
    }
    cols
}

/// `out[c] += Σ attention · v[c]` for one image (`v`, `out` are `C×H×W`).
fn aggregate(a: &[f32], v: &[f32], out: &mut [f32], c: usize, h: usize, w: usize) {
    let (plane, fp) = (h * w, footprint_len(h, w));
    for y in 0..h {
        // out[:, y, :] = V[:, y, :] · A_row(y)ᵀ
        let row = y * w;
        gemm_strided(
            c,
            w,
            w,
            &v[row..],
            (plane, 1),
            &a[row * fp..],
            (1, fp),
            0.0,
            &mut out[row..],
            (plane, 1),
        );
    }
    let cols = dense_columns(a, h, w);
    for x in 0..w {
        // out[:, :, x] += V[:, :, x] · A_col(x)ᵀ
        gemm_strided(
            c,
            h,
            h,
            &v[x..],
            (plane, w),
            &cols[x * h * h..],
            (1, h),
            1.0,
            &mut out[x..],
            (plane, w),
        );
    }
}

/// Returns `(out[N,C,H,W], attn[N,H*W,H+W-1])`.
pub(crate) fn forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let fp = footprint_len(h, w);
    let mut attn = vec![0.0f32; n * plane * fp];
    let mut out = vec![0.0f32; n * c * plane];
    for b in 0..n {
        let qb = &q[b * plane..(b + 1) * plane];
        let kb = &k[b * plane..(b + 1) * plane];
        let ab = &mut attn[b * plane * fp..(b + 1) * plane * fp];
        for y in 0..h {
            for x in 0..w {
                let u = y * w + x;
                let qu = qb[u];
                let a = &mut ab[u * fp..(u + 1) * fp];
                for (e, &kv) in a[..w].iter_mut().zip(&kb[y * w..(y + 1) * w]) {
                    *e = qu * kv;
                }
                for i in 0..h {
                    if i != y {
                        a[w + column_slot(i, y)] = qu * kb[i * w + x];
                    }
                }
                let max = a.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                for e in a.iter_mut() {
                    *e = (*e - max).exp();
                    z += *e;
                }
                let inv = 1.0 / z;
                a.iter_mut().for_each(|e| *e *= inv);
            }
        }
        let off = b * c * plane;
        aggregate(ab, &v[off..off + c * plane], &mut out[off..off + c * plane], c, h, w);
    }
    (out, attn)
}

pub(crate) struct CrissCrossGrads {
    pub dq: Vec<f32>,
    pub dk: Vec<f32>,
    pub dv: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    attn: &[f32],
    dout: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> CrissCrossGrads {
    let plane = h * w;
    let fp = footprint_len(h, w);
    let mut dq = vec![0.0f32; n * plane];
    let mut dk = vec![0.0f32; n * plane];
    let mut dv = vec![0.0f32; n * c * plane];
    let mut da = vec![0.0f32; plane * fp];
    let mut dcols = vec![0.0f32; w * h * h];
    for b in 0..n {
        let ab = &attn[b * plane * fp..(b + 1) * plane * fp];
        let off = b * c * plane;
        let vb = &v[off..off + c * plane];
        let gb = &dout[off..off + c * plane];
        let dvb = &mut dv[off..off + c * plane];
        for y in 0..h {
            let row = y * w;
            // dA_row(y) = G[:, y, :]ᵀ · V[:, y, :]
            gemm_strided(w, c, w, &gb[row..], (1, plane), &vb[row..], (plane, 1), 0.0, &mut da[row * fp..], (fp, 1));
            // dV[:, y, :] = G[:, y, :] · A_row(y)
            gemm_strided(c, w, w, &gb[row..], (plane, 1), &ab[row * fp..], (fp, 1), 0.0, &mut dvb[row..], (plane, 1));
        }
        let cols = dense_columns(ab, h, w);
        for x in 0..w {
            let blk = x * h * h;
            // dA_col(x) = G[:, :, x]ᵀ · V[:, :, x]
            gemm_strided(h, c, h, &gb[x..], (w, plane), &vb[x..], (plane, w), 0.0, &mut dcols[blk..], (h, 1));
            // dV[:, :, x] += G[:, :, x] · A_col(x)
            gemm_strided(c, h, h, &gb[x..], (plane, w), &cols[blk..], (h, 1), 1.0, &mut dvb[x..], (plane, w));
        }
        for y in 0..h {
            for x in 0..w {
                let d = &mut da[(y * w + x) * fp + w..(y * w + x + 1) * fp];
                let src = &dcols[(x * h + y) * h..(x * h + y + 1) * h];
                d[..y].copy_from_slice(&src[..y]);
                d[y..].copy_from_slice(&src[y + 1..]);
            }
        }

        let qb = &q[b * plane..(b + 1) * plane];
        let kb = &k[b * plane..(b + 1) * plane];
        let dqb = &mut dq[b * plane..(b + 1) * plane];
        let dkb = &mut dk[b * plane..(b + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let u = y * w + x;
                let a = &ab[u * fp..(u + 1) * fp];
                let d = &da[u * fp..(u + 1) * fp];
                let dot: f32 = a.iter().zip(d).map(|(p, q)| p * q).sum();
                let mut acc = 0.0f32;
                for j in 0..w {
                    let de = a[j] * (d[j] - dot);
                    acc += de * kb[y * w + j];
                    dkb[y * w + j] += de * qb[u];
                }
                for i in 0..h {
                    if i != y {
                        let s = w + column_slot(i, y);
                        let de = a[s] * (d[s] - dot);
                        acc += de * kb[i * w + x];
                        dkb[i * w + x] += de * qb[u];
                    }
                }
                dqb[u] += acc;
            }
        }
    }
    CrissCrossGrads { dq, dk, dv }
}
