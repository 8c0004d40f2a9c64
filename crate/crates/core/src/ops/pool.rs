//! Pooling and channel reductions.

/// 2×2 / stride-2 max pooling (floor). Returns the output and, per output
/// element, the flat input index that won.
pub(crate) fn maxpool2x2(x: &[f32], nc: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    for p in 0..nc {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    // Strict comparison keeps the first maximum on ties.
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

pub(crate) fn global_avg_pool(x: &[f32], nc: usize, plane: usize) -> Vec<f32> {
    x.chunks_exact(plane)
        .take(nc)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect()
}

/// Max over channels, N×C×P → N×1×P, with winning channel per position.
pub(crate) fn channel_max(x: &[f32], n: usize, c: usize, plane: usize) -> (Vec<f32>, Vec<u32>) {
    let mut y = vec![f32::NEG_INFINITY; n * plane];
    let mut arg = vec![0u32; n * plane];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (i, &v) in src.iter().enumerate() {
                if v > y[b * plane + i] {
                    y[b * plane + i] = v;
                    arg[b * plane + i] = ch as u32;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn channel_mean(x: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; n * plane];
    let inv = 1.0 / c as f32;
    for b in 0..n {
        let dst = &mut y[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let src = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    y
}
