//! Per-channel batch normalization over (N, H, W).

pub const BN_EPS: f32 = 1e-5;

pub(crate) struct BnForward {
    pub y: Vec<f32>,
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Unbiased batch variance, for running-statistics updates.
    pub var_unbiased: Vec<f32>,
}

pub(crate) fn train_forward(
    x: &[f32],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f32],
    beta: &[f32],
) -> BnForward {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    let mut var_unbiased = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for b in 0..n {
            ss += x[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        let var = ss / m;
        mean[ch] = mu as f32;
        inv_std[ch] = (1.0 / (var + BN_EPS as f64).sqrt()) as f32;
        var_unbiased[ch] = if m > 1.0 { (ss / (m - 1.0)) as f32 } else { 0.0 };
    }
    let y = apply(x, n, c, plane, &mean, &inv_std, gamma, beta);
    BnForward {
        y,
        mean,
        inv_std,
        var_unbiased,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn apply(
    x: &[f32],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    beta: &[f32],
) -> Vec<f32> {
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for (o, &v) in y[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = v * scale + shift;
            }
        }
    }
    y
}

pub(crate) struct BnGrads {
    pub dx: Vec<f32>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// Gradients of `y = gamma·(x−mean)·inv_std + beta`. When `batch_stats` is
/// true the mean and variance are functions of `x` and contribute to `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    batch_stats: bool,
) -> BnGrads {
    let m = (n * plane) as f64;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (mu, is) = (mean[ch], inv_std[ch]);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for (&g, &v) in dy[off..off + plane].iter().zip(&x[off..off + plane]) {
                sum_dy += g as f64;
                sum_dy_xhat += g as f64 * ((v - mu) * is) as f64;
            }
        }
        dgamma[ch] = sum_dy_xhat as f32;
        dbeta[ch] = sum_dy as f32;
        let k = gamma[ch] * is;
        let mean_dy = (sum_dy / m) as f32;
        let mean_dy_xhat = (sum_dy_xhat / m) as f32;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = if batch_stats {
                    let xhat = (x[i] - mu) * is;
                    k * (dy[i] - mean_dy - xhat * mean_dy_xhat)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}
