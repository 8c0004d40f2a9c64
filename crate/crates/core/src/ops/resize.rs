//! Bilinear resampling, `align_corners = false` (half-pixel centers).

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f32,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f32 / output as f32;
    (0..output)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f32,
            }
        })
        .collect()
}

pub(crate) fn bilinear(x: &[f32], planes: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    let ty = taps(h, th);
    let tx = taps(w, tw);
    let mut y = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in &ty {
            let row0 = &src[r.i0 * w..(r.i0 + 1) * w];
            let row1 = &src[r.i1 * w..(r.i1 + 1) * w];
            for c in &tx {
                let top = row0[c.i0] + (row0[c.i1] - row0[c.i0]) * c.frac;
                let bot = row1[c.i0] + (row1[c.i1] - row1[c.i0]) * c.frac;
                y.push(top + (bot - top) * r.frac);
            }
        }
    }
    y
}

pub(crate) fn bilinear_backward(
    dy: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<f32> {
    let ty = taps(h, th);
    let tx = taps(w, tw);
    let mut dx = vec![0.0f32; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * th * tw..(p + 1) * th * tw];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, r) in ty.iter().enumerate() {
            for (ox, c) in tx.iter().enumerate() {
                let v = g[oy * tw + ox];
                let top = v * (1.0 - r.frac);
                let bot = v * r.frac;
                dst[r.i0 * w + c.i0] += top * (1.0 - c.frac);
                dst[r.i0 * w + c.i1] += top * c.frac;
                dst[r.i1 * w + c.i0] += bot * (1.0 - c.frac);
                dst[r.i1 * w + c.i1] += bot * c.frac;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(bilinear(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn doubling_matches_half_pixel_convention() {
        // [0, 1] -> [0, 0.25, 0.75, 1] under align_corners = false.
        let y = bilinear(&[0.0, 1.0], 1, 1, 2, 1, 4);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{y:?}");
        }
    }
}
