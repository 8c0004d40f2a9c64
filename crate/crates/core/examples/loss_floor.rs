//! Lowest hybrid loss reachable by each side output on the desk training set.
//!
//! A side map is a logit grid at its stage resolution, bilinearly upsampled
//! to 64×64. Optimizing that grid directly, with no network in between,
//! bounds what any weights can reach for that term.
//!
//! `cargo run --release -p agsenet --example loss_floor`

use agsenet::data::{stack, synth_scene, SynthSpec};
use agsenet::loss::hybrid_loss;
use agsenet::{Tape, Tensor};

const SIZE: usize = 64;

fn best_loss(masks: &Tensor, r: usize) -> f32 {
    let n = masks.shape()[0];
    let mut best = f32::INFINITY;
    for (scale, init) in [(0.1f32, 0.0f32), (1.0, -3.0), (3.0, -1.0)] {
        let mut logits = Tensor::full(&[n, 1, r, r], init);
        let mut vel = Tensor::zeros(&[n, 1, r, r]);
        let lr = scale * (r * r) as f32 / 4.0;
        for _ in 0..8000 {
            let mut t = Tape::new();
            let l = t.leaf(logits.clone(), true);
            let up = if r == SIZE { l } else { t.upsample_bilinear(l, SIZE, SIZE).unwrap() };
            let p = t.sigmoid(up);
            let m = t.constant(masks.clone());
            let one = t.constant(Tensor::scalar(1.0));
            let h = hybrid_loss(&mut t, p, m, one, one).unwrap();
            best = best.min(t.value(h.total).item());
            t.backward(h.total).unwrap();
            let grad = t.grad(l).unwrap();
            for ((w, v), g) in logits.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
                *v = 0.9 * *v + g;
                *w -= lr * *v;
            }
        }
    }
    best
}

fn main() {
    let samples: Vec<_> = (0..8)
        .map(|i| synth_scene(&SynthSpec::new(SIZE, 1000 + i)).unwrap().sample)
        .collect();
    let batches: Vec<Tensor> = samples
        .chunks(4)
        .map(|c| stack(&c.iter().map(|s| &s.mask).collect::<Vec<_>>()).unwrap())
        .collect();
    let mut total = 0.0;
    for (side, r) in [64usize, 32, 16, 8, 4, 2].into_iter().enumerate() {
        let mean = batches.iter().map(|m| best_loss(m, r) as f64).sum::<f64>() / batches.len() as f64;
        println!("side {} ({r}x{r}): {mean:.4}", side + 1);
        total += mean;
        if r == SIZE {
            println!("fused (64x64): {mean:.4}");
            total += mean;
        }
    }
    println!("seven-term floor at gamma = delta = 1: {total:.4}");
}
