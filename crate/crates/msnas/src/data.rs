//! Image classification data: a procedural desk-scale dataset, a loader for
//! the common binary batch format (1 label byte + channel-major u8 pixels),
//! and bilinear resizing used when a sampled architecture wants a smaller
//! input resolution.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, channels, size, size]` contiguous, values in [0, 1].
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gather a batch `[len(indices), C, size, size]` with labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(&[indices.len(), self.channels, self.size, self.size], data)
            .expect("batch shape");
        (t, labels)
    }

    /// Deterministic subset selection without replacement.
    pub fn sample_indices(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        for i in 0..idx.len() {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(count.min(self.labels.len()));
        idx
    }
}

/// Procedural dataset: each class is an oriented grating with a
/// class-dependent mean color; per-sample difficulty mixes in a distractor
/// class and noise, so confidence spreads across samples.
pub fn synthetic_dataset(
    classes: usize,
    n: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * channels * size * size);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;

    let grating = |class: usize, x: usize, y: usize, phase: f64| -> f64 {
        let theta = std::f64::consts::PI * class as f64 / classes as f64;
        let freq = 2.0 + (class % 5) as f64;
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        (tau * freq * (u * theta.cos() + v * theta.sin()) + phase).sin()
    };
    // Fine texture close to the downsampled Nyquist rate: separating these
    // rewards higher input resolution and larger kernels.
    let fine = |class: usize, x: usize, y: usize, phase: f64| -> f64 {
        let theta = std::f64::consts::PI * ((class * 7) % classes) as f64 / classes as f64;
        let freq = 7.0 + (class % 3) as f64 * 2.0;
        let u = x as f64 / size as f64;
        let v = y as f64 / size as f64;
        (tau * freq * (u * theta.cos() + v * theta.sin()) + phase).sin()
    };
    let color = |class: usize, ch: usize| -> f64 {
        (tau * class as f64 / classes as f64 + ch as f64 * 2.1).cos()
    };

    for i in 0..n {
        let class = i % classes;
        let difficulty: f64 = rng.gen_range(0.0..1.0);
        let distractor = (class + rng.gen_range(1..classes.max(2))) % classes;
        let phase: f64 = rng.gen_range(0.0..tau);
        let phase2: f64 = rng.gen_range(0.0..tau);
        // Hard samples lean on the distractor pattern and lose most of the
        // mean-color cue; what remains is the texture, which takes capacity
        // (and resolution) to separate.
        let main_w = 1.0 - 0.55 * difficulty;
        let dis_w = 0.55 * difficulty;
        let noise = 0.02 + 0.22 * difficulty;
        let mean_w = 0.28 * (1.0 - 0.65 * difficulty);
        for ch in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let g = main_w * grating(class, x, y, phase) * (0.6 + 0.4 * color(class, ch))
                        + dis_w * grating(distractor, x, y, phase2)
                            * (0.6 + 0.4 * color(distractor, ch));
                    let f = main_w * fine(class, x, y, phase2) - dis_w * fine(distractor, x, y, phase);
                    let mean = mean_w * color(class, ch) + dis_w * 0.28 * color(distractor, ch);
                    let eps: f64 = {
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        (-2.0 * u1.ln()).sqrt() * (tau * u2).cos()
                    };
                    let v = 0.5 + mean + 0.2 * g + 0.1 * f + noise * eps;
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    Dataset { images, labels, channels, size }
}

/// Load binary batches: records of `1 + channels*size*size` bytes, label
/// first, pixels channel-major. The CIFAR-10 layout uses size 32, 3 channels.
pub fn load_binary_batches<P: AsRef<Path>>(
    paths: &[P],
    channels: usize,
    size: usize,
) -> Result<Dataset> {
    let rec = 1 + channels * size * size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let mut buf = Vec::new();
        std::fs::File::open(p.as_ref())
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", p.as_ref().display())))?
            .read_to_end(&mut buf)?;
        if buf.len() % rec != 0 {
            return Err(Error::Data(format!(
                "{} is not a whole number of {rec}-byte records",
                p.as_ref().display()
            )));
        }
        for chunk in buf.chunks_exact(rec) {
            labels.push(chunk[0] as usize);
            images.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::Data("no records in dataset files".into()));
    }
    Ok(Dataset { images, labels, channels, size })
}

/// Bilinear resize of an NCHW batch to `out x out` (half-pixel centers).
pub fn resize_bilinear(batch: &Tensor, out: usize) -> Tensor {
    let (b, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    if h == out && w == out {
        return batch.clone();
    }
    let mut y = Tensor::zeros(&[b, c, out, out]);
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    let xs = batch.data();
    let ys = y.data_mut();
    for bc in 0..b * c {
        let src = bc * h * w;
        let dst = bc * out * out;
        for oy in 0..out {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v = xs[src + y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + xs[src + y0 * w + x1] * (1.0 - wy) * wx
                    + xs[src + y1 * w + x0] * wy * (1.0 - wx)
                    + xs[src + y1 * w + x1] * wy * wx;
                ys[dst + oy * out + ox] = v;
            }
        }
    }
    y
}
