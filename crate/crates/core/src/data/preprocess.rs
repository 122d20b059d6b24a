//! Geometric preprocessing, augmentation and per-channel standardization.

use rand::Rng;

use crate::data::{DatasetKind, Sample};
use crate::error::{Error, Result};

/// Side of every network input.
pub const INPUT_SIZE: usize = 32;
/// smallNORB images are first resized to this side.
pub const NORB_RESIZE: usize = 48;
pub const CIFAR_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Bilinear resize with half-pixel centers; `src` is `[c, h, w]`.
pub fn resize_bilinear(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let (sy, sx) = (h as f32 / oh as f32, w as f32 / ow as f32);
    let coords = |o: usize, scale: f32, n: usize| -> (usize, usize, f32) {
        let p = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(n - 1), p - lo as f32)
    };
    let xs: Vec<_> = (0..ow).map(|x| coords(x, sx, w)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in src.chunks_exact(h * w).take(c) {
        for y in 0..oh {
            let (y0, y1, fy) = coords(y, sy, h);
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// `size x size` window at (`top`, `left`).
pub fn crop(src: &[f32], c: usize, h: usize, w: usize, top: usize, left: usize, size: usize) -> Vec<f32> {
    assert!(top + size <= h && left + size <= w, "crop outside the image");
    let mut out = Vec::with_capacity(c * size * size);
    for plane in src.chunks_exact(h * w).take(c) {
        for y in top..top + size {
            out.extend_from_slice(&plane[y * w + left..y * w + left + size]);
        }
    }
    out
}

/// Zero border of `pad` pixels.
pub fn pad(src: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    for (k, plane) in src.chunks_exact(h * w).take(c).enumerate() {
        for y in 0..h {
            let row = (k * ph + y + pad) * pw + pad;
            out[row..row + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
        }
    }
    out
}

pub fn flip_horizontal(img: &mut [f32], w: usize) {
    for row in img.chunks_exact_mut(w) {
        row.reverse();
    }
}

fn pad_crop_flip<R: Rng>(img: &[f32], c: usize, side: usize, rng: &mut R) -> Vec<f32> {
    let canvas = side + 2 * CIFAR_PAD;
    let padded = pad(img, c, side, side, CIFAR_PAD);
    let (top, left) = (rng.gen_range(0..=2 * CIFAR_PAD), rng.gen_range(0..=2 * CIFAR_PAD));
    let mut out = crop(&padded, c, canvas, canvas, top, left, side);
    if rng.gen_bool(0.5) {
        flip_horizontal(&mut out, side);
    }
    out
}

/// Network input `[c, 32, 32]` with values in `[0, 1]` before standardization.
///
/// * smallNORB: bilinear 96→48, random 32x32 crop for training, center crop
///   for testing.
/// * MNIST / Fashion-MNIST: zero-pad 28→32; Fashion-MNIST training images also
///   get the CIFAR augmentation when `augment_fashion` is set.
/// * SVHN: bilinear resize to 32 when needed.
/// * CIFAR-10: training images are padded by 4, cropped at random and flipped
///   with probability 1/2.
/// * synthetic: unchanged.
pub fn preprocess<R: Rng>(sample: &Sample, kind: DatasetKind, phase: Phase, rng: &mut R, augment_fashion: bool) -> Vec<f32> {
    let im = &sample.image;
    let (c, h, w) = (im.channels, im.height, im.width);
    let x = im.to_unit();
    let train = phase == Phase::Train;
    let fit = |x: Vec<f32>| -> Vec<f32> {
        if h == INPUT_SIZE && w == INPUT_SIZE {
            x
        } else if h < INPUT_SIZE && w == h && (INPUT_SIZE - h) % 2 == 0 {
            pad(&x, c, h, w, (INPUT_SIZE - h) / 2)
        } else {
            resize_bilinear(&x, c, h, w, INPUT_SIZE, INPUT_SIZE)
        }
    };
    match kind {
        DatasetKind::SmallNorb => {
            let r = resize_bilinear(&x, c, h, w, NORB_RESIZE, NORB_RESIZE);
            let slack = NORB_RESIZE - INPUT_SIZE;
            let (top, left) = if train {
                (rng.gen_range(0..=slack), rng.gen_range(0..=slack))
            } else {
                (slack / 2, slack / 2)
            };
            crop(&r, c, NORB_RESIZE, NORB_RESIZE, top, left, INPUT_SIZE)
        }
        DatasetKind::Mnist => fit(x),
        DatasetKind::FashionMnist if train && augment_fashion => pad_crop_flip(&fit(x), c, INPUT_SIZE, rng),
        DatasetKind::FashionMnist | DatasetKind::Svhn | DatasetKind::Synthetic => fit(x),
        DatasetKind::Cifar10 if train => pad_crop_flip(&fit(x), c, INPUT_SIZE, rng),
        DatasetKind::Cifar10 => fit(x),
    }
}

/// Per-channel affine standardization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Whether `kind` is standardized with training-split statistics; the
    /// other datasets keep raw `[0, 1]` pixels.
    pub fn standardizes(kind: DatasetKind) -> bool {
        matches!(kind, DatasetKind::SmallNorb | DatasetKind::Svhn | DatasetKind::Cifar10)
    }

    /// Channel statistics of the test-phase preprocessed training split.
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a Sample>, kind: DatasetKind) -> Result<Self> {
        let c = kind.channels();
        if !Self::standardizes(kind) {
            return Ok(Self::identity(c));
        }
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut count = 0usize;
        for s in train {
            let x = preprocess(s, kind, Phase::Test, &mut rng, false);
            let plane = x.len() / c;
            for (k, ch) in x.chunks_exact(plane).enumerate() {
                for &v in ch {
                    sum[k] += v as f64;
                    sq[k] += v as f64 * v as f64;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::DatasetMissing(format!("{kind} training split is empty")));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, img: &mut [f32]) {
        let plane = img.len() / self.channels();
        for (k, ch) in img.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[k] as f32, self.std[k] as f32);
            for v in ch {
                *v = (*v - m) / s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(c: usize, side: usize) -> Sample {
        let px = (0..c * side * side).map(|i| (i % 251) as u8).collect();
        Sample {
            image: Image::new(c, side, side, px).unwrap(),
            label: 0,
            meta: None,
        }
    }

    #[test]
    fn norb_test_crop_is_centered() {
        let s = sample(2, 96);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = preprocess(&s, DatasetKind::SmallNorb, Phase::Test, &mut rng, false);
        assert_eq!(out.len(), 2 * 32 * 32);
        let r = resize_bilinear(&s.image.to_unit(), 2, 96, 96, 48, 48);
        assert_eq!(out[0], r[8 * 48 + 8]);
        assert_eq!(out[32 * 32 + 31 * 32 + 31], r[48 * 48 + 39 * 48 + 39]);
    }

    #[test]
    fn halving_averages_blocks() {
        let src = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(resize_bilinear(&src, 1, 2, 2, 1, 1), vec![2.5]);
    }

    #[test]
    fn mnist_gets_a_two_pixel_border() {
        let s = sample(1, 28);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = preprocess(&s, DatasetKind::Mnist, Phase::Train, &mut rng, false);
        assert_eq!(out.len(), 32 * 32);
        assert!(out[..2 * 32].iter().all(|&v| v == 0.0));
        assert_eq!(out[2 * 32 + 2], s.image.to_unit()[0]);
        assert_eq!(out[2 * 32 + 3], s.image.to_unit()[1]);
    }

    #[test]
    fn cifar_augmentation_keeps_size_and_is_seeded() {
        let s = sample(3, 32);
        let a = preprocess(&s, DatasetKind::Cifar10, Phase::Train, &mut ChaCha8Rng::seed_from_u64(4), false);
        let b = preprocess(&s, DatasetKind::Cifar10, Phase::Train, &mut ChaCha8Rng::seed_from_u64(4), false);
        assert_eq!(a.len(), 3 * 32 * 32);
        assert_eq!(a, b);
        let t = preprocess(&s, DatasetKind::Cifar10, Phase::Test, &mut ChaCha8Rng::seed_from_u64(4), false);
        assert_eq!(t, s.image.to_unit());
    }
}
