//! Padding of variable-size chips into rectangular batches.
//!
//! Every chip in a batch is padded with invalid, zero-filled pixels at the
//! bottom and right up to the batch's largest height and width, each
//! rounded up to a multiple of `2^depth`.

use super::chip::{EmbeddingChip, Sample, BANDS};
use crate::scalar::Scalar;
use crate::segnet::Tensor;

fn fill_padded<T: Scalar>(chip: &EmbeddingChip, w: usize, dst: &mut [T]) {
    let plane = dst.len() / BANDS;
    let (ch, cw) = (chip.height, chip.width);
    for b in 0..BANDS {
        let src = chip.band(b);
        for r in 0..ch {
            let out = &mut dst[b * plane + r * w..b * plane + r * w + cw];
            for (o, &v) in out.iter_mut().zip(&src[r * cw..(r + 1) * cw]) {
                *o = T::from_f64_lossy(f64::from(v));
            }
        }
    }
}

/// `copies` identical padded copies of one chip.
pub fn chip_tensor<T: Scalar>(chip: &EmbeddingChip, depth: usize, copies: usize) -> Tensor<T> {
    let (h, w) = padded_dims(chip.height, chip.width, depth);
    let mut t = Tensor::zeros(copies, BANDS, h, w);
    if copies > 0 {
        fill_padded(chip, w, t.sample_mut(0));
        let len = t.sample_len();
        let (first, rest) = t.data.split_at_mut(len);
        for dst in rest.chunks_mut(len) {
            dst.copy_from_slice(first);
        }
    }
    t
}

/// Round `(h, w)` up to multiples of `2^depth`.
pub fn padded_dims(h: usize, w: usize, depth: usize) -> (usize, usize) {
    let q = 1usize << depth;
    (h.div_ceil(q) * q, w.div_ceil(q) * q)
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `N x 64 x H x W` network input.
    pub input: Tensor<T>,
    /// `N x H x W` labels (0 at padding).
    pub labels: Vec<u8>,
    /// `N x H x W` validity; padding is invalid.
    pub valid: Vec<bool>,
    /// Unpadded `(height, width)` of each chip.
    pub dims: Vec<(usize, usize)>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }
}

pub fn assemble_batch<T: Scalar>(samples: &[&Sample], depth: usize) -> Batch<T> {
    let max_h = samples.iter().map(|s| s.chip.height).max().unwrap_or(0);
    let max_w = samples.iter().map(|s| s.chip.width).max().unwrap_or(0);
    let (h, w) = padded_dims(max_h, max_w, depth);
    let n = samples.len();
    let plane = h * w;
    let mut input = Tensor::zeros(n, BANDS, h, w);
    let mut labels = vec![0u8; n * plane];
    let mut valid = vec![false; n * plane];
    let mut dims = Vec::with_capacity(n);

    for (k, s) in samples.iter().enumerate() {
        let chip = &s.chip;
        let (ch, cw) = (chip.height, chip.width);
        dims.push((ch, cw));
        fill_padded(chip, w, input.sample_mut(k));
        for r in 0..ch {
            for c in 0..cw {
                let i = r * cw + c;
                let j = k * plane + r * w + c;
                valid[j] = chip.valid[i];
                labels[j] = if chip.valid[i] { s.labels.labels[i] } else { 0 };
            }
        }
    }
    Batch {
        input,
        labels,
        valid,
        dims,
    }
}

/// Crop the top-left `h x w` window out of a row-major map of width `padded_w`.
pub fn crop_map<T: Copy>(map: &[T], padded_w: usize, h: usize, w: usize) -> Vec<T> {
    (0..h)
        .flat_map(|r| map[r * padded_w..r * padded_w + w].iter().copied())
        .collect()
}
