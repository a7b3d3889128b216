use rand_chacha::ChaCha8Rng;

use super::config::ForwardMode;
use super::layers::{
    bn_backward, bn_forward, concat, conv_backward, conv_forward, dropout_scales, maxpool_backward,
    maxpool_forward, relu_backward, relu_inplace, scale_channels, split_channels,
    upsample_backward, upsample_forward, BnCache,
};
use super::params::{BatchStats, Gradients, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::objective::{logit_loss_and_grad, LossBreakdown, ObjectiveConfig};
use crate::rng::{derive_seed, seeded_rng};
use crate::scalar::Scalar;

/// Per-sample dropout seeds derived from one batch seed.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, &[i])).collect()
}

struct UnitCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    output: Tensor<T>,
}

struct EncCache<T> {
    conv1: UnitCache<T>,
    conv2: UnitCache<T>,
    drop: Option<Vec<T>>,
    pool: Option<Vec<u8>>,
    hw: (usize, usize),
}

struct DecCache<T> {
    up: UnitCache<T>,
    conv1: UnitCache<T>,
    conv2: UnitCache<T>,
    drop: Option<Vec<T>>,
}

struct Cache<T> {
    enc: Vec<EncCache<T>>,
    /// In execution order: deepest level first.
    dec: Vec<DecCache<T>>,
    head_input: Tensor<T>,
}

struct Pass<'a, T: Scalar> {
    params: &'a ParameterSet<T>,
    mode: ForwardMode,
    rngs: Vec<ChaCha8Rng>,
    keep: bool,
    stats: BatchStats,
}

impl<T: Scalar> Pass<'_, T> {
    fn unit(&mut self, conv: usize, x: Tensor<T>) -> Result<(Tensor<T>, Option<UnitCache<T>>)> {
        let p = self.params;
        let spec = &p.specs()[conv];
        let slots = p.slots(conv);
        let mut y = conv_forward(
            &x,
            &p.tensors[slots.weight].data,
            &p.tensors[slots.bias].data,
            spec.out_channels,
            spec.kernel,
        );
        let bn = slots.norm.map(|(g, b, rm, rv)| {
            let running = (!self.mode.batch_stats())
                .then(|| (p.running[rm].data.as_slice(), p.running[rv].data.as_slice()));
            let (cache, stats) =
                bn_forward(&mut y, &p.tensors[g].data, &p.tensors[b].data, running);
            self.stats[conv] = stats;
            cache
        });
        if spec.relu {
            relu_inplace(&mut y);
        }
        if !y.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("activations of {}", spec.name)));
        }
        let cache = self.keep.then(|| UnitCache {
            input: x,
            bn,
            output: y.clone(),
        });
        Ok((y, cache))
    }

    fn dropout(&mut self, x: &mut Tensor<T>, site: bool) -> Option<Vec<T>> {
        if !(site && self.mode.dropout_active()) {
            return None;
        }
        let scales = dropout_scales(&mut self.rngs, x.c, self.params.config().dropout_rate);
        scale_channels(x, &scales);
        Some(scales)
    }

    fn run(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let cfg = *self.params.config();
        let depth = cfg.depth;
        let mut enc = Vec::new();
        let mut skips = Vec::new();
        let mut x = input.clone();
        for level in 0..=depth {
            let hw = (x.h, x.w);
            let (a, conv1) = self.unit(2 * level, x)?;
            let (mut b, conv2) = self.unit(2 * level + 1, a)?;
            let drop = self.dropout(&mut b, cfg.encoder_dropout(level));
            let pool = if level < depth {
                let (p, arg) = maxpool_forward(&b);
                skips.push(b);
                x = p;
                Some(arg)
            } else {
                x = b;
                None
            };
            if let (Some(conv1), Some(conv2)) = (conv1, conv2) {
                enc.push(EncCache {
                    conv1,
                    conv2,
                    drop,
                    pool,
                    hw,
                });
            }
        }

        let mut dec = Vec::new();
        let mut y = x;
        for (j, level) in (0..depth).rev().enumerate() {
            let base = 2 * (depth + 1) + 3 * j;
            let (u, up) = self.unit(base, upsample_forward(&y))?;
            let cat = concat(&u, &skips[level]);
            let (a, conv1) = self.unit(base + 1, cat)?;
            let (mut out, conv2) = self.unit(base + 2, a)?;
            let drop = self.dropout(&mut out, cfg.decoder_dropout(level));
            if let (Some(up), Some(conv1), Some(conv2)) = (up, conv1, conv2) {
                dec.push(DecCache {
                    up,
                    conv1,
                    conv2,
                    drop,
                });
            }
            y = out;
        }

        let head = self.params.specs().len() - 1;
        let slots = self.params.slots(head);
        let logits = conv_forward(
            &y,
            &self.params.tensors[slots.weight].data,
            &self.params.tensors[slots.bias].data,
            1,
            1,
        );
        if !logits.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("head logits".into()));
        }
        let cache = self.keep.then_some(Cache {
            enc,
            dec,
            head_input: y,
        });
        Ok((logits, cache))
    }
}

fn check_input<T: Scalar>(params: &ParameterSet<T>, input: &Tensor<T>, seeds: usize) -> Result<()> {
    let cfg = params.config();
    let q = 1usize << cfg.depth;
    if input.c != cfg.in_channels {
        return Err(Error::DimensionMismatch(format!(
            "input has {} channels, network expects {}",
            input.c, cfg.in_channels
        )));
    }
    if input.h == 0 || input.w == 0 || !input.h.is_multiple_of(q) || !input.w.is_multiple_of(q) {
        return Err(Error::DimensionMismatch(format!(
            "input {}x{} is not a positive multiple of {q}",
            input.h, input.w
        )));
    }
    if seeds != input.n {
        return Err(Error::DimensionMismatch(format!(
            "{seeds} dropout seeds for {} samples",
            input.n
        )));
    }
    Ok(())
}

fn new_pass<'a, T: Scalar>(
    params: &'a ParameterSet<T>,
    mode: ForwardMode,
    seeds: &[u64],
    keep: bool,
) -> Pass<'a, T> {
    Pass {
        params,
        mode,
        rngs: seeds.iter().map(|&s| seeded_rng(s)).collect(),
        keep,
        stats: vec![None; params.specs().len()],
    }
}

/// Logits (`N x 1 x H x W`) with one dropout stream per sample. Sample `s`
/// gets the same output whatever else is in the batch, except in
/// [`ForwardMode::Train`] where batch statistics couple the samples.
pub fn forward_with_seeds<T: Scalar>(
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    mode: ForwardMode,
    seeds: &[u64],
) -> Result<Tensor<T>> {
    check_input(params, input, seeds.len())?;
    let mut pass = new_pass(params, mode, seeds, false);
    Ok(pass.run(input)?.0)
}

pub fn forward<T: Scalar>(
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    mode: ForwardMode,
    rng_seed: u64,
) -> Result<Tensor<T>> {
    forward_with_seeds(params, input, mode, &sample_seeds(rng_seed, input.n))
}

pub struct BackwardOutput<T> {
    pub loss: LossBreakdown,
    pub grads: Gradients<T>,
    /// Batch statistics to blend into the running averages.
    pub batch_stats: BatchStats,
    pub logits: Tensor<T>,
}

/// Training-mode forward pass, composite loss over valid pixels pooled
/// across the batch, and exact gradients for every parameter tensor.
pub fn backward<T: Scalar>(
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    labels: &[u8],
    valid: &[bool],
    objective: &ObjectiveConfig,
    rng_seed: u64,
) -> Result<BackwardOutput<T>> {
    let seeds = sample_seeds(rng_seed, input.n);
    check_input(params, input, seeds.len())?;
    let plane = input.n * input.plane();
    if labels.len() != plane || valid.len() != plane {
        return Err(Error::DimensionMismatch(format!(
            "{} labels / {} mask cells for {plane} pixels",
            labels.len(),
            valid.len()
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptyValidMask);
    }
    let mut pass = new_pass(params, ForwardMode::Train, &seeds, true);
    let (logits, cache) = pass.run(input)?;
    let cache = cache.expect("cache kept");
    let (loss, dz) = logit_loss_and_grad(&logits.data, labels, valid, objective)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let dlogits = Tensor::from_vec(
        logits.n,
        1,
        logits.h,
        logits.w,
        dz.into_iter().map(T::from_f64_lossy).collect(),
    );
    let grads = backprop(params, &cache, dlogits);
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok(BackwardOutput {
        loss,
        grads,
        batch_stats: pass.stats,
        logits,
    })
}

fn unit_backward<T: Scalar>(
    params: &ParameterSet<T>,
    conv: usize,
    cache: &UnitCache<T>,
    mut d: Tensor<T>,
    need_dx: bool,
    grads: &mut Gradients<T>,
) -> Option<Tensor<T>> {
    let spec = &params.specs()[conv];
    let slots = params.slots(conv);
    if spec.relu {
        relu_backward(&mut d, &cache.output);
    }
    if let (Some(bn), Some((g, b, _, _))) = (&cache.bn, slots.norm) {
        let (dg, db) = bn_backward(&mut d, bn, &params.tensors[g].data);
        grads.tensors[g] = dg;
        grads.tensors[b] = db;
    }
    let cg = conv_backward(
        &cache.input,
        &d,
        &params.tensors[slots.weight].data,
        spec.out_channels,
        spec.kernel,
        need_dx,
    );
    grads.tensors[slots.weight] = cg.dw;
    grads.tensors[slots.bias] = cg.db;
    cg.dx
}

fn backprop<T: Scalar>(params: &ParameterSet<T>, cache: &Cache<T>, dlogits: Tensor<T>) -> Gradients<T> {
    let depth = params.config().depth;
    let mut grads = Gradients::zeros_like(params);

    let head = params.specs().len() - 1;
    let slots = params.slots(head);
    let cg = conv_backward(
        &cache.head_input,
        &dlogits,
        &params.tensors[slots.weight].data,
        1,
        1,
        true,
    );
    grads.tensors[slots.weight] = cg.dw;
    grads.tensors[slots.bias] = cg.db;
    let mut d = cg.dx.expect("head input gradient");

    let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
    for (j, dc) in cache.dec.iter().enumerate().rev() {
        let level = depth - 1 - j;
        let base = 2 * (depth + 1) + 3 * j;
        if let Some(s) = &dc.drop {
            scale_channels(&mut d, s);
        }
        d = unit_backward(params, base + 2, &dc.conv2, d, true, &mut grads).expect("dx");
        d = unit_backward(params, base + 1, &dc.conv1, d, true, &mut grads).expect("dx");
        let (du, dskip) = split_channels(&d, params.config().width(level));
        skip_grads[level] = Some(dskip);
        d = unit_backward(params, base, &dc.up, du, true, &mut grads).expect("dx");
        d = upsample_backward(&d);
    }

    // `d` is now the gradient of the bottleneck output.
    for level in (0..=depth).rev() {
        let ec = &cache.enc[level];
        if level < depth {
            let (h, w) = ec.hw;
            let pool = ec.pool.as_ref().expect("pooled level");
            let mut from_below = maxpool_backward(&d, pool, h, w);
            let skip = skip_grads[level].take().expect("skip gradient");
            from_below
                .data
                .iter_mut()
                .zip(&skip.data)
                .for_each(|(a, &b)| *a += b);
            d = from_below;
        }
        if let Some(s) = &ec.drop {
            scale_channels(&mut d, s);
        }
        d = unit_backward(params, 2 * level + 1, &ec.conv2, d, true, &mut grads).expect("dx");
        match unit_backward(params, 2 * level, &ec.conv1, d, level > 0, &mut grads) {
            Some(dx) => d = dx,
            None => break,
        }
    }
    grads
}
