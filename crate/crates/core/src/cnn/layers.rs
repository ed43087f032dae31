use super::{CnnModel, Gradients, Scalar, Shape, CLASSES};

/// Per-sample activations kept for the backward pass.
pub(super) struct Cache<F> {
    /// Post-ReLU conv output of each block, before pooling.
    relu: Vec<Vec<F>>,
    /// Pooled output and argmax positions for pooling blocks.
    pooled: Vec<Option<(Vec<F>, Vec<u32>)>>,
    hidden: Vec<F>,
    pub logits: [F; CLASSES],
}

impl<F: Scalar> Cache<F> {
    pub fn block_output(&self, b: usize) -> &[F] {
        match &self.pooled[b] {
            Some((p, _)) => p,
            None => &self.relu[b],
        }
    }

    pub fn features(&self) -> &[F] {
        self.block_output(self.relu.len() - 1)
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - pad` is in bounds.
#[inline]
fn valid_span(k_off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let shift = k_off as isize - pad as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    let last = in_len as isize - 1 - shift;
    let hi = if last < 0 { 0 } else { (last as usize / stride + 1).min(out_len) };
    (lo, hi.max(lo))
}

fn conv_out_shape(ish: Shape, out_channels: usize, stride: usize) -> Shape {
    Shape {
        channels: out_channels,
        height: (ish.height - 1) / stride + 1,
        width: (ish.width - 1) / stride + 1,
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<F: Scalar>(input: &[F], ish: Shape, weight: &[F], bias: &[F], k: usize, stride: usize, osh: Shape, out: &mut [F]) {
    let pad = k / 2;
    let (ih, iw, oh, ow) = (ish.height, ish.width, osh.height, osh.width);
    for o in 0..osh.channels {
        let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
        out_o.fill(bias[o]);
        for c in 0..ish.channels {
            let in_c = &input[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_span(ky, pad, stride, ih, oh);
                for kx in 0..k {
                    let wv = weight[((o * ish.channels + c) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = valid_span(kx, pad, stride, iw, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let row_in = &in_c[iy * iw..(iy + 1) * iw];
                        let row_out = &mut out_o[oy * ow + ox_lo..oy * ow + ox_hi];
                        if stride == 1 {
                            let start = ox_lo + kx - pad;
                            for (y, &x) in row_out.iter_mut().zip(&row_in[start..start + (ox_hi - ox_lo)]) {
                                *y += wv * x;
                            }
                        } else {
                            for (j, y) in row_out.iter_mut().enumerate() {
                                *y += wv * row_in[(ox_lo + j) * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients; writes the input gradient when asked.
#[allow(clippy::too_many_arguments)]
fn conv_backward<F: Scalar>(
    input: &[F],
    ish: Shape,
    weight: &[F],
    k: usize,
    stride: usize,
    osh: Shape,
    dout: &[F],
    dweight: &mut [F],
    dbias: &mut [F],
    mut dinput: Option<&mut [F]>,
) {
    let pad = k / 2;
    let (ih, iw, oh, ow) = (ish.height, ish.width, osh.height, osh.width);
    if let Some(d) = dinput.as_deref_mut() {
        d.fill(F::zero());
    }
    for o in 0..osh.channels {
        let dout_o = &dout[o * oh * ow..(o + 1) * oh * ow];
        dbias[o] += dout_o.iter().copied().sum::<F>();
        for c in 0..ish.channels {
            let in_c = &input[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..k {
                let (oy_lo, oy_hi) = valid_span(ky, pad, stride, ih, oh);
                for kx in 0..k {
                    let widx = ((o * ish.channels + c) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = valid_span(kx, pad, stride, iw, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = F::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let row_out = &dout_o[oy * ow + ox_lo..oy * ow + ox_hi];
                        if stride == 1 {
                            let start = iy * iw + ox_lo + kx - pad;
                            let row_in = &in_c[start..start + row_out.len()];
                            for (&g, &x) in row_out.iter().zip(row_in) {
                                acc += g * x;
                            }
                            if let Some(d) = dinput.as_deref_mut() {
                                let drow = &mut d[c * ih * iw + start..c * ih * iw + start + row_out.len()];
                                for (dx, &g) in drow.iter_mut().zip(row_out) {
                                    *dx += wv * g;
                                }
                            }
                        } else {
                            for (j, &g) in row_out.iter().enumerate() {
                                let ix = (ox_lo + j) * stride + kx - pad;
                                acc += g * in_c[iy * iw + ix];
                                if let Some(d) = dinput.as_deref_mut() {
                                    d[c * ih * iw + iy * iw + ix] += wv * g;
                                }
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

/// 2x2 stride-2 max-pool, ties resolved to the first position in scan order.
fn max_pool<F: Scalar>(input: &[F], ish: Shape) -> (Vec<F>, Vec<u32>) {
    let (oh, ow) = (ish.height / 2, ish.width / 2);
    let mut out = Vec::with_capacity(ish.channels * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for c in 0..ish.channels {
        let base = c * ish.height * ish.width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * ish.width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * ish.width + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn dense_forward<F: Scalar>(input: &[F], weight: &[F], bias: &[F], out: &mut [F]) {
    let n = input.len();
    for (r, y) in out.iter_mut().enumerate() {
        let row = &weight[r * n..(r + 1) * n];
        *y = bias[r] + row.iter().zip(input).map(|(&w, &x)| w * x).sum::<F>();
    }
}

/// Accumulates `dW += dout x input`, `db += dout`; returns `W^T dout`.
fn dense_backward<F: Scalar>(input: &[F], weight: &[F], dout: &[F], dweight: &mut [F], dbias: &mut [F], want_input: bool) -> Vec<F> {
    let n = input.len();
    let mut din = if want_input { vec![F::zero(); n] } else { Vec::new() };
    for (r, &g) in dout.iter().enumerate() {
        dbias[r] += g;
        let drow = &mut dweight[r * n..(r + 1) * n];
        for (dw, &x) in drow.iter_mut().zip(input) {
            *dw += g * x;
        }
        if want_input {
            let row = &weight[r * n..(r + 1) * n];
            for (dx, &w) in din.iter_mut().zip(row) {
                *dx += w * g;
            }
        }
    }
    din
}

pub(super) fn forward<F: Scalar>(model: &CnnModel<F>, image: &[F]) -> Cache<F> {
    let cfg = &model.config;
    let shapes = cfg.activation_shapes();
    let mut relu: Vec<Vec<F>> = Vec::with_capacity(cfg.blocks.len());
    let mut pooled: Vec<Option<(Vec<F>, Vec<u32>)>> = Vec::with_capacity(cfg.blocks.len());

    for (b, block) in cfg.blocks.iter().enumerate() {
        let ish = shapes[b];
        let osh = conv_out_shape(ish, block.out_channels, block.stride);
        let input: &[F] = if b == 0 {
            image
        } else {
            match &pooled[b - 1] {
                Some((p, _)) => p,
                None => &relu[b - 1],
            }
        };
        let mut out = vec![F::zero(); osh.len()];
        conv_forward(input, ish, &model.params[2 * b], &model.params[2 * b + 1], block.kernel, block.stride, osh, &mut out);
        for v in out.iter_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        pooled.push(block.pool.then(|| max_pool(&out, osh)));
        relu.push(out);
    }

    let mut cache = Cache {
        relu,
        pooled,
        hidden: Vec::new(),
        logits: [F::zero(); CLASSES],
    };
    let mut p = 2 * cfg.blocks.len();
    let features = cache.features().to_vec();
    let head_input = if cfg.dense_width > 0 {
        let mut h = vec![F::zero(); cfg.dense_width];
        dense_forward(&features, &model.params[p], &model.params[p + 1], &mut h);
        for v in h.iter_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        p += 2;
        cache.hidden = h;
        cache.hidden.clone()
    } else {
        features
    };
    dense_forward(&head_input, &model.params[p], &model.params[p + 1], &mut cache.logits);
    cache
}

/// Weight and bias gradient buffers stored at `i` and `i + 1`.
fn pair_mut<F>(grads: &mut Gradients<F>, i: usize) -> (&mut [F], &mut [F]) {
    let (lo, hi) = grads.split_at_mut(i + 1);
    (&mut lo[i], &mut hi[0])
}

pub(super) fn backward<F: Scalar>(model: &CnnModel<F>, image: &[F], cache: &Cache<F>, dlogits: [F; CLASSES], grads: &mut Gradients<F>) {
    let cfg = &model.config;
    let shapes = cfg.activation_shapes();
    let nb = cfg.blocks.len();
    let features = cache.features();

    let p = 2 * nb;
    let mut dfeat = if cfg.dense_width > 0 {
        let head = p + 2;
        let (dw, db) = pair_mut(grads, head);
        let mut dh = dense_backward(&cache.hidden, &model.params[head], &dlogits, dw, db, true);
        for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
            if h <= F::zero() {
                *d = F::zero();
            }
        }
        let (dw, db) = pair_mut(grads, p);
        dense_backward(features, &model.params[p], &dh, dw, db, true)
    } else {
        let (dw, db) = pair_mut(grads, p);
        dense_backward(features, &model.params[p], &dlogits, dw, db, true)
    };

    for b in (0..nb).rev() {
        let block = &cfg.blocks[b];
        let ish = shapes[b];
        let osh = conv_out_shape(ish, block.out_channels, block.stride);
        // gradient w.r.t. the post-ReLU conv output
        let mut dconv = match &cache.pooled[b] {
            Some((_, idx)) => {
                let mut d = vec![F::zero(); osh.len()];
                for (&i, &g) in idx.iter().zip(&dfeat) {
                    d[i as usize] += g;
                }
                d
            }
            None => dfeat,
        };
        for (d, &r) in dconv.iter_mut().zip(&cache.relu[b]) {
            if r <= F::zero() {
                *d = F::zero();
            }
        }
        let input: &[F] = if b == 0 { image } else { cache.block_output(b - 1) };
        let mut dinput = if b > 0 { vec![F::zero(); ish.len()] } else { Vec::new() };
        let (dw, db) = pair_mut(grads, 2 * b);
        conv_backward(
            input,
            ish,
            &model.params[2 * b],
            block.kernel,
            block.stride,
            osh,
            &dconv,
            dw,
            db,
            (b > 0).then_some(dinput.as_mut_slice()),
        );
        dfeat = dinput;
    }
}
