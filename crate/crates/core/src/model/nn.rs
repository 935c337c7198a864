//! Per-sample forward/backward kernels on flat row-major slices.

use super::Pool;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub pad: usize,
    pub out_ch: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    pub fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }
}

pub(crate) fn pad_input(g: &ConvGeom, input: &[f32]) -> Vec<f32> {
    if g.pad == 0 {
        return input.to_vec();
    }
    let (hp, wp) = (g.hp(), g.wp());
    let mut out = vec![0.0; g.in_ch * hp * wp];
    for c in 0..g.in_ch {
        for y in 0..g.h {
            let src = &input[(c * g.h + y) * g.w..][..g.w];
            out[(c * hp + y + g.pad) * wp + g.pad..][..g.w].copy_from_slice(src);
        }
    }
    out
}

/// Valid cross-correlation of an already padded input.
pub(crate) fn conv_forward(g: &ConvGeom, weight: &[f32], bias: &[f32], padded: &[f32]) -> Vec<f32> {
    let (hp, wp, k) = (g.hp(), g.wp(), g.kernel);
    let plane = g.ho * g.wo;
    let mut out = vec![0.0f32; g.out_ch * plane];
    for f in 0..g.out_ch {
        let out_f = &mut out[f * plane..(f + 1) * plane];
        out_f.fill(bias[f]);
        for c in 0..g.in_ch {
            let w_fc = &weight[(f * g.in_ch + c) * k * k..][..k * k];
            let in_c = &padded[c * hp * wp..(c + 1) * hp * wp];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w_fc[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in 0..g.ho {
                        let row_in = &in_c[(y + ky) * wp + kx..][..g.wo];
                        let row_out = &mut out_f[y * g.wo..(y + 1) * g.wo];
                        for (o, &i) in row_out.iter_mut().zip(row_in) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the gradient w.r.t. the
/// unpadded input when `need_input_grad` is set.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    weight: &[f32],
    padded: &[f32],
    dpre: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    need_input_grad: bool,
) -> Option<Vec<f32>> {
    let (hp, wp, k) = (g.hp(), g.wp(), g.kernel);
    let plane = g.ho * g.wo;
    let mut dpad = need_input_grad.then(|| vec![0.0f32; g.in_ch * hp * wp]);
    for f in 0..g.out_ch {
        let d_f = &dpre[f * plane..(f + 1) * plane];
        if d_f.iter().all(|&v| v == 0.0) {
            continue;
        }
        db[f] += d_f.iter().sum::<f32>();
        for c in 0..g.in_ch {
            let in_c = &padded[c * hp * wp..(c + 1) * hp * wp];
            let base = (f * g.in_ch + c) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0f32;
                    for y in 0..g.ho {
                        let row_in = &in_c[(y + ky) * wp + kx..][..g.wo];
                        let row_d = &d_f[y * g.wo..(y + 1) * g.wo];
                        acc += row_in.iter().zip(row_d).map(|(a, b)| a * b).sum::<f32>();
                    }
                    dw[base + ky * k + kx] += acc;
                    if let Some(dpad) = dpad.as_mut() {
                        let wv = weight[base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dpad_c = &mut dpad[c * hp * wp..(c + 1) * hp * wp];
                        for y in 0..g.ho {
                            let row = &mut dpad_c[(y + ky) * wp + kx..][..g.wo];
                            let row_d = &d_f[y * g.wo..(y + 1) * g.wo];
                            for (o, &d) in row.iter_mut().zip(row_d) {
                                *o += wv * d;
                            }
                        }
                    }
                }
            }
        }
    }
    dpad.map(|dpad| {
        if g.pad == 0 {
            return dpad;
        }
        let mut out = vec![0.0; g.in_ch * g.h * g.w];
        for c in 0..g.in_ch {
            for y in 0..g.h {
                out[(c * g.h + y) * g.w..][..g.w]
                    .copy_from_slice(&dpad[(c * hp + y + g.pad) * wp + g.pad..][..g.w]);
            }
        }
        out
    })
}

pub(crate) fn relu(pre: &[f32]) -> Vec<f32> {
    pre.iter().map(|&v| v.max(0.0)).collect()
}

pub(crate) fn relu_backward(pre: &[f32], dpost: &[f32]) -> Vec<f32> {
    pre.iter().zip(dpost).map(|(&p, &d)| if p > 0.0 { d } else { 0.0 }).collect()
}

/// Non-overlapping pooling (window = stride), flooring partial windows.
/// For max pooling also returns the argmax position of every output cell.
pub(crate) fn pool_forward(pool: Pool, ch: usize, h: usize, w: usize, input: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let s = pool.window();
    let (ho, wo) = (h / s, w / s);
    let mut out = vec![0.0f32; ch * ho * wo];
    let mut argmax = Vec::new();
    if matches!(pool, Pool::Max(_)) {
        argmax = vec![0u32; ch * ho * wo];
    }
    for c in 0..ch {
        for y in 0..ho {
            for x in 0..wo {
                let o = (c * ho + y) * wo + x;
                match pool {
                    Pool::Max(_) => {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..s {
                            for dx in 0..s {
                                let i = (c * h + y * s + dy) * w + x * s + dx;
                                if input[i] > best {
                                    best = input[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_i as u32;
                    }
                    Pool::Avg(_) => {
                        let mut acc = 0.0f32;
                        for dy in 0..s {
                            for dx in 0..s {
                                acc += input[(c * h + y * s + dy) * w + x * s + dx];
                            }
                        }
                        out[o] = acc / (s * s) as f32;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn pool_backward(
    pool: Pool,
    ch: usize,
    h: usize,
    w: usize,
    argmax: &[u32],
    dout: &[f32],
) -> Vec<f32> {
    let s = pool.window();
    let (ho, wo) = (h / s, w / s);
    let mut din = vec![0.0f32; ch * h * w];
    match pool {
        Pool::Max(_) => {
            for (o, &d) in dout.iter().enumerate() {
                din[argmax[o] as usize] += d;
            }
        }
        Pool::Avg(_) => {
            let scale = 1.0 / (s * s) as f32;
            for c in 0..ch {
                for y in 0..ho {
                    for x in 0..wo {
                        let d = dout[(c * ho + y) * wo + x] * scale;
                        for dy in 0..s {
                            for dx in 0..s {
                                din[(c * h + y * s + dy) * w + x * s + dx] += d;
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// `out[o] = b[o] + Σ_i W[o, i] · x[i]` with `W` stored `[out, in]`.
pub(crate) fn dense_forward(weight: &[f32], bias: &[f32], input: &[f32]) -> Vec<f32> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(w, x)| w * x).sum::<f32>())
        .collect()
}

pub(crate) fn dense_backward(
    weight: &[f32],
    input: &[f32],
    dout: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    need_input_grad: bool,
) -> Option<Vec<f32>> {
    let n_in = input.len();
    let mut dx = need_input_grad.then(|| vec![0.0f32; n_in]);
    for (o, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        db[o] += d;
        let dw_row = &mut dw[o * n_in..(o + 1) * n_in];
        for (g, &x) in dw_row.iter_mut().zip(input) {
            *g += d * x;
        }
        if let Some(dx) = dx.as_mut() {
            for (g, &w) in dx.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *g += d * w;
            }
        }
    }
    dx
}

/// Softmax cross-entropy of one sample; returns `(loss, ∂loss/∂logits)`.
pub(crate) fn softmax_cross_entropy(logits: &[f32], label: usize) -> (f64, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| f64::from(z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - f64::from(logits[label] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(c, &e)| (e / sum - if c == label { 1.0 } else { 0.0 }) as f32)
        .collect();
    (loss, grad)
}
