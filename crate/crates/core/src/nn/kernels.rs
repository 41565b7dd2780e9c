//! Raw-slice forward/backward kernels. Feature maps are `[channel][row][col]`,
//! conv weights `[out][in][ky][kx]`, dense weights `[out][in]`.

/// Valid (unpadded) stride-1 convolution, accumulated into `out`.
pub fn conv_forward(
    input: &[f64],
    [c_in, h, w]: [usize; 3],
    weights: &[f64],
    k: usize,
    c_out: usize,
    out: &mut [f64],
) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    debug_assert_eq!(out.len(), c_out * oh * ow);
    out.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..c_out {
        let out_map = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..c_in {
            let in_map = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((o * c_in + c) * k + ky) * k + kx];
                    for y in 0..oh {
                        let src = &in_map[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let dst = &mut out_map[y * ow..(y + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a valid convolution. `grad_w` is accumulated; `grad_in`,
/// when requested, is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    [c_in, h, w]: [usize; 3],
    weights: &[f64],
    k: usize,
    c_out: usize,
    delta: &[f64],
    grad_w: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    if let Some(g) = grad_in.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    for o in 0..c_out {
        let d_map = &delta[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..c_in {
            let in_map = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((o * c_in + c) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let src = &in_map[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                        let d = &d_map[y * ow..(y + 1) * ow];
                        acc += src.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_w[wi] += acc;
                    if let Some(g) = grad_in.as_deref_mut() {
                        let wv = weights[wi];
                        let g_map = &mut g[c * h * w..(c + 1) * h * w];
                        for y in 0..oh {
                            let dst = &mut g_map[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                            let d = &d_map[y * ow..(y + 1) * ow];
                            for (g, dv) in dst.iter_mut().zip(d) {
                                *g += wv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping `s x s` mean pooling.
pub fn pool_forward(input: &[f64], [c, h, w]: [usize; 3], s: usize, out: &mut [f64]) {
    let (oh, ow) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f64;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for dy in 0..s {
                    let row = (ch * h + y * s + dy) * w + x * s;
                    acc += input[row..row + s].iter().sum::<f64>();
                }
                out[(ch * oh + y) * ow + x] = acc * inv;
            }
        }
    }
}

/// Mean pooling spreads each output gradient uniformly over its window.
pub fn pool_backward(delta: &[f64], [c, h, w]: [usize; 3], s: usize, grad_in: &mut [f64]) {
    let (oh, ow) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                grad_in[(ch * h + y) * w + x] = delta[(ch * oh + y / s) * ow + x / s] * inv;
            }
        }
    }
}

pub fn dense_forward(input: &[f64], weights: &[f64], fan_out: usize, out: &mut [f64]) {
    let fan_in = input.len();
    for (o, v) in out.iter_mut().enumerate().take(fan_out) {
        let row = &weights[o * fan_in..(o + 1) * fan_in];
        *v = row.iter().zip(input).map(|(a, b)| a * b).sum();
    }
}

pub fn dense_backward(
    input: &[f64],
    weights: &[f64],
    delta: &[f64],
    grad_w: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let fan_in = input.len();
    for (o, &d) in delta.iter().enumerate() {
        let g = &mut grad_w[o * fan_in..(o + 1) * fan_in];
        for (gw, x) in g.iter_mut().zip(input) {
            *gw += d * x;
        }
    }
    if let Some(gi) = grad_in {
        gi.iter_mut().for_each(|v| *v = 0.0);
        for (o, &d) in delta.iter().enumerate() {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            for (g, wv) in gi.iter_mut().zip(row) {
                *g += d * wv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_is_equal_weight_strided_convolution() {
        // One (c, c) conv per channel with kernel entries 1/s^2 evaluated at
        // stride s must reproduce mean pooling.
        let (c, h, w, s) = (2, 6, 6, 2);
        let input: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        let mut pooled = vec![0.0; c * (h / s) * (w / s)];
        pool_forward(&input, [c, h, w], s, &mut pooled);

        let mut weights = vec![0.0; c * c * s * s];
        for ch in 0..c {
            for i in 0..s * s {
                weights[(ch * c + ch) * s * s + i] = 1.0 / (s * s) as f64;
            }
        }
        let (fh, fw) = (h - s + 1, w - s + 1);
        let mut full = vec![0.0; c * fh * fw];
        conv_forward(&input, [c, h, w], &weights, s, c, &mut full);
        for ch in 0..c {
            for y in 0..h / s {
                for x in 0..w / s {
                    let a = pooled[(ch * (h / s) + y) * (w / s) + x];
                    let b = full[(ch * fh + y * s) * fw + x * s];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ones_pool_to_ones() {
        let input = vec![1.0; 16];
        let mut out = vec![0.0; 4];
        pool_forward(&input, [1, 4, 4], 2, &mut out);
        assert_eq!(out, vec![1.0; 4]);
    }
}
