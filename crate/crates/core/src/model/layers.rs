//! Forward and backward kernels for the layer types the network uses.
//! Backward functions accumulate (`+=`) into parameter gradients.

use crate::tensor::{FeatureMap, TokenSequence};

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output index range `lo..hi` whose input tap `o * stride + k - pad`
    /// falls inside `0..len`.
    #[inline]
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride;
        // o * s + k >= pad
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // o * s + k - pad <= in_len - 1
        let hi = if in_len + self.pad > k {
            ((in_len - 1 + self.pad - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(input: &FeatureMap, spec: &ConvSpec, weight: &[f64], bias: Option<&[f64]>) -> FeatureMap {
    debug_assert_eq!(input.channels, spec.in_channels);
    debug_assert_eq!(weight.len(), spec.weight_len());
    let (oh, ow) = spec.output_size(input.height, input.width);
    let (ih, iw) = (input.height, input.width);
    let k = spec.kernel;
    let s = spec.stride;
    let mut out = FeatureMap::zeros(spec.out_channels, oh, ow);
    for co in 0..spec.out_channels {
        let plane = out.plane_mut(co);
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..spec.in_channels {
            let src = input.plane(ci);
            for ky in 0..k {
                let (oy_lo, oy_hi) = spec.valid_range(ky, oh, ih);
                for kx in 0..k {
                    let wv = weight[((co * spec.in_channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = spec.valid_range(kx, ow, iw);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - spec.pad;
                        let row = &src[iy * iw..(iy + 1) * iw];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            dst[ox] += wv * row[ox * s + kx - spec.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient; accumulates weight and bias gradients.
pub fn conv2d_backward(
    input: &FeatureMap,
    spec: &ConvSpec,
    weight: &[f64],
    grad_out: &FeatureMap,
    grad_weight: &mut [f64],
    grad_bias: Option<&mut [f64]>,
) -> FeatureMap {
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (ih, iw) = (input.height, input.width);
    let k = spec.kernel;
    let s = spec.stride;
    let mut grad_in = FeatureMap::zeros(spec.in_channels, ih, iw);
    if let Some(gb) = grad_bias {
        for (co, g) in gb.iter_mut().enumerate() {
            *g += grad_out.plane(co).iter().sum::<f64>();
        }
    }
    for co in 0..spec.out_channels {
        let gplane = grad_out.plane(co);
        for ci in 0..spec.in_channels {
            let src = input.plane(ci);
            for ky in 0..k {
                let (oy_lo, oy_hi) = spec.valid_range(ky, oh, ih);
                for kx in 0..k {
                    let widx = ((co * spec.in_channels + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = spec.valid_range(kx, ow, iw);
                    let mut gw = 0.0;
                    let gin = grad_in.plane_mut(ci);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - spec.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - spec.pad;
                            let g = grow[ox];
                            gw += g * src[iy * iw + ix];
                            gin[iy * iw + ix] += g * wv;
                        }
                    }
                    grad_weight[widx] += gw;
                }
            }
        }
    }
    grad_in
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        ..*x
    }
}

/// Gradient through `max(0, x)` given the pre-activation.
pub fn relu_backward(pre: &FeatureMap, grad: &FeatureMap) -> FeatureMap {
    FeatureMap {
        channels: pre.channels,
        height: pre.height,
        width: pre.width,
        data: pre
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Non-overlapping `factor × factor` average pooling.
pub fn avg_pool(x: &FeatureMap, factor: usize) -> FeatureMap {
    if factor == 1 {
        return x.clone();
    }
    let (oh, ow) = (x.height / factor, x.width / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += x.get(c, oy * factor + dy, ox * factor + dx);
                    }
                }
                out.set(c, oy, ox, acc * norm);
            }
        }
    }
    out
}

pub fn avg_pool_backward(grad: &FeatureMap, factor: usize, in_h: usize, in_w: usize) -> FeatureMap {
    if factor == 1 {
        return grad.clone();
    }
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = FeatureMap::zeros(grad.channels, in_h, in_w);
    for c in 0..grad.channels {
        for y in 0..grad.height * factor {
            for x in 0..grad.width * factor {
                out.set(c, y, x, grad.get(c, y / factor, x / factor) * norm);
            }
        }
    }
    out
}

/// `C × H × W` map to `HW × C` tokens in row-major spatial order.
pub fn flatten_tokens(x: &FeatureMap) -> TokenSequence {
    let n = x.height * x.width;
    let mut t = TokenSequence::zeros(n, x.channels);
    for c in 0..x.channels {
        for (p, &v) in x.plane(c).iter().enumerate() {
            t.data[p * x.channels + c] = v;
        }
    }
    t
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens(t: &TokenSequence, height: usize, width: usize) -> FeatureMap {
    debug_assert_eq!(t.len, height * width);
    let mut x = FeatureMap::zeros(t.dim, height, width);
    for p in 0..t.len {
        for (c, &v) in t.row(p).iter().enumerate() {
            x.data[c * t.len + p] = v;
        }
    }
    x
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &mut [f64], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Output tokens and the attention weights (`Nq × Nk`, row-major).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: TokenSequence,
    pub weights: Vec<f64>,
}

/// `softmax(Q KVᵀ / √dim) · KV`; the same sequence serves as keys and values.
pub fn cross_attention_forward(q: &TokenSequence, kv: &TokenSequence) -> AttentionOutput {
    debug_assert_eq!(q.dim, kv.dim);
    let dim = q.dim;
    let scale = 1.0 / (dim as f64).sqrt();
    let mut weights = vec![0.0; q.len * kv.len];
    for i in 0..q.len {
        let qi = q.row(i);
        for j in 0..kv.len {
            let kj = kv.row(j);
            weights[i * kv.len + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
    }
    softmax_rows(&mut weights, kv.len);
    let mut output = TokenSequence::zeros(q.len, dim);
    for i in 0..q.len {
        let row = output.row_mut(i);
        for j in 0..kv.len {
            let p = weights[i * kv.len + j];
            for (o, &v) in row.iter_mut().zip(kv.row(j)) {
                *o += p * v;
            }
        }
    }
    AttentionOutput { output, weights }
}

/// Returns `(dQ, dKV)`.
pub fn cross_attention_backward(
    q: &TokenSequence,
    kv: &TokenSequence,
    weights: &[f64],
    grad_out: &TokenSequence,
) -> (TokenSequence, TokenSequence) {
    let (nq, nk, dim) = (q.len, kv.len, q.dim);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut dq = TokenSequence::zeros(nq, dim);
    let mut dkv = TokenSequence::zeros(nk, dim);
    let mut dscore = vec![0.0; nk];
    for i in 0..nq {
        let go = grad_out.row(i);
        let p = &weights[i * nk..(i + 1) * nk];
        // dP_ij = <dO_i, KV_j>; value path dKV_j += P_ij dO_i
        let mut dot = 0.0;
        for j in 0..nk {
            let dp = go.iter().zip(kv.row(j)).map(|(a, b)| a * b).sum::<f64>();
            dscore[j] = dp;
            dot += dp * p[j];
            for (d, &g) in dkv.row_mut(j).iter_mut().zip(go) {
                *d += p[j] * g;
            }
        }
        // softmax Jacobian, then the 1/√dim scaled bilinear score
        for j in 0..nk {
            let ds = p[j] * (dscore[j] - dot) * scale;
            if ds == 0.0 {
                continue;
            }
            let kj = kv.row(j).to_vec();
            for (d, v) in dq.row_mut(i).iter_mut().zip(&kj) {
                *d += ds * v;
            }
            for (d, &v) in dkv.row_mut(j).iter_mut().zip(q.row(i)) {
                *d += ds * v;
            }
        }
    }
    (dq, dkv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, seed: f64) -> FeatureMap {
        let data = (0..c * h * w).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    /// Direct definition of a padded, strided convolution.
    fn conv_oracle(x: &FeatureMap, spec: &ConvSpec, w: &[f64], b: &[f64]) -> FeatureMap {
        let (oh, ow) = spec.output_size(x.height, x.width);
        let k = spec.kernel;
        let mut out = FeatureMap::zeros(spec.out_channels, oh, ow);
        for co in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..spec.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky) as i64 - spec.pad as i64;
                                let ix = (ox * spec.stride + kx) as i64 - spec.pad as i64;
                                if iy < 0 || ix < 0 || iy >= x.height as i64 || ix >= x.width as i64 {
                                    continue;
                                }
                                acc += w[((co * spec.in_channels + ci) * k + ky) * k + kx]
                                    * x.get(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(co, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        for (stride, pad, k, h, w) in [(2, 1, 3, 8, 6), (1, 1, 3, 5, 7), (1, 0, 1, 4, 4), (2, 1, 3, 7, 5)] {
            let spec = ConvSpec { in_channels: 2, out_channels: 3, kernel: k, stride, pad };
            let x = map(2, h, w, 0.7);
            let wt: Vec<f64> = (0..spec.weight_len()).map(|i| (i as f64 * 0.31).cos()).collect();
            let b = [0.1, -0.2, 0.3];
            let got = conv2d_forward(&x, &spec, &wt, Some(&b));
            let want = conv_oracle(&x, &spec, &wt, &b);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let spec = ConvSpec { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, pad: 1 };
        let x = map(2, 6, 6, 0.3);
        let wt: Vec<f64> = (0..spec.weight_len()).map(|i| (i as f64 * 0.17).sin()).collect();
        let y = conv2d_forward(&x, &spec, &wt, None);
        let g = map(3, y.height, y.width, 1.1);
        let mut gw = vec![0.0; wt.len()];
        let gx = conv2d_backward(&x, &spec, &wt, &g, &mut gw, None);
        // Linear in x: <conv(x), g> == <x, conv^T g>
        assert!((y.dot(&g) - x.dot(&gx)).abs() < 1e-10);
        // Linear in w: <conv_w(x), g> == <w, gw>
        let wdot: f64 = wt.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((y.dot(&g) - wdot).abs() < 1e-10);
    }

    #[test]
    fn pool_round_trip_adjoint() {
        let x = map(2, 4, 4, 0.5);
        let p = avg_pool(&x, 2);
        let g = map(2, 2, 2, 0.9);
        let gx = avg_pool_backward(&g, 2, 4, 4);
        assert!((p.dot(&g) - x.dot(&gx)).abs() < 1e-12);
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let x = map(3, 2, 4, 0.2);
        let t = flatten_tokens(&x);
        assert_eq!(t.len, 8);
        assert_eq!(t.row(5), &[x.get(0, 1, 1), x.get(1, 1, 1), x.get(2, 1, 1)]);
        assert_eq!(unflatten_tokens(&t, 2, 4), x);
    }
}
