//! Bilinear and nearest sampling tables with pixel centers at `i + 0.5`.

use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisSample {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Source coordinate of output cell `i` when `out_len` cells cover
/// `[start, start + span)` in continuous source coordinates.
#[inline]
pub fn source_coord(start: f64, span: f64, out_len: usize, i: usize) -> f64 {
    start + (i as f64 + 0.5) * span / out_len as f64
}

/// Bilinear interpolation taps along one axis, clamped to the sample grid.
pub fn bilinear_axis(start: f64, span: f64, out_len: usize, in_len: usize) -> Vec<AxisSample> {
    let max = (in_len - 1) as f64;
    (0..out_len)
        .map(|i| {
            let u = (source_coord(start, span, out_len, i) - 0.5).clamp(0.0, max);
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            AxisSample {
                lo,
                hi,
                frac: u - lo as f64,
            }
        })
        .collect()
}

/// Nearest-neighbour source index along one axis.
pub fn nearest_axis(start: f64, span: f64, out_len: usize, in_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|i| {
            let s = source_coord(start, span, out_len, i).floor();
            (s.max(0.0) as usize).min(in_len - 1)
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Samples `sample(c, y, x)` on a precomputed grid. The lerp form keeps
/// constant regions exactly constant.
pub fn bilinear_gather(
    channels: usize,
    rows: &[AxisSample],
    cols: &[AxisSample],
    sample: impl Fn(usize, usize, usize) -> f64,
) -> FeatureMap {
    let mut out = FeatureMap::zeros(channels, rows.len(), cols.len());
    let mut k = 0;
    for c in 0..channels {
        for ry in rows {
            for cx in cols {
                let top = lerp(sample(c, ry.lo, cx.lo), sample(c, ry.lo, cx.hi), cx.frac);
                let bottom = lerp(sample(c, ry.hi, cx.lo), sample(c, ry.hi, cx.hi), cx.frac);
                out.data[k] = lerp(top, bottom, ry.frac);
                k += 1;
            }
        }
    }
    out
}

/// Full-extent bilinear resize of a feature map.
pub fn resize_bilinear(input: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    let rows = bilinear_axis(0.0, input.height as f64, out_h, input.height);
    let cols = bilinear_axis(0.0, input.width as f64, out_w, input.width);
    bilinear_gather(input.channels, &rows, &cols, |c, y, x| input.get(c, y, x))
}

/// Adjoint of [`resize_bilinear`]: scatters `grad_out` back to the input grid.
pub fn resize_bilinear_backward(grad_out: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
    let rows = bilinear_axis(0.0, in_h as f64, grad_out.height, in_h);
    let cols = bilinear_axis(0.0, in_w as f64, grad_out.width, in_w);
    let mut grad_in = FeatureMap::zeros(grad_out.channels, in_h, in_w);
    for c in 0..grad_out.channels {
        for (r, ry) in rows.iter().enumerate() {
            for (q, cx) in cols.iter().enumerate() {
                let g = grad_out.get(c, r, q);
                let gt = g * (1.0 - ry.frac);
                let gb = g * ry.frac;
                let plane = grad_in.plane_mut(c);
                plane[ry.lo * in_w + cx.lo] += gt * (1.0 - cx.frac);
                plane[ry.lo * in_w + cx.hi] += gt * cx.frac;
                plane[ry.hi * in_w + cx.lo] += gb * (1.0 - cx.frac);
                plane[ry.hi * in_w + cx.hi] += gb * cx.frac;
            }
        }
    }
    grad_in
}
