//! Full-image prediction by scanning projection reference points: each
//! local window is predicted with its frustum context, its logits are
//! resampled to the window's native pixel size and summed into a canvas.

use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::{frustum_windows, prp_for_local_tile, FrustumConfig, ProjectionReferencePoint};
use crate::model::ModelParams;
use crate::raster::{extract_resample, LabelMap, RasterImage};
use crate::resample::resize_bilinear;
use crate::tensor::FeatureMap;

/// Anything that maps frustum patches to main logits at the unified size.
pub trait WindowModel: Sync {
    fn classes(&self) -> usize;
    fn predict(&self, patches: &[FeatureMap]) -> Result<FeatureMap>;
}

impl WindowModel for ModelParams {
    fn classes(&self) -> usize {
        self.config.classes
    }

    fn predict(&self, patches: &[FeatureMap]) -> Result<FeatureMap> {
        Ok(self.forward(patches)?.main)
    }
}

/// Stub returning the same per-class logit everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantModel {
    pub logits: Vec<f64>,
}

impl WindowModel for ConstantModel {
    fn classes(&self) -> usize {
        self.logits.len()
    }

    fn predict(&self, patches: &[FeatureMap]) -> Result<FeatureMap> {
        let first = patches.first().ok_or_else(|| Error::shape("predict", "at least one patch", 0))?;
        let mut out = FeatureMap::zeros(self.logits.len(), first.height, first.width);
        for (c, &v) in self.logits.iter().enumerate() {
            out.plane_mut(c).iter_mut().for_each(|x| *x = v);
        }
        Ok(out)
    }
}

/// Integer pixel rectangle `[x0, x0 + width) × [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferencePlan {
    pub image_dims: (usize, usize),
    pub t0: f64,
    /// Native local window size `(width, height)`.
    pub window: (usize, usize),
    pub stride: usize,
    /// Tile rectangles in row-major order.
    pub tiles: Vec<PixelRect>,
    pub prps: Vec<ProjectionReferencePoint>,
}

impl InferencePlan {
    pub fn len(&self) -> usize {
        self.prps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prps.is_empty()
    }

    /// Pixels covered by no tile; empty for every valid plan.
    pub fn uncovered(&self) -> Vec<(usize, usize)> {
        let (w, h) = self.image_dims;
        let mut cover = vec![false; w * h];
        for t in &self.tiles {
            for y in t.y0..t.y0 + t.height {
                cover[y * w + t.x0..y * w + t.x0 + t.width].iter_mut().for_each(|c| *c = true);
            }
        }
        (0..w * h).filter(|&i| !cover[i]).map(|i| (i % w, i / w)).collect()
    }
}

impl fmt::Display for InferencePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.tiles.iter().filter(|t| t.y0 == 0).count();
        let rows = self.tiles.len().checked_div(cols).unwrap_or(0);
        write!(
            f,
            "image {}x{}, t0 {:.6}, window {}x{}, stride {}, {} windows ({} x {})",
            self.image_dims.0,
            self.image_dims.1,
            self.t0,
            self.window.0,
            self.window.1,
            self.stride,
            self.len(),
            cols,
            rows
        )
    }
}

/// `0, s, 2s, …` with the last origin flush to the far edge.
fn axis_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut x = 0;
    while x + window < len {
        out.push(x);
        x += stride;
    }
    out.push(len - window);
    out
}

/// Sliding-window tiling of the local plane. `t0 = 1` gives one full-image
/// window.
pub fn plan_prps(image_dims: (usize, usize), t0: f64, stride: usize) -> Result<InferencePlan> {
    let (w, h) = image_dims;
    if w == 0 || h == 0 {
        return Err(Error::Geometry("image has zero area".into()));
    }
    if !(t0 > 0.0 && t0 <= 1.0) {
        return Err(Error::config("t0", format!("local ratio {t0} not in (0, 1]")));
    }
    let ww = ((t0 * w as f64).round() as usize).clamp(1, w);
    let wh = ((t0 * h as f64).round() as usize).clamp(1, h);
    if stride == 0 || stride > ww.min(wh) {
        return Err(Error::config(
            "stride",
            format!("{stride} must be in 1..={} (the local window size)", ww.min(wh)),
        ));
    }
    let mut tiles = Vec::new();
    let mut prps = Vec::new();
    if t0 >= 1.0 {
        tiles.push(PixelRect { x0: 0, y0: 0, width: w, height: h });
        prps.push(ProjectionReferencePoint::new(w as f64 / 2.0, h as f64 / 2.0));
    } else {
        let (xs, ys) = (axis_origins(w, ww, stride), axis_origins(h, wh, stride));
        let (x_lim, y_lim) = (w as f64 * (1.0 - t0), h as f64 * (1.0 - t0));
        for &y0 in &ys {
            for &x0 in &xs {
                tiles.push(PixelRect { x0, y0, width: ww, height: wh });
                // rounding t0·W down can push the flush origin just past the
                // continuous limit; clamp it for the inversion
                let prp = prp_for_local_tile((x0 as f64).min(x_lim), (y0 as f64).min(y_lim), t0, image_dims)?;
                prps.push(prp);
            }
        }
    }
    Ok(InferencePlan {
        image_dims,
        t0,
        window: (ww, wh),
        stride,
        tiles,
        prps,
    })
}

/// Native pixel rect of the local window for `prp`.
pub fn native_rect(prp: ProjectionReferencePoint, frustum: &FrustumConfig, image_dims: (usize, usize)) -> Result<PixelRect> {
    let (w, h) = image_dims;
    let t0 = frustum.local_ratio();
    let ww = ((t0 * w as f64).round() as usize).clamp(1, w);
    let wh = ((t0 * h as f64).round() as usize).clamp(1, h);
    let win = frustum_windows(prp, frustum, image_dims)?[0];
    let x0 = (win.rect.x_min.round() as usize).min(w - ww);
    let y0 = (win.rect.y_min.round() as usize).min(h - wh);
    Ok(PixelRect { x0, y0, width: ww, height: wh })
}

/// Main logits of the local window at its native pixel size.
pub fn predict_window(
    model: &dyn WindowModel,
    image: &RasterImage,
    prp: ProjectionReferencePoint,
    frustum: &FrustumConfig,
) -> Result<(FeatureMap, PixelRect)> {
    let size = frustum.unified_size();
    let patches = frustum_windows(prp, frustum, image.dims())?
        .iter()
        .map(|w| Ok(extract_resample(image, w, size)?.data))
        .collect::<Result<Vec<_>>>()?;
    let logits = model.predict(&patches)?;
    let rect = native_rect(prp, frustum, image.dims())?;
    let native = if (logits.height, logits.width) == (rect.height, rect.width) {
        logits
    } else {
        resize_bilinear(&logits, rect.height, rect.width)
    };
    Ok((native, rect))
}

/// Per-class logit sums and coverage counts over the full image.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCanvas {
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    /// Channel-major `classes × height × width`.
    pub sums: Vec<f64>,
    pub coverage: Vec<u32>,
}

impl LogitCanvas {
    pub fn new(classes: usize, width: usize, height: usize) -> Self {
        Self {
            classes,
            width,
            height,
            sums: vec![0.0; classes * width * height],
            coverage: vec![0; width * height],
        }
    }

    pub fn accumulate(&mut self, rect: PixelRect, logits: &FeatureMap) -> Result<()> {
        if rect.x0 + rect.width > self.width || rect.y0 + rect.height > self.height {
            return Err(Error::Geometry(format!(
                "window {rect:?} exceeds canvas {} x {}",
                self.width, self.height
            )));
        }
        logits.expect_shape("accumulate", [self.classes, rect.height, rect.width])?;
        let plane = self.width * self.height;
        for c in 0..self.classes {
            let src = logits.plane(c);
            for y in 0..rect.height {
                let dst = c * plane + (rect.y0 + y) * self.width + rect.x0;
                let row = &src[y * rect.width..(y + 1) * rect.width];
                for (d, s) in self.sums[dst..dst + rect.width].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        for y in rect.y0..rect.y0 + rect.height {
            let row = y * self.width;
            self.coverage[row + rect.x0..row + rect.x0 + rect.width]
                .iter_mut()
                .for_each(|c| *c += 1);
        }
        Ok(())
    }

    /// Per-pixel argmax of the sums, ties to the lowest class.
    pub fn finalize(&self) -> Result<LabelMap> {
        if let Some(i) = self.coverage.iter().position(|&c| c == 0) {
            return Err(Error::Coverage {
                x: i % self.width,
                y: i / self.width,
            });
        }
        let plane = self.width * self.height;
        let data = (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.sums[c * plane + i] > self.sums[best * plane + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(self.width, self.height, self.classes, data)
    }
}

/// Predicts every plan window and sums them into a canvas in plan order.
/// With `workers > 1` windows are predicted on a thread pool; accumulation
/// stays serial, so the result does not depend on `workers`.
pub fn infer_logits(
    model: &dyn WindowModel,
    image: &RasterImage,
    frustum: &FrustumConfig,
    plan: &InferencePlan,
    workers: usize,
) -> Result<LogitCanvas> {
    if plan.image_dims != image.dims() {
        return Err(Error::shape("infer: plan", plan.image_dims, image.dims()));
    }
    let (w, h) = image.dims();
    let mut canvas = LogitCanvas::new(model.classes(), w, h);
    let chunk = workers.max(1) * 4;
    let pool = build_pool(workers)?;
    for prps in plan.prps.chunks(chunk) {
        let results = predict_many(model, image, frustum, prps, pool.as_ref())?;
        for (logits, rect) in results {
            canvas.accumulate(rect, &logits)?;
        }
    }
    Ok(canvas)
}

#[cfg(feature = "parallel")]
type Pool = rayon::ThreadPool;
#[cfg(not(feature = "parallel"))]
type Pool = ();

#[cfg(feature = "parallel")]
fn build_pool(workers: usize) -> Result<Option<Pool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::config("workers", e.to_string()))
}

#[cfg(not(feature = "parallel"))]
fn build_pool(_workers: usize) -> Result<Option<Pool>> {
    Ok(None)
}

fn predict_many(
    model: &dyn WindowModel,
    image: &RasterImage,
    frustum: &FrustumConfig,
    prps: &[ProjectionReferencePoint],
    pool: Option<&Pool>,
) -> Result<Vec<(FeatureMap, PixelRect)>> {
    #[cfg(feature = "parallel")]
    if let Some(pool) = pool {
        use rayon::prelude::*;
        return pool.install(|| {
            prps.par_iter()
                .map(|&p| predict_window(model, image, p, frustum))
                .collect()
        });
    }
    let _ = pool;
    prps.iter().map(|&p| predict_window(model, image, p, frustum)).collect()
}

/// Plan, predict, accumulate and take the argmax.
pub fn infer_image(
    model: &dyn WindowModel,
    image: &RasterImage,
    frustum: &FrustumConfig,
    stride: usize,
    workers: usize,
) -> Result<LabelMap> {
    let plan = plan_prps(image.dims(), frustum.local_ratio(), stride)?;
    infer_logits(model, image, frustum, &plan, workers)?.finalize()
}

/// Default stride: a quarter of the local window, at least one pixel.
pub fn default_stride(image_dims: (usize, usize), frustum: &FrustumConfig) -> usize {
    let t0 = frustum.local_ratio();
    let ww = (t0 * image_dims.0 as f64).round() as usize;
    let wh = (t0 * image_dims.1 as f64).round() as usize;
    (ww.min(wh) / 4).max(1)
}
