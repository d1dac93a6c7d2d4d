//! Scale-frustum construction.
//!
//! The image is replicated on planes `Z = d_i`. Rays cast from a projection
//! reference point (PRP) `(w, h, 0)` through the four image corners on the
//! farthest plane cut a rectangle out of every nearer plane. With
//! `t_i = d_i / d_ref` that rectangle is
//!
//! ```text
//! (w(1 - t), h(1 - t), w(1 - t) + tW, h(1 - t) + tH)
//! ```
//!
//! which always lies inside the image, contains the PRP, and grows
//! monotonically with `t`. Coordinates are continuous pixel coordinates on
//! `[0, W] × [0, H]`; rounding is left to the resampler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrustumConfig {
    distances: Vec<f64>,
    /// Distance of the plane whose window is the full image. Defaults to the
    /// last entry of `distances`.
    reference_distance: f64,
    unified_size: (usize, usize),
}

impl FrustumConfig {
    /// `unified_size` is `(height, width)` of every resized window.
    pub fn new(distances: Vec<f64>, unified_size: (usize, usize)) -> Result<Self> {
        let reference = distances.last().copied().unwrap_or(f64::NAN);
        Self::with_reference(distances, reference, unified_size)
    }

    /// Like [`FrustumConfig::new`] but normalizes scale ratios by
    /// `reference_distance` instead of the largest listed distance, so a
    /// single-distance configuration can still describe a small local window.
    pub fn with_reference(
        distances: Vec<f64>,
        reference_distance: f64,
        unified_size: (usize, usize),
    ) -> Result<Self> {
        if distances.is_empty() {
            return Err(Error::config("distances", "at least one distance is required"));
        }
        if distances.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::config("distances", "all distances must be finite and > 0"));
        }
        if distances.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("distances", "distances must be strictly increasing"));
        }
        let last = *distances.last().unwrap();
        if !(reference_distance.is_finite() && reference_distance >= last) {
            return Err(Error::config(
                "reference_distance",
                format!("must be >= the largest distance ({last})"),
            ));
        }
        if unified_size.0 < 8 || unified_size.1 < 8 {
            return Err(Error::config("unified_size", "both dimensions must be >= 8"));
        }
        Ok(Self {
            distances,
            reference_distance,
            unified_size,
        })
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn reference_distance(&self) -> f64 {
        self.reference_distance
    }

    pub fn unified_size(&self) -> (usize, usize) {
        self.unified_size
    }

    pub fn n_scales(&self) -> usize {
        self.distances.len()
    }

    /// Scale ratio of the local (smallest) window.
    pub fn local_ratio(&self) -> f64 {
        self.distances[0] / self.reference_distance
    }

    /// The same configuration restricted to its local scale, keeping the
    /// local window size unchanged.
    pub fn local_only(&self) -> Self {
        Self {
            distances: vec![self.distances[0]],
            reference_distance: self.reference_distance,
            unified_size: self.unified_size,
        }
    }
}

/// Continuous image-plane point from which observation rays are cast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReferencePoint {
    pub w: f64,
    pub h: f64,
}

impl ProjectionReferencePoint {
    pub fn new(w: f64, h: f64) -> Self {
        Self { w, h }
    }

    fn check(&self, dims: (f64, f64)) -> Result<()> {
        let (width, height) = dims;
        if !(0.0..=width).contains(&self.w) || !(0.0..=height).contains(&self.h) {
            return Err(Error::Geometry(format!(
                "PRP ({}, {}) outside image [0, {width}] x [0, {height}]",
                self.w, self.h
            )));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        self.x_min <= x && x <= self.x_max && self.y_min <= y && y <= self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub scale_index: usize,
    pub t: f64,
    pub rect: Rect,
}

impl ObservationWindow {
    /// Checks the window against an image of `(width, height)` pixels.
    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        let (w, h) = (dims.0 as f64, dims.1 as f64);
        let r = &self.rect;
        let tol = 1e-9 * w.max(h).max(1.0);
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(Error::Geometry(format!("scale ratio {} not in (0, 1]", self.t)));
        }
        if r.x_min < 0.0 || r.y_min < 0.0 || r.x_max > w || r.y_max > h {
            return Err(Error::Geometry(format!("window {r:?} exceeds image {w} x {h}")));
        }
        if (r.width() - self.t * w).abs() > tol || (r.height() - self.t * h).abs() > tol {
            return Err(Error::Geometry(format!(
                "window {r:?} is not t*W x t*H for t = {}",
                self.t
            )));
        }
        Ok(())
    }
}

pub fn scale_ratios(config: &FrustumConfig) -> Vec<f64> {
    config
        .distances
        .iter()
        .map(|d| d / config.reference_distance)
        .collect()
}

/// Intersects the four corner rays through `prp` with the plane at ratio `t`.
pub fn window_for_scale(
    prp: ProjectionReferencePoint,
    t: f64,
    image_dims: (usize, usize),
) -> Result<ObservationWindow> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Geometry(format!("scale ratio {t} not in (0, 1]")));
    }
    let (width, height) = (image_dims.0 as f64, image_dims.1 as f64);
    prp.check((width, height))?;
    // x_min + t*W written as W - (W - w)(1 - t), which cannot round past W
    Ok(ObservationWindow {
        scale_index: 0,
        t,
        rect: Rect {
            x_min: prp.w * (1.0 - t),
            y_min: prp.h * (1.0 - t),
            x_max: width - (width - prp.w) * (1.0 - t),
            y_max: height - (height - prp.h) * (1.0 - t),
        },
    })
}

/// One window per distance, ordered by scale index.
pub fn frustum_windows(
    prp: ProjectionReferencePoint,
    config: &FrustumConfig,
    image_dims: (usize, usize),
) -> Result<Vec<ObservationWindow>> {
    scale_ratios(config)
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut win = window_for_scale(prp, t, image_dims)?;
            win.scale_index = i;
            Ok(win)
        })
        .collect()
}

/// Inverse of [`window_for_scale`] for the top-left corner: the PRP whose
/// window at ratio `t0` starts at `(x0, y0)`.
pub fn prp_for_local_tile(
    x0: f64,
    y0: f64,
    t0: f64,
    image_dims: (usize, usize),
) -> Result<ProjectionReferencePoint> {
    if !(t0 > 0.0 && t0 < 1.0) {
        return Err(Error::Geometry(format!(
            "local ratio {t0} must lie in (0, 1); a full-image local window has no PRP inverse"
        )));
    }
    let (width, height) = (image_dims.0 as f64, image_dims.1 as f64);
    let x_lim = width * (1.0 - t0);
    let y_lim = height * (1.0 - t0);
    if !(0.0..=x_lim).contains(&x0) || !(0.0..=y_lim).contains(&y0) {
        return Err(Error::Geometry(format!(
            "tile origin ({x0}, {y0}) outside feasible range [0, {x_lim}] x [0, {y_lim}]"
        )));
    }
    let w = (x0 / (1.0 - t0)).min(width);
    let h = (y0 / (1.0 - t0)).min(height);
    Ok(ProjectionReferencePoint { w, h })
}
