//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each binding is a thin wrapper over a plain function returning
//! `Result<_, String>`, so the logic is testable off the browser.

use sfr_core::geometry::{frustum_windows, FrustumConfig, ProjectionReferencePoint};
use sfr_core::infer::plan_prps;
use sfr_core::raster::RasterImage;
use sfr_core::synth::{colorize, generate_scene, SceneSpec};
use wasm_bindgen::prelude::*;

fn rgba(image: &RasterImage) -> Vec<u8> {
    image
        .to_bytes()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

/// Window rectangles for a PRP, flattened as `[x_min, y_min, x_max, y_max]`
/// per scale, local first. The last distance spans the whole image.
pub fn window_rects(width: usize, height: usize, prp_w: f64, prp_h: f64, distances: &[f64]) -> Result<Vec<f64>, String> {
    let config = FrustumConfig::new(distances.to_vec(), (8, 8)).map_err(|e| e.to_string())?;
    let windows = frustum_windows(ProjectionReferencePoint::new(prp_w, prp_h), &config, (width, height))
        .map_err(|e| e.to_string())?;
    Ok(windows
        .iter()
        .flat_map(|w| [w.rect.x_min, w.rect.y_min, w.rect.x_max, w.rect.y_max])
        .collect())
}

/// A synthetic scene rendered as two RGBA buffers.
#[wasm_bindgen]
pub struct DemoScene {
    size: usize,
    image: Vec<u8>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl DemoScene {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn labels_rgba(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

pub fn build_scene(size: usize, seed: u64) -> Result<DemoScene, String> {
    let spec = SceneSpec::with_default_counts(size, size, seed);
    let (image, labels) = generate_scene(&spec).map_err(|e| e.to_string())?;
    Ok(DemoScene {
        size,
        image: rgba(&image),
        labels: rgba(&colorize(&labels)),
    })
}

/// Per-pixel window count of a sliding-window plan, with a one-line summary.
pub struct Coverage {
    pub counts: Vec<u32>,
    pub summary: String,
}

pub fn plan_coverage(width: usize, height: usize, t0: f64, stride: usize) -> Result<Coverage, String> {
    let plan = plan_prps((width, height), t0, stride).map_err(|e| e.to_string())?;
    let mut counts = vec![0u32; width * height];
    for t in &plan.tiles {
        for y in t.y0..t.y0 + t.height {
            counts[y * width + t.x0..y * width + t.x0 + t.width].iter_mut().for_each(|c| *c += 1);
        }
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    Ok(Coverage {
        summary: format!("{plan}; coverage {min}..{max}"),
        counts,
    })
}

/// Greyscale RGBA: black is uncovered, white is the maximum count.
pub fn coverage_rgba(counts: &[u32]) -> Vec<u8> {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    counts
        .iter()
        .flat_map(|&c| {
            let v = (c as f64 / max * 255.0).round() as u8;
            [v, v, v, 255]
        })
        .collect()
}

#[wasm_bindgen(js_name = windowRects)]
pub fn window_rects_js(width: usize, height: usize, prp_w: f64, prp_h: f64, distances: Vec<f64>) -> Result<Vec<f64>, JsError> {
    window_rects(width, height, prp_w, prp_h, &distances).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = generateScene)]
pub fn generate_scene_js(size: usize, seed: u32) -> Result<DemoScene, JsError> {
    build_scene(size, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = PlanCoverage)]
pub struct PlanCoverageJs {
    rgba: Vec<u8>,
    summary: String,
}

#[wasm_bindgen(js_class = PlanCoverage)]
impl PlanCoverageJs {
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn summary(&self) -> String {
        self.summary.clone()
    }
}

#[wasm_bindgen(js_name = planCoverage)]
pub fn plan_coverage_js(width: usize, height: usize, t0: f64, stride: usize) -> Result<PlanCoverageJs, JsError> {
    let c = plan_coverage(width, height, t0, stride).map_err(|e| JsError::new(&e))?;
    Ok(PlanCoverageJs {
        rgba: coverage_rgba(&c.counts),
        summary: c.summary,
    })
}
