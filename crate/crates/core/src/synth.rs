//! Deterministic synthetic wide-area scenes.
//!
//! Five classes, drawn in a fixed order (later layers overwrite earlier
//! ones): background, cropland regions (class 0 with a different tint),
//! rivers, ponds, roads, buildings. Roads and rivers are monotone walks from
//! one border to the opposite one, so they stay continuous across any tiling.
//! Rivers and ponds share a base color; only their shape tells them apart.
//!
//! Randomness comes from [`SeededRng`] (ChaCha8, `seed_from_u64`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::raster::{save_labels, save_raster, LabelMap, RasterImage, IGNORE};
use crate::rng::SeededRng;

pub const CLASS_COUNT: usize = 5;
pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const RIVER: u8 = 2;
pub const POND: u8 = 3;
pub const BUILDING: u8 = 4;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = ["background", "road", "river", "pond", "building"];

/// Per-pixel color noise, in `[0, 1]` units.
pub const NOISE_SIGMA: f64 = 0.05;

/// Visualization palette indexed by class.
pub const PALETTE: [[u8; 3]; CLASS_COUNT] = [
    [120, 150, 80],
    [230, 230, 230],
    [40, 90, 200],
    [90, 200, 230],
    [220, 60, 50],
];

const BASE_BACKGROUND: [f64; 3] = [0.42, 0.48, 0.30];
const BASE_CROPLAND: [f64; 3] = [0.58, 0.62, 0.36];
const BASE_WATER: [f64; 3] = [0.16, 0.30, 0.52];
const BASE_ROAD: [f64; 3] = [0.66, 0.64, 0.60];
const BASE_BUILDING: [f64; 3] = [0.78, 0.36, 0.30];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoleCounts {
    pub cropland: usize,
    pub roads: usize,
    pub rivers: usize,
    pub ponds: usize,
    pub buildings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub counts: RoleCounts,
}

impl SceneSpec {
    /// Object counts scaled from a 1024 × 1024 reference density.
    pub fn with_default_counts(width: usize, height: usize, seed: u64) -> Self {
        let area = (width * height) as f64 / (1024.0 * 1024.0);
        let span = (width + height) as f64 / 2048.0;
        let scaled = |n: f64, k: f64| ((n * k).round() as usize).max(1);
        Self {
            width,
            height,
            seed,
            counts: RoleCounts {
                cropland: scaled(10.0, area),
                roads: scaled(3.0, span),
                rivers: scaled(1.0, span),
                ponds: scaled(12.0, area),
                buildings: scaled(400.0, area),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 128 || self.height < 128 {
            return Err(Error::config("size", "scene width and height must be >= 128"));
        }
        Ok(())
    }
}

struct Canvas {
    width: usize,
    height: usize,
    labels: Vec<u8>,
    tone: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, label: u8, tone: [f64; 3]) {
        let i = y * self.width + x;
        self.labels[i] = label;
        self.tone[i] = tone;
    }

    /// Axis-aligned square of side `side` centred on `(cx, cy)`, clipped.
    fn square_cells(&self, cx: f64, cy: f64, side: usize) -> impl Iterator<Item = (usize, usize)> {
        let x0 = (cx - side as f64 / 2.0).round() as i64;
        let y0 = (cy - side as f64 / 2.0).round() as i64;
        let (w, h) = (self.width as i64, self.height as i64);
        (y0..y0 + side as i64)
            .filter(move |&y| (0..h).contains(&y))
            .flat_map(move |y| {
                (x0..x0 + side as i64)
                    .filter(move |&x| (0..w).contains(&x))
                    .map(move |x| (x as usize, y as usize))
            })
    }
}

/// Monotone walk across the image. Returns stamp centres, one per pixel
/// step along the primary axis, from border to opposite border.
fn border_walk(rng: &mut SeededRng, width: usize, height: usize, stroke: usize) -> Vec<(f64, f64)> {
    let horizontal = rng.bernoulli(0.5);
    let (primary, across) = if horizontal { (width, height) } else { (height, width) };
    // Keep the perpendicular extent within a quarter of the walk length so
    // linear features stay elongated.
    let band = ((primary / 4).saturating_sub(stroke)).min(across.saturating_sub(stroke + 2)) as f64;
    let margin = stroke as f64 / 2.0 + 1.0;
    let lo_lim = margin;
    let hi_lim = (across as f64 - margin - band).max(lo_lim);
    let band_lo = rng.range(lo_lim, hi_lim);
    let band_hi = band_lo + band;
    let max_turn = 35f64.to_radians();
    let mut heading = rng.range(-max_turn, max_turn);
    let mut offset = rng.range(band_lo, band_hi.max(band_lo));
    let mut centres = Vec::with_capacity(primary);
    for s in 0..primary {
        centres.push(if horizontal {
            (s as f64 + 0.5, offset)
        } else {
            (offset, s as f64 + 0.5)
        });
        heading = (heading + 0.08 * rng.normal()).clamp(-max_turn, max_turn);
        let next = offset + heading.tan();
        if next < band_lo || next > band_hi {
            heading = -heading;
        } else {
            offset = next;
        }
    }
    centres
}

pub fn generate_scene(spec: &SceneSpec) -> Result<(RasterImage, LabelMap)> {
    spec.validate()?;
    let (width, height) = (spec.width, spec.height);
    let mut rng = SeededRng::new(spec.seed);
    let mut canvas = Canvas {
        width,
        height,
        labels: vec![BACKGROUND; width * height],
        tone: vec![BASE_BACKGROUND; width * height],
    };
    let c = spec.counts;

    for _ in 0..c.cropland {
        let rw = rng.range(0.08, 0.3) * width as f64;
        let rh = rng.range(0.08, 0.3) * height as f64;
        let x0 = rng.range(0.0, width as f64 - rw) as usize;
        let y0 = rng.range(0.0, height as f64 - rh) as usize;
        for y in y0..(y0 + rh as usize).min(height) {
            for x in x0..(x0 + rw as usize).min(width) {
                canvas.paint(x, y, BACKGROUND, BASE_CROPLAND);
            }
        }
    }

    for _ in 0..c.rivers {
        let stroke = rng.int_inclusive(6, 12);
        for (cx, cy) in border_walk(&mut rng, width, height, stroke) {
            let cells: Vec<_> = canvas.square_cells(cx, cy, stroke).collect();
            for (x, y) in cells {
                canvas.paint(x, y, RIVER, BASE_WATER);
            }
        }
    }

    for _ in 0..c.ponds {
        for _attempt in 0..1000 {
            let diameter = rng.range(10.0, 40.0);
            let stretch = rng.range(1.0, 1.3);
            let (rx, ry) = if rng.bernoulli(0.5) {
                (diameter / 2.0 * stretch, diameter / 2.0)
            } else {
                (diameter / 2.0, diameter / 2.0 * stretch)
            };
            let cx = rng.range(rx, width as f64 - rx);
            let cy = rng.range(ry, height as f64 - ry);
            let cells: Vec<(usize, usize)> = ((cy - ry).floor() as usize..=((cy + ry).ceil() as usize).min(height - 1))
                .flat_map(|y| {
                    ((cx - rx).floor() as usize..=((cx + rx).ceil() as usize).min(width - 1)).map(move |x| (x, y))
                })
                .filter(|&(x, y)| {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                })
                .collect();
            if cells.is_empty() || cells.iter().any(|&(x, y)| canvas.labels[y * width + x] == RIVER) {
                continue;
            }
            for (x, y) in cells {
                canvas.paint(x, y, POND, BASE_WATER);
            }
            break;
        }
    }

    for _ in 0..c.roads {
        let stroke = rng.int_inclusive(2, 4);
        for (cx, cy) in border_walk(&mut rng, width, height, stroke) {
            let cells: Vec<_> = canvas.square_cells(cx, cy, stroke).collect();
            for (x, y) in cells {
                canvas.paint(x, y, ROAD, BASE_ROAD);
            }
        }
    }

    for _ in 0..c.buildings {
        for _attempt in 0..1000 {
            let side = rng.int_inclusive(3, 8);
            let x0 = rng.below(width - side + 1);
            let y0 = rng.below(height - side + 1);
            let free = (y0..y0 + side)
                .all(|y| (x0..x0 + side).all(|x| canvas.labels[y * width + x] == BACKGROUND));
            if !free {
                continue;
            }
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    canvas.paint(x, y, BUILDING, BASE_BUILDING);
                }
            }
            break;
        }
    }

    let mut bytes = Vec::with_capacity(width * height * 3);
    for tone in &canvas.tone {
        for &base in tone {
            let v = (base + NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    let image = RasterImage::from_bytes(width, height, 3, &bytes)?;
    let labels = LabelMap::new(width, height, CLASS_COUNT, canvas.labels)?;
    Ok((image, labels))
}

/// Writes `n_scenes` scenes to `out_dir` with `manifest.json`; the last
/// `val_scenes` are marked `val`. Scene `i` uses seed `template.seed + i`.
pub fn generate_dataset(
    template: &SceneSpec,
    n_scenes: usize,
    val_scenes: usize,
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, Manifest)> {
    let out_dir = out_dir.as_ref();
    if val_scenes > n_scenes {
        return Err(Error::config("val", "more validation scenes than scenes"));
    }
    template.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let spec = SceneSpec {
            seed: template.seed.wrapping_add(i as u64),
            ..*template
        };
        let (image, labels) = generate_scene(&spec)?;
        let image_path = PathBuf::from(format!("scene_{i:03}.ppm"));
        let label_path = PathBuf::from(format!("scene_{i:03}_labels.pgm"));
        save_raster(&image, out_dir.join(&image_path))?;
        save_labels(&labels, out_dir.join(&label_path))?;
        entries.push(ManifestEntry {
            image_path,
            label_path,
            split: if i + val_scenes >= n_scenes { Split::Val } else { Split::Train },
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok((path, manifest))
}

/// Palette rendering of a label map; IGNORE pixels are black.
pub fn colorize(labels: &LabelMap) -> RasterImage {
    let bytes: Vec<u8> = labels
        .data
        .iter()
        .flat_map(|&v| {
            if v == IGNORE {
                [0, 0, 0]
            } else {
                PALETTE[v as usize % CLASS_COUNT]
            }
        })
        .collect();
    RasterImage::from_bytes(labels.width, labels.height, 3, &bytes).expect("palette image dims")
}
