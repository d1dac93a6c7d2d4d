//! Image and label storage, PPM/PGM I/O, and window resampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::ObservationWindow;
use crate::resample::{bilinear_axis, bilinear_gather, nearest_axis};
use crate::tensor::FeatureMap;

/// Reserved label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Interleaved (row-major, channel-last) image with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::config("raster", "width, height and channels must be > 0"));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape("RasterImage::new", width * height * channels, data.len()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        if classes == 0 || classes > IGNORE as usize {
            return Err(Error::config("classes", "class count must be in 1..=255"));
        }
        if data.len() != width * height {
            return Err(Error::shape("LabelMap::new", width * height, data.len()));
        }
        let map = Self {
            width,
            height,
            classes,
            data,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn filled(width: usize, height: usize, classes: usize, value: u8) -> Result<Self> {
        Self::new(width, height, classes, vec![value; width * height])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .data
            .iter()
            .position(|&v| v != IGNORE && v as usize >= self.classes)
        {
            return Err(Error::LabelRange {
                value: self.data[i],
                x: i % self.width,
                y: i / self.width,
                classes: self.classes,
            });
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn flip_horizontal(&mut self) {
        for row in self.data.chunks_mut(self.width) {
            row.reverse();
        }
    }

    pub fn flip_vertical(&mut self) {
        let (w, h) = (self.width, self.height);
        for y in 0..h / 2 {
            let (top, bottom) = self.data.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

/// A window resampled to the unified size.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: FeatureMap,
    pub window: ObservationWindow,
}

fn check_window(window: &ObservationWindow, dims: (usize, usize)) -> Result<()> {
    window.validate(dims)
}

fn check_size(size: (usize, usize)) -> Result<()> {
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::config("unified_size", "output size must be non-empty"));
    }
    Ok(())
}

/// Bilinear resample of `window` to `size = (height, width)`.
pub fn extract_resample(
    image: &RasterImage,
    window: &ObservationWindow,
    size: (usize, usize),
) -> Result<Patch> {
    check_window(window, image.dims())?;
    check_size(size)?;
    let r = &window.rect;
    let rows = bilinear_axis(r.y_min, r.height(), size.0, image.height);
    let cols = bilinear_axis(r.x_min, r.width(), size.1, image.width);
    let data = bilinear_gather(image.channels, &rows, &cols, |c, y, x| image.get(x, y, c) as f64);
    Ok(Patch {
        data,
        window: *window,
    })
}

/// Nearest-neighbour label resample of `window` to `size = (height, width)`.
pub fn extract_labels(
    labels: &LabelMap,
    window: &ObservationWindow,
    size: (usize, usize),
) -> Result<LabelMap> {
    check_window(window, labels.dims())?;
    check_size(size)?;
    let r = &window.rect;
    let rows = nearest_axis(r.y_min, r.height(), size.0, labels.height);
    let cols = nearest_axis(r.x_min, r.width(), size.1, labels.width);
    let mut data = Vec::with_capacity(size.0 * size.1);
    for &y in &rows {
        data.extend(cols.iter().map(|&x| labels.get(x, y)));
    }
    Ok(LabelMap {
        width: size.1,
        height: size.0,
        classes: labels.classes,
        data,
    })
}

// ---------------------------------------------------------------------------
// PPM / PGM

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PnmHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Byte offset of the first sample.
    pub data_offset: usize,
}

impl PnmHeader {
    pub fn payload_len(&self) -> usize {
        self.width * self.height * self.channels
    }
}

fn header_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses a binary P5/P6 header from the start of `bytes`.
pub fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<PnmHeader> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(header_err(path, "expected magic P5 or P6")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(header_err(path, "header ended early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(header_err(path, format!("header field {k} is not a number")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| header_err(path, format!("header field {k} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(header_err(path, format!("zero dimension {width} x {height}")));
    }
    if maxval != 255 {
        return Err(header_err(path, format!("max value {maxval} unsupported (need 255)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(header_err(path, "missing whitespace after max value")),
    }
    Ok(PnmHeader {
        width,
        height,
        channels,
        data_offset: pos,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_pnm(path: &Path) -> Result<(PnmHeader, Vec<u8>)> {
    let bytes = read_file(path)?;
    let header = parse_pnm_header(&bytes, path)?;
    let payload = &bytes[header.data_offset..];
    let expected = header.payload_len();
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload[..expected].to_vec()))
}

fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, payload: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Dimension {
                path: path.to_path_buf(),
                reason: format!("{c} channels cannot be stored as PPM/PGM"),
            })
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "{magic}\n{width} {height}\n255\n")
        .and_then(|_| out.write_all(payload))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Loads a P6 (3-channel) or P5 (1-channel) image.
pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let (h, payload) = read_pnm(path)?;
    RasterImage::from_bytes(h.width, h.height, h.channels, &payload)
}

pub fn save_raster(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    write_pnm(
        path.as_ref(),
        image.width,
        image.height,
        image.channels,
        &image.to_bytes(),
    )
}

/// Loads a P5 label map; values must be `< classes` or [`IGNORE`].
pub fn load_labels(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let (h, payload) = read_pnm(path)?;
    if h.channels != 1 {
        return Err(Error::Dimension {
            path: path.to_path_buf(),
            reason: format!("label map must be single-channel (P5), found {} channels", h.channels),
        });
    }
    LabelMap::new(h.width, h.height, classes, payload)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_pnm(path.as_ref(), labels.width, labels.height, 1, &labels.data)
}

/// Row-on-demand reader for rasters too large to hold in memory.
pub struct RasterReader {
    path: PathBuf,
    header: PnmHeader,
    file: BufReader<File>,
}

impl RasterReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut head = vec![0u8; 512];
        let n = read_up_to(&mut file, &mut head).map_err(|e| Error::io(&path, e))?;
        head.truncate(n);
        let header = parse_pnm_header(&head, &path)?;
        let total = file.metadata().map_err(|e| Error::io(&path, e))?.len() as usize;
        let expected = header.data_offset + header.payload_len();
        if total < expected {
            return Err(Error::Truncated {
                path,
                expected: header.payload_len(),
                found: total.saturating_sub(header.data_offset),
            });
        }
        Ok(Self {
            path,
            header,
            file: BufReader::new(file),
        })
    }

    pub fn header(&self) -> PnmHeader {
        self.header
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.header.width, self.header.height)
    }

    /// Reads rows `y0..y1` as a strip image.
    pub fn read_rows(&mut self, y0: usize, y1: usize) -> Result<RasterImage> {
        let h = self.header;
        if y0 >= y1 || y1 > h.height {
            return Err(Error::Geometry(format!("row range {y0}..{y1} outside 0..{}", h.height)));
        }
        let row_bytes = h.width * h.channels;
        let mut buf = vec![0u8; (y1 - y0) * row_bytes];
        self.file
            .seek(SeekFrom::Start((h.data_offset + y0 * row_bytes) as u64))
            .and_then(|_| self.file.read_exact(&mut buf))
            .map_err(|e| Error::io(&self.path, e))?;
        RasterImage::from_bytes(h.width, y1 - y0, h.channels, &buf)
    }

    /// Same result as [`extract_resample`] on the fully loaded image, reading
    /// only the rows the window touches.
    pub fn extract_resample(&mut self, window: &ObservationWindow, size: (usize, usize)) -> Result<Patch> {
        check_window(window, self.dims())?;
        check_size(size)?;
        let height = self.header.height;
        let y0 = (window.rect.y_min.floor() as usize).saturating_sub(1);
        let y1 = ((window.rect.y_max.ceil() as usize) + 1).min(height);
        let strip = self.read_rows(y0, y1)?;
        let r = &window.rect;
        let rows = bilinear_axis(r.y_min, r.height(), size.0, height);
        let cols = bilinear_axis(r.x_min, r.width(), size.1, strip.width);
        let data = bilinear_gather(strip.channels, &rows, &cols, |c, y, x| {
            strip.get(x, y - y0, c) as f64
        });
        Ok(Patch {
            data,
            window: *window,
        })
    }
}

fn read_up_to(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match file.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Loads an image whole if its payload is at most `threshold_bytes`, otherwise
/// returns a streaming reader.
pub enum RasterSource {
    InMemory(RasterImage),
    Streaming(RasterReader),
}

impl RasterSource {
    pub fn open(path: impl AsRef<Path>, threshold_bytes: usize) -> Result<Self> {
        let reader = RasterReader::open(path.as_ref())?;
        if reader.header().payload_len() <= threshold_bytes {
            Ok(RasterSource::InMemory(load_raster(path)?))
        } else {
            Ok(RasterSource::Streaming(reader))
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            RasterSource::InMemory(img) => img.dims(),
            RasterSource::Streaming(r) => r.dims(),
        }
    }

    pub fn extract_resample(&mut self, window: &ObservationWindow, size: (usize, usize)) -> Result<Patch> {
        match self {
            RasterSource::InMemory(img) => extract_resample(img, window, size),
            RasterSource::Streaming(r) => r.extract_resample(window, size),
        }
    }
}
