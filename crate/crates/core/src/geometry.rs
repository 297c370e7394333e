//! Pixel-space rectangles, RGB images and patch maps.
//!
//! Rectangles are half-open: `(x0, y0, x1, y1)` covers columns `x0..x1` and
//! rows `y0..y1`. Every real-to-pixel conversion in the crate goes through
//! [`round_half_up`].

use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate rectangle ({x0},{y0},{x1},{y1})")]
    Degenerate { x0: i64, y0: i64, x1: i64, y1: i64 },
    #[error("rectangle {rect} exceeds bounds {width}x{height}")]
    OutOfBounds { rect: Rect, width: u32, height: u32 },
    #[error("ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid patch map: {0}")]
    InvalidPatchMap(String),
}

/// Rounds a non-negative real to the nearest integer, halves going up.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Exact `round_half_up(num / den)` for non-negative integers.
fn div_round_half_up(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// A non-degenerate half-open pixel rectangle.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct Rect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl Rect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, GeometryError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(GeometryError::Degenerate {
                x0: x0.into(),
                y0: y0.into(),
                x1: x1.into(),
                y1: y1.into(),
            });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// The rectangle covering a whole `width` x `height` canvas.
    pub fn full(width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(0, 0, width, height)
    }

    pub fn x0(&self) -> u32 {
        self.x0
    }
    pub fn y0(&self) -> u32 {
        self.y0
    }
    pub fn x1(&self) -> u32 {
        self.x1
    }
    pub fn y1(&self) -> u32 {
        self.y1
    }
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        Rect::new(x0, y0, x1, y1).ok()
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    fn check_within(&self, width: u32, height: u32) -> Result<(), GeometryError> {
        if self.fits_within(width, height) {
            Ok(())
        } else {
            Err(GeometryError::OutOfBounds {
                rect: *self,
                width,
                height,
            })
        }
    }
}

impl TryFrom<[u32; 4]> for Rect {
    type Error = GeometryError;

    fn try_from(v: [u32; 4]) -> Result<Self, Self::Error> {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [u32; 4] {
    fn from(r: Rect) -> Self {
        r.to_array()
    }
}

impl fmt::Debug for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rect({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.x0, self.y0, self.x1, self.y1)
    }
}

pub fn area(r: &Rect) -> u64 {
    r.area()
}

/// Intersection over union; 0 for disjoint rectangles.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Fraction of the image covered by `r`.
pub fn rel_size(r: &Rect, img: &Image) -> Result<f64, GeometryError> {
    rel_size_in(r, img.width(), img.height())
}

/// [`rel_size`] when only the image dimensions are known.
pub fn rel_size_in(r: &Rect, width: u32, height: u32) -> Result<f64, GeometryError> {
    r.check_within(width, height)?;
    Ok(r.area() as f64 / (u64::from(width) * u64::from(height)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Top,
    Bottom,
    Left,
    Right,
}

impl Side {
    /// Fixed evaluation order; ties resolve to the earliest side.
    pub const ALL: [Side; 4] = [Side::Top, Side::Bottom, Side::Left, Side::Right];
}

/// Removes `(1 - ratio)` of the extent along one axis from the named side.
///
/// The new boundary is the half-up rounding of the real-valued cut. A shrink
/// always removes at least one pixel, so the result is a strict subset of
/// `r`; a result narrower than one pixel is an error.
pub fn shrink_side(r: &Rect, side: Side, ratio: f64) -> Result<Rect, GeometryError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(GeometryError::InvalidRatio(ratio));
    }
    let extent = match side {
        Side::Top | Side::Bottom => r.height(),
        Side::Left | Side::Right => r.width(),
    };
    // `1.0 - 0.9` is 0.09999..., which would turn exact halves into
    // round-downs; the nudge restores the real-valued tie.
    let cut = (1.0 - ratio) * f64::from(extent) + 1e-9;
    let removed = round_half_up(cut).max(1);
    let (mut x0, mut y0, mut x1, mut y1) = (
        i64::from(r.x0),
        i64::from(r.y0),
        i64::from(r.x1),
        i64::from(r.y1),
    );
    match side {
        Side::Top => y0 += removed,
        Side::Bottom => y1 -= removed,
        Side::Left => x0 += removed,
        Side::Right => x1 -= removed,
    }
    if x1 - x0 < 1 || y1 - y0 < 1 {
        return Err(GeometryError::Degenerate { x0, y0, x1, y1 });
    }
    // Coordinates stay inside the original rect, so the casts are lossless.
    Rect::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32)
}

/// Row-major RGB8 image.
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    digest: OnceLock<ContentHash>,
}

/// SHA-256 over dimensions and pixel bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.to_hex()[..16])
    }
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidImage(format!(
                "dimensions {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(GeometryError::InvalidImage(format!(
                "buffer length {} != {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            digest: OnceLock::new(),
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, GeometryError> {
        let n = width as usize * height as usize;
        let pixels = rgb.iter().copied().cycle().take(n * 3).collect();
        Self::new(width, height, pixels)
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self, GeometryError> {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn full_rect(&self) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    pub fn content_hash(&self) -> ContentHash {
        *self.digest.get_or_init(|| {
            let mut h = Sha256::new();
            h.update(self.width.to_le_bytes());
            h.update(self.height.to_le_bytes());
            h.update(&self.pixels);
            ContentHash(h.finalize().into())
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>, GeometryError> {
        let mut out = Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| GeometryError::InvalidImage(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_encoded(bytes: &[u8]) -> Result<Self, GeometryError> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| GeometryError::InvalidImage(e.to_string()))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn open(path: &Path) -> Result<Self, GeometryError> {
        let img = image::open(path)
            .map_err(|e| GeometryError::InvalidImage(format!("{}: {e}", path.display())))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), GeometryError> {
        let bytes = self.to_png()?;
        std::fs::write(path, bytes)
            .map_err(|e| GeometryError::InvalidImage(format!("{}: {e}", path.display())))
    }
}

impl Clone for Image {
    fn clone(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.clone(),
            digest: self.digest.clone(),
        }
    }
}

impl PartialEq for Image {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.pixels == other.pixels
    }
}

impl Eq for Image {}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

pub fn crop_image(img: &Image, r: &Rect) -> Result<Image, GeometryError> {
    r.check_within(img.width, img.height)?;
    let row_bytes = r.width() as usize * 3;
    let mut pixels = Vec::with_capacity(row_bytes * r.height() as usize);
    for y in r.y0..r.y1 {
        let start = (y as usize * img.width as usize + r.x0 as usize) * 3;
        pixels.extend_from_slice(&img.pixels[start..start + row_bytes]);
    }
    Image::new(r.width(), r.height(), pixels)
}

/// A grid of non-negative relevance values over image patches, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMap {
    rows: u32,
    cols: u32,
    values: Vec<f64>,
}

impl PatchMap {
    pub fn new(rows: u32, cols: u32, values: Vec<f64>) -> Result<Self, GeometryError> {
        if rows == 0 || cols == 0 {
            return Err(GeometryError::InvalidPatchMap(format!(
                "grid {rows}x{cols}"
            )));
        }
        if values.len() != rows as usize * cols as usize {
            return Err(GeometryError::InvalidPatchMap(format!(
                "{} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(GeometryError::InvalidPatchMap(format!(
                "value {v} is not a finite non-negative real"
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }
    pub fn cols(&self) -> u32 {
        self.cols
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: u32, col: u32) -> f64 {
        self.values[row as usize * self.cols as usize + col as usize]
    }

    /// Grid-coordinate rect covering every cell: x spans columns, y spans rows.
    pub fn full_grid(&self) -> Rect {
        Rect {
            x0: 0,
            y0: 0,
            x1: self.cols,
            y1: self.rows,
        }
    }
}

/// Maps a grid-coordinate rect (x = column, y = row) onto image pixels.
///
/// Cell boundaries are `round_half_up(j * W / cols)` on each axis. When the
/// image has fewer pixels than the grid has cells, a cell may round to zero
/// width; it is widened to one pixel.
pub fn patch_to_pixel_rect(
    grid_rect: &Rect,
    pm: &PatchMap,
    img_width: u32,
    img_height: u32,
) -> Result<Rect, GeometryError> {
    grid_rect.check_within(pm.cols, pm.rows)?;
    let axis = |lo: u32, hi: u32, cells: u32, pixels: u32| -> (u32, u32) {
        let b = |i: u32| div_round_half_up(u64::from(i) * u64::from(pixels), u64::from(cells)) as u32;
        let mut p0 = b(lo).min(pixels);
        let mut p1 = b(hi).min(pixels);
        if p1 <= p0 {
            if p0 < pixels {
                p1 = p0 + 1;
            } else {
                p0 = pixels - 1;
                p1 = pixels;
            }
        }
        (p0, p1)
    };
    let (x0, x1) = axis(grid_rect.x0, grid_rect.x1, pm.cols, img_width);
    let (y0, y1) = axis(grid_rect.y0, grid_rect.y1, pm.rows, img_height);
    Rect::new(x0, y0, x1, y1)
}
