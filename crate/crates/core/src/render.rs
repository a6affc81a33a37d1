//! Class-color prediction maps, ground-truth maps, and disagreement maps
//! as binary PPM (P6) files, plus simple grid stitching of tiles.

use std::path::Path;

use crate::error::{Error, Result};

/// Color used for ignore pixels in every rendering.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

/// Evenly spaced hues around the color wheel, one per class id.
pub fn default_palette(k: usize) -> Vec<[u8; 3]> {
    (0..k).map(|i| hsv_to_rgb(i as f64 / k.max(1) as f64, 0.78, 0.93)).collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let sector = h6 as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Class id to color table; ignore pixels render as [`IGNORE_COLOR`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn generate(k: usize) -> Self {
        Palette { colors: default_palette(k) }
    }

    pub fn from_colors(colors: Vec<[u8; 3]>) -> Self {
        Palette { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, id: u8) -> Result<[u8; 3]> {
        self.colors.get(id as usize).copied().ok_or_else(|| {
            Error::Range(format!("class id {id} has no palette color ({} entries)", self.colors.len()))
        })
    }
}

/// Plain RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `3 * width * height` bytes, row-major RGB.
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0; 3 * width * height] }
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let off = 3 * (row * self.width + col);
        self.pixels[off..off + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let off = 3 * (row * self.width + col);
        [self.pixels[off], self.pixels[off + 1], self.pixels[off + 2]]
    }

    /// Exact byte layout: `P6\n<w> <h>\n255\n` followed by RGB bytes.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm())?;
        Ok(())
    }
}

/// Pixel-for-pixel color substitution of an `H x W` label map.
pub fn render_class_map(
    labels: &[u8],
    height: usize,
    width: usize,
    palette: &Palette,
    ignore: u8,
) -> Result<Image> {
    if labels.len() != height * width {
        return Err(Error::dim(format!(
            "label map of {} entries does not fill {height} x {width}",
            labels.len()
        )));
    }
    let mut img = Image::new(width, height);
    for r in 0..height {
        for c in 0..width {
            let id = labels[r * width + c];
            let rgb = if id == ignore { IGNORE_COLOR } else { palette.color(id)? };
            img.set(r, c, rgb);
        }
    }
    Ok(img)
}

/// White where prediction and ground truth disagree, black where they agree;
/// ignore pixels are black.
pub fn render_diff(pred: &[u8], actual: &[u8], height: usize, width: usize, ignore: u8) -> Result<Image> {
    if pred.len() != actual.len() || pred.len() != height * width {
        return Err(Error::dim(format!(
            "diff maps of {} and {} entries do not fill {height} x {width}",
            pred.len(),
            actual.len()
        )));
    }
    let mut img = Image::new(width, height);
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let rgb = if pred[i] == ignore || actual[i] == ignore {
                IGNORE_COLOR
            } else if pred[i] != actual[i] {
                [255, 255, 255]
            } else {
                [0, 0, 0]
            };
            img.set(r, c, rgb);
        }
    }
    Ok(img)
}

/// Row-major placement of equally sized tiles into a `rows x cols` mosaic.
pub fn stitch(tiles: &[Image], rows: usize, cols: usize) -> Result<Image> {
    if tiles.len() != rows * cols || tiles.is_empty() {
        return Err(Error::dim(format!(
            "{} tiles cannot fill a complete {rows} x {cols} grid",
            tiles.len()
        )));
    }
    let (th, tw) = (tiles[0].height, tiles[0].width);
    if tiles.iter().any(|t| t.height != th || t.width != tw) {
        return Err(Error::dim("all tiles in a mosaic must share the same extents"));
    }
    let mut out = Image::new(cols * tw, rows * th);
    for (i, tile) in tiles.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        for r in 0..th {
            for c in 0..tw {
                out.set(gr * th + r, gc * tw + c, tile.get(r, c));
            }
        }
    }
    Ok(out)
}
