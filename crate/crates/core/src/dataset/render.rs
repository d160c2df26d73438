//! Flat 2D blob rendering and binary PPM I/O.

use std::fs;
use std::path::Path;

use super::scene::{Color, Scene, Shape, Size};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// RGB values of the CLEVR palette.
pub fn palette(color: Color) -> [u8; 3] {
    match color {
        Color::Gray => [87, 87, 87],
        Color::Red => [173, 35, 35],
        Color::Blue => [42, 75, 215],
        Color::Green => [29, 105, 20],
        Color::Brown => [129, 74, 25],
        Color::Purple => [129, 38, 192],
        Color::Cyan => [41, 208, 208],
        Color::Yellow => [255, 238, 51],
    }
}

/// Fraction of the cell side covered by an object.
pub fn size_fraction(size: Size) -> f64 {
    match size {
        Size::Large => 0.8,
        Size::Small => 0.45,
    }
}

impl Image {
    pub fn blank(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![255; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[H, W, 3]` tensor with channel values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::from_parts(vec![self.height, self.width, 3], data)
    }

    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Image> {
        let bad = |why: &str| Error::Data(format!("invalid PPM: {why}"));
        // Header: magic, width, height, maxval, separated by whitespace;
        // exactly one whitespace byte precedes the raster.
        let mut fields = Vec::with_capacity(4);
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not P6"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit rasters are supported"));
        }
        let raster = bytes.get(i + 1..).ok_or_else(|| bad("missing raster"))?;
        if raster.len() != width * height * 3 {
            return Err(bad("raster length does not match dimensions"));
        }
        Ok(Image {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_ppm(&bytes)
    }
}

/// Draws `scene` on a white square canvas: cube → square, sphere → disc,
/// cylinder → upward triangle, each centered in its cell. A pixel is painted
/// when its center falls inside the glyph; there is no anti-aliasing.
pub fn render_2d(scene: &Scene, canvas_px: usize) -> Result<Image> {
    if canvas_px == 0 || canvas_px % 3 != 0 {
        return Err(Error::Argument(format!("canvas size {canvas_px} must be a positive multiple of 3")));
    }
    let cell = canvas_px / 3;
    let mut img = Image::blank(canvas_px, canvas_px);
    for (pos, obj) in scene.objects() {
        let cx = (pos.col() * cell) as f64 + cell as f64 / 2.0;
        let cy = (pos.row() * cell) as f64 + cell as f64 / 2.0;
        let half = size_fraction(obj.size) * cell as f64 / 2.0;
        let rgb = palette(obj.color);
        for y in pos.row() * cell..(pos.row() + 1) * cell {
            for x in pos.col() * cell..(pos.col() + 1) * cell {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let inside = match obj.shape {
                    Shape::Cube => dx.abs() <= half && dy.abs() <= half,
                    Shape::Sphere => dx * dx + dy * dy <= half * half,
                    Shape::Cylinder => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
                };
                if inside {
                    img.put(x, y, rgb);
                }
            }
        }
    }
    Ok(img)
}
