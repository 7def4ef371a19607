use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Result, SegmentError};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(SegmentError::EmptyInput("image has a zero dimension"));
        }
        if pixels.len() != width * height {
            return Err(SegmentError::Dimension {
                what: "image pixels",
                expected: width * height,
                actual: pixels.len(),
            });
        }
        if let Some(&bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(SegmentError::Range {
                what: "pixel intensity",
                value: bad,
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Reads an 8-bit grayscale PNG; byte `i` maps to intensity `i / 255`.
    pub fn read_png(path: &Path) -> Result<Self> {
        let io_err = |e: std::io::Error| SegmentError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let png_err = |e: png::DecodingError| SegmentError::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let file = File::open(path).map_err(io_err)?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(png_err)?;
        let size = reader.output_buffer_size().ok_or_else(|| SegmentError::Png {
            path: path.to_path_buf(),
            message: "image too large".into(),
        })?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(SegmentError::Png {
                path: path.to_path_buf(),
                message: format!(
                    "expected 8-bit grayscale, found {:?} at {:?}",
                    info.color_type, info.bit_depth
                ),
            });
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut pixels = Vec::with_capacity(w * h);
        for row in buf[..info.line_size * h].chunks(info.line_size) {
            pixels.extend(row[..w].iter().map(|&b| b as f64 / 255.0));
        }
        Self::new(w, h, pixels)
    }

    /// Writes an 8-bit grayscale PNG, rounding `i * 255` to the nearest byte.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| SegmentError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let png_err = |e: png::EncodingError| SegmentError::Png {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(png_err)?;
        writer.write_image_data(&self.to_bytes()).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect()
    }

    /// Rounds every intensity to the nearest representable 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.to_bytes().into_iter().map(|b| b as f64 / 255.0).collect(),
        }
    }
}
