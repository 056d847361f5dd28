//! Raster images: in-memory representation and lossless PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::CorpusError;

/// An RGB image with values in `[0, 1]`, stored height-major then width,
/// channels interleaved. Grayscale files are expanded to three equal
/// channels on load.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * CHANNELS, "image buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height * CHANNELS])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let base = (y * self.width + x) * CHANNELS;
        self.data[base..base + CHANNELS].copy_from_slice(&rgb);
    }

    /// Flattens non-overlapping `patch`×`patch` tiles into rows, tiles in
    /// row-major order, each row ordered `(channel, dy, dx)`.
    pub fn patches(&self, patch: usize) -> Vec<Vec<f64>> {
        let (gw, gh) = (self.width / patch, self.height / patch);
        let mut out = Vec::with_capacity(gw * gh);
        for py in 0..gh {
            for px in 0..gw {
                let mut row = Vec::with_capacity(CHANNELS * patch * patch);
                for c in 0..CHANNELS {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            row.push(self.pixel(px * patch + dx, py * patch + dy, c));
                        }
                    }
                }
                out.push(row);
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|_| CorpusError::MissingAsset(path.to_path_buf()))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let decode_err = |e: png::DecodingError| CorpusError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut reader = decoder.read_info().map_err(decode_err)?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(decode_err)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(CorpusError::Image {
                path: path.to_path_buf(),
                message: format!("unsupported bit depth {:?}", info.bit_depth),
            });
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let stride = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => {
                return Err(CorpusError::Image {
                    path: path.to_path_buf(),
                    message: format!("unsupported color type {other:?}"),
                })
            }
        };
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for px in bytes.chunks_exact(stride) {
            if stride <= 2 {
                let v = px[0] as f64 / 255.0;
                data.extend_from_slice(&[v, v, v]);
            } else {
                data.extend(px[..3].iter().map(|&b| b as f64 / 255.0));
            }
        }
        Ok(Self::new(w, h, data))
    }

    /// Writes an 8-bit RGB PNG. Values are clamped and rounded.
    pub fn save_png(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path)?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let encode_err = |e: png::EncodingError| CorpusError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(encode_err)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        writer.write_image_data(&bytes).map_err(encode_err)?;
        writer.finish().map_err(encode_err)?;
        Ok(())
    }

    /// Quantizes to the 8-bit grid a PNG round trip would produce.
    pub fn quantized(&self) -> Self {
        Self::new(
            self.width,
            self.height,
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        )
    }
}
