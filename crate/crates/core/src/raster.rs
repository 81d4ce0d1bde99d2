//! In-memory rasters and their PNG/JPEG codecs.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::RgbImage;

use crate::error::{EnsegError, Result};

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

/// Alias used where the mask is a model prediction rather than ground truth.
pub type SegmentationMask = LabelMask;

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(EnsegError::Shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(LabelMask {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        LabelMask {
            width,
            height,
            data: vec![class; width * height],
        }
    }

    /// Builds a mask from rows; panics on ragged input.
    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let width = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == width), "ragged mask rows");
        LabelMask {
            width,
            height: rows.len(),
            data: rows.concat(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn max_label(&self) -> Option<u8> {
        self.data.iter().copied().max()
    }

    /// Sorted distinct labels.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| EnsegError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| EnsegError::io(path, e))?
        .decode()
        .map_err(|e| EnsegError::Decode {
            file: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(img.to_rgb8())
}

/// Dimensions of an image without decoding its pixels.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| EnsegError::Decode {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((w as usize, h as usize))
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => EnsegError::io(path, io),
            other => EnsegError::Decode {
                file: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Reads a single-channel label PNG. Indexed images yield their raw palette
/// indices (the palette is ignored); grayscale images yield gray levels.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let decode_err = |message: String| EnsegError::Decode {
        file: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| EnsegError::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => return Err(decode_err(format!("mask must be single-channel, found {other:?}"))),
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = match info.bit_depth {
        png::BitDepth::One => 1,
        png::BitDepth::Two => 2,
        png::BitDepth::Four => 4,
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => {
            return Err(decode_err("16-bit masks are not supported".into()));
        }
    };
    let stride = info.line_size;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * stride..(y + 1) * stride];
        if bits == 8 {
            data.extend_from_slice(&row[..w]);
        } else {
            let per_byte = 8 / bits;
            let mask = (1u8 << bits) - 1;
            for x in 0..w {
                let byte = row[x / per_byte];
                let shift = 8 - bits * (x % per_byte + 1);
                data.push((byte >> shift) & mask);
            }
        }
    }
    LabelMask::new(w, h, data)
}

/// Writes an 8-bit indexed PNG whose palette comes from `palette` (one RGB
/// triple per class id); pixel values are the class ids.
pub fn write_mask_png(path: &Path, mask: &LabelMask, palette: &[[u8; 3]]) -> Result<()> {
    let file = File::create(path).map_err(|e| EnsegError::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        mask.width() as u32,
        mask.height() as u32,
    );
    let entries = palette.len().max(mask.max_label().map_or(0, |m| m as usize + 1));
    let mut pal: Vec<u8> = Vec::with_capacity(entries * 3);
    for i in 0..entries {
        pal.extend_from_slice(palette.get(i).unwrap_or(&[0, 0, 0]));
    }
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(pal);
    let to_io = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => EnsegError::io(path, io),
        other => EnsegError::Decode {
            file: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(mask.data()).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}
