use std::io::{BufWriter, Cursor};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// 8-bit grayscale PNG.
    #[default]
    Png,
    /// Little-endian `f32` planes in `[C, H, W]` order.
    Raw,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Raw => "f32",
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Ok(ImageFormat::Png),
            Some("f32") => Ok(ImageFormat::Raw),
            _ => Err(Error::Data(format!("unknown image type for {}", path.display()))),
        }
    }

    /// Round a pixel value to what this format stores.
    pub fn quantize(self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match self {
            ImageFormat::Png => (v * 255.0).round() / 255.0,
            ImageFormat::Raw => v as f32 as f64,
        }
    }
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    let io = |e: std::io::Error| Error::io(path, e);
    match ImageFormat::from_path(path)? {
        ImageFormat::Png => {
            if shape[0] != 1 {
                return Err(Error::Data(format!("PNG output needs one channel, got {}", shape[0])));
            }
            let file = std::fs::File::create(path).map_err(io)?;
            let mut enc = png::Encoder::new(BufWriter::new(file), shape[2] as u32, shape[1] as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let bytes: Vec<u8> = image
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let png_err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
            let mut w = enc.write_header().map_err(png_err)?;
            w.write_image_data(&bytes).map_err(png_err)?;
            w.finish().map_err(png_err)?;
        }
        ImageFormat::Raw => {
            let bytes: Vec<u8> = image
                .data()
                .iter()
                .flat_map(|&v| (v as f32).to_le_bytes())
                .collect();
            std::fs::write(path, bytes).map_err(io)?;
        }
    }
    Ok(())
}

/// Read an image as `[C, H, W]` values in `[0, 1]`; `shape` is required for
/// raw planes and checked for PNG.
pub fn read_image(path: &Path, shape: (usize, usize, usize)) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (c, h, w) = shape;
    let data_err = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let data: Vec<f64> = match ImageFormat::from_path(path)? {
        ImageFormat::Png => {
            let mut dec = png::Decoder::new(Cursor::new(bytes));
            dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
            let mut reader = dec.read_info().map_err(|e| data_err(e.to_string()))?;
            let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
            let info = reader.next_frame(&mut buf).map_err(|e| data_err(e.to_string()))?;
            if info.color_type != png::ColorType::Grayscale || c != 1 {
                return Err(data_err(format!("expected 1-channel grayscale, got {:?}", info.color_type)));
            }
            if (info.width as usize, info.height as usize) != (w, h) {
                return Err(data_err(format!("size {}x{} != {w}x{h}", info.width, info.height)));
            }
            buf[..info.buffer_size()].iter().map(|&b| b as f64 / 255.0).collect()
        }
        ImageFormat::Raw => {
            if bytes.len() != c * h * w * 4 {
                return Err(data_err(format!("{} bytes for a {c}x{h}x{w} f32 image", bytes.len())));
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        }
    };
    Tensor::new(&[c, h, w], data)
}

/// Pixel values minus the per-image mean.
pub fn normalize_image(image: &Tensor) -> Tensor {
    let mean = image.data().iter().sum::<f64>() / image.len() as f64;
    Tensor::new(image.shape(), image.data().iter().map(|v| v - mean).collect()).expect("same shape")
}
