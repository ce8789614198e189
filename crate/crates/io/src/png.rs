//! 16-bit grayscale label PNGs and 8-bit RGB PNGs.

use std::io::Cursor;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Limits, Luma, Rgb};
use planeseg::raster::ColorImage;

use crate::IoError;

/// Largest raster accepted by the decoders, in pixels.
pub const MAX_PIXELS: u64 = 1 << 26;

fn decode(bytes: &[u8]) -> Result<DynamicImage, IoError> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_alloc = Some(MAX_PIXELS * 8);
    reader.limits(limits);
    Ok(reader.decode()?)
}

fn encode(img: &DynamicImage) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)?;
    Ok(buf)
}

/// Row-major instance ids of a label PNG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

pub fn encode_labels(labels: &LabelImage) -> Result<Vec<u8>, IoError> {
    if labels.labels.len() != labels.width * labels.height {
        return Err(IoError::Format(
            "label count does not match raster size".into(),
        ));
    }
    let data = labels
        .labels
        .iter()
        .map(|&l| {
            u16::try_from(l).map_err(|_| IoError::Format(format!("label {l} exceeds 16 bits")))
        })
        .collect::<Result<Vec<u16>, _>>()?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(labels.width as u32, labels.height as u32, data)
            .ok_or_else(|| IoError::Format("label raster too large".into()))?;
    encode(&DynamicImage::ImageLuma16(buf))
}

/// Accepts 8- or 16-bit grayscale.
pub fn decode_labels(bytes: &[u8]) -> Result<LabelImage, IoError> {
    let img = decode(bytes)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(IoError::Format(format!(
                "label png must be grayscale, got {:?}",
                other.color()
            )))
        }
    };
    Ok(LabelImage {
        width,
        height,
        labels,
    })
}

pub fn encode_rgb(image: &ColorImage) -> Result<Vec<u8>, IoError> {
    let data = image
        .pixels()
        .iter()
        .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, data)
            .ok_or_else(|| IoError::Format("rgb raster too large".into()))?;
    encode(&DynamicImage::ImageRgb8(buf))
}

/// Any PNG color type is converted to 8-bit RGB.
pub fn decode_rgb(bytes: &[u8]) -> Result<ColorImage, IoError> {
    let img = decode(bytes)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| p.0.map(|c| c as f64 / 255.0))
        .collect();
    Ok(ColorImage::new(w, h, pixels)?)
}
