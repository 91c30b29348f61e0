//! 8-bit PNG images and binary masks via the `image` crate. Images
//! quantize [0, 1] channels to bytes; masks store 0 or 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Image;

fn byte_of(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel image as RGB8 or a 1-channel image as L8.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let save = |e: image::ImageError| Error::Parse(format!("png write {}: {e}", path.display()));
    if img.channels == 3 {
        let mut out = image::RgbImage::new(w, h);
        for (col, row, px) in out.enumerate_pixels_mut() {
            let c = img.pixel3(col as usize, row as usize);
            *px = image::Rgb([byte_of(c[0]), byte_of(c[1]), byte_of(c[2])]);
        }
        out.save(path).map_err(save)
    } else {
        let mut out = image::GrayImage::new(w, h);
        for (col, row, px) in out.enumerate_pixels_mut() {
            *px = image::Luma([byte_of(img.get(col as usize, row as usize, 0))]);
        }
        out.save(path).map_err(save)
    }
}

/// Reads a PNG into a float image; RGB(A) becomes 3 channels, gray 1.
pub fn read_image(path: &Path) -> Result<Image> {
    let decoded = image::ImageReader::open(path)
        .map_err(Error::Io)?
        .decode()
        .map_err(|e| Error::Parse(format!("png read {}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        image::DynamicImage::ImageLuma8(gray) => {
            let data = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            Image::from_data(w, h, 1, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let mut data = Vec::with_capacity(w * h * 3);
            for p in rgb.pixels() {
                data.extend(p.0.iter().map(|&b| b as f64 / 255.0));
            }
            Image::from_data(w, h, 3, data)
        }
    }
}

/// Writes a boolean mask as an 8-bit grayscale PNG (255 = set).
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} needs {} entries, got {}",
            width,
            height,
            width * height,
            mask.len()
        )));
    }
    let mut out = image::GrayImage::new(width as u32, height as u32);
    for (col, row, px) in out.enumerate_pixels_mut() {
        *px = image::Luma([if mask[row as usize * width + col as usize] { 255 } else { 0 }]);
    }
    out.save(path)
        .map_err(|e| Error::Parse(format!("png write {}: {e}", path.display())))
}

/// Reads a mask PNG; any pixel at or above half intensity counts as set.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = read_image(path)?;
    let mask = (0..img.height)
        .flat_map(|row| (0..img.width).map(move |col| (col, row)))
        .map(|(col, row)| img.pixel3(col, row)[0] >= 0.5)
        .collect();
    Ok((img.width, img.height, mask))
}
