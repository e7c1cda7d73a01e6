//! PNG / PPM / PGM images to and from `(C, H, W)` tensors in `[0, 255]`.

use std::path::Path;

use detcore::Tensor;
use image::{DynamicImage, ExtendedColorType};

use crate::CliError;

pub fn read_image(path: &Path) -> Result<Tensor, CliError> {
    let img = image::open(path).map_err(|e| CliError::Input(format!("cannot read image {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLumaA16(_) => {
            (1, img.to_luma8().into_raw())
        }
        other => (3, other.to_rgb8().into_raw()),
    };
    // Interleaved HWC bytes to planar CHW.
    Ok(Tensor::from_fn(&[channels, h, w], |i| f64::from(bytes[(i[1] * w + i[2]) * channels + i[0]])))
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let (c, h, w) = t.dims3().map_err(CliError::from)?;
    let color = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(CliError::Usage(format!("cannot write a {c}-channel image"))),
    };
    let mut bytes = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                bytes[(y * w + x) * c + ch] = t.at3(ch, y, x).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, color)
        .map_err(|e| CliError::Input(format!("cannot write image {}: {e}", path.display())))
}
