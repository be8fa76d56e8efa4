//! Reading input images and writing mask/explanation/overlay PNGs.

use std::path::Path;

use candle_core::Device;
use image::imageops::FilterType;
use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Image, Mask};

/// Contour colour drawn by [`save_overlay_png`].
pub const OVERLAY_COLOR: [u8; 3] = [255, 0, 255];

/// Loads a PNG/JPEG, scales it so the short side equals the target size,
/// center-crops to `(height, width)` and returns `[0, 1]` RGB.
pub fn load_image(path: &Path, (height, width): (usize, usize), device: &Device) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other),
        })?
        .to_rgb8();
    let rgb = resize_and_crop(&img, height as u32, width as u32);
    let data: Vec<f32> = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
    Image::from_hwc(&data, height, width, 3, device)
}

fn resize_and_crop(img: &RgbImage, height: u32, width: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if (w, h) == (width, height) {
        return img.clone();
    }
    let scale = (width as f64 / w as f64).max(height as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).max(width);
    let nh = ((h as f64 * scale).round() as u32).max(height);
    let resized = image::imageops::resize(img, nw, nh, FilterType::Triangle);
    let (x0, y0) = ((nw - width) / 2, (nh - height) / 2);
    image::imageops::crop_imm(&resized, x0, y0, width, height).to_image()
}

fn to_rgb(image: &Image) -> Result<RgbImage> {
    if image.channels() != 3 {
        return Err(Error::shape(3, image.channels()));
    }
    let data: Vec<u8> = image.to_hwc_vec()?.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(image.width() as u32, image.height() as u32, data).expect("buffer matches dimensions"))
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })
}

pub fn save_image_png(image: &Image, path: &Path) -> Result<()> {
    let rgb = to_rgb(image)?;
    save(|p| rgb.save_with_format(p, image::ImageFormat::Png), path)
}

/// 8-bit grayscale: 255 where the mask is active, 0 elsewhere.
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let gray = mask_to_gray(mask)?;
    save(|p| gray.save_with_format(p, image::ImageFormat::Png), path)
}

fn mask_to_gray(mask: &Mask) -> Result<GrayImage> {
    let data: Vec<u8> = mask.to_vec()?.iter().map(|v| if *v >= 0.5 { 255 } else { 0 }).collect();
    Ok(GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data).expect("buffer matches dimensions"))
}

/// Reads a mask PNG back as a binary mask (`>= 128` is active).
pub fn load_mask_png(path: &Path, device: &Device) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::format(path, e))?.to_luma8();
    let data: Vec<f32> = img.as_raw().iter().map(|v| if *v >= 128 { 1.0 } else { 0.0 }).collect();
    Mask::from_vec(data, img.height() as usize, img.width() as usize, crate::tensor::MaskState::Binary, device)
}

/// The original image with a one-pixel contour around the active region.
pub fn save_overlay_png(original: &Image, mask: &Mask, path: &Path) -> Result<()> {
    let mut rgb = to_rgb(original)?;
    let gray = mask_to_gray(mask)?;
    let (w, h) = gray.dimensions();
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && gray.get_pixel(x as u32, y as u32)[0] > 0;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let edge = on(x, y) && [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)].iter().any(|&(a, b)| !on(a, b));
            if edge {
                rgb.put_pixel(x as u32, y as u32, Rgb(OVERLAY_COLOR));
            }
        }
    }
    save(|p| rgb.save_with_format(p, image::ImageFormat::Png), path)
}
