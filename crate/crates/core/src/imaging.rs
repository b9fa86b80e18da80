//! Frame representation and pixel-level helpers.
//!
//! Frames are `image::Rgb32FImage` with channel values in `[0, 1]`. Tensors use
//! the `[batch, 3, height, width]` layout, centered by subtracting 0.5.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{Rgb, Rgb32FImage};

use crate::error::{GladError, Result};

pub type Image = Rgb32FImage;

pub fn blank(width: u32, height: u32, color: [f32; 3]) -> Image {
    Image::from_pixel(width, height, Rgb(color))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| GladError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb32f())
}

/// Writes an 8-bit image; the format follows the file extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| GladError::io(parent, e))?;
        }
    }
    let rgb8 = image::DynamicImage::ImageRgb32F(img.clone()).to_rgb8();
    rgb8.save(path).map_err(|source| GladError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn mean_color(img: &Image) -> [f32; 3] {
    let n = (img.width() as f64 * img.height() as f64).max(1.0);
    let mut acc = [0f64; 3];
    for p in img.pixels() {
        for (a, v) in acc.iter_mut().zip(p.0) {
            *a += v as f64;
        }
    }
    [
        (acc[0] / n) as f32,
        (acc[1] / n) as f32,
        (acc[2] / n) as f32,
    ]
}

/// Bilinear sample at continuous pixel coordinates (pixel centers sit at
/// integer + 0.5). Neighbours outside the image contribute `fill`.
pub fn sample_bilinear(img: &Image, x: f64, y: f64, fill: [f32; 3]) -> [f32; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let ax = (fx - x0) as f32;
    let ay = (fy - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let fetch = |xi: i64, yi: i64| -> [f32; 3] {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            fill
        } else {
            img.get_pixel(xi as u32, yi as u32).0
        }
    };
    let p00 = fetch(x0, y0);
    let p10 = fetch(x0 + 1, y0);
    let p01 = fetch(x0, y0 + 1);
    let p11 = fetch(x0 + 1, y0 + 1);
    let mut out = [0f32; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - ax) + p10[c] * ax;
        let bottom = p01[c] * (1.0 - ax) + p11[c] * ax;
        out[c] = top * (1.0 - ay) + bottom * ay;
    }
    out
}

pub fn resize(img: &Image, width: u32, height: u32) -> Image {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    image::imageops::resize(img, width, height, image::imageops::FilterType::Triangle)
}

/// Stacks equally sized images into a `[B, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| GladError::Input("no images to stack".into()))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(GladError::Shape(format!(
                "cannot stack {}x{} with {}x{}",
                img.width(),
                img.height(),
                w,
                h
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels().map(|p| p.0[c] - 0.5));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

pub fn image_to_tensor(img: &Image, dtype: DType, device: &Device) -> Result<Tensor> {
    images_to_tensor(&[img], dtype, device)
}

/// Inverse of [`image_to_tensor`] for a `[1, 3, H, W]` or `[3, H, W]` tensor;
/// values are clamped to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let t = if t.rank() == 4 {
        t.squeeze(0)?
    } else {
        t.clone()
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(GladError::Shape(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    let mut img = Image::new(w as u32, h as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        for ch in 0..3 {
            p.0[ch] = (data[ch * plane + i] + 0.5).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Side-by-side montage of equally tall images.
pub fn hconcat(images: &[&Image]) -> Image {
    let height = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let width: u32 = images.iter().map(|i| i.width()).sum();
    let mut out = Image::new(width, height);
    let mut offset = 0;
    for img in images {
        image::imageops::replace(&mut out, *img, offset as i64, 0);
        offset += img.width();
    }
    out
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    let n = (a.width() * a.height() * 3) as f64;
    a.pixels()
        .zip(b.pixels())
        .map(|(p, q)| {
            (0..3)
                .map(|c| ((p.0[c] - q.0[c]) as f64).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

pub fn psnr(a: &Image, b: &Image) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_pixels() {
        let mut img = blank(5, 3, [0.2, 0.4, 0.6]);
        img.put_pixel(1, 2, Rgb([1.0, 0.0, 0.5]));
        let t = image_to_tensor(&img, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 5]);
        let back = tensor_to_image(&t).unwrap();
        assert!(mse(&img, &back) < 1e-12);
    }

    #[test]
    fn bilinear_at_pixel_center_is_exact() {
        let mut img = blank(4, 4, [0.0; 3]);
        img.put_pixel(2, 1, Rgb([1.0, 0.5, 0.25]));
        assert_eq!(sample_bilinear(&img, 2.5, 1.5, [0.0; 3]), [1.0, 0.5, 0.25]);
        // halfway between two pixels
        let v = sample_bilinear(&img, 3.0, 1.5, [0.0; 3]);
        assert!((v[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn out_of_frame_uses_fill() {
        let img = blank(2, 2, [0.3; 3]);
        assert_eq!(sample_bilinear(&img, -10.0, -10.0, [0.9; 3]), [0.9; 3]);
    }
}
