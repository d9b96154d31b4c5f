//! RGB images as `[height, width, 3]` tensors with values in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn dims(img: &Tensor) -> (usize, usize) {
    (img.shape()[0], img.shape()[1])
}

pub fn check_rgb(img: &Tensor) -> Result<()> {
    if img.ndim() != 3 || img.shape()[2] != 3 {
        return Err(Error::Argument(format!("expected an [H, W, 3] image, got {:?}", img.shape())));
    }
    Ok(())
}

pub fn solid(height: usize, width: usize, rgb: [f64; 3]) -> Tensor {
    let mut data = Vec::with_capacity(height * width * 3);
    for _ in 0..height * width {
        data.extend_from_slice(&rgb);
    }
    Tensor::from_vec(&[height, width, 3], data)
}

pub fn pixel(img: &Tensor, y: usize, x: usize) -> [f64; 3] {
    let w = img.shape()[1];
    let o = (y * w + x) * 3;
    let d = img.data();
    [d[o], d[o + 1], d[o + 2]]
}

pub fn set_pixel(img: &mut Tensor, y: usize, x: usize, rgb: [f64; 3]) {
    let w = img.shape()[1];
    let o = (y * w + x) * 3;
    img.data_mut()[o..o + 3].copy_from_slice(&rgb);
}

pub fn crop(img: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let (_, width) = dims(img);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in y0..y0 + h {
        let o = (y * width + x0) * 3;
        data.extend_from_slice(&img.data()[o..o + w * 3]);
    }
    Tensor::from_vec(&[h, w, 3], data)
}

/// Side-by-side concatenation along width.
pub fn hconcat(left: &Tensor, right: &Tensor) -> Result<Tensor> {
    crate::numerics::autograd::concat(&[left, right], 1)
}

pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w) = dims(img);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            set_pixel(&mut out, y, x, pixel(img, y, w - 1 - x));
        }
    }
    out
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (h, w) = dims(img);
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let mut out = Tensor::zeros(&[out_h, out_w, 3]);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let (a, b, c, d) = (pixel(img, y0, x0), pixel(img, y0, x1), pixel(img, y1, x0), pixel(img, y1, x1));
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                let top = a[k] * (1.0 - tx) + b[k] * tx;
                let bot = c[k] * (1.0 - tx) + d[k] * tx;
                rgb[k] = top * (1.0 - ty) + bot * ty;
            }
            set_pixel(&mut out, oy, ox, rgb);
        }
    }
    out
}

pub fn to_rgb8(img: &Tensor) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    check_rgb(img)?;
    let (h, w) = dims(img);
    let buf = image::RgbImage::from_raw(w as u32, h as u32, to_rgb8(img))
        .ok_or_else(|| Error::Argument("image buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Tensor::new(&[h as usize, w as usize, 3], data)
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    -10.0 * mse.max(1e-20).log10()
}
