//! PNG conversion between `[3, H, W]` tensors in `[0, 1]` and 8-bit RGB.

use std::path::Path;

use convrender_autograd::Tensor;
use image::{Rgb, RgbImage};

use crate::error::{io_err, validation, Error, Result};

/// Writes an RGB image, clamping to `[0, 1]` and rounding to 8 bits.
pub fn save_png(img: &Tensor, path: &Path) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(validation(format!("save_png needs [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            let v = d[c * h * w + y as usize * w + x as usize];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    out.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}
