use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::ArrayView3;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles `(C, H, W)` cells row-major into a `rows × cols` PNG without padding.
pub fn write_grid(path: &Path, cells: &[ArrayView3<f32>], cols: usize) -> image::ImageResult<()> {
    let (c, h, w) = cells[0].dim();
    let rows = cells.len().div_ceil(cols);
    let (gw, gh) = ((cols * w) as u32, (rows * h) as u32);
    let origin = |i: usize| ((i % cols) * w, (i / cols) * h);
    if c == 3 {
        let mut img: RgbImage = ImageBuffer::new(gw, gh);
        for (i, cell) in cells.iter().enumerate() {
            let (x0, y0) = origin(i);
            for y in 0..h {
                for x in 0..w {
                    let px = Rgb([quantize(cell[[0, y, x]]), quantize(cell[[1, y, x]]), quantize(cell[[2, y, x]])]);
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, px);
                }
            }
        }
        img.save(path)
    } else {
        let mut img: GrayImage = ImageBuffer::new(gw, gh);
        for (i, cell) in cells.iter().enumerate() {
            let (x0, y0) = origin(i);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel((x0 + x) as u32, (y0 + y) as u32, Luma([quantize(cell[[0, y, x]])]));
                }
            }
        }
        img.save(path)
    }
}
