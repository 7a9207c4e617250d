use std::path::Path;

use super::FeatError;

/// Side length of a model input frame.
pub const FRAME_SIZE: usize = 224;

/// Channel-first RGB tensor (`3 × 224 × 224`) with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub pixels: Vec<f32>,
}

impl FrameImage {
    pub const SHAPE: [usize; 3] = [3, FRAME_SIZE, FRAME_SIZE];
}

/// Bilinear resampling of an interleaved RGB8 image with half-pixel centers.
/// Returns interleaved RGB as `f64` in `0..=255`.
pub fn bilinear_resize(rgb: &[u8], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let coord = |o: usize, scale: f64, extent: usize| {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (extent - 1) as f64);
        let i0 = pos.floor() as usize;
        (i0, (i0 + 1).min(extent - 1), pos - i0 as f64)
    };
    let px = |x: usize, y: usize, c: usize| rgb[(y * width + x) * 3 + c] as f64;
    let mut out = Vec::with_capacity(out_w * out_h * 3);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, height);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, width);
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Resizes an interleaved RGB8 image to 224×224 and maps each channel value `x`
/// to `(x/255 − 0.5)/0.5`.
pub fn normalize_rgb8(rgb: &[u8], width: usize, height: usize) -> FrameImage {
    let resized = if width == FRAME_SIZE && height == FRAME_SIZE {
        rgb.iter().map(|&v| v as f64).collect()
    } else {
        bilinear_resize(rgb, width, height, FRAME_SIZE, FRAME_SIZE)
    };
    let plane = FRAME_SIZE * FRAME_SIZE;
    let mut pixels = vec![0f32; 3 * plane];
    for (i, px) in resized.chunks_exact(3).enumerate() {
        for c in 0..3 {
            pixels[c * plane + i] = ((px[c] / 255.0 - 0.5) / 0.5) as f32;
        }
    }
    FrameImage { pixels }
}

pub fn load_frame(path: &Path) -> Result<FrameImage, FeatError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => FeatError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => FeatError::Image {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(normalize_rgb8(rgb.as_raw(), w as usize, h as usize))
}
