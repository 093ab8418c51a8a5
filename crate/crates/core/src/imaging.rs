//! Minimal float image type with resampling, cropping, padding and PNG I/O.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height x width x channels` image, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub const PAD_GRAY: f64 = 0.5;

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidData(format!(
                "{height}x{width}x{channels} image from {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Area-averaging resample to `new_h x new_w`.
    ///
    /// Each output pixel averages the input over its exact footprint, so
    /// downscaling by an integer factor is a plain block mean.
    pub fn resize(&self, new_h: usize, new_w: usize) -> Image {
        if new_h == self.height && new_w == self.width {
            return self.clone();
        }
        let c = self.channels;
        let mut out = Image::filled(new_h, new_w, c, 0.0);
        let sy = self.height as f64 / new_h as f64;
        let sx = self.width as f64 / new_w as f64;
        let wy = footprint_weights(self.height, new_h, sy);
        let wx = footprint_weights(self.width, new_w, sx);
        let mut acc = vec![0.0; c];
        for (oy, ys) in wy.iter().enumerate() {
            for (ox, xs) in wx.iter().enumerate() {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut total = 0.0;
                for &(iy, wyv) in ys {
                    for &(ix, wxv) in xs {
                        let w = wyv * wxv;
                        total += w;
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += w * self.get(iy, ix, ch);
                        }
                    }
                }
                for (ch, a) in acc.iter().enumerate() {
                    out.set(oy, ox, ch, a / total);
                }
            }
        }
        out
    }

    /// Pixel-space crop `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        assert!(
            y0 + h <= self.height && x0 + w <= self.width,
            "crop out of bounds"
        );
        let c = self.channels;
        let mut data = Vec::with_capacity(h * w * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[start..start + w * c]);
        }
        Image {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    /// Pads on the bottom or right edge to a square with `value`.
    pub fn pad_to_square(&self, value: f64) -> Image {
        let s = self.height.max(self.width);
        let mut out = Image::filled(s, s, self.channels, value);
        out.paste(self, 0, 0);
        out
    }

    /// Copies `src` into `self` with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Image, y0: usize, x0: usize) {
        assert_eq!(src.channels, self.channels);
        let c = self.channels;
        for y in 0..src.height.min(self.height.saturating_sub(y0)) {
            let w = src.width.min(self.width.saturating_sub(x0));
            let d = ((y0 + y) * self.width + x0) * c;
            let s = y * src.width * c;
            self.data[d..d + w * c].copy_from_slice(&src.data[s..s + w * c]);
        }
    }

    /// Pads to a square with gray on the bottom/right, then resamples to `size x size`.
    pub fn to_model_input(&self, size: usize) -> Image {
        let sq = if self.is_square() {
            self.clone()
        } else {
            self.pad_to_square(PAD_GRAY)
        };
        sq.resize(size, size)
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::Image(format!("cannot encode {c} channels as PNG"))),
        };
        let mut out = Vec::new();
        image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(&mut out),
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out)
    }

    /// Decodes PNG bytes into a 3-channel image.
    pub fn from_png(bytes: &[u8]) -> Result<Image> {
        let img = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
            .decode()
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect();
        Image::new(h as usize, w as usize, 3, data)
    }
}

/// For each output index, the input indices it covers and their overlap weights.
fn footprint_weights(n_in: usize, n_out: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o as f64 + 1.0) * scale;
            let mut ws = Vec::new();
            let start = lo.floor() as usize;
            let end = (hi.ceil() as usize).min(n_in);
            for i in start..end {
                let w = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if w > 0.0 {
                    ws.push((i, w));
                }
            }
            if ws.is_empty() {
                ws.push((start.min(n_in - 1), 1.0));
            }
            ws
        })
        .collect()
}
