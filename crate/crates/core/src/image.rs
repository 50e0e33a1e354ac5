//! Planar RGB float images and the pixel-level primitives the augmentation
//! and face operations are built on.

use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image stored channel-planar (`c, y, x`), nominal range `[0, 1]`.
///
/// Normalized images (after mean/std standardization) use the same type and
/// leave the nominal range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; CHANNELS * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::new(width, height);
        for c in 0..CHANNELS {
            img.plane_mut(c).fill(rgb[c]);
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(Error::Argument(format!(
                "planar buffer has {} values, expected {}",
                data.len(),
                CHANNELS * width * height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    fn idx(&self, c: usize, x: usize, y: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[self.idx(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        let i = self.idx(c, x, y);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, x, y, v);
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer + 0.5 are *not* assumed; `(x, y)` addresses pixel `(x, y)`
    /// exactly at integer values). Outside the image, edge pixels repeat.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f32 {
        let xm = (self.width - 1) as f64;
        let ym = (self.height - 1) as f64;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        if fx == 0.0 && fy == 0.0 {
            return self.get(c, x0, y0);
        }
        let top = self.get(c, x0, y0) * (1.0 - fx) + self.get(c, x1, y0) * fx;
        let bot = self.get(c, x0, y1) * (1.0 - fx) + self.get(c, x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize with half-pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for c in 0..CHANNELS {
            for y in 0..height {
                let fy = (y as f64 + 0.5) * sy - 0.5;
                for x in 0..width {
                    let fx = (x as f64 + 0.5) * sx - 0.5;
                    out.set(c, x, y, self.sample_bilinear(c, fx, fy));
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if x0 + width > self.width || y0 + height > self.height || width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Image::new(width, height);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, x, y, self.get(c, x0 + x, y0 + y));
                }
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, self.width - 1 - x, y, self.get(c, x, y));
                }
            }
        }
        out
    }

    pub fn map_pixels(&self, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, f(self.pixel(x, y)));
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Luma (ITU-R 601), replicated into all three channels.
    pub fn grayscale(&self) -> Image {
        self.map_pixels(|p| {
            let l = luma(p);
            [l, l, l]
        })
    }

    pub fn gaussian_blur(&self, sigma: f64, kernel_size: usize) -> Image {
        let kernel = gaussian_kernel(sigma, kernel_size);
        let r = (kernel.len() / 2) as isize;
        let mut tmp = Image::new(self.width, self.height);
        let mut out = Image::new(self.width, self.height);
        let (w, h) = (self.width as isize, self.height as isize);
        // Separable, reflect padding.
        for c in 0..CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0f64;
                    for (k, kv) in kernel.iter().enumerate() {
                        let xx = reflect(x as isize + k as isize - r, w);
                        acc += kv * self.get(c, xx, y) as f64;
                    }
                    tmp.set(c, x, y, acc as f32);
                }
            }
            for y in 0..self.height {
                for x in 0..self.width {
                    let mut acc = 0.0f64;
                    for (k, kv) in kernel.iter().enumerate() {
                        let yy = reflect(y as isize + k as isize - r, h);
                        acc += kv * tmp.get(c, x, yy) as f64;
                    }
                    out.set(c, x, y, acc as f32);
                }
            }
        }
        out
    }

    /// Per-channel `(x - mean) / std`.
    pub fn normalize(&self, mean: [f32; 3], std: [f32; 3]) -> Image {
        let mut out = self.clone();
        for c in 0..CHANNELS {
            for v in out.plane_mut(c) {
                *v = (*v - mean[c]) / std[c];
            }
        }
        out
    }

    pub fn channel_mean(&self) -> [f64; 3] {
        let n = (self.width * self.height) as f64;
        let mut m = [0.0; 3];
        for (c, mc) in m.iter_mut().enumerate() {
            *mc = self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n;
        }
        m
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut out = Image::new(w as usize, h as usize);
        for (x, y, p) in img.enumerate_pixels() {
            out.set_pixel(
                x as usize,
                y as usize,
                [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0],
            );
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            let v = self.pixel(x as usize, y as usize);
            *p = image::Rgb(v.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        buf.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

fn reflect(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let size = size.max(1) | 1;
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// RGB in `[0,1]` to HSV with hue in `[0,1)`.
pub fn rgb_to_hsv(p: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    [h.rem_euclid(1.0), s, v]
}

pub fn hsv_to_rgb(p: [f32; 3]) -> [f32; 3] {
    let [h, s, v] = p;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let pp = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, pp],
        1 => [q, v, pp],
        2 => [pp, v, t],
        3 => [pp, q, v],
        4 => [t, pp, v],
        _ => [v, pp, q],
    }
}

/// Circular mean hue of the pixels selected by `mask`, ignoring
/// unsaturated pixels. Returns `None` when nothing qualifies.
pub fn mean_hue(img: &Image, mask: impl Fn(usize, usize) -> bool) -> Option<f64> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if !mask(x, y) {
                continue;
            }
            let [h, s, _] = rgb_to_hsv(img.pixel(x, y));
            if s < 0.1 {
                continue;
            }
            let a = h as f64 * std::f64::consts::TAU;
            sx += a.cos();
            sy += a.sin();
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some(sy.atan2(sx).rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU)
}

/// Shortest distance between two hues on the unit circle.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}
