//! Grayscale rasters, binary masks, and the pixel-level helpers the
//! generator and hard transforms are built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Grayscale image with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Raster { width, height, data: vec![v; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Binary mask, 0 = background, 1 = foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![0; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn fg_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Inclusive bounding box (x0, y0, x1, y1) of the foreground.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    /// Foreground centroid in pixel coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) {
                    n += 1;
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::empty(self.width, self.height);
        let r = radius as isize;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                'probe: for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (x + dx, y + dy);
                        if sx >= 0
                            && sy >= 0
                            && (sx as usize) < self.width
                            && (sy as usize) < self.height
                            && self.at(sx as usize, sy as usize)
                        {
                            out.set(x as usize, y as usize, true);
                            break 'probe;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Mean of `img` over the set pixels of `mask`; None when the mask is empty.
pub fn masked_mean(img: &Raster, mask: &Mask) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, &m) in img.data.iter().zip(&mask.data) {
        if m != 0 {
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean of `img` over the complement of `mask`.
pub fn background_mean(img: &Raster, mask: &Mask) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, &m) in img.data.iter().zip(&mask.data) {
        if m == 0 {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        0.5
    } else {
        sum / n as f64
    }
}

/// Mean over the ring `dilate(mask, radius) \ mask` — the local background
/// surrounding the target. Falls back to the full complement when the ring
/// is empty.
pub fn ring_mean(img: &Raster, mask: &Mask, radius: usize) -> f64 {
    let dilated = mask.dilate(radius);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..mask.data.len() {
        if dilated.data[i] != 0 && mask.data[i] == 0 {
            sum += img.data[i];
            n += 1;
        }
    }
    if n == 0 {
        background_mean(img, mask)
    } else {
        sum / n as f64
    }
}

/// Box blur with an odd kernel, normalizing by the in-bounds tap count so
/// constant inputs are fixed points.
pub fn box_blur(img: &Raster, half: usize) -> Raster {
    let (w, h) = (img.width, img.height);
    let r = half as isize;
    let mut out = Raster::filled(w, h, 0.0);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            let mut n = 0usize;
            for dy in -r..=r {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let sx = x + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    sum += img.at(sx as usize, sy as usize);
                    n += 1;
                }
            }
            out.set(x as usize, y as usize, sum / n as f64);
        }
    }
    out
}

/// Per-pixel uniform noise smoothed by two 3×3 box-blur passes — the
/// texture primitive behind every synthetic background.
pub fn value_noise(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Raster {
    let mut img = Raster::filled(width, height, 0.0);
    for v in &mut img.data {
        *v = rng.random::<f64>();
    }
    box_blur(&box_blur(&img, 1), 1)
}
