//! Canny edges, then a 3x3 dilation, then a wide Gaussian blur.

use super::{to_grayscale, RasterImage};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    /// Hysteresis thresholds on the Sobel magnitude, scaled so that a unit
    /// step edge has magnitude 1.
    pub canny_low: f64,
    pub canny_high: f64,
    pub dilate_kernel: usize,
    pub dilate_iterations: usize,
    pub blur_size: usize,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            canny_low: 0.1,
            canny_high: 0.3,
            dilate_kernel: 3,
            dilate_iterations: 1,
            blur_size: 13,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.canny_low < self.canny_high) {
            return Err(format!(
                "canny_low {} must be below canny_high {}",
                self.canny_low, self.canny_high
            ));
        }
        if self.dilate_kernel % 2 == 0 {
            return Err(format!("dilate_kernel {} must be odd", self.dilate_kernel));
        }
        if self.blur_size % 2 == 0 {
            return Err(format!("blur_size {} must be odd", self.blur_size));
        }
        Ok(())
    }

    /// Blur sigma derived from the kernel size (`size / 6`).
    pub fn blur_sigma(&self) -> f64 {
        self.blur_size as f64 / 6.0
    }
}

/// Binary Canny edge map (values 0 or 1) of the grayscale version of `img`.
///
/// Sobel gradients with clamped borders, non-maximum suppression along four
/// quantized directions and 8-connected hysteresis.
pub fn canny_edges(img: &RasterImage, low: f64, high: f64) -> RasterImage {
    let gray = to_grayscale(img);
    let (w, h) = (gray.width(), gray.height());
    let px = |x: isize, y: isize| {
        gray.get(
            x.clamp(0, w as isize - 1) as usize,
            y.clamp(0, h as isize - 1) as usize,
            0,
        )
    };

    let mut mag = vec![0.0; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(x + 1, y - 1) + 2.0 * px(x + 1, y) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x - 1, y) + px(x - 1, y + 1));
            let gy = (px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1))
                - (px(x - 1, y - 1) + 2.0 * px(x, y - 1) + px(x + 1, y - 1));
            let (gx, gy) = (gx / 4.0, gy / 4.0);
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            // 0: horizontal gradient, 1: 45 deg, 2: vertical, 3: 135 deg
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m < low {
                continue;
            }
            let (dx, dy) = match dir[i] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            // Ties go to the pixel on the negative side so plateaus still yield a line.
            if m > at(x - dx, y - dy) && m >= at(x + dx, y + dy) {
                thin[i] = m;
            }
        }
    }

    let mut out = vec![0.0; w * h];
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| thin[i] >= high).collect();
    for &i in &queue {
        out[i] = 1.0;
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= low {
                    out[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    RasterImage::from_parts_unchecked(w, h, 1, out)
}

/// Grayscale max filter with a square `kernel`, applied `iterations` times.
pub fn dilate(img: &RasterImage, kernel: usize, iterations: usize) -> RasterImage {
    let gray = to_grayscale(img);
    let (w, h) = (gray.width(), gray.height());
    let r = (kernel / 2) as isize;
    let mut cur = gray.data().to_vec();
    for _ in 0..iterations {
        let mut next = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut m: f64 = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                            m = m.max(cur[ny as usize * w + nx as usize]);
                        }
                    }
                }
                next[y as usize * w + x as usize] = m;
            }
        }
        cur = next;
    }
    RasterImage::from_parts_unchecked(w, h, 1, cur)
}

pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with reflected borders; works per channel.
pub fn gaussian_blur(img: &RasterImage, size: usize, sigma: f64) -> RasterImage {
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * n;
        let mut i = i.rem_euclid(period);
        if i >= n {
            i = period - 1 - i;
        }
        i as usize
    };
    let mut tmp = vec![0.0; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - r, w);
                    acc += kv * img.get(sx, y, c);
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - r, h);
                    acc += kv * tmp[(sy * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    RasterImage::from_parts_unchecked(w, h, ch, out)
}

/// Edge map used by the edge-aware rewards: Canny, dilation, Gaussian blur.
/// Returns a single-channel image in `[0, 1]`.
pub fn canny_pipeline(img: &RasterImage, p: &EdgeParams) -> RasterImage {
    let edges = canny_edges(img, p.canny_low, p.canny_high);
    let thick = dilate(&edges, p.dilate_kernel, p.dilate_iterations);
    gaussian_blur(&thick, p.blur_size, p.blur_sigma())
}
