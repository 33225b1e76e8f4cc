//! Pixel fidelity metrics and best-of-n selection.

use crate::raster::{gaussian_kernel, RasterImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("length lists differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no candidates")]
    Empty,
}

fn check_dims(a: &RasterImage, b: &RasterImage) -> Result<(), MetricError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    Ok(())
}

/// Mean squared difference over all elements, times 100. A grayscale image
/// compared with an RGB one is broadcast to three channels.
pub fn mse(a: &RasterImage, b: &RasterImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (a, b) = if a.channels() == b.channels() {
        (a.clone(), b.clone())
    } else {
        (a.to_rgb(), b.to_rgb())
    };
    let n = a.len() as f64;
    Ok(100.0
        * a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
        / n)
}

/// Mean structural similarity of the grayscale images.
///
/// Local statistics use an 11x11 Gaussian window (sigma 1.5) and only
/// windows that fit inside the image are averaged. Images smaller than the
/// window use the largest odd window that fits.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (ga, gb) = (a.to_grayscale(), b.to_grayscale());
    let (w, h) = (ga.width(), ga.height());
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let (ow, oh) = (w - size + 1, h - size + 1);

    // Separable valid filtering of x, y, x^2, y^2, xy.
    let x = ga.data();
    let y = gb.data();
    let fields: [Vec<f64>; 5] = [
        x.to_vec(),
        y.to_vec(),
        x.iter().map(|v| v * v).collect(),
        y.iter().map(|v| v * v).collect(),
        x.iter().zip(y).map(|(p, q)| p * q).collect(),
    ];
    let filtered: Vec<Vec<f64>> = fields
        .iter()
        .map(|f| {
            let mut rows = vec![0.0; h * ow];
            for r in 0..h {
                for c in 0..ow {
                    rows[r * ow + c] = k
                        .iter()
                        .enumerate()
                        .map(|(t, kv)| kv * f[r * w + c + t])
                        .sum();
                }
            }
            let mut out = vec![0.0; oh * ow];
            for r in 0..oh {
                for c in 0..ow {
                    out[r * ow + c] = k
                        .iter()
                        .enumerate()
                        .map(|(t, kv)| kv * rows[(r + t) * ow + c])
                        .sum();
                }
            }
            out
        })
        .collect();

    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (mx, my) = (filtered[0][i], filtered[1][i]);
        let vx = filtered[2][i] - mx * mx;
        let vy = filtered[3][i] - my * my;
        let cxy = filtered[4][i] - mx * my;
        total +=
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// Mean of `gt - pred`; positive when predictions are shorter.
pub fn code_efficiency(gt_lens: &[usize], pred_lens: &[usize]) -> Result<f64, MetricError> {
    if gt_lens.len() != pred_lens.len() {
        return Err(MetricError::LengthMismatch(gt_lens.len(), pred_lens.len()));
    }
    if gt_lens.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(gt_lens
        .iter()
        .zip(pred_lens)
        .map(|(&g, &p)| g as f64 - p as f64)
        .sum::<f64>()
        / gt_lens.len() as f64)
}

/// Index of the candidate with the lowest [`mse`] against `target`; ties go to the lowest index.
pub fn best_of_n(candidates: &[RasterImage], target: &RasterImage) -> Result<usize, MetricError> {
    let scores = candidates
        .iter()
        .map(|c| mse(c, target))
        .collect::<Result<Vec<_>, _>>()?;
    argmin(&scores).ok_or(MetricError::Empty)
}

pub(crate) fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}
