use super::RasterImage;

/// Separable triangle-filter resampling. Upscaling is plain bilinear
/// interpolation; when shrinking, the filter widens with the scale factor so
/// every source pixel contributes (the usual antialiased "bilinear" resize).
pub fn resample_bilinear(img: &RasterImage, width: usize, height: usize) -> RasterImage {
    assert!(width > 0 && height > 0, "resample target must be non-empty");
    if width == img.width() && height == img.height() {
        return img.clone();
    }
    let ch = img.channels();
    let xw = axis_weights(img.width(), width);
    let yw = axis_weights(img.height(), height);

    // Horizontal pass: height(src) x width(dst).
    let mut tmp = vec![0.0; img.height() * width * ch];
    for y in 0..img.height() {
        for (x, taps) in xw.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0;
                for &(sx, w) in taps {
                    acc += w * img.get(sx, y, c);
                }
                tmp[(y * width + x) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; width * height * ch];
    for (y, taps) in yw.iter().enumerate() {
        for x in 0..width {
            for c in 0..ch {
                let mut acc = 0.0;
                for &(sy, w) in taps {
                    acc += w * tmp[(sy * width + x) * ch + c];
                }
                out[(y * width + x) * ch + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    RasterImage::from_parts_unchecked(width, height, ch, out)
}

fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5 - center) / support).abs();
                    (j, (1.0 - d).max(0.0))
                })
                .filter(|&(_, w)| w > 0.0)
                .collect();
            if taps.is_empty() {
                // Sampling point sits exactly between pixels at the border.
                taps.push((((center - 0.5).round().max(0.0) as usize).min(src - 1), 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Rescales so that the shorter side equals `target`, keeping the aspect ratio.
pub fn resize_shortest_side(img: &RasterImage, target: usize) -> RasterImage {
    assert!(target >= 1, "target side must be at least one pixel");
    let (w, h) = (img.width(), img.height());
    let (nw, nh) = if w <= h {
        (
            target,
            ((h as f64 * target as f64 / w as f64).round() as usize).max(1),
        )
    } else {
        (
            ((w as f64 * target as f64 / h as f64).round() as usize).max(1),
            target,
        )
    };
    resample_bilinear(img, nw, nh)
}
