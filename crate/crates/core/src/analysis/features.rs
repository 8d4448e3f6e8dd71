//! Fixed 22-dimensional descriptor of an RGB image with values in [0, 1].
//!
//! Order:
//! - 0..12: per channel (R, G, B) mean, std, min, max
//! - 12, 13: grayscale mean, std
//! - 14, 15: Sobel gradient magnitude mean, std
//! - 16: edge density, fraction of pixels with gradient magnitude > 0.1
//! - 17, 18: Laplacian mean absolute value, variance
//! - 19: entropy in bits of a 32-bin grayscale histogram
//! - 20, 21: mean of per-row variances, mean of per-column variances
//!
//! Grayscale is 0.299 R + 0.587 G + 0.114 B. Filters replicate the border.
//! Sobel responses are divided by 8 so a unit step has magnitude 0.5.
//! Standard deviations and variances use the population (1/n) form.

use serde::{Deserialize, Serialize};

use crate::error::{KpeError, Result};

pub const NUM_FEATURES: usize = 22;

#[rustfmt::skip]
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "r_mean", "r_std", "r_min", "r_max",
    "g_mean", "g_std", "g_min", "g_max",
    "b_mean", "b_std", "b_min", "b_max",
    "gray_mean", "gray_std",
    "grad_mean", "grad_std",
    "edge_density",
    "laplacian_mean_abs", "laplacian_var",
    "hist_entropy",
    "row_var_mean", "col_var_mean",
];

const EDGE_THRESHOLD: f64 = 0.1;
const HIST_BINS: usize = 32;

/// Row-major H×W×C image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(KpeError::validation(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Image {
            height,
            width,
            channels: 3,
            data,
        }
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

struct Plane<'a> {
    h: usize,
    w: usize,
    v: &'a [f64],
}

impl Plane<'_> {
    fn get(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x]
    }
}

pub fn extract_features(image: &Image) -> Result<[f64; NUM_FEATURES]> {
    if image.channels != 3 {
        return Err(KpeError::validation(format!(
            "feature extraction needs 3 channels, got {}",
            image.channels
        )));
    }
    let (h, w) = (image.height, image.width);
    if h < 8 || w < 8 {
        return Err(KpeError::validation(format!("image must be at least 8x8, got {h}x{w}")));
    }
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(KpeError::validation("image contains non-finite values"));
    }
    let mut out = [0.0; NUM_FEATURES];
    for c in 0..3 {
        let vals: Vec<f64> = (0..h * w).map(|i| image.data[i * 3 + c]).collect();
        let (m, s) = mean_std(&vals);
        out[4 * c] = m;
        out[4 * c + 1] = s;
        out[4 * c + 2] = vals.iter().copied().fold(f64::INFINITY, f64::min);
        out[4 * c + 3] = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }

    let gray: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) + 0.114 * image.at(y, x, 2))
        .collect();
    let (gm, gs) = mean_std(&gray);
    out[12] = gm;
    out[13] = gs;

    let p = Plane { h, w, v: &gray };
    let mut grad = Vec::with_capacity(h * w);
    let mut lap = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let g = |dy: isize, dx: isize| p.get(y + dy, x + dx);
            let gx = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1)) - (g(-1, -1) + 2.0 * g(0, -1) + g(1, -1));
            let gy = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1)) - (g(-1, -1) + 2.0 * g(-1, 0) + g(-1, 1));
            grad.push((gx * gx + gy * gy).sqrt() / 8.0);
            lap.push(g(-1, 0) + g(1, 0) + g(0, -1) + g(0, 1) - 4.0 * g(0, 0));
        }
    }
    let (grad_m, grad_s) = mean_std(&grad);
    out[14] = grad_m;
    out[15] = grad_s;
    out[16] = grad.iter().filter(|&&g| g > EDGE_THRESHOLD).count() as f64 / grad.len() as f64;
    out[17] = lap.iter().map(|v| v.abs()).sum::<f64>() / lap.len() as f64;
    out[18] = mean_std(&lap).1.powi(2);

    let mut hist = [0usize; HIST_BINS];
    for &g in &gray {
        let b = ((g.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        hist[b] += 1;
    }
    let n = gray.len() as f64;
    out[19] = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.log2()
        })
        .sum::<f64>()
        .max(0.0);

    let row_var = (0..h).map(|y| mean_std(&gray[y * w..(y + 1) * w]).1.powi(2)).sum::<f64>() / h as f64;
    let col_var = (0..w)
        .map(|x| {
            let col: Vec<f64> = (0..h).map(|y| gray[y * w + x]).collect();
            mean_std(&col).1.powi(2)
        })
        .sum::<f64>()
        / w as f64;
    out[20] = row_var;
    out[21] = col_var;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mathcore::RngStream;

    #[test]
    fn constant_gray_image() {
        let img = Image::from_fn(12, 10, |_, _| [0.5; 3]);
        let f = extract_features(&img).unwrap();
        for c in 0..3 {
            assert_eq!(f[4 * c], 0.5);
            assert_eq!(f[4 * c + 1], 0.0);
        }
        for i in 13..NUM_FEATURES {
            assert!(f[i].abs() < 1e-12, "{} = {}", FEATURE_NAMES[i], f[i]);
        }
    }

    #[test]
    fn checkerboard() {
        let img = Image::from_fn(16, 16, |y, x| if (y / 4 + x / 4) % 2 == 0 { [1.0; 3] } else { [0.0; 3] });
        let f = extract_features(&img).unwrap();
        assert!(f[16] > 0.5, "edge density {}", f[16]);
        assert!((f[20] - f[21]).abs() < 1e-12);
        assert!(f[20] > 0.0);
    }

    #[test]
    fn noise_has_near_maximal_entropy() {
        let mut rng = RngStream::new(1, 0);
        let data: Vec<f64> = (0..64 * 64)
            .flat_map(|_| {
                let v = rng.uniform();
                [v, v, v]
            })
            .collect();
        let f = extract_features(&Image::new(64, 64, 3, data).unwrap()).unwrap();
        assert!(f.iter().all(|v| v.is_finite()));
        assert!(f[19] > 4.9 && f[19] <= 5.0, "entropy {}", f[19]);
    }

    #[test]
    fn channel_and_size_checks() {
        let two = Image::new(8, 8, 2, vec![0.0; 128]).unwrap();
        assert!(extract_features(&two).is_err());
        let small = Image::from_fn(4, 8, |_, _| [0.1; 3]);
        assert!(extract_features(&small).is_err());
        assert!(Image::new(8, 8, 3, vec![0.0; 10]).is_err());
    }
}
