//! No-reference underwater quality scores: UCIQE and the UIQM family.

use crate::error::Result;
use crate::metrics::edges::{channel, check_image, sobel, Plane};
use crate::tensor::{Scalar, Tensor};

/// UCIQE weights for chroma spread, luminance contrast and mean saturation.
pub const UCIQE_WEIGHTS: [f64; 3] = [0.4680, 0.2745, 0.2576];

/// UIQM weights for colourfulness, sharpness and contrast.
pub const UIQM_WEIGHTS: [f64; 3] = [0.0282, 0.2953, 3.5753];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UiqmCombination {
    /// `c1 uicm + c2 uism + c3 uiconm`.
    #[default]
    Linear,
    /// `(c1 uicm) (c2 uism) (c3 uiconm)`.
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityOptions {
    pub uciqe_weights: [f64; 3],
    pub uiqm_weights: [f64; 3],
    pub uiqm_combination: UiqmCombination,
    /// Side of the square blocks used by the sharpness and contrast terms.
    pub block: usize,
    /// Fraction trimmed from each tail for the colourfulness means.
    pub trim: f64,
}

impl Default for QualityOptions {
    fn default() -> Self {
        QualityOptions {
            uciqe_weights: UCIQE_WEIGHTS,
            uiqm_weights: UIQM_WEIGHTS,
            uiqm_combination: UiqmCombination::Linear,
            block: 8,
            trim: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Uiqm {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub uiqm: f64,
}

/// CIE L*a*b* (D65) of an sRGB triple in [0, 1], with L* in [0, 100].
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let [r, g, b] = rgb.map(lin);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn rgb_pixels<T: Scalar>(img: &Tensor<T>) -> Vec<[f64; 3]> {
    let planes: Vec<Plane> = if img.shape()[0] == 1 {
        vec![channel(img, 0); 3]
    } else {
        (0..3).map(|c| channel(img, c)).collect()
    };
    (0..planes[0].data.len())
        .map(|i| [planes[0].data[i], planes[1].data[i], planes[2].data[i]])
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Weighted sum of chroma standard deviation, luminance contrast (mean of
/// the brightest 1% minus mean of the darkest 1%) and mean CIE saturation
/// `C / sqrt(C^2 + L^2)`. Lightness and chroma are scaled by 1/100.
pub fn uciqe<T: Scalar>(img: &Tensor<T>, weights: [f64; 3]) -> Result<f64> {
    check_image("uciqe", img)?;
    let lab: Vec<[f64; 3]> = rgb_pixels(img).into_iter().map(srgb_to_lab).collect();
    let l: Vec<f64> = lab.iter().map(|p| p[0] / 100.0).collect();
    let chroma: Vec<f64> = lab.iter().map(|p| p[1].hypot(p[2]) / 100.0).collect();

    let mu_c = mean(&chroma);
    let sigma_c = (chroma.iter().map(|c| (c - mu_c).powi(2)).sum::<f64>() / chroma.len() as f64).sqrt();

    let mut sorted = l.clone();
    sorted.sort_by(f64::total_cmp);
    let k = ((sorted.len() as f64 * 0.01).round() as usize).max(1);
    let contrast = mean(&sorted[sorted.len() - k..]) - mean(&sorted[..k]);

    let sat: Vec<f64> = l
        .iter()
        .zip(&chroma)
        .map(|(&l, &c)| {
            let d = c.hypot(l);
            if d == 0.0 {
                0.0
            } else {
                c / d
            }
        })
        .collect();

    Ok(weights[0] * sigma_c + weights[1] * contrast + weights[2] * mean(&sat))
}

/// Mean of `v` after sorting and dropping `ceil(trim n)` values from the
/// bottom and `floor(trim n)` from the top.
pub fn trimmed_mean(v: &[f64], trim: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let lo = (trim * n as f64).ceil() as usize;
    let hi = (trim * n as f64).floor() as usize;
    if lo + hi >= n {
        return mean(&s);
    }
    mean(&s[lo..n - hi])
}

/// Colourfulness from the red-green and yellow-blue opponent channels on
/// the 0..255 scale.
pub fn uicm<T: Scalar>(img: &Tensor<T>, trim: f64) -> Result<f64> {
    check_image("uicm", img)?;
    let px = rgb_pixels(img);
    let rg: Vec<f64> = px.iter().map(|p| 255.0 * (p[0] - p[1])).collect();
    let yb: Vec<f64> = px.iter().map(|p| 255.0 * ((p[0] + p[1]) / 2.0 - p[2])).collect();
    let stats = |v: &[f64]| {
        let mu = trimmed_mean(v, trim);
        let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
        (mu, var)
    };
    let (mu_rg, var_rg) = stats(&rg);
    let (mu_yb, var_yb) = stats(&yb);
    Ok(-0.0268 * mu_rg.hypot(mu_yb) + 0.1586 * (var_rg + var_yb).sqrt())
}

/// Visits the full `block x block` tiles of a plane (partial tiles at the
/// right and bottom are dropped) and returns `(max, min)` of each.
fn block_extrema(planes: &[&Plane], block: usize) -> Vec<(f64, f64)> {
    let (h, w) = (planes[0].height, planes[0].width);
    let b = block.max(1).min(h).min(w);
    let mut out = Vec::new();
    for by in 0..h / b {
        for bx in 0..w / b {
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for p in planes {
                for y in by * b..(by + 1) * b {
                    for &v in &p.data[y * w + bx * b..y * w + (bx + 1) * b] {
                        hi = hi.max(v);
                        lo = lo.min(v);
                    }
                }
            }
            out.push((hi, lo));
        }
    }
    out
}

/// Measure of enhancement: `2 / k * sum ln(max / min)` over blocks, where
/// blocks with a zero extreme contribute nothing.
fn eme(p: &Plane, block: usize) -> f64 {
    let blocks = block_extrema(&[p], block);
    let k = blocks.len() as f64;
    let total: f64 = blocks
        .iter()
        .filter(|(hi, lo)| *hi > 0.0 && *lo > 0.0)
        .map(|(hi, lo)| (hi / lo).ln())
        .sum();
    2.0 / k * total
}

/// Sharpness: per channel, the Sobel magnitude (rescaled to peak 255)
/// multiplied by the channel itself, scored by block EME and combined with
/// luma weights.
pub fn uism<T: Scalar>(img: &Tensor<T>, block: usize) -> Result<f64> {
    check_image("uism", img)?;
    let weights = [0.299, 0.587, 0.114];
    let mut total = 0.0;
    for (c, wc) in weights.iter().enumerate() {
        let p = channel(img, if img.shape()[0] == 1 { 0 } else { c });
        let (gx, gy) = sobel(&p);
        let mag: Vec<f64> = gx.data.iter().zip(&gy.data).map(|(a, b)| a.hypot(*b)).collect();
        let peak = mag.iter().cloned().fold(0.0, f64::max);
        let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
        let edge = Plane {
            height: p.height,
            width: p.width,
            data: mag.iter().zip(&p.data).map(|(m, v)| m * scale * v * 255.0).collect(),
        };
        total += wc * eme(&edge, block);
    }
    Ok(total)
}

/// Contrast: block log-AMEE over all channels jointly, on the 0..255 scale.
/// Each block contributes `r ln r` with `r = (max - min) / (max + min)`;
/// the sum is scaled by `-1 / k`.
pub fn uiconm<T: Scalar>(img: &Tensor<T>, block: usize) -> Result<f64> {
    check_image("uiconm", img)?;
    let planes: Vec<Plane> = (0..img.shape()[0])
        .map(|c| {
            let mut p = channel(img, c);
            p.data.iter_mut().for_each(|v| *v *= 255.0);
            p
        })
        .collect();
    let refs: Vec<&Plane> = planes.iter().collect();
    let blocks = block_extrema(&refs, block);
    let k = blocks.len() as f64;
    let total: f64 = blocks
        .iter()
        .filter_map(|&(hi, lo)| {
            let (top, bot) = (hi - lo, hi + lo);
            (top > 0.0 && bot > 0.0).then(|| {
                let r = top / bot;
                r * r.ln()
            })
        })
        .sum();
    Ok(-total / k)
}

pub fn combine_uiqm(uicm: f64, uism: f64, uiconm: f64, weights: [f64; 3], mode: UiqmCombination) -> f64 {
    let [c1, c2, c3] = weights;
    match mode {
        UiqmCombination::Linear => c1 * uicm + c2 * uism + c3 * uiconm,
        UiqmCombination::Product => (c1 * uicm) * (c2 * uism) * (c3 * uiconm),
    }
}

pub fn uiqm<T: Scalar>(img: &Tensor<T>, opts: &QualityOptions) -> Result<Uiqm> {
    let uicm = uicm(img, opts.trim)?;
    let uism = uism(img, opts.block)?;
    let uiconm = uiconm(img, opts.block)?;
    Ok(Uiqm {
        uicm,
        uism,
        uiconm,
        uiqm: combine_uiqm(uicm, uism, uiconm, opts.uiqm_weights, opts.uiqm_combination),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_colour() -> Tensor<f64> {
        // Left half (0.8, 0.2, 0.1), right half (0.1, 0.3, 0.9), 4x4.
        let a = [0.8, 0.2, 0.1];
        let b = [0.1, 0.3, 0.9];
        Tensor::from_fn(&[3, 4, 4], |i| {
            let c = i / 16;
            let x = i % 4;
            if x < 2 {
                a[c]
            } else {
                b[c]
            }
        })
    }

    #[test]
    fn weights_are_the_published_constants() {
        assert_eq!(UIQM_WEIGHTS, [0.0282, 0.2953, 3.5753]);
        assert_eq!(UCIQE_WEIGHTS, [0.4680, 0.2745, 0.2576]);
    }

    #[test]
    fn lab_reference_colours() {
        let close = |a: [f64; 3], b: [f64; 3], tol: f64| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol);
        assert!(close(srgb_to_lab([1.0, 1.0, 1.0]), [100.0, 0.0, 0.0], 1e-2));
        assert!(close(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0], 1e-9));
        assert!(close(srgb_to_lab([1.0, 0.0, 0.0]), [53.24, 80.09, 67.20], 5e-2));
        assert!(close(srgb_to_lab([0.0, 0.0, 1.0]), [32.30, 79.19, -107.86], 5e-2));
    }

    #[test]
    fn constant_gray_scores() {
        let img = Tensor::<f64>::full(&[3, 16, 16], 0.5);
        assert!(uciqe(&img, UCIQE_WEIGHTS).unwrap().abs() < 1e-6);
        assert!(uicm(&img, 0.1).unwrap().abs() < 1e-12);
        assert_eq!(uiconm(&img, 8).unwrap(), 0.0);
        assert_eq!(uism(&img, 8).unwrap(), 0.0);
    }

    #[test]
    fn constant_colour_scores() {
        let img = Tensor::<f64>::from_fn(&[3, 8, 8], |i| [0.7, 0.4, 0.1][i / 64]);
        let rg = 255.0 * 0.3;
        let yb = 255.0 * (0.55 - 0.1);
        let want = -0.0268 * f64::hypot(rg, yb);
        assert!((uicm(&img, 0.1).unwrap() - want).abs() < 1e-9);
        // Blocks span all three channels, so every block sees 0.1 and 0.7.
        let r: f64 = 0.6 / 0.8;
        assert!((uiconm(&img, 4).unwrap() + r * r.ln()).abs() < 1e-12);
    }

    #[test]
    fn trimmed_mean_is_asymmetric() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        // ceil(1.5) = 2 dropped below, floor(1.5) = 1 above: mean of 3..=9.
        assert_eq!(trimmed_mean(&v, 0.15), 6.0);
    }

    #[test]
    fn two_colour_fixture_matches_direct_evaluation() {
        let img = two_colour();
        let la = srgb_to_lab([0.8, 0.2, 0.1]);
        let lb = srgb_to_lab([0.1, 0.3, 0.9]);
        let ca = la[1].hypot(la[2]) / 100.0;
        let cb = lb[1].hypot(lb[2]) / 100.0;
        // Half the pixels each: std of a two-point distribution.
        let sigma = (ca - cb).abs() / 2.0;
        let contrast = (la[0] - lb[0]).abs() / 100.0;
        let sat = |c: f64, l: f64| c / (c * c + l * l).sqrt();
        let mean_sat = (sat(ca, la[0] / 100.0) + sat(cb, lb[0] / 100.0)) / 2.0;
        let want = 0.4680 * sigma + 0.2745 * contrast + 0.2576 * mean_sat;
        assert!((uciqe(&img, UCIQE_WEIGHTS).unwrap() - want).abs() < 1e-12);

        // Whole image is one 4x4 block for the contrast term.
        let (hi, lo) = (0.9 * 255.0, 0.1 * 255.0);
        let r: f64 = (hi - lo) / (hi + lo);
        assert!((uiconm(&img, 4).unwrap() - (-r * r.ln())).abs() < 1e-12);
    }

    #[test]
    fn product_mode_multiplies() {
        let w = [2.0, 3.0, 5.0];
        assert_eq!(combine_uiqm(1.0, 1.0, 1.0, w, UiqmCombination::Linear), 10.0);
        assert_eq!(combine_uiqm(1.0, 1.0, 1.0, w, UiqmCombination::Product), 30.0);
    }
}
