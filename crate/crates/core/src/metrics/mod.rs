//! Image-quality evaluation: PSNR against a reference, the UCIQE and UIQM
//! no-reference scores, the Inception-Score statistic and Canny edge-map
//! distances, gathered into per-image and aggregate reports.

mod edges;
mod inception;
mod quality;

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

pub use edges::{
    canny, canny_magnitude, edge_distance, gaussian_blur, hysteresis, luma, non_maximum_suppression, sobel,
    CannyParams, EdgeMap, Plane, LUMA_601,
};
pub use inception::{inception_score, SIMPLEX_TOL};
pub use quality::{
    combine_uiqm, srgb_to_lab, trimmed_mean, uciqe, uicm, uiconm, uiqm, uism, QualityOptions, Uiqm,
    UiqmCombination, UCIQE_WEIGHTS, UIQM_WEIGHTS,
};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Peak signal-to-noise ratio in dB. Identical inputs give `+inf`.
pub fn psnr<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>, peak: f64) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim(
            "psnr",
            format!("shapes {:?} and {:?} differ", y.shape(), y_hat.shape()),
        ));
    }
    if !(peak > 0.0) {
        return Err(Error::Contract(format!("psnr peak must be positive, got {peak}")));
    }
    if y.is_empty() {
        return Err(Error::dim("psnr", "empty images".to_string()));
    }
    let sse: f64 = y
        .data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(psnr_from_mse(sse / y.len() as f64, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// Which metrics an evaluation computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSet {
    pub psnr: bool,
    pub uciqe: bool,
    pub uiqm: bool,
    pub edge: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet {
        psnr: true,
        uciqe: true,
        uiqm: true,
        edge: true,
    };
}

impl Default for MetricSet {
    fn default() -> Self {
        MetricSet::ALL
    }
}

impl FromStr for MetricSet {
    type Err = Error;

    /// Comma-separated subset of `psnr,uciqe,uiqm,edge`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = MetricSet {
            psnr: false,
            uciqe: false,
            uiqm: false,
            edge: false,
        };
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "psnr" => set.psnr = true,
                "uciqe" => set.uciqe = true,
                "uiqm" => set.uiqm = true,
                "edge" => set.edge = true,
                other => return Err(Error::Config(format!("unknown metric {other:?}"))),
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricOptions {
    pub quality: QualityOptions,
    pub canny: CannyParams,
    /// PSNR peak for images stored in [0, 1].
    pub peak: Option<f64>,
}

impl MetricOptions {
    fn peak(&self) -> f64 {
        self.peak.unwrap_or(1.0)
    }
}

/// Scores of one image. `None` marks a metric that was not requested or
/// needs a reference image that was not supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub path: String,
    pub psnr: Option<f64>,
    pub uciqe: Option<f64>,
    pub uiqm: Option<Uiqm>,
    pub edge_l2: Option<f64>,
}

pub fn evaluate_image<T: Scalar>(
    path: &str,
    img: &Tensor<T>,
    reference: Option<&Tensor<T>>,
    set: MetricSet,
    opts: &MetricOptions,
) -> Result<ImageMetrics> {
    let psnr = match reference {
        Some(r) if set.psnr => Some(psnr(r, img, opts.peak())?),
        _ => None,
    };
    let edge_l2 = match reference {
        Some(r) if set.edge => Some(edge_distance(&canny(r, opts.canny)?, &canny(img, opts.canny)?)?),
        _ => None,
    };
    Ok(ImageMetrics {
        path: path.to_string(),
        psnr,
        uciqe: set.uciqe.then(|| uciqe(img, opts.quality.uciqe_weights)).transpose()?,
        uiqm: set.uiqm.then(|| uiqm(img, &opts.quality)).transpose()?,
        edge_l2,
    })
}

/// One evaluation input: a name, the image under test and optionally its
/// clean reference.
#[derive(Debug, Clone)]
pub struct EvalItem<T: Scalar = f32> {
    pub path: String,
    pub image: Tensor<T>,
    pub reference: Option<Tensor<T>>,
}

/// Per-image scores for every item, computed in parallel and returned in
/// input order.
pub fn evaluate<T: Scalar>(items: &[EvalItem<T>], set: MetricSet, opts: &MetricOptions) -> Result<MetricReport> {
    let images = items
        .par_iter()
        .map(|it| evaluate_image(&it.path, &it.image, it.reference.as_ref(), set, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        images,
        inception: None,
    })
}

pub const REPORT_COLUMNS: [&str; 8] = ["path", "psnr", "uciqe", "uiqm", "uicm", "uism", "uiconm", "edge_l2"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub psnr: Option<f64>,
    pub uciqe: Option<f64>,
    pub uiqm: Option<f64>,
    pub uicm: Option<f64>,
    pub uism: Option<f64>,
    pub uiconm: Option<f64>,
    pub edge_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    /// Split mean and standard deviation of the Inception Score, when class
    /// probabilities were supplied.
    pub inception: Option<(f64, f64)>,
}

/// Arithmetic mean of the finite values, or `None` if there are none.
fn finite_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        None => "n/a".into(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) => format!("{v:.6}"),
    }
}

impl MetricReport {
    pub fn with_inception(mut self, probs: &[Vec<f64>], splits: usize) -> Result<Self> {
        self.inception = Some(inception_score(probs, splits)?);
        Ok(self)
    }

    /// Means over images; infinite PSNR values are left out.
    pub fn aggregate(&self) -> Aggregate {
        let m = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| finite_mean(self.images.iter().map(f));
        Aggregate {
            psnr: m(&|r| r.psnr),
            uciqe: m(&|r| r.uciqe),
            uiqm: m(&|r| r.uiqm.map(|u| u.uiqm)),
            uicm: m(&|r| r.uiqm.map(|u| u.uicm)),
            uism: m(&|r| r.uiqm.map(|u| u.uism)),
            uiconm: m(&|r| r.uiqm.map(|u| u.uiconm)),
            edge_l2: m(&|r| r.edge_l2),
        }
    }

    fn row(path: &str, values: [Option<f64>; 7]) -> Vec<String> {
        std::iter::once(path.to_string()).chain(values.iter().map(|v| fmt_value(*v))).collect()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.images
            .iter()
            .map(|r| {
                let u = r.uiqm;
                Self::row(
                    &r.path,
                    [
                        r.psnr,
                        r.uciqe,
                        u.map(|u| u.uiqm),
                        u.map(|u| u.uicm),
                        u.map(|u| u.uism),
                        u.map(|u| u.uiconm),
                        r.edge_l2,
                    ],
                )
            })
            .collect()
    }

    fn mean_row(&self) -> Vec<String> {
        let a = self.aggregate();
        Self::row("mean", [a.psnr, a.uciqe, a.uiqm, a.uicm, a.uism, a.uiconm, a.edge_l2])
    }

    /// Tab-separated table: a header, one row per image and a final `mean` row.
    pub fn to_table(&self) -> String {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        for row in self.rows().into_iter().chain(std::iter::once(self.mean_row())) {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    /// `key=value` records separated by blank lines, one per image, then a
    /// `path=mean` record that also carries `is_mean` and `is_std`.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for row in self.rows().into_iter().chain(std::iter::once(self.mean_row())) {
            for (k, v) in REPORT_COLUMNS.iter().zip(&row) {
                let _ = writeln!(out, "{k}={v}");
            }
            out.push('\n');
        }
        // The aggregate record is the last block; extend it before its blank line.
        out.pop();
        let (m, s) = self.inception.unzip();
        let _ = writeln!(out, "is_mean={}\nis_std={}", fmt_value(m), fmt_value(s));
        out
    }

    /// Writes `metrics.tsv` and `metrics.txt` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("metrics.tsv", self.to_table()), ("metrics.txt", self.to_key_values())] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
