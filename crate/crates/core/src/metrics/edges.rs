//! Canny edge detection and the edge-map distance used to compare an
//! enhanced image against its reference.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// ITU-R BT.601 luma weights.
pub const LUMA_601: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    /// Hysteresis thresholds on the Sobel magnitude of a [0, 1] image.
    pub low: f64,
    pub high: f64,
    /// Standard deviation of the Gaussian pre-blur, in pixels.
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            low: 0.1,
            high: 0.3,
            sigma: 1.4,
        }
    }
}

/// Binary per-pixel edge mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    mask: Vec<u8>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::dim(
                "edge_map",
                format!("{} values for a {height}x{width} map", mask.len()),
            ));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(Error::Contract("edge map values must be 0 or 1".into()));
        }
        Ok(EdgeMap { height, width, mask })
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

/// A single-channel real image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

/// Channel `c` of a `[C, H, W]` image.
pub(crate) fn channel<T: Scalar>(img: &Tensor<T>, c: usize) -> Plane {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    Plane {
        height: h,
        width: w,
        data: img.data()[c * h * w..(c + 1) * h * w].iter().map(|v| v.as_f64()).collect(),
    }
}

pub(crate) fn check_image<T: Scalar>(op: &'static str, img: &Tensor<T>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) || s[1] == 0 || s[2] == 0 {
        return Err(Error::dim(op, format!("expected a [1|3, H, W] image, got {s:?}")));
    }
    Ok(())
}

/// BT.601 luma of an RGB image; a one-channel image is returned as is.
pub fn luma<T: Scalar>(img: &Tensor<T>) -> Result<Plane> {
    check_image("luma", img)?;
    if img.shape()[0] == 1 {
        return Ok(channel(img, 0));
    }
    let (r, g, b) = (channel(img, 0), channel(img, 1), channel(img, 2));
    let data = (0..r.data.len())
        .map(|i| LUMA_601[0] * r.data[i] + LUMA_601[1] * g.data[i] + LUMA_601[2] * b.data[i])
        .collect();
    Ok(Plane {
        height: r.height,
        width: r.width,
        data,
    })
}

/// Separable Gaussian blur with replicated borders. The kernel spans
/// `ceil(3 sigma)` pixels on each side.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);

    let (h, w) = (p.height, p.width);
    let mut tmp = Plane {
        height: h,
        width: w,
        data: vec![0.0; h * w],
    };
    for y in 0..h {
        for x in 0..w {
            tmp.data[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * p.at_clamped(y as isize, x as isize + i))
                .sum();
        }
    }
    let mut out = tmp.clone();
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = (-r..=r)
                .map(|i| k[(i + r) as usize] * tmp.at_clamped(y as isize + i, x as isize))
                .sum();
        }
    }
    out
}

/// Horizontal and vertical 3x3 Sobel responses with replicated borders.
pub fn sobel(p: &Plane) -> (Plane, Plane) {
    let (h, w) = (p.height, p.width);
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let a = |dy: isize, dx: isize| p.at_clamped(y + dy, x + dx);
            let i = y as usize * w + x as usize;
            gx[i] = (a(-1, 1) + 2.0 * a(0, 1) + a(1, 1)) - (a(-1, -1) + 2.0 * a(0, -1) + a(1, -1));
            gy[i] = (a(1, -1) + 2.0 * a(1, 0) + a(1, 1)) - (a(-1, -1) + 2.0 * a(-1, 0) + a(-1, 1));
        }
    }
    let mk = |data| Plane {
        height: h,
        width: w,
        data,
    };
    (mk(gx), mk(gy))
}

/// Keeps magnitudes that are maximal along the quantized gradient
/// direction; everything else becomes zero. Border pixels are suppressed.
pub fn non_maximum_suppression(gx: &Plane, gy: &Plane) -> Plane {
    let (h, w) = (gx.height, gx.width);
    let mag: Vec<f64> = gx.data.iter().zip(&gy.data).map(|(a, b)| a.hypot(*b)).collect();
    let mut out = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy.data[i].atan2(gx.data[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            // Neighbour offsets (dy, dx) along the gradient.
            let (dy, dx): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let at = |sy: isize, sx: isize| mag[(y as isize + sy) as usize * w + (x as isize + sx) as usize];
            if m >= at(dy, dx) && m >= at(-dy, -dx) {
                out[i] = m;
            }
        }
    }
    Plane {
        height: h,
        width: w,
        data: out,
    }
}

/// Pixels at or above `high` seed edges; pixels at or above `low` join an
/// edge when 8-connected to one.
pub fn hysteresis(mag: &Plane, low: f64, high: f64) -> EdgeMap {
    let (h, w) = (mag.height, mag.width);
    let mut mask = vec![0u8; h * w];
    let mut stack = Vec::new();
    for (i, &m) in mag.data.iter().enumerate() {
        if m >= high && mask[i] == 0 {
            mask[i] = 1;
            stack.push(i);
            while let Some(j) = stack.pop() {
                let (y, x) = ((j / w) as isize, (j % w) as isize);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let k = ny as usize * w + nx as usize;
                        if mask[k] == 0 && mag.data[k] >= low {
                            mask[k] = 1;
                            stack.push(k);
                        }
                    }
                }
            }
        }
    }
    EdgeMap {
        height: h,
        width: w,
        mask,
    }
}

/// Suppressed gradient magnitude of the blurred luma, before thresholding.
pub fn canny_magnitude<T: Scalar>(img: &Tensor<T>, sigma: f64) -> Result<Plane> {
    let blurred = gaussian_blur(&luma(img)?, sigma);
    let (gx, gy) = sobel(&blurred);
    Ok(non_maximum_suppression(&gx, &gy))
}

pub fn canny<T: Scalar>(img: &Tensor<T>, params: CannyParams) -> Result<EdgeMap> {
    if !(params.low >= 0.0 && params.low < params.high) {
        return Err(Error::Contract(format!(
            "canny thresholds need 0 <= low < high, got {} and {}",
            params.low, params.high
        )));
    }
    Ok(hysteresis(&canny_magnitude(img, params.sigma)?, params.low, params.high))
}

/// Euclidean distance between two binary maps: the square root of the
/// number of pixels where they disagree.
pub fn edge_distance(a: &EdgeMap, b: &EdgeMap) -> Result<f64> {
    if a.extent() != b.extent() {
        return Err(Error::dim(
            "edge_distance",
            format!("extents {:?} and {:?} differ", a.extent(), b.extent()),
        ));
    }
    let n = a.mask.iter().zip(&b.mask).filter(|(x, y)| x != y).count();
    Ok((n as f64).sqrt())
}
