//! Nearest-neighbour code-book quantization with a straight-through
//! backward pass. Kept as the ablation baseline for the capsule layer:
//! its true Jacobian is zero almost everywhere, the backward pass is the
//! identity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// `K` entries of width `M`, stored `[K, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T: Scalar = f32> {
    entries: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    /// Uniform init in `[-1/K, 1/K)`.
    pub fn random<R: Rng + ?Sized>(k: usize, m: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::Config(format!("code-book needs K, M >= 1, got {k}x{m}")));
        }
        let r = 1.0 / k as f64;
        Ok(Codebook {
            entries: Tensor::rand_uniform(&[k, m], -r, r, rng),
        })
    }

    pub fn from_entries(entries: &[Vec<T>]) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Config("empty code-book".into()));
        };
        let m = first.len();
        if m == 0 || entries.iter().any(|e| e.len() != m) {
            return Err(Error::Config("code-book entries must share a positive width".into()));
        }
        let data = entries.iter().flatten().copied().collect();
        Ok(Codebook {
            entries: Tensor::new(&[entries.len(), m], data)?,
        })
    }

    /// Wraps a `[K, M]` tensor of entries.
    pub fn from_tensor(entries: Tensor<T>) -> Self {
        assert_eq!(entries.rank(), 2, "code-book entries must be [K, M]");
        Codebook { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, k: usize) -> &[T] {
        let m = self.width();
        &self.entries.data()[k * m..(k + 1) * m]
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }
}

/// Index of the closest entry (squared Euclidean) for every row of
/// `vectors: [N, M]`. Ties go to the lowest index.
pub fn nearest_indices<T: Scalar>(vectors: &Tensor<T>, codebook: &Codebook<T>) -> Result<Vec<usize>> {
    let m = codebook.width();
    if vectors.rank() != 2 || vectors.shape()[1] != m {
        return Err(Error::dim(
            "vq_quantize",
            format!("vectors {:?} against code-book width {m}", vectors.shape()),
        ));
    }
    Ok(vectors
        .data()
        .chunks(m)
        .map(|z| {
            let mut best = (0, T::infinity());
            for k in 0..codebook.len() {
                let d: T = z.iter().zip(codebook.entry(k)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// Replaces each row of `z: [N, M]` by its nearest code-book entry.
/// Gradients flow to `z` unchanged.
pub fn vq_quantize<T: Scalar>(tape: &mut Tape<T>, z: Var, codebook: &Codebook<T>) -> Result<(Var, Vec<usize>)> {
    let indices = nearest_indices(tape.value(z), codebook)?;
    let m = codebook.width();
    let mut data = Vec::with_capacity(indices.len() * m);
    for &k in &indices {
        data.extend_from_slice(codebook.entry(k));
    }
    let q = Tensor::new(&[indices.len(), m], data)?;
    let out = tape.straight_through(z, q)?;
    Ok((out, indices))
}

/// Quantizes a `[C, H, W]` latent map location by location (`M = C`).
pub fn vq_quantize_map<T: Scalar>(tape: &mut Tape<T>, z: Var, codebook: &Codebook<T>) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("vq_quantize_map", format!("{shape:?}")));
    }
    let flat = tape.reshape(z, &[shape[0], shape[1] * shape[2]])?;
    let rows = tape.permute(flat, &[1, 0])?;
    let (q, idx) = vq_quantize(tape, rows, codebook)?;
    let cols = tape.permute(q, &[1, 0])?;
    Ok((tape.reshape(cols, &shape)?, idx))
}
