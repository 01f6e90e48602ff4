//! On-disk latent codes.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `CVGLATNT` |
//! | 2 | format version (`1`) |
//! | 2 | rank `r` |
//! | 4·r | extents, u32 each |
//! | 4·n | payload, f32 row-major, `n` = product of extents |

use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::generator::{Decompressor, GeneratorModel};
use crate::tensor::{numel, Scalar, Tensor};

pub const LATENT_MAGIC: &[u8; 8] = b"CVGLATNT";
pub const LATENT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    shape: Vec<usize>,
    payload: Vec<f32>,
}

impl LatentCode {
    pub fn new(shape: &[usize], payload: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Format(format!("latent shape {shape:?} has an empty axis")));
        }
        if numel(shape) != payload.len() {
            return Err(Error::Format(format!(
                "latent shape {shape:?} needs {} values, got {}",
                numel(shape),
                payload.len()
            )));
        }
        Ok(LatentCode {
            shape: shape.to_vec(),
            payload,
        })
    }

    pub fn from_tensor<T: Scalar>(z: &Tensor<T>) -> Self {
        let t: Tensor<f32> = z.cast();
        LatentCode {
            shape: t.shape().to_vec(),
            payload: t.into_data(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(&self.shape, self.payload.clone())
            .expect("validated at construction")
            .cast()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload.len() * 4
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(12 + 4 * self.shape.len() + self.payload_bytes());
        w.bytes(LATENT_MAGIC);
        w.u16(LATENT_VERSION);
        w.u16(self.shape.len() as u16);
        for &e in &self.shape {
            w.u32(e as u32);
        }
        for &v in &self.payload {
            w.f32(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "latent");
        if r.take(8)? != LATENT_MAGIC {
            return Err(Error::Format("not a latent file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != LATENT_VERSION {
            return Err(Error::Format(format!("unsupported latent version {version}")));
        }
        let rank = r.u16()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Format(format!("latent shape {shape:?} has an empty axis")));
        }
        let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let want = n.and_then(|n| n.checked_mul(4));
        if want != Some(r.remaining()) {
            return Err(Error::Format(format!(
                "latent payload is {} bytes, header {shape:?} implies {}",
                r.remaining(),
                want.map_or("overflow".to_string(), |w| w.to_string())
            )));
        }
        let payload = (0..n.unwrap()).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        Ok(LatentCode { shape, payload })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Encoder output of `y`, stored as 32-bit reals.
pub fn compress<T: Scalar>(model: &GeneratorModel<T>, y: &Tensor<T>) -> Result<LatentCode> {
    Ok(LatentCode::from_tensor(&model.encode(y)?))
}

pub fn decompress<T: Scalar>(decompressor: &Decompressor<T>, code: &LatentCode) -> Result<Tensor<T>> {
    decompressor.reconstruct(&code.to_tensor())
}

/// Ratio of input to latent element counts.
pub fn compression_factor(input_shape: &[usize], latent_shape: &[usize]) -> Result<f64> {
    if input_shape.is_empty() || latent_shape.is_empty() || input_shape.contains(&0) || latent_shape.contains(&0) {
        return Err(Error::Contract(format!(
            "compression factor needs non-empty shapes, got {input_shape:?} / {latent_shape:?}"
        )));
    }
    Ok(numel(input_shape) as f64 / numel(latent_shape) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn factor_examples() {
        assert_eq!(compression_factor(&[3, 256, 256], &[256, 16, 16]).unwrap(), 3.0);
        assert_eq!(compression_factor(&[3, 8, 8], &[3, 8, 8]).unwrap(), 1.0);
        let r = compression_factor(&[3, 256, 256], &[116, 72, 32]).unwrap();
        assert!((r - 196_608.0 / 267_264.0).abs() < 1e-15);
        assert!((r - 0.74).abs() < 0.01);
        assert!(matches!(compression_factor(&[3, 0, 4], &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn paper_scale_payload_size() {
        let code = LatentCode::new(&[256, 16, 16], vec![0.0; 256 * 16 * 16]).unwrap();
        assert_eq!(code.payload_bytes(), 262_144);
        assert_eq!(code.to_bytes().len(), 8 + 2 + 2 + 12 + 262_144);
    }

    #[test]
    fn header_layout() {
        let code = LatentCode::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let b = code.to_bytes();
        assert_eq!(&b[..8], b"CVGLATNT");
        assert_eq!(&b[8..12], &[1, 0, 2, 0]);
        assert_eq!(&b[12..20], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(LatentCode::from_bytes(&b).unwrap(), code);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let code = LatentCode::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = code.to_bytes();
        for cut in 0..b.len() {
            assert!(matches!(LatentCode::from_bytes(&b[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(LatentCode::from_bytes(&extra), Err(Error::Format(_))));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(LatentCode::from_bytes(&magic), Err(Error::Format(_))));
        let mut version = b.clone();
        version[8] = 9;
        assert!(matches!(LatentCode::from_bytes(&version), Err(Error::Format(_))));
        let mut huge = b;
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(LatentCode::from_bytes(&huge), Err(Error::Format(_))));
    }

    #[test]
    fn compress_decompress_matches_generate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = GeneratorModel::<f32>::new(GeneratorConfig::desk(), &mut rng).unwrap();
        let y = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let code = compress(&model, &y).unwrap();
        let back = LatentCode::from_bytes(&code.to_bytes()).unwrap();
        let out = decompress(&model.decompressor, &back).unwrap();
        let direct = model.generate(&y).unwrap();
        assert!(out.data().iter().zip(direct.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
