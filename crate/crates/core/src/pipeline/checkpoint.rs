//! Checkpoint files: generator, discriminator and optimizer state under
//! named sections, guarded by a hash of the training configuration.
//!
//! Layout (little-endian): magic `CVGCHKPT`, u16 version, 32-byte config
//! hash, u64 step, f64 bits of the last adaptive weight, u64 Adam step
//! counts for generator and discriminator, the resolved config text
//! (u32 length + UTF-8), u32 section count, then per section: name
//! (u32 length + UTF-8), u16 rank, u32 extents, f32 payload.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::nn::ParamStore;
use crate::pipeline::optim::Adam;
use crate::pipeline::train::{TrainConfig, Trainer};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CVGCHKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub config_text: String,
    pub step: u64,
    pub last_lambda: f64,
    pub adam_t_g: u64,
    pub adam_t_d: u64,
    pub sections: Vec<(String, Tensor<f32>)>,
}

fn push_store(out: &mut Vec<(String, Tensor<f32>)>, store: &ParamStore<f32>) {
    out.extend(store.iter().map(|(n, t)| (n.to_string(), t.clone())));
}

fn push_moments(out: &mut Vec<(String, Tensor<f32>)>, tag: &str, stores: &[&ParamStore<f32>], opt: &Adam<f32>) {
    for (si, store) in stores.iter().enumerate() {
        for (ti, (name, _)) in store.iter().enumerate() {
            out.push((format!("adam.{tag}.m.{name}"), opt.m[si][ti].clone()));
            out.push((format!("adam.{tag}.v.{name}"), opt.v[si][ti].clone()));
        }
    }
}

fn load_moments(map: &HashMap<&str, &Tensor<f32>>, tag: &str, stores: &[&ParamStore<f32>], opt: &mut Adam<f32>) -> Result<()> {
    for (si, store) in stores.iter().enumerate() {
        for (ti, (name, t)) in store.iter().enumerate() {
            for (kind, slot) in [("m", &mut opt.m[si][ti]), ("v", &mut opt.v[si][ti])] {
                let key = format!("adam.{tag}.{kind}.{name}");
                let src = map.get(key.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Format(format!("{key}: shape {:?}, expected {:?}", src.shape(), t.shape())));
                }
                *slot = (*src).clone();
            }
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut sections = Vec::new();
        let g_stores = t.model.param_stores();
        for s in &g_stores {
            push_store(&mut sections, s);
        }
        push_store(&mut sections, &t.disc.params);
        push_moments(&mut sections, "g", &g_stores, &t.opt_g);
        push_moments(&mut sections, "d", &[&t.disc.params], &t.opt_d);
        Checkpoint {
            config_hash: t.config.hash(),
            config_text: t.config.to_kv(),
            step: t.step,
            last_lambda: t.last_lambda,
            adam_t_g: t.opt_g.t,
            adam_t_d: t.opt_d.t,
            sections,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig::from_kv(&self.config_text)?;
        if c.hash() != self.config_hash {
            return Err(Error::Format("checkpoint config text does not match its hash".into()));
        }
        Ok(c)
    }

    fn section_map(&self) -> HashMap<&str, &Tensor<f32>> {
        self.sections.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    fn entries(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> + Clone {
        self.sections.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Restores full training state. The trainer's configuration must hash
    /// to the stored value.
    pub fn restore(&self, t: &mut Trainer) -> Result<()> {
        if t.config.hash() != self.config_hash {
            return Err(Error::Config(
                "checkpoint was written under a different configuration (hash mismatch); refusing to resume".into(),
            ));
        }
        self.load_weights(t)?;
        let map = self.section_map();
        let g_stores = t.model.param_stores();
        load_moments(&map, "g", &g_stores, &mut t.opt_g)?;
        load_moments(&map, "d", &[&t.disc.params], &mut t.opt_d)?;
        t.opt_g.t = self.adam_t_g;
        t.opt_d.t = self.adam_t_d;
        t.step = self.step;
        t.last_lambda = self.last_lambda;
        Ok(())
    }

    /// Copies generator and discriminator weights only (optimizer and step
    /// counter untouched), e.g. to start fine-tuning from a pretrained run.
    pub fn load_weights(&self, t: &mut Trainer) -> Result<()> {
        for s in t.model.param_stores_mut() {
            s.load_from(self.entries())?;
        }
        t.disc.params.load_from(self.entries())
    }

    /// Generator rebuilt from the stored configuration and weights.
    pub fn generator(&self) -> Result<GeneratorModel<f32>> {
        let cfg = self.train_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = GeneratorModel::new(cfg.generator_config(), &mut rng)?;
        for s in model.param_stores_mut() {
            s.load_from(self.entries())?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_capacity(1024 + self.sections.iter().map(|(_, t)| t.len() * 4 + 64).sum::<usize>());
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.bytes(&self.config_hash);
        w.u64(self.step);
        w.u64(self.last_lambda.to_bits());
        w.u64(self.adam_t_g);
        w.u64(self.adam_t_d);
        w.str(&self.config_text);
        w.u32(self.sections.len() as u32);
        for (name, t) in &self.sections {
            w.str(name);
            w.u16(t.rank() as u16);
            for &e in t.shape() {
                w.u32(e as u32);
            }
            for &v in t.data() {
                w.f32(v);
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let last_lambda = f64::from_bits(r.u64()?);
        let adam_t_g = r.u64()?;
        let adam_t_d = r.u64()?;
        let config_text = r.str()?;
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u16()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            match n {
                Some(n) if n > 0 && n.checked_mul(4).is_some_and(|b| b <= r.remaining()) => {}
                _ => return Err(Error::Format(format!("section {name}: bad or truncated shape {shape:?}"))),
            }
            let data = (0..numel(&shape)).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            sections.push((name, Tensor::new(&shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.remaining())));
        }
        Ok(Checkpoint {
            config_hash,
            config_text,
            step,
            last_lambda,
            adam_t_g,
            adam_t_d,
            sections,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::Preset;
    use crate::pipeline::dataset::synthetic_samples;

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: Some(2),
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_bit_identical() {
        let samples = synthetic_samples(4, 0, (32, 32), &Preset::ALL);
        let mut t = Trainer::new(config()).unwrap();
        t.train(&samples, |_, _| Ok(())).unwrap();
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut fresh = Trainer::new(config()).unwrap();
        ck.restore(&mut fresh).unwrap();
        assert_eq!(Checkpoint::from_trainer(&fresh).to_bytes(), bytes);
        assert_eq!(ck.train_config().unwrap(), config());
    }

    #[test]
    fn hash_mismatch_refuses_resume() {
        let t = Trainer::new(config()).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        let mut other = Trainer::new(TrainConfig { seed: 10, ..config() }).unwrap();
        assert!(matches!(ck.restore(&mut other), Err(Error::Config(_))));
        ck.load_weights(&mut other).unwrap();
    }

    #[test]
    fn truncated_or_garbled_files_are_format_errors() {
        let t = Trainer::new(config()).unwrap();
        let bytes = Checkpoint::from_trainer(&t).to_bytes();
        for cut in [0, 7, 8, 40, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[3] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn generator_rebuilds_from_checkpoint() {
        let t = Trainer::new(config()).unwrap();
        let ck = Checkpoint::from_trainer(&t);
        let g = ck.generator().unwrap();
        let y = Tensor::full(&[3, 32, 32], 0.3f32);
        assert_eq!(g.generate(&y).unwrap(), t.model.generate(&y).unwrap());
    }
}
