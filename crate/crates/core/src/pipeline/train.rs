//! Adversarial training of the generator and patch discriminator.
//!
//! Each step runs the generator on every image of the batch, updates the
//! discriminator on real targets against the (detached) reconstructions,
//! then updates the generator with
//! `rec + λ·gan_g (+ gdl)`, where `λ` is measured at the decoder's last
//! convolution and held constant in the backward pass.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{DiscriminatorConfig, GeneratorBinding, GeneratorConfig, GeneratorModel, GeneratorPass, PatchDiscriminator};
use crate::losses::{
    adaptive_lambda, discriminator_loss_on, gdl_mean_on, generator_adv_on, rec_loss_on, LambdaScope, LossBundle, Phase,
    GDL_GAMMA, LAMBDA_DELTA,
};
use crate::pipeline::dataset::Sample;
use crate::pipeline::optim::{sum_grads, Adam, AdamConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelPreset {
    Paper,
    #[default]
    Desk,
}

impl ModelPreset {
    pub fn generator(self) -> GeneratorConfig {
        match self {
            ModelPreset::Paper => GeneratorConfig::paper(),
            ModelPreset::Desk => GeneratorConfig::desk(),
        }
    }

    pub fn discriminator(self) -> DiscriminatorConfig {
        match self {
            ModelPreset::Paper => DiscriminatorConfig::paper(),
            ModelPreset::Desk => DiscriminatorConfig::desk(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Paper => "paper",
            ModelPreset::Desk => "desk",
        }
    }
}

impl FromStr for ModelPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ModelPreset::Paper),
            "desk" => Ok(ModelPreset::Desk),
            _ => Err(Error::Config(format!("preset must be paper|desk, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: ModelPreset,
    pub phase: Phase,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps in total; overrides `epochs`.
    pub max_steps: Option<u64>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub without_gdl: bool,
    pub lambda_scope: LambdaScope,
    pub gamma: u32,
    pub delta: f64,
    pub detach_coupling: bool,
    /// Steps between checkpoints, 0 for none until the end.
    pub checkpoint_every: u64,
    /// Worker threads for per-image work, 0 for the runtime default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: ModelPreset::Desk,
            phase: Phase::Finetune,
            batch_size: 6,
            epochs: 1,
            max_steps: None,
            lr_g: DESK_LEARNING_RATE,
            lr_d: DESK_LEARNING_RATE,
            beta1: 0.5,
            beta2: 0.9,
            seed: 0,
            without_gdl: false,
            lambda_scope: LambdaScope::GeneratorOnly,
            gamma: GDL_GAMMA,
            delta: LAMBDA_DELTA,
            detach_coupling: false,
            checkpoint_every: 0,
            threads: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

/// Adam step size for the 32x32 desk model.
pub const DESK_LEARNING_RATE: f64 = 5e-4;
/// Adam step size at full scale.
pub const PAPER_LEARNING_RATE: f64 = 1e-4;

impl TrainConfig {
    /// Defaults for `preset`, including its learning rates.
    pub fn for_preset(preset: ModelPreset) -> Self {
        let lr = match preset {
            ModelPreset::Desk => DESK_LEARNING_RATE,
            ModelPreset::Paper => PAPER_LEARNING_RATE,
        };
        TrainConfig {
            preset,
            lr_g: lr,
            lr_d: lr,
            ..TrainConfig::default()
        }
    }

    /// Keys accepted by [`TrainConfig::set`].
    pub const KEYS: [&'static str; 17] = [
        "preset",
        "phase",
        "batch_size",
        "epochs",
        "max_steps",
        "lr_g",
        "lr_d",
        "beta1",
        "beta2",
        "seed",
        "without_gdl",
        "lambda_scope",
        "gamma",
        "delta",
        "detach_coupling",
        "checkpoint_every",
        "threads",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.preset = v.parse()?,
            "phase" => self.phase = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_steps" => self.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "lr_g" => self.lr_g = parse(key, v)?,
            "lr_d" => self.lr_d = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "without_gdl" => self.without_gdl = parse_bool(key, v)?,
            "lambda_scope" => self.lambda_scope = v.parse()?,
            "gamma" => self.gamma = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "detach_coupling" => self.detach_coupling = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be >= 1".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be positive".into()));
        }
        Ok(())
    }

    /// Resolved configuration as `key=value` lines, in [`Self::KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let scope = match self.lambda_scope {
            LambdaScope::GeneratorOnly => "generator",
            LambdaScope::Both => "both",
        };
        let steps = self.max_steps.map_or("none".to_string(), |n| n.to_string());
        let vals: [String; 17] = [
            self.preset.name().into(),
            self.phase.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            steps,
            self.lr_g.to_string(),
            self.lr_d.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.seed.to_string(),
            self.without_gdl.to_string(),
            scope.into(),
            self.gamma.to_string(),
            self.delta.to_string(),
            self.detach_coupling.to_string(),
            self.checkpoint_every.to_string(),
            self.threads.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(vals) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Parses `key=value` lines. Unset keys take the defaults of the
    /// `preset` named in the text (desk if none).
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            pairs.push((k.trim(), v));
        }
        let preset = match pairs.iter().rev().find(|(k, _)| *k == "preset") {
            Some((_, v)) => v.trim().parse()?,
            None => ModelPreset::Desk,
        };
        let mut c = TrainConfig::for_preset(preset);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = self.preset.generator();
        if let crate::generator::QuantizerKind::Capsule(c) = &mut g.quantizer {
            c.detach_coupling = self.detach_coupling;
        }
        g
    }

    /// SHA-256 over everything that determines the training trajectory;
    /// step budgets, checkpoint cadence and thread count are excluded so a
    /// run can be resumed with a larger budget.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for line in self.to_kv().lines() {
            let key = line.split('=').next().unwrap_or("");
            if !matches!(key, "epochs" | "max_steps" | "checkpoint_every" | "threads") {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        h.update(format!("{:?}{:?}", self.generator_config(), self.preset.discriminator()).as_bytes());
        h.finalize().into()
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub losses: LossBundle,
}

pub const HISTORY_HEADER: &str = "step\trec\tgan_g\tgan_d\tgdl\tlambda\ttotal";

impl LossRecord {
    /// Tab-separated row; floats use shortest round-trip formatting.
    pub fn to_tsv(&self) -> String {
        let l = &self.losses;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, l.rec, l.gan_g, l.gan_d, l.gdl, l.lambda, l.total
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("history row needs 7 fields: {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?} in history")));
        Ok(LossRecord {
            step: f[0].parse().map_err(|_| Error::Format(format!("bad step {:?}", f[0])))?,
            losses: LossBundle {
                rec: num(f[1])?,
                gan_g: num(f[2])?,
                gan_d: num(f[3])?,
                gdl: num(f[4])?,
                lambda: num(f[5])?,
                total: num(f[6])?,
            },
        })
    }
}

struct GenerationTape {
    tape: Tape<f32>,
    binding: GeneratorBinding,
    pass: GeneratorPass,
}

/// Per-image loss values and their gradients with respect to `Ŷ`.
struct HeadOutput {
    rec: f64,
    gan: f64,
    gdl: f64,
    d_rec: Tensor<f32>,
    d_gan: Tensor<f32>,
    d_gdl: Option<Tensor<f32>>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: GeneratorModel<f32>,
    pub disc: PatchDiscriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Completed optimization steps.
    pub step: u64,
    /// Adaptive weight of the previous step (scales the discriminator loss
    /// under [`LambdaScope::Both`]).
    pub last_lambda: f64,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("config", &self.config)
            .field("step", &self.step)
            .field("last_lambda", &self.last_lambda)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = GeneratorModel::new(config.generator_config(), &mut rng)?;
        let disc = PatchDiscriminator::new(config.preset.discriminator(), &mut rng)?;
        let opt_g = Adam::new(
            AdamConfig {
                lr: config.lr_g,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
            },
            &model.param_stores(),
        );
        let opt_d = Adam::new(
            AdamConfig {
                lr: config.lr_d,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: 1e-8,
            },
            &[&disc.params],
        );
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            config,
            model,
            disc,
            opt_g,
            opt_d,
            step: 0,
            last_lambda: 1.0,
            pool,
        })
    }

    /// Identity reconstruction of clean images.
    pub fn pretrain_step(&mut self, clean: &[&Tensor<f32>]) -> Result<LossBundle> {
        self.step_on(clean, clean, false)
    }

    /// Degraded inputs toward clean targets, gradient-difference term
    /// included unless the ablation flag is set.
    pub fn finetune_step(&mut self, degraded: &[&Tensor<f32>], clean: &[&Tensor<f32>]) -> Result<LossBundle> {
        let gdl = !self.config.without_gdl;
        self.step_on(degraded, clean, gdl)
    }

    fn step_on(&mut self, inputs: &[&Tensor<f32>], targets: &[&Tensor<f32>], use_gdl: bool) -> Result<LossBundle> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::Contract(format!(
                "batch needs matching non-empty inputs and targets ({} vs {})",
                inputs.len(),
                targets.len()
            )));
        }
        let inv_b = 1.0 / inputs.len() as f64;
        let model = &self.model;

        let gens: Vec<GenerationTape> = self.pool.install(|| {
            inputs
                .par_iter()
                .map(|x| {
                    let mut tape = Tape::new();
                    let binding = model.bind(&mut tape, true);
                    let xv = tape.constant((*x).clone());
                    let pass = model.forward(&mut tape, &binding, xv)?;
                    Ok(GenerationTape { tape, binding, pass })
                })
                .collect::<Result<_>>()
        })?;
        let y_hats: Vec<&Tensor<f32>> = gens.iter().map(|g| g.tape.value(g.pass.y_hat)).collect();

        // Discriminator update on real targets against detached reconstructions.
        let d_scale = match self.config.lambda_scope {
            LambdaScope::GeneratorOnly => 1.0,
            LambdaScope::Both => self.last_lambda,
        };
        let disc = &self.disc;
        let d_parts: Vec<(f64, Vec<Tensor<f32>>)> = self.pool.install(|| {
            targets
                .par_iter()
                .zip(y_hats.par_iter())
                .map(|(y, yh)| {
                    let mut tape = Tape::new();
                    let b = disc.params.bind(&mut tape, true);
                    let real = tape.constant((*y).clone());
                    let fake = tape.constant((*yh).clone());
                    let lr = disc.forward(&mut tape, &b, real)?;
                    let lf = disc.forward(&mut tape, &b, fake)?;
                    let loss = discriminator_loss_on(&mut tape, lr, lf)?;
                    let g = tape.backward(loss)?;
                    Ok((tape.value(loss).item() as f64, b.grads(&g)))
                })
                .collect::<Result<_>>()
        })?;
        let gan_d = d_scale * d_parts.iter().map(|p| p.0).sum::<f64>() * inv_b;
        let mut d_grads = sum_grads(d_parts.into_iter().map(|p| vec![p.1])).unwrap();
        let d_factor = (d_scale * inv_b) as f32;
        d_grads.iter_mut().flatten().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= d_factor));
        self.opt_d.step(&mut [&mut self.disc.params], &d_grads)?;

        // Loss gradients at each reconstruction, against the updated discriminator.
        let disc = &self.disc;
        let gamma = self.config.gamma;
        let heads: Vec<HeadOutput> = self.pool.install(|| {
            targets
                .par_iter()
                .zip(y_hats.par_iter())
                .map(|(y, yh)| {
                    let grad_of = |f: &dyn Fn(&mut Tape<f32>, crate::tensor::Var, crate::tensor::Var) -> Result<crate::tensor::Var>|
                     -> Result<(f64, Tensor<f32>)> {
                        let mut tape = Tape::new();
                        let yv = tape.constant((*y).clone());
                        let yhv = tape.param((*yh).clone());
                        let loss = f(&mut tape, yv, yhv)?;
                        let g = tape.backward(loss)?;
                        Ok((tape.value(loss).item() as f64, g.wrt(yhv)))
                    };
                    let (rec, d_rec) = grad_of(&|t, a, b| rec_loss_on(t, a, b))?;
                    let (gan, d_gan) = grad_of(&|t, _, b| {
                        let db = disc.params.bind(t, false);
                        let logits = disc.forward(t, &db, b)?;
                        Ok(generator_adv_on(t, logits))
                    })?;
                    let (gdl, d_gdl) = if use_gdl {
                        let (v, g) = grad_of(&|t, a, b| gdl_mean_on(t, a, b, gamma))?;
                        (v, Some(g))
                    } else {
                        (0.0, None)
                    };
                    Ok(HeadOutput {
                        rec,
                        gan,
                        gdl,
                        d_rec,
                        d_gan,
                        d_gdl,
                    })
                })
                .collect::<Result<_>>()
        })?;

        // Adaptive weight from the last decoder layer's weight gradients.
        let last = self.model.decompressor.decoder.last_layer();
        let dec_params = &self.model.decompressor.decoder.params;
        let mut g_rec: Option<Tensor<f32>> = None;
        let mut g_gan: Option<Tensor<f32>> = None;
        for (g, h) in gens.iter().zip(&heads) {
            let x = g.tape.value(g.pass.last_input);
            let gr = last.weight_grad(dec_params, x, &h.d_rec)?;
            let gg = last.weight_grad(dec_params, x, &h.d_gan)?;
            match (&mut g_rec, &mut g_gan) {
                (Some(a), Some(b)) => {
                    a.add_assign(&gr);
                    b.add_assign(&gg);
                }
                _ => {
                    g_rec = Some(gr);
                    g_gan = Some(gg);
                }
            }
        }
        let norm = |t: Option<Tensor<f32>>| t.map_or(0.0, |t| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() * inv_b);
        let lambda = adaptive_lambda(norm(g_rec), norm(g_gan), self.config.delta);

        // Generator backward with seed dRec + λ·dGan + dGdl, averaged over the batch.
        let (lam, scale) = (lambda as f32, inv_b as f32);
        let g_sets: Vec<Vec<Vec<Tensor<f32>>>> = self.pool.install(|| {
            gens.par_iter()
                .zip(heads.par_iter())
                .map(|(g, h)| {
                    let mut seed = h.d_rec.clone();
                    for (s, (&dg, i)) in seed.data_mut().iter_mut().zip(h.d_gan.data().iter().zip(0..)) {
                        let dgdl = h.d_gdl.as_ref().map_or(0.0, |t| t.data()[i]);
                        *s = (*s + lam * dg + dgdl) * scale;
                    }
                    let grads = g.tape.backward_seeded(g.pass.y_hat, seed)?;
                    let mut sets = vec![g.binding.encoder.grads(&grads)];
                    if let Some(q) = &g.binding.quantizer {
                        sets.push(q.grads(&grads));
                    }
                    sets.push(g.binding.decoder.grads(&grads));
                    Ok(sets)
                })
                .collect::<Result<_>>()
        })?;
        drop(gens);
        let g_grads = sum_grads(g_sets.into_iter()).unwrap();
        self.opt_g.step(&mut self.model.param_stores_mut(), &g_grads)?;

        self.last_lambda = lambda;
        self.step += 1;
        let mean = |f: fn(&HeadOutput) -> f64| heads.iter().map(f).sum::<f64>() * inv_b;
        let rec = mean(|h| h.rec);
        let gan_g = mean(|h| h.gan);
        let gdl = mean(|h| h.gdl);
        Ok(LossBundle {
            rec,
            gan_g,
            gan_d,
            gdl,
            lambda,
            total: rec + lambda * gan_g + gdl,
        })
    }

    /// Total number of steps the configuration asks for over `n` samples.
    pub fn planned_steps(&self, n: usize) -> u64 {
        let per_epoch = (n / self.config.batch_size) as u64;
        self.config.max_steps.unwrap_or(per_epoch * self.config.epochs as u64)
    }

    /// Sample order of one epoch; depends only on the seed and epoch index.
    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx
    }

    /// Runs steps from `self.step` up to the planned total, calling
    /// `observe` after each one. Partial final batches are dropped.
    pub fn train(
        &mut self,
        samples: &[Sample],
        mut observe: impl FnMut(&Trainer, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let per_epoch = (samples.len() / self.config.batch_size) as u64;
        if per_epoch == 0 {
            return Err(Error::Config(format!(
                "{} samples cannot fill one batch of {}",
                samples.len(),
                self.config.batch_size
            )));
        }
        let total = self.planned_steps(samples.len());
        let mut history = Vec::new();
        let mut order: Option<(u64, Vec<usize>)> = None;
        while self.step < total {
            let epoch = self.step / per_epoch;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, self.epoch_order(samples.len(), epoch)));
            }
            let idx = &order.as_ref().unwrap().1;
            let start = ((self.step % per_epoch) as usize) * self.config.batch_size;
            let batch: Vec<&Sample> = idx[start..start + self.config.batch_size].iter().map(|&i| &samples[i]).collect();
            let targets: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.target).collect();
            let step = self.step;
            let losses = match self.config.phase {
                Phase::Pretrain => self.pretrain_step(&targets)?,
                Phase::Finetune => {
                    let inputs: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.input).collect();
                    self.finetune_step(&inputs, &targets)?
                }
            };
            if !losses.is_finite() {
                return Err(Error::Contract(format!("non-finite losses at step {step}: {losses:?}")));
            }
            let rec = LossRecord { step, losses };
            observe(self, &rec)?;
            history.push(rec);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::Preset;
    use crate::pipeline::dataset::synthetic_samples;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: Some(3),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_kv_roundtrip_and_unknown_keys() {
        let mut c = TrainConfig::default();
        c.set("lr_g", "0.001").unwrap();
        c.set("without_gdl", "true").unwrap();
        c.set("max_steps", "12").unwrap();
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        let err = c.set("learning_rate", "1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        assert!(TrainConfig::from_kv("batch_size=0").unwrap().validate().is_err());
    }

    #[test]
    fn hash_ignores_budget_but_not_seed() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.max_steps = Some(99);
        b.threads = 3;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn history_row_roundtrip() {
        let r = LossRecord {
            step: 4,
            losses: LossBundle {
                rec: 0.1,
                gan_g: 0.7,
                gan_d: 1.3,
                gdl: 0.0,
                lambda: 0.25,
                total: 0.275,
            },
        };
        assert_eq!(LossRecord::from_tsv(&r.to_tsv()).unwrap(), r);
    }

    #[test]
    fn steps_are_finite_and_deterministic() {
        let samples = synthetic_samples(5, 0, (32, 32), &Preset::ALL);
        let mut a = Trainer::new(tiny_config()).unwrap();
        let ha = a.train(&samples, |_, _| Ok(())).unwrap();
        assert_eq!(ha.len(), 3);
        assert!(ha.iter().all(|r| r.losses.is_finite() && r.losses.gdl > 0.0));
        let mut b = Trainer::new(tiny_config()).unwrap();
        let hb = b.train(&samples, |_, _| Ok(())).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn ablation_changes_only_the_gdl_term() {
        let samples = synthetic_samples(4, 1, (32, 32), &Preset::ALL);
        let cfg = TrainConfig {
            max_steps: Some(1),
            ..tiny_config()
        };
        let full = Trainer::new(cfg.clone()).unwrap().train(&samples, |_, _| Ok(())).unwrap();
        let abl = Trainer::new(TrainConfig {
            without_gdl: true,
            ..cfg
        })
        .unwrap()
        .train(&samples, |_, _| Ok(()))
        .unwrap();
        let (f, a) = (full[0].losses, abl[0].losses);
        assert_eq!((f.rec, f.gan_g, f.gan_d, f.lambda), (a.rec, a.gan_g, a.gan_d, a.lambda));
        assert_eq!(a.gdl, 0.0);
        assert!((f.total - a.total - f.gdl).abs() < 1e-12);
    }

    #[test]
    fn pretrain_uses_targets_as_inputs() {
        let samples = synthetic_samples(2, 2, (32, 32), &Preset::ALL);
        let mut t = Trainer::new(TrainConfig {
            phase: Phase::Pretrain,
            max_steps: Some(1),
            ..tiny_config()
        })
        .unwrap();
        let h = t.train(&samples, |_, _| Ok(())).unwrap();
        assert_eq!(h[0].losses.gdl, 0.0);
        assert!((h[0].losses.total - h[0].losses.rec - h[0].losses.lambda * h[0].losses.gan_g).abs() < 1e-12);
    }
}
