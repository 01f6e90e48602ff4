//! Data ingestion, the training loop, checkpoints and their on-disk
//! bookkeeping.

pub mod checkpoint;
pub mod dataset;
pub mod image;
pub mod optim;
pub mod train;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use checkpoint::Checkpoint;
pub use dataset::{load_dataset, synthetic_samples, PairPaths, PairedDataset, Sample, SkipRecord};
pub use image::{load_image, load_image_resized, resize_bilinear, save_image};
pub use optim::{Adam, AdamConfig};
pub use train::{LossRecord, ModelPreset, TrainConfig, Trainer, HISTORY_HEADER};

pub const HISTORY_FILE: &str = "history.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cvg";
pub const CONFIG_FILE: &str = "config.txt";

/// Reads a loss-history file written by [`run_training`].
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line != HISTORY_HEADER {
                return Err(Error::Format(format!("{}: unexpected header {line:?}", path.display())));
            }
            continue;
        }
        if !line.is_empty() {
            out.push(LossRecord::from_tsv(&line)?);
        }
    }
    Ok(out)
}

fn write_history(path: &Path, rows: &[LossRecord]) -> Result<()> {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_tsv());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Records produced by this invocation (not the resumed prefix).
    pub history: Vec<LossRecord>,
    pub history_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains into `out_dir`: `config.txt` with the resolved configuration,
/// `history.tsv` appended after every step and `checkpoint.cvg` written
/// every `checkpoint_every` steps and at the end. With `resume`, an
/// existing checkpoint is restored first (its configuration hash must
/// match) and history rows past its step are discarded.
pub fn run_training(config: TrainConfig, samples: &[Sample], out_dir: impl AsRef<Path>, resume: bool) -> Result<(Trainer, TrainOutcome)> {
    train_into(config, samples, out_dir.as_ref(), resume, |_| Ok(()))
}

/// Like [`run_training`] without resuming, but `init` may modify the fresh
/// trainer first, e.g. to load weights from an earlier phase.
pub fn run_training_from(
    config: TrainConfig,
    samples: &[Sample],
    out_dir: impl AsRef<Path>,
    init: impl FnOnce(&mut Trainer) -> Result<()>,
) -> Result<(Trainer, TrainOutcome)> {
    train_into(config, samples, out_dir.as_ref(), false, init)
}

fn train_into(
    config: TrainConfig,
    samples: &[Sample],
    out_dir: &Path,
    resume: bool,
    init: impl FnOnce(&mut Trainer) -> Result<()>,
) -> Result<(Trainer, TrainOutcome)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let history_path = out_dir.join(HISTORY_FILE);
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let config_path = out_dir.join(CONFIG_FILE);

    let mut trainer = Trainer::new(config)?;
    init(&mut trainer)?;
    let prefix = if resume && checkpoint_path.exists() {
        let ck = Checkpoint::load(&checkpoint_path)?;
        ck.restore(&mut trainer)?;
        let kept: Vec<LossRecord> = if history_path.exists() {
            read_history(&history_path)?.into_iter().filter(|r| r.step < ck.step).collect()
        } else {
            Vec::new()
        };
        log::info!("resuming at step {}", ck.step);
        kept
    } else {
        Vec::new()
    };
    write_history(&history_path, &prefix)?;
    std::fs::write(&config_path, trainer.config.to_kv()).map_err(|e| Error::io(&config_path, e))?;
    log::info!("resolved config:\n{}", trainer.config.to_kv());

    let mut sink = OpenOptions::new()
        .append(true)
        .open(&history_path)
        .map_err(|e| Error::io(&history_path, e))?;
    let every = trainer.config.checkpoint_every;
    let history = trainer.train(samples, |t, rec| {
        writeln!(sink, "{}", rec.to_tsv()).map_err(|e| Error::io(&history_path, e))?;
        log::debug!("step {} total {:.6} lambda {:.4}", rec.step, rec.losses.total, rec.losses.lambda);
        if every > 0 && t.step % every == 0 {
            Checkpoint::from_trainer(t).save(&checkpoint_path)?;
        }
        Ok(())
    })?;
    Checkpoint::from_trainer(&trainer).save(&checkpoint_path)?;
    Ok((
        trainer,
        TrainOutcome {
            history,
            history_path,
            checkpoint_path,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::Preset;

    fn config(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            max_steps: Some(steps),
            seed: 21,
            checkpoint_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_history() {
        let samples = synthetic_samples(6, 3, (32, 32), &Preset::ALL);
        let full_dir = tempfile::tempdir().unwrap();
        run_training(config(4), &samples, full_dir.path(), false).unwrap();
        let full = read_history(full_dir.path().join(HISTORY_FILE)).unwrap();

        let split_dir = tempfile::tempdir().unwrap();
        run_training(config(2), &samples, split_dir.path(), false).unwrap();
        run_training(config(4), &samples, split_dir.path(), true).unwrap();
        let split = read_history(split_dir.path().join(HISTORY_FILE)).unwrap();
        assert_eq!(full, split);
        assert_eq!(
            std::fs::read(full_dir.path().join(CHECKPOINT_FILE)).unwrap(),
            std::fs::read(split_dir.path().join(CHECKPOINT_FILE)).unwrap()
        );
    }

    #[test]
    fn resume_with_other_config_is_refused() {
        let samples = synthetic_samples(4, 3, (32, 32), &Preset::ALL);
        let dir = tempfile::tempdir().unwrap();
        run_training(config(1), &samples, dir.path(), false).unwrap();
        let other = TrainConfig { seed: 22, ..config(2) };
        let err = run_training(other, &samples, dir.path(), true).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"), "{err}");
    }
}
