//! Trains the 32x32 model on synthetic underwater pairs and reports held-out
//! PSNR before and after enhancement.
//!
//! The generator first learns to reproduce clean images, then fine-tunes on
//! degraded/clean pairs starting from those weights.
//!
//! cargo run --release --example train_desk -- [pretrain_steps] [finetune_steps]

use cvgan::degrade::Preset;
use cvgan::losses::Phase;
use cvgan::metrics::psnr;
use cvgan::pipeline::{synthetic_samples, Checkpoint, Sample, TrainConfig, Trainer};

fn mean_psnr(held: &[Sample], trainer: Option<&Trainer>) -> cvgan::Result<f64> {
    let mut total = 0.0;
    for s in held {
        let y_hat = match trainer {
            Some(t) => t.model.generate(&s.input)?.map(|v| v.clamp(0.0, 1.0)),
            None => s.input.clone(),
        };
        total += psnr(&s.target, &y_hat, 1.0)?;
    }
    Ok(total / held.len() as f64)
}

fn main() -> cvgan::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("step counts are integers"));
    let pretrain_steps = args.next().unwrap_or(1000);
    let finetune_steps = args.next().unwrap_or(2000);

    let train = synthetic_samples(200, 1000, (32, 32), &Preset::ALL);
    let held = synthetic_samples(50, 50_000, (32, 32), &Preset::ALL);
    println!("degraded held-out PSNR {:.3} dB", mean_psnr(&held, None)?);

    let config = TrainConfig { max_steps: Some(finetune_steps), ..TrainConfig::default() };
    let mut trainer = Trainer::new(config.clone())?;

    if pretrain_steps > 0 {
        let clean: Vec<Sample> = train.iter().map(|s| Sample { input: s.target.clone(), ..s.clone() }).collect();
        let mut pre = Trainer::new(TrainConfig { phase: Phase::Pretrain, max_steps: Some(pretrain_steps), ..config })?;
        pre.train(&clean, |_, _| Ok(()))?;
        Checkpoint::from_trainer(&pre).load_weights(&mut trainer)?;
        println!("after {pretrain_steps} pretraining steps: {:.3} dB", mean_psnr(&held, Some(&pre))?);
    }

    trainer.train(&train, |t, r| {
        if (r.step + 1) % 500 == 0 {
            println!(
                "step {:>5}  rec {:.4}  gdl {:.4}  lambda {:.3}  held-out {:.3} dB",
                r.step + 1,
                r.losses.rec,
                r.losses.gdl,
                r.losses.lambda,
                mean_psnr(&held, Some(t))?
            );
        }
        Ok(())
    })?;
    println!("enhanced held-out PSNR {:.3} dB", mean_psnr(&held, Some(&trainer))?);
    Ok(())
}
