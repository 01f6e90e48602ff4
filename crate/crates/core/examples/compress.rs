//! Compresses an image to a latent code file, reads it back and checks the
//! decoded image against running the generator directly.
//!
//! cargo run --release --example compress

use cvgan::degrade::{synth_pair, Preset};
use cvgan::generator::{compress, compression_factor, decompress, GeneratorConfig, GeneratorModel, LatentCode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cvgan::Result<()> {
    let config = GeneratorConfig::desk();
    let model = GeneratorModel::<f32>::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let (_, degraded) = synth_pair(1, Preset::Greenish, config.extent);

    let path = std::env::temp_dir().join("cvgan_example.cvl");
    compress(&model, &degraded)?.write(&path)?;
    let code = LatentCode::read(&path)?;
    let decoded = decompress(&model.decompressor, &code)?;
    let direct = model.generate(&degraded)?;
    let identical = decoded.data().iter().zip(direct.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    println!("latent shape {:?}, {} payload bytes", code.shape(), code.payload_bytes());
    println!("desk compression factor {:.3}", compression_factor(&config.image_shape(), code.shape())?);
    println!(
        "paper compression factor {:.3}",
        compression_factor(&[3, 256, 256], &GeneratorConfig::paper().latent_shape())?
    );
    println!("decoded == generated: {identical}");
    Ok(())
}
