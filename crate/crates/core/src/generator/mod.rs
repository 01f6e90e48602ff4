//! Encoder, quantization layer and decoder assembled into the generator,
//! plus the patch discriminator and the on-disk latent codec.
//!
//! The encoder and the [`Decompressor`] (quantizer + decoder) own disjoint
//! weight stores and share no skip connections, so a latent file can be
//! decoded with the encoder absent.

pub mod blocks;
pub mod codec;
pub mod discriminator;

use rand::Rng;

use crate::capsule::{vq_quantize_map, CapsuleLayer, CapsuleLayerConfig, CapsuleOutput, Codebook};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use blocks::{AttnBlock, Downsample, ResnetBlock, Upsample};
pub use codec::{compress, compression_factor, decompress, LatentCode};
pub use discriminator::{DiscriminatorConfig, PatchDiscriminator};

/// One encoder block; the decoder mirrors the list in reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub attention: bool,
    /// Downsample (encoder) / upsample (decoder) by 2 at the end of the block.
    pub resample: bool,
}

impl BlockSpec {
    pub const fn new(channels: usize, attention: bool, resample: bool) -> Self {
        BlockSpec {
            channels,
            attention,
            resample,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantizerKind {
    Capsule(CapsuleLayerConfig),
    /// Nearest-neighbour code-book over latent vectors (`M = latent_channels`).
    Codebook { entries: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub image_channels: usize,
    /// Input extent `(H, W)`.
    pub extent: (usize, usize),
    /// Width of the stem convolution.
    pub base_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Encoder output channels `c_z`.
    pub latent_channels: usize,
    pub quantizer: QuantizerKind,
}

impl GeneratorConfig {
    /// 3x256x256 images, six blocks, four of which halve the extent, so the
    /// latent is 256x16x16. Attention sits in the two 16x16 blocks.
    pub fn paper() -> Self {
        GeneratorConfig {
            image_channels: 3,
            extent: (256, 256),
            base_channels: 128,
            blocks: vec![
                BlockSpec::new(128, false, true),
                BlockSpec::new(128, false, true),
                BlockSpec::new(256, false, true),
                BlockSpec::new(256, false, true),
                BlockSpec::new(512, true, false),
                BlockSpec::new(512, true, false),
            ],
            latent_channels: 256,
            quantizer: QuantizerKind::Capsule(CapsuleLayerConfig::paper()),
        }
    }

    /// 3x32x32 images, two downsampling blocks, latent 16x8x8. Attention
    /// runs only in the second, 16x16 block.
    pub fn desk() -> Self {
        GeneratorConfig {
            image_channels: 3,
            extent: (32, 32),
            base_channels: 16,
            blocks: vec![BlockSpec::new(16, false, true), BlockSpec::new(32, true, true)],
            latent_channels: 16,
            quantizer: QuantizerKind::Capsule(CapsuleLayerConfig::desk()),
        }
    }

    /// An 8x8 model small enough for finite-difference checks of every weight.
    pub fn tiny() -> Self {
        GeneratorConfig {
            image_channels: 3,
            extent: (8, 8),
            base_channels: 2,
            blocks: vec![BlockSpec::new(3, true, true)],
            latent_channels: 4,
            quantizer: QuantizerKind::Capsule(CapsuleLayerConfig {
                beta: 2,
                d_u: 2,
                d_a: 3,
                alpha: 3,
                in_channels: 4,
                in_extent: (4, 4),
                kernel: 2,
                out_channels: 4,
                detach_coupling: false,
            }),
        }
    }

    /// Same geometry with every block and stem width divided by `divisor`
    /// (latent and quantizer untouched).
    pub fn narrowed(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        self.base_channels = (self.base_channels / d).max(1);
        for b in &mut self.blocks {
            b.channels = (b.channels / d).max(1);
        }
        self
    }

    /// Swaps the capsule layer for a code-book of `entries` vectors.
    pub fn with_codebook(mut self, entries: usize) -> Self {
        self.quantizer = QuantizerKind::Codebook { entries };
        self
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.blocks.iter().filter(|b| b.resample).count()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.extent.0, self.extent.1]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let f = self.downsample_factor();
        [self.latent_channels, self.extent.0 / f, self.extent.1 / f]
    }

    /// Shape of the quantizer output fed to the decoder.
    pub fn decoder_input_shape(&self) -> [usize; 3] {
        let [c, h, w] = self.latent_shape();
        match &self.quantizer {
            QuantizerKind::Capsule(cfg) => [cfg.out_channels, h, w],
            QuantizerKind::Codebook { .. } => [c, h, w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("generator needs at least one block".into()));
        }
        if self.image_channels == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("generator channel counts must be >= 1".into()));
        }
        if self.blocks.iter().any(|b| b.channels == 0) {
            return Err(Error::Config("block channels must be >= 1".into()));
        }
        let f = self.downsample_factor();
        let (h, w) = self.extent;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("extent {h}x{w} not divisible by downsample factor {f}")));
        }
        let [c_z, h_z, w_z] = self.latent_shape();
        match &self.quantizer {
            QuantizerKind::Capsule(cfg) => {
                cfg.validate()?;
                if cfg.in_channels != c_z || cfg.in_extent != (h_z, w_z) {
                    return Err(Error::Config(format!(
                        "capsule layer expects {}x{}x{}, encoder produces {c_z}x{h_z}x{w_z}",
                        cfg.in_channels, cfg.in_extent.0, cfg.in_extent.1
                    )));
                }
            }
            QuantizerKind::Codebook { entries } if *entries == 0 => {
                return Err(Error::Config("code-book needs at least one entry".into()));
            }
            QuantizerKind::Codebook { .. } => {}
        }
        Ok(())
    }
}

fn check_input(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::dim(op, format!("input {got:?}, model expects {want:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct EncoderStage {
    resnet: ResnetBlock,
    attn: Option<AttnBlock>,
    down: Option<Downsample>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar = f32> {
    pub params: ParamStore<T>,
    input_shape: [usize; 3],
    conv_in: Conv2d,
    stages: Vec<EncoderStage>,
    conv_out: Conv2d,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let conv_in = Conv2d::new(&mut p, "encoder.conv_in", config.image_channels, config.base_channels, 3, 1, 1, 1.0, rng);
        let mut ch = config.base_channels;
        let mut stages = Vec::with_capacity(config.blocks.len());
        for (i, b) in config.blocks.iter().enumerate() {
            let name = format!("encoder.block{i}");
            let resnet = ResnetBlock::new(&mut p, &format!("{name}.resnet"), ch, b.channels, rng);
            ch = b.channels;
            let attn = b.attention.then(|| AttnBlock::new(&mut p, &format!("{name}.attn"), ch, rng));
            let down = b.resample.then(|| Downsample::new(&mut p, &format!("{name}.down"), ch, rng));
            stages.push(EncoderStage { resnet, attn, down });
        }
        let conv_out = Conv2d::new(&mut p, "encoder.conv_out", ch, config.latent_channels, 3, 1, 1, 1.0, rng);
        Ok(Encoder {
            params: p,
            input_shape: config.image_shape(),
            conv_in,
            stages,
            conv_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        check_input("encode", tape.shape(x), &self.input_shape)?;
        let mut h = self.conv_in.forward(tape, b, x)?;
        for s in &self.stages {
            h = s.resnet.forward(tape, b, h)?;
            if let Some(a) = &s.attn {
                h = a.forward(tape, b, h)?;
            }
            if let Some(d) = &s.down {
                h = d.forward(tape, b, h)?;
            }
        }
        let h = tape.silu(h);
        self.conv_out.forward(tape, b, h)
    }

    pub fn encode(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(y.clone());
        let z = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(z).clone())
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    resnet: ResnetBlock,
    attn: Option<AttnBlock>,
    up: Option<Upsample>,
}

/// Tape handles of a decoder pass. `last_input` feeds the final convolution,
/// whose weight gradients drive the adaptive adversarial weight.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub y_hat: Var,
    pub last_input: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Scalar = f32> {
    pub params: ParamStore<T>,
    input_shape: [usize; 3],
    conv_in: Conv2d,
    stages: Vec<DecoderStage>,
    conv_out: Conv2d,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let input_shape = config.decoder_input_shape();
        let mut ch = config.blocks.last().unwrap().channels;
        let conv_in = Conv2d::new(&mut p, "decoder.conv_in", input_shape[0], ch, 3, 1, 1, 1.0, rng);
        let mut stages = Vec::with_capacity(config.blocks.len());
        for (i, b) in config.blocks.iter().enumerate().rev() {
            let name = format!("decoder.block{i}");
            let resnet = ResnetBlock::new(&mut p, &format!("{name}.resnet"), ch, b.channels, rng);
            ch = b.channels;
            let attn = b.attention.then(|| AttnBlock::new(&mut p, &format!("{name}.attn"), ch, rng));
            let up = b.resample.then(|| Upsample::new(&mut p, &format!("{name}.up"), ch, rng));
            stages.push(DecoderStage { resnet, attn, up });
        }
        let conv_out = Conv2d::new(&mut p, "decoder.conv_out", ch, config.image_channels, 3, 1, 1, 1.0, rng);
        Ok(Decoder {
            params: p,
            input_shape,
            conv_in,
            stages,
            conv_out,
        })
    }

    /// The final convolution, the layer the adaptive weight is measured at.
    pub fn last_layer(&self) -> &Conv2d {
        &self.conv_out
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &Binding, c: Var) -> Result<DecoderOutput> {
        check_input("decode", tape.shape(c), &self.input_shape)?;
        let mut h = self.conv_in.forward(tape, b, c)?;
        for s in &self.stages {
            h = s.resnet.forward(tape, b, h)?;
            if let Some(a) = &s.attn {
                h = a.forward(tape, b, h)?;
            }
            if let Some(u) = &s.up {
                h = u.forward(tape, b, h)?;
            }
        }
        let last_input = tape.silu(h);
        let y_hat = self.conv_out.forward(tape, b, last_input)?;
        Ok(DecoderOutput { y_hat, last_input })
    }
}

#[derive(Debug, Clone)]
pub enum Quantizer<T: Scalar = f32> {
    Capsule { layer: CapsuleLayer, params: ParamStore<T> },
    Codebook(Codebook<T>),
}

/// Result of quantizing one latent map on a tape.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub c: Var,
    /// Capsule intermediates (absent for the code-book baseline).
    pub capsule: Option<CapsuleOutput>,
    /// Code-book indices (absent for the capsule layer).
    pub indices: Option<Vec<usize>>,
}

impl<T: Scalar> Quantizer<T> {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        match &config.quantizer {
            QuantizerKind::Capsule(cfg) => {
                let mut params = ParamStore::new();
                let layer = CapsuleLayer::new(cfg.clone(), &mut params, rng)?;
                Ok(Quantizer::Capsule { layer, params })
            }
            QuantizerKind::Codebook { entries } => Ok(Quantizer::Codebook(Codebook::random(
                *entries,
                config.latent_channels,
                rng,
            )?)),
        }
    }

    /// Trainable weights; the code-book has none.
    pub fn params(&self) -> Option<&ParamStore<T>> {
        match self {
            Quantizer::Capsule { params, .. } => Some(params),
            Quantizer::Codebook(_) => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamStore<T>> {
        match self {
            Quantizer::Capsule { params, .. } => Some(params),
            Quantizer::Codebook(_) => None,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Option<Binding> {
        self.params().map(|p| p.bind(tape, trainable))
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: Option<&Binding>, z: Var) -> Result<Quantized> {
        match (self, b) {
            (Quantizer::Capsule { layer, .. }, Some(b)) => {
                let out = layer.forward(tape, b, z)?;
                Ok(Quantized {
                    c: out.c,
                    capsule: Some(out),
                    indices: None,
                })
            }
            (Quantizer::Capsule { .. }, None) => Err(Error::Contract("capsule layer used without its weights".into())),
            (Quantizer::Codebook(cb), _) => {
                let (c, idx) = vq_quantize_map(tape, z, cb)?;
                Ok(Quantized {
                    c,
                    capsule: None,
                    indices: Some(idx),
                })
            }
        }
    }
}

/// Everything needed to turn a latent code back into an image.
#[derive(Debug, Clone)]
pub struct Decompressor<T: Scalar = f32> {
    pub config: GeneratorConfig,
    pub quantizer: Quantizer<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Decompressor<T> {
    pub fn new<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Decompressor {
            config: config.clone(),
            quantizer: Quantizer::new(config, rng)?,
            decoder: Decoder::new(config, rng)?,
        })
    }

    /// Quantizer output for latent `z`.
    pub fn quantize(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let qb = self.quantizer.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let q = self.quantizer.forward(&mut tape, qb.as_ref(), zv)?;
        Ok(tape.value(q.c).clone())
    }

    pub fn decode(&self, c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.decoder.params.bind(&mut tape, false);
        let cv = tape.constant(c.clone());
        let out = self.decoder.forward(&mut tape, &b, cv)?;
        Ok(tape.value(out.y_hat).clone())
    }

    /// `decode(quantize(z))`.
    pub fn reconstruct(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_input("decompress", z.shape(), &self.config.latent_shape())?;
        self.decode(&self.quantize(z)?)
    }

    /// Loads quantizer and decoder weights by name, ignoring anything else
    /// (encoder or discriminator sections of a full checkpoint).
    pub fn load_weights<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)> + Clone) -> Result<()> {
        if let Some(p) = self.quantizer.params_mut() {
            p.load_from(entries.clone())?;
        }
        self.decoder.params.load_from(entries)
    }
}

/// Tape bindings for one generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorBinding {
    pub encoder: Binding,
    pub quantizer: Option<Binding>,
    pub decoder: Binding,
}

#[derive(Debug, Clone)]
pub struct GeneratorPass {
    pub z: Var,
    pub quantized: Quantized,
    pub y_hat: Var,
    pub last_input: Var,
}

#[derive(Debug, Clone)]
pub struct GeneratorModel<T: Scalar = f32> {
    pub config: GeneratorConfig,
    pub encoder: Encoder<T>,
    pub decompressor: Decompressor<T>,
}

impl<T: Scalar> GeneratorModel<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(&config, rng)?;
        let decompressor = Decompressor::new(&config, rng)?;
        Ok(GeneratorModel {
            config,
            encoder,
            decompressor,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> GeneratorBinding {
        GeneratorBinding {
            encoder: self.encoder.params.bind(tape, trainable),
            quantizer: self.decompressor.quantizer.bind(tape, trainable),
            decoder: self.decompressor.decoder.params.bind(tape, trainable),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &GeneratorBinding, y: Var) -> Result<GeneratorPass> {
        let z = self.encoder.forward(tape, &b.encoder, y)?;
        let quantized = self.decompressor.quantizer.forward(tape, b.quantizer.as_ref(), z)?;
        let out = self.decompressor.decoder.forward(tape, &b.decoder, quantized.c)?;
        Ok(GeneratorPass {
            z,
            quantized,
            y_hat: out.y_hat,
            last_input: out.last_input,
        })
    }

    pub fn encode(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.encode(y)
    }

    /// Quantizer forward on a latent map.
    pub fn quantize(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.decompressor.quantize(z)
    }

    pub fn decode(&self, c: &Tensor<T>) -> Result<Tensor<T>> {
        self.decompressor.decode(c)
    }

    /// `decode(quantize(encode(y)))`, evaluated stage by stage exactly as
    /// decompression does, so both paths agree bitwise.
    pub fn generate(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.decompressor.reconstruct(&self.encode(y)?)
    }

    /// Weight stores in a fixed order: encoder, quantizer (if trainable), decoder.
    pub fn param_stores(&self) -> Vec<&ParamStore<T>> {
        let mut v = vec![&self.encoder.params];
        v.extend(self.decompressor.quantizer.params());
        v.push(&self.decompressor.decoder.params);
        v
    }

    pub fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<T>> {
        let mut v = vec![&mut self.encoder.params];
        v.extend(self.decompressor.quantizer.params_mut());
        v.push(&mut self.decompressor.decoder.params);
        v
    }

    pub fn num_params(&self) -> usize {
        self.param_stores().iter().map(|p| p.num_scalars()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorModel<U> {
        let quantizer = match &self.decompressor.quantizer {
            Quantizer::Capsule { layer, params } => Quantizer::Capsule {
                layer: layer.clone(),
                params: params.cast(),
            },
            Quantizer::Codebook(cb) => Quantizer::Codebook(Codebook::from_tensor(cb.entries().cast())),
        };
        GeneratorModel {
            config: self.config.clone(),
            encoder: Encoder {
                params: self.encoder.params.cast(),
                input_shape: self.encoder.input_shape,
                conv_in: self.encoder.conv_in.clone(),
                stages: self.encoder.stages.clone(),
                conv_out: self.encoder.conv_out.clone(),
            },
            decompressor: Decompressor {
                config: self.config.clone(),
                quantizer,
                decoder: Decoder {
                    params: self.decompressor.decoder.params.cast(),
                    input_shape: self.decompressor.decoder.input_shape,
                    conv_in: self.decompressor.decoder.conv_in.clone(),
                    stages: self.decompressor.decoder.stages.clone(),
                    conv_out: self.decompressor.decoder.conv_out.clone(),
                },
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_coords;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn desk_shapes() {
        let cfg = GeneratorConfig::desk();
        assert_eq!(cfg.latent_shape(), [16, 8, 8]);
        let model = GeneratorModel::<f32>::new(cfg, &mut rng(0)).unwrap();
        let y = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(1));
        let z = model.encode(&y).unwrap();
        assert_eq!(z.shape(), &[16, 8, 8]);
        let c = model.quantize(&z).unwrap();
        assert_eq!(c.shape(), &[16, 8, 8]);
        let out = model.decode(&c).unwrap();
        assert_eq!(out.shape(), &[3, 32, 32]);
        assert!(out.all_finite());
    }

    #[test]
    fn paper_geometry_with_narrow_blocks() {
        let cfg = GeneratorConfig::paper().narrowed(16);
        assert_eq!(cfg.latent_shape(), [256, 16, 16]);
        assert_eq!(cfg.decoder_input_shape(), [256, 16, 16]);
        let model = GeneratorModel::<f32>::new(cfg, &mut rng(0)).unwrap();
        let y = Tensor::rand_uniform(&[3, 256, 256], 0.0, 1.0, &mut rng(1));
        let z = model.encode(&y).unwrap();
        assert_eq!(z.shape(), &[256, 16, 16]);
        let out = model.generate(&y).unwrap();
        assert_eq!(out.shape(), &[3, 256, 256]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let model = GeneratorModel::<f32>::new(GeneratorConfig::desk(), &mut rng(3)).unwrap();
        let y = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(4));
        assert_eq!(model.encode(&y).unwrap(), model.encode(&y.clone()).unwrap());
        let again = GeneratorModel::<f32>::new(GeneratorConfig::desk(), &mut rng(3)).unwrap();
        assert_eq!(model.generate(&y).unwrap(), again.generate(&y).unwrap());
    }

    #[test]
    fn wrong_extent_is_a_dimension_error() {
        let model = GeneratorModel::<f32>::new(GeneratorConfig::desk(), &mut rng(0)).unwrap();
        let y = Tensor::zeros(&[3, 16, 16]);
        assert!(matches!(model.encode(&y), Err(Error::Dimension { .. })));
        let c = Tensor::zeros(&[16, 4, 4]);
        assert!(matches!(model.decode(&c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_decoder_weights_give_zero_output() {
        let mut model = GeneratorModel::<f64>::new(GeneratorConfig::tiny(), &mut rng(0)).unwrap();
        for t in model.decompressor.decoder.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = model.decode(&Tensor::zeros(&[4, 4, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompressor_runs_without_encoder() {
        let model = GeneratorModel::<f32>::new(GeneratorConfig::desk(), &mut rng(5)).unwrap();
        let y = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(6));
        let z = model.encode(&y).unwrap();
        let want = model.generate(&y).unwrap();
        let names: Vec<(String, Tensor<f32>)> = model
            .param_stores()
            .iter()
            .flat_map(|s| s.iter().map(|(n, t)| (n.to_string(), t.clone())))
            .collect();
        drop(model);
        let mut fresh = Decompressor::<f32>::new(&GeneratorConfig::desk(), &mut rng(99)).unwrap();
        fresh.load_weights(names.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(fresh.reconstruct(&z).unwrap(), want);
    }

    #[test]
    fn codebook_variant_shapes() {
        let cfg = GeneratorConfig::desk().with_codebook(32);
        let model = GeneratorModel::<f32>::new(cfg, &mut rng(0)).unwrap();
        let y = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng(1));
        assert_eq!(model.generate(&y).unwrap().shape(), &[3, 32, 32]);
        assert_eq!(model.param_stores().len(), 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = GeneratorConfig::desk();
        cfg.extent = (30, 30);
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::desk();
        cfg.latent_channels = 8;
        assert!(cfg.validate().is_err());
        assert!(GeneratorConfig::desk().with_codebook(0).validate().is_err());
    }

    #[test]
    fn end_to_end_gradient_on_probe_weights() {
        let model = GeneratorModel::<f64>::new(GeneratorConfig::tiny(), &mut rng(11)).unwrap();
        let y = Tensor::<f64>::rand_uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(12));
        let id = model.encoder.params.find("encoder.block0.resnet.conv1.weight").unwrap();
        let probe = model.encoder.params.get(id).clone();
        let f = |tape: &mut Tape<f64>, w: Var| -> Result<Var> {
            let mut b = model.bind(tape, false);
            b.encoder.replace(id, w);
            let x = tape.constant(y.clone());
            let pass = model.forward(tape, &b, x)?;
            Ok(tape.sum(pass.y_hat))
        };
        let coords: Vec<usize> = (0..probe.len()).step_by(5).collect();
        let report = finite_diff_check_coords(f, &probe, 1e-5, &coords).unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }
}
