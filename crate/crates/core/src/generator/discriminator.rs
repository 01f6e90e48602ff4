//! Patch discriminator: strided 4x4 convolutions with leaky rectifiers,
//! ending in a one-channel map where each logit judges a receptive-field
//! patch of the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ParamStore};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub image_channels: usize,
    pub extent: (usize, usize),
    /// Widths of the hidden layers. All but the last use stride 2.
    pub channels: Vec<usize>,
    pub leak: f64,
}

impl DiscriminatorConfig {
    /// 64-128-256-512 stack; a 256x256 input yields a 30x30 logit grid.
    pub fn paper() -> Self {
        DiscriminatorConfig {
            image_channels: 3,
            extent: (256, 256),
            channels: vec![64, 128, 256, 512],
            leak: 0.2,
        }
    }

    /// 32x32 input, 2x2 logit grid.
    pub fn desk() -> Self {
        DiscriminatorConfig {
            image_channels: 3,
            extent: (32, 32),
            channels: vec![16, 32, 64, 64],
            leak: 0.2,
        }
    }

    pub fn for_extent(mut self, extent: (usize, usize)) -> Self {
        self.extent = extent;
        self
    }

    fn strides(&self) -> impl Iterator<Item = usize> + '_ {
        let n = self.channels.len();
        (0..n).map(move |i| if i + 1 < n { 2 } else { 1 })
    }

    /// Spatial size of the logit map, or `None` if a layer would collapse.
    pub fn output_extent(&self) -> Option<(usize, usize)> {
        let step = |x: usize, s: usize| (x + 2).checked_sub(4).map(|v| v / s + 1);
        let (mut h, mut w) = self.extent;
        for s in self.strides().chain(std::iter::once(1)) {
            h = step(h, s)?;
            w = step(w, s)?;
        }
        Some((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.image_channels == 0 {
            return Err(Error::Config("discriminator channel widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::Config(format!("leak {} outside [0, 1)", self.leak)));
        }
        if self.output_extent().is_none() {
            return Err(Error::Config(format!("extent {:?} too small for the discriminator", self.extent)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T: Scalar = f32> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut c_in = config.image_channels;
        let mut layers = Vec::new();
        for (i, (c, s)) in config.channels.iter().zip(config.strides()).enumerate() {
            layers.push(Conv2d::new(&mut params, &format!("discriminator.conv{i}"), c_in, *c, 4, s, 1, 1.0, rng));
            c_in = *c;
        }
        let head = Conv2d::new(&mut params, "discriminator.head", c_in, 1, 4, 1, 1, 1.0, rng);
        Ok(PatchDiscriminator {
            config,
            params,
            layers,
            head,
        })
    }

    /// Logit map `[h, w]` for an image `[C, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Binding, img: Var) -> Result<Var> {
        let want = [self.config.image_channels, self.config.extent.0, self.config.extent.1];
        if tape.shape(img) != want {
            return Err(Error::dim(
                "discriminate",
                format!("image {:?}, discriminator expects {want:?}", tape.shape(img)),
            ));
        }
        let leak = lit(self.config.leak);
        let mut h = img;
        for layer in &self.layers {
            h = layer.forward(tape, b, h)?;
            h = tape.leaky_relu(h, leak);
        }
        let out = self.head.forward(tape, b, h)?;
        let s = tape.shape(out).to_vec();
        tape.reshape(out, &s[1..])
    }

    pub fn discriminate(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let out = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> PatchDiscriminator<U> {
        PatchDiscriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            head: self.head.clone(),
        }
    }
}
