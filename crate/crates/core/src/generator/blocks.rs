//! Encoder/decoder building blocks: residual block, single-head spatial
//! self-attention, strided-conv downsampling and nearest+conv upsampling.
//! No normalization layers; residual branches start small instead.

use rand::Rng;

use crate::error::Result;
use crate::nn::{Binding, Conv2d, ParamId, ParamStore};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ResnetBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResnetBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, 1.0, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, 0.5, rng);
        let skip = (c_in != c_out).then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, 1.0, rng));
        ResnetBlock { conv1, conv2, skip }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = tape.silu(x);
        let h = self.conv1.forward(tape, b, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, b, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(tape, b, x)?,
            None => x,
        };
        tape.add(skip, h)
    }
}

/// Dot-product attention across all spatial positions of a `[C, H, W]` map.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    channels: usize,
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    proj: (ParamId, ParamId),
}

impl AttnBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        let mut linear = |part: &str, gain: f64| {
            let w = store.add(format!("{name}.{part}.weight"), Tensor::randn(&[channels, channels], gain * std, rng));
            let b = store.add(format!("{name}.{part}.bias"), Tensor::zeros(&[channels]));
            (w, b)
        };
        let q = linear("q", 1.0);
        let k = linear("k", 1.0);
        let v = linear("v", 1.0);
        let proj = linear("proj", 0.5);
        AttnBlock { channels, q, k, v, proj }
    }

    fn linear<T: Scalar>(tape: &mut Tape<T>, b: &Binding, p: (ParamId, ParamId), x: Var) -> Result<Var> {
        let y = tape.matmul(b.var(p.0), x)?;
        tape.add_channel_bias(y, b.var(p.1))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let n = shape[1] * shape[2];
        let flat = tape.reshape(x, &[self.channels, n])?;
        let q = Self::linear(tape, b, self.q, flat)?;
        let k = Self::linear(tape, b, self.k, flat)?;
        let v = Self::linear(tape, b, self.v, flat)?;
        let qt = tape.permute(q, &[1, 0])?;
        let scores = tape.matmul(qt, k)?;
        let scores = tape.scale(scores, lit(1.0 / (self.channels as f64).sqrt()));
        let weights = tape.softmax(scores, 1)?;
        let wt = tape.permute(weights, &[1, 0])?;
        let attended = tape.matmul(v, wt)?;
        let out = Self::linear(tape, b, self.proj, attended)?;
        let out = tape.reshape(out, &shape)?;
        tape.add(x, out)
    }
}

/// Halves the spatial extent with a 3x3 stride-2 convolution.
#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Downsample {
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, 3, 2, 1, 1.0, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        self.conv.forward(tape, b, x)
    }
}

/// Doubles the spatial extent: nearest-neighbour then 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        Upsample {
            conv: Conv2d::new(store, &format!("{name}.conv"), channels, channels, 3, 1, 1, 1.0, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let up = tape.upsample_nearest2x(x)?;
        self.conv.forward(tape, b, up)
    }
}
