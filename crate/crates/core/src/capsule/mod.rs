//! Capsule quantization layer: per-capsule convolutional views of the
//! latent map, routing-by-agreement at every spatial location, L1
//! aggregation of the routed vectors and a transposed convolution back to
//! the decoder's input extent.
//!
//! The code-book quantizer in [`codebook`] is the non-differentiable
//! baseline this layer replaces.

pub mod codebook;
pub mod routing;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ConvTranspose2d, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use codebook::{nearest_indices, vq_quantize, vq_quantize_map, Codebook};
pub use routing::{coupling, predict, route, squash, squash_vector, weighted_sum, Routed, RoutingOptions, RoutingStep};

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleLayerConfig {
    /// Number of capsules, used for both the child and the parent layer.
    pub beta: usize,
    /// Digits per child capsule vector.
    pub d_u: usize,
    /// Digits per routed (parent) capsule vector.
    pub d_a: usize,
    /// Routing iterations.
    pub alpha: usize,
    /// Channels of the encoder output feeding the layer.
    pub in_channels: usize,
    /// Spatial extent `(h_z, w_z)` of the encoder output.
    pub in_extent: (usize, usize),
    /// Kernel of the per-capsule convolutions; the closing transposed
    /// convolution uses the same kernel so the output extent equals `in_extent`.
    pub kernel: usize,
    /// Channels of the layer output handed to the decoder.
    pub out_channels: usize,
    pub detach_coupling: bool,
}

impl CapsuleLayerConfig {
    /// 32 capsules of 16 digits routed 3 times into 64-digit vectors over a
    /// 256x16x16 latent, giving U 32x16x9x9, V 32x64x9x9 and C 256x16x16.
    pub fn paper() -> Self {
        CapsuleLayerConfig {
            beta: 32,
            d_u: 16,
            d_a: 64,
            alpha: 3,
            in_channels: 256,
            in_extent: (16, 16),
            kernel: 8,
            out_channels: 256,
            detach_coupling: false,
        }
    }

    /// Desk-scale layer over a 16x8x8 latent: 4 capsules, 4 -> 8 digits,
    /// 1x1 capsule kernels, so the capsule grid is the full 8x8.
    pub fn desk() -> Self {
        CapsuleLayerConfig {
            beta: 4,
            d_u: 4,
            d_a: 8,
            alpha: 3,
            in_channels: 16,
            in_extent: (8, 8),
            kernel: 1,
            out_channels: 16,
            detach_coupling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta == 0 || self.alpha == 0 || self.d_u == 0 || self.d_a == 0 {
            return Err(Error::Config(format!(
                "capsule layer needs beta, alpha, d_u, d_a >= 1 (got {}, {}, {}, {})",
                self.beta, self.alpha, self.d_u, self.d_a
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(Error::Config("capsule layer channels and kernel must be >= 1".into()));
        }
        if self.kernel > self.in_extent.0 || self.kernel > self.in_extent.1 {
            return Err(Error::Config(format!(
                "capsule kernel {} larger than latent extent {:?}",
                self.kernel, self.in_extent
            )));
        }
        Ok(())
    }

    /// Spatial extent `(h, w)` of the capsule grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.in_extent.0 - self.kernel + 1, self.in_extent.1 - self.kernel + 1)
    }

    pub fn u_shape(&self) -> [usize; 4] {
        let (h, w) = self.grid();
        [self.beta, self.d_u, h, w]
    }

    pub fn v_shape(&self) -> [usize; 4] {
        let (h, w) = self.grid();
        [self.beta, self.d_a, h, w]
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_extent.0, self.in_extent.1]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_extent.0, self.in_extent.1]
    }

    pub fn routing_options(&self) -> RoutingOptions {
        RoutingOptions {
            iterations: self.alpha,
            detach_coupling: self.detach_coupling,
            squash_eps: routing::SQUASH_EPS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CapsuleLayer {
    pub config: CapsuleLayerConfig,
    /// The `beta` per-capsule convolutions, stacked along the output axis:
    /// capsule `i` owns output channels `i * d_u .. (i + 1) * d_u`.
    pub capsule_convs: Conv2d,
    /// Transform `[beta, beta, d_u, d_a]`, shared across locations.
    pub transform: ParamId,
    pub output: ConvTranspose2d,
}

/// Intermediate tensors of one capsule-layer forward pass.
#[derive(Debug, Clone)]
pub struct CapsuleOutput {
    /// `[beta, d_u, h, w]`
    pub u: Var,
    /// `[beta, d_a, h, w]`
    pub v: Var,
    /// L1 norms of the routed vectors, `[beta, h, w]`
    pub aggregated: Var,
    /// `[out_channels, h_z, w_z]`
    pub c: Var,
    pub routing: Routed,
}

impl CapsuleLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: CapsuleLayerConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let capsule_convs = Conv2d::new(
            store,
            "capsule.views",
            config.in_channels,
            config.beta * config.d_u,
            k,
            1,
            0,
            1.0,
            rng,
        );
        // Parents sum beta weighted predictions; keep their scale O(1).
        let std = 1.0 / (config.d_u as f64).sqrt();
        let transform = store.add(
            "capsule.transform",
            Tensor::randn(&[config.beta, config.beta, config.d_u, config.d_a], std, rng),
        );
        let output = ConvTranspose2d::new(store, "capsule.output", config.beta, config.out_channels, k, 1, 0, 1.0, rng);
        Ok(CapsuleLayer {
            config,
            capsule_convs,
            transform,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, z: Var) -> Result<CapsuleOutput> {
        let cfg = &self.config;
        if tape.shape(z) != cfg.input_shape() {
            return Err(Error::dim(
                "capsule_forward",
                format!("latent {:?}, layer expects {:?}", tape.shape(z), cfg.input_shape()),
            ));
        }
        let (h, w) = cfg.grid();
        let locations = h * w;

        let views = self.capsule_convs.forward(tape, b, z)?;
        let u = tape.reshape(views, &cfg.u_shape())?;
        let flat = tape.reshape(views, &[cfg.beta, cfg.d_u, locations])?;
        let per_loc = tape.permute(flat, &[2, 0, 1])?;

        let u_hat = predict(tape, per_loc, b.var(self.transform))?;
        let routing = route(tape, u_hat, &cfg.routing_options())?;

        let v_flat = tape.permute(routing.v, &[1, 2, 0])?;
        let v = tape.reshape(v_flat, &cfg.v_shape())?;
        let aggregated = tape.reduce_norm(v, 1, 1)?;
        let c = self.output.forward(tape, b, aggregated)?;
        Ok(CapsuleOutput {
            u,
            v,
            aggregated,
            c,
            routing,
        })
    }
}
