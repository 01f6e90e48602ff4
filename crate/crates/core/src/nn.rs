//! Parameter storage and the small set of layers the generator,
//! capsule layer and discriminator are assembled from.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named weights. Order is stable and is the order used by
/// checkpoints and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor by name; names and shapes must match exactly.
    pub fn load_from<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let Some(id) = self.find(name) else { continue };
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "weight {name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("missing weight {}", self.names[i])));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every weight as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles for the weights of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes one weight through a different tape variable.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    /// Per-weight gradients in store order.
    pub fn grads<T: Scalar>(&self, g: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

fn init_weight<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, gain / (fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, gain, rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, b.var(self.weight), self.stride, self.pad)?;
        match self.bias {
            Some(bias) => tape.add_channel_bias(y, b.var(bias)),
            None => Ok(y),
        }
    }
}

impl Conv2d {
    /// Weight gradient for input `x: [C_in, H, W]` and output gradient
    /// `dout`, computed directly from the kernels without a tape.
    pub fn weight_grad<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>, dout: &Tensor<T>) -> Result<Tensor<T>> {
        let w = params.get(self.weight);
        let geom = ConvGeom {
            channels: x.shape()[0],
            height: x.shape()[1],
            width: x.shape()[2],
            kernel: w.shape()[2],
            stride: self.stride,
            pad: self.pad,
        };
        let c_out = w.shape()[0];
        if x.rank() != 3 || w.shape()[1] != geom.channels || dout.shape() != [c_out, geom.out_height(), geom.out_width()] {
            return Err(Error::dim(
                "conv2d_weight_grad",
                format!("input {:?}, weight {:?}, output grad {:?}", x.shape(), w.shape(), dout.shape()),
            ));
        }
        Tensor::new(w.shape(), kernels::conv2d_grad_weight(x.data(), dout.data(), c_out, &geom))
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        // Each output pixel sees roughly c_in * (k / stride)^2 inputs.
        let taps = (kernel / stride.max(1)).max(1);
        let weight = store.add(
            format!("{name}.weight"),
            init_weight(&[c_in, c_out, kernel, kernel], c_in * taps * taps, gain, rng),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = tape.conv_transpose2d(x, b.var(self.weight), self.stride, self.pad)?;
        match self.bias {
            Some(bias) => tape.add_channel_bias(y, b.var(bias)),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new();
        Conv2d::new(&mut a, "c", 2, 3, 3, 1, 1, 1.0, &mut rng);
        let mut b = ParamStore::<f32>::new();
        Conv2d::new(&mut b, "c", 2, 3, 3, 1, 1, 1.0, &mut rng);
        assert_ne!(a, b);
        b.load_from(a.iter()).unwrap();
        assert_eq!(a, b);

        let mut wrong = ParamStore::<f32>::new();
        Conv2d::new(&mut wrong, "c", 2, 4, 3, 1, 1, 1.0, &mut rng);
        assert!(wrong.load_from(a.iter()).is_err());
        let mut other = ParamStore::<f32>::new();
        Conv2d::new(&mut other, "d", 2, 3, 3, 1, 1, 1.0, &mut rng);
        assert!(other.load_from(a.iter()).is_err());
    }
}
