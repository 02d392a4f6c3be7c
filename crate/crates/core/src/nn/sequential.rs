use rand::Rng;

use super::layers::{Layer, LayerSpec};
use super::{Mode, Module, NnError, Param, Real, Tensor};

/// Layers applied in order.
#[derive(Debug, Clone)]
pub struct Sequential<T: Real> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn build(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self, NnError> {
        let layers = specs.iter().map(|s| Layer::build(s, rng)).collect::<Result<_, _>>()?;
        Ok(Self { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec()).collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.spec().output_shape(&s)?;
        }
        Ok(s)
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn run(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn back(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = g.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    /// State tensors named `<layer index>.<tensor>`.
    pub fn state(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, shape, v) in l.state() {
                out.push((format!("{i}.{name}"), shape, v));
            }
        }
        out
    }

    /// Loads state tensors with a lookup by the names produced by [`Sequential::state`].
    pub fn load_state(&mut self, mut lookup: impl FnMut(&str) -> Option<Vec<f64>>) -> Result<(), NnError> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let names: Vec<&'static str> = l.state().iter().map(|s| s.0).collect();
            let mut vals = Vec::with_capacity(names.len());
            for n in names {
                let key = format!("{i}.{n}");
                vals.push(lookup(&key).ok_or_else(|| NnError::Shape(format!("missing tensor {key}")))?);
            }
            l.load_state(&vals)?;
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<Tensor<T>>, NnError> {
        Ok(vec![self.run(x, mode)?])
    }

    fn backward(&mut self, grads: &[Tensor<T>]) -> Result<Tensor<T>, NnError> {
        match grads {
            [g] => self.back(g),
            _ => Err(NnError::Shape(format!("expected 1 gradient, got {}", grads.len()))),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}
