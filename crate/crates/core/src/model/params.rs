use cellcount_autograd::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Head,
}

impl ParamGroup {
    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Head => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamGroup::Encoder),
            1 => Some(ParamGroup::Head),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Named parameters in creation order, plus per-group trainability.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    encoder_trainable: bool,
}

impl ParamStore {
    pub fn new(encoder_trainable: bool) -> Self {
        Self {
            params: Vec::new(),
            encoder_trainable,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            tensor,
        });
        self.params.len() - 1
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.params[id].tensor
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn encoder_trainable(&self) -> bool {
        self.encoder_trainable
    }

    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        self.encoder_trainable = trainable;
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        match self.params[id].group {
            ParamGroup::Encoder => self.encoder_trainable,
            ParamGroup::Head => true,
        }
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        (0..self.params.len())
            .filter(|&i| self.is_trainable(i))
            .map(|i| self.params[i].tensor.len())
            .sum()
    }

    /// Records every parameter as a leaf. Frozen parameters become
    /// constants, so backward never computes their gradients.
    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| g.leaf(self.params[i].tensor.clone(), with_grad && self.is_trainable(i)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LinearIds {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

/// Seeded parameter factory.
pub(crate) struct ParamBuilder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64, encoder_trainable: bool) -> Self {
        Self {
            store: ParamStore::new(encoder_trainable),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, group: ParamGroup, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.push(
            name,
            group,
            Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        )
    }

    /// `[fan_in × fan_out]` weight with std `1/sqrt(fan_in)` and zero bias.
    pub fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize) -> LinearIds {
        self.linear_scaled(name, group, fan_in, fan_out, 1.0)
    }

    /// As [`ParamBuilder::linear`] with the weight std multiplied by `gain`.
    pub fn linear_scaled(
        &mut self,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> LinearIds {
        let w = self.normal(
            &format!("{name}.weight"),
            group,
            &[fan_in, fan_out],
            gain / (fan_in as f64).sqrt(),
        );
        let b = self
            .store
            .push(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
        LinearIds { w, b }
    }

    pub fn norm(&mut self, name: &str, group: ParamGroup, dim: usize) -> NormIds {
        let gain = self
            .store
            .push(format!("{name}.gain"), group, Tensor::full(&[dim], 1.0));
        let bias = self.store.push(format!("{name}.bias"), group, Tensor::zeros(&[dim]));
        NormIds { gain, bias }
    }
}
