//! Named parameter arrays shared by every module of the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensorlab::{Tape, Tensor, Var};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// The convolutional feature extractor.
    Extractor,
    /// Everything downstream of it.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Ordered parameter storage plus the seeded initializer that fills it.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, group: ParamGroup) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        self.insert(name, value, group)
    }

    pub fn insert(&mut self, name: &str, value: Tensor, group: ParamGroup) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name: name.to_string(), value, group });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Place every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect() }
    }

    /// Place every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect() }
    }

    /// Bind with explicit values in store order (gradient checking).
    pub fn bind_vars(vars: Vec<Var>) -> Bound {
        Bound { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weight and optional bias of a 1x1 convolution.
#[derive(Clone, Copy, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Pointwise {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, group: ParamGroup) -> Self {
        let weight = store.uniform(&format!("{name}.weight"), &[cout, cin], cin, group);
        let bias = bias.then(|| store.uniform(&format!("{name}.bias"), &[cout], cin, group));
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> crate::Result<Var> {
        Ok(tape.pointwise_conv(x, bound.var(self.weight), self.bias.map(|b| bound.var(b)))?)
    }
}
