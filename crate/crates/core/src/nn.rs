//! Named parameter storage and the two layer types every model is built from.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Padding, Tape, Var};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named parameters of one model. Order is insertion order and is
/// stable, so it doubles as the optimizer's moment-buffer layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on the tape. Frozen parameters become constants,
    /// so no gradient can reach them.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds externally created handles, one per parameter in set order.
    /// Lets callers such as gradient checkers own the leaves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient buffers in parameter order; unreachable parameters get zeros.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| match grads.get(v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
            .collect()
    }
}

fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

/// Per-frame affine map `x · W + b` on `[T × in]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = params.add(format!("{name}.weight"), uniform_init(rng, &[d_in, d_out], d_in));
        let bias = params.add(format!("{name}.bias"), uniform_init(rng, &[d_out], d_in));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add(y, bound.var(self.bias))
    }
}

/// Temporal convolution with bias, kernel layout `[k × in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub k: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = k * d_in;
        let kernel = params.add(format!("{name}.kernel"), uniform_init(rng, &[k, d_in, d_out], fan_in));
        let bias = params.add(format!("{name}.bias"), uniform_init(rng, &[d_out], fan_in));
        Self {
            kernel,
            bias,
            k,
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, bound.var(self.kernel), self.stride, Padding::Same)?;
        tape.add(y, bound.var(self.bias))
    }
}
