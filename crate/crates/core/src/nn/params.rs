use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::Elem;

/// Handle to a trainable parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Handle to a non-trainable state buffer (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

pub(crate) struct ParamEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub momentum: ArrayD<F>,
    pub trainable: bool,
}

pub(crate) struct BufferEntry<F> {
    pub name: String,
    pub value: ArrayD<F>,
}

/// Flat registry of named parameters and buffers for one model.
///
/// Layers hold [`ParamId`]s into the store instead of owning arrays, which
/// gives the optimizer, the checkpoint writer and the parameter counter one
/// uniform view of the model.
pub struct ParamStore<F: Elem> {
    params: Vec<ParamEntry<F>>,
    buffers: Vec<BufferEntry<F>>,
}

impl<F: Elem> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        let zero = ArrayD::zeros(value.raw_dim());
        self.params.push(ParamEntry {
            name: name.into(),
            grad: zero.clone(),
            momentum: zero,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: ArrayD<F>) -> BufferId {
        self.buffers.push(BufferEntry { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &ArrayD<F>) {
        self.params[id.0].grad += g;
    }

    pub fn buffer(&self, id: BufferId) -> &ArrayD<F> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut ArrayD<F> {
        &mut self.buffers[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<F>)> {
        self.params.iter().enumerate().map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (BufferId, &str, &ArrayD<F>)> {
        self.buffers.iter().enumerate().map(|(i, e)| (BufferId(i), e.name.as_str(), &e.value))
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|e| e.name == name).map(BufferId)
    }

    pub fn momentum(&self, id: ParamId) -> &ArrayD<F> {
        &self.params[id.0].momentum
    }

    pub fn momentum_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.params[id.0].momentum
    }

    /// Marks every parameter non-trainable (frozen teacher).
    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Total number of trainable scalar values.
    pub fn total_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> F {
        let mut acc = F::zero();
        for p in &self.params {
            if !p.trainable {
                continue;
            }
            for &g in p.grad.iter() {
                acc = acc + g * g;
            }
        }
        acc.sqrt()
    }

    /// One SGD-with-momentum step over all trainable parameters.
    ///
    /// Gradients are first rescaled so their global norm does not exceed
    /// `clip_norm` (if finite), then `v = mu*v + g + wd*w; w -= lr*v`.
    pub fn sgd_step(&mut self, lr: F, mu: F, weight_decay: F, clip_norm: F) {
        let mut scale = F::one();
        if clip_norm.is_finite() && clip_norm > F::zero() {
            let norm = self.grad_norm();
            if norm > clip_norm {
                scale = clip_norm / norm;
            }
        }
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            azip_sgd(&mut p.value, &mut p.momentum, &p.grad, lr, mu, weight_decay, scale);
        }
        self.zero_grads();
    }

    /// Hex SHA-256 over names and shapes: identifies the architecture.
    pub fn architecture_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.params {
            h.update(e.name.as_bytes());
            h.update(format!("{:?}", e.value.shape()).as_bytes());
        }
        for e in &self.buffers {
            h.update(e.name.as_bytes());
            h.update(format!("{:?}", e.value.shape()).as_bytes());
        }
        hex(&h.finalize())
    }

    /// Hex SHA-256 over all parameter and buffer values; changes iff any
    /// weight changes. Used to prove the teacher stayed frozen.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.params {
            for &v in e.value.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        for e in &self.buffers {
            for &v in e.value.iter() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Copies values (params and buffers) from another store with the same
    /// architecture. Momenta and grads are reset.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> crate::error::Result<()> {
        if self.architecture_fingerprint() != other.architecture_fingerprint() {
            return Err(crate::error::Error::FingerprintMismatch {
                expected: self.architecture_fingerprint(),
                found: other.architecture_fingerprint(),
            });
        }
        for (dst, src) in self.params.iter_mut().zip(other.params.iter()) {
            dst.value.assign(&src.value);
            dst.grad.fill(F::zero());
            dst.momentum.fill(F::zero());
        }
        for (dst, src) in self.buffers.iter_mut().zip(other.buffers.iter()) {
            dst.value.assign(&src.value);
        }
        Ok(())
    }
}

fn azip_sgd<F: Elem>(
    w: &mut ArrayD<F>,
    v: &mut ArrayD<F>,
    g: &ArrayD<F>,
    lr: F,
    mu: F,
    wd: F,
    scale: F,
) {
    ndarray::Zip::from(w).and(v).and(g).for_each(|w, v, &g| {
        *v = mu * *v + g * scale + wd * *w;
        *w = *w - lr * *v;
    });
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Kaiming-normal (fan-out) initialization for conv weights.
pub fn kaiming_conv<F: Elem, R: Rng>(shape: &[usize], fan_out: usize, rng: &mut R) -> ArrayD<F> {
    let std = (2.0 / fan_out.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::lit(normal.sample(rng)))
}

pub fn zeros<F: Elem>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn full<F: Elem>(shape: &[usize], v: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), v)
}
