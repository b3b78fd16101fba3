//! Named parameter tensors and their binary table encoding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::synth::{mix64, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Parameters keyed by name; iteration order is lexicographic.
/// Variance gain of He-uniform init for layers feeding a ReLU.
pub const RELU_GAIN: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    /// Uniform in `±sqrt(gain/fan_in)` from a stream keyed by `(seed, name)`, so the
    /// value of a parameter never depends on what else was initialized before it.
    pub fn init_uniform_scaled(
        &mut self,
        seed: u64,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        gain: f64,
    ) {
        let bound = (gain / fan_in.max(1) as f64).sqrt();
        let mut rng = stream(mix64(seed), name_hash(name));
        self.insert(name, Tensor::uniform(shape, -bound, bound, &mut rng));
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn init_uniform(&mut self, seed: u64, name: &str, shape: Vec<usize>, fan_in: usize) {
        self.init_uniform_scaled(seed, name, shape, fan_in, 1.0);
    }

    /// Weight `[out, fan_in]` plus bias `[out]` under `prefix.w` / `prefix.b`.
    /// Weights use the ReLU-preserving bound `sqrt(6/fan_in)`, biases `sqrt(1/fan_in)`.
    pub fn init_linear(&mut self, seed: u64, prefix: &str, out: usize, fan_in: usize) {
        self.init_uniform_scaled(seed, &format!("{prefix}.w"), vec![out, fan_in], fan_in, RELU_GAIN);
        self.init_uniform(seed, &format!("{prefix}.b"), vec![out], fan_in);
    }

    /// Convolution weight `[out, in, k, k]` plus bias `[out]`.
    pub fn init_conv(&mut self, seed: u64, prefix: &str, out: usize, input: usize, k: usize) {
        let fan_in = input * k * k;
        let shape = vec![out, input, k, k];
        self.init_uniform_scaled(seed, &format!("{prefix}.w"), shape, fan_in, RELU_GAIN);
        self.init_uniform(seed, &format!("{prefix}.b"), vec![out], fan_in);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    /// Record every parameter as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), true)))
                .collect(),
        }
    }

    /// Gradients of every bound parameter after a backward pass; unreached ones are zero.
    pub fn grads_from(&self, tape: &Tape<T>, bound: &Bound) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    let g = bound
                        .vars
                        .get(k)
                        .and_then(|&v| tape.grad(v))
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); t.numel()]);
                    let g = Tensor::from_vec(t.shape().to_vec(), g).expect("same shape");
                    (k.clone(), g)
                })
                .collect(),
        }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles for parameters recorded by other means, e.g. as grad-check inputs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// `u32 count` then per tensor: `u16 name length, name, u8 rank, u32 extents, f32 payload`.
pub fn encode_table(params: &ParamStore<f32>, out: &mut Vec<u8>) {
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Byte reader with truncation errors.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Data(format!(
                "truncated table: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub(crate) fn decode_table(cur: &mut Cursor<'_>) -> Result<ParamStore<f32>> {
    let count = cur.u32()?;
    let mut store = ParamStore::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Data(format!(
                "parameter table not sorted at {name:?}"
            )));
        }
        let rank = cur.u8()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = cur
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store.insert(name.clone(), Tensor::from_vec(shape, data)?);
        prev = Some(name);
    }
    Ok(store)
}
