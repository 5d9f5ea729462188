use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Element, Tensor};

/// Cached hidden states of the previous segment, one entry per layer.
///
/// States are stored by value, so nothing written here carries a gradient
/// path into later segments.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<E: Element = f32> {
    layers: Vec<Option<Tensor<E>>>,
    capacity: usize,
    segment: u64,
}

impl<E: Element> MemoryState<E> {
    pub fn new(num_layers: usize, capacity: usize) -> Self {
        Self {
            layers: vec![None; num_layers],
            capacity,
            segment: 0,
        }
    }

    /// Memory with explicitly supplied per-layer states.
    pub fn from_states(states: Vec<Option<Tensor<E>>>, capacity: usize, segment: u64) -> Self {
        Self {
            layers: states,
            capacity,
            segment,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn segment(&self) -> u64 {
        self.segment
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }

    pub fn layer(&self, l: usize) -> Option<&Tensor<E>> {
        self.layers.get(l).and_then(Option::as_ref)
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(|l| *l = None);
        self.segment = 0;
    }

    /// Replaces layer `l` with the last `capacity` rows of
    /// `[old memory; states]`.
    pub(crate) fn write(&mut self, l: usize, states: &Tensor<E>) {
        if self.capacity == 0 {
            return;
        }
        let width = states.shape()[1];
        let mut rows: Vec<E> = match &self.layers[l] {
            Some(old) => old.data().to_vec(),
            None => Vec::new(),
        };
        rows.extend_from_slice(states.data());
        let total = rows.len() / width;
        let keep = total.min(self.capacity);
        let tail = rows.split_off((total - keep) * width);
        self.layers[l] = Some(Tensor::from_parts(vec![keep, width], tail));
    }

    pub(crate) fn advance(&mut self) {
        self.segment += 1;
    }
}

/// Memory for both recurrent stacks: the universal backbone and the NLG
/// task module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMemory<E: Element = f32> {
    pub universal: MemoryState<E>,
    pub nlg: MemoryState<E>,
}

impl<E: Element> ModelMemory<E> {
    pub fn new(config: &super::ModelConfig) -> Self {
        Self {
            universal: MemoryState::new(config.universal_layers, config.memory_len),
            nlg: MemoryState::new(config.task_layers, config.memory_len),
        }
    }
}
