//! Transformer-XL backbone (the universal representation module), NLU and
//! NLG task modules, recurrence memory and prediction heads.

mod config;
mod forward;
mod graph;
mod layers;
mod mask;
mod memory;
mod params;

pub use config::{ModelConfig, MAX_GENRE_PROMPTS};
pub use forward::{
    auxiliary_forward, backbone_forward, embed, head_logits, nlg_forward, nlu_forward,
    task_module_forward, NlgOutput, NluOutput, SoftPrompt, StackOutput, TaskModule,
};
pub use graph::{check_param_gradients, Graph};
pub use layers::{feed_forward, multi_head_attention, transformer_layer, AttentionOutput};
pub use mask::{AttentionMask, MASKED};
pub use memory::{MemoryState, ModelMemory};
pub use params::{
    init_params, layer_prefix, param_shapes, Head, LayerDims, ModelParams, AUX_PREFIX,
    NUM_ADVERSARIAL_CLASSES, NUM_DISTANCE_CLASSES,
};
pub(crate) use params::init_tensor;

use crate::error::Result;
use crate::tensor::Element;

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<E: Element = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<E>,
}

impl<E: Element> Model<E> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
