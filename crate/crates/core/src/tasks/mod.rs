//! Pre-training task builders, losses and the multi-task optimizer step.

mod controllable;
mod losses;
mod masking;
mod multitask;
mod optim;
mod sentences;
mod uktp;

#[cfg(test)]
mod tests;

use alloc::string::String;
use alloc::vec::Vec;

use crate::tokenizer::TokenId;

pub use controllable::{
    build_controllable_example, format_controllable_input, parse_attributes, render_attributes,
    AttributeSet, ControlPrompt, ControllableExample, ControllableOptions, Sentiment,
};
pub use losses::{
    adversarial_loss, cls_logits, controllable_example_loss, controllable_lm_loss, distance_loss,
    document_lm_loss, masked_lm_example_loss, masked_lm_loss, masked_lm_loss_with_outputs, masked_lm_perplexity,
    masked_positions_loss, original_probabilities, reorder_loss, sentence_pair, uktp_loss, with_cls,
};
pub use masking::{mask_budget, mask_knowledge_spans, Lexicon, MaskedLmExample};
pub use multitask::{
    accumulate_bundle_gradients, bundle_losses, bundle_losses_with_outputs, multitask_step,
    multitask_step_recording, multitask_step_weighted, AttentionMaps, DocumentStream, StepReport, TaskBundle, TaskWeights, TASK_NAMES,
};
pub use optim::{adamw_step, clip_grad_norm, OptimizerConfig, OptimizerState};
pub use sentences::{
    build_sentence_distance_example, build_sentence_reorder_example, decode_reorder_label,
    encode_reorder_label, reorder_class_count, DistanceClass, DistanceExample, DocStore,
    ReorderExample,
};
pub use uktp::{
    build_uktp_example, MaskSite, TokenTriple, UktpExample, UKTP_RELATION_PROB,
    UKTP_SENTENCE_RATE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdversarialLabel {
    Original = 0,
    Generated = 1,
}

/// A text for original-vs-generated discrimination.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdversarialExample {
    pub tokens: Vec<TokenId>,
    pub label: AdversarialLabel,
    pub source_doc_id: String,
    /// Number of original sentences kept before the generated continuation;
    /// zero for originals.
    pub prefix_sentence_count: usize,
}

/// One example of any pre-training task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PretrainExample {
    MaskedLm(MaskedLmExample),
    Document(DocumentStream),
    Reorder(ReorderExample),
    Distance(DistanceExample),
    Uktp(UktpExample),
    Adversarial(AdversarialExample),
    Controllable(ControllableExample),
}

impl TaskBundle {
    pub fn push(&mut self, ex: PretrainExample) {
        match ex {
            PretrainExample::MaskedLm(e) => self.masked_lm.push(e),
            PretrainExample::Document(e) => self.document_lm.push(e),
            PretrainExample::Reorder(e) => self.reorder.push(e),
            PretrainExample::Distance(e) => self.distance.push(e),
            PretrainExample::Uktp(e) => self.uktp.push(e),
            PretrainExample::Adversarial(e) => self.adversarial.push(e),
            PretrainExample::Controllable(e) => self.controllable.push(e),
        }
    }
}
