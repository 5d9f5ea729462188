use alloc::format;

use crate::error::{Error, Result};

/// Largest number of soft prompt embeddings a genre may carry.
pub const MAX_GENRE_PROMPTS: usize = 64;

/// Architecture hyperparameters for the universal backbone, the NLU/NLG
/// task modules and the prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub universal_layers: usize,
    pub universal_hidden: usize,
    pub universal_heads: usize,
    /// Inner FFN width is `ffn_multiplier * hidden` in every module.
    pub ffn_multiplier: usize,
    pub task_layers: usize,
    pub task_hidden: usize,
    pub task_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub memory_len: usize,
    pub num_genres: usize,
    pub num_genre_prompts: usize,
    pub layernorm_eps: f64,
    /// Memory for layer `l` comes from layer `l`'s own output on the
    /// previous segment instead of its input.
    pub enhanced_recurrence: bool,
    /// Maximum segment count `m` of the sentence reordering task.
    pub reorder_segments: usize,
    /// Auxiliary layers stacked on the NLU module during distillation.
    pub auxiliary_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Minutes-scale default.
    pub fn desk() -> Self {
        Self {
            universal_layers: 4,
            universal_hidden: 256,
            universal_heads: 8,
            ffn_multiplier: 4,
            task_layers: 2,
            task_hidden: 128,
            task_heads: 4,
            vocab_size: 8000,
            max_seq_len: 128,
            memory_len: 32,
            num_genres: 12,
            num_genre_prompts: MAX_GENRE_PROMPTS,
            layernorm_eps: 1e-5,
            enhanced_recurrence: true,
            reorder_segments: 3,
            auxiliary_layers: 0,
        }
    }

    /// Full-size shape: universal 48/12288/192 with a 16x FFN, task
    /// modules 12/768/12, 512-token context and 128-token memory. Only used
    /// for counting; never instantiated.
    pub fn titan_reference() -> Self {
        Self {
            universal_layers: 48,
            universal_hidden: 12288,
            universal_heads: 192,
            ffn_multiplier: 16,
            task_layers: 12,
            task_hidden: 768,
            task_heads: 12,
            vocab_size: 40000,
            max_seq_len: 512,
            memory_len: 128,
            num_genres: 12,
            num_genre_prompts: MAX_GENRE_PROMPTS,
            layernorm_eps: 1e-5,
            enhanced_recurrence: true,
            reorder_segments: 3,
            auxiliary_layers: 0,
        }
    }

    /// Small configuration used by tests and the bundled demos.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            universal_layers: 2,
            universal_hidden: 32,
            universal_heads: 4,
            ffn_multiplier: 4,
            task_layers: 1,
            task_hidden: 32,
            task_heads: 4,
            vocab_size,
            max_seq_len: 64,
            memory_len: 16,
            num_genres: 4,
            num_genre_prompts: 8,
            layernorm_eps: 1e-5,
            enhanced_recurrence: true,
            reorder_segments: 3,
            auxiliary_layers: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.universal_layers == 0 {
            return fail("universal_layers must be at least 1".into());
        }
        for (name, hidden, heads) in [
            ("universal", self.universal_hidden, self.universal_heads),
            ("task", self.task_hidden, self.task_heads),
        ] {
            if hidden == 0 || heads == 0 {
                return fail(format!("{name}_hidden and {name}_heads must be positive"));
            }
            if hidden % heads != 0 {
                return fail(format!("{name}_hidden {hidden} not divisible by {name}_heads {heads}"));
            }
        }
        if self.ffn_multiplier == 0 {
            return fail("ffn_multiplier must be positive".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        if self.num_genre_prompts > MAX_GENRE_PROMPTS {
            return fail(format!(
                "num_genre_prompts {} exceeds {MAX_GENRE_PROMPTS}",
                self.num_genre_prompts
            ));
        }
        if !(self.layernorm_eps > 0.0) {
            return fail("layernorm_eps must be positive".into());
        }
        if self.reorder_segments == 0 || self.reorder_segments > 8 {
            return fail("reorder_segments must be in 1..=8".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.universal_hidden / self.universal_heads
    }

    pub fn task_head_dim(&self) -> usize {
        self.task_hidden / self.task_heads
    }

    /// Largest relative offset with its own learned attention bias.
    pub fn relative_range(&self) -> usize {
        self.max_seq_len + self.memory_len
    }

    /// Number of classes of the sentence reordering head, `sum_{n=1..m} n!`.
    pub fn reorder_classes(&self) -> usize {
        crate::tasks::reorder_class_count(self.reorder_segments)
    }

    /// Total scalar parameter count, computed without allocating anything.
    pub fn parameter_count(&self) -> u64 {
        super::params::param_shapes(self)
            .iter()
            .map(|(_, s)| s.iter().map(|&d| d as u64).product::<u64>())
            .sum()
    }
}
