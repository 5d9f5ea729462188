//! Model and optimizer hyperparameters as key=value sections.

use anyhow::Result;
use titan_core::model::ModelConfig;
use titan_core::tasks::OptimizerConfig;

use crate::kv::{Kv, KvReader};

pub fn model_config_to_kv(c: &ModelConfig, kv: &mut Kv, prefix: &str) {
    let k = |name: &str| format!("{prefix}{name}");
    kv.set(k("universal_layers"), c.universal_layers);
    kv.set(k("universal_hidden"), c.universal_hidden);
    kv.set(k("universal_heads"), c.universal_heads);
    kv.set(k("ffn_multiplier"), c.ffn_multiplier);
    kv.set(k("task_layers"), c.task_layers);
    kv.set(k("task_hidden"), c.task_hidden);
    kv.set(k("task_heads"), c.task_heads);
    kv.set(k("vocab_size"), c.vocab_size);
    kv.set(k("max_seq_len"), c.max_seq_len);
    kv.set(k("memory_len"), c.memory_len);
    kv.set(k("num_genres"), c.num_genres);
    kv.set(k("num_genre_prompts"), c.num_genre_prompts);
    kv.set(k("layernorm_eps"), c.layernorm_eps);
    kv.set(k("enhanced_recurrence"), c.enhanced_recurrence);
    kv.set(k("reorder_segments"), c.reorder_segments);
    kv.set(k("auxiliary_layers"), c.auxiliary_layers);
}

/// Reads `prefix`-ed fields over `base`; missing fields keep their base value.
pub fn model_config_from(r: &KvReader<'_>, prefix: &str, base: ModelConfig) -> Result<ModelConfig> {
    let k = |name: &str| format!("{prefix}{name}");
    let c = ModelConfig {
        universal_layers: r.or(&k("universal_layers"), base.universal_layers)?,
        universal_hidden: r.or(&k("universal_hidden"), base.universal_hidden)?,
        universal_heads: r.or(&k("universal_heads"), base.universal_heads)?,
        ffn_multiplier: r.or(&k("ffn_multiplier"), base.ffn_multiplier)?,
        task_layers: r.or(&k("task_layers"), base.task_layers)?,
        task_hidden: r.or(&k("task_hidden"), base.task_hidden)?,
        task_heads: r.or(&k("task_heads"), base.task_heads)?,
        vocab_size: r.or(&k("vocab_size"), base.vocab_size)?,
        max_seq_len: r.or(&k("max_seq_len"), base.max_seq_len)?,
        memory_len: r.or(&k("memory_len"), base.memory_len)?,
        num_genres: r.or(&k("num_genres"), base.num_genres)?,
        num_genre_prompts: r.or(&k("num_genre_prompts"), base.num_genre_prompts)?,
        layernorm_eps: r.or(&k("layernorm_eps"), base.layernorm_eps)?,
        enhanced_recurrence: r.or(&k("enhanced_recurrence"), base.enhanced_recurrence)?,
        reorder_segments: r.or(&k("reorder_segments"), base.reorder_segments)?,
        auxiliary_layers: r.or(&k("auxiliary_layers"), base.auxiliary_layers)?,
    };
    c.validate()?;
    Ok(c)
}

pub fn optimizer_to_kv(o: &OptimizerConfig, kv: &mut Kv, prefix: &str) {
    let k = |name: &str| format!("{prefix}{name}");
    kv.set(k("lr"), o.lr);
    kv.set(k("beta1"), o.beta1);
    kv.set(k("beta2"), o.beta2);
    kv.set(k("eps"), o.eps);
    kv.set(k("weight_decay"), o.weight_decay);
    kv.set(k("clip_norm"), o.clip_norm);
    kv.set(k("warmup_steps"), o.warmup_steps);
    kv.set(k("total_steps"), o.total_steps);
}

pub fn optimizer_from(r: &KvReader<'_>, prefix: &str, base: OptimizerConfig) -> Result<OptimizerConfig> {
    let k = |name: &str| format!("{prefix}{name}");
    let o = OptimizerConfig {
        lr: r.or(&k("lr"), base.lr)?,
        beta1: r.or(&k("beta1"), base.beta1)?,
        beta2: r.or(&k("beta2"), base.beta2)?,
        eps: r.or(&k("eps"), base.eps)?,
        weight_decay: r.or(&k("weight_decay"), base.weight_decay)?,
        clip_norm: r.or(&k("clip_norm"), base.clip_norm)?,
        warmup_steps: r.or(&k("warmup_steps"), base.warmup_steps)?,
        total_steps: r.or(&k("total_steps"), base.total_steps)?,
    };
    o.validate()?;
    Ok(o)
}
