use alloc::format;
use alloc::vec::Vec;

use super::layers::transformer_layer;
use super::params::{layer_prefix, Head, LayerDims};
use super::{AttentionMask, Graph, MemoryState, ModelConfig, ModelMemory};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};
use crate::tokenizer::TokenId;

/// Learned genre prompt: the first `count` embeddings of `genre` are
/// prepended to the token embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftPrompt {
    pub genre: usize,
    pub count: usize,
}

/// Hidden states and attention maps of one layer stack.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `hidden[0]` is the stack input, `hidden[l + 1]` the output of layer `l`.
    pub hidden: Vec<Var>,
    pub attention: Vec<Var>,
}

impl StackOutput {
    pub fn top(&self) -> Var {
        *self.hidden.last().expect("stack output holds its input")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskModule {
    Nlu,
    Nlg,
}

impl TaskModule {
    pub fn name(self) -> &'static str {
        match self {
            TaskModule::Nlu => "nlu",
            TaskModule::Nlg => "nlg",
        }
    }
}

/// Token embeddings with optional genre soft prompts in front.
pub fn embed<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    tokens: &[TokenId],
    soft: Option<SoftPrompt>,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let soft_len = soft.map_or(0, |s| s.count);
    if tokens.len() + soft_len > config.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} positions exceeds max_seq_len {}",
            tokens.len() + soft_len,
            config.max_seq_len
        )));
    }
    let table = g.param("embed.tokens")?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok = g.tape().gather_rows(table, &ids)?;
    match soft {
        Some(SoftPrompt { count: 0, .. }) | None => Ok(tok),
        Some(SoftPrompt { genre, count }) => {
            if genre >= config.num_genres || count > config.num_genre_prompts {
                return Err(Error::invalid(format!(
                    "soft prompt genre {genre} x {count} outside {} x {}",
                    config.num_genres, config.num_genre_prompts
                )));
            }
            let genre_table = g.param("embed.genre")?;
            let rows: Vec<usize> = (0..count)
                .map(|n| genre * config.num_genre_prompts + n)
                .collect();
            let t = g.tape();
            let flat = t.reshape(
                genre_table,
                &[config.num_genres * config.num_genre_prompts, config.universal_hidden],
            )?;
            let prompts = t.gather_rows(flat, &rows)?;
            t.concat_rows(&[prompts, tok])
        }
    }
}

fn run_stack<E: Element>(
    g: &mut Graph<'_, '_, E>,
    stack: &str,
    layers: usize,
    dims: LayerDims,
    config: &ModelConfig,
    input: Var,
    mask: AttentionMask,
    mut memory: Option<&mut MemoryState<E>>,
) -> Result<StackOutput> {
    let mut hidden = Vec::with_capacity(layers + 1);
    let mut attention = Vec::with_capacity(layers);
    hidden.push(input);
    for l in 0..layers {
        let mem_var = match memory.as_deref() {
            Some(m) => m.layer(l).cloned().map(|t| g.constant(t)),
            None => None,
        };
        let out = transformer_layer(
            g,
            &layer_prefix(stack, l),
            dims,
            config.layernorm_eps,
            hidden[l],
            mem_var,
            mask,
        )?;
        hidden.push(out.hidden);
        attention.push(out.attention);
    }
    if let Some(m) = memory.as_deref_mut() {
        for l in 0..layers {
            let source = if config.enhanced_recurrence {
                hidden[l + 1]
            } else {
                hidden[l]
            };
            let states = g.value(source).clone();
            m.write(l, &states);
        }
        m.advance();
    }
    Ok(StackOutput { hidden, attention })
}

/// Embedding plus every universal layer.
///
/// With `use_memory`, layer `l` attends over the cached states in `memory`
/// and the cache is then overwritten with detached states of this segment.
/// Memory is only valid for generation, so it is rejected under a
/// bidirectional mask.
pub fn backbone_forward<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    tokens: &[TokenId],
    soft: Option<SoftPrompt>,
    mask: AttentionMask,
    memory: &mut MemoryState<E>,
    use_memory: bool,
) -> Result<StackOutput> {
    if use_memory && mask.is_bidirectional() {
        return Err(Error::invalid(
            "recurrence memory is only valid with a causal mask",
        ));
    }
    let input = embed(g, config, tokens, soft)?;
    run_stack(
        g,
        "universal",
        config.universal_layers,
        LayerDims::universal(config),
        config,
        input,
        mask,
        use_memory.then_some(memory),
    )
}

/// Projects the universal top layer into a task module and runs its layers.
pub fn task_module_forward<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    which: TaskModule,
    universal_top: Var,
    mask: AttentionMask,
    memory: Option<&mut MemoryState<E>>,
) -> Result<StackOutput> {
    if which == TaskModule::Nlu && memory.is_some() {
        return Err(Error::invalid("the NLU module does not take recurrence memory"));
    }
    if memory.is_some() && mask.is_bidirectional() {
        return Err(Error::invalid(
            "recurrence memory is only valid with a causal mask",
        ));
    }
    let name = which.name();
    let w = g.param(&format!("{name}.proj.w"))?;
    let b = g.param(&format!("{name}.proj.b"))?;
    let t = g.tape();
    let projected = t.matmul(universal_top, w)?;
    let projected = t.add_bias(projected, b)?;
    run_stack(
        g,
        name,
        config.task_layers,
        LayerDims::task(config),
        config,
        projected,
        mask,
        memory,
    )
}

/// Auxiliary layers stacked above the NLU module.
pub fn auxiliary_forward<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    input: Var,
) -> Result<StackOutput> {
    run_stack(
        g,
        "aux",
        config.auxiliary_layers,
        LayerDims::task(config),
        config,
        input,
        AttentionMask::Bidirectional,
        None,
    )
}

/// Linear head applied to every row of `x`.
pub fn head_logits<E: Element>(g: &mut Graph<'_, '_, E>, head: Head, x: Var) -> Result<Var> {
    let w = g.param(&format!("{}.w", head.prefix()))?;
    let b = g.param(&format!("{}.b", head.prefix()))?;
    let t = g.tape();
    let logits = t.matmul(x, w)?;
    t.add_bias(logits, b)
}

/// Full bidirectional path: universal, NLU module, then any auxiliary layers.
pub struct NluOutput {
    pub universal: StackOutput,
    pub task: StackOutput,
    pub auxiliary: StackOutput,
}

impl NluOutput {
    /// Representation fed to the heads (above the auxiliary layers).
    pub fn top(&self) -> Var {
        self.auxiliary.top()
    }

    /// Topmost non-auxiliary hidden state.
    pub fn matched_hidden(&self) -> Var {
        self.task.top()
    }

    /// Attention of the topmost non-auxiliary layer.
    pub fn matched_attention(&self) -> Var {
        *self
            .task
            .attention
            .last()
            .or(self.universal.attention.last())
            .expect("at least one universal layer")
    }
}

pub fn nlu_forward<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    tokens: &[TokenId],
) -> Result<NluOutput> {
    let mut unused = MemoryState::new(0, 0);
    let universal = backbone_forward(
        g,
        config,
        tokens,
        None,
        AttentionMask::Bidirectional,
        &mut unused,
        false,
    )?;
    let task = task_module_forward(
        g,
        config,
        TaskModule::Nlu,
        universal.top(),
        AttentionMask::Bidirectional,
        None,
    )?;
    let auxiliary = auxiliary_forward(g, config, task.top())?;
    Ok(NluOutput {
        universal,
        task,
        auxiliary,
    })
}

/// Full causal path: universal then NLG module, optionally threading memory.
pub struct NlgOutput {
    pub universal: StackOutput,
    pub task: StackOutput,
}

impl NlgOutput {
    pub fn top(&self) -> Var {
        self.task.top()
    }
}

pub fn nlg_forward<E: Element>(
    g: &mut Graph<'_, '_, E>,
    config: &ModelConfig,
    tokens: &[TokenId],
    soft: Option<SoftPrompt>,
    memory: Option<&mut ModelMemory<E>>,
) -> Result<NlgOutput> {
    let mask = AttentionMask::Causal;
    match memory {
        Some(mem) => {
            let universal =
                backbone_forward(g, config, tokens, soft, mask, &mut mem.universal, true)?;
            let task = task_module_forward(
                g,
                config,
                TaskModule::Nlg,
                universal.top(),
                mask,
                Some(&mut mem.nlg),
            )?;
            Ok(NlgOutput { universal, task })
        }
        None => {
            let mut unused = MemoryState::new(0, 0);
            let universal = backbone_forward(g, config, tokens, soft, mask, &mut unused, false)?;
            let task =
                task_module_forward(g, config, TaskModule::Nlg, universal.top(), mask, None)?;
            Ok(NlgOutput { universal, task })
        }
    }
}
