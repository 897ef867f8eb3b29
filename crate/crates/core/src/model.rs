//! BERT-style encoder with MLM, NSP, classification and regression heads.
//!
//! Parameters are stored flat in a [`ParamSet`] keyed by dotted names and
//! partitioned into layer groups ("embeddings", "encoder.1" .. "encoder.L",
//! "head"); the partition drives discriminative learning rates and layer
//! freezing. Every layer's hidden state is exposed so the head can be
//! attached to any of them.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, TensorError, TensorId, NEG_ATTENTION};

/// Segment vocabulary is fixed at two (sentence A / sentence B).
pub const SEGMENT_TYPES: usize = 2;

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPSILON: Scalar = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// Encoder architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
}

fn default_num_classes() -> usize {
    3
}

impl ModelConfig {
    /// Desk-scale reference configuration: trains in minutes on a CPU while
    /// exercising every code path.
    pub fn desk() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            num_heads: 4,
            ff_dim: 256,
            vocab_size: 2000,
            max_seq_len: 64,
            dropout: 0.1,
            num_classes: 3,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers == 0
            || self.hidden == 0
            || self.num_heads == 0
            || self.ff_dim == 0
            || self.vocab_size == 0
        {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.hidden % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden {} not divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if self.max_seq_len < 3 {
            return Err(ModelError::Config("max_seq_len must be at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// One named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<Scalar>,
}

/// All learnable weights, keyed by dotted name in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub config: ModelConfig,
    entries: IndexMap<String, Param>,
}

/// Layer group a parameter belongs to. Every parameter is in exactly one.
pub fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    match parts.next() {
        Some("encoder") => match parts.next() {
            Some(idx) => format!("encoder.{idx}"),
            None => "encoder".into(),
        },
        Some(first) => first.into(),
        None => String::new(),
    }
}

/// Group names in unfreezing order is the reverse of this list; the order
/// here is lowest (embeddings) to highest (head).
pub fn group_names(num_layers: usize) -> Vec<String> {
    let mut names = vec!["embeddings".to_string()];
    for l in 1..=num_layers {
        names.push(format!("encoder.{l}"));
    }
    names.push("head".to_string());
    names
}

impl ParamSet {
    /// Initialize weights from a truncated normal (sigma = 0.02, clipped at
    /// two sigma), biases at zero, normalization gains at one. Deterministic
    /// per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid sigma");
        let mut entries = IndexMap::new();
        let h = config.hidden;
        let v = config.vocab_size;
        let f = config.ff_dim;

        let push_normal = |entries: &mut IndexMap<String, Param>,
                           name: String,
                           shape: Vec<usize>,
                           rng: &mut ChaCha8Rng| {
            let numel = shape.iter().product();
            let mut value = Vec::with_capacity(numel);
            while value.len() < numel {
                let draw = normal.sample(rng);
                if draw.abs() <= 0.04 {
                    value.push(draw as Scalar);
                }
            }
            entries.insert(name, Param { shape, value });
        };
        let push_const = |entries: &mut IndexMap<String, Param>,
                          name: String,
                          shape: Vec<usize>,
                          fill: Scalar| {
            let numel = shape.iter().product();
            entries.insert(
                name,
                Param {
                    shape,
                    value: vec![fill; numel],
                },
            );
        };

        push_normal(
            &mut entries,
            "embeddings.token".into(),
            vec![v, h],
            &mut rng,
        );
        push_normal(
            &mut entries,
            "embeddings.position".into(),
            vec![config.max_seq_len, h],
            &mut rng,
        );
        push_normal(
            &mut entries,
            "embeddings.segment".into(),
            vec![SEGMENT_TYPES, h],
            &mut rng,
        );
        for l in 1..=config.num_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                push_normal(
                    &mut entries,
                    format!("encoder.{l}.attn.{proj}"),
                    vec![h, h],
                    &mut rng,
                );
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                push_const(
                    &mut entries,
                    format!("encoder.{l}.attn.{bias}"),
                    vec![h],
                    0.0,
                );
            }
            push_const(
                &mut entries,
                format!("encoder.{l}.attn_norm.gain"),
                vec![h],
                1.0,
            );
            push_const(
                &mut entries,
                format!("encoder.{l}.attn_norm.bias"),
                vec![h],
                0.0,
            );
            push_normal(
                &mut entries,
                format!("encoder.{l}.ff.w1"),
                vec![h, f],
                &mut rng,
            );
            push_const(&mut entries, format!("encoder.{l}.ff.b1"), vec![f], 0.0);
            push_normal(
                &mut entries,
                format!("encoder.{l}.ff.w2"),
                vec![f, h],
                &mut rng,
            );
            push_const(&mut entries, format!("encoder.{l}.ff.b2"), vec![h], 0.0);
            push_const(
                &mut entries,
                format!("encoder.{l}.ff_norm.gain"),
                vec![h],
                1.0,
            );
            push_const(
                &mut entries,
                format!("encoder.{l}.ff_norm.bias"),
                vec![h],
                0.0,
            );
        }
        push_normal(&mut entries, "head.mlm.w".into(), vec![h, v], &mut rng);
        push_const(&mut entries, "head.mlm.b".into(), vec![v], 0.0);
        push_normal(&mut entries, "head.nsp.w".into(), vec![h, 2], &mut rng);
        push_const(&mut entries, "head.nsp.b".into(), vec![2], 0.0);
        push_normal(
            &mut entries,
            "head.cls.w".into(),
            vec![h, config.num_classes],
            &mut rng,
        );
        push_const(
            &mut entries,
            "head.cls.b".into(),
            vec![config.num_classes],
            0.0,
        );
        push_normal(&mut entries, "head.reg.w".into(), vec![h, 1], &mut rng);
        push_const(&mut entries, "head.reg.b".into(), vec![1], 0.0);

        Ok(Self {
            config: config.clone(),
            entries,
        })
    }

    pub fn from_entries(config: ModelConfig, entries: IndexMap<String, Param>) -> Self {
        Self { config, entries }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn expect(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Token batch as consumed by the encoder, row-major `[batch, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize) -> Self {
        Self {
            batch,
            seq,
            token_ids: vec![0; batch * seq],
            segment_ids: vec![0; batch * seq],
            attention_mask: vec![0; batch * seq],
        }
    }
}

/// Hidden states for every layer (embedding output first), plus the mask
/// they were computed under and the attention weights per layer and head.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// L+1 tensors of shape `[batch*seq, hidden]`.
    pub hidden_states: Vec<TensorId>,
    pub batch: usize,
    pub seq: usize,
    pub attention_mask: Vec<u8>,
    /// Per layer, per (example * num_heads + head): `[seq, seq]` weights.
    pub attention_probs: Vec<Vec<TensorId>>,
}

/// Which hidden state feeds the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSource {
    /// The default used by all non-layer-ablation experiments.
    #[default]
    LastLayer,
    /// A specific encoder layer, 1-based.
    Layer(usize),
    /// Element-wise mean of the stored states' [CLS] vectors; the embedding
    /// output can be excluded since it is arguably not a layer.
    MeanAll { include_embedding: bool },
}

struct LayerBinding {
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    attn_gain: TensorId,
    attn_bias: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    ff_gain: TensorId,
    ff_bias: TensorId,
}

/// Embeddings and encoder layers registered on a tape for one step.
pub struct EncoderBinding {
    config: ModelConfig,
    token_emb: TensorId,
    pos_emb: TensorId,
    seg_emb: TensorId,
    layers: Vec<LayerBinding>,
    bound: Vec<(String, TensorId)>,
}

/// A dense head (weight matrix plus bias) registered on a tape.
pub struct HeadBinding {
    pub w: TensorId,
    pub b: TensorId,
    bound: Vec<(String, TensorId)>,
}

impl HeadBinding {
    pub fn bound(&self) -> &[(String, TensorId)] {
        &self.bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Mlm,
    Nsp,
    Classification,
    Regression,
}

impl HeadKind {
    fn weight_name(self) -> &'static str {
        match self {
            HeadKind::Mlm => "head.mlm.w",
            HeadKind::Nsp => "head.nsp.w",
            HeadKind::Classification => "head.cls.w",
            HeadKind::Regression => "head.reg.w",
        }
    }

    fn bias_name(self) -> &'static str {
        match self {
            HeadKind::Mlm => "head.mlm.b",
            HeadKind::Nsp => "head.nsp.b",
            HeadKind::Classification => "head.cls.b",
            HeadKind::Regression => "head.reg.b",
        }
    }
}

fn bind_one(
    tape: &mut Tape,
    params: &ParamSet,
    name: &str,
    trainable: &impl Fn(&str) -> bool,
    bound: &mut Vec<(String, TensorId)>,
) -> TensorId {
    let p = params.expect(name);
    let id = if trainable(name) {
        tape.param(p.value.clone(), &p.shape)
    } else {
        tape.leaf(p.value.clone(), &p.shape)
    };
    bound.push((name.to_string(), id));
    id
}

/// Register embeddings and every encoder layer on `tape`. `trainable`
/// decides per parameter whether gradients are tracked.
pub fn bind_encoder(
    tape: &mut Tape,
    params: &ParamSet,
    trainable: impl Fn(&str) -> bool,
) -> EncoderBinding {
    let mut bound = Vec::new();
    let token_emb = bind_one(tape, params, "embeddings.token", &trainable, &mut bound);
    let pos_emb = bind_one(tape, params, "embeddings.position", &trainable, &mut bound);
    let seg_emb = bind_one(tape, params, "embeddings.segment", &trainable, &mut bound);
    let mut layers = Vec::with_capacity(params.config.num_layers);
    for l in 1..=params.config.num_layers {
        let mut f = |suffix: &str| {
            bind_one(
                tape,
                params,
                &format!("encoder.{l}.{suffix}"),
                &trainable,
                &mut bound,
            )
        };
        layers.push(LayerBinding {
            wq: f("attn.wq"),
            bq: f("attn.bq"),
            wk: f("attn.wk"),
            bk: f("attn.bk"),
            wv: f("attn.wv"),
            bv: f("attn.bv"),
            wo: f("attn.wo"),
            bo: f("attn.bo"),
            attn_gain: f("attn_norm.gain"),
            attn_bias: f("attn_norm.bias"),
            w1: f("ff.w1"),
            b1: f("ff.b1"),
            w2: f("ff.w2"),
            b2: f("ff.b2"),
            ff_gain: f("ff_norm.gain"),
            ff_bias: f("ff_norm.bias"),
        });
    }
    EncoderBinding {
        config: params.config.clone(),
        token_emb,
        pos_emb,
        seg_emb,
        layers,
        bound,
    }
}

/// Register one head on `tape`.
pub fn bind_head(
    tape: &mut Tape,
    params: &ParamSet,
    kind: HeadKind,
    trainable: impl Fn(&str) -> bool,
) -> HeadBinding {
    let mut bound = Vec::new();
    let w = bind_one(tape, params, kind.weight_name(), &trainable, &mut bound);
    let b = bind_one(tape, params, kind.bias_name(), &trainable, &mut bound);
    HeadBinding { w, b, bound }
}

/// Gradients keyed by parameter name, pulled off a tape after backward.
pub type Gradients = IndexMap<String, Vec<Scalar>>;

/// Collect gradients for every bound parameter that received one.
pub fn collect_grads(tape: &Tape, bindings: &[&[(String, TensorId)]]) -> Gradients {
    let mut grads = Gradients::new();
    for group in bindings {
        for (name, id) in group.iter() {
            if let Some(g) = tape.grad(*id) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
    }
    grads
}

impl EncoderBinding {
    pub fn bound(&self) -> &[(String, TensorId)] {
        &self.bound
    }

    /// Run the encoder. `dropout_rng` enables training mode; `None` is
    /// evaluation mode, a pure function of the inputs.
    pub fn encode(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput, ModelError> {
        let cfg = &self.config;
        let (b, s) = (batch.batch, batch.seq);
        if b == 0 || s == 0 {
            return Err(ModelError::Parameter("encode: empty batch".into()));
        }
        if s > cfg.max_seq_len {
            return Err(ModelError::Parameter(format!(
                "encode: seq {s} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if batch.token_ids.len() != b * s
            || batch.attention_mask.len() != b * s
            || batch.segment_ids.len() != b * s
        {
            return Err(ModelError::Parameter(
                "encode: batch field lengths disagree".into(),
            ));
        }
        for &t in &batch.token_ids {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::Index(format!(
                    "encode: token id {t} >= vocab {}",
                    cfg.vocab_size
                )));
            }
        }
        for &m in &batch.attention_mask {
            if m > 1 {
                return Err(ModelError::Parameter(
                    "encode: attention mask must be 0/1".into(),
                ));
            }
        }
        for &g in &batch.segment_ids {
            if g as usize >= SEGMENT_TYPES {
                return Err(ModelError::Index(format!(
                    "encode: segment id {g} >= {SEGMENT_TYPES}"
                )));
            }
        }
        let p = cfg.dropout as Scalar;

        let tok_ids: Vec<usize> = batch.token_ids.iter().map(|&t| t as usize).collect();
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let seg_ids: Vec<usize> = batch.segment_ids.iter().map(|&g| g as usize).collect();

        let tok = tape.gather_rows(self.token_emb, &tok_ids)?;
        let pos = tape.gather_rows(self.pos_emb, &pos_ids)?;
        let seg = tape.gather_rows(self.seg_emb, &seg_ids)?;
        let mut x = tape.add(tok, pos)?;
        x = tape.add(x, seg)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            x = tape.dropout(x, p, true, rng)?;
        }

        // Additive attention masks, one [seq, seq] leaf per example: -1e9 on
        // padded key columns so those keys get exactly zero weight.
        let mut mask_leaves = Vec::with_capacity(b);
        for eb in 0..b {
            let mut m = vec![0.0 as Scalar; s * s];
            for j in 0..s {
                if batch.attention_mask[eb * s + j] == 0 {
                    for i in 0..s {
                        m[i * s + j] = NEG_ATTENTION;
                    }
                }
            }
            mask_leaves.push(tape.leaf(m, &[s, s]));
        }

        let mut hidden_states = vec![x];
        let mut attention_probs = Vec::with_capacity(cfg.num_layers);
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as Scalar).sqrt();

        for layer in &self.layers {
            let q = tape.matmul(x, layer.wq)?;
            let q = tape.add_row_bias(q, layer.bq)?;
            let k = tape.matmul(x, layer.wk)?;
            let k = tape.add_row_bias(k, layer.bk)?;
            let v = tape.matmul(x, layer.wv)?;
            let v = tape.add_row_bias(v, layer.bv)?;

            let mut layer_probs = Vec::with_capacity(b * cfg.num_heads);
            let mut ctx_rows = Vec::with_capacity(b);
            for eb in 0..b {
                let qb = tape.slice_rows(q, eb * s, s)?;
                let kb = tape.slice_rows(k, eb * s, s)?;
                let vb = tape.slice_rows(v, eb * s, s)?;
                let mut head_ctx = Vec::with_capacity(cfg.num_heads);
                for h in 0..cfg.num_heads {
                    let qh = tape.slice_cols(qb, h * dh, dh)?;
                    let kh = tape.slice_cols(kb, h * dh, dh)?;
                    let vh = tape.slice_cols(vb, h * dh, dh)?;
                    let scores = tape.matmul_nt(qh, kh)?;
                    let scores = tape.scale(scores, inv_sqrt);
                    let scores = tape.add(scores, mask_leaves[eb])?;
                    let mut probs = tape.softmax(scores, 1)?;
                    layer_probs.push(probs);
                    if let Some(rng) = dropout_rng.as_deref_mut() {
                        probs = tape.dropout(probs, p, true, rng)?;
                    }
                    head_ctx.push(tape.matmul(probs, vh)?);
                }
                ctx_rows.push(tape.concat_cols(&head_ctx)?);
            }
            let ctx = tape.concat_rows(&ctx_rows)?;
            let mut attn_out = tape.matmul(ctx, layer.wo)?;
            attn_out = tape.add_row_bias(attn_out, layer.bo)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                attn_out = tape.dropout(attn_out, p, true, rng)?;
            }
            let residual = tape.add(x, attn_out)?;
            x = tape.layer_norm(residual, layer.attn_gain, layer.attn_bias, LN_EPSILON)?;

            let mut ff = tape.matmul(x, layer.w1)?;
            ff = tape.add_row_bias(ff, layer.b1)?;
            ff = tape.gelu(ff);
            ff = tape.matmul(ff, layer.w2)?;
            ff = tape.add_row_bias(ff, layer.b2)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                ff = tape.dropout(ff, p, true, rng)?;
            }
            let residual = tape.add(x, ff)?;
            x = tape.layer_norm(residual, layer.ff_gain, layer.ff_bias, LN_EPSILON)?;

            hidden_states.push(x);
            attention_probs.push(layer_probs);
        }

        Ok(EncoderOutput {
            hidden_states,
            batch: b,
            seq: s,
            attention_mask: batch.attention_mask.clone(),
            attention_probs,
        })
    }
}

fn cls_row_ids(output: &EncoderOutput) -> Vec<usize> {
    (0..output.batch).map(|b| b * output.seq).collect()
}

/// Vocabulary logits at the given masked positions, from the last layer.
pub fn mlm_logits(
    tape: &mut Tape,
    head: &HeadBinding,
    output: &EncoderOutput,
    positions: &[(usize, usize)],
) -> Result<TensorId, ModelError> {
    let mut flat = Vec::with_capacity(positions.len());
    for &(b, pos) in positions {
        if b >= output.batch || pos >= output.seq {
            return Err(ModelError::Index(format!(
                "mlm_logits: position ({b}, {pos}) outside [{}, {}]",
                output.batch, output.seq
            )));
        }
        flat.push(b * output.seq + pos);
    }
    let last = *output
        .hidden_states
        .last()
        .expect("at least one hidden state");
    let rows = tape.gather_rows(last, &flat)?;
    let logits = tape.matmul(rows, head.w)?;
    Ok(tape.add_row_bias(logits, head.b)?)
}

/// Two-way next-sentence logits from the [CLS] vector of the last layer.
pub fn nsp_logits(
    tape: &mut Tape,
    head: &HeadBinding,
    output: &EncoderOutput,
) -> Result<TensorId, ModelError> {
    let last = *output
        .hidden_states
        .last()
        .expect("at least one hidden state");
    let cls = tape.gather_rows(last, &cls_row_ids(output))?;
    let logits = tape.matmul(cls, head.w)?;
    Ok(tape.add_row_bias(logits, head.b)?)
}

/// Class logits from the [CLS] vector of the selected hidden state (or the
/// mean of all states). Dropout is applied before the dense layer when a
/// training rng is supplied.
pub fn classify(
    tape: &mut Tape,
    head: &HeadBinding,
    output: &EncoderOutput,
    source: HeadSource,
    dropout: Scalar,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, ModelError> {
    let num_layers = output.hidden_states.len() - 1;
    let cls_ids = cls_row_ids(output);
    let mut features = match source {
        HeadSource::LastLayer => {
            tape.gather_rows(*output.hidden_states.last().unwrap(), &cls_ids)?
        }
        HeadSource::Layer(k) => {
            if k == 0 || k > num_layers {
                return Err(ModelError::Parameter(format!(
                    "classify: layer {k} outside 1..={num_layers}"
                )));
            }
            tape.gather_rows(output.hidden_states[k], &cls_ids)?
        }
        HeadSource::MeanAll { include_embedding } => {
            let start = if include_embedding { 0 } else { 1 };
            let states = &output.hidden_states[start..];
            let mut sum = tape.gather_rows(states[0], &cls_ids)?;
            for state in &states[1..] {
                let cls = tape.gather_rows(*state, &cls_ids)?;
                sum = tape.add(sum, cls)?;
            }
            tape.scale(sum, 1.0 / states.len() as Scalar)
        }
    };
    if let Some(rng) = dropout_rng {
        features = tape.dropout(features, dropout, true, rng)?;
    }
    let logits = tape.matmul(features, head.w)?;
    Ok(tape.add_row_bias(logits, head.b)?)
}

/// One scalar per example from the last layer's [CLS] vector.
pub fn regress(
    tape: &mut Tape,
    head: &HeadBinding,
    output: &EncoderOutput,
) -> Result<TensorId, ModelError> {
    let last = *output
        .hidden_states
        .last()
        .expect("at least one hidden state");
    let cls = tape.gather_rows(last, &cls_row_ids(output))?;
    let out = tape.matmul(cls, head.w)?;
    let out = tape.add_row_bias(out, head.b)?;
    Ok(tape.reshape(out, &[output.batch])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden: 16,
            num_heads: 4,
            ff_dim: 32,
            vocab_size: 30,
            max_seq_len: 16,
            dropout: 0.1,
            num_classes: 3,
        }
    }

    fn batch_of(token_rows: &[&[u32]]) -> TokenBatch {
        let seq = token_rows[0].len();
        let mut b = TokenBatch::new(token_rows.len(), seq);
        for (r, row) in token_rows.iter().enumerate() {
            for (j, &id) in row.iter().enumerate() {
                b.token_ids[r * seq + j] = id;
                b.attention_mask[r * seq + j] = u8::from(id != 0);
            }
        }
        b
    }

    fn set_param(params: &mut ParamSet, name: &str, value: Vec<Scalar>) {
        let p = params.get_mut(name).unwrap();
        assert_eq!(p.value.len(), value.len(), "{name}");
        p.value = value;
    }

    fn zero_all(params: &mut ParamSet) {
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for name in names {
            let p = params.get_mut(&name).unwrap();
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = ParamSet::init(&cfg, 7).unwrap();
        let b = ParamSet::init(&cfg, 7).unwrap();
        let c = ParamSet::init(&cfg, 8).unwrap();
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa, pb, "{na} differs between same-seed inits");
        }
        assert!(a.iter().zip(c.iter()).any(|((_, pa), (_, pc))| pa != pc));
    }

    #[test]
    fn init_biases_zero_gains_one() {
        let params = ParamSet::init(&tiny_config(), 3).unwrap();
        for suffix in ["attn.bq", "attn.bk", "attn.bv", "attn.bo", "ff.b1", "ff.b2"] {
            let p = params.get(&format!("encoder.1.{suffix}")).unwrap();
            assert!(p.value.iter().all(|&v| v == 0.0), "{suffix}");
        }
        assert!(params
            .get("head.cls.b")
            .unwrap()
            .value
            .iter()
            .all(|&v| v == 0.0));
        assert!(params
            .get("encoder.2.attn_norm.gain")
            .unwrap()
            .value
            .iter()
            .all(|&v| v == 1.0));
        assert!(params
            .get("encoder.1.ff_norm.bias")
            .unwrap()
            .value
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn init_std_within_truncated_normal_band() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden: 768,
            num_heads: 12,
            ff_dim: 64,
            vocab_size: 8,
            max_seq_len: 3,
            dropout: 0.1,
            num_classes: 3,
        };
        let params = ParamSet::init(&cfg, 1).unwrap();
        let w = &params.get("encoder.1.attn.wq").unwrap().value;
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
        assert!(w.iter().all(|&v| v.abs() <= 0.04 + 1e-6));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3;
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
        let mut cfg = tiny_config();
        cfg.max_seq_len = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn parameter_groups_partition_every_tensor() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 5).unwrap();
        let groups = group_names(cfg.num_layers);
        let mut seen: std::collections::BTreeMap<String, usize> = Default::default();
        for name in params.names() {
            let g = group_of(name);
            assert!(groups.contains(&g), "{name} maps to unknown group {g}");
            *seen.entry(g).or_insert(0) += 1;
        }
        for g in &groups {
            assert!(seen.get(g).copied().unwrap_or(0) > 0, "group {g} is empty");
        }
    }

    #[test]
    fn encode_shape_contract() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 2).unwrap();
        let batch = batch_of(&[&[2, 7, 8, 9, 3, 0, 0, 0], &[2, 10, 11, 3, 0, 0, 0, 0]]);
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, &params, |_| false);
        let out = enc.encode(&mut tape, &batch, None).unwrap();
        assert_eq!(out.hidden_states.len(), cfg.num_layers + 1);
        for &state in &out.hidden_states {
            assert_eq!(tape.shape(state), &[2 * 8, 16]);
        }
        assert_eq!((out.batch, out.seq), (2, 8));
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, &params, |_| false);
        let batch = batch_of(&[&[2, 29, 3]]);
        assert!(enc.encode(&mut tape, &batch, None).is_ok());
        let batch = batch_of(&[&[2, 30, 3]]);
        assert!(matches!(
            enc.encode(&mut tape, &batch, None),
            Err(ModelError::Index(_))
        ));
        let mut batch = batch_of(&[&[2, 5, 3]]);
        batch.attention_mask[1] = 2;
        assert!(matches!(
            enc.encode(&mut tape, &batch, None),
            Err(ModelError::Parameter(_))
        ));
    }

    #[test]
    fn padding_content_cannot_leak_into_real_positions() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 9).unwrap();
        let run = |pad_token: u32| {
            let mut batch = batch_of(&[&[2, 7, 8, 3, 0, 0]]);
            batch.token_ids[4] = pad_token;
            batch.token_ids[5] = pad_token;
            // attention_mask stays zero at the padded positions
            batch.attention_mask[4] = 0;
            batch.attention_mask[5] = 0;
            let mut tape = Tape::new();
            let enc = bind_encoder(&mut tape, &params, |_| false);
            let out = enc.encode(&mut tape, &batch, None).unwrap();
            let last = *out.hidden_states.last().unwrap();
            tape.data(last)[..4 * cfg.hidden].to_vec()
        };
        let a = run(0);
        let b = run(17);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_is_pure_without_dropout() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 9).unwrap();
        let run = || {
            let batch = batch_of(&[&[2, 5, 6, 7, 3]]);
            let mut tape = Tape::new();
            let enc = bind_encoder(&mut tape, &params, |_| false);
            let out = enc.encode(&mut tape, &batch, None).unwrap();
            tape.data(*out.hidden_states.last().unwrap()).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_head_identity_attention_matches_hand_computation() {
        let cfg = ModelConfig {
            num_layers: 1,
            hidden: 2,
            num_heads: 1,
            ff_dim: 2,
            vocab_size: 8,
            max_seq_len: 4,
            dropout: 0.0,
            num_classes: 3,
        };
        let mut params = ParamSet::init(&cfg, 0).unwrap();
        zero_all(&mut params);
        set_param(&mut params, "encoder.1.attn.wq", vec![1.0, 0.0, 0.0, 1.0]);
        set_param(&mut params, "encoder.1.attn.wk", vec![1.0, 0.0, 0.0, 1.0]);
        set_param(&mut params, "encoder.1.attn.wv", vec![1.0, 0.0, 0.0, 1.0]);
        set_param(&mut params, "encoder.1.attn_norm.gain", vec![1.0, 1.0]);
        set_param(&mut params, "encoder.1.ff_norm.gain", vec![1.0, 1.0]);
        // Two tokens embedded as the standard basis vectors.
        let mut token_emb = vec![0.0; 8 * 2];
        token_emb[5 * 2] = 1.0;
        token_emb[6 * 2 + 1] = 1.0;
        set_param(&mut params, "embeddings.token", token_emb);

        let batch = batch_of(&[&[5, 6]]);
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, &params, |_| false);
        let out = enc.encode(&mut tape, &batch, None).unwrap();

        // Scores are x x^T / sqrt(2) with x = I, so each row softmaxes
        // [1/sqrt(2), 0] (diagonal first).
        let a = (1.0f64 / 2.0f64.sqrt()).exp();
        let on_diag = (a / (a + 1.0)) as Scalar;
        let off_diag = (1.0 / (a + 1.0)) as Scalar;
        let probs = tape.data(out.attention_probs[0][0]);
        let expected = [on_diag, off_diag, off_diag, on_diag];
        for (p, e) in probs.iter().zip(expected.iter()) {
            assert!((p - e).abs() < 1e-5, "{probs:?} vs {expected:?}");
        }
    }

    fn zero_output(batch: usize, seq: usize, hidden: usize, tape: &mut Tape) -> EncoderOutput {
        let state = tape.leaf(vec![0.0; batch * seq * hidden], &[batch * seq, hidden]);
        EncoderOutput {
            hidden_states: vec![state],
            batch,
            seq,
            attention_mask: vec![1; batch * seq],
            attention_probs: Vec::new(),
        }
    }

    #[test]
    fn mlm_logits_zero_everything_gives_vocab_bias() {
        let cfg = ModelConfig {
            vocab_size: 50,
            ..tiny_config()
        };
        let mut params = ParamSet::init(&cfg, 4).unwrap();
        zero_all(&mut params);
        let bias: Vec<Scalar> = (0..50).map(|i| i as Scalar * 0.1).collect();
        set_param(&mut params, "head.mlm.b", bias.clone());
        let mut tape = Tape::new();
        let head = bind_head(&mut tape, &params, HeadKind::Mlm, |_| false);
        let out = zero_output(2, 4, cfg.hidden, &mut tape);
        let logits = mlm_logits(&mut tape, &head, &out, &[(0, 1), (1, 2), (1, 3)]).unwrap();
        assert_eq!(tape.shape(logits), &[3, 50]);
        for row in tape.data(logits).chunks(50) {
            assert_eq!(row, &bias[..]);
        }
    }

    #[test]
    fn mlm_positions_validated() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 4).unwrap();
        let mut tape = Tape::new();
        let head = bind_head(&mut tape, &params, HeadKind::Mlm, |_| false);
        let out = zero_output(1, 4, cfg.hidden, &mut tape);
        assert!(matches!(
            mlm_logits(&mut tape, &head, &out, &[(0, 4)]),
            Err(ModelError::Index(_))
        ));
    }

    #[test]
    fn mlm_loss_reaches_token_embeddings() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 12).unwrap();
        let batch = batch_of(&[&[2, 7, 4, 9, 3]]);
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, &params, |_| true);
        let head = bind_head(&mut tape, &params, HeadKind::Mlm, |_| true);
        let out = enc.encode(&mut tape, &batch, None).unwrap();
        let logits = mlm_logits(&mut tape, &head, &out, &[(0, 2)]).unwrap();
        let weights = vec![1.0; cfg.vocab_size];
        let loss = tape.cross_entropy_weighted(logits, &[8], &weights).unwrap();
        tape.backward(loss).unwrap();
        let (_, token_id) = enc
            .bound()
            .iter()
            .find(|(n, _)| n == "embeddings.token")
            .unwrap()
            .clone();
        let grad = tape
            .grad(token_id)
            .expect("token embedding gradient missing");
        let h = cfg.hidden;
        // In-batch token rows receive gradient.
        assert!(grad[7 * h..8 * h].iter().any(|&g| g != 0.0));
        // A token that never appears stays at exactly zero.
        assert!(grad[20 * h..21 * h].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nsp_logits_shape_and_batch_independence() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 21).unwrap();
        let rows: [&[u32]; 4] = [&[2, 5, 3, 0], &[2, 6, 3, 0], &[2, 7, 3, 0], &[2, 8, 3, 0]];
        let logits_for = |order: &[usize]| {
            let picked: Vec<&[u32]> = order.iter().map(|&i| rows[i]).collect();
            let batch = batch_of(&picked);
            let mut tape = Tape::new();
            let enc = bind_encoder(&mut tape, &params, |_| false);
            let head = bind_head(&mut tape, &params, HeadKind::Nsp, |_| false);
            let out = enc.encode(&mut tape, &batch, None).unwrap();
            let logits = nsp_logits(&mut tape, &head, &out).unwrap();
            assert_eq!(tape.shape(logits), &[order.len(), 2]);
            tape.data(logits).to_vec()
        };
        let forward = logits_for(&[0, 1, 2, 3]);
        let reversed = logits_for(&[3, 2, 1, 0]);
        for i in 0..4 {
            assert_eq!(
                &forward[i * 2..i * 2 + 2],
                &reversed[(3 - i) * 2..(3 - i) * 2 + 2]
            );
        }
    }

    #[test]
    fn nsp_zero_weights_give_bias() {
        let cfg = tiny_config();
        let mut params = ParamSet::init(&cfg, 4).unwrap();
        zero_all(&mut params);
        set_param(&mut params, "head.nsp.b", vec![0.25, -0.75]);
        let mut tape = Tape::new();
        let head = bind_head(&mut tape, &params, HeadKind::Nsp, |_| false);
        let out = zero_output(3, 4, cfg.hidden, &mut tape);
        let logits = nsp_logits(&mut tape, &head, &out).unwrap();
        for row in tape.data(logits).chunks(2) {
            assert_eq!(row, &[0.25, -0.75]);
        }
    }

    #[test]
    fn classify_shapes_and_layer_selection() {
        let cfg = tiny_config();
        let params = ParamSet::init(&cfg, 31).unwrap();
        let batch = batch_of(&[&[2, 5, 6, 3], &[2, 7, 8, 3]]);
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, &params, |_| false);
        let head = bind_head(&mut tape, &params, HeadKind::Classification, |_| false);
        let out = enc.encode(&mut tape, &batch, None).unwrap();
        let last = classify(&mut tape, &head, &out, HeadSource::LastLayer, 0.0, None).unwrap();
        assert_eq!(tape.shape(last), &[2, 3]);
        let explicit = classify(
            &mut tape,
            &head,
            &out,
            HeadSource::Layer(cfg.num_layers),
            0.0,
            None,
        )
        .unwrap();
        assert_eq!(tape.data(last), tape.data(explicit));
        assert!(matches!(
            classify(&mut tape, &head, &out, HeadSource::Layer(0), 0.0, None),
            Err(ModelError::Parameter(_))
        ));
        assert!(matches!(
            classify(
                &mut tape,
                &head,
                &out,
                HeadSource::Layer(cfg.num_layers + 1),
                0.0,
                None
            ),
            Err(ModelError::Parameter(_))
        ));
    }

    #[test]
    fn classify_mean_of_all_layers_single_layer_model() {
        let cfg = ModelConfig {
            num_layers: 1,
            ..tiny_config()
        };
        let params = ParamSet::init(&cfg, 13).unwrap();
        let batch = batch_of(&[&[2, 5, 6, 3]]);
        let mut tape = Tape::new();
        let enc = bind_encoder(&mut tape, &params, |_| false);
        let head = bind_head(&mut tape, &params, HeadKind::Classification, |_| false);
        let out = enc.encode(&mut tape, &batch, None).unwrap();
        let logits = classify(
            &mut tape,
            &head,
            &out,
            HeadSource::MeanAll {
                include_embedding: true,
            },
            0.0,
            None,
        )
        .unwrap();

        let h = cfg.hidden;
        let cls0 = &tape.data(out.hidden_states[0])[..h].to_vec();
        let cls1 = &tape.data(out.hidden_states[1])[..h].to_vec();
        let w = &params.get("head.cls.w").unwrap().value;
        let b = &params.get("head.cls.b").unwrap().value;
        for c in 0..3 {
            let mut expected = b[c] as f64;
            for j in 0..h {
                expected += ((cls0[j] + cls1[j]) as f64 / 2.0) * w[j * 3 + c] as f64;
            }
            let got = tape.data(logits)[c] as f64;
            assert!(
                (got - expected).abs() < 1e-5,
                "class {c}: {got} vs {expected}"
            );
        }

        // Excluding the embedding output must reproduce the last layer alone.
        let excl = classify(
            &mut tape,
            &head,
            &out,
            HeadSource::MeanAll {
                include_embedding: false,
            },
            0.0,
            None,
        )
        .unwrap();
        let last = classify(&mut tape, &head, &out, HeadSource::LastLayer, 0.0, None).unwrap();
        for (a, b) in tape.data(excl).iter().zip(tape.data(last).iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn regress_shape_and_zero_weight_bias() {
        let cfg = tiny_config();
        let mut params = ParamSet::init(&cfg, 4).unwrap();
        zero_all(&mut params);
        set_param(&mut params, "head.reg.b", vec![0.5]);
        let mut tape = Tape::new();
        let head = bind_head(&mut tape, &params, HeadKind::Regression, |_| false);
        let out = zero_output(3, 4, cfg.hidden, &mut tape);
        let pred = regress(&mut tape, &head, &out).unwrap();
        assert_eq!(tape.shape(pred), &[3]);
        assert_eq!(tape.data(pred), &[0.5, 0.5, 0.5]);
    }
}
