//! The bidirectional transformer stack shared by the query encoder, video decoder,
//! video encoder and query decoder, together with the token embedding, the video
//! input projection, and the two linear heads.
//!
//! An encoder is a decoder layer with the cross-attention sublayer skipped. When
//! `share_encoder_decoder` is set, all four roles resolve to one stack of weights;
//! otherwise encoders and decoders get separate stacks.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{AttnMask, Graph, Mat, Var};
use crate::error::{Error, Result};

/// Architecture sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_words: usize,
    pub n_ratios: usize,
    pub feature_dim: usize,
    pub share_encoder_decoder: bool,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        for (key, v) in [
            ("n_layers", self.n_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.n_words),
            ("ratios", self.n_ratios),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Which of the four encoder/decoder roles a stack is used in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    QueryEncoder,
    VideoDecoder,
    VideoEncoder,
    QueryDecoder,
}

impl Role {
    pub fn is_encoder(self) -> bool {
        matches!(self, Role::QueryEncoder | Role::VideoEncoder)
    }
}

/// Named, shaped parameter tensors addressed by slot index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Mat) -> usize {
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn tensor(&self, slot: usize) -> &Mat {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Mat {
        &mut self.tensors[slot]
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Debug, Clone)]
struct Stack {
    layers: Vec<Layer>,
    final_norm: Norm,
}

/// All trainable weights plus the slot layout that addresses them.
#[derive(Debug, Clone)]
pub struct Model {
    dims: ModelDims,
    store: ParamStore,
    embedding: usize,
    video_proj: Linear,
    stacks: Vec<Stack>,
    score_head: Linear,
    vocab_head: Linear,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn weight(&mut self, rows: usize, cols: usize, fan_in: usize) -> Mat {
        let std = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            z * std
        })
    }
}

fn linear(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Linear {
    Linear {
        w: store.add(format!("{name}.weight"), init.weight(d_in, d_out, d_in)),
        b: store.add(format!("{name}.bias"), Mat::zeros((1, d_out))),
    }
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Norm {
    Norm {
        gain: store.add(format!("{name}.gain"), Mat::ones((1, d))),
        bias: store.add(format!("{name}.bias"), Mat::zeros((1, d))),
    }
}

fn attention(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Attention {
    Attention {
        q: linear(store, init, &format!("{name}.q"), d, d),
        k: linear(store, init, &format!("{name}.k"), d, d),
        v: linear(store, init, &format!("{name}.v"), d, d),
        out: linear(store, init, &format!("{name}.out"), d, d),
    }
}

fn stack(store: &mut ParamStore, init: &mut Init, name: &str, dims: &ModelDims) -> Stack {
    let d = dims.d_model;
    let layers = (0..dims.n_layers)
        .map(|l| {
            let p = format!("{name}.layer{l}");
            Layer {
                self_norm: norm(store, &format!("{p}.self_norm"), d),
                self_attn: attention(store, init, &format!("{p}.self_attn"), d),
                cross_norm: norm(store, &format!("{p}.cross_norm"), d),
                cross_attn: attention(store, init, &format!("{p}.cross_attn"), d),
                ffn_norm: norm(store, &format!("{p}.ffn_norm"), d),
                ffn_in: linear(store, init, &format!("{p}.ffn_in"), d, dims.ffn_dim),
                ffn_out: linear(store, init, &format!("{p}.ffn_out"), dims.ffn_dim, d),
            }
        })
        .collect();
    Stack {
        layers,
        final_norm: norm(store, &format!("{name}.final_norm"), d),
    }
}

/// Deterministic sinusoidal positional encoding for `n` positions.
pub fn positional_encoding(n: usize, d: usize) -> Mat {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Model {
    /// Fresh parameters: normal weights with std `1/sqrt(fan_in)`, zero biases, unit gains.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::default();
        let d = dims.d_model;
        // a lookup row is one active input, so the table is unit-scale
        let embedding = store.add("embedding".into(), init.weight(dims.n_words, d, 1));
        let video_proj = linear(&mut store, &mut init, "video_proj", dims.feature_dim, d);
        let stacks = if dims.share_encoder_decoder {
            vec![stack(&mut store, &mut init, "shared", &dims)]
        } else {
            vec![
                stack(&mut store, &mut init, "encoder", &dims),
                stack(&mut store, &mut init, "decoder", &dims),
            ]
        };
        let score_head = linear(&mut store, &mut init, "score_head", d, dims.n_ratios);
        let vocab_head = linear(&mut store, &mut init, "vocab_head", d, dims.n_words);
        Ok(Self {
            dims,
            store,
            embedding,
            video_proj,
            stacks,
            score_head,
            vocab_head,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    fn stack_for(&self, role: Role) -> &Stack {
        if self.stacks.len() == 1 || role.is_encoder() {
            &self.stacks[0]
        } else {
            &self.stacks[1]
        }
    }

    /// Slots of the layer weights a role reads, in a fixed order.
    pub fn stack_slots(&self, role: Role) -> Vec<usize> {
        let stack = self.stack_for(role);
        let mut out = Vec::new();
        let lin = |l: &Linear, out: &mut Vec<usize>| out.extend([l.w, l.b]);
        let nrm = |n: &Norm, out: &mut Vec<usize>| out.extend([n.gain, n.bias]);
        for layer in &stack.layers {
            nrm(&layer.self_norm, &mut out);
            for a in [&layer.self_attn, &layer.cross_attn] {
                for l in [&a.q, &a.k, &a.v, &a.out] {
                    lin(l, &mut out);
                }
            }
            nrm(&layer.cross_norm, &mut out);
            nrm(&layer.ffn_norm, &mut out);
            lin(&layer.ffn_in, &mut out);
            lin(&layer.ffn_out, &mut out);
        }
        nrm(&stack.final_norm, &mut out);
        out
    }

    /// Parameter slots of the scoring head `(weight, bias)`.
    pub fn score_head_slots(&self) -> (usize, usize) {
        (self.score_head.w, self.score_head.b)
    }

    /// Parameter slots of the vocabulary head `(weight, bias)`.
    pub fn vocab_head_slots(&self) -> (usize, usize) {
        (self.vocab_head.w, self.vocab_head.b)
    }

    /// Replaces every tensor from `(name, value)` pairs; all names and shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Mat)>) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Shape {
                context: "checkpoint",
                detail: format!("{} tensors, model has {}", tensors.len(), self.store.len()),
            });
        }
        for (name, value) in tensors {
            let slot = self.store.slot(&name).ok_or_else(|| Error::Shape {
                context: "checkpoint",
                detail: format!("unknown tensor `{name}`"),
            })?;
            if self.store.tensor(slot).dim() != value.dim() {
                return Err(Error::Shape {
                    context: "checkpoint",
                    detail: format!(
                        "`{name}` is {:?}, expected {:?}",
                        value.dim(),
                        self.store.tensor(slot).dim()
                    ),
                });
            }
            *self.store.tensor_mut(slot) = value;
        }
        Ok(())
    }
}

/// A sequence of row vectors with an optional padding mask (`true` = padding).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub values: Mat,
    pub padding: Option<Vec<bool>>,
}

impl FeatureSequence {
    pub fn new(values: Mat) -> Self {
        Self {
            values,
            padding: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A sequence living on a tape.
#[derive(Debug, Clone)]
pub struct SeqVar {
    pub var: Var,
    pub padding: Option<Arc<Vec<bool>>>,
}

impl SeqVar {
    pub fn unpadded(var: Var) -> Self {
        Self { var, padding: None }
    }
}

/// Attention maps and contexts recorded during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    pub self_attention: Vec<Mat>,
    pub cross_attention: Vec<Mat>,
    pub cross_context: Vec<Mat>,
}

/// Per-forward settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Dropout rate on sublayer outputs; zero disables it.
    pub dropout: f64,
    /// Causal self-attention in the query decoder, used only by the autoregressive objective.
    pub causal_query_decoder: bool,
}

/// A forward pass on a fresh tape over borrowed parameters.
pub struct Forward<'m> {
    model: &'m Model,
    pub graph: Graph,
    options: ForwardOptions,
    rng: Option<ChaCha8Rng>,
    trace: Option<Trace>,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            graph: Graph::new(),
            options: ForwardOptions::default(),
            rng: None,
            trace: None,
        }
    }

    /// Enables dropout and/or the causal decoder. Dropout draws from `rng`.
    pub fn with_options(mut self, options: ForwardOptions, rng: ChaCha8Rng) -> Self {
        self.options = options;
        self.rng = Some(rng);
        self
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Trace::default());
        self
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.trace.as_ref()
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    fn p(&mut self, slot: usize) -> Var {
        self.graph.param(slot, self.model.store.tensor(slot))
    }

    fn linear(&mut self, x: Var, l: Linear) -> Var {
        let w = self.p(l.w);
        let b = self.p(l.b);
        let xw = self.graph.matmul(x, w);
        self.graph.add_row(xw, b)
    }

    fn layer_norm(&mut self, x: Var, n: Norm) -> Var {
        let g = self.p(n.gain);
        let b = self.p(n.bias);
        let z = self.graph.normalize(x);
        let z = self.graph.mul_row(z, g);
        self.graph.add_row(z, b)
    }

    fn dropout(&mut self, x: Var) -> Var {
        let rate = self.options.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return x;
        };
        let keep = 1.0 - rate;
        let mask = Mat::from_shape_fn(self.graph.shape(x), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.graph.mul_const(x, Arc::new(mask))
    }

    /// Token embeddings plus sinusoidal positions; PAD rows are flagged as padding.
    pub fn embed_tokens(&mut self, ids: &[usize], pad_id: Option<usize>) -> Result<SeqVar> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let n_words = self.model.dims.n_words;
        if let Some(&id) = ids.iter().find(|&&id| id >= n_words) {
            return Err(Error::TokenOutOfRange { id, size: n_words });
        }
        let table = self.p(self.model.embedding);
        let rows = self.graph.gather_rows(table, ids.to_vec());
        let pos = self
            .graph
            .constant(positional_encoding(ids.len(), self.model.dims.d_model));
        let var = self.graph.add(rows, pos);
        let padding = pad_id
            .map(|pad| ids.iter().map(|&id| id == pad).collect::<Vec<_>>())
            .filter(|mask| mask.iter().any(|&m| m))
            .map(Arc::new);
        Ok(SeqVar { var, padding })
    }

    /// Linear projection of raw frame features into model width (no positions).
    pub fn project_video(&mut self, features: &Mat) -> Result<Var> {
        if features.nrows() == 0 {
            return Err(Error::Empty("video"));
        }
        if features.ncols() != self.model.dims.feature_dim {
            return Err(Error::Shape {
                context: "video projection",
                detail: format!(
                    "feature width {} but model expects {}",
                    features.ncols(),
                    self.model.dims.feature_dim
                ),
            });
        }
        let x = self.graph.constant(features.clone());
        Ok(self.linear(x, self.model.video_proj))
    }

    /// Rows `rows` of an already projected sequence, with positions restarting at zero.
    pub fn positioned_rows(&mut self, projected: Var, rows: std::ops::Range<usize>) -> SeqVar {
        let n = rows.len();
        let picked = if rows.start == 0 && n == self.graph.shape(projected).0 {
            projected
        } else {
            self.graph.gather_rows(projected, rows.collect())
        };
        let pos = self
            .graph
            .constant(positional_encoding(n, self.model.dims.d_model));
        SeqVar::unpadded(self.graph.add(picked, pos))
    }

    fn attend(
        &mut self,
        x: Var,
        memory: Var,
        attn: Attention,
        mask: Option<&AttnMask>,
        cross: bool,
    ) -> Var {
        let d = self.model.dims.d_model;
        let h = self.model.dims.n_heads;
        let dk = d / h;
        let q = self.linear(x, attn.q);
        let k = self.linear(memory, attn.k);
        let v = self.linear(memory, attn.v);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        let mut maps = Vec::new();
        for head in 0..h {
            let qh = self.graph.slice_cols(q, head * dk, dk);
            let kh = self.graph.slice_cols(k, head * dk, dk);
            let vh = self.graph.slice_cols(v, head * dk, dk);
            let kt = self.graph.transpose(kh);
            let logits = self.graph.matmul(qh, kt);
            let logits = self.graph.scale(logits, scale);
            let weights = self.graph.masked_softmax(logits, mask);
            if self.trace.is_some() {
                maps.push(self.graph.value(weights).clone());
            }
            heads.push(self.graph.matmul(weights, vh));
        }
        let context = self.graph.concat_cols(heads);
        if let Some(trace) = self.trace.as_mut() {
            if cross {
                trace.cross_attention.extend(maps);
                trace.cross_context.push(self.graph.value(context).clone());
            } else {
                trace.self_attention.extend(maps);
            }
        }
        self.linear(context, attn.out)
    }

    fn mask(
        &self,
        n_query: usize,
        key_padding: Option<&Arc<Vec<bool>>>,
        n_key: usize,
        causal: bool,
    ) -> Option<AttnMask> {
        if key_padding.is_none() && !causal {
            return None;
        }
        Some(Array2::from_shape_fn((n_query, n_key), |(i, j)| {
            let unpadded = key_padding.is_none_or(|p| !p[j]);
            unpadded && (!causal || j <= i)
        }))
    }

    fn run_stack(&mut self, x: &SeqVar, memory: Option<&SeqVar>, role: Role) -> Result<SeqVar> {
        let stack = self.model.stack_for(role).clone();
        let (n, width) = self.graph.shape(x.var);
        if n == 0 {
            return Err(Error::Empty("sequence"));
        }
        if width != self.model.dims.d_model {
            return Err(Error::Shape {
                context: "transformer input",
                detail: format!("width {width}, model width {}", self.model.dims.d_model),
            });
        }
        if let Some(m) = memory {
            let (nm, wm) = self.graph.shape(m.var);
            if nm == 0 {
                return Err(Error::Empty("memory"));
            }
            if wm != width {
                return Err(Error::Shape {
                    context: "cross-attention",
                    detail: format!("query width {width}, memory width {wm}"),
                });
            }
        }
        let causal = role == Role::QueryDecoder && self.options.causal_query_decoder;
        let self_mask = self.mask(n, x.padding.as_ref(), n, causal);
        let cross_mask = memory.and_then(|m| {
            let nm = self.graph.shape(m.var).0;
            self.mask(n, m.padding.as_ref(), nm, false)
        });
        let mut h = x.var;
        for layer in &stack.layers {
            let z = self.layer_norm(h, layer.self_norm);
            let a = self.attend(z, z, layer.self_attn, self_mask.as_ref(), false);
            let a = self.dropout(a);
            h = self.graph.add(h, a);
            if let Some(m) = memory {
                let z = self.layer_norm(h, layer.cross_norm);
                let a = self.attend(z, m.var, layer.cross_attn, cross_mask.as_ref(), true);
                let a = self.dropout(a);
                h = self.graph.add(h, a);
            }
            let z = self.layer_norm(h, layer.ffn_norm);
            let f = self.linear(z, layer.ffn_in);
            let f = self.graph.gelu(f);
            let f = self.linear(f, layer.ffn_out);
            let f = self.dropout(f);
            h = self.graph.add(h, f);
        }
        let out = self.layer_norm(h, stack.final_norm);
        Ok(SeqVar {
            var: out,
            padding: x.padding.clone(),
        })
    }

    /// Bidirectional self-attention stack without cross-attention.
    pub fn encode(&mut self, x: &SeqVar, role: Role) -> Result<SeqVar> {
        self.run_stack(x, None, role)
    }

    /// Self-attention over `x`, cross-attention from `x` into `memory`, feed-forward.
    pub fn decode(&mut self, x: &SeqVar, memory: &SeqVar, role: Role) -> Result<SeqVar> {
        self.run_stack(x, Some(memory), role)
    }

    /// Confidence grid `sigmoid(c W_s + b_s)`, one row per time step.
    pub fn score(&mut self, c: Var) -> Var {
        let logits = self.linear(c, self.model.score_head);
        self.graph.sigmoid(logits)
    }

    /// Vocabulary energies `f W_v + b_v`, one row per query position.
    pub fn energies(&mut self, f: Var) -> Var {
        self.linear(f, self.model.vocab_head)
    }
}

impl Model {
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<FeatureSequence> {
        let mut fwd = Forward::new(self);
        let s = fwd.embed_tokens(ids, Some(crate::corpus::PAD))?;
        Ok(FeatureSequence {
            values: fwd.graph.value(s.var).clone(),
            padding: s.padding.map(|p| p.as_ref().clone()),
        })
    }

    pub fn encode_sequence(&self, x: &FeatureSequence, role: Role) -> Result<FeatureSequence> {
        let mut fwd = Forward::new(self);
        let seq = seq_constant(&mut fwd.graph, x);
        let out = fwd.encode(&seq, role)?;
        Ok(FeatureSequence {
            values: fwd.graph.value(out.var).clone(),
            padding: x.padding.clone(),
        })
    }

    pub fn decode_sequence(
        &self,
        x: &FeatureSequence,
        memory: &FeatureSequence,
        role: Role,
    ) -> Result<FeatureSequence> {
        let mut fwd = Forward::new(self);
        let xs = seq_constant(&mut fwd.graph, x);
        let ms = seq_constant(&mut fwd.graph, memory);
        let out = fwd.decode(&xs, &ms, role)?;
        Ok(FeatureSequence {
            values: fwd.graph.value(out.var).clone(),
            padding: x.padding.clone(),
        })
    }
}

/// Places a value-level sequence on a tape as a constant.
pub fn seq_constant(graph: &mut Graph, x: &FeatureSequence) -> SeqVar {
    SeqVar {
        var: graph.constant(x.values.clone()),
        padding: x.padding.clone().map(Arc::new),
    }
}
