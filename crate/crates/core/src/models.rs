//! Toy architectures whose prunable matrices follow the encoder layout:
//! per layer Q, K, V, O, FF1 and FF2.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SpurError};
use crate::graph::{ExprGraph, NodeId};
use crate::matrix::Matrix;
use crate::pruner::{apply_mask, PruningState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Mlp,
    Transformer,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Transformer => "transformer",
        }
    }
}

impl FromStr for ModelKind {
    type Err = SpurError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Self::Mlp),
            "transformer" => Ok(Self::Transformer),
            other => Err(SpurError::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Role tag of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Q,
    K,
    V,
    O,
    Ff1,
    Ff2,
    /// Hidden layer of the feed-forward classifier.
    Dense,
    TokenEmbedding,
    PositionEmbedding,
    Bias,
    NormGain,
    NormBias,
    Head,
    HeadBias,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Q => "Q",
            Self::K => "K",
            Self::V => "V",
            Self::O => "O",
            Self::Ff1 => "FF1",
            Self::Ff2 => "FF2",
            Self::Dense => "DENSE",
            Self::TokenEmbedding => "EMBED",
            Self::PositionEmbedding => "POS",
            Self::Bias => "BIAS",
            Self::NormGain => "NORM_GAIN",
            Self::NormBias => "NORM_BIAS",
            Self::Head => "HEAD",
            Self::HeadBias => "HEAD_BIAS",
        }
    }

    /// Weight matrices eligible for pruning and regularization.
    pub fn is_prunable(self) -> bool {
        matches!(
            self,
            Self::Q | Self::K | Self::V | Self::O | Self::Ff1 | Self::Ff2 | Self::Dense
        )
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = SpurError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "Q" => Self::Q,
            "K" => Self::K,
            "V" => Self::V,
            "O" => Self::O,
            "FF1" => Self::Ff1,
            "FF2" => Self::Ff2,
            "DENSE" => Self::Dense,
            "EMBED" => Self::TokenEmbedding,
            "POS" => Self::PositionEmbedding,
            "BIAS" => Self::Bias,
            "NORM_GAIN" => Self::NormGain,
            "NORM_BIAS" => Self::NormBias,
            "HEAD" => Self::Head,
            "HEAD_BIAS" => Self::HeadBias,
            other => return Err(SpurError::Config(format!("unknown role `{other}`"))),
        })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Feature width of the classifier input (MLP only).
    pub input_dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Transformer,
            layers: 2,
            hidden_dim: 32,
            heads: 2,
            ffn_dim: 128,
            vocab: 24,
            max_seq: 12,
            input_dim: 2,
            classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("input_dim", self.input_dim),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(SpurError::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.kind == ModelKind::Transformer {
            if self.hidden_dim % self.heads != 0 {
                return Err(SpurError::Config(format!(
                    "hidden_dim {} is not divisible by heads {}",
                    self.hidden_dim, self.heads
                )));
            }
            if self.hidden_dim < 2 {
                return Err(SpurError::Config(
                    "transformer hidden_dim must be at least 2 for layer norm".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    /// Encoder layer for per-layer tensors.
    pub layer: Option<usize>,
    pub value: Matrix,
}

/// Named parameter tensors in a fixed, deterministic order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTable {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamTable {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return Err(SpurError::Integrity(format!("duplicate tensor `{}`", p.name)));
            }
        }
        Ok(Self { params, index })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.params[i].value
    }

    pub fn prunable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.role.is_prunable())
    }

    /// Adds every tensor to `g` as a leaf, in table order.
    pub fn bind(&self, g: &mut ExprGraph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    fn node(&self, bound: &[NodeId], name: &str) -> Result<NodeId> {
        self.position(name)
            .map(|i| bound[i])
            .ok_or_else(|| SpurError::Integrity(format!("model has no tensor `{name}`")))
    }
}

pub fn weight_name(layer: usize, role: Role) -> String {
    format!("layer{layer}.{role}")
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Init {
    fn dense(&mut self, name: String, role: Role, layer: Option<usize>, fan_in: usize, fan_out: usize) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let value = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..=a));
        self.params.push(Param { name, role, layer, value });
    }

    fn constant(&mut self, name: String, role: Role, layer: Option<usize>, cols: usize, v: f64) {
        self.params.push(Param {
            name,
            role,
            layer,
            value: Matrix::filled(1, cols, v),
        });
    }
}

/// Deterministic Glorot-uniform initialization from `config.seed`.
pub fn init_model(config: &ModelConfig) -> Result<ParamTable> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        params: Vec::new(),
    };
    let d = config.hidden_dim;
    match config.kind {
        ModelKind::Mlp => {
            let mut fan_in = config.input_dim;
            for l in 0..config.layers {
                let name = weight_name(l, Role::Dense);
                init.dense(name.clone(), Role::Dense, Some(l), fan_in, d);
                init.constant(format!("{name}.bias"), Role::Bias, Some(l), d, 0.0);
                fan_in = d;
            }
        }
        ModelKind::Transformer => {
            init.dense("embed.tok".into(), Role::TokenEmbedding, None, config.vocab, d);
            init.dense("embed.pos".into(), Role::PositionEmbedding, None, config.max_seq, d);
            for l in 0..config.layers {
                for role in [Role::Q, Role::K, Role::V, Role::O] {
                    let name = weight_name(l, role);
                    init.dense(name.clone(), role, Some(l), d, d);
                    init.constant(format!("{name}.bias"), Role::Bias, Some(l), d, 0.0);
                }
                init.constant(format!("layer{l}.ln1.gain"), Role::NormGain, Some(l), d, 1.0);
                init.constant(format!("layer{l}.ln1.bias"), Role::NormBias, Some(l), d, 0.0);
                let ff1 = weight_name(l, Role::Ff1);
                init.dense(ff1.clone(), Role::Ff1, Some(l), d, config.ffn_dim);
                init.constant(format!("{ff1}.bias"), Role::Bias, Some(l), config.ffn_dim, 0.0);
                let ff2 = weight_name(l, Role::Ff2);
                init.dense(ff2.clone(), Role::Ff2, Some(l), config.ffn_dim, d);
                init.constant(format!("{ff2}.bias"), Role::Bias, Some(l), d, 0.0);
                init.constant(format!("layer{l}.ln2.gain"), Role::NormGain, Some(l), d, 1.0);
                init.constant(format!("layer{l}.ln2.bias"), Role::NormBias, Some(l), d, 0.0);
            }
        }
    }
    init.dense("head.weight".into(), Role::Head, None, d, config.classes);
    init.constant("head.bias".into(), Role::HeadBias, None, config.classes, 0.0);
    ParamTable::new(init.params)
}

/// Token ids laid out as `rows x len`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub len: usize,
    pub ids: Vec<usize>,
}

impl TokenGrid {
    pub fn new(rows: usize, len: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != rows * len || len == 0 {
            return Err(SpurError::Input(format!(
                "{rows}x{len} token grid needs {} ids, got {}",
                rows * len,
                ids.len()
            )));
        }
        Ok(Self { rows, len, ids })
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    /// Sub-grid made of the listed rows.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            ids.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            len: self.len,
            ids,
        }
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// Effective (masked) prunable weights, in table order.
    pub effective: Vec<(String, NodeId)>,
    /// Attention probabilities per layer and head, `(n*len) x len` each.
    pub attention: Vec<NodeId>,
}

impl ForwardPass {
    pub fn effective_node(&self, name: &str) -> Option<NodeId> {
        self.effective.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }
}

fn effective_weights(
    g: &mut ExprGraph,
    params: &ParamTable,
    bound: &[NodeId],
    masks: &PruningState,
) -> Result<Vec<(String, NodeId)>> {
    let mut out = Vec::new();
    for (i, p) in params.params().iter().enumerate() {
        if !p.role.is_prunable() {
            continue;
        }
        let id = match masks.get(&p.name) {
            Some(m) => apply_mask(g, bound[i], m)?,
            None => bound[i],
        };
        out.push((p.name.clone(), id));
    }
    Ok(out)
}

fn lookup(eff: &[(String, NodeId)], name: &str) -> Result<NodeId> {
    eff.iter()
        .find(|(n, _)| n == name)
        .map(|(_, id)| *id)
        .ok_or_else(|| SpurError::Integrity(format!("model has no tensor `{name}`")))
}

fn linear(g: &mut ExprGraph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Masked dense layers with relu, then an unmasked linear head.
pub fn forward_mlp(
    g: &mut ExprGraph,
    params: &ParamTable,
    bound: &[NodeId],
    masks: &PruningState,
    batch: &Matrix,
) -> Result<ForwardPass> {
    let effective = effective_weights(g, params, bound, masks)?;
    let mut x = g.leaf(batch.clone());
    let mut layer = 0;
    while let Some(p) = params.param(&weight_name(layer, Role::Dense)) {
        let w = lookup(&effective, &p.name)?;
        let b = params.node(bound, &format!("{}.bias", p.name))?;
        let h = linear(g, x, w, b)?;
        x = g.relu(h);
        layer += 1;
    }
    let hw = params.node(bound, "head.weight")?;
    let hb = params.node(bound, "head.bias")?;
    let logits = linear(g, x, hw, hb)?;
    Ok(ForwardPass {
        logits,
        effective,
        attention: Vec::new(),
    })
}

/// Post-norm transformer encoder with mean pooling and a linear head.
pub fn forward_transformer(
    g: &mut ExprGraph,
    params: &ParamTable,
    bound: &[NodeId],
    masks: &PruningState,
    config: &ModelConfig,
    tokens: &TokenGrid,
) -> Result<ForwardPass> {
    if tokens.len > config.max_seq {
        return Err(SpurError::Input(format!(
            "sequence length {} exceeds max_seq {}",
            tokens.len, config.max_seq
        )));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= config.vocab) {
        return Err(SpurError::Input(format!(
            "token {bad} out of range for vocabulary of {}",
            config.vocab
        )));
    }
    let effective = effective_weights(g, params, bound, masks)?;
    let len = tokens.len;
    let tok_table = params.node(bound, "embed.tok")?;
    let pos_table = params.node(bound, "embed.pos")?;
    let tok = g.gather_rows(tok_table, &tokens.ids)?;
    let positions: Vec<usize> = (0..tokens.rows).flat_map(|_| 0..len).collect();
    let pos = g.gather_rows(pos_table, &positions)?;
    let mut x = g.add(tok, pos)?;

    let heads = config.heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::new();
    for l in 0..config.layers {
        let proj = |g: &mut ExprGraph, x: NodeId, role: Role| -> Result<NodeId> {
            let name = weight_name(l, role);
            let w = lookup(&effective, &name)?;
            let b = params.node(bound, &format!("{name}.bias"))?;
            linear(g, x, w, b)
        };
        let q = proj(g, x, Role::Q)?;
        let k = proj(g, x, Role::K)?;
        let v = proj(g, x, Role::V)?;
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.block_matmul_nt(qh, kh, len)?;
            let scaled = g.scale(scores, scale);
            let probs = g.softmax_rows(scaled);
            attention.push(probs);
            ctx.push(g.block_matmul(probs, vh, len)?);
        }
        let joined = if ctx.len() == 1 { ctx[0] } else { g.concat_cols(&ctx)? };
        let attn = proj(g, joined, Role::O)?;
        let res = g.add(x, attn)?;
        let gain = params.node(bound, &format!("layer{l}.ln1.gain"))?;
        let bias = params.node(bound, &format!("layer{l}.ln1.bias"))?;
        x = g.layer_norm_rows(res, gain, bias)?;

        let hidden = proj(g, x, Role::Ff1)?;
        let act = g.relu(hidden);
        let ff = proj(g, act, Role::Ff2)?;
        let res = g.add(x, ff)?;
        let gain = params.node(bound, &format!("layer{l}.ln2.gain"))?;
        let bias = params.node(bound, &format!("layer{l}.ln2.bias"))?;
        x = g.layer_norm_rows(res, gain, bias)?;
    }
    let pooled = g.block_mean_rows(x, len)?;
    let hw = params.node(bound, "head.weight")?;
    let hb = params.node(bound, "head.bias")?;
    let logits = linear(g, pooled, hw, hb)?;
    Ok(ForwardPass {
        logits,
        effective,
        attention,
    })
}

/// Model inputs of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    Tokens(TokenGrid),
    Features(Matrix),
}

impl Inputs {
    pub fn len(&self) -> usize {
        match self {
            Self::Tokens(t) => t.rows,
            Self::Features(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        match self {
            Self::Tokens(t) => Self::Tokens(t.select(rows)),
            Self::Features(m) => {
                let c = m.cols();
                let mut data = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    data.extend_from_slice(m.row(r));
                }
                Self::Features(Matrix::from_fn(rows.len(), c, |i, j| data[i * c + j]))
            }
        }
    }
}

/// Dispatches to the forward pass matching `config.kind`.
pub fn forward(
    g: &mut ExprGraph,
    params: &ParamTable,
    bound: &[NodeId],
    masks: &PruningState,
    config: &ModelConfig,
    inputs: &Inputs,
) -> Result<ForwardPass> {
    match (config.kind, inputs) {
        (ModelKind::Mlp, Inputs::Features(m)) => {
            if m.cols() != config.input_dim {
                return Err(SpurError::Shape {
                    op: "forward_mlp",
                    lhs: format!("{}x{}", m.rows(), m.cols()),
                    rhs: format!("input_dim {}", config.input_dim),
                });
            }
            forward_mlp(g, params, bound, masks, m)
        }
        (ModelKind::Transformer, Inputs::Tokens(t)) => {
            forward_transformer(g, params, bound, masks, config, t)
        }
        (kind, _) => Err(SpurError::Input(format!(
            "inputs do not match model kind `{}`",
            kind.as_str()
        ))),
    }
}
