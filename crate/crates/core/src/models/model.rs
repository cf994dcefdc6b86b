//! Full model: token embedding, layer stack and output head, in
//! full-sequence (taped) and token-streaming form.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{
    causal_attention_op, causal_linear_attention_op, favor_op, feature_map_elu, feature_map_favor,
    LinearAttentionState,
};
use super::checkpoint::Checkpoint;
use super::config::{Family, ModelConfig};
use super::mamba::{causal_conv_op, causal_conv_step, conv_history};
use super::moe::{affine, moe_layer_forward, Expert, Router};
use super::params::{Init, ParamSource, ParamStore};
use super::ssm::{continuous_a, selective_scan_op, selective_ssm_step, token_transition};
use super::state::{LayerState, StreamingState};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Checkpoint metadata keys holding the model configuration start with this.
pub const MODEL_META_PREFIX: &str = "model.";

/// Checkpoint tensors with this prefix are optimizer state, not parameters.
pub const OPTIMIZER_TENSOR_PREFIX: &str = "adam.";

/// One element of a model input sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    /// Raw input embedding, mapped by the input projector.
    Input(Vec<f64>),
    /// Vocabulary code, looked up in the code table.
    Code(usize),
    /// Regression target vector, mapped by the target projector.
    Target(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
enum Channel {
    Ffn(Mlp),
    Moe {
        router_w: usize,
        router_b: usize,
        experts: Vec<Mlp>,
    },
}

#[derive(Clone, Debug)]
struct AttentionParams {
    wq: usize,
    wk: usize,
    wv: usize,
    features: Option<usize>,
}

#[derive(Clone, Debug)]
struct MambaParams {
    w_in: usize,
    conv_w: usize,
    conv_b: usize,
    w_x: usize,
    w_dt: usize,
    b_dt: usize,
    a_log: usize,
    d: usize,
    w_out: usize,
}

#[derive(Clone, Debug)]
enum Mixer {
    Attention(AttentionParams),
    Mamba(MambaParams),
}

#[derive(Clone, Debug)]
struct Layer {
    norm: Norm,
    mixer: Mixer,
    channel: Option<(Norm, Channel)>,
}

#[derive(Clone, Debug)]
struct Layout {
    input_w: usize,
    input_b: usize,
    codes: Option<usize>,
    target: Option<(usize, usize)>,
    positions: Option<usize>,
    layers: Vec<Layer>,
    final_norm: Norm,
    /// `None` ties the vocabulary head to `embed.codes`.
    head_w: Option<usize>,
    head_b: usize,
}

struct Builder {
    source: ParamSource,
    store: ParamStore,
}

impl Builder {
    fn make(&mut self, name: &str, shape: &[usize], init: Init) -> Result<usize> {
        self.source.make(&mut self.store, name, shape, init)
    }

    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        let fan_in = shape[0] as f64;
        self.make(name, shape, Init::Normal(1.0 / fan_in.sqrt()))
    }

    fn norm(&mut self, prefix: &str, m: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.make(&format!("{prefix}.gain"), &[1, m], Init::Ones)?,
            bias: self.make(&format!("{prefix}.bias"), &[1, m], Init::Zeros)?,
        })
    }

    fn mlp(&mut self, prefix: &str, m: usize, hidden: usize) -> Result<Mlp> {
        Ok(Mlp {
            w1: self.normal(&format!("{prefix}.w1"), &[m, hidden])?,
            b1: self.make(&format!("{prefix}.b1"), &[1, hidden], Init::Zeros)?,
            w2: self.normal(&format!("{prefix}.w2"), &[hidden, m])?,
            b2: self.make(&format!("{prefix}.b2"), &[1, m], Init::Zeros)?,
        })
    }
}

fn build(cfg: &ModelConfig, source: ParamSource) -> Result<(ParamStore, Layout)> {
    cfg.validate()?;
    let mut b = Builder {
        source,
        store: ParamStore::default(),
    };
    let m = cfg.hidden_dim;
    let input_w = b.normal("embed.input.weight", &[cfg.input_dim, m])?;
    let input_b = b.make("embed.input.bias", &[1, m], Init::Zeros)?;
    let (codes, target) = match cfg.target_dim {
        None => (
            Some(b.make("embed.codes", &[cfg.vocab_size, m], Init::Normal(1.0 / (m as f64).sqrt()))?),
            None,
        ),
        Some(d) => (
            None,
            Some((
                b.normal("embed.target.weight", &[d, m])?,
                b.make("embed.target.bias", &[1, m], Init::Zeros)?,
            )),
        ),
    };
    let positions = match cfg.family {
        Family::Transformer => Some(b.make("embed.positions", &[cfg.max_positions, m], Init::Normal(0.1))?),
        _ => None,
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = format!("layers.{l}");
        let norm = b.norm(&format!("{p}.norm"), m)?;
        let mixer = if cfg.family.is_attention() {
            let c = cfg.head_dim;
            Mixer::Attention(AttentionParams {
                wq: b.normal(&format!("{p}.attn.wq"), &[m, c])?,
                wk: b.normal(&format!("{p}.attn.wk"), &[m, c])?,
                wv: b.normal(&format!("{p}.attn.wv"), &[m, m])?,
                features: match cfg.family {
                    Family::Performer => Some(b.make(
                        &format!("{p}.attn.features"),
                        &[cfg.num_performer_features, c],
                        Init::OrthogonalFeatures,
                    )?),
                    _ => None,
                },
            })
        } else {
            let (e, c, r, w) = (cfg.inner_dim(), cfg.ssm_state_size, cfg.dt_rank, cfg.conv_width);
            Mixer::Mamba(MambaParams {
                w_in: b.normal(&format!("{p}.ssm.in_proj"), &[m, 2 * e])?,
                conv_w: b.make(&format!("{p}.ssm.conv.weight"), &[e, w], Init::Normal(1.0 / (w as f64).sqrt()))?,
                conv_b: b.make(&format!("{p}.ssm.conv.bias"), &[1, e], Init::Zeros)?,
                w_x: b.normal(&format!("{p}.ssm.x_proj"), &[e, r + 2 * c])?,
                w_dt: b.normal(&format!("{p}.ssm.dt_proj"), &[r, e])?,
                b_dt: b.make(&format!("{p}.ssm.dt_bias"), &[1, e], Init::TimescaleBias)?,
                a_log: b.make(&format!("{p}.ssm.a_log"), &[e, c], Init::NegDecayLog)?,
                d: b.make(&format!("{p}.ssm.d"), &[1, e], Init::Ones)?,
                w_out: b.normal(&format!("{p}.ssm.out_proj"), &[e, m])?,
            })
        };
        let channel = match (cfg.moe, cfg.family) {
            (Some(moe), _) => {
                let router_w = b.normal(&format!("{p}.moe.router.weight"), &[m, moe.num_experts])?;
                let router_b = b.make(&format!("{p}.moe.router.bias"), &[1, moe.num_experts], Init::Zeros)?;
                let experts = (0..moe.num_experts)
                    .map(|e| b.mlp(&format!("{p}.moe.experts.{e}"), m, moe.expert_hidden))
                    .collect::<Result<Vec<_>>>()?;
                Some(Channel::Moe {
                    router_w,
                    router_b,
                    experts,
                })
            }
            (None, Family::Mamba) => None,
            (None, _) => Some(Channel::Ffn(b.mlp(&format!("{p}.ffn"), m, cfg.ffn_hidden)?)),
        };
        let channel = match channel {
            Some(ch) => Some((b.norm(&format!("{p}.channel_norm"), m)?, ch)),
            None => None,
        };
        layers.push(Layer { norm, mixer, channel });
    }
    let final_norm = b.norm("final_norm", m)?;
    // vocabulary logits score the final state against the code embeddings
    let head_w = match codes {
        Some(_) => None,
        None => Some(b.normal("head.weight", &[m, cfg.output_dim()])?),
    };
    let head_b = b.make("head.bias", &[1, cfg.output_dim()], Init::Zeros)?;
    b.source.finish()?;
    Ok((
        b.store,
        Layout {
            input_w,
            input_b,
            codes,
            target,
            positions,
            layers,
            final_norm,
            head_w,
            head_b,
        },
    ))
}

/// Query/key rows a layer uses to associate positions: raw `Q`, `K` for the
/// transformer, feature-mapped `φ(Q)`, `φ(K)` for the linear families, and
/// `C_t`, `B_t` for the SSM.
#[derive(Clone, Copy, Debug)]
pub struct AssociationVars {
    pub queries: Var,
    pub keys: Var,
}

/// Result of a taped full-sequence pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// N × output_dim (vocabulary logits or regression outputs).
    pub output: Var,
    /// Per-layer association rows, present only when recording.
    pub associations: Option<Vec<AssociationVars>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAssociations {
    pub queries: Tensor,
    pub keys: Tensor,
}

/// Association side log of one run, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub family: Family,
    pub layers: Vec<LayerAssociations>,
}

impl Forward {
    pub fn log(&self, tape: &Tape, family: Family) -> Option<RunLog> {
        let layers = self.associations.as_ref()?;
        Some(RunLog {
            family,
            layers: layers
                .iter()
                .map(|a| LayerAssociations {
                    queries: tape.value(a.queries).clone(),
                    keys: tape.value(a.keys).clone(),
                })
                .collect(),
        })
    }
}

/// Output of an untaped full-sequence run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub output: Tensor,
    pub log: Option<RunLog>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (params, layout) = build(&config, ParamSource::Fresh(ChaCha8Rng::seed_from_u64(seed)))?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = self
            .config
            .to_kv()
            .into_iter()
            .map(|(k, v)| (format!("{MODEL_META_PREFIX}{k}"), v))
            .collect();
        let tensors = self
            .params
            .iter()
            .map(|p| (p.name.clone(), (*p.value).clone()))
            .collect();
        Checkpoint { meta, tensors }
    }

    /// Rebuilds a model from a checkpoint, ignoring optimizer tensors and
    /// non-model metadata.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kv: BTreeMap<String, String> = ckpt
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(MODEL_META_PREFIX).map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = ModelConfig::from_kv(&kv)?;
        let map: HashMap<String, Tensor> = ckpt
            .tensors
            .iter()
            .filter(|(name, _)| !name.starts_with(OPTIMIZER_TENSOR_PREFIX))
            .cloned()
            .collect();
        let (params, layout) = build(&config, ParamSource::Loaded(map))?;
        Ok(Self { config, params, layout })
    }

    fn embed(&self, tape: &mut Tape, p: &[Var], tokens: &[Token]) -> Result<Var> {
        let lay = &self.layout;
        let mut inputs = Vec::new();
        let mut codes = Vec::new();
        let mut targets = Vec::new();
        let mut slot = Vec::with_capacity(tokens.len());
        for tok in tokens {
            match tok {
                Token::Input(x) => {
                    slot.push((0, inputs.len()));
                    inputs.push(x.clone());
                }
                Token::Code(c) => {
                    slot.push((1, codes.len()));
                    codes.push(*c);
                }
                Token::Target(y) => {
                    slot.push((2, targets.len()));
                    targets.push(y.clone());
                }
            }
        }
        let mut parts = Vec::new();
        let mut offsets = [0usize; 3];
        let mut total = 0;
        if !inputs.is_empty() {
            let x = tape.constant(self.rows_of("input projector", &inputs, self.config.input_dim)?);
            let xw = tape.matmul(x, p[lay.input_w])?;
            parts.push(tape.add_row(xw, p[lay.input_b])?);
            offsets[0] = total;
            total += inputs.len();
        }
        if !codes.is_empty() {
            let table = lay
                .codes
                .ok_or_else(|| Error::Contract("code tokens require a vocabulary model".into()))?;
            parts.push(tape.gather_rows(p[table], &codes)?);
            offsets[1] = total;
            total += codes.len();
        }
        if !targets.is_empty() {
            let (w, b) = lay
                .target
                .ok_or_else(|| Error::Contract("target tokens require a regression model".into()))?;
            let y = tape.constant(self.rows_of("target projector", &targets, self.config.output_dim())?);
            let yw = tape.matmul(y, p[w])?;
            parts.push(tape.add_row(yw, p[b])?);
            offsets[2] = total;
        }
        let all = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let order: Vec<usize> = slot.iter().map(|&(kind, i)| offsets[kind] + i).collect();
        let ordered = if order.iter().enumerate().all(|(i, &j)| i == j) {
            all
        } else {
            tape.gather_rows(all, &order)?
        };
        match lay.positions {
            Some(pos) => {
                self.check_positions(tokens.len())?;
                let idx: Vec<usize> = (0..tokens.len()).collect();
                let pe = tape.gather_rows(p[pos], &idx)?;
                tape.add(ordered, pe)
            }
            None => Ok(ordered),
        }
    }

    fn rows_of(&self, what: &'static str, rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::dim(what, &[width], &[bad.len()]));
        }
        Tensor::from_rows(rows)
    }

    fn check_positions(&self, n: usize) -> Result<()> {
        if n > self.config.max_positions {
            return Err(Error::Contract(format!(
                "sequence of {n} tokens exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        Ok(())
    }

    fn norm_tape(tape: &mut Tape, p: &[Var], n: &Norm, h: Var) -> Result<Var> {
        let z = tape.row_norm(h);
        let z = tape.mul_row(z, p[n.gain])?;
        tape.add_row(z, p[n.bias])
    }

    fn mlp_tape(tape: &mut Tape, p: &[Var], mlp: &Mlp, z: Var) -> Result<Var> {
        let h = tape.matmul(z, p[mlp.w1])?;
        let h = tape.add_row(h, p[mlp.b1])?;
        let h = tape.silu(h);
        let y = tape.matmul(h, p[mlp.w2])?;
        tape.add_row(y, p[mlp.b2])
    }

    fn mixer_tape(&self, tape: &mut Tape, p: &[Var], mixer: &Mixer, z: Var) -> Result<(Var, AssociationVars)> {
        match mixer {
            Mixer::Attention(a) => {
                let q = tape.matmul(z, p[a.wq])?;
                let k = tape.matmul(z, p[a.wk])?;
                let v = tape.matmul(z, p[a.wv])?;
                match self.config.family {
                    Family::Transformer => {
                        let u = causal_attention_op(tape, q, k, v)?;
                        Ok((u, AssociationVars { queries: q, keys: k }))
                    }
                    Family::LinearTf => {
                        let (fq, fk) = (tape.elu_plus_one(q), tape.elu_plus_one(k));
                        let u = causal_linear_attention_op(tape, fq, fk, v)?;
                        Ok((u, AssociationVars { queries: fq, keys: fk }))
                    }
                    Family::Performer => {
                        let w = p[a.features.expect("performer layers own features")];
                        let s = self.performer_scale();
                        let (qs, ks) = (tape.scale(q, s), tape.scale(k, s));
                        let fq = favor_op(tape, qs, w)?;
                        let fk = favor_op(tape, ks, w)?;
                        let u = causal_linear_attention_op(tape, fq, fk, v)?;
                        Ok((u, AssociationVars { queries: fq, keys: fk }))
                    }
                    Family::Mamba => unreachable!("attention mixer in a mamba model"),
                }
            }
            Mixer::Mamba(mp) => {
                let (e, c, r) = (self.config.inner_dim(), self.config.ssm_state_size, self.config.dt_rank);
                let xz = tape.matmul(z, p[mp.w_in])?;
                let xb = tape.slice_cols(xz, 0, e)?;
                let gate = tape.slice_cols(xz, e, e)?;
                let xc = causal_conv_op(tape, xb, p[mp.conv_w], p[mp.conv_b])?;
                let xs = tape.silu(xc);
                let proj = tape.matmul(xs, p[mp.w_x])?;
                let dt_low = tape.slice_cols(proj, 0, r)?;
                let bm = tape.slice_cols(proj, r, c)?;
                let cm = tape.slice_cols(proj, r + c, c)?;
                let dt = tape.matmul(dt_low, p[mp.w_dt])?;
                let dt = tape.add_row(dt, p[mp.b_dt])?;
                let delta = tape.softplus(dt);
                let y = selective_scan_op(
                    tape,
                    xs,
                    delta,
                    p[mp.a_log],
                    bm,
                    cm,
                    p[mp.d],
                    self.config.discretization,
                )?;
                let g = tape.silu(gate);
                let y = tape.mul(y, g)?;
                let u = tape.matmul(y, p[mp.w_out])?;
                Ok((u, AssociationVars { queries: cm, keys: bm }))
            }
        }
    }

    fn channel_tape(tape: &mut Tape, p: &[Var], channel: &Channel, z: Var) -> Result<Var> {
        match channel {
            Channel::Ffn(mlp) => Self::mlp_tape(tape, p, mlp, z),
            Channel::Moe {
                router_w,
                router_b,
                experts,
            } => {
                let logits = tape.matmul(z, p[*router_w])?;
                let logits = tape.add_row(logits, p[*router_b])?;
                let weights = tape.softmax_rows(logits);
                let mut acc: Option<Var> = None;
                for (e, mlp) in experts.iter().enumerate() {
                    let y = Self::mlp_tape(tape, p, mlp, z)?;
                    let w = tape.slice_cols(weights, e, 1)?;
                    let wy = tape.mul_col(y, w)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, wy)?,
                        None => wy,
                    });
                }
                acc.ok_or_else(|| Error::Config("mixture of experts needs at least one expert".into()))
            }
        }
    }

    fn layer_tape(&self, tape: &mut Tape, p: &[Var], layer: &Layer, h: Var) -> Result<(Var, AssociationVars)> {
        let z = Self::norm_tape(tape, p, &layer.norm, h)?;
        let (u, assoc) = self.mixer_tape(tape, p, &layer.mixer, z)?;
        let mut h = tape.add(h, u)?;
        if let Some((norm, channel)) = &layer.channel {
            let z = Self::norm_tape(tape, p, norm, h)?;
            let y = Self::channel_tape(tape, p, channel, z)?;
            h = tape.add(h, y)?;
        }
        Ok((h, assoc))
    }

    /// Causal full-sequence pass on `tape`. `params` are the vars returned by
    /// [`ParamStore::bind`] for this model.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], tokens: &[Token], record: bool) -> Result<Forward> {
        if tokens.is_empty() {
            return Err(Error::Contract("model input must hold at least one token".into()));
        }
        let mut h = self.embed(tape, params, tokens)?;
        let mut assoc = Vec::with_capacity(self.layout.layers.len());
        for layer in &self.layout.layers {
            let (next, a) = self.layer_tape(tape, params, layer, h)?;
            h = next;
            assoc.push(a);
        }
        let z = Self::norm_tape(tape, params, &self.layout.final_norm, h)?;
        let out = match (self.layout.head_w, self.layout.codes) {
            (Some(w), _) => tape.matmul(z, params[w])?,
            (None, Some(codes)) => tape.matmul_t(z, params[codes])?,
            (None, None) => unreachable!("models without codes own a head matrix"),
        };
        let output = tape.add_row(out, params[self.layout.head_b])?;
        Ok(Forward {
            output,
            associations: record.then_some(assoc),
        })
    }

    /// Full-sequence inference without gradients. Associations are kept when
    /// the configuration asks for them.
    pub fn run(&self, tokens: &[Token]) -> Result<RunOutput> {
        self.run_with(tokens, self.config.record_associations)
    }

    pub fn run_with(&self, tokens: &[Token], record: bool) -> Result<RunOutput> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &p, tokens, record)?;
        Ok(RunOutput {
            output: tape.value(fwd.output).clone(),
            log: fwd.log(&tape, self.config.family),
        })
    }

    /// One residual block applied to hidden rows `z` (N × M).
    ///
    /// Without `state` the whole sequence is processed causally. With a
    /// state, `z` must hold a single row and the state is advanced by it.
    pub fn block_forward(&self, layer: usize, z: &Tensor, state: Option<&mut LayerState>) -> Result<Tensor> {
        let lay = self
            .layout
            .layers
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} out of range")))?;
        if z.cols() != self.config.hidden_dim {
            return Err(Error::dim("block_forward", &[z.rows(), self.config.hidden_dim], z.shape()));
        }
        match state {
            Some(st) => {
                if z.rows() != 1 {
                    return Err(Error::Contract(format!(
                        "streaming block call takes one token, got {}",
                        z.rows()
                    )));
                }
                let mut h = z.row(0).to_vec();
                self.layer_step(lay, st, &mut h)?;
                Ok(Tensor::row_vector(h))
            }
            None => {
                let mut tape = Tape::new();
                let p = self.params.bind(&mut tape, false);
                let h = tape.constant(z.clone());
                let (out, _) = self.layer_tape(&mut tape, &p, lay, h)?;
                Ok(tape.value(out).clone())
            }
        }
    }

    fn performer_scale(&self) -> f64 {
        (self.config.head_dim as f64).powf(-0.25)
    }

    pub fn new_layer_state(&self) -> LayerState {
        let cfg = &self.config;
        match cfg.family {
            Family::Transformer => LayerState::KvCache {
                keys: Vec::new(),
                values: Vec::new(),
            },
            Family::LinearTf => LayerState::Linear(LinearAttentionState::new(cfg.head_dim, cfg.hidden_dim)),
            Family::Performer => {
                LayerState::Linear(LinearAttentionState::new(cfg.num_performer_features, cfg.hidden_dim))
            }
            Family::Mamba => LayerState::Ssm {
                h: Tensor::zeros(&[cfg.ssm_state_size, cfg.inner_dim()]),
                conv: conv_history(cfg.conv_width, cfg.inner_dim()),
            },
        }
    }

    pub fn new_state(&self) -> StreamingState {
        StreamingState {
            layers: (0..self.config.num_layers).map(|_| self.new_layer_state()).collect(),
            token_count: 0,
        }
    }

    fn embed_token(&self, token: &Token, position: usize) -> Result<Vec<f64>> {
        let lay = &self.layout;
        let mut h = match token {
            Token::Input(x) => {
                if x.len() != self.config.input_dim {
                    return Err(Error::dim("input projector", &[self.config.input_dim], &[x.len()]));
                }
                affine(x, self.params.get(lay.input_w), Some(self.params.get(lay.input_b)))?
            }
            Token::Code(c) => {
                let table = self.params.get(
                    lay.codes
                        .ok_or_else(|| Error::Contract("code tokens require a vocabulary model".into()))?,
                );
                if *c >= table.rows() {
                    return Err(Error::Contract(format!(
                        "row index {c} out of range for table with {} rows",
                        table.rows()
                    )));
                }
                table.row(*c).to_vec()
            }
            Token::Target(y) => {
                let (w, b) = lay
                    .target
                    .ok_or_else(|| Error::Contract("target tokens require a regression model".into()))?;
                if y.len() != self.config.output_dim() {
                    return Err(Error::dim("target projector", &[self.config.output_dim()], &[y.len()]));
                }
                affine(y, self.params.get(w), Some(self.params.get(b)))?
            }
        };
        if let Some(pos) = lay.positions {
            self.check_positions(position + 1)?;
            for (x, pe) in h.iter_mut().zip(self.params.get(pos).row(position)) {
                *x += pe;
            }
        }
        Ok(h)
    }

    fn norm_step(&self, n: &Norm, h: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; h.len()];
        tensor::normalize_row(h, &mut z);
        let (g, b) = (self.params.get(n.gain).data(), self.params.get(n.bias).data());
        for i in 0..z.len() {
            z[i] = z[i] * g[i] + b[i];
        }
        z
    }

    fn mlp_view(&self, mlp: &Mlp) -> Expert<'_> {
        Expert {
            w1: self.params.get(mlp.w1),
            b1: self.params.get(mlp.b1),
            w2: self.params.get(mlp.w2),
            b2: self.params.get(mlp.b2),
        }
    }

    fn mixer_step(&self, mixer: &Mixer, state: &mut LayerState, z: &[f64]) -> Result<Vec<f64>> {
        let pg = |i: usize| self.params.get(i);
        match (mixer, state) {
            (Mixer::Attention(a), LayerState::KvCache { keys, values }) => {
                let q = affine(z, pg(a.wq), None)?;
                keys.push(affine(z, pg(a.wk), None)?);
                values.push(affine(z, pg(a.wv), None)?);
                let scale = 1.0 / (q.len() as f64).sqrt();
                let scores: Vec<f64> = keys.iter().map(|k| tensor::dot(&q, k)).collect();
                let w = tensor::softmax(&scores, scale)?;
                let mut u = vec![0.0; z.len()];
                for (wj, vj) in w.iter().zip(values.iter()) {
                    for (o, &v) in u.iter_mut().zip(vj) {
                        *o += wj * v;
                    }
                }
                Ok(u)
            }
            (Mixer::Attention(a), LayerState::Linear(st)) => {
                let q = affine(z, pg(a.wq), None)?;
                let k = affine(z, pg(a.wk), None)?;
                let v = affine(z, pg(a.wv), None)?;
                let (fq, fk) = match a.features {
                    Some(f) => {
                        let s = self.performer_scale();
                        let qs: Vec<f64> = q.iter().map(|x| x * s).collect();
                        let ks: Vec<f64> = k.iter().map(|x| x * s).collect();
                        (feature_map_favor(&qs, pg(f))?, feature_map_favor(&ks, pg(f))?)
                    }
                    None => (feature_map_elu(&q), feature_map_elu(&k)),
                };
                st.step(&fq, &fk, &v)
            }
            (Mixer::Mamba(mp), LayerState::Ssm { h, conv }) => {
                let (e, c, r) = (self.config.inner_dim(), self.config.ssm_state_size, self.config.dt_rank);
                let xz = affine(z, pg(mp.w_in), None)?;
                let (xb, gate) = xz.split_at(e);
                let xs: Vec<f64> = causal_conv_step(conv, pg(mp.conv_w), pg(mp.conv_b), xb)?
                    .into_iter()
                    .map(tensor::silu)
                    .collect();
                let proj = affine(&xs, pg(mp.w_x), None)?;
                let (dt_low, rest) = proj.split_at(r);
                let (bm, cm) = rest.split_at(c);
                let delta: Vec<f64> = affine(dt_low, pg(mp.w_dt), Some(pg(mp.b_dt)))?
                    .into_iter()
                    .map(tensor::softplus)
                    .collect();
                let a_cont = continuous_a(pg(mp.a_log));
                let (a_bar, b_bar) = token_transition(&a_cont, &delta, bm, self.config.discretization)?;
                let y = selective_ssm_step(h, &a_bar, &b_bar, cm, pg(mp.d).data(), &xs)?;
                let gated: Vec<f64> = y.iter().zip(gate).map(|(y, &g)| y * tensor::silu(g)).collect();
                debug_assert_eq!(gated.len(), e);
                affine(&gated, pg(mp.w_out), None)
            }
            _ => Err(Error::Contract("streaming state does not match the model family".into())),
        }
    }

    fn channel_step(&self, channel: &Channel, z: &[f64]) -> Result<Vec<f64>> {
        match channel {
            Channel::Ffn(mlp) => self.mlp_view(mlp).forward(z),
            Channel::Moe {
                router_w,
                router_b,
                experts,
            } => {
                let views: Vec<Expert> = experts.iter().map(|e| self.mlp_view(e)).collect();
                let router = Router {
                    weight: self.params.get(*router_w),
                    bias: self.params.get(*router_b),
                };
                moe_layer_forward(z, &views, &router)
            }
        }
    }

    fn layer_step(&self, layer: &Layer, state: &mut LayerState, h: &mut [f64]) -> Result<()> {
        let z = self.norm_step(&layer.norm, h);
        let u = self.mixer_step(&layer.mixer, state, &z)?;
        for (x, d) in h.iter_mut().zip(&u) {
            *x += d;
        }
        if let Some((norm, channel)) = &layer.channel {
            let z = self.norm_step(norm, h);
            let y = self.channel_step(channel, &z)?;
            for (x, d) in h.iter_mut().zip(&y) {
                *x += d;
            }
        }
        Ok(())
    }

    /// Consumes one token and returns its output row.
    pub fn step(&self, state: &mut StreamingState, token: &Token) -> Result<Vec<f64>> {
        if state.layers.len() != self.layout.layers.len() {
            return Err(Error::Contract(format!(
                "streaming state has {} layers, model has {}",
                state.layers.len(),
                self.layout.layers.len()
            )));
        }
        let mut h = self.embed_token(token, state.token_count)?;
        for (layer, st) in self.layout.layers.iter().zip(state.layers.iter_mut()) {
            self.layer_step(layer, st, &mut h)?;
        }
        state.token_count += 1;
        let z = self.norm_step(&self.layout.final_norm, &h);
        let bias = self.params.get(self.layout.head_b);
        match (self.layout.head_w, self.layout.codes) {
            (Some(w), _) => affine(&z, self.params.get(w), Some(bias)),
            (None, Some(codes)) => {
                let table = self.params.get(codes);
                Ok((0..table.rows()).map(|v| tensor::dot(&z, table.row(v)) + bias.data()[v]).collect())
            }
            (None, None) => unreachable!("models without codes own a head matrix"),
        }
    }

    /// Streams `tokens` from a fresh state, returning every output row.
    pub fn stream(&self, tokens: &[Token]) -> Result<(Tensor, StreamingState)> {
        let mut state = self.new_state();
        let mut rows = Vec::with_capacity(tokens.len());
        for t in tokens {
            rows.push(self.step(&mut state, t)?);
        }
        Ok((Tensor::from_rows(&rows)?, state))
    }

    /// Multiply-adds for one streaming step after `seen` earlier tokens,
    /// counting matrix-vector products and recurrent updates (input token).
    pub fn token_step_flops(&self, seen: usize) -> u64 {
        let cfg = &self.config;
        let (m, t) = (cfg.hidden_dim as u64, seen as u64 + 1);
        let mut total = cfg.input_dim as u64 * m;
        let per_layer = match cfg.family {
            Family::Transformer => {
                let c = cfg.head_dim as u64;
                2 * m * c + m * m + t * (c + m)
            }
            Family::LinearTf => {
                let c = cfg.head_dim as u64;
                2 * m * c + m * m + 2 * c * m + 2 * c
            }
            Family::Performer => {
                let (c, f) = (cfg.head_dim as u64, cfg.num_performer_features as u64);
                2 * m * c + m * m + 2 * f * c + 2 * f * m + 2 * f
            }
            Family::Mamba => {
                let (e, c, r, w) = (
                    cfg.inner_dim() as u64,
                    cfg.ssm_state_size as u64,
                    cfg.dt_rank as u64,
                    cfg.conv_width as u64,
                );
                m * 2 * e + e * w + e * (r + 2 * c) + r * e + 3 * c * e + e + e * m
            }
        };
        let channel = match (cfg.moe, cfg.family) {
            (Some(moe), _) => {
                let (n, h) = (moe.num_experts as u64, moe.expert_hidden as u64);
                m * n + n * (2 * m * h + m)
            }
            (None, Family::Mamba) => 0,
            (None, _) => 2 * m * cfg.ffn_hidden as u64,
        };
        total += cfg.num_layers as u64 * (per_layer + channel);
        total + m * cfg.output_dim() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::config::MoeConfig;
    use rand::Rng;

    fn tiny(family: Family) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            head_dim: 4,
            ssm_state_size: 4,
            conv_width: 3,
            expand: 2,
            dt_rank: 2,
            ffn_hidden: 12,
            vocab_size: 10,
            input_dim: 5,
            num_performer_features: 6,
            max_positions: 64,
            ..ModelConfig::toy(family)
        }
    }

    fn tokens(n: usize, rng: &mut ChaCha8Rng) -> Vec<Token> {
        (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    Token::Input((0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                } else {
                    Token::Code(rng.random_range(0..10))
                }
            })
            .collect()
    }

    #[test]
    fn streaming_matches_full_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for family in Family::ALL {
            let model = Model::new(tiny(family), 3).unwrap();
            let toks = tokens(13, &mut rng);
            let full = model.run(&toks).unwrap().output;
            let (streamed, _) = model.stream(&toks).unwrap();
            assert!(full.max_abs_diff(&streamed) < 1e-8, "{family}: {}", full.max_abs_diff(&streamed));
        }
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for family in Family::ALL {
            let model = Model::new(tiny(family), 4).unwrap();
            let mut toks = tokens(9, &mut rng);
            let a = model.run(&toks).unwrap().output;
            toks[6] = Token::Input(vec![3.0; 5]);
            let b = model.run(&toks).unwrap().output;
            for t in 0..6 {
                assert_eq!(a.row(t), b.row(t), "{family} row {t}");
            }
            assert_ne!(a.row(6), b.row(6));
        }
    }

    #[test]
    fn moe_layers_stream_consistently() {
        let mut cfg = tiny(Family::Mamba);
        cfg.moe = Some(MoeConfig {
            num_experts: 3,
            expert_hidden: 6,
        });
        let model = Model::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let toks = tokens(7, &mut rng);
        let full = model.run(&toks).unwrap().output;
        let (streamed, _) = model.stream(&toks).unwrap();
        assert!(full.max_abs_diff(&streamed) < 1e-8);
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let model = Model::new(tiny(Family::Performer), 5).unwrap();
        let back = Model::from_checkpoint(&model.to_checkpoint()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let toks = tokens(5, &mut rng);
        assert_eq!(model.run(&toks).unwrap().output, back.run(&toks).unwrap().output);
    }

    #[test]
    fn streaming_block_rejects_multiple_rows() {
        let model = Model::new(tiny(Family::Mamba), 5).unwrap();
        let mut st = model.new_layer_state();
        let z = Tensor::zeros(&[2, 8]);
        assert!(matches!(model.block_forward(0, &z, Some(&mut st)), Err(Error::Contract(_))));
    }

    #[test]
    fn regression_head_takes_target_tokens() {
        let mut cfg = tiny(Family::LinearTf);
        cfg.target_dim = Some(3);
        let model = Model::new(cfg, 2).unwrap();
        let toks = vec![
            Token::Input(vec![0.1; 5]),
            Token::Target(vec![1.0, 2.0, 3.0]),
            Token::Input(vec![0.2; 5]),
        ];
        let out = model.run(&toks).unwrap().output;
        assert_eq!(out.shape(), &[3, 3]);
        assert!(model.run(&[Token::Code(1)]).is_err());
    }
}
