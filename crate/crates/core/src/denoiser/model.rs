use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::adapter::{AdaptedMatrix, AdapterPayload, ConceptAdapter};
use super::params::{DenoiserParams, Prediction};
use super::vocab::{TokenId, PAD};

/// Per-block, per-head cross-attention matrices of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    /// `maps[block][head]` is `(height*width) x tokens`.
    pub maps: Vec<Vec<Tensor>>,
}

/// Graph handles for one branch's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub eps: NodeId,
    pub attention: Vec<Vec<NodeId>>,
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
}

/// Effective (possibly adapted) weights recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    mix: NodeId,
    b_mix: NodeId,
    query: Vec<Vec<NodeId>>,
    key: Vec<Vec<NodeId>>,
    value: Vec<Vec<NodeId>>,
    offset: Option<(TokenId, NodeId, f64)>,
    w_in: NodeId,
    w_out: NodeId,
    b_out: NodeId,
}

/// Records the model weights on `g`, folding in `adapter`.
///
/// With `trainable` the adapter tensors become graph variables; their node
/// ids are returned in [`ConceptAdapter::tensors`] order.
fn leaf(g: &mut Graph, t: &Tensor, trainable: bool, leaves: &mut Vec<NodeId>) -> NodeId {
    let id = if trainable {
        g.variable(t.clone())
    } else {
        g.constant(t.clone())
    };
    leaves.push(id);
    id
}

pub fn bind_weights(
    g: &mut Graph,
    params: &DenoiserParams,
    adapter: Option<&ConceptAdapter>,
    trainable: bool,
) -> Result<(BoundWeights, Vec<NodeId>)> {
    if let Some(a) = adapter {
        a.validate(params)?;
    }
    let mut leaves = Vec::new();
    let mut resolved = std::collections::HashMap::new();
    if let Some(a) = adapter {
        match &a.payload {
            AdapterPayload::EmbeddingOffset(_) => {}
            AdapterPayload::LowRank(factors) => {
                for f in factors {
                    let base = g.constant(f.target.base(params)?.clone());
                    let down = leaf(g, &f.down, trainable, &mut leaves);
                    let up = leaf(g, &f.up, trainable, &mut leaves);
                    let prod = g.matmul(down, up);
                    let scaled = g.scale(prod, a.scale);
                    resolved.insert(f.target, g.add(base, scaled));
                }
            }
            AdapterPayload::FullDelta(deltas) => {
                for d in deltas {
                    let base = g.constant(d.target.base(params)?.clone());
                    let delta = leaf(g, &d.delta, trainable, &mut leaves);
                    let scaled = g.scale(delta, a.scale);
                    resolved.insert(d.target, g.add(base, scaled));
                }
            }
        }
    }
    let get = |g: &mut Graph, t: AdaptedMatrix| -> Result<NodeId> {
        match resolved.get(&t) {
            Some(id) => Ok(*id),
            None => Ok(g.constant(t.base(params)?.clone())),
        }
    };

    let mix = get(g, AdaptedMatrix::Mix)?;
    let cfg = &params.config;
    let mut query = Vec::with_capacity(cfg.blocks);
    let mut key = Vec::with_capacity(cfg.blocks);
    let mut value = Vec::with_capacity(cfg.blocks);
    for block in 0..cfg.blocks {
        let (mut q, mut k, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for head in 0..cfg.heads {
            q.push(get(g, AdaptedMatrix::Query { block, head })?);
            k.push(get(g, AdaptedMatrix::Key { block, head })?);
            v.push(get(g, AdaptedMatrix::Value { block, head })?);
        }
        query.push(q);
        key.push(k);
        value.push(v);
    }

    let offset = match adapter {
        Some(a) => match &a.payload {
            AdapterPayload::EmbeddingOffset(t) => {
                let id = leaf(g, t, trainable, &mut leaves);
                Some((a.trigger, id, a.scale))
            }
            _ => None,
        },
        None => None,
    };

    let bound = BoundWeights {
        mix,
        b_mix: g.constant(params.b_mix.clone()),
        query,
        key,
        value,
        offset,
        w_in: g.constant(params.w_in.clone()),
        w_out: g.constant(params.w_out.clone()),
        b_out: g.constant(params.b_out.clone()),
    };
    Ok((bound, leaves))
}

/// Prompt tokens padded to the context length.
pub fn pad_prompt(tokens: &[TokenId], params: &DenoiserParams) -> Result<Vec<TokenId>> {
    let ctx = params.config.context_len;
    if tokens.len() > ctx {
        return Err(Error::Invalid(format!(
            "prompt has {} tokens, context holds {ctx}",
            tokens.len()
        )));
    }
    if let Some(bad) = tokens.iter().find(|t| t.0 >= params.config.vocab_size) {
        return Err(Error::UnknownTokenId(bad.0));
    }
    let mut out = tokens.to_vec();
    out.resize(ctx, PAD);
    Ok(out)
}

pub fn encode_graph(
    g: &mut Graph,
    params: &DenoiserParams,
    weights: &BoundWeights,
    tokens: &[TokenId],
) -> Result<NodeId> {
    let padded = pad_prompt(tokens, params)?;
    let d = params.config.text_dim;
    let mut rows = Vec::with_capacity(padded.len() * d);
    for (pos, tok) in padded.iter().enumerate() {
        let e = params.token_embedding.row(tok.0);
        let p = params.position_embedding.row(pos);
        rows.extend(e.iter().zip(p).map(|(a, b)| a + b));
    }
    let mut x = g.constant(Tensor::matrix(padded.len(), d, rows)?);
    if let Some((trigger, offset, scale)) = weights.offset {
        let at: Vec<usize> = padded
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == trigger)
            .map(|(i, _)| i)
            .collect();
        if !at.is_empty() {
            x = g.add_rows(x, offset, &at, scale);
        }
    }
    let mixed = g.matmul(x, weights.mix);
    let biased = g.add_row(mixed, weights.b_mix);
    Ok(g.tanh(biased))
}

fn latent_dims(z: &Tensor, params: &DenoiserParams) -> Result<(usize, usize)> {
    match z.shape() {
        [h, w, l] if *l == params.config.latent_channels && *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(Error::Shape(format!(
            "latent must be h x w x {}, got {:?}",
            params.config.latent_channels, s
        ))),
    }
}

/// Records the denoiser on `g`. `z` is an `(h*w) x l` node.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph(
    g: &mut Graph,
    params: &DenoiserParams,
    weights: &BoundWeights,
    z: NodeId,
    height: usize,
    width: usize,
    t: usize,
    text: NodeId,
) -> Result<ForwardNodes> {
    let cfg = &params.config;
    if t >= params.train_steps() {
        return Err(Error::Invalid(format!(
            "timestep {t} outside [0, {})",
            params.train_steps()
        )));
    }
    let zin = match cfg.lift_blur {
        Some(spec) => g.filter(z, height, width, spec),
        None => z,
    };
    let (z_gain, b_gain) = cfg.input_scaling.gains(params.alpha_bar(t));
    let mut lifted = g.matmul(zin, weights.w_in);
    if z_gain != 1.0 {
        lifted = g.scale(lifted, z_gain);
    }
    let temb = params
        .time_embedding(t)
        .zip_with(&params.time_gain, |a, b| a * b)?;
    let bias = params.b_in.map(|v| v * b_gain).add(&temb)?;
    let bias = g.constant(bias);
    let mut f = g.add_row(lifted, bias);

    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.blocks);
    for block in 0..cfg.blocks {
        let mut outs = Vec::with_capacity(cfg.heads);
        let mut maps = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = g.matmul(f, weights.query[block][head]);
            let k = g.matmul(text, weights.key[block][head]);
            let v = g.matmul(text, weights.value[block][head]);
            let logits = g.matmul_bt(q, k);
            let a = g.softmax_rows(logits, scale);
            outs.push(g.matmul(a, v));
            maps.push(a);
        }
        let o = g.concat_cols(&outs);
        let res = g.add(f, o);
        f = g.tanh(res);
        attention.push(maps);
    }
    let head_out = g.matmul(f, weights.w_out);
    let head_out = g.add_row(head_out, weights.b_out);
    let eps = match cfg.prediction {
        Prediction::Epsilon => head_out,
        Prediction::Sample => {
            let ab = params.alpha_bar(t);
            let inv = 1.0 / (1.0 - ab).sqrt();
            let zs = g.scale(z, inv);
            let xs = g.scale(head_out, ab.sqrt() * inv);
            g.sub(zs, xs)
        }
    };
    Ok(ForwardNodes {
        eps,
        attention,
        height,
        width,
        tokens: cfg.context_len,
    })
}

/// Text features `c` (`context_len x text_dim`) for a prompt.
pub fn encode_prompt(
    tokens: &[TokenId],
    params: &DenoiserParams,
    adapter: Option<&ConceptAdapter>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (w, _) = bind_weights(&mut g, params, adapter, false)?;
    let c = encode_graph(&mut g, params, &w, tokens)?;
    Ok(g.value(c).clone())
}

fn stack_from(g: &Graph, nodes: &ForwardNodes) -> AttentionStack {
    AttentionStack {
        height: nodes.height,
        width: nodes.width,
        tokens: nodes.tokens,
        maps: nodes
            .attention
            .iter()
            .map(|b| b.iter().map(|id| g.value(*id).clone()).collect())
            .collect(),
    }
}

/// One denoiser evaluation on precomputed text features.
pub fn denoise_forward(
    z: &Tensor,
    t: usize,
    text: &Tensor,
    params: &DenoiserParams,
    adapter: Option<&ConceptAdapter>,
) -> Result<(Tensor, AttentionStack)> {
    let (h, w) = latent_dims(z, params)?;
    let cfg = &params.config;
    if text.shape() != [cfg.context_len, cfg.text_dim] {
        return Err(Error::Shape(format!(
            "text features must be {} x {}, got {:?}",
            cfg.context_len,
            cfg.text_dim,
            text.shape()
        )));
    }
    let mut g = Graph::new();
    let (weights, _) = bind_weights(&mut g, params, adapter, false)?;
    let zn = g.constant(z.clone().reshape(&[h * w, cfg.latent_channels])?);
    let c = g.constant(text.clone());
    let nodes = forward_graph(&mut g, params, &weights, zn, h, w, t, c)?;
    let eps = g
        .value(nodes.eps)
        .clone()
        .reshape(&[h, w, cfg.latent_channels])?;
    Ok((eps, stack_from(&g, &nodes)))
}

/// One sampling branch: a model, an optional adapter and a prompt.
#[derive(Debug, Clone, Copy)]
pub struct Branch<'a> {
    pub params: &'a DenoiserParams,
    pub adapter: Option<&'a ConceptAdapter>,
    pub tokens: &'a [TokenId],
}

impl<'a> Branch<'a> {
    pub fn new(
        params: &'a DenoiserParams,
        adapter: Option<&'a ConceptAdapter>,
        tokens: &'a [TokenId],
    ) -> Self {
        Self {
            params,
            adapter,
            tokens,
        }
    }

    /// Records text encoding and the forward pass for this branch on `g`.
    pub fn record(
        &self,
        g: &mut Graph,
        z: NodeId,
        height: usize,
        width: usize,
        t: usize,
    ) -> Result<ForwardNodes> {
        let (w, _) = bind_weights(g, self.params, self.adapter, false)?;
        let c = encode_graph(g, self.params, &w, self.tokens)?;
        forward_graph(g, self.params, &w, z, height, width, t, c)
    }

    pub fn forward(&self, z: &Tensor, t: usize) -> Result<(Tensor, AttentionStack)> {
        let (h, w) = latent_dims(z, self.params)?;
        let l = self.params.config.latent_channels;
        let mut g = Graph::new();
        let zn = g.constant(z.clone().reshape(&[h * w, l])?);
        let nodes = self.record(&mut g, zn, h, w, t)?;
        let eps = g.value(nodes.eps).clone().reshape(&[h, w, l])?;
        Ok((eps, stack_from(&g, &nodes)))
    }
}

/// Value and gradient w.r.t. the shared latent of a loss over several
/// branches' attention. `loss` receives the per-branch forward handles.
pub fn grad_wrt_latent<F>(z: &Tensor, t: usize, branches: &[Branch<'_>], loss: F) -> Result<(f64, Tensor)>
where
    F: FnOnce(&mut Graph, &[ForwardNodes]) -> Result<NodeId>,
{
    let first = branches
        .first()
        .ok_or_else(|| Error::Invalid("grad_wrt_latent needs at least one branch".into()))?;
    let (h, w) = latent_dims(z, first.params)?;
    let l = first.params.config.latent_channels;
    let mut g = Graph::new();
    let zn = g.variable(z.clone().reshape(&[h * w, l])?);
    let nodes = branches
        .iter()
        .map(|b| b.record(&mut g, zn, h, w, t))
        .collect::<Result<Vec<_>>>()?;
    let loss_node = loss(&mut g, &nodes)?;
    let value = g.scalar_value(loss_node);
    let grads = g.backward(loss_node);
    let grad = grads
        .get_or_zeros(zn, g.value(zn))
        .reshape(&[h, w, l])?;
    Ok((value, grad))
}
