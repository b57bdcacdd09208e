//! Graph transformer backbone: local message passing plus all-pairs
//! attention in every layer, random-walk positional encodings at the input,
//! and mean pooling to a graph embedding.

use std::rc::Rc;

use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::connectome::BrainGraph;
use crate::error::{Error, Result};
use crate::params::{affine, fan_in_normal, insert_affine, ParamSet, ParamVars};
use crate::rng::Rng;
use crate::tape::{Mat, Propagation, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Node feature width, i.e. the atlas size.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_attention_heads: usize,
    pub rwpe_steps: usize,
    pub embedding_dim: usize,
    pub use_edge_weights: bool,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 116,
            hidden_dim: 64,
            n_layers: 4,
            n_attention_heads: 4,
            rwpe_steps: 16,
            embedding_dim: 64,
            use_edge_weights: false,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_attention_heads", self.n_attention_heads),
            ("rwpe_steps", self.rwpe_steps),
            ("embedding_dim", self.embedding_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("encoder.{name} must be >= 1")));
            }
        }
        if self.hidden_dim % self.n_attention_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder.hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.n_attention_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "encoder.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphEmbedding {
    pub node_embeddings: Mat,
    pub graph_embedding: DVector<f64>,
}

/// Return probabilities of `t`-step random walks, `t = 1..=steps`.
///
/// Column `t - 1` holds the diagonal of `(D^-1 A)^t` on the unweighted
/// topology. Isolated nodes get zeros.
pub fn rw_positional_encoding(g: &BrainGraph, steps: usize) -> Mat {
    let n = g.n_nodes;
    let mut out = Mat::zeros(n, steps);
    if n == 0 || steps == 0 || g.edges.is_empty() {
        return out;
    }
    let adj = g.adjacency();
    let deg: Vec<f64> = adj.iter().map(|a| a.len() as f64).collect();
    // Rows of the current power, restricted to nodes with neighbors.
    let mut power = Mat::identity(n, n);
    let mut next = Mat::zeros(n, n);
    for t in 0..steps {
        next.fill(0.0);
        for i in 0..n {
            if adj[i].is_empty() {
                continue;
            }
            let p = 1.0 / deg[i];
            for &(j, _) in &adj[i] {
                for c in 0..n {
                    next[(i, c)] += p * power[(j, c)];
                }
            }
        }
        std::mem::swap(&mut power, &mut next);
        for i in 0..n {
            if !adj[i].is_empty() {
                out[(i, t)] = power[(i, i)];
            }
        }
    }
    out
}

/// Fresh encoder parameters with fan-in scaled Gaussian weights.
pub fn init_params(cfg: &EncoderConfig, rng: &mut Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let h = cfg.hidden_dim;
    insert_affine(&mut p, "input", cfg.input_dim + cfg.rwpe_steps, h, rng);
    for l in 0..cfg.n_layers {
        let pre = format!("layers.{l}");
        insert_affine(&mut p, &format!("{pre}.local"), h, h, rng);
        for m in ["q", "k", "v"] {
            p.insert(format!("{pre}.attn.{m}.weight"), fan_in_normal(h, h, rng));
        }
        insert_affine(&mut p, &format!("{pre}.attn.o"), h, h, rng);
        insert_affine(&mut p, &format!("{pre}.ffn.in"), h, 2 * h, rng);
        insert_affine(&mut p, &format!("{pre}.ffn.out"), 2 * h, h, rng);
        for norm in ["norm_local", "norm_attn", "norm_ffn"] {
            p.insert(format!("{pre}.{norm}.gain"), Mat::from_element(1, h, 1.0));
            p.insert(format!("{pre}.{norm}.bias"), Mat::zeros(1, h));
        }
    }
    insert_affine(&mut p, "output", h, cfg.embedding_dim, rng);
    Ok(p)
}

/// Checks that `params` has every tensor `cfg` needs, with the right shape.
pub fn check_params(params: &ParamSet, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    let mut rng = crate::rng::stream(0, &[]);
    let template = init_params(cfg, &mut rng)?;
    for (name, t) in template.iter() {
        match params.get(name) {
            None => return Err(Error::InvalidInput(format!("missing encoder parameter `{name}`"))),
            Some(m) if m.shape() != t.shape() => {
                return Err(Error::shape(
                    format!("`{name}` {:?}", t.shape()),
                    format!("{:?}", m.shape()),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mean aggregation over each node and its neighbors.
fn message_operator(g: &BrainGraph, use_weights: bool) -> Propagation {
    let adj = g.adjacency();
    let mut prop = Propagation::new(g.n_nodes, g.n_nodes);
    for (i, nbrs) in adj.iter().enumerate() {
        let norm = 1.0 / (1 + nbrs.len()) as f64;
        prop.push(i, i, norm);
        for &(j, e) in nbrs {
            let w = if use_weights { g.edge_weights[e] } else { 1.0 };
            prop.push(i, j, norm * w);
        }
    }
    prop
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let (r, c) = tape.shape(x);
            let keep = 1.0 / (1.0 - p);
            let mask = Mat::from_fn(r, c, |_, _| if rng.random::<f64>() < p { 0.0 } else { keep });
            let m = tape.constant(mask);
            tape.hadamard(x, m)
        }
        _ => x,
    }
}

fn norm(tape: &mut Tape, vars: &ParamVars, name: &str, x: Var) -> Var {
    let y = tape.layer_norm_rows(x, LN_EPS);
    let y = tape.mul_row(y, vars[&format!("{name}.gain")]);
    tape.add_row(y, vars[&format!("{name}.bias")])
}

/// Output handles of a recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub node_embeddings: Var,
    pub graph_embedding: Var,
}

/// Records the forward pass of `g` on `tape`. Dropout is active only when
/// `dropout_rng` is given.
pub fn forward(
    tape: &mut Tape,
    vars: &ParamVars,
    g: &BrainGraph,
    cfg: &EncoderConfig,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<EncodedVars> {
    if g.feature_dim() != cfg.input_dim {
        return Err(Error::shape(
            format!("feature width {}", cfg.input_dim),
            format!("feature width {}", g.feature_dim()),
        ));
    }
    if g.n_nodes == 0 {
        return Err(Error::InvalidInput(format!("{}: graph has no nodes", g.subject_id)));
    }
    let n = g.n_nodes;
    let pe = rw_positional_encoding(g, cfg.rwpe_steps);
    let mut input = Mat::zeros(n, cfg.input_dim + cfg.rwpe_steps);
    input.columns_mut(0, cfg.input_dim).copy_from(&g.node_features);
    input.columns_mut(cfg.input_dim, cfg.rwpe_steps).copy_from(&pe);
    let x = tape.constant(input);
    let prop = Rc::new(message_operator(g, cfg.use_edge_weights));

    let mut h = affine(tape, vars, "input", x);
    let heads = cfg.n_attention_heads;
    let dh = cfg.hidden_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let pre = format!("layers.{l}");

        let m = tape.propagate(prop.clone(), h);
        let local = affine(tape, vars, &format!("{pre}.local"), m);
        let local = dropout(tape, local, cfg.dropout, dropout_rng.as_deref_mut());
        let local = tape.add(h, local);
        let local = norm(tape, vars, &format!("{pre}.norm_local"), local);

        let q = tape.matmul(h, vars[&format!("{pre}.attn.q.weight")]);
        let k = tape.matmul(h, vars[&format!("{pre}.attn.k.weight")]);
        let v = tape.matmul(h, vars[&format!("{pre}.attn.v.weight")]);
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.cols(q, hd * dh, dh);
            let kh = tape.cols(k, hd * dh, dh);
            let vh = tape.cols(v, hd * dh, dh);
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, vh));
        }
        let o = if heads == 1 { outs[0] } else { tape.hcat(&outs) };
        let attn = affine(tape, vars, &format!("{pre}.attn.o"), o);
        let attn = dropout(tape, attn, cfg.dropout, dropout_rng.as_deref_mut());
        let attn = tape.add(h, attn);
        let attn = norm(tape, vars, &format!("{pre}.norm_attn"), attn);

        let mixed = tape.add(local, attn);
        let f = affine(tape, vars, &format!("{pre}.ffn.in"), mixed);
        let f = tape.gelu(f);
        let f = affine(tape, vars, &format!("{pre}.ffn.out"), f);
        let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut());
        let f = tape.add(mixed, f);
        h = norm(tape, vars, &format!("{pre}.norm_ffn"), f);
    }
    let node_embeddings = affine(tape, vars, "output", h);
    let graph_embedding = tape.mean_rows(node_embeddings);
    if tape.value(graph_embedding).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "encoder activations for subject `{}` ({} nodes, {} edges)",
            g.subject_id,
            g.n_nodes,
            g.n_edges()
        )));
    }
    Ok(EncodedVars {
        node_embeddings,
        graph_embedding,
    })
}

/// Deterministic (dropout-free) embedding of `g`.
pub fn encode(g: &BrainGraph, params: &ParamSet, cfg: &EncoderConfig) -> Result<GraphEmbedding> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let out = forward(&mut tape, &vars, g, cfg, None)?;
    Ok(GraphEmbedding {
        node_embeddings: tape.value(out.node_embeddings).clone(),
        graph_embedding: DVector::from_iterator(
            cfg.embedding_dim,
            tape.value(out.graph_embedding).iter().copied(),
        ),
    })
}

/// Graph embeddings of many graphs as rows of a matrix.
pub fn encode_all(graphs: &[BrainGraph], params: &ParamSet, cfg: &EncoderConfig) -> Result<Mat> {
    let mut out = Mat::zeros(graphs.len(), cfg.embedding_dim);
    for (i, g) in graphs.iter().enumerate() {
        let e = encode(g, params, cfg)?;
        out.row_mut(i).copy_from(&e.graph_embedding.transpose());
    }
    Ok(out)
}

/// Graph embedding (with dropout when `dropout_rng` is given) and the
/// parameter gradient of `upstream . graph_embedding`.
pub fn embed_and_backprop(
    g: &BrainGraph,
    params: &ParamSet,
    cfg: &EncoderConfig,
    upstream: &Mat,
    dropout_rng: Option<&mut Rng>,
) -> Result<(Mat, ParamSet)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let out = forward(&mut tape, &vars, g, cfg, dropout_rng)?;
    let grads = tape.backward_seeded(out.graph_embedding, upstream.clone());
    Ok((tape.value(out.graph_embedding).clone(), params.gradients(&vars, &grads)))
}

/// Graph embedding as a `1 x embedding_dim` row, optionally with dropout.
pub fn embed_row(
    g: &BrainGraph,
    params: &ParamSet,
    cfg: &EncoderConfig,
    dropout_rng: Option<&mut Rng>,
) -> Result<Mat> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let out = forward(&mut tape, &vars, g, cfg, dropout_rng)?;
    Ok(tape.value(out.graph_embedding).clone())
}
