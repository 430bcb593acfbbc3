//! The graph-transformer classifier.
//!
//! A spectrogram `[B, 1, T, F]` passes through a strided convolutional stem
//! to a `[B, D, T', F']` map, receives a learnable `[T', F']` positional
//! table broadcast over channels, and is flattened time-major into
//! `N = T' * F'` nodes (`n = t * F' + f`). Each block then applies a pre-norm
//! self-attention encoder, a grapher (projection, K-NN graph on the projected
//! features, max-relative aggregation, update and output projections,
//! residual) and a residual FFN. The head average-pools, expands to a hidden
//! width with batch norm and ReLU, and projects to class logits.

mod export;
mod graph;
mod params;
mod verify;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, BnMode, Real, RunningStats, Tape, Tensor, Var};

pub use export::{write_attention_csv, write_graph_csv, GraphEdge};
pub use graph::{knn_graph, MelGraph};
pub use params::{Init, Param, ParamSet, ParamSpec};
pub use verify::{check_model_gradients, ModelGradCheck};

const ATTN_STD: f64 = 0.02;
const STEM_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    pub heads: usize,
    pub dim: usize,
    pub k_schedule: Vec<usize>,
    pub n_classes: usize,
    pub stem_channels: Vec<usize>,
    pub stem_strides: Vec<usize>,
    pub mlp_ratio: usize,
    pub ffn_ratio: usize,
    pub head_hidden: usize,
    pub input_frames: usize,
    pub input_bins: usize,
    pub use_encoder: bool,
    pub use_gnn: bool,
    pub use_ffn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::scaled(96, 8, 8, 5)
    }
}

/// `K_l = floor(2 + 6 (l - 1) / (L - 1))` for `l = 1..=L`: grows from 2 to 8.
pub fn k_schedule(blocks: usize) -> Vec<usize> {
    if blocks == 1 {
        return vec![2];
    }
    (0..blocks).map(|l| 2 + 6 * l / (blocks - 1)).collect()
}

impl ModelConfig {
    /// Same architecture with a different width, depth and head count; the
    /// stem channels scale as `[D/8, D/4, D/2, D, D]`.
    pub fn scaled(dim: usize, blocks: usize, heads: usize, n_classes: usize) -> Self {
        Self {
            blocks,
            heads,
            dim,
            k_schedule: k_schedule(blocks),
            n_classes,
            stem_channels: vec![dim / 8, dim / 4, dim / 2, dim, dim],
            stem_strides: vec![2, 2, 2, 2, 1],
            mlp_ratio: 4,
            ffn_ratio: 4,
            head_hidden: 512,
            input_frames: crate::features::N_FRAMES,
            input_bins: crate::features::N_MELS,
            use_encoder: true,
            use_gnn: true,
            use_ffn: true,
        }
    }

    /// Output grid `(T', F')` of the stem.
    pub fn grid(&self) -> (usize, usize) {
        let pad = STEM_KERNEL / 2;
        self.stem_strides.iter().fold((self.input_frames, self.input_bins), |(t, f), &s| {
            (conv_out_dim(t, STEM_KERNEL, s, pad), conv_out_dim(f, STEM_KERNEL, s, pad))
        })
    }

    pub fn n_nodes(&self) -> usize {
        let (t, f) = self.grid();
        t * f
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.blocks == 0 || self.k_schedule.len() != self.blocks {
            return bad(format!("{} K values for {} blocks", self.k_schedule.len(), self.blocks));
        }
        if self.stem_channels.len() != self.stem_strides.len() || self.stem_channels.is_empty() {
            return bad("stem channel and stride lists differ in length".into());
        }
        if self.stem_channels.last() != Some(&self.dim) || self.stem_channels.contains(&0) {
            return bad(format!("stem channels {:?} must end at dim {}", self.stem_channels, self.dim));
        }
        if self.stem_strides.contains(&0) || self.input_frames < 2 || self.input_bins < 2 {
            return bad("degenerate stem geometry".into());
        }
        let n = self.n_nodes();
        if let Some(&k) = self.k_schedule.iter().find(|&&k| k == 0 || k >= n) {
            return bad(format!("K = {k} outside [1, {n})"));
        }
        if self.n_classes < 2 || self.head_hidden == 0 || self.mlp_ratio == 0 || self.ffn_ratio == 0 {
            return bad("classes, head width and ratios must be positive".into());
        }
        Ok(())
    }

    /// Every trainable tensor in forward order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        use Init::*;
        let d = self.dim;
        let mut s = Vec::new();
        let mut cin = 1;
        for (i, &c) in self.stem_channels.iter().enumerate() {
            let fan_in = cin * STEM_KERNEL * STEM_KERNEL;
            s.push(ParamSpec::new(format!("stem.conv{}.weight", i + 1), &[c, cin, STEM_KERNEL, STEM_KERNEL], KaimingRelu { fan_in }));
            s.push(ParamSpec::new(format!("stem.bn{}.weight", i + 1), &[c], Ones));
            s.push(ParamSpec::new(format!("stem.bn{}.bias", i + 1), &[c], Zeros));
            cin = c;
        }
        let (t, f) = self.grid();
        s.push(ParamSpec::new("pos_embed", &[t, f], Normal { std: ATTN_STD }));
        let linear = |s: &mut Vec<ParamSpec>, name: String, i: usize, o: usize, init: Init| {
            s.push(ParamSpec::new(format!("{name}.weight"), &[i, o], init));
            s.push(ParamSpec::new(format!("{name}.bias"), &[o], Zeros));
        };
        let norm = |s: &mut Vec<ParamSpec>, name: String| {
            s.push(ParamSpec::new(format!("{name}.weight"), &[d], Ones));
            s.push(ParamSpec::new(format!("{name}.bias"), &[d], Zeros));
        };
        for l in 1..=self.blocks {
            if self.use_encoder {
                let h = d * self.mlp_ratio;
                norm(&mut s, format!("block{l}.enc.norm1"));
                // no key bias: softmax over keys is blind to it
                linear(&mut s, format!("block{l}.enc.q"), d, d, Normal { std: ATTN_STD });
                s.push(ParamSpec::new(format!("block{l}.enc.k.weight"), &[d, d], Normal { std: ATTN_STD }));
                for p in ["v", "proj"] {
                    linear(&mut s, format!("block{l}.enc.{p}"), d, d, Normal { std: ATTN_STD });
                }
                norm(&mut s, format!("block{l}.enc.norm2"));
                linear(&mut s, format!("block{l}.enc.fc1"), d, h, KaimingLinear { fan_in: d });
                linear(&mut s, format!("block{l}.enc.fc2"), h, d, KaimingLinear { fan_in: h });
            }
            if self.use_gnn {
                linear(&mut s, format!("block{l}.gnn.fc_in"), d, d, KaimingRelu { fan_in: d });
                linear(&mut s, format!("block{l}.gnn.update"), 2 * d, d, KaimingLinear { fan_in: 2 * d });
                linear(&mut s, format!("block{l}.gnn.fc_out"), d, d, KaimingLinear { fan_in: d });
            }
            if self.use_ffn {
                let h = d * self.ffn_ratio;
                linear(&mut s, format!("block{l}.ffn.fc1"), d, h, KaimingRelu { fan_in: d });
                linear(&mut s, format!("block{l}.ffn.fc2"), h, d, KaimingLinear { fan_in: h });
            }
        }
        let hh = self.head_hidden;
        s.push(ParamSpec::new("head.conv1.weight", &[hh, d, 1, 1], KaimingRelu { fan_in: d }));
        s.push(ParamSpec::new("head.bn.weight", &[hh], Ones));
        s.push(ParamSpec::new("head.bn.bias", &[hh], Zeros));
        s.push(ParamSpec::new("head.conv2.weight", &[self.n_classes, hh, 1, 1], KaimingLinear { fan_in: hh }));
        s.push(ParamSpec::new("head.conv2.bias", &[self.n_classes], Zeros));
        s
    }

    /// Closed-form trainable parameter count.
    ///
    /// stem: `sum 9 c_{i-1} c_i + 2 c_i` (convs carry no bias; BN follows);
    /// positional table `T' F'`; per block an encoder of
    /// `4 D + 4 D^2 + 3 D + 2 r D^2 + r D + D`, a grapher of `4 D^2 + 3 D`
    /// and an FFN of `2 r D^2 + r D + D`; head `D h + 2 h + h C + C`.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let mut total = 0;
        let mut cin = 1;
        for &c in &self.stem_channels {
            total += STEM_KERNEL * STEM_KERNEL * cin * c + 2 * c;
            cin = c;
        }
        total += self.n_nodes();
        let enc = 4 * d + 4 * d * d + 3 * d + 2 * self.mlp_ratio * d * d + self.mlp_ratio * d + d;
        let gnn = 4 * d * d + 3 * d;
        let ffn = 2 * self.ffn_ratio * d * d + self.ffn_ratio * d + d;
        let per_block = enc * self.use_encoder as usize + gnn * self.use_gnn as usize + ffn * self.use_ffn as usize;
        total += self.blocks * per_block;
        let h = self.head_hidden;
        total + d * h + 2 * h + h * self.n_classes + self.n_classes
    }

    /// Batch-norm layers and their channel counts, in forward order.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = self
            .stem_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (format!("stem.bn{}", i + 1), c))
            .collect();
        v.push(("head.bn".into(), self.head_hidden));
        v
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffer<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// 1-based block whose post-softmax attention maps are kept.
    pub attention_block: Option<usize>,
    /// Neighbor tables `[block][batch item]` used in place of building the
    /// K-NN graphs, as recorded in [`Trace::graphs`].
    pub fixed_graphs: Option<Vec<Vec<MelGraph>>>,
}

/// Intermediate results recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Output shape of each stem stage.
    pub stem_shapes: Vec<Vec<usize>>,
    /// Stem output plus positional table, `[B, D, T', F']`.
    pub embedded: Tensor<T>,
    pub node_shape: Vec<usize>,
    /// `[block][batch item]`; empty for blocks without a grapher.
    pub graphs: Vec<Vec<MelGraph>>,
    /// `[B, H, N, N]` for the requested block.
    pub attention: Option<Tensor<T>>,
    /// Features entering the head, `[B, D, T', F']`.
    pub features: Tensor<T>,
    pub head_hidden_shape: Vec<usize>,
}

pub struct Forward<T> {
    pub logits: Var,
    pub trace: Trace<T>,
}

enum BnAccess<'a, T> {
    Train(&'a mut [BnBuffer<T>]),
    Eval(&'a [BnBuffer<T>]),
}

impl<T> BnAccess<'_, T> {
    fn mode(&mut self, i: usize) -> BnMode<'_, T> {
        match self {
            BnAccess::Train(b) => BnMode::Train(&mut b[i].stats),
            BnAccess::Eval(b) => BnMode::Eval(&b[i].stats),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    bn: Vec<BnBuffer<T>>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let params = ParamSet::init(&cfg.param_specs(), rng)?;
        let bn = cfg
            .bn_layers()
            .into_iter()
            .map(|(name, c)| BnBuffer {
                name,
                stats: RunningStats::new(c),
            })
            .collect();
        Ok(Self { cfg, params, bn })
    }

    /// Reassembles a model, checking every tensor against the layout implied
    /// by `cfg`.
    pub fn from_parts(cfg: ModelConfig, params: ParamSet<T>, bn: Vec<BnBuffer<T>>) -> Result<Self> {
        cfg.validate()?;
        let specs = cfg.param_specs();
        if specs.len() != params.len() {
            return Err(Error::shape(format!("{} parameters, layout expects {}", params.len(), specs.len())));
        }
        for (s, p) in specs.iter().zip(params.iter()) {
            if s.name != p.name || s.shape != p.tensor.shape() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} where layout expects {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        let layers = cfg.bn_layers();
        if layers.len() != bn.len()
            || layers.iter().zip(&bn).any(|((n, c), b)| *n != b.name || b.stats.mean.len() != *c || b.stats.var.len() != *c)
        {
            return Err(Error::shape("batch-norm buffers do not match the layout"));
        }
        Ok(Self { cfg, params, bn })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &[BnBuffer<T>] {
        &self.bn
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            bn: self
                .bn
                .iter()
                .map(|b| BnBuffer {
                    name: b.name.clone(),
                    stats: RunningStats {
                        mean: b.stats.mean.iter().map(|v| U::of(v.f64())).collect(),
                        var: b.stats.var.iter().map(|v| U::of(v.f64())).collect(),
                    },
                })
                .collect(),
        }
    }

    /// Puts every parameter on the tape, in [`ParamSet`] order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    /// Training-mode pass: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, vars: &[Var], x: Var, opts: &ForwardOptions) -> Result<Forward<T>> {
        let net = Net {
            cfg: &self.cfg,
            params: &self.params,
            vars,
        };
        net.run(tape, x, BnAccess::Train(&mut self.bn), opts)
    }

    /// Inference-mode pass; reads the running estimates only.
    pub fn forward_eval(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, opts: &ForwardOptions) -> Result<Forward<T>> {
        let net = Net {
            cfg: &self.cfg,
            params: &self.params,
            vars,
        };
        net.run(tape, x, BnAccess::Eval(&self.bn), opts)
    }

    /// Inference on a `[B, 1, T, F]` batch without recording gradients.
    pub fn infer(&self, x: &Tensor<T>, opts: &ForwardOptions) -> Result<(Tensor<T>, Trace<T>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_eval(&mut tape, &vars, xv, opts)?;
        Ok((tape.value(out.logits).clone(), out.trace))
    }
}

/// Stacks equally shaped `[T, F]` spectrograms into a `[B, 1, T, F]` batch.
pub fn stack_batch<T: Real>(items: &[&[T]], frames: usize, bins: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(items.len() * frames * bins);
    for it in items {
        if it.len() != frames * bins {
            return Err(Error::shape(format!("spectrogram of {} values, expected {frames}x{bins}", it.len())));
        }
        data.extend_from_slice(it);
    }
    Tensor::new(&[items.len(), 1, frames, bins], data)
}

/// `[B, D, T', F'] -> [B, N, D]` with node `n = t * F' + f`.
pub fn to_nodes<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("to_nodes expects [B, D, T, F], got {s:?}")));
    }
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(flat, &[0, 2, 1])
}

/// Inverse of [`to_nodes`] for a `(t, f)` grid.
pub fn from_nodes<T: Real>(tape: &mut Tape<T>, x: Var, grid: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::shape(format!("from_nodes: {s:?} for grid {grid:?}")));
    }
    let t = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(t, &[s[0], s[2], grid.0, grid.1])
}

/// Max-relative graph convolution: `concat(x_i, max_j (x_j - x_i)) W + b`
/// with neighbor lists laid out `[B][N][K]`.
pub fn mr_graph_conv<T: Real>(tape: &mut Tape<T>, x: Var, neighbors: &[usize], k: usize, w: Var, b: Var) -> Result<Var> {
    let rel = tape.neighbor_max_diff(x, neighbors, k)?;
    let axis = tape.shape(x).len() - 1;
    let cat = tape.concat(&[x, rel], axis)?;
    tape.linear(cat, w, Some(b))
}

/// Weight and bias (or scale and shift) of one affine layer.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub w: Var,
    pub b: Var,
}

impl Affine {
    fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.w, Some(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderWeights {
    pub norm1: Affine,
    pub q: Affine,
    /// Key projection weight; a key bias would cancel in the softmax.
    pub k: Var,
    pub v: Affine,
    pub proj: Affine,
    pub norm2: Affine,
    pub fc1: Affine,
    pub fc2: Affine,
}

/// Pre-norm multi-head self-attention and GELU MLP, both residual, on
/// `[B, N, D]` nodes. Also returns the `[B, H, N, N]` attention weights.
pub fn encoder_layer<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize, w: &EncoderWeights) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let [b, n, d] = s[..] else {
        return Err(Error::shape(format!("encoder expects [B, N, D], got {s:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("{d} features over {heads} heads")));
    }
    let dh = d / heads;
    let y = tape.layernorm(x, w.norm1.w, w.norm1.b)?;
    let mut split = |w: Var, bias: Option<Var>| -> Result<Var> {
        let t = tape.linear(y, w, bias)?;
        let t = tape.reshape(t, &[b, n, heads, dh])?;
        tape.permute(t, &[0, 2, 1, 3])
    };
    let (q, k, v) = (split(w.q.w, Some(w.q.b))?, split(w.k, None)?, split(w.v.w, Some(w.v.b))?);
    let scores = tape.matmul_nt(q, k, 1.0 / (dh as f64).sqrt())?;
    let attn = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(attn, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, n, d])?;
    let a = w.proj.apply(tape, ctx)?;
    let x = tape.add(x, a)?;
    let y = tape.layernorm(x, w.norm2.w, w.norm2.b)?;
    let y = w.fc1.apply(tape, y)?;
    let y = tape.gelu(y);
    let y = w.fc2.apply(tape, y)?;
    Ok((tape.add(x, y)?, attn))
}

/// `relu(x W_in + b_in)`, K-NN graph on the result, max-relative graph
/// convolution, output projection and residual, on `[B, N, D]` nodes.
pub fn grapher_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    k: usize,
    fc_in: Affine,
    update: Affine,
    fc_out: Affine,
) -> Result<(Var, Vec<MelGraph>)> {
    grapher_block_with(tape, x, k, fc_in, update, fc_out, None)
}

/// [`grapher_block`] with optional precomputed graphs, one per batch item.
pub fn grapher_block_with<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    k: usize,
    fc_in: Affine,
    update: Affine,
    fc_out: Affine,
    fixed: Option<&[MelGraph]>,
) -> Result<(Var, Vec<MelGraph>)> {
    let s = tape.shape(x).to_vec();
    let [b, n, d] = s[..] else {
        return Err(Error::shape(format!("grapher expects [B, N, D], got {s:?}")));
    };
    let h0 = fc_in.apply(tape, x)?;
    let h0 = tape.relu(h0);
    let graphs = match fixed {
        Some(g) => {
            if g.len() != b || g.iter().any(|g| g.n_nodes() != n || g.k() != k) {
                return Err(Error::shape(format!("fixed graphs do not fit {b} items of {n} nodes at K = {k}")));
            }
            g.to_vec()
        }
        None => {
            let feats = tape.value(h0).data();
            (0..b)
                .into_par_iter()
                .map(|i| knn_graph(&feats[i * n * d..(i + 1) * n * d], n, d, k))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let table: Vec<usize> = graphs.iter().flat_map(|g| g.table().iter().copied()).collect();
    let h1 = mr_graph_conv(tape, h0, &table, k, update.w, update.b)?;
    let y = fc_out.apply(tape, h1)?;
    Ok((tape.add(y, x)?, graphs))
}

/// `relu(x W_1 + b_1) W_2 + b_2 + x`.
pub fn ffn_block<T: Real>(tape: &mut Tape<T>, x: Var, fc1: Affine, fc2: Affine) -> Result<Var> {
    let a = fc1.apply(tape, x)?;
    let a = tape.relu(a);
    let y = fc2.apply(tape, a)?;
    tape.add(y, x)
}

struct Net<'a, T> {
    cfg: &'a ModelConfig,
    params: &'a ParamSet<T>,
    vars: &'a [Var],
}

impl<T: Real> Net<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    fn affine(&self, name: &str) -> Result<Affine> {
        Ok(Affine {
            w: self.p(&format!("{name}.weight"))?,
            b: self.p(&format!("{name}.bias"))?,
        })
    }

    fn encoder_weights(&self, l: usize) -> Result<EncoderWeights> {
        let a = |p: &str| self.affine(&format!("block{l}.enc.{p}"));
        Ok(EncoderWeights {
            norm1: a("norm1")?,
            q: a("q")?,
            k: self.p(&format!("block{l}.enc.k.weight"))?,
            v: a("v")?,
            proj: a("proj")?,
            norm2: a("norm2")?,
            fc1: a("fc1")?,
            fc2: a("fc2")?,
        })
    }

    fn run(&self, tape: &mut Tape<T>, x: Var, mut bn: BnAccess<'_, T>, opts: &ForwardOptions) -> Result<Forward<T>> {
        let cfg = self.cfg;
        if self.vars.len() != self.params.len() {
            return Err(Error::invalid("bound variables do not match the parameter set"));
        }
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 1 || xs[2] != cfg.input_frames || xs[3] != cfg.input_bins {
            return Err(Error::shape(format!(
                "model expects [B, 1, {}, {}], got {xs:?}",
                cfg.input_frames, cfg.input_bins
            )));
        }
        if let Some(g) = &opts.fixed_graphs {
            if g.len() != cfg.blocks {
                return Err(Error::shape(format!("fixed graphs for {} blocks, model has {}", g.len(), cfg.blocks)));
            }
        }
        if let Some(l) = opts.attention_block {
            if l == 0 || l > cfg.blocks || !cfg.use_encoder {
                return Err(Error::invalid(format!("no attention at block {l}")));
            }
        }
        let batch = xs[0];

        let mut h = x;
        let mut stem_shapes = Vec::new();
        for (i, &s) in cfg.stem_strides.iter().enumerate() {
            let w = self.p(&format!("stem.conv{}.weight", i + 1))?;
            h = tape.conv2d(h, w, None, s, STEM_KERNEL / 2)?;
            let g = self.p(&format!("stem.bn{}.weight", i + 1))?;
            let b = self.p(&format!("stem.bn{}.bias", i + 1))?;
            h = tape.batchnorm2d(h, g, b, bn.mode(i))?;
            h = tape.relu(h);
            stem_shapes.push(tape.shape(h).to_vec());
        }
        let pe = self.p("pos_embed")?;
        h = tape.add_broadcast(h, pe)?;
        let embedded = tape.value(h).clone();

        let grid = cfg.grid();
        let mut z = to_nodes(tape, h)?;
        let node_shape = tape.shape(z).to_vec();
        let mut graphs = Vec::with_capacity(cfg.blocks);
        let mut attention = None;
        for l in 1..=cfg.blocks {
            if cfg.use_encoder {
                let w = self.encoder_weights(l)?;
                let (y, attn) = encoder_layer(tape, z, cfg.heads, &w)?;
                if opts.attention_block == Some(l) {
                    attention = Some(tape.value(attn).clone());
                }
                z = y;
            }
            if cfg.use_gnn {
                let pre = format!("block{l}.gnn");
                let fixed = opts.fixed_graphs.as_ref().map(|g| g[l - 1].as_slice());
                let (y, gs) = grapher_block_with(
                    tape,
                    z,
                    cfg.k_schedule[l - 1],
                    self.affine(&format!("{pre}.fc_in"))?,
                    self.affine(&format!("{pre}.update"))?,
                    self.affine(&format!("{pre}.fc_out"))?,
                    fixed,
                )?;
                z = y;
                graphs.push(gs);
            } else {
                graphs.push(Vec::new());
            }
            if cfg.use_ffn {
                let pre = format!("block{l}.ffn");
                z = ffn_block(tape, z, self.affine(&format!("{pre}.fc1"))?, self.affine(&format!("{pre}.fc2"))?)?;
            }
        }

        let fmap = from_nodes(tape, z, grid)?;
        let features = tape.value(fmap).clone();
        let pooled = tape.adaptive_avg_pool(fmap)?;
        let w1 = self.p("head.conv1.weight")?;
        let mut hh = tape.conv2d(pooled, w1, None, 1, 0)?;
        let g = self.p("head.bn.weight")?;
        let b = self.p("head.bn.bias")?;
        hh = tape.batchnorm2d(hh, g, b, bn.mode(cfg.stem_strides.len()))?;
        hh = tape.relu(hh);
        let head_hidden_shape = tape.shape(hh).to_vec();
        let w2 = self.p("head.conv2.weight")?;
        let b2 = self.p("head.conv2.bias")?;
        let out = tape.conv2d(hh, w2, Some(b2), 1, 0)?;
        let logits = tape.reshape(out, &[batch, cfg.n_classes])?;
        Ok(Forward {
            logits,
            trace: Trace {
                stem_shapes,
                embedded,
                node_shape,
                graphs,
                attention,
                features,
                head_hidden_shape,
            },
        })
    }
}
