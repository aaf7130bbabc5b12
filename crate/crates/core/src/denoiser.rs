//! Conditional denoising transformer.
//!
//! Observations become tokens (`grid patches | pose | wrench` for each of
//! the two timesteps, plus one motion token from their pose difference), pass through a self-attention encoder, and serve as
//! cross-attention memory for a decoder that maps a noisy action chunk and
//! its diffusion step to an estimate of the clean chunk.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Checkpoint, Graph, Tensor, Var};
use crate::types::{ActionChunk, NormalizedObservation, ObsFrame, ACTION_DIM, POSE_DIM, WRENCH_DIM};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("diffusion step {n} out of range 0..{steps}")]
    StepOutOfRange { n: usize, steps: usize },
    #[error("invalid denoiser config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub horizon: usize,
    pub action_dim: usize,
    pub n_diffusion_steps: usize,
    pub patch_size: usize,
    pub grid_size: usize,
    pub ffn_mult: usize,
    pub positional_embeddings: bool,
    /// Scale on the normalized pose difference fed to the motion token.
    pub motion_gain: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 3,
            horizon: 48,
            action_dim: ACTION_DIM,
            n_diffusion_steps: 100,
            patch_size: 6,
            grid_size: 24,
            ffn_mult: 4,
            positional_embeddings: true,
            motion_gain: 10.0,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even for the sinusoidal step embedding".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.action_dim != ACTION_DIM {
            return bad(format!("action_dim must be {ACTION_DIM}"));
        }
        if self.patch_size == 0 || self.grid_size % self.patch_size != 0 {
            return bad(format!("grid {} not divisible by patch {}", self.grid_size, self.patch_size));
        }
        if self.n_diffusion_steps < 2 {
            return bad("n_diffusion_steps must be at least 2".into());
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let p = self.grid_size / self.patch_size;
        p * p
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.patches_per_frame() + 2
    }

    pub fn n_obs_tokens(&self) -> usize {
        2 * self.tokens_per_frame() + 1
    }

    fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }
}

/// Encoder output: `[n_obs_tokens, d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTokens(pub Tensor);

enum Init {
    FanIn(usize),
    Zeros,
    Ones,
    Embedding,
}

/// Parameter names and shapes in a fixed order.
fn parameter_layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.w"), vec![i, o], Init::FanIn(i)));
        out.push((format!("{name}.b"), vec![o], Init::Zeros));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
        out.push((format!("{name}.g"), vec![d], Init::Ones));
        out.push((format!("{name}.b"), vec![d], Init::Zeros));
    };

    linear(&mut out, "obs.patch", p2, d);
    linear(&mut out, "obs.pose", POSE_DIM, d);
    linear(&mut out, "obs.wrench", WRENCH_DIM, d);
    linear(&mut out, "obs.motion", POSE_DIM, d);
    if cfg.positional_embeddings {
        out.push(("obs.pos_emb".into(), vec![cfg.n_obs_tokens(), d], Init::Embedding));
    }
    out.push(("obs.frame_emb".into(), vec![3, d], Init::Embedding));
    for l in 0..cfg.n_encoder_layers {
        let pre = format!("enc.{l}");
        norm(&mut out, &format!("{pre}.ln1"));
        for proj in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{pre}.attn.{proj}"), d, d);
        }
        norm(&mut out, &format!("{pre}.ln2"));
        linear(&mut out, &format!("{pre}.ffn.1"), d, f);
        linear(&mut out, &format!("{pre}.ffn.2"), f, d);
    }
    norm(&mut out, "enc.ln_f");

    linear(&mut out, "dec.in", ACTION_DIM, d);
    out.push(("dec.pos_emb".into(), vec![cfg.horizon, d], Init::Embedding));
    linear(&mut out, "dec.step.1", d, d);
    linear(&mut out, "dec.step.2", d, d);
    for l in 0..cfg.n_decoder_layers {
        let pre = format!("dec.{l}");
        norm(&mut out, &format!("{pre}.ln1"));
        for proj in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{pre}.self.{proj}"), d, d);
        }
        norm(&mut out, &format!("{pre}.ln2"));
        for proj in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{pre}.cross.{proj}"), d, d);
        }
        norm(&mut out, &format!("{pre}.ln3"));
        linear(&mut out, &format!("{pre}.ffn.1"), d, f);
        linear(&mut out, &format!("{pre}.ffn.2"), f, d);
    }
    norm(&mut out, "dec.ln_f");
    linear(&mut out, "dec.out", d, ACTION_DIM);
    out
}

/// The denoising network: configuration plus named weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of one forward pass.
pub struct BoundParams<'a> {
    model: &'a Denoiser,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[self.model.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn step_embedding(n: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = n as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self, DenoiserError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in parameter_layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::FanIn(fan) => {
                    let a = 1.0 / (fan as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-a..a)).collect()
                }
                Init::Embedding => (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { config, names, params, index })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// One line per parameter tensor plus the total.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (n, p) in self.names.iter().zip(&self.params) {
            s.push_str(&format!("{n:<24} {:?}\n", p.shape()));
        }
        s.push_str(&format!("total parameters: {}\n", self.param_count()));
        s
    }

    /// Inserts all weights into `graph`, trainable or frozen.
    pub fn bind<'a>(&'a self, graph: &mut Graph, trainable: bool) -> BoundParams<'a> {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        BoundParams { model: self, vars }
    }

    fn check_frame(&self, f: &ObsFrame) -> Result<(), DenoiserError> {
        let g = self.config.grid_size;
        if f.grid.len() != g * g {
            return Err(DenoiserError::ShapeMismatch(format!(
                "grid has {} cells, expected {g}x{g}",
                f.grid.len()
            )));
        }
        Ok(())
    }

    fn patchify(&self, grid: &[f64]) -> Vec<f64> {
        let g = self.config.grid_size;
        let p = self.config.patch_size;
        let per = g / p;
        let mut out = Vec::with_capacity(g * g);
        for pr in 0..per {
            for pc in 0..per {
                for r in 0..p {
                    let row = (pr * p + r) * g + pc * p;
                    out.extend_from_slice(&grid[row..row + p]);
                }
            }
        }
        out
    }

    /// Encoder forward for a batch; returns `[B·n_obs_tokens, d]`.
    pub fn encode_graph(
        &self,
        graph: &mut Graph,
        p: &BoundParams<'_>,
        obs: &[&NormalizedObservation],
    ) -> Result<Var, DenoiserError> {
        let cfg = &self.config;
        let b = obs.len();
        let np = cfg.patches_per_frame();
        let p2 = cfg.patch_size * cfg.patch_size;
        let (mut patches, mut poses, mut wrenches, mut motion) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for o in obs {
            for f in o.0.frames() {
                self.check_frame(f)?;
                patches.extend(self.patchify(&f.grid));
                poses.extend_from_slice(&f.pose);
                wrenches.extend_from_slice(&f.wrench);
            }
            motion.extend(o.0.current.pose.iter().zip(&o.0.previous.pose).map(|(c, p)| cfg.motion_gain * (c - p)));
        }
        let frames = 2 * b;
        let patches = graph.constant(Tensor::matrix(frames * np, p2, patches)?);
        let poses = graph.constant(Tensor::matrix(frames, POSE_DIM, poses)?);
        let wrenches = graph.constant(Tensor::matrix(frames, WRENCH_DIM, wrenches)?);
        let pt = graph.linear(patches, p.get("obs.patch.w"), p.get("obs.patch.b"))?;
        let st = graph.linear(poses, p.get("obs.pose.w"), p.get("obs.pose.b"))?;
        let wt = graph.linear(wrenches, p.get("obs.wrench.w"), p.get("obs.wrench.b"))?;
        let motion = graph.constant(Tensor::matrix(b, POSE_DIM, motion)?);
        let mt = graph.linear(motion, p.get("obs.motion.w"), p.get("obs.motion.b"))?;

        let mut frame_ids: Vec<usize> = (0..2).flat_map(|f| std::iter::repeat(f).take(cfg.tokens_per_frame())).collect();
        frame_ids.push(2);
        let mut extra = graph.embedding_lookup(p.get("obs.frame_emb"), &frame_ids)?;
        if cfg.positional_embeddings {
            extra = graph.add(extra, p.get("obs.pos_emb"))?;
        }
        let mut seqs = Vec::with_capacity(b);
        for i in 0..b {
            let mut parts = Vec::with_capacity(7);
            for f in 0..2 {
                let fi = 2 * i + f;
                parts.push(graph.slice(pt, 0, fi * np, (fi + 1) * np)?);
                parts.push(graph.slice(st, 0, fi, fi + 1)?);
                parts.push(graph.slice(wt, 0, fi, fi + 1)?);
            }
            parts.push(graph.slice(mt, 0, i, i + 1)?);
            let seq = graph.concat(&parts, 0)?;
            seqs.push(graph.add(seq, extra)?);
        }
        let mut x = if seqs.len() == 1 { seqs[0] } else { graph.concat(&seqs, 0)? };
        let l = cfg.n_obs_tokens();
        for layer in 0..cfg.n_encoder_layers {
            let pre = format!("enc.{layer}");
            let h = self.norm(graph, p, x, &format!("{pre}.ln1"))?;
            let a = self.attention(graph, p, &format!("{pre}.attn"), h, h, b, l, l)?;
            x = graph.add(x, a)?;
            let h = self.norm(graph, p, x, &format!("{pre}.ln2"))?;
            let f = self.ffn(graph, p, &format!("{pre}.ffn"), h)?;
            x = graph.add(x, f)?;
        }
        self.norm(graph, p, x, "enc.ln_f")
    }

    /// Decoder forward; `memory` is `[B·n_obs_tokens, d]`, output is `[B·H, 16]`.
    pub fn decode_graph(
        &self,
        graph: &mut Graph,
        p: &BoundParams<'_>,
        memory: Var,
        noisy: &[&ActionChunk],
        steps: &[usize],
    ) -> Result<Var, DenoiserError> {
        let cfg = &self.config;
        let b = noisy.len();
        let h = cfg.horizon;
        if steps.len() != b {
            return Err(DenoiserError::ShapeMismatch(format!("{} steps for {b} chunks", steps.len())));
        }
        let mut input = Vec::with_capacity(b * h * ACTION_DIM);
        for c in noisy {
            if c.horizon() != h {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "chunk horizon {} but config horizon {h}",
                    c.horizon()
                )));
            }
            input.extend_from_slice(c.data());
        }
        let mut step_rows = Vec::with_capacity(b * cfg.d_model);
        for &n in steps {
            if n >= cfg.n_diffusion_steps + 1 {
                return Err(DenoiserError::StepOutOfRange { n, steps: cfg.n_diffusion_steps + 1 });
            }
            step_rows.extend(step_embedding(n, cfg.d_model));
        }
        let input = graph.constant(Tensor::matrix(b * h, ACTION_DIM, input)?);
        let step_in = graph.constant(Tensor::matrix(b, cfg.d_model, step_rows)?);
        let s = graph.linear(step_in, p.get("dec.step.1.w"), p.get("dec.step.1.b"))?;
        let s = graph.gelu(s)?;
        let s = graph.linear(s, p.get("dec.step.2.w"), p.get("dec.step.2.b"))?;
        let tokens = graph.linear(input, p.get("dec.in.w"), p.get("dec.in.b"))?;

        let mut seqs = Vec::with_capacity(b);
        let row_ids = vec![0usize; h];
        for i in 0..b {
            let t = graph.slice(tokens, 0, i * h, (i + 1) * h)?;
            let t = graph.add(t, p.get("dec.pos_emb"))?;
            let si = graph.slice(s, 0, i, i + 1)?;
            let si = graph.embedding_lookup(si, &row_ids)?;
            seqs.push(graph.add(t, si)?);
        }
        let mut x = if b == 1 { seqs[0] } else { graph.concat(&seqs, 0)? };
        let lm = cfg.n_obs_tokens();
        for layer in 0..cfg.n_decoder_layers {
            let pre = format!("dec.{layer}");
            let hn = self.norm(graph, p, x, &format!("{pre}.ln1"))?;
            let a = self.attention(graph, p, &format!("{pre}.self"), hn, hn, b, h, h)?;
            x = graph.add(x, a)?;
            let hn = self.norm(graph, p, x, &format!("{pre}.ln2"))?;
            let a = self.attention(graph, p, &format!("{pre}.cross"), hn, memory, b, h, lm)?;
            x = graph.add(x, a)?;
            let hn = self.norm(graph, p, x, &format!("{pre}.ln3"))?;
            let f = self.ffn(graph, p, &format!("{pre}.ffn"), hn)?;
            x = graph.add(x, f)?;
        }
        let x = self.norm(graph, p, x, "dec.ln_f")?;
        Ok(graph.linear(x, p.get("dec.out.w"), p.get("dec.out.b"))?)
    }

    fn norm(&self, graph: &mut Graph, p: &BoundParams<'_>, x: Var, name: &str) -> Result<Var, DenoiserError> {
        let y = graph.layer_norm(x)?;
        let y = graph.mul_row(y, p.get(&format!("{name}.g")))?;
        Ok(graph.add_row(y, p.get(&format!("{name}.b")))?)
    }

    fn ffn(&self, graph: &mut Graph, p: &BoundParams<'_>, name: &str, x: Var) -> Result<Var, DenoiserError> {
        let h = graph.linear(x, p.get(&format!("{name}.1.w")), p.get(&format!("{name}.1.b")))?;
        let h = graph.gelu(h)?;
        Ok(graph.linear(h, p.get(&format!("{name}.2.w")), p.get(&format!("{name}.2.b")))?)
    }

    /// Multi-head attention, batched by stacking rows: queries are
    /// `[B·lq, d]`, keys/values `[B·lk, d]`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        graph: &mut Graph,
        p: &BoundParams<'_>,
        name: &str,
        xq: Var,
        xkv: Var,
        batch: usize,
        lq: usize,
        lk: usize,
    ) -> Result<Var, DenoiserError> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let w = |s: &str| p.get(&format!("{name}.{s}"));
        let q = graph.linear(xq, w("q.w"), w("q.b"))?;
        let k = graph.linear(xkv, w("k.w"), w("k.b"))?;
        let v = graph.linear(xkv, w("v.w"), w("v.b"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_batch = Vec::with_capacity(batch);
        for i in 0..batch {
            let qb = graph.slice(q, 0, i * lq, (i + 1) * lq)?;
            let kb = graph.slice(k, 0, i * lk, (i + 1) * lk)?;
            let vb = graph.slice(v, 0, i * lk, (i + 1) * lk)?;
            let kt = graph.transpose(kb)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = if heads == 1 { qb } else { graph.slice(qb, 1, s, e)? };
                let kh = if heads == 1 { kt } else { graph.slice(kt, 0, s, e)? };
                let vh = if heads == 1 { vb } else { graph.slice(vb, 1, s, e)? };
                let scores = graph.matmul(qh, kh)?;
                let scores = graph.scale(scores, scale)?;
                let attn = graph.softmax(scores, 1)?;
                outs.push(graph.matmul(attn, vh)?);
            }
            per_batch.push(if heads == 1 { outs[0] } else { graph.concat(&outs, 1)? });
        }
        let o = if batch == 1 { per_batch[0] } else { graph.concat(&per_batch, 0)? };
        Ok(graph.linear(o, w("o.w"), w("o.b"))?)
    }

    pub fn encode_observation(&self, obs: &NormalizedObservation) -> Result<ObservationTokens, DenoiserError> {
        let mut graph = Graph::new();
        let p = self.bind(&mut graph, false);
        let out = self.encode_graph(&mut graph, &p, &[obs])?;
        Ok(ObservationTokens(graph.value(out).clone()))
    }

    /// Clean-chunk estimate from a noisy chunk at step `n`.
    pub fn predict_clean_chunk(
        &self,
        noisy: &ActionChunk,
        n: usize,
        tokens: &ObservationTokens,
    ) -> Result<ActionChunk, DenoiserError> {
        if n >= self.config.n_diffusion_steps + 1 {
            return Err(DenoiserError::StepOutOfRange { n, steps: self.config.n_diffusion_steps + 1 });
        }
        let expect = [self.config.n_obs_tokens(), self.config.d_model];
        if tokens.0.shape() != expect {
            return Err(DenoiserError::ShapeMismatch(format!(
                "tokens {:?}, expected {expect:?}",
                tokens.0.shape()
            )));
        }
        let mut graph = Graph::new();
        let p = self.bind(&mut graph, false);
        let memory = graph.constant(tokens.0.clone());
        let out = self.decode_graph(&mut graph, &p, memory, &[noisy], &[n])?;
        let data = graph.value(out).data().to_vec();
        Ok(ActionChunk::from_vec(self.config.horizon, data).expect("decoder output shape"))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: toml::to_string(&self.config).expect("config serializes"),
            tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, DenoiserError> {
        let config: DenoiserConfig =
            toml::from_str(&ck.header).map_err(|e| DenoiserError::Config(e.to_string()))?;
        let mut model = Self::new(config)?;
        for (i, name) in model.names.clone().iter().enumerate() {
            let t = ck
                .get(name)
                .ok_or_else(|| DenoiserError::Config(format!("checkpoint missing tensor {name}")))?;
            if t.shape() != model.params[i].shape() {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    model.params[i].shape()
                )));
            }
            model.params[i] = t.clone();
        }
        Ok(model)
    }
}
