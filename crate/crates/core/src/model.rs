//! Compact pre-norm transformer encoder hosting prompt experts in its first
//! `L_p` blocks, and the growing linear classifier head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Tape, Var};
use crate::prefix_moe::{
    plain_head_on_tape, prefix_head_on_tape, proxy_scores_on_tape, sparse_head_on_tape,
    HeadNodes, HeadProjection, PromptBlock, PromptNodes, RoutingDecision,
};
use crate::routing::{adaptive_noise, select_experts, Mode, NoiseConfig};

/// Number of prompt experts activated per (sample, layer, head).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "KValue", into = "KValue")]
pub enum SelectK {
    Top(usize),
    /// Every expert selected, proxy scoring kept, no noise.
    Dense,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KValue {
    Count(usize),
    Word(String),
}

impl TryFrom<KValue> for SelectK {
    type Error = String;

    fn try_from(v: KValue) -> std::result::Result<Self, String> {
        match v {
            KValue::Count(k) => Ok(SelectK::Top(k)),
            KValue::Word(w) if w.eq_ignore_ascii_case("dense") => Ok(SelectK::Dense),
            KValue::Word(w) => Err(format!("select_k must be a count or \"dense\", got {:?}", w)),
        }
    }
}

impl From<SelectK> for KValue {
    fn from(k: SelectK) -> Self {
        match k {
            SelectK::Top(k) => KValue::Count(k),
            SelectK::Dense => KValue::Word("dense".into()),
        }
    }
}

/// How prompt experts are gated inside prompted blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptScoring {
    /// Plain prefix tuning: every token scores every prefix key.
    PerToken,
    /// One score per expert from the mean token, top-K routed.
    Proxy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Sequence length including the class token.
    pub tokens: usize,
    /// Width of each raw feature vector.
    pub raw_dim: usize,
    pub prompt_layers: usize,
    pub prompt_length: usize,
    pub select_k: SelectK,
    pub mlp_ratio: f64,
    pub scoring: PromptScoring,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            heads: 4,
            embed_dim: 64,
            tokens: 17,
            raw_dim: 8,
            prompt_layers: 2,
            prompt_length: 8,
            select_k: SelectK::Top(2),
            mlp_ratio: 2.0,
            scoring: PromptScoring::Proxy,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Number of experts each routing decision activates.
    pub fn active_experts(&self) -> usize {
        match self.select_k {
            SelectK::Top(k) => k,
            SelectK::Dense => self.prompt_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.heads == 0 || self.embed_dim == 0 || self.raw_dim == 0 {
            return bad("depth, heads, embed_dim and raw_dim must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.tokens < 2 {
            return bad("tokens must count the class token plus at least one feature".into());
        }
        if self.prompt_layers > self.depth {
            return bad(format!(
                "prompt_layers {} exceeds depth {}",
                self.prompt_layers, self.depth
            ));
        }
        if self.prompt_layers > 0 && self.prompt_length == 0 {
            return bad("prompt_length must be positive when prompts are enabled".into());
        }
        if let SelectK::Top(k) = self.select_k {
            if self.prompt_layers > 0 && (k == 0 || k > self.prompt_length) {
                return bad(format!(
                    "select_k {} outside [1, prompt_length = {}]",
                    k, self.prompt_length
                ));
            }
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad("mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    /// `d x d`; head `h` owns columns `h d_k .. (h+1) d_k`.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w_1: Matrix,
    pub b_1: Matrix,
    pub w_2: Matrix,
    pub b_2: Matrix,
}

impl Block {
    fn new(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Block {
            ln1_gamma: Matrix::filled(1, d, 1.0),
            ln1_beta: Matrix::zeros(1, d),
            w_q: rng.normal_matrix(d, d, s),
            w_k: rng.normal_matrix(d, d, s),
            w_v: rng.normal_matrix(d, d, s),
            w_o: rng.normal_matrix(d, d, s),
            b_o: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, 1.0),
            ln2_beta: Matrix::zeros(1, d),
            w_1: rng.normal_matrix(d, hidden, s),
            b_1: Matrix::zeros(1, hidden),
            w_2: rng.normal_matrix(hidden, d, 1.0 / (hidden as f64).sqrt()),
            b_2: Matrix::zeros(1, d),
        }
    }

    /// Slices of the fused projections belonging to one head.
    pub fn head_projection(&self, head: usize, dk: usize) -> Result<HeadProjection> {
        Ok(HeadProjection {
            w_q: self.w_q.column_slice(head * dk, dk)?,
            w_k: self.w_k.column_slice(head * dk, dk)?,
            w_v: self.w_v.column_slice(head * dk, dk)?,
        })
    }

    fn params(&self) -> [&Matrix; 13] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Matrix; 13] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }
}

const BLOCK_PARAM_NAMES: [&str; 13] = [
    "ln1_gamma", "ln1_beta", "w_q", "w_k", "w_v", "w_o", "b_o", "ln2_gamma", "ln2_beta", "w_1",
    "b_1", "w_2", "b_2",
];

/// Transformer weights. Trained once on a held-out problem, then frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    /// `raw_dim x d`
    pub embed_w: Matrix,
    pub embed_b: Matrix,
    /// `(N - 1) x d` positional offsets of the feature tokens.
    pub pos: Matrix,
    pub cls: Matrix,
    pub blocks: Vec<Block>,
    pub ln_f_gamma: Matrix,
    pub ln_f_beta: Matrix,
}

impl Backbone {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(Backbone {
            embed_w: rng.normal_matrix(cfg.raw_dim, d, 1.0 / (cfg.raw_dim as f64).sqrt()),
            embed_b: Matrix::zeros(1, d),
            pos: rng.normal_matrix(cfg.tokens - 1, d, 0.02),
            cls: rng.normal_matrix(1, d, 0.02),
            blocks: (0..cfg.depth)
                .map(|_| Block::new(d, cfg.hidden_dim(), rng))
                .collect(),
            ln_f_gamma: Matrix::filled(1, d, 1.0),
            ln_f_beta: Matrix::zeros(1, d),
        })
    }

    /// All weights in a fixed order, with checkpoint names.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("embed_w".to_string(), &self.embed_w),
            ("embed_b".to_string(), &self.embed_b),
            ("pos".to_string(), &self.pos),
            ("cls".to_string(), &self.cls),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, p) in BLOCK_PARAM_NAMES.iter().zip(b.params()) {
                out.push((format!("block{}.{}", l, name), p));
            }
        }
        out.push(("ln_f_gamma".to_string(), &self.ln_f_gamma));
        out.push(("ln_f_beta".to_string(), &self.ln_f_beta));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.pos,
            &mut self.cls,
        ];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.ln_f_gamma);
        out.push(&mut self.ln_f_beta);
        out
    }

    /// Row 0 is the class token, row `i` is `x_i W + b + pos_i`.
    pub fn embed(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut e = input.matmul(&self.embed_w)?;
        for i in 0..e.rows() {
            for ((v, b), p) in e
                .row_mut(i)
                .iter_mut()
                .zip(self.embed_b.row(0))
                .zip(self.pos.row(i))
            {
                *v += b + p;
            }
        }
        Matrix::concat_rows(&[&self.cls, &e])
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.rows() != self.pos.rows() || input.cols() != self.embed_w.rows() {
            return Err(Error::Dimension(format!(
                "input is {}x{}, expected {} feature vectors of width {}",
                input.rows(),
                input.cols(),
                self.pos.rows(),
                self.embed_w.rows()
            )));
        }
        Ok(())
    }
}

/// Linear classifier over every class seen so far; row `c` scores class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl ClassifierHead {
    pub fn new(embed_dim: usize) -> Self {
        ClassifierHead {
            weight: Matrix::zeros(0, embed_dim),
            bias: Matrix::zeros(1, 0),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    /// Appends zero-initialized rows until `total` classes are covered.
    pub fn grow_to(&mut self, total: usize) -> Result<()> {
        let have = self.classes();
        if total <= have {
            return Ok(());
        }
        let d = self.weight.cols();
        let extra = Matrix::zeros(total - have, d);
        self.weight = Matrix::concat_rows(&[&self.weight, &extra])?;
        self.bias = Matrix::concat_cols(&[&self.bias, &Matrix::zeros(1, total - have)])?;
        Ok(())
    }
}

/// Logits `W z + b` for a `1 x d` representation.
pub fn classify(head: &ClassifierHead, z: &Matrix) -> Result<Matrix> {
    if head.classes() == 0 {
        return Err(Error::Config("classifier head has no classes".into()));
    }
    z.matmul_nt(&head.weight)?.add(&head.bias)
}

pub fn classify_on_tape(tape: &mut Tape, weight: Var, bias: Var, z: Var) -> Result<Var> {
    let raw = tape.matmul_nt(z, weight)?;
    tape.add_row(raw, bias)
}

/// Frozen backbone plus the trainable prompts and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub prompts: Vec<PromptBlock>,
    pub head: ClassifierHead,
}

impl Model {
    pub fn new(config: ModelConfig, backbone: Backbone, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let prompts = (0..config.prompt_layers)
            .map(|_| PromptBlock::new(config.prompt_length, config.embed_dim, config.heads, rng))
            .collect();
        let head = ClassifierHead::new(config.embed_dim);
        Ok(Model {
            config,
            backbone,
            prompts,
            head,
        })
    }
}

/// Routing behaviour of one forward evaluation.
pub struct Router<'r> {
    pub mode: Mode,
    pub noise: NoiseConfig,
    pub rng: &'r mut Rng,
    /// Reuse these selections instead of routing afresh (one per prompted
    /// layer and head, in forward order).
    pub replay: Option<&'r [RoutingDecision]>,
}

/// Tape handles of every backbone weight.
pub struct BackboneNodes {
    pub embed_w: Var,
    pub embed_b: Var,
    pub pos: Var,
    pub cls: Var,
    pub blocks: Vec<[Var; 13]>,
    pub ln_f_gamma: Var,
    pub ln_f_beta: Var,
    /// Same order as [`Backbone::params_mut`].
    pub all: Vec<Var>,
}

impl BackboneNodes {
    pub fn record<'a>(tape: &mut Tape<'a>, backbone: &'a Backbone, needs_grad: bool) -> Self {
        let mut all = Vec::new();
        let mut leaf = |tape: &mut Tape<'a>, m: &'a Matrix| {
            let v = tape.leaf(m, needs_grad);
            all.push(v);
            v
        };
        let embed_w = leaf(tape, &backbone.embed_w);
        let embed_b = leaf(tape, &backbone.embed_b);
        let pos = leaf(tape, &backbone.pos);
        let cls = leaf(tape, &backbone.cls);
        let blocks = backbone
            .blocks
            .iter()
            .map(|b| b.params().map(|p| leaf(tape, p)))
            .collect();
        let ln_f_gamma = leaf(tape, &backbone.ln_f_gamma);
        let ln_f_beta = leaf(tape, &backbone.ln_f_beta);
        BackboneNodes {
            embed_w,
            embed_b,
            pos,
            cls,
            blocks,
            ln_f_gamma,
            ln_f_beta,
            all,
        }
    }
}

/// Tape handles of prefix keys and values, one pair per prompted layer.
pub struct PromptLeaves {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

impl PromptLeaves {
    pub fn record<'a>(tape: &mut Tape<'a>, prompts: &'a [PromptBlock], needs_grad: bool) -> Self {
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for p in prompts {
            keys.push(tape.leaf(&p.keys, needs_grad));
            values.push(tape.leaf(&p.values, needs_grad));
        }
        PromptLeaves { keys, values }
    }
}

/// What a forward evaluation leaves on the tape.
pub struct ForwardNodes {
    /// `1 x d` class-token representation.
    pub z: Var,
    /// Raw proxy scores per (prompted layer, head), `1 x N_p`, forward order.
    pub proxies: Vec<Var>,
    pub decisions: Vec<RoutingDecision>,
    /// Row-stochastic attention weights of every head, forward order.
    pub attention: Vec<Var>,
}

/// Records the full forward pass on `tape`.
///
/// `usage` supplies the frozen per-(layer, head) frequencies that gate the
/// adaptive noise.
pub fn forward_on_tape<'a>(
    tape: &mut Tape<'a>,
    model: &'a Model,
    bb: &BackboneNodes,
    prompts: &PromptLeaves,
    input: &'a Matrix,
    router: &mut Router,
) -> Result<ForwardNodes> {
    let cfg = &model.config;
    model.backbone.check_input(input)?;
    let d = cfg.embed_dim;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let xv = tape.leaf(input, false);
    let e = tape.matmul(xv, bb.embed_w)?;
    let e = tape.add_row(e, bb.embed_b)?;
    let e = tape.add(e, bb.pos)?;
    let mut h = tape.concat_rows(&[bb.cls, e])?;

    let mut proxies = Vec::new();
    let mut decisions = Vec::new();
    let mut attention = Vec::new();
    let mut replay_pos = 0;
    for (l, w) in bb.blocks.iter().enumerate() {
        let [ln1_g, ln1_b, w_q, w_k, w_v, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2] = *w;
        let hn = tape.layer_norm(h, ln1_g, ln1_b)?;
        let q = tape.matmul(hn, w_q)?;
        let k = tape.matmul(hn, w_k)?;
        let v = tape.matmul(hn, w_v)?;
        let prompted = l < cfg.prompt_layers;
        let mut prompt_proj = None;
        if prompted {
            let kp = tape.matmul(prompts.keys[l], w_k)?;
            let vp = tape.matmul(prompts.values[l], w_v)?;
            let mq = match cfg.scoring {
                PromptScoring::Proxy => {
                    let mean = tape.mean_rows(hn);
                    Some(tape.matmul(mean, w_q)?)
                }
                PromptScoring::PerToken => None,
            };
            prompt_proj = Some((kp, vp, mq));
        }
        let mut outputs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let nodes = HeadNodes {
                q: tape.slice_cols(q, hd * dk, dk)?,
                k: tape.slice_cols(k, hd * dk, dk)?,
                v: tape.slice_cols(v, hd * dk, dk)?,
            };
            let att = match prompt_proj {
                None => plain_head_on_tape(tape, nodes, scale)?,
                Some((kp, vp, mq)) => {
                    let kp_h = tape.slice_cols(kp, hd * dk, dk)?;
                    let vp_h = tape.slice_cols(vp, hd * dk, dk)?;
                    match mq {
                        None => prefix_head_on_tape(
                            tape,
                            nodes,
                            PromptNodes {
                                keys: kp_h,
                                values: vp_h,
                            },
                            scale,
                        )?,
                        Some(mq) => {
                            let mq_h = tape.slice_cols(mq, hd * dk, dk)?;
                            let s = proxy_scores_on_tape(tape, mq_h, kp_h, scale)?;
                            let decision = route(
                                model,
                                l,
                                hd,
                                tape.value(s).row(0),
                                router,
                                &mut replay_pos,
                            )?;
                            let att =
                                sparse_head_on_tape(tape, nodes, s, vp_h, &decision.selected, scale)?;
                            proxies.push(s);
                            decisions.push(decision);
                            att
                        }
                    }
                }
            };
            attention.push(att.weights);
            outputs.push(att.output);
        }
        let heads_out = tape.concat_cols(&outputs)?;
        let proj = tape.matmul(heads_out, w_o)?;
        let proj = tape.add_row(proj, b_o)?;
        h = tape.add(h, proj)?;
        let hn2 = tape.layer_norm(h, ln2_g, ln2_b)?;
        let m = tape.matmul(hn2, w_1)?;
        let m = tape.add_row(m, b_1)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, w_2)?;
        let m = tape.add_row(m, b_2)?;
        h = tape.add(h, m)?;
    }
    let out = tape.layer_norm(h, bb.ln_f_gamma, bb.ln_f_beta)?;
    let z = tape.row(out, 0)?;
    debug_assert_eq!(tape.value(z).cols(), d);
    Ok(ForwardNodes {
        z,
        proxies,
        decisions,
        attention,
    })
}

fn route(
    model: &Model,
    layer: usize,
    head: usize,
    scores: &[f64],
    router: &mut Router,
    replay_pos: &mut usize,
) -> Result<RoutingDecision> {
    let np = scores.len();
    if let Some(replay) = router.replay {
        let prev = replay.get(*replay_pos).ok_or_else(|| {
            Error::Config("replayed routing has fewer decisions than prompted heads".into())
        })?;
        *replay_pos += 1;
        if prev.layer != layer || prev.head != head {
            return Err(Error::Config(format!(
                "replayed decision for ({}, {}) used at ({}, {})",
                prev.layer, prev.head, layer, head
            )));
        }
        return Ok(RoutingDecision {
            layer,
            head,
            proxies: scores.to_vec(),
            noise: prev.noise.clone(),
            selected: prev.selected.clone(),
        });
    }
    let (noise, selected) = match model.config.select_k {
        SelectK::Dense => (vec![0.0; np], (0..np).collect()),
        SelectK::Top(k) => {
            let freqs = model.prompts[layer].frequencies(head);
            let noise = adaptive_noise(scores, &freqs, &router.noise, router.mode, router.rng)?;
            let selected = select_experts(scores, &noise, k)?;
            (noise, selected)
        }
    };
    Ok(RoutingDecision {
        layer,
        head,
        proxies: scores.to_vec(),
        noise,
        selected,
    })
}

/// Result of a forward evaluation outside of training.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub z: Matrix,
    pub decisions: Vec<RoutingDecision>,
}

/// Evaluates `z` and the routing decisions without keeping the tape.
pub fn forward(model: &Model, input: &Matrix, router: &mut Router) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bb = BackboneNodes::record(&mut tape, &model.backbone, false);
    let pl = PromptLeaves::record(&mut tape, &model.prompts, false);
    let f = forward_on_tape(&mut tape, model, &bb, &pl, input, router)?;
    let z = tape.value(f.z).clone();
    z.check_finite("representation")?;
    Ok(ForwardOutput {
        z,
        decisions: f.decisions,
    })
}

/// Eval-mode forward (no noise).
pub fn represent(model: &Model, input: &Matrix) -> Result<ForwardOutput> {
    let mut rng = Rng::new(0);
    let mut router = Router {
        mode: Mode::Eval,
        noise: NoiseConfig::off(),
        rng: &mut rng,
        replay: None,
    };
    forward(model, input, &mut router)
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   magic "SMOPECK1"
//   u64 length + UTF-8 JSON of ModelConfig
//   u64 array count, then per array:
//     u64 name length + UTF-8 name, u64 rows, u64 cols, rows*cols f64
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"SMOPECK1";

fn named_arrays(model: &Model) -> Vec<(String, Matrix)> {
    let mut out: Vec<(String, Matrix)> = model
        .backbone
        .named_params()
        .into_iter()
        .map(|(n, m)| (format!("backbone.{}", n), m.clone()))
        .collect();
    for (l, p) in model.prompts.iter().enumerate() {
        out.push((format!("prompt{}.keys", l), p.keys.clone()));
        out.push((format!("prompt{}.values", l), p.values.clone()));
        let np = p.prompt_length();
        let mut counts = Matrix::zeros(p.usage.len(), np + 1);
        for (h, u) in p.usage.iter().enumerate() {
            for j in 0..np {
                counts.set(h, j, u.selected[j] as f64);
            }
            counts.set(h, np, u.instances as f64);
        }
        out.push((format!("prompt{}.usage", l), counts));
    }
    out.push(("head.weight".into(), model.head.weight.clone()));
    out.push(("head.bias".into(), model.head.bias.clone()));
    out
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    let cfg = serde_json::to_vec(&model.config)?;
    write_u64(&mut w, cfg.len() as u64)?;
    w.write_all(&cfg)?;
    let arrays = named_arrays(model);
    write_u64(&mut w, arrays.len() as u64)?;
    for (name, m) in arrays {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(&mut w, m.rows() as u64)?;
        write_u64(&mut w, m.cols() as u64)?;
        for v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let len = read_u64(&mut r)? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)?;
    // a fresh model supplies names and shapes; every array is then overwritten
    let mut rng = Rng::new(0);
    let backbone = Backbone::new(&config, &mut rng)?;
    let mut model = Model::new(config, backbone, &mut rng)?;
    let count = read_u64(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let n = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        arrays.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    let take = |name: &str, arrays: &mut Vec<(String, Matrix)>| -> Result<Matrix> {
        let pos = arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks array {}", name)))?;
        Ok(arrays.remove(pos).1)
    };
    let names: Vec<String> = model
        .backbone
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for (name, slot) in names.iter().zip(model.backbone.params_mut()) {
        let m = take(&format!("backbone.{}", name), &mut arrays)?;
        if m.shape() != slot.shape() {
            return Err(Error::Format(format!("array {} has wrong shape", name)));
        }
        *slot = m;
    }
    for (l, p) in model.prompts.iter_mut().enumerate() {
        p.keys = take(&format!("prompt{}.keys", l), &mut arrays)?;
        p.values = take(&format!("prompt{}.values", l), &mut arrays)?;
        let counts = take(&format!("prompt{}.usage", l), &mut arrays)?;
        let np = p.prompt_length();
        if counts.shape() != (p.usage.len(), np + 1) {
            return Err(Error::Format(format!("prompt{}.usage has wrong shape", l)));
        }
        for (h, u) in p.usage.iter_mut().enumerate() {
            for j in 0..np {
                u.selected[j] = counts.get(h, j) as u64;
            }
            u.instances = counts.get(h, np) as u64;
        }
    }
    model.head.weight = take("head.weight", &mut arrays)?;
    model.head.bias = take("head.bias", &mut arrays)?;
    if let Some((name, _)) = arrays.first() {
        return Err(Error::Format(format!("unexpected array {}", name)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
