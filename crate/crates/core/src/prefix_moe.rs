//! Prefix-tuned attention viewed as a mixture of experts.
//!
//! Each head holds `N` frozen experts (one per token value) and `N_p` prompt
//! experts (one per prefix value row). Prompt experts are gated either per
//! token (plain prefix tuning) or by one proxy score per expert computed
//! from the averaged token, in which case only a top-K subset enters the
//! softmax normalizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_masked, Matrix, Rng, Tape, Var};

/// Per-head slices of the frozen projections: `d x d_k` each.
#[derive(Clone, Debug)]
pub struct HeadProjection {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl HeadProjection {
    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_q.rows()
    }

    fn score_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn random(d: usize, dk: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        HeadProjection {
            w_q: rng.normal_matrix(d, dk, std),
            w_k: rng.normal_matrix(d, dk, std),
            w_v: rng.normal_matrix(d, dk, std),
        }
    }
}

/// Activation counts for one (layer, head).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertUsage {
    pub selected: Vec<u64>,
    pub instances: u64,
}

impl ExpertUsage {
    pub fn new(experts: usize) -> Self {
        ExpertUsage {
            selected: vec![0; experts],
            instances: 0,
        }
    }

    /// Lifetime proportion of instances on which each expert was selected.
    pub fn frequencies(&self) -> Vec<f64> {
        if self.instances == 0 {
            return vec![0.0; self.selected.len()];
        }
        self.selected
            .iter()
            .map(|&c| c as f64 / self.instances as f64)
            .collect()
    }
}

/// Prefix keys and values of one prompted layer, shared by its heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBlock {
    /// `N_p x d`, rows are prefix keys.
    pub keys: Matrix,
    /// `N_p x d`, rows are prefix values.
    pub values: Matrix,
    /// One entry per head.
    pub usage: Vec<ExpertUsage>,
}

impl PromptBlock {
    /// Uniform initialization on `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn new(prompt_length: usize, embed_dim: usize, heads: usize, rng: &mut Rng) -> Self {
        let a = 1.0 / (embed_dim as f64).sqrt();
        PromptBlock {
            keys: rng.uniform_matrix(prompt_length, embed_dim, -a, a),
            values: rng.uniform_matrix(prompt_length, embed_dim, -a, a),
            usage: (0..heads).map(|_| ExpertUsage::new(prompt_length)).collect(),
        }
    }

    pub fn prompt_length(&self) -> usize {
        self.keys.rows()
    }

    pub fn frequencies(&self, head: usize) -> Vec<f64> {
        self.usage[head].frequencies()
    }

    /// Frequencies averaged over heads; keys are layer-level, usage is head-level.
    pub fn head_averaged_frequencies(&self) -> Vec<f64> {
        let np = self.prompt_length();
        let mut avg = vec![0.0; np];
        for u in &self.usage {
            for (a, f) in avg.iter_mut().zip(u.frequencies()) {
                *a += f;
            }
        }
        let h = self.usage.len().max(1) as f64;
        avg.iter_mut().for_each(|a| *a /= h);
        avg
    }
}

/// Routing outcome for one (sample, layer, head).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub layer: usize,
    pub head: usize,
    /// Raw proxy scores, before noise.
    pub proxies: Vec<f64>,
    pub noise: Vec<f64>,
    /// Ascending expert indices.
    pub selected: Vec<usize>,
}

/// Multiply-accumulate counters for prompt-score computation.
///
/// Key projection `P^K W_K` depends only on parameters, not on the sample,
/// so it is tracked separately from the per-sample work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub query_macs: u64,
    pub scoring_macs: u64,
    pub key_projection_macs: u64,
    pub additions: u64,
}

impl MacCounter {
    pub fn per_sample_macs(&self) -> u64 {
        self.query_macs + self.scoring_macs
    }
}

fn check_inputs(x: &Matrix, keys: &Matrix, head: &HeadProjection) -> Result<()> {
    let d = head.embed_dim();
    if x.cols() != d || keys.cols() != d {
        return Err(Error::Dimension(format!(
            "tokens have {} columns and prefix keys {}, projections expect {}",
            x.cols(),
            keys.cols(),
            d
        )));
    }
    if x.rows() == 0 {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    Ok(())
}

fn project_counted(a: &Matrix, w: &Matrix, macs: &mut u64) -> Result<Matrix> {
    *macs += (a.rows() * a.cols() * w.cols()) as u64;
    a.matmul(w)
}

/// `s_{i,N+j} = x_i^T W_Q W_K^T p^K_j / sqrt(d_k)` for every token and expert.
pub fn per_token_prompt_scores(
    x: &Matrix,
    keys: &Matrix,
    head: &HeadProjection,
    counter: Option<&mut MacCounter>,
) -> Result<Matrix> {
    check_inputs(x, keys, head)?;
    let mut c = MacCounter::default();
    let q = project_counted(x, &head.w_q, &mut c.query_macs)?;
    let kp = project_counted(keys, &head.w_k, &mut c.key_projection_macs)?;
    c.scoring_macs += (q.rows() * kp.rows() * q.cols()) as u64;
    let scores = q.matmul_nt(&kp)?.scale(head.score_scale());
    if let Some(out) = counter {
        out.query_macs += c.query_macs;
        out.scoring_macs += c.scoring_macs;
        out.key_projection_macs += c.key_projection_macs;
        out.additions += c.additions;
    }
    Ok(scores)
}

/// One score per prompt expert from the mean token:
/// `s~_j = x~^T W_Q W_K^T p^K_j / sqrt(d_k)`.
///
/// The tokens are summed, projected once, then scaled by `1/N`, so the
/// per-sample cost does not grow with the number of prompt-score rows.
pub fn proxy_scores(
    x: &Matrix,
    keys: &Matrix,
    head: &HeadProjection,
    counter: Option<&mut MacCounter>,
) -> Result<Vec<f64>> {
    check_inputs(x, keys, head)?;
    let mut c = MacCounter::default();
    let n = x.rows();
    let mut summed = Matrix::zeros(1, x.cols());
    for i in 0..n {
        for (s, v) in summed.row_mut(0).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    c.additions += (n * x.cols()) as u64;
    let mut q = project_counted(&summed, &head.w_q, &mut c.query_macs)?;
    q.scale_in_place(1.0 / n as f64);
    c.query_macs += q.cols() as u64;
    let kp = project_counted(keys, &head.w_k, &mut c.key_projection_macs)?;
    c.scoring_macs += (kp.rows() * q.cols()) as u64;
    let scale = head.score_scale();
    let scores = (0..kp.rows())
        .map(|j| dot(q.row(0), kp.row(j)) * scale)
        .collect();
    if let Some(out) = counter {
        out.query_macs += c.query_macs;
        out.scoring_macs += c.scoring_macs;
        out.key_projection_macs += c.key_projection_macs;
        out.additions += c.additions;
    }
    Ok(scores)
}

fn validate_selection(selected: &[usize], experts: usize) -> Result<()> {
    if selected.is_empty() {
        return Err(Error::Config("selected expert set is empty".into()));
    }
    for w in selected.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Config(format!(
                "selected experts must be strictly ascending, got {:?}",
                selected
            )));
        }
    }
    if let Some(&bad) = selected.iter().find(|&&j| j >= experts) {
        return Err(Error::OutOfRange(format!(
            "expert {} of {} prompt experts",
            bad, experts
        )));
    }
    Ok(())
}

/// Tape nodes of one head, all already projected to `d_k` columns.
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    /// `N x d_k`
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Tape nodes of the prefix experts of one head.
#[derive(Clone, Copy, Debug)]
pub struct PromptNodes {
    /// `N_p x d_k` projected prefix keys.
    pub keys: Var,
    /// `N_p x d_k` projected prefix values.
    pub values: Var,
}

/// Result of building one head's attention on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadAttention {
    /// Pre-softmax logits, prompt columns first.
    pub logits: Var,
    /// Row-stochastic attention weights.
    pub weights: Var,
    /// `N x d_k` head output.
    pub output: Var,
}

fn pretrained_logits(tape: &mut Tape, head: HeadNodes, scale: f64) -> Result<Var> {
    let raw = tape.matmul_nt(head.q, head.k)?;
    Ok(tape.scale(raw, scale))
}

/// Proxy scores on the tape from the projected mean query `1 x d_k`.
pub fn proxy_scores_on_tape(tape: &mut Tape, mean_query: Var, prompt_keys: Var, scale: f64) -> Result<Var> {
    let raw = tape.matmul_nt(mean_query, prompt_keys)?;
    Ok(tape.scale(raw, scale))
}

/// Sparse prompt-expert attention: selected proxy scores are row-expanded in
/// front of the standard query-key logits and one softmax runs over all
/// `K + N` columns, so unselected experts never enter the normalizer.
pub fn sparse_head_on_tape(
    tape: &mut Tape,
    head: HeadNodes,
    proxies: Var,
    prompt_values: Var,
    selected: &[usize],
    scale: f64,
) -> Result<HeadAttention> {
    let experts = tape.value(proxies).cols();
    validate_selection(selected, experts)?;
    let n = tape.value(head.q).rows();
    let pre = pretrained_logits(tape, head, scale)?;
    let chosen = tape.select_cols(proxies, selected)?;
    let prompt = tape.expand_rows(chosen, n)?;
    let logits = tape.concat_cols(&[prompt, pre])?;
    let weights = tape.softmax_rows(logits)?;
    let expert_values = tape.select_rows(prompt_values, selected)?;
    let values = tape.concat_rows(&[expert_values, head.v])?;
    let output = tape.matmul(weights, values)?;
    Ok(HeadAttention {
        logits,
        weights,
        output,
    })
}

/// Plain prefix tuning: every token scores every prefix key.
pub fn prefix_head_on_tape(
    tape: &mut Tape,
    head: HeadNodes,
    prompt: PromptNodes,
    scale: f64,
) -> Result<HeadAttention> {
    let pre = pretrained_logits(tape, head, scale)?;
    let raw = tape.matmul_nt(head.q, prompt.keys)?;
    let prompt_logits = tape.scale(raw, scale);
    let logits = tape.concat_cols(&[prompt_logits, pre])?;
    let weights = tape.softmax_rows(logits)?;
    let values = tape.concat_rows(&[prompt.values, head.v])?;
    let output = tape.matmul(weights, values)?;
    Ok(HeadAttention {
        logits,
        weights,
        output,
    })
}

/// Self-attention without prompts.
pub fn plain_head_on_tape(tape: &mut Tape, head: HeadNodes, scale: f64) -> Result<HeadAttention> {
    let logits = pretrained_logits(tape, head, scale)?;
    let weights = tape.softmax_rows(logits)?;
    let output = tape.matmul(weights, head.v)?;
    Ok(HeadAttention {
        logits,
        weights,
        output,
    })
}

struct StandaloneHead<'a> {
    tape: Tape<'a>,
    nodes: HeadNodes,
    proxies: Var,
    prompt_values: Var,
    scale: f64,
}

fn standalone_head<'a>(
    x: &'a Matrix,
    keys: &'a Matrix,
    values: &'a Matrix,
    head: &'a HeadProjection,
) -> Result<StandaloneHead<'a>> {
    check_inputs(x, keys, head)?;
    if values.shape() != keys.shape() {
        return Err(Error::Dimension("prefix keys and values differ in shape".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let wq = tape.leaf(&head.w_q, false);
    let wk = tape.leaf(&head.w_k, false);
    let wv = tape.leaf(&head.w_v, false);
    let pk = tape.leaf(keys, false);
    let pv = tape.leaf(values, false);
    let q = tape.matmul(xv, wq)?;
    let k = tape.matmul(xv, wk)?;
    let v = tape.matmul(xv, wv)?;
    let mean = tape.mean_rows(xv);
    let mean_q = tape.matmul(mean, wq)?;
    let kp = tape.matmul(pk, wk)?;
    let vp = tape.matmul(pv, wv)?;
    let scale = head.score_scale();
    let proxies = proxy_scores_on_tape(&mut tape, mean_q, kp, scale)?;
    Ok(StandaloneHead {
        tape,
        nodes: HeadNodes { q, k, v },
        proxies,
        prompt_values: vp,
        scale,
    })
}

/// `Ã = [TopK(s~).expand(N), Q K^T / sqrt(d_k)]`, shape `N x (K + N)`.
pub fn assemble_attention(
    x: &Matrix,
    keys: &Matrix,
    selected: &[usize],
    head: &HeadProjection,
) -> Result<Matrix> {
    let values = Matrix::zeros(keys.rows(), keys.cols());
    let mut h = standalone_head(x, keys, &values, head)?;
    let att = sparse_head_on_tape(&mut h.tape, h.nodes, h.proxies, h.prompt_values, selected, h.scale)?;
    Ok(h.tape.value(att.logits).clone())
}

/// Training-path head output for a fixed selection (same tape code the model uses).
pub fn smope_head_output(
    x: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    selected: &[usize],
    head: &HeadProjection,
) -> Result<Matrix> {
    let mut h = standalone_head(x, keys, values, head)?;
    let att = sparse_head_on_tape(&mut h.tape, h.nodes, h.proxies, h.prompt_values, selected, h.scale)?;
    Ok(h.tape.value(att.output).clone())
}

/// Row-stochastic attention weights of the training path.
pub fn smope_attention_weights(
    x: &Matrix,
    keys: &Matrix,
    selected: &[usize],
    head: &HeadProjection,
) -> Result<Matrix> {
    let values = Matrix::zeros(keys.rows(), keys.cols());
    let mut h = standalone_head(x, keys, &values, head)?;
    let att = sparse_head_on_tape(&mut h.tape, h.nodes, h.proxies, h.prompt_values, selected, h.scale)?;
    Ok(h.tape.value(att.weights).clone())
}

// ---------------------------------------------------------------------------
// Reference evaluations. Literal loops, used as test oracles only.
// ---------------------------------------------------------------------------

fn bilinear(a: &[f64], head: &HeadProjection, b: &[f64]) -> f64 {
    // a^T W_Q W_K^T b / sqrt(d_k), one coordinate of the head space at a time
    let d = head.embed_dim();
    let dk = head.head_dim();
    let mut total = 0.0;
    for c in 0..dk {
        let mut qa = 0.0;
        let mut kb = 0.0;
        for r in 0..d {
            qa += a[r] * head.w_q.get(r, c);
            kb += b[r] * head.w_k.get(r, c);
        }
        total += qa * kb;
    }
    total / (dk as f64).sqrt()
}

fn value_expert(x: &[f64], head: &HeadProjection) -> Vec<f64> {
    let d = head.embed_dim();
    (0..head.head_dim())
        .map(|c| (0..d).map(|r| x[r] * head.w_v.get(r, c)).sum())
        .collect()
}

/// Direct per-token evaluation of the sparse mixture:
/// `h_i = Σ_j w_ij W_V^T x_j + Σ_{j'∈K} w_ij' W_V^T p^V_j'`, where the
/// proxy score of each expert is the mean of its per-token scores and the
/// normalizer covers pre-trained experts plus selected prompt experts only.
pub fn smope_head_output_reference(
    x: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    selected: &[usize],
    head: &HeadProjection,
) -> Result<Matrix> {
    check_inputs(x, keys, head)?;
    let n = x.rows();
    let np = keys.rows();
    validate_selection(selected, np)?;
    let mut proxy = vec![0.0; np];
    for (j, p) in proxy.iter_mut().enumerate() {
        for i in 0..n {
            *p += bilinear(x.row(i), head, keys.row(j));
        }
        *p /= n as f64;
    }
    let mut mask = vec![true; n + np];
    for j in 0..np {
        mask[n + j] = selected.contains(&j);
    }
    let experts: Vec<Vec<f64>> = (0..n)
        .map(|j| value_expert(x.row(j), head))
        .chain((0..np).map(|j| value_expert(values.row(j), head)))
        .collect();
    let mut out = Matrix::zeros(n, head.head_dim());
    for i in 0..n {
        let mut logits = Vec::with_capacity(n + np);
        for j in 0..n {
            logits.push(bilinear(x.row(i), head, x.row(j)));
        }
        logits.extend_from_slice(&proxy);
        let gates = softmax_masked(&logits, &mask)?;
        for (g, f) in gates.iter().zip(&experts) {
            for (o, fv) in out.row_mut(i).iter_mut().zip(f) {
                *o += g * fv;
            }
        }
    }
    Ok(out)
}

/// Standard prefix-tuned attention: `softmax(Q [P^K;X]W_K^T / sqrt(d_k)) [P^V;X]W_V`.
pub fn prefix_attention_reference(
    x: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    head: &HeadProjection,
) -> Result<Matrix> {
    let d = head.embed_dim();
    if x.cols() != d || keys.cols() != d || values.shape() != keys.shape() {
        return Err(Error::Dimension("prefix attention shapes".into()));
    }
    let all_keys = Matrix::concat_rows(&[keys, x])?;
    let all_values = Matrix::concat_rows(&[values, x])?;
    let q = x.matmul(&head.w_q)?;
    let k = all_keys.matmul(&head.w_k)?;
    let v = all_values.matmul(&head.w_v)?;
    let logits = q.matmul_nt(&k)?.scale(head.score_scale());
    let mut weights = Matrix::zeros(logits.rows(), logits.cols());
    let mask = vec![true; logits.cols()];
    for i in 0..logits.rows() {
        weights
            .row_mut(i)
            .copy_from_slice(&softmax_masked(logits.row(i), &mask)?);
    }
    weights.matmul(&v)
}

/// Self-attention head with no prompts.
pub fn msa_head_reference(x: &Matrix, head: &HeadProjection) -> Result<Matrix> {
    let empty = Matrix::zeros(0, head.embed_dim());
    prefix_attention_reference(x, &empty, &empty, head)
}

/// Prefix attention with per-token scores, evaluated as the mixture of experts
/// over all `N + N_p` experts (no aggregation, no sparsity).
pub fn per_token_moe_reference(
    x: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    head: &HeadProjection,
) -> Result<Matrix> {
    check_inputs(x, keys, head)?;
    let n = x.rows();
    let np = keys.rows();
    let experts: Vec<Vec<f64>> = (0..n)
        .map(|j| value_expert(x.row(j), head))
        .chain((0..np).map(|j| value_expert(values.row(j), head)))
        .collect();
    let mask = vec![true; n + np];
    let mut out = Matrix::zeros(n, head.head_dim());
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| bilinear(x.row(i), head, x.row(j)))
            .chain((0..np).map(|j| bilinear(x.row(i), head, keys.row(j))))
            .collect();
        let gates = softmax_masked(&logits, &mask)?;
        for (g, f) in gates.iter().zip(&experts) {
            for (o, fv) in out.row_mut(i).iter_mut().zip(f) {
                *o += g * fv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize, d: usize, dk: usize, np: usize, seed: u64) -> (Matrix, Matrix, Matrix, HeadProjection) {
        let mut rng = Rng::new(seed);
        let x = rng.normal_matrix(n, d, 1.0);
        let keys = rng.normal_matrix(np, d, 1.0);
        let values = rng.normal_matrix(np, d, 1.0);
        let head = HeadProjection::random(d, dk, &mut rng);
        (x, keys, values, head)
    }

    #[test]
    fn zero_keys_give_zero_scores() {
        let (x, keys, _, head) = setup(3, 4, 2, 2, 1);
        let zero = Matrix::zeros(keys.rows(), keys.cols());
        let s = per_token_prompt_scores(&x, &zero, &head, None).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_tokens_give_constant_columns() {
        let (x, keys, _, head) = setup(1, 4, 2, 3, 2);
        let rows = vec![x.row(0).to_vec(); 5];
        let xs = Matrix::from_rows(&rows).unwrap();
        let s = per_token_prompt_scores(&xs, &keys, &head, None).unwrap();
        for j in 0..3 {
            for i in 1..5 {
                assert_eq!(s.get(i, j), s.get(0, j));
            }
        }
        let p = proxy_scores(&xs, &keys, &head, None).unwrap();
        for j in 0..3 {
            assert!((p[j] - s.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn per_token_scores_match_loops() {
        let (x, keys, _, head) = setup(3, 4, 4, 2, 3);
        let s = per_token_prompt_scores(&x, &keys, &head, None).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let r = bilinear(x.row(i), &head, keys.row(j));
                assert!((s.get(i, j) - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn proxy_of_zero_tokens_is_zero() {
        let (_, keys, _, head) = setup(3, 4, 2, 3, 4);
        let p = proxy_scores(&Matrix::zeros(3, 4), &keys, &head, None).unwrap();
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_selection_shape_and_constant_prompt_columns() {
        let (x, keys, _, head) = setup(5, 8, 4, 3, 5);
        let a = assemble_attention(&x, &keys, &[0, 1, 2], &head).unwrap();
        assert_eq!(a.shape(), (5, 8));
        for j in 0..3 {
            for i in 1..5 {
                assert_eq!(a.get(i, j), a.get(0, j));
            }
        }
    }

    #[test]
    fn single_token_prompt_logits_equal_per_token_scores() {
        let (x, keys, _, head) = setup(1, 6, 3, 4, 6);
        let a = assemble_attention(&x, &keys, &[0, 1, 2, 3], &head).unwrap();
        let s = per_token_prompt_scores(&x, &keys, &head, None).unwrap();
        for j in 0..4 {
            assert!((a.get(0, j) - s.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_selection_is_rejected() {
        let (x, keys, _, head) = setup(3, 4, 2, 3, 7);
        assert!(matches!(
            assemble_attention(&x, &keys, &[0, 3], &head),
            Err(Error::OutOfRange(_))
        ));
        assert!(assemble_attention(&x, &keys, &[], &head).is_err());
        assert!(assemble_attention(&x, &keys, &[1, 1], &head).is_err());
    }

    #[test]
    fn training_path_matches_reference() {
        for seed in 0..20 {
            let (x, keys, values, head) = setup(4, 6, 3, 4, 100 + seed);
            for sel in [vec![2], vec![0, 3], vec![0, 1, 2, 3]] {
                let a = smope_head_output(&x, &keys, &values, &sel, &head).unwrap();
                let b = smope_head_output_reference(&x, &keys, &values, &sel, &head).unwrap();
                assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
            }
        }
    }

    #[test]
    fn strongly_negative_prompts_recover_plain_attention() {
        let (x, keys, values, head) = setup(4, 6, 3, 2, 8);
        // push every proxy score far below the token scores
        let mean = x.mean_rows();
        let q = mean.matmul(&head.w_q).unwrap();
        let dir = q.matmul_nt(&head.w_k).unwrap();
        let norm = dir.frobenius_norm();
        let mut far = Matrix::zeros(2, 6);
        for j in 0..2 {
            for c in 0..6 {
                far.set(j, c, -1e3 * dir.get(0, c) / norm);
            }
        }
        let far = far.add(&keys.scale(0.0)).unwrap();
        let out = smope_head_output_reference(&x, &far, &values, &[0, 1], &head).unwrap();
        let plain = msa_head_reference(&x, &head).unwrap();
        assert!(out.max_abs_diff(&plain).unwrap() < 1e-6);
    }

    #[test]
    fn zero_prompt_values_scale_plain_output_by_pretrained_share() {
        let (x, keys, _, head) = setup(3, 4, 2, 3, 9);
        let zero = Matrix::zeros(3, 4);
        let sel = [0, 2];
        let out = smope_head_output_reference(&x, &keys, &zero, &sel, &head).unwrap();
        let plain = msa_head_reference(&x, &head).unwrap();
        let proxies = proxy_scores(&x, &keys, &head, None).unwrap();
        let scores = per_token_prompt_scores(&x, &x, &head, None).unwrap();
        for i in 0..3 {
            let pre: f64 = (0..3).map(|j| scores.get(i, j).exp()).sum();
            let prompt: f64 = sel.iter().map(|&j| proxies[j].exp()).sum();
            let share = pre / (pre + prompt);
            for c in 0..2 {
                assert!((out.get(i, c) - share * plain.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_two_expert_mixture_by_hand() {
        // d = d_k = 1, one token x, one prompt expert
        let head = HeadProjection {
            w_q: Matrix::scalar(0.5),
            w_k: Matrix::scalar(2.0),
            w_v: Matrix::scalar(3.0),
        };
        let x = Matrix::scalar(0.7);
        let keys = Matrix::scalar(-1.2);
        let values = Matrix::scalar(0.4);
        let s_pre: f64 = 0.7 * 0.5 * 2.0 * 0.7;
        let s_prompt: f64 = 0.7 * 0.5 * 2.0 * -1.2;
        let w = s_pre.exp() / (s_pre.exp() + s_prompt.exp());
        let expected = w * 3.0 * 0.7 + (1.0 - w) * 3.0 * 0.4;
        let out = smope_head_output_reference(&x, &keys, &values, &[0], &head).unwrap();
        assert!((out.item() - expected).abs() < 1e-15);
        let path = smope_head_output(&x, &keys, &values, &[0], &head).unwrap();
        assert!((path.item() - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_prefix_is_plain_attention() {
        let (x, _, _, head) = setup(4, 6, 3, 1, 10);
        let empty = Matrix::zeros(0, 6);
        let a = prefix_attention_reference(&x, &empty, &empty, &head).unwrap();
        let q = x.matmul(&head.w_q).unwrap();
        let k = x.matmul(&head.w_k).unwrap();
        let v = x.matmul(&head.w_v).unwrap();
        let logits = q.matmul_nt(&k).unwrap().scale(1.0 / 3f64.sqrt());
        for i in 0..4 {
            let w = crate::numerics::softmax(logits.row(i));
            for c in 0..3 {
                let e: f64 = (0..4).map(|j| w[j] * v.get(j, c)).sum();
                assert!((a.get(i, c) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prefix_attention_is_the_per_token_mixture() {
        let (x, keys, values, head) = setup(5, 6, 3, 4, 11);
        let a = prefix_attention_reference(&x, &keys, &values, &head).unwrap();
        let b = per_token_moe_reference(&x, &keys, &values, &head).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn coincident_tokens_make_aggregation_exact() {
        let (x, keys, values, head) = setup(1, 6, 3, 4, 12);
        let rows = vec![x.row(0).to_vec(); 4];
        let xs = Matrix::from_rows(&rows).unwrap();
        let a = prefix_attention_reference(&xs, &keys, &values, &head).unwrap();
        let b = smope_head_output(&xs, &keys, &values, &[0, 1, 2, 3], &head).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (x, keys, _, head) = setup(6, 8, 4, 5, 13);
        let w = smope_attention_weights(&x, &keys, &[1, 4], &head).unwrap();
        for i in 0..w.rows() {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frequencies_follow_counts() {
        let mut u = ExpertUsage::new(4);
        assert_eq!(u.frequencies(), vec![0.0; 4]);
        u.selected = vec![2, 0, 1, 1];
        u.instances = 2;
        assert_eq!(u.frequencies(), vec![1.0, 0.0, 0.5, 0.5]);
    }
}
