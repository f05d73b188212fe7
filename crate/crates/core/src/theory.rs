//! Regression simulator for a softmax mixture of frozen pre-trained experts and
//! learnable prompt experts: literal evaluation, least-squares fitting, the
//! Voronoi loss between mixing measures and the empirical estimation-rate study.
//!
//! Prompt atom `j` gates with `beta1_j^T W^T X + beta0_j` through the shared frozen
//! matrix `W`; pre-trained expert `k` gates with `X^T B_k X + c_k`. Every expert is
//! `phi(a^T X + b)`.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, cholesky_solve, gelu, gelu_grad, gelu_second, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(z),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(z),
            Activation::Identity => 1.0,
        }
    }

    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_second(z),
            Activation::Identity => 0.0,
        }
    }

    fn nth_derivative(self, order: usize, z: f64) -> f64 {
        match order {
            0 => self.value(z),
            1 => self.derivative(z),
            2 => self.second_derivative(z),
            _ => unreachable!("only derivatives up to order 2 are used"),
        }
    }
}

/// `eta = (a, b)` of the expert `phi(a^T X + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub a: Vec<f64>,
    pub b: f64,
}

impl ExpertParams {
    fn pre_activation(&self, x: &[f64]) -> f64 {
        self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + self.b
    }

    pub fn eval(&self, activation: Activation, x: &[f64]) -> f64 {
        activation.value(self.pre_activation(x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAtom {
    pub beta0: f64,
    pub beta1: Vec<f64>,
    pub expert: ExpertParams,
}

impl PromptAtom {
    /// `omega = (beta1, a, b)`, the location used for Voronoi assignment.
    fn location(&self) -> Vec<f64> {
        let mut v = self.beta1.clone();
        v.extend_from_slice(&self.expert.a);
        v.push(self.expert.b);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasure {
    pub atoms: Vec<PromptAtom>,
    /// `input_dim x gate_dim`, shared by all atoms and never fitted.
    pub gate: Matrix,
    pub activation: Activation,
}

impl MixingMeasure {
    pub fn input_dim(&self) -> usize {
        self.gate.rows()
    }

    pub fn gate_dim(&self) -> usize {
        self.gate.cols()
    }

    /// Free parameters per atom: `beta0`, `beta1`, `a`, `b`.
    fn atom_width(&self) -> usize {
        2 + self.gate_dim() + self.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, r) = self.gate.shape();
        for (i, atom) in self.atoms.iter().enumerate() {
            if atom.beta1.len() != r || atom.expert.a.len() != d {
                return Err(Error::Dimension(format!(
                    "atom {} has beta1 {} / a {}, gate is {}x{}",
                    i,
                    atom.beta1.len(),
                    atom.expert.a.len(),
                    d,
                    r
                )));
            }
        }
        Ok(())
    }

    fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.atoms.len() * self.atom_width());
        for atom in &self.atoms {
            p.push(atom.beta0);
            p.extend_from_slice(&atom.beta1);
            p.extend_from_slice(&atom.expert.a);
            p.push(atom.expert.b);
        }
        p
    }

    fn with_params(&self, p: &[f64]) -> MixingMeasure {
        let (d, r) = self.gate.shape();
        let w = self.atom_width();
        let atoms = p
            .chunks(w)
            .map(|c| PromptAtom {
                beta0: c[0],
                beta1: c[1..1 + r].to_vec(),
                expert: ExpertParams {
                    a: c[1 + r..1 + r + d].to_vec(),
                    b: c[1 + r + d],
                },
            })
            .collect();
        MixingMeasure {
            atoms,
            gate: self.gate.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainedExpert {
    /// Symmetric `input_dim x input_dim`.
    pub quad: Matrix,
    pub bias: f64,
    pub expert: ExpertParams,
}

impl PretrainedExpert {
    fn logit(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut s = self.bias;
        for i in 0..d {
            let row = self.quad.row(i);
            s += x[i] * row.iter().zip(x).map(|(b, x)| b * x).sum::<f64>();
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainedGate {
    pub experts: Vec<PretrainedExpert>,
}

impl PretrainedGate {
    pub fn none() -> Self {
        PretrainedGate::default()
    }

    /// Random symmetric `B = (M + M^T) / 2`, `M_ij ~ N(0, quad_std^2)`; `c ~ N(0, 0.25)`, `eta ~ N(0, 1)`.
    pub fn random(count: usize, input_dim: usize, quad_std: f64, rng: &mut Rng) -> Self {
        let experts = (0..count)
            .map(|_| {
                let m = rng.normal_matrix(input_dim, input_dim, quad_std);
                let quad = m.add(&m.transpose()).expect("square").scale(0.5);
                let bias = 0.5 * rng.normal();
                let a = (0..input_dim).map(|_| rng.normal()).collect();
                PretrainedExpert {
                    quad,
                    bias,
                    expert: ExpertParams { a, b: rng.normal() },
                }
            })
            .collect();
        PretrainedGate { experts }
    }

    fn check(&self, input_dim: usize) -> Result<()> {
        for (k, e) in self.experts.iter().enumerate() {
            if e.quad.shape() != (input_dim, input_dim) || e.expert.a.len() != input_dim {
                return Err(Error::Dimension(format!(
                    "pre-trained expert {} does not match input dimension {}",
                    k, input_dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub noise_std: f64,
}

/// Covariates are uniform on `[-INPUT_BOUND, INPUT_BOUND]^d`.
pub const INPUT_BOUND: f64 = 1.0;

fn check_input(g: &MixingMeasure, pre: &PretrainedGate, x: &[f64]) -> Result<()> {
    g.validate()?;
    pre.check(g.input_dim())?;
    if x.len() != g.input_dim() {
        return Err(Error::Dimension(format!(
            "input has {} entries, gate expects {}",
            x.len(),
            g.input_dim()
        )));
    }
    Ok(())
}

fn gate_projection(gate: &Matrix, x: &[f64]) -> Vec<f64> {
    let (d, r) = gate.shape();
    let mut wx = vec![0.0; r];
    for i in 0..d {
        for (c, v) in wx.iter_mut().enumerate() {
            *v += gate.get(i, c) * x[i];
        }
    }
    wx
}

fn prompt_logit(atom: &PromptAtom, wx: &[f64]) -> f64 {
    atom.beta1.iter().zip(wx).map(|(b, w)| b * w).sum::<f64>() + atom.beta0
}

/// Softmax weights over all experts, pre-trained first, after max-shifting the logits.
pub fn gate_weights(g: &MixingMeasure, pre: &PretrainedGate, x: &[f64]) -> Result<Vec<f64>> {
    check_input(g, pre, x)?;
    let wx = gate_projection(&g.gate, x);
    let logits: Vec<f64> = pre
        .experts
        .iter()
        .map(|e| e.logit(x))
        .chain(g.atoms.iter().map(|a| prompt_logit(a, &wx)))
        .collect();
    if logits.is_empty() {
        return Err(Error::InvalidMeasure("no experts to mix".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("gate logits".into()));
    }
    let u: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = u.iter().sum();
    Ok(u.into_iter().map(|v| v / z).collect())
}

/// `g_G(X)`.
pub fn eval_regression_fn(g: &MixingMeasure, pre: &PretrainedGate, x: &[f64]) -> Result<f64> {
    let weights = gate_weights(g, pre, x)?;
    let outputs = pre
        .experts
        .iter()
        .map(|e| e.expert.eval(g.activation, x))
        .chain(g.atoms.iter().map(|a| a.expert.eval(g.activation, x)));
    Ok(weights.iter().zip(outputs).map(|(w, h)| w * h).sum())
}

/// `Y = g_{G*}(X) + N(0, noise_std^2)`, `X ~ U[-1, 1]^d`.
pub fn sample_dataset(
    g_star: &MixingMeasure,
    pre: &PretrainedGate,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<RegressionDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Config("noise standard deviation must be finite and >= 0".into()));
    }
    let mut rng = Rng::new(seed);
    let d = g_star.input_dim();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: Vec<f64> = (0..d)
            .map(|_| rng.uniform_range(-INPUT_BOUND, INPUT_BOUND))
            .collect();
        let clean = eval_regression_fn(g_star, pre, &xi)?;
        y.push(clean + noise_std * rng.normal());
        x.push(xi);
    }
    Ok(RegressionDataset { x, y, noise_std })
}

/// Per-sample quantities that do not depend on the prompt parameters.
struct FitCache {
    pre_logits: Vec<Vec<f64>>,
    pre_outputs: Vec<Vec<f64>>,
    projections: Vec<Vec<f64>>,
}

impl FitCache {
    fn new(data: &RegressionDataset, pre: &PretrainedGate, template: &MixingMeasure) -> Self {
        let act = template.activation;
        FitCache {
            pre_logits: data
                .x
                .iter()
                .map(|x| pre.experts.iter().map(|e| e.logit(x)).collect())
                .collect(),
            pre_outputs: data
                .x
                .iter()
                .map(|x| pre.experts.iter().map(|e| e.expert.eval(act, x)).collect())
                .collect(),
            projections: data
                .x
                .iter()
                .map(|x| gate_projection(&template.gate, x))
                .collect(),
        }
    }
}

/// `g` at sample `i`; fills `jac` with `dg / dparams` when given.
fn eval_sample(
    g: &MixingMeasure,
    cache: &FitCache,
    x: &[f64],
    i: usize,
    scratch: &mut Vec<(f64, f64, f64)>,
    jac: Option<&mut [f64]>,
) -> f64 {
    let act = g.activation;
    let wx = &cache.projections[i];
    let pre_l = &cache.pre_logits[i];
    scratch.clear();
    let mut max = pre_l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for atom in &g.atoms {
        let z = atom.expert.pre_activation(x);
        let l = prompt_logit(atom, wx);
        max = max.max(l);
        scratch.push((l, act.value(z), act.derivative(z)));
    }
    let mut den = 0.0;
    let mut num = 0.0;
    for (l, h) in pre_l.iter().zip(&cache.pre_outputs[i]) {
        let u = (l - max).exp();
        den += u;
        num += u * h;
    }
    for s in scratch.iter_mut() {
        let u = (s.0 - max).exp();
        s.0 = u;
        den += u;
        num += u * s.1;
    }
    let out = num / den;
    if let Some(jac) = jac {
        let (d, r) = g.gate.shape();
        let w = g.atom_width();
        for (k, &(u, h, dh)) in scratch.iter().enumerate() {
            let col = &mut jac[k * w..(k + 1) * w];
            let gate = u * (h - out) / den;
            let expert = u * dh / den;
            col[0] = gate;
            for c in 0..r {
                col[1 + c] = gate * wx[c];
            }
            for c in 0..d {
                col[1 + r + c] = expert * x[c];
            }
            col[1 + r + d] = expert;
        }
    }
    out
}

fn mean_squared_error(g: &MixingMeasure, cache: &FitCache, data: &RegressionDataset) -> f64 {
    let mut scratch = Vec::with_capacity(g.atoms.len());
    let mut s = 0.0;
    for (i, (x, y)) in data.x.iter().zip(&data.y).enumerate() {
        let r = eval_sample(g, cache, x, i, &mut scratch, None) - y;
        s += r * r;
    }
    s / data.y.len() as f64
}

/// Mean squared residual and its gradient with respect to every prompt parameter,
/// in atom order `(beta0, beta1, a, b)`.
pub fn squared_loss_and_gradient(
    g: &MixingMeasure,
    pre: &PretrainedGate,
    data: &RegressionDataset,
) -> Result<(f64, Vec<f64>)> {
    g.validate()?;
    pre.check(g.input_dim())?;
    let cache = FitCache::new(data, pre, g);
    let p = g.atoms.len() * g.atom_width();
    let mut jac = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut scratch = Vec::new();
    let mut loss = 0.0;
    let n = data.y.len() as f64;
    for (i, (x, y)) in data.x.iter().zip(&data.y).enumerate() {
        let r = eval_sample(g, &cache, x, i, &mut scratch, Some(&mut jac)) - y;
        loss += r * r / n;
        for (gk, jk) in grad.iter_mut().zip(&jac) {
            *gk += 2.0 * r * jk / n;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub restarts: usize,
    pub max_steps: usize,
    /// Every coordinate is kept in `[-bound, bound]`.
    pub bound: f64,
    /// Stop once a step lowers the loss by less than this relative amount.
    pub tolerance: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            restarts: 16,
            max_steps: 200,
            bound: 3.0,
            tolerance: 1e-10,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_steps == 0 {
            return Err(Error::Config("fit needs at least one restart and one step".into()));
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::Config("fit bound must be positive".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config("fit tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub measure: MixingMeasure,
    /// Mean squared residual on the training data.
    pub loss: f64,
    pub failed_restarts: usize,
}

/// Without pre-trained experts the softmax is shift invariant, so the last `beta0` stays at 0.
fn free_mask(g: &MixingMeasure, pre: &PretrainedGate) -> Vec<bool> {
    let w = g.atom_width();
    let mut free = vec![true; g.atoms.len() * w];
    if pre.experts.is_empty() && !g.atoms.is_empty() {
        free[(g.atoms.len() - 1) * w] = false;
    }
    free
}

/// Projected Levenberg-Marquardt on the mean squared residual.
fn levenberg_marquardt(
    data: &RegressionDataset,
    cache: &FitCache,
    init: MixingMeasure,
    free: &[bool],
    settings: &FitSettings,
) -> Option<(MixingMeasure, f64)> {
    let bound = settings.bound;
    let idx: Vec<usize> = (0..free.len()).filter(|&k| free[k]).collect();
    let m = idx.len();
    let mut params: Vec<f64> = init.to_params().iter().map(|v| v.clamp(-bound, bound)).collect();
    let mut g = init.with_params(&params);
    let mut loss = mean_squared_error(&g, cache, data);
    if !loss.is_finite() {
        return None;
    }
    let mut lambda = 1e-3;
    let mut jac = vec![0.0; params.len()];
    let mut scratch = Vec::new();
    let n = data.y.len() as f64;
    for _ in 0..settings.max_steps {
        let mut jtj = Matrix::zeros(m, m);
        let mut jtr = vec![0.0; m];
        for (i, (x, y)) in data.x.iter().zip(&data.y).enumerate() {
            let r = eval_sample(&g, cache, x, i, &mut scratch, Some(&mut jac)) - y;
            for (a, &ka) in idx.iter().enumerate() {
                let ja = jac[ka];
                jtr[a] += ja * r / n;
                let row = jtj.row_mut(a);
                for (b, &kb) in idx.iter().enumerate().take(a + 1) {
                    row[b] += ja * jac[kb] / n;
                }
            }
        }
        for a in 0..m {
            for b in 0..a {
                let v = jtj.get(a, b);
                jtj.set(b, a, v);
            }
        }
        let rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
        let mut improved = None;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for a in 0..m {
                let v = damped.get(a, a);
                damped.set(a, a, v + lambda * (v + 1e-9));
            }
            let Some(l) = cholesky(&damped) else {
                lambda *= 10.0;
                continue;
            };
            let delta = cholesky_solve(&l, &rhs);
            let mut trial = params.clone();
            for (a, &k) in idx.iter().enumerate() {
                trial[k] = (trial[k] + delta[a]).clamp(-bound, bound);
            }
            let candidate = init.with_params(&trial);
            let trial_loss = mean_squared_error(&candidate, cache, data);
            if trial_loss.is_finite() && trial_loss < loss {
                lambda = (lambda / 3.0).max(1e-12);
                improved = Some((trial, candidate, trial_loss));
                break;
            }
            lambda *= 4.0;
        }
        let Some((trial, candidate, trial_loss)) = improved else {
            break;
        };
        let gain = (loss - trial_loss) / loss.max(f64::MIN_POSITIVE);
        params = trial;
        g = candidate;
        loss = trial_loss;
        if gain < settings.tolerance {
            break;
        }
    }
    Some((g, loss))
}

/// Least-squares refinement from a given starting measure.
pub fn fit_from(
    data: &RegressionDataset,
    pre: &PretrainedGate,
    init: &MixingMeasure,
    settings: &FitSettings,
) -> Result<FitResult> {
    settings.validate()?;
    init.validate()?;
    pre.check(init.input_dim())?;
    let cache = FitCache::new(data, pre, init);
    let free = free_mask(init, pre);
    levenberg_marquardt(data, &cache, init.clone(), &free, settings)
        .map(|(measure, loss)| FitResult {
            measure,
            loss,
            failed_restarts: 0,
        })
        .ok_or_else(|| Error::FitFailure("non-finite loss at the starting point".into()))
}

/// Best of `settings.restarts` fits with `atoms` components, each started uniformly in the box.
/// `template` supplies the frozen gate matrix and the expert activation.
pub fn fit_least_squares(
    data: &RegressionDataset,
    pre: &PretrainedGate,
    template: &MixingMeasure,
    atoms: usize,
    settings: &FitSettings,
    rng: &mut Rng,
) -> Result<FitResult> {
    settings.validate()?;
    if atoms == 0 {
        return Err(Error::Config("fit needs at least one atom".into()));
    }
    pre.check(template.input_dim())?;
    let shape = MixingMeasure {
        atoms: Vec::new(),
        gate: template.gate.clone(),
        activation: template.activation,
    };
    let cache = FitCache::new(data, pre, &shape);
    let width = shape.atom_width();
    let mut best: Option<(MixingMeasure, f64)> = None;
    let mut failed = 0;
    for _ in 0..settings.restarts {
        let p: Vec<f64> = (0..atoms * width)
            .map(|_| rng.uniform_range(-settings.bound, settings.bound))
            .collect();
        let mut init = shape.with_params(&p);
        let free = free_mask(&init, pre);
        if let Some(k) = free.iter().position(|f| !f) {
            let mut q = p.clone();
            q[k] = 0.0;
            init = shape.with_params(&q);
        }
        match levenberg_marquardt(data, &cache, init, &free, settings) {
            Some((g, loss)) if best.as_ref().is_none_or(|b| loss < b.1) => best = Some((g, loss)),
            Some(_) => {}
            None => failed += 1,
        }
    }
    let (measure, loss) = best.ok_or_else(|| {
        Error::FitFailure(format!("all {} restarts diverged", settings.restarts))
    })?;
    Ok(FitResult {
        measure,
        loss,
        failed_restarts: failed,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices of `g`'s atoms nearest to each atom of `g_star`; ties go to the lower true index.
pub fn voronoi_cells(g: &MixingMeasure, g_star: &MixingMeasure) -> Result<Vec<Vec<usize>>> {
    if g.atoms.is_empty() || g_star.atoms.is_empty() {
        return Err(Error::InvalidMeasure("mixing measure has no atoms".into()));
    }
    g.validate()?;
    g_star.validate()?;
    if g.gate.shape() != g_star.gate.shape() {
        return Err(Error::Dimension("measures have different shapes".into()));
    }
    let truth: Vec<Vec<f64>> = g_star.atoms.iter().map(PromptAtom::location).collect();
    let mut cells = vec![Vec::new(); truth.len()];
    for (i, atom) in g.atoms.iter().enumerate() {
        let loc = atom.location();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, t) in truth.iter().enumerate() {
            let d = distance(&loc, t);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        cells[best].push(i);
    }
    Ok(cells)
}

/// `D(G, G*)`: squared parameter errors in cells holding several atoms, plain errors in
/// singleton cells, plus the per-cell mismatch of aggregated weights `exp(beta0)`.
pub fn voronoi_loss(g: &MixingMeasure, g_star: &MixingMeasure) -> Result<f64> {
    let cells = voronoi_cells(g, g_star)?;
    let mut total = 0.0;
    for (j, cell) in cells.iter().enumerate() {
        let t = &g_star.atoms[j];
        let mut mass = 0.0;
        for &i in cell {
            let a = &g.atoms[i];
            let w = a.beta0.exp();
            mass += w;
            let d_beta = distance(&a.beta1, &t.beta1);
            let mut eta = a.expert.a.clone();
            eta.push(a.expert.b);
            let mut eta_star = t.expert.a.clone();
            eta_star.push(t.expert.b);
            let d_eta = distance(&eta, &eta_star);
            total += if cell.len() > 1 {
                w * (d_beta * d_beta + d_eta * d_eta)
            } else {
                w * (d_beta + d_eta)
            };
        }
        total += (mass - t.beta0.exp()).abs();
    }
    Ok(total)
}

/// Orthonormal columns from Gram-Schmidt on a Gaussian draw.
pub fn random_gate(input_dim: usize, gate_dim: usize, rng: &mut Rng) -> Result<Matrix> {
    if gate_dim > input_dim {
        return Err(Error::Dimension("gate has more columns than input entries".into()));
    }
    let raw = rng.normal_matrix(input_dim, gate_dim, 1.0);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for c in 0..gate_dim {
        let mut v: Vec<f64> = (0..input_dim).map(|r| raw.get(r, c)).collect();
        for u in &cols {
            let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= p * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols.push(v);
    }
    let mut w = Matrix::zeros(input_dim, gate_dim);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            w.set(r, c, *v);
        }
    }
    Ok(w)
}

/// Two tokens of width two, two pre-trained experts and two prompt atoms, last `beta0 = 0`.
pub fn reference_truth(seed: u64) -> Result<(MixingMeasure, PretrainedGate)> {
    let mut rng = Rng::new(seed);
    let gate = random_gate(4, 2, &mut rng)?;
    let pre = PretrainedGate::random(2, 4, 0.5, &mut rng);
    let atoms = vec![
        PromptAtom {
            beta0: 0.5,
            beta1: vec![1.0, -0.5],
            expert: ExpertParams {
                a: vec![1.0, -1.0, 0.5, 0.0],
                b: 0.5,
            },
        },
        PromptAtom {
            beta0: 0.0,
            beta1: vec![-0.5, 1.0],
            expert: ExpertParams {
                a: vec![-0.5, 0.5, 1.0, -1.0],
                b: -0.5,
            },
        },
    ];
    Ok((
        MixingMeasure {
            atoms,
            gate,
            activation: Activation::Gelu,
        },
        pre,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateConfig {
    pub sample_sizes: Vec<usize>,
    pub seeds: usize,
    pub noise_std: f64,
    /// `N'_p`, components allowed in the fitted measure.
    pub fitted_atoms: usize,
    pub truth_seed: u64,
    /// Start every fit at the true measure instead of random restarts.
    pub init_at_truth: bool,
    pub fit: FitSettings,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            sample_sizes: vec![256, 1024, 4096, 16384],
            seeds: 10,
            noise_std: 0.1,
            fitted_atoms: 2,
            truth_seed: 0,
            init_at_truth: false,
            fit: FitSettings::default(),
        }
    }
}

impl RateConfig {
    pub fn validate(&self, true_atoms: usize) -> Result<()> {
        self.fit.validate()?;
        if self.sample_sizes.len() < 2 || self.sample_sizes.contains(&0) {
            return Err(Error::Config("rate needs at least two positive sample sizes".into()));
        }
        if self.sample_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("sample sizes must increase".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("rate needs at least one seed".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if self.fitted_atoms < true_atoms {
            return Err(Error::Config(format!(
                "fitted_atoms {} is below the true atom count {}",
                self.fitted_atoms, true_atoms
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRun {
    pub n: usize,
    pub seed: u64,
    pub restart_best_loss: f64,
    pub voronoi_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub sample_sizes: Vec<usize>,
    pub medians: Vec<f64>,
    /// OLS slope of `log median` on `log n`; absent when any median is below `1e-12`.
    pub slope: Option<f64>,
    pub degenerate: bool,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateResult {
    pub runs: Vec<RateRun>,
    pub summary: RateSummary,
}

/// Ordinary least squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Number of consecutive steps along which `values` does not increase.
pub fn non_increasing_steps(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] <= w[0]).count()
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Medians below this are treated as exact recovery.
pub const DEGENERATE_MEDIAN: f64 = 1e-12;

/// Fits every `(n, seed)` cell on the reference truth and regresses the log median loss on `log n`.
pub fn rate_experiment(cfg: &RateConfig) -> Result<RateResult> {
    let (truth, pre) = reference_truth(cfg.truth_seed)?;
    rate_experiment_on(cfg, &truth, &pre)
}

pub fn rate_experiment_on(
    cfg: &RateConfig,
    truth: &MixingMeasure,
    pre: &PretrainedGate,
) -> Result<RateResult> {
    cfg.validate(truth.atoms.len())?;
    let root = Rng::new(cfg.truth_seed);
    let mut runs = Vec::new();
    let mut failures = 0;
    let mut medians = Vec::new();
    for &n in &cfg.sample_sizes {
        let mut losses = Vec::new();
        for seed in 0..cfg.seeds as u64 {
            let cell = ((n as u64) << 20) | seed;
            let data = sample_dataset(truth, pre, n, cfg.noise_std, root.fork(cell).seed())?;
            let fit = if cfg.init_at_truth {
                fit_from(&data, pre, truth, &cfg.fit)
            } else {
                let mut rng = root.fork(cell ^ (1 << 63));
                fit_least_squares(&data, pre, truth, cfg.fitted_atoms, &cfg.fit, &mut rng)
            };
            match fit {
                Ok(fit) => {
                    let v = voronoi_loss(&fit.measure, truth)?;
                    losses.push(v);
                    runs.push(RateRun {
                        n,
                        seed,
                        restart_best_loss: fit.loss,
                        voronoi_loss: v,
                    });
                }
                Err(Error::FitFailure(msg)) => {
                    log::warn!("fit failed at n = {}, seed {}: {}", n, seed, msg);
                    failures += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if losses.is_empty() {
            return Err(Error::FitFailure(format!("every fit failed at n = {}", n)));
        }
        medians.push(median_of(&mut losses));
    }
    let degenerate = medians.iter().any(|&m| m < DEGENERATE_MEDIAN);
    let slope = if degenerate {
        None
    } else {
        let pts: Vec<(f64, f64)> = cfg
            .sample_sizes
            .iter()
            .zip(&medians)
            .map(|(&n, &m)| ((n as f64).ln(), m.ln()))
            .collect();
        ols_slope(&pts)
    };
    Ok(RateResult {
        runs,
        summary: RateSummary {
            sample_sizes: cfg.sample_sizes.clone(),
            medians,
            slope,
            degenerate,
            failures,
        },
    })
}

/// Header `n,seed,restart_best_loss,voronoi_loss`.
pub fn write_rate_csv<W: Write>(runs: &[RateRun], mut w: W) -> Result<()> {
    writeln!(w, "n,seed,restart_best_loss,voronoi_loss")?;
    for r in runs {
        writeln!(w, "{},{},{},{}", r.n, r.seed, r.restart_best_loss, r.voronoi_loss)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub functions: usize,
    /// Singular value ratio of the column-normalized evaluation matrix.
    pub design_condition: f64,
    /// Eigenvalue ratio of its Gram matrix, the square of `design_condition`.
    pub gram_condition: f64,
}

impl IdentifiabilityReport {
    /// Full numerical column rank at the given condition threshold.
    pub fn full_rank(&self, threshold: f64) -> bool {
        self.design_condition < threshold
    }
}

/// Evaluates the functions `X^nu * d^gamma h / d eta^gamma (X, eta_j)`, `|nu| + |gamma| <= 2`,
/// on `samples` uniform inputs. For `h = phi(a^T X + b)` each is `X^e phi^(o)(a^T X + b)`, so
/// functions sharing `(j, e, o)` are evaluated once. Conditions are infinite when a column
/// vanishes or the matrix is rank deficient.
pub fn identifiability_check(
    activation: Activation,
    etas: &[ExpertParams],
    samples: usize,
    rng: &mut Rng,
) -> Result<IdentifiabilityReport> {
    let d = etas
        .first()
        .map(|e| e.a.len())
        .ok_or_else(|| Error::Config("need at least one expert".into()))?;
    if etas.iter().any(|e| e.a.len() != d) {
        return Err(Error::Dimension("experts differ in input dimension".into()));
    }
    let q = d + 1;
    let multi = |size: usize, max: usize| -> Vec<Vec<usize>> {
        let mut out = vec![vec![0; size]];
        for _ in 0..max {
            let mut next = Vec::new();
            for v in &out {
                for i in 0..size {
                    let mut w = v.clone();
                    w[i] += 1;
                    next.push(w);
                }
            }
            out.extend(next);
        }
        out.sort();
        out.dedup();
        out
    };
    let nus = multi(d, 2);
    let gammas = multi(q, 2);
    let mut keys = BTreeSet::new();
    for j in 0..etas.len() {
        for nu in &nus {
            for gamma in &gammas {
                let (nn, ng): (usize, usize) = (nu.iter().sum(), gamma.iter().sum());
                if nn + ng > 2 {
                    continue;
                }
                let exponent: Vec<usize> = (0..d).map(|i| nu[i] + gamma[i]).collect();
                keys.insert((j, exponent, ng));
            }
        }
    }
    let xs: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            (0..d)
                .map(|_| rng.uniform_range(-INPUT_BOUND, INPUT_BOUND))
                .collect()
        })
        .collect();
    let cols = keys.len();
    let mut f = DMatrix::<f64>::zeros(samples, cols);
    for (c, (j, e, o)) in keys.iter().enumerate() {
        for (r, x) in xs.iter().enumerate() {
            let mono: f64 = e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product();
            let z = etas[*j].pre_activation(x);
            f[(r, c)] = mono * activation.nth_derivative(*o, z);
        }
    }
    let singular = IdentifiabilityReport {
        functions: cols,
        design_condition: f64::INFINITY,
        gram_condition: f64::INFINITY,
    };
    for c in 0..cols {
        let norm = f.column(c).norm();
        if norm == 0.0 {
            return Ok(singular);
        }
        f.column_mut(c).unscale_mut(norm);
    }
    let ratio = |max: f64, min: f64| if min > 0.0 { max / min } else { f64::INFINITY };
    let sv = f.clone().svd(false, false).singular_values;
    let eig = (f.transpose() * &f).symmetric_eigen().eigenvalues;
    Ok(IdentifiabilityReport {
        functions: cols,
        design_condition: if samples < cols { f64::INFINITY } else { ratio(sv.max(), sv.min()) },
        gram_condition: ratio(eig.max(), eig.min()),
    })
}
