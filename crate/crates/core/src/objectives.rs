//! Router loss, prefix-key prototypes and the combined training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Tape, Var};
use crate::prefix_moe::RoutingDecision;
use crate::routing::select_experts;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub router: f64,
    pub proto: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_router", self.router), ("alpha_proto", self.proto)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// `-Σ_{j∈K_X} softmax(s~)_j`, averaged over decisions.
pub fn router_loss(decisions: &[RoutingDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for d in decisions {
        if let Some(&j) = d.selected.iter().find(|&&j| j >= d.proxies.len()) {
            return Err(Error::OutOfRange(format!("expert {} of {}", j, d.proxies.len())));
        }
        let p = softmax(&d.proxies);
        total -= d.selected.iter().map(|&j| p[j]).sum::<f64>();
    }
    Ok(total / decisions.len() as f64)
}

/// Router loss on the tape; `proxies[i]` holds the raw scores behind `decisions[i]`.
pub fn router_loss_on_tape(
    tape: &mut Tape,
    proxies: &[Var],
    decisions: &[RoutingDecision],
) -> Result<Option<Var>> {
    if proxies.len() != decisions.len() {
        return Err(Error::Dimension("one proxy row per decision expected".into()));
    }
    if proxies.is_empty() {
        return Ok(None);
    }
    let mut masses = Vec::with_capacity(proxies.len());
    for (&s, d) in proxies.iter().zip(decisions) {
        masses.push(tape.softmax_mass(s, &d.selected)?);
    }
    let total = tape.sum(&masses)?;
    Ok(Some(tape.scale(total, -1.0 / proxies.len() as f64)))
}

/// Frequently used prefix keys of the previous task, per prompted layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    /// One matrix per layer; rows are retained keys.
    pub layers: Vec<Matrix>,
}

impl PrototypeSet {
    pub fn empty(layers: usize, embed_dim: usize) -> Self {
        PrototypeSet {
            layers: (0..layers).map(|_| Matrix::zeros(0, embed_dim)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|m| m.rows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Keeps, per layer, the old keys whose head-averaged frequency is at least the layer mean.
pub fn build_prototype_set(old_keys: &[Matrix], freqs: &[Vec<f64>]) -> Result<PrototypeSet> {
    if old_keys.len() != freqs.len() {
        return Err(Error::Dimension("one frequency vector per layer expected".into()));
    }
    let mut layers = Vec::with_capacity(old_keys.len());
    for (keys, f) in old_keys.iter().zip(freqs) {
        if f.len() != keys.rows() {
            return Err(Error::Dimension(format!(
                "{} keys but {} frequencies",
                keys.rows(),
                f.len()
            )));
        }
        if f.is_empty() {
            layers.push(Matrix::zeros(0, keys.cols()));
            continue;
        }
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let keep: Vec<usize> = (0..f.len()).filter(|&j| f[j] >= mean).collect();
        layers.push(keys.select_rows(&keep)?);
    }
    Ok(PrototypeSet { layers })
}

/// The experts each prototype attends to: top-`k` of `p^T P^K` per prototype.
pub fn prototype_selections(protos: &PrototypeSet, keys: &[Matrix], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (l, set) in protos.layers.iter().enumerate() {
        let kl = keys
            .get(l)
            .ok_or_else(|| Error::Dimension(format!("no current keys for layer {}", l)))?;
        let scores = set.matmul_nt(kl)?;
        for r in 0..scores.rows() {
            out.push(select_experts(scores.row(r), &vec![0.0; kl.rows()], k)?);
        }
    }
    Ok(out)
}

/// `-Σ_{j∈K_p} softmax(p^T P^K)_j` averaged over every (layer, prototype) pair; 0 when empty.
pub fn prototype_loss(protos: &PrototypeSet, keys: &[Matrix], k: usize) -> Result<f64> {
    if protos.is_empty() {
        return Ok(0.0);
    }
    let sel = prototype_selections(protos, keys, k)?;
    let mut total = 0.0;
    let mut idx = 0;
    for (l, set) in protos.layers.iter().enumerate() {
        let scores = set.matmul_nt(&keys[l])?;
        for r in 0..scores.rows() {
            let p = softmax(scores.row(r));
            total -= sel[idx].iter().map(|&j| p[j]).sum::<f64>();
            idx += 1;
        }
    }
    Ok(total / protos.len() as f64)
}

/// Prototype loss on the tape against current key leaves.
///
/// `fixed` pins the per-prototype selections (for finite-difference checks);
/// otherwise they are recomputed from the current keys.
pub fn prototype_loss_on_tape(
    tape: &mut Tape,
    protos: &PrototypeSet,
    keys: &[Var],
    k: usize,
    fixed: Option<&[Vec<usize>]>,
) -> Result<Option<Var>> {
    if protos.is_empty() {
        return Ok(None);
    }
    let current: Vec<Matrix> = keys.iter().map(|&v| tape.value(v).clone()).collect();
    let sel = match fixed {
        Some(s) => s.to_vec(),
        None => prototype_selections(protos, &current, k)?,
    };
    if sel.len() != protos.len() {
        return Err(Error::Dimension("one selection per prototype expected".into()));
    }
    let mut masses = Vec::with_capacity(sel.len());
    let mut idx = 0;
    for (l, set) in protos.layers.iter().enumerate() {
        for r in 0..set.rows() {
            let p = tape.constant(set.select_rows(&[r])?);
            let scores = tape.matmul_nt(p, keys[l])?;
            masses.push(tape.softmax_mass(scores, &sel[idx])?);
            idx += 1;
        }
    }
    let total = tape.sum(&masses)?;
    Ok(Some(tape.scale(total, -1.0 / sel.len() as f64)))
}

/// `ce + α_router r + α_proto p`.
pub fn total_loss(ce: f64, router: f64, proto: f64, w: &LossWeights) -> Result<f64> {
    let out = ce + w.router * router + w.proto * proto;
    if !out.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(out)
}

/// Weighted sum on the tape; absent terms contribute nothing.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    ce: Var,
    router: Option<Var>,
    proto: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut parts = vec![ce];
    if let (Some(r), true) = (router, w.router != 0.0) {
        parts.push(tape.scale(r, w.router));
    }
    if let (Some(p), true) = (proto, w.proto != 0.0) {
        parts.push(tape.scale(p, w.proto));
    }
    if parts.len() == 1 {
        return Ok(ce);
    }
    tape.sum(&parts)
}
