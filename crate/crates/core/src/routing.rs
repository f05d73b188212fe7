//! Noise penalties, top-K expert selection and activation-frequency bookkeeping.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::prefix_moe::{PromptBlock, RoutingDecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// `ε` on experts at or above the mean frequency.
    Fixed,
    /// Independent draws from `[-ε, ε]` on every expert.
    Uniform,
    /// `ε (max s~ - min s~)` on experts at or above the mean frequency.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub epsilon: f64,
    pub mode: NoiseMode,
}

impl NoiseConfig {
    pub fn adaptive(epsilon: f64) -> Self {
        NoiseConfig {
            epsilon,
            mode: NoiseMode::Adaptive,
        }
    }

    pub fn off() -> Self {
        NoiseConfig::adaptive(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

/// Penalty subtracted from proxy scores before selection.
///
/// `rng` is only consumed by the uniform variant in train mode.
pub fn adaptive_noise(
    proxies: &[f64],
    freqs: &[f64],
    cfg: &NoiseConfig,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if proxies.len() != freqs.len() {
        return Err(Error::Dimension(format!(
            "{} proxy scores, {} frequencies",
            proxies.len(),
            freqs.len()
        )));
    }
    let np = proxies.len();
    if mode == Mode::Eval || cfg.epsilon == 0.0 || np == 0 {
        return Ok(vec![0.0; np]);
    }
    let mean = freqs.iter().sum::<f64>() / np as f64;
    let gated = |j: usize| freqs[j] >= mean;
    let noise = match cfg.mode {
        NoiseMode::Adaptive => {
            let max = proxies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = proxies.iter().copied().fold(f64::INFINITY, f64::min);
            let size = cfg.epsilon * (max - min);
            (0..np).map(|j| if gated(j) { size } else { 0.0 }).collect()
        }
        NoiseMode::Fixed => (0..np)
            .map(|j| if gated(j) { cfg.epsilon } else { 0.0 })
            .collect(),
        NoiseMode::Uniform => (0..np)
            .map(|_| rng.uniform_range(-cfg.epsilon, cfg.epsilon))
            .collect(),
    };
    Ok(noise)
}

/// Indices of the `k` largest `s~ - ε`, ties to the lower index, ascending.
pub fn select_experts(proxies: &[f64], noise: &[f64], k: usize) -> Result<Vec<usize>> {
    if proxies.len() != noise.len() {
        return Err(Error::Dimension("proxy and noise lengths differ".into()));
    }
    if k > proxies.len() {
        return Err(Error::Config(format!(
            "K = {} exceeds {} prompt experts",
            k,
            proxies.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let penalized: Vec<f64> = proxies.iter().zip(noise).map(|(s, e)| s - e).collect();
    if let Some(bad) = penalized.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("penalized score of expert {}", bad)));
    }
    let mut order: Vec<usize> = (0..penalized.len()).collect();
    order.sort_by(|&a, &b| penalized[b].total_cmp(&penalized[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Adds eval-mode routing decisions of one prompted layer to its lifetime counts.
pub fn update_usage<'a, I>(block: &mut PromptBlock, decisions: I) -> Result<()>
where
    I: IntoIterator<Item = &'a RoutingDecision>,
{
    let np = block.prompt_length();
    let heads = block.usage.len();
    for d in decisions {
        let usage = block.usage.get_mut(d.head).ok_or_else(|| {
            Error::OutOfRange(format!("head {} in a block with {} heads", d.head, heads))
        })?;
        if let Some(&j) = d.selected.iter().find(|&&j| j >= np) {
            return Err(Error::OutOfRange(format!("expert {} of {}", j, np)));
        }
        for &j in &d.selected {
            usage.selected[j] += 1;
        }
        usage.instances += 1;
    }
    Ok(())
}

/// Shannon entropy (nats) of `F` normalized to sum one.
pub fn usage_entropy(freqs: &[f64]) -> Result<f64> {
    let total: f64 = freqs.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::UndefinedEntropy);
    }
    Ok(freqs
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| {
            let p = f / total;
            -p * p.ln()
        })
        .sum())
}

/// `layer,head,expert,frequency` rows for every prompted layer.
pub fn write_usage_csv<W: Write>(blocks: &[PromptBlock], mut out: W) -> Result<()> {
    writeln!(out, "layer,head,expert,frequency")?;
    for (l, block) in blocks.iter().enumerate() {
        for h in 0..block.usage.len() {
            for (j, f) in block.frequencies(h).iter().enumerate() {
                writeln!(out, "{},{},{},{}", l, h, j, f)?;
            }
        }
    }
    Ok(())
}

/// Mean entropy over every (layer, head) with recorded usage.
pub fn mean_usage_entropy(blocks: &[PromptBlock]) -> Result<f64> {
    let mut values = Vec::new();
    for block in blocks {
        for h in 0..block.usage.len() {
            values.push(usage_entropy(&block.frequencies(h))?);
        }
    }
    if values.is_empty() {
        return Err(Error::UndefinedEntropy);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn rng() -> Rng {
        Rng::new(0)
    }

    #[test]
    fn zero_epsilon_gives_zero_noise() {
        let n = adaptive_noise(&[1.0, 2.0, 7.0], &[0.5, 0.1, 0.9], &NoiseConfig::off(), Mode::Train, &mut rng()).unwrap();
        assert_eq!(n, vec![0.0; 3]);
    }

    #[test]
    fn hand_evaluated_penalty() {
        let n = adaptive_noise(&[1.0, 3.0, 5.0], &[0.6, 0.3, 0.3], &NoiseConfig::adaptive(0.5), Mode::Train, &mut rng()).unwrap();
        assert_eq!(n, vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_scores_give_zero_noise() {
        let n = adaptive_noise(&[2.0; 4], &[0.9, 0.0, 0.1, 0.0], &NoiseConfig::adaptive(1.0), Mode::Train, &mut rng()).unwrap();
        assert_eq!(n, vec![0.0; 4]);
    }

    #[test]
    fn eval_mode_is_noise_free() {
        for mode in [NoiseMode::Adaptive, NoiseMode::Fixed, NoiseMode::Uniform] {
            let cfg = NoiseConfig { epsilon: 1.0, mode };
            let n = adaptive_noise(&[1.0, 3.0], &[1.0, 0.0], &cfg, Mode::Eval, &mut rng()).unwrap();
            assert_eq!(n, vec![0.0; 2]);
        }
    }

    #[test]
    fn fixed_and_uniform_variants() {
        let cfg = NoiseConfig { epsilon: 0.3, mode: NoiseMode::Fixed };
        let n = adaptive_noise(&[1.0, 3.0, 5.0], &[0.6, 0.3, 0.3], &cfg, Mode::Train, &mut rng()).unwrap();
        assert_eq!(n, vec![0.3, 0.0, 0.0]);
        let cfg = NoiseConfig { epsilon: 0.3, mode: NoiseMode::Uniform };
        let n = adaptive_noise(&[0.0; 50], &[0.0; 50], &cfg, Mode::Train, &mut rng()).unwrap();
        assert!(n.iter().all(|v| v.abs() <= 0.3));
        assert!(n.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_experts(&[0.1, 0.9, 0.5], &[0.0; 3], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_experts(&[5.0, 5.0, 1.0], &[0.0; 3], 1).unwrap(), vec![0]);
        assert_eq!(select_experts(&[1.0, 3.0, 5.0], &[0.0, 0.0, 2.5], 1).unwrap(), vec![1]);
        assert!(matches!(select_experts(&[1.0], &[0.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn usage_examples() {
        let mut r = Rng::new(1);
        let mut block = PromptBlock::new(4, 2, 1, &mut r);
        update_usage(&mut block, &[]).unwrap();
        assert_eq!(block.frequencies(0), vec![0.0; 4]);
        let d = RoutingDecision {
            layer: 0,
            head: 0,
            proxies: vec![0.0; 4],
            noise: vec![0.0; 4],
            selected: vec![0, 2],
        };
        update_usage(&mut block, [&d]).unwrap();
        assert_eq!(block.frequencies(0), vec![1.0, 0.0, 1.0, 0.0]);
        let bad = RoutingDecision { head: 3, ..d.clone() };
        assert!(update_usage(&mut block, [&bad]).is_err());
    }

    #[test]
    fn saturated_expert_across_tasks() {
        let mut r = Rng::new(2);
        let mut block = PromptBlock::new(3, 2, 2, &mut r);
        let d = RoutingDecision {
            layer: 0,
            head: 1,
            proxies: vec![0.0; 3],
            noise: vec![0.0; 3],
            selected: vec![0],
        };
        for _task in 0..2 {
            let stream = vec![d.clone(); 10];
            update_usage(&mut block, &stream).unwrap();
        }
        assert_eq!(block.frequencies(1)[0], 1.0);
        assert_eq!(block.usage[1].instances, 20);
    }

    #[test]
    fn entropy_examples() {
        assert!((usage_entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(usage_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let e = usage_entropy(&[0.5, 0.25, 0.25, 0.0]).unwrap();
        let expected = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((e - expected).abs() < 1e-15);
        assert!((e - 1.0397).abs() < 1e-4);
        assert!(matches!(usage_entropy(&[0.0; 3]), Err(Error::UndefinedEntropy)));
    }

    #[test]
    fn usage_csv_layout() {
        let mut r = Rng::new(3);
        let blocks = vec![PromptBlock::new(2, 2, 1, &mut r)];
        let mut buf = Vec::new();
        write_usage_csv(&blocks, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "layer,head,expert,frequency\n0,0,0,0\n0,0,1,0\n");
    }

    proptest! {
        #[test]
        fn selection_is_affine_invariant(
            scores in prop::collection::vec(-5.0f64..5.0, 2..10),
            a in 0.01f64..100.0,
            b in -50.0f64..50.0,
            k_frac in 0.0f64..1.0,
        ) {
            let np = scores.len();
            let k = 1 + ((np - 1) as f64 * k_frac) as usize;
            let zero = vec![0.0; np];
            let base = select_experts(&scores, &zero, k).unwrap();
            let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
            prop_assert_eq!(base, select_experts(&moved, &zero, k).unwrap());
        }

        #[test]
        fn selection_has_k_ascending_distinct(
            scores in prop::collection::vec(-5.0f64..5.0, 1..12),
            k_frac in 0.0f64..1.0,
        ) {
            let np = scores.len();
            let k = 1 + ((np - 1) as f64 * k_frac) as usize;
            let sel = select_experts(&scores, &vec![0.0; np], k).unwrap();
            prop_assert_eq!(sel.len(), k);
            prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
