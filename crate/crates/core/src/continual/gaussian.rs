//! Per-class Gaussian statistics of representations and task-adaptive
//! refinement of the classifier head on pseudo-representations.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::model::{classify_on_tape, ClassifierHead};
use crate::numerics::{cholesky, cosine_lr, Adam, Matrix, Rng, Tape};

const RIDGE_FRACTION: f64 = 1e-4;
const RIDGE_FLOOR: f64 = 1e-8;
const MAX_RIDGE_ESCALATIONS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassGaussian {
    /// `1 x d`
    pub mean: Matrix,
    /// Population covariance plus `ridge * I`.
    pub cov: Matrix,
    pub ridge: f64,
}

/// Mean and population covariance of one class, ridged by
/// `max(1e-4 trace / d, 1e-8)`.
pub fn estimate_class_gaussian(class: usize, reps: &[Matrix]) -> Result<ClassGaussian> {
    if reps.len() < 2 {
        return Err(Error::DegenerateClass {
            class,
            count: reps.len(),
        });
    }
    let d = reps[0].cols();
    let n = reps.len() as f64;
    // running mean: exact when every representation is the same
    let mut mean = Matrix::zeros(1, d);
    for (k, z) in reps.iter().enumerate() {
        if z.shape() != (1, d) {
            return Err(Error::Dimension("representations must be 1 x d rows".into()));
        }
        let step = z.sub(&mean)?;
        mean.axpy(1.0 / (k + 1) as f64, &step)?;
    }
    let mut cov = Matrix::zeros(d, d);
    for z in reps {
        let c = z.sub(&mean)?;
        for a in 0..d {
            let ca = c.get(0, a);
            for b in 0..d {
                let v = cov.get(a, b) + ca * c.get(0, b);
                cov.set(a, b, v);
            }
        }
    }
    cov.scale_in_place(1.0 / n);
    let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
    let ridge = (RIDGE_FRACTION * trace / d as f64).max(RIDGE_FLOOR);
    for i in 0..d {
        cov.set(i, i, cov.get(i, i) + ridge);
    }
    Ok(ClassGaussian { mean, cov, ridge })
}

pub fn estimate_class_gaussians(
    reps: &BTreeMap<usize, Vec<Matrix>>,
) -> Result<BTreeMap<usize, ClassGaussian>> {
    reps.iter()
        .map(|(&c, zs)| Ok((c, estimate_class_gaussian(c, zs)?)))
        .collect()
}

/// Sampler for one class; escalates the ridge tenfold until the covariance factorizes.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: Matrix,
    factor: Matrix,
}

impl GaussianSampler {
    pub fn new(class: usize, g: &ClassGaussian) -> Result<Self> {
        let mut cov = g.cov.clone();
        let mut ridge = g.ridge;
        for attempt in 0..=MAX_RIDGE_ESCALATIONS {
            if let Some(factor) = cholesky(&cov) {
                return Ok(GaussianSampler {
                    mean: g.mean.clone(),
                    factor,
                });
            }
            if attempt == MAX_RIDGE_ESCALATIONS {
                break;
            }
            let extra = ridge * 9.0;
            ridge *= 10.0;
            warn!(
                "covariance of class {} not factorizable, ridge raised to {:e}",
                class, ridge
            );
            for i in 0..cov.rows() {
                cov.set(i, i, cov.get(i, i) + extra);
            }
        }
        Err(Error::NonFinite(format!("covariance of class {}", class)))
    }

    pub fn sample(&self, rng: &mut Rng) -> Matrix {
        let d = self.mean.cols();
        let e: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mut z = self.mean.clone();
        for i in 0..d {
            let row = self.factor.row(i);
            let mut s = 0.0;
            for k in 0..=i {
                s += row[k] * e[k];
            }
            z.data_mut()[i] += s;
        }
        z
    }
}

/// `per_class` draws from every sampler, shuffled.
pub fn draw_pseudo_representations(
    samplers: &[(usize, GaussianSampler)],
    per_class: usize,
    rng: &mut Rng,
) -> Vec<(usize, Matrix)> {
    let mut pool = Vec::with_capacity(per_class * samplers.len());
    for (c, s) in samplers {
        for _ in 0..per_class {
            pool.push((*c, s.sample(rng)));
        }
    }
    rng.shuffle(&mut pool);
    pool
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapSettings {
    pub epochs: usize,
    pub samples_per_class: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Optimizes the head on cross-entropy over pseudo-representations drawn
/// equally from every class in `stats`. Returns the mean loss of each epoch.
pub fn tap_refine(
    head: &mut ClassifierHead,
    stats: &BTreeMap<usize, ClassGaussian>,
    settings: &TapSettings,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if stats.is_empty() || settings.epochs == 0 {
        return Ok(Vec::new());
    }
    let active: Vec<usize> = stats.keys().copied().collect();
    if let Some(&c) = active.iter().find(|&&c| c >= head.classes()) {
        return Err(Error::OutOfRange(format!("class {} beyond head size {}", c, head.classes())));
    }
    let samplers: Vec<(usize, GaussianSampler)> = stats
        .iter()
        .map(|(&c, g)| Ok((c, GaussianSampler::new(c, g)?)))
        .collect::<Result<_>>()?;
    let per_epoch = settings.samples_per_class * samplers.len();
    let batch = settings.batch_size.max(1);
    let steps_per_epoch = per_epoch.div_ceil(batch);
    let total_steps = steps_per_epoch * settings.epochs;
    let mut opt = Adam::new(&[head.weight.shape(), head.bias.shape()]);
    let mut step = 0;
    let mut losses = Vec::with_capacity(settings.epochs);
    for _ in 0..settings.epochs {
        let pool = draw_pseudo_representations(&samplers, settings.samples_per_class, rng);
        let mut epoch_loss = 0.0;
        for chunk in pool.chunks(batch) {
            let mut gw = Matrix::zeros(head.weight.rows(), head.weight.cols());
            let mut gb = Matrix::zeros(1, head.bias.cols());
            for (c, z) in chunk {
                let mut tape = Tape::new();
                let w = tape.leaf(&head.weight, true);
                let b = tape.leaf(&head.bias, true);
                let zv = tape.leaf(z, false);
                let logits = classify_on_tape(&mut tape, w, b, zv)?;
                let loss = tape.cross_entropy(logits, *c, &active)?;
                epoch_loss += tape.value(loss).item();
                let mut g = tape.backward(loss)?;
                if let Some(x) = g.take(w) {
                    gw.add_assign(&x)?;
                }
                if let Some(x) = g.take(b) {
                    gb.add_assign(&x)?;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            gw.scale_in_place(inv);
            gb.scale_in_place(inv);
            let lr = cosine_lr(settings.lr, step, total_steps);
            opt.step(&mut [&mut head.weight, &mut head.bias], &[gw, gb], lr)?;
            step += 1;
        }
        losses.push(epoch_loss / pool.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_representations_give_ridge_only() {
        let z = Matrix::row_vector(&[0.3, -1.2, 2.0]);
        let g = estimate_class_gaussian(0, &[z.clone(), z.clone(), z.clone()]).unwrap();
        assert_eq!(g.mean, z);
        assert_eq!(g.ridge, RIDGE_FLOOR);
        for a in 0..3 {
            for b in 0..3 {
                let expected = if a == b { g.ridge } else { 0.0 };
                assert_eq!(g.cov.get(a, b), expected);
            }
        }
    }

    #[test]
    fn two_point_population_covariance() {
        let zs = [Matrix::row_vector(&[0.0, 0.0]), Matrix::row_vector(&[2.0, 0.0])];
        let g = estimate_class_gaussian(0, &zs).unwrap();
        assert_eq!(g.mean.data(), &[1.0, 0.0]);
        let delta = 1e-4 * 1.0 / 2.0;
        assert_eq!(g.ridge, delta);
        assert!((g.cov.get(0, 0) - (1.0 + delta)).abs() < 1e-15);
        assert_eq!(g.cov.get(0, 1), 0.0);
        assert_eq!(g.cov.get(1, 1), delta);
    }

    #[test]
    fn covariance_is_symmetric() {
        let mut rng = Rng::new(3);
        let zs: Vec<Matrix> = (0..30).map(|_| rng.normal_matrix(1, 6, 1.0)).collect();
        let g = estimate_class_gaussian(0, &zs).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                assert!((g.cov.get(a, b) - g.cov.get(b, a)).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn too_few_samples_is_degenerate() {
        let r = estimate_class_gaussian(4, &[Matrix::zeros(1, 2)]);
        assert!(matches!(r, Err(Error::DegenerateClass { class: 4, count: 1 })));
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = Rng::new(5);
        let a = rng.normal_matrix(5, 5, 1.0);
        let spd = a.matmul_nt(&a).unwrap().add(&Matrix::identity(5)).unwrap();
        let l = cholesky(&spd).unwrap();
        assert!(l.matmul_nt(&l).unwrap().max_abs_diff(&spd).unwrap() < 1e-12);
        assert!(cholesky(&Matrix::zeros(2, 2)).is_none());
    }

    #[test]
    fn singular_covariance_escalates_ridge() {
        let g = ClassGaussian {
            mean: Matrix::zeros(1, 2),
            cov: Matrix::zeros(2, 2),
            ridge: 1e-3,
        };
        let s = GaussianSampler::new(0, &g).unwrap();
        let z = s.sample(&mut Rng::new(0));
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    fn settings() -> TapSettings {
        TapSettings {
            epochs: 5,
            samples_per_class: 64,
            batch_size: 32,
            lr: 0.05,
        }
    }

    #[test]
    fn single_class_has_zero_loss() {
        let mut head = ClassifierHead::new(3);
        head.grow_to(1).unwrap();
        let mut stats = BTreeMap::new();
        stats.insert(0, estimate_class_gaussian(0, &[Matrix::zeros(1, 3), Matrix::filled(1, 3, 1.0)]).unwrap());
        let before = head.clone();
        let losses = tap_refine(&mut head, &stats, &settings(), &mut Rng::new(1)).unwrap();
        assert!(losses.iter().all(|&l| l == 0.0));
        assert_eq!(head, before);
    }

    #[test]
    fn separated_gaussians_are_learned() {
        let mut rng = Rng::new(2);
        let mut stats = BTreeMap::new();
        for (c, center) in [(0usize, -3.0), (1, 3.0)] {
            let zs: Vec<Matrix> = (0..50)
                .map(|_| Matrix::filled(1, 4, center).add(&rng.normal_matrix(1, 4, 0.5)).unwrap())
                .collect();
            stats.insert(c, estimate_class_gaussian(c, &zs).unwrap());
        }
        let mut head = ClassifierHead::new(4);
        head.grow_to(2).unwrap();
        tap_refine(&mut head, &stats, &settings(), &mut rng).unwrap();
        let mut correct = [0usize; 2];
        for (c, g) in &stats {
            let s = GaussianSampler::new(*c, g).unwrap();
            for _ in 0..200 {
                let l = crate::model::classify(&head, &s.sample(&mut rng)).unwrap();
                let pred = if l.get(0, 0) > l.get(0, 1) { 0 } else { 1 };
                if pred == *c {
                    correct[*c] += 1;
                }
            }
        }
        let balanced = (correct[0] + correct[1]) as f64 / 400.0;
        assert!(correct.iter().all(|&k| k as f64 / 200.0 >= 0.95), "{}", balanced);
    }

    #[test]
    fn pool_holds_equal_counts_per_class() {
        let mut rng = Rng::new(9);
        let samplers: Vec<(usize, GaussianSampler)> = (0..3)
            .map(|c| {
                let zs: Vec<Matrix> = (0..5).map(|_| rng.normal_matrix(1, 2, 1.0)).collect();
                (c, GaussianSampler::new(c, &estimate_class_gaussian(c, &zs).unwrap()).unwrap())
            })
            .collect();
        let pool = draw_pseudo_representations(&samplers, 64, &mut rng);
        for c in 0..3 {
            assert_eq!(pool.iter().filter(|(k, _)| *k == c).count(), 64);
        }
    }
}
