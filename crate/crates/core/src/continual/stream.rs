//! Synthetic class-incremental task streams.
//!
//! Every class is a Gaussian mixture over `tokens x token_dim` feature grids.
//! Each task also adds its own offset grid, so inputs of different tasks
//! differ in their mean token as well as in their class structure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub clusters_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Feature tokens per input (the class token is extra).
    pub tokens: usize,
    pub token_dim: usize,
    /// Spread of class cluster centers.
    pub separation: f64,
    /// Spread of cluster centers around their class center.
    pub cluster_spread: f64,
    /// Standard deviation of per-sample noise.
    pub noise: f64,
    /// Spread of the per-task offset grid.
    pub task_shift: f64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            tasks: 5,
            classes_per_task: 2,
            clusters_per_class: 2,
            train_per_class: 200,
            val_per_class: 20,
            test_per_class: 100,
            tokens: 4,
            token_dim: 2,
            separation: 1.0,
            cluster_spread: 0.5,
            noise: 0.6,
            task_shift: 1.5,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("clusters_per_class", self.clusters_per_class),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("tokens", self.tokens),
            ("token_dim", self.token_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("stream.{} must be positive", name)));
            }
        }
        let scales = [
            ("separation", self.separation),
            ("cluster_spread", self.cluster_spread),
            ("noise", self.noise),
            ("task_shift", self.task_shift),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("stream.{} must be finite and >= 0", name)));
            }
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `tokens x token_dim`
    pub input: Matrix,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// Zero-based position in the stream.
    pub index: usize,
    /// Global labels introduced by this task, ascending.
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub seed: u64,
    pub tasks: Vec<Task>,
}

/// Deterministic per seed. Task `t` owns labels `t C .. (t + 1) C`.
pub fn generate_task_stream(spec: &StreamSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    let root = Rng::new(seed);
    let (n, k) = (spec.tokens, spec.token_dim);
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let mut rng = root.fork(t as u64);
        let shift = rng.normal_matrix(n, k, spec.task_shift);
        let classes: Vec<usize> =
            (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let mut centers = Vec::new();
        for _ in &classes {
            let class_center = rng.normal_matrix(n, k, spec.separation);
            let clusters: Vec<Matrix> = (0..spec.clusters_per_class)
                .map(|_| {
                    let offset = rng.normal_matrix(n, k, spec.cluster_spread);
                    class_center.add(&offset)?.add(&shift)
                })
                .collect::<Result<_>>()?;
            centers.push(clusters);
        }
        let draw = |per_class: usize, rng: &mut Rng| -> Result<Vec<Sample>> {
            let mut out = Vec::with_capacity(per_class * classes.len());
            for (ci, &label) in classes.iter().enumerate() {
                for s in 0..per_class {
                    let center = &centers[ci][s % spec.clusters_per_class];
                    let input = center.add(&rng.normal_matrix(n, k, spec.noise))?;
                    out.push(Sample { input, label });
                }
            }
            rng.shuffle(&mut out);
            Ok(out)
        };
        let train = draw(spec.train_per_class, &mut rng)?;
        let val = draw(spec.val_per_class, &mut rng)?;
        let test = draw(spec.test_per_class, &mut rng)?;
        tasks.push(Task {
            index: t,
            classes,
            train,
            val,
            test,
        });
    }
    Ok(TaskStream {
        spec: spec.clone(),
        seed,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;

    #[test]
    fn label_spaces_are_disjoint() {
        let spec = StreamSpec {
            tasks: 2,
            train_per_class: 5,
            test_per_class: 5,
            ..StreamSpec::default()
        };
        let s = generate_task_stream(&spec, 1).unwrap();
        assert_eq!(s.tasks[0].classes, vec![0, 1]);
        assert_eq!(s.tasks[1].classes, vec![2, 3]);
        for t in &s.tasks {
            for x in t.train.iter().chain(&t.test) {
                assert!(t.classes.contains(&x.label));
            }
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = StreamSpec {
            train_per_class: 10,
            ..StreamSpec::default()
        };
        assert_eq!(generate_task_stream(&spec, 3).unwrap(), generate_task_stream(&spec, 3).unwrap());
        assert_ne!(generate_task_stream(&spec, 3).unwrap(), generate_task_stream(&spec, 4).unwrap());
    }

    #[test]
    fn split_sizes() {
        let s = generate_task_stream(&StreamSpec::default(), 0).unwrap();
        assert_eq!(s.tasks.len(), 5);
        for t in &s.tasks {
            assert_eq!(t.train.len(), 400);
            assert_eq!(t.val.len(), 40);
            assert_eq!(t.test.len(), 200);
            assert_eq!(t.train[0].input.shape(), (4, 2));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = StreamSpec {
            tasks: 0,
            ..StreamSpec::default()
        };
        assert!(generate_task_stream(&spec, 0).is_err());
        let spec = StreamSpec {
            noise: -1.0,
            ..StreamSpec::default()
        };
        assert!(generate_task_stream(&spec, 0).is_err());
    }

    /// Multinomial logistic regression on flattened raw features.
    fn logistic_accuracy(task: &Task) -> f64 {
        let dim = task.train[0].input.len() + 1;
        let classes = &task.classes;
        let mut w = vec![vec![0.0; dim]; classes.len()];
        let feats = |s: &Sample| {
            let mut f = s.input.data().to_vec();
            f.push(1.0);
            f
        };
        for _ in 0..300 {
            let mut g = vec![vec![0.0; dim]; classes.len()];
            for s in &task.train {
                let f = feats(s);
                let logits: Vec<f64> = w.iter().map(|wc| crate::numerics::dot(wc, &f)).collect();
                let p = softmax(&logits);
                for (c, &label) in classes.iter().enumerate() {
                    let err = p[c] - if label == s.label { 1.0 } else { 0.0 };
                    for (gk, fk) in g[c].iter_mut().zip(&f) {
                        *gk += err * fk;
                    }
                }
            }
            let n = task.train.len() as f64;
            for (wc, gc) in w.iter_mut().zip(&g) {
                for (wk, gk) in wc.iter_mut().zip(gc) {
                    *wk -= 0.5 * gk / n;
                }
            }
        }
        let correct = task
            .test
            .iter()
            .filter(|s| {
                let f = feats(s);
                let logits: Vec<f64> = w.iter().map(|wc| crate::numerics::dot(wc, &f)).collect();
                let best = (0..logits.len())
                    .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
                    .unwrap();
                classes[best] == s.label
            })
            .count();
        correct as f64 / task.test.len() as f64
    }

    #[test]
    fn separable_spec_is_linearly_learnable() {
        let spec = StreamSpec {
            tasks: 3,
            clusters_per_class: 1,
            separation: 3.0,
            cluster_spread: 0.0,
            noise: 0.3,
            ..StreamSpec::default()
        };
        let s = generate_task_stream(&spec, 11).unwrap();
        for t in &s.tasks {
            let acc = logistic_accuracy(t);
            assert!(acc >= 0.95, "task {} accuracy {}", t.index, acc);
        }
    }
}
