//! Seeded synthetic datasets: Gaussian features with labels from a hidden
//! teacher, so the tasks are learnable and every batch is a pure function
//! of (seed, step).

use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum DataSpec {
    /// Features [batch, ...feature_shape], integer class labels [batch]
    /// from argmax of a fixed random linear teacher.
    Classification { feature_shape: Vec<usize>, classes: usize },
    /// Inputs [batch, ...in_shape], targets = tanh of a fixed random linear
    /// teacher reshaped to [batch, ...out_shape].
    Regression { in_shape: Vec<usize>, out_shape: Vec<usize> },
}

impl DataSpec {
    pub fn feature_shape(&self) -> &[usize] {
        match self {
            DataSpec::Classification { feature_shape, .. } => feature_shape,
            DataSpec::Regression { in_shape, .. } => in_shape,
        }
    }

    fn teacher(&self, root: &StreamRng) -> Tensor {
        let mut rng = root.split("teacher");
        match self {
            DataSpec::Classification { feature_shape, classes } => {
                let d: usize = feature_shape.iter().product();
                Tensor::rand_normal(&[d, *classes], 0.0, 1.0, &mut rng)
            }
            DataSpec::Regression { in_shape, out_shape } => {
                let d: usize = in_shape.iter().product();
                let o: usize = out_shape.iter().product();
                Tensor::rand_normal(&[d, o], 0.0, 1.0, &mut rng)
            }
        }
    }

    /// The batch for a given step; shared-batch semantics give every model
    /// in a fused job this same batch.
    pub fn batch(&self, root: &StreamRng, step: u64, batch: usize) -> (Tensor, Tensor) {
        let teacher = self.teacher(root);
        let mut rng = root.split("data").split_index(step);
        match self {
            DataSpec::Classification { feature_shape, classes } => {
                let d: usize = feature_shape.iter().product();
                let mut shape = vec![batch];
                shape.extend_from_slice(feature_shape);
                let x = Tensor::rand_normal(&shape, 0.0, 1.0, &mut rng);
                let mut labels = Vec::with_capacity(batch);
                for n in 0..batch {
                    let row = &x.data()[n * d..(n + 1) * d];
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0usize;
                    for k in 0..*classes {
                        let mut s = 0.0;
                        for (i, &v) in row.iter().enumerate() {
                            s += v * teacher.data()[i * classes + k];
                        }
                        if s > best {
                            best = s;
                            arg = k;
                        }
                    }
                    labels.push(arg as f64);
                }
                (x, Tensor::from_vec(labels))
            }
            DataSpec::Regression { in_shape, out_shape } => {
                let d: usize = in_shape.iter().product();
                let o: usize = out_shape.iter().product();
                let mut shape = vec![batch];
                shape.extend_from_slice(in_shape);
                let x = Tensor::rand_normal(&shape, 0.0, 1.0, &mut rng);
                let mut y = vec![0.0; batch * o];
                for n in 0..batch {
                    let row = &x.data()[n * d..(n + 1) * d];
                    for k in 0..o {
                        let mut s = 0.0;
                        for (i, &v) in row.iter().enumerate() {
                            s += v * teacher.data()[i * o + k];
                        }
                        y[n * o + k] = (s / (d as f64).sqrt()).tanh();
                    }
                }
                let mut yshape = vec![batch];
                yshape.extend_from_slice(out_shape);
                (x, Tensor::new(yshape, y).unwrap())
            }
        }
    }

    /// Held-out evaluation batch, independent of every training step stream.
    pub fn val_batch(&self, root: &StreamRng, batch: usize) -> (Tensor, Tensor) {
        self.batch(&root.split("val"), u64::MAX, batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_deterministic_per_step() {
        let spec = DataSpec::Classification { feature_shape: vec![8], classes: 4 };
        let root = StreamRng::new(3);
        let (x1, y1) = spec.batch(&root, 5, 16);
        let (x2, y2) = spec.batch(&root, 5, 16);
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
        let (x3, _) = spec.batch(&root, 6, 16);
        assert!(x1.max_abs_diff(&x3) > 0.0);
    }

    #[test]
    fn labels_lie_in_class_range() {
        let spec = DataSpec::Classification { feature_shape: vec![3, 4, 4], classes: 10 };
        let root = StreamRng::new(4);
        let (_, y) = spec.batch(&root, 0, 32);
        for &l in y.data() {
            assert!(l.fract() == 0.0 && (0.0..10.0).contains(&l));
        }
    }
}
