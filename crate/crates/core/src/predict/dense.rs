//! Logistic regression and a one-hidden-layer feed-forward classifier.

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::optim::Adam;
use super::tape::{sigmoid, ParamId, ParamSet, Tape, Var};
use crate::features::Standardizer;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseClassifier {
    pub standardizer: Standardizer,
    /// `None` for logistic regression.
    pub hidden: Option<usize>,
    pub params: ParamSet,
}

pub struct DenseTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl DenseClassifier {
    pub fn new(width: usize, hidden: Option<usize>, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        match hidden {
            None => {
                params.zeros("w", width, 1);
                params.zeros("b", 1, 1);
            }
            Some(h) => {
                params.glorot("w1", width, h, rng);
                params.zeros("b1", 1, h);
                params.glorot("w2", h, 1, rng);
                params.zeros("b2", 1, 1);
            }
        }
        Self {
            standardizer: Standardizer::identity(width),
            hidden,
            params,
        }
    }

    pub fn fit(
        x: &Array2<f64>,
        y: &[bool],
        hidden: Option<usize>,
        training: &DenseTraining,
        rng: &mut impl Rng,
    ) -> Self {
        let mut model = Self::new(x.ncols(), hidden, rng);
        model.standardizer = Standardizer::fit(x.rows(), x.ncols());
        let xs = model.standardizer.apply(x);
        let mut adam = Adam::new(&model.params, training.learning_rate);
        let mut order: Vec<usize> = (0..xs.nrows()).collect();
        for epoch in 0..training.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for batch in order.chunks(training.batch_size.max(1)) {
                let bx = xs.select(Axis(0), batch);
                let by: Vec<f64> = batch.iter().map(|&i| f64::from(u8::from(y[i]))).collect();
                let mut grads = model.params.zero_grads();
                {
                    let mut tape = Tape::new(&model.params);
                    let input = tape.constant(bx);
                    let logits = model.logits_on(&mut tape, input);
                    let loss = tape.binary_cross_entropy(logits, by);
                    total += tape.scalar(loss) * batch.len() as f64;
                    tape.backward(loss, &mut grads);
                }
                adam.step(&mut model.params, &grads);
            }
            log::debug!("epoch {}: mean loss {:.6}", epoch + 1, total / xs.nrows().max(1) as f64);
        }
        model
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Var {
        let p = ParamId;
        match self.hidden {
            None => {
                let (w, b) = (tape.param(p(0)), tape.param(p(1)));
                let z = tape.matmul(x, w);
                tape.add_row(z, b)
            }
            Some(_) => {
                let (w1, b1) = (tape.param(p(0)), tape.param(p(1)));
                let (w2, b2) = (tape.param(p(2)), tape.param(p(3)));
                let h = tape.matmul(x, w1);
                let h = tape.add_row(h, b1);
                let h = tape.relu(h);
                let z = tape.matmul(h, w2);
                tape.add_row(z, b2)
            }
        }
    }

    /// Probability of the hallucinated class for each row.
    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        let xs = self.standardizer.apply(x);
        let mut tape = Tape::new(&self.params);
        let input = tape.constant(xs);
        let logits = self.logits_on(&mut tape, input);
        tape.value(logits).column(0).iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn predict_row(&self, row: ArrayView1<f64>) -> f64 {
        self.predict(&row.to_owned().insert_axis(Axis(0)))[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(rng: &mut ChaCha8Rng, n: usize) -> (Array2<f64>, Vec<bool>) {
        let x = Array2::from_shape_fn((n, 4), |_| rng.gen_range(-1.0..1.0));
        let y = x.rows().into_iter().map(|r| r[0] - 0.5 * r[3] > 0.1).collect();
        (x, y)
    }

    #[test]
    fn both_variants_learn_a_linear_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = data(&mut rng, 600);
        let (tx, ty) = data(&mut rng, 200);
        let training = DenseTraining {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
        };
        for hidden in [None, Some(16)] {
            let m = DenseClassifier::fit(&x, &y, hidden, &training, &mut rng);
            let p = m.predict(&tx);
            let acc = p.iter().zip(&ty).filter(|(p, y)| (**p >= 0.5) == **y).count();
            assert!(acc >= 180, "{hidden:?}: {acc}");
            assert!(p.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn constant_input_gives_constant_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_elem((40, 3), 0.5);
        let y: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let training = DenseTraining {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.01,
        };
        let m = DenseClassifier::fit(&x, &y, None, &training, &mut rng);
        let p = m.predict(&x);
        assert!(p.iter().all(|&v| (v - p[0]).abs() < 1e-12));
    }
}
