//! Frame weights derived from the adjacency matrix, weighted fusion of the
//! frame features, and the linear classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which axis of `A` is averaged before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanAxis {
    /// Average over rows, one value per column: column `j` collects how much
    /// every frame depends on frame `j`.
    #[default]
    Column,
    /// Average over columns, one value per row.
    Row,
}

impl MeanAxis {
    pub fn name(self) -> &'static str {
        match self {
            MeanAxis::Column => "column",
            MeanAxis::Row => "row",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "column" => Ok(Self::Column),
            "row" => Ok(Self::Row),
            other => Err(Error::Config(format!("unknown mean axis {other:?}"))),
        }
    }
}

/// Positive per-frame weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityWeights(Vec<f64>);

impl IntensityWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !values.iter().all(|&v| v > 0.0) {
            return Err(Error::Config("intensity weights must be positive".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "intensity weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Logistic squashing used only when plotting weight curves.
    pub fn sigmoid_mapped(&self) -> Vec<f64> {
        self.0.iter().map(|v| crate::tape::sigmoid(*v)).collect()
    }
}

/// Fused `d`-dimensional clip representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation(Vec<f64>);

impl FusedRepresentation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fused representation".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `softmax(mean(A))` over the chosen axis, computed behind a stop-gradient so
/// the loss never reaches `A` through this branch.
pub fn intensity_weights(tape: &mut Tape, a: Var, axis: MeanAxis) -> Result<Var> {
    let (n, m) = tape.value(a).dims2()?;
    if n != m {
        return Err(Error::shape(
            "intensity_weights",
            format!("adjacency must be square, got [{n}x{m}]"),
        ));
    }
    let frozen = tape.stop_gradient(a)?;
    let pooled = match axis {
        MeanAxis::Column => tape.mean_over_rows(frozen)?,
        MeanAxis::Row => {
            let t = tape.transpose(frozen)?;
            tape.mean_over_rows(t)?
        }
    };
    tape.softmax(pooled)
}

/// Evaluates [`intensity_weights`] for a concrete matrix.
pub fn intensity_weights_of(a: &Tensor, axis: MeanAxis) -> Result<IntensityWeights> {
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone())?;
    let w = intensity_weights(&mut tape, av, axis)?;
    IntensityWeights::new(tape.value(w).data().to_vec())
}

/// `r = sum_i w_i H_i` for `w: 1 x N` and `H: N x d`.
pub fn weighted_fusion(tape: &mut Tape, h: Var, w: Var) -> Result<Var> {
    let (n, _) = tape.value(h).dims2()?;
    let (r, c) = tape.value(w).dims2()?;
    if r != 1 || c != n {
        return Err(Error::shape(
            "weighted_fusion",
            format!("{c} weights for {n} frames"),
        ));
    }
    tape.matmul(w, h)
}

/// Linear classifier: `W_cls` is `K x d`, `b_cls` is `1 x K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl ClassifierParams {
    pub fn init(store: &mut ParamStore, classes: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {classes}"
            )));
        }
        let weight = store.add("classifier.weight", xavier_uniform(&[classes, d], d, classes, rng));
        let bias = store.add("classifier.bias", Tensor::zeros(&[1, classes]));
        Ok(Self {
            weight,
            bias,
            classes,
        })
    }

    pub fn bind(&self, vars: &[Var]) -> ClassifierVars {
        ClassifierVars {
            weight: vars[self.weight.index()],
            bias: vars[self.bias.index()],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

/// `logits = r W_cls^T + b_cls`, a `1 x K` row.
pub fn classify(tape: &mut Tape, r: Var, p: &ClassifierVars) -> Result<Var> {
    let wt = tape.transpose(p.weight)?;
    let z = tape.matmul(r, wt)?;
    tape.add_row_vector(z, p.bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(rows: &[Vec<f64>]) -> Vec<f64> {
        intensity_weights_of(&Tensor::from_rows(rows).unwrap(), MeanAxis::Column)
            .unwrap()
            .values()
            .to_vec()
    }

    #[test]
    fn identity_gives_uniform_weights() {
        let w = intensity_weights_of(&Tensor::identity(3), MeanAxis::Column).unwrap();
        for v in w.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn worked_example() {
        // Column means [1, 0.5], softmax evaluated directly.
        let w = weights(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        let e = (0.5f64).exp();
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.62246).abs() < 1e-5);
        assert!((w[1] - 0.37754).abs() < 1e-5);
    }

    #[test]
    fn largest_column_mean_wins() {
        let w = intensity_weights_of(
            &Tensor::from_rows(&[
                vec![0.1, 0.9, 0.2],
                vec![-0.3, 0.4, 0.8],
                vec![0.0, 0.3, -0.5],
            ])
            .unwrap(),
            MeanAxis::Column,
        )
        .unwrap();
        assert_eq!(w.argmax(), 1);
    }

    #[test]
    fn row_axis_pools_the_other_way() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let w = intensity_weights_of(&a, MeanAxis::Row).unwrap();
        // Row means [0.5, 1].
        assert!((w.values()[1] - 0.62246).abs() < 1e-5);
    }

    #[test]
    fn fusion_examples() {
        let mut t = Tape::new();
        let h = t
            .leaf(Tensor::from_rows(&[vec![0.0, 4.0], vec![4.0, 0.0]]).unwrap())
            .unwrap();
        let w = t.leaf(Tensor::row_vector(&[0.25, 0.75]).unwrap()).unwrap();
        let r = weighted_fusion(&mut t, h, w).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 1.0]);

        let h = t
            .leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![8.0, -1.0]]).unwrap())
            .unwrap();
        let uniform = t.leaf(Tensor::filled(&[1, 3], 1.0 / 3.0)).unwrap();
        let r = weighted_fusion(&mut t, h, uniform).unwrap();
        assert!((t.value(r).data()[0] - 4.0).abs() < 1e-15);
        assert!((t.value(r).data()[1] - 2.0).abs() < 1e-15);

        let onehot = t.leaf(Tensor::row_vector(&[0.0, 1.0, 0.0]).unwrap()).unwrap();
        let r = weighted_fusion(&mut t, h, onehot).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 5.0]);

        let short = t.leaf(Tensor::row_vector(&[0.5, 0.5]).unwrap()).unwrap();
        assert!(weighted_fusion(&mut t, h, short).is_err());
    }

    #[test]
    fn classify_examples() {
        let mut t = Tape::new();
        let r = t.leaf(Tensor::row_vector(&[0.3, -2.0, 1.0]).unwrap()).unwrap();
        let zero = ClassifierVars {
            weight: t.leaf(Tensor::zeros(&[4, 3])).unwrap(),
            bias: t.leaf(Tensor::zeros(&[1, 4])).unwrap(),
        };
        let logits = classify(&mut t, r, &zero).unwrap();
        assert_eq!(t.value(logits).data(), &[0.0; 4]);
        let p = t.softmax(logits).unwrap();
        assert!(t.value(p).data().iter().all(|v| (*v - 0.25).abs() < 1e-15));

        let same_rows = ClassifierVars {
            weight: t
                .leaf(Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![1.0, 2.0, -1.0]]).unwrap())
                .unwrap(),
            bias: t.leaf(Tensor::zeros(&[1, 2])).unwrap(),
        };
        let logits = classify(&mut t, r, &same_rows).unwrap();
        let v = t.value(logits).data();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn weights_validation() {
        assert!(IntensityWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(IntensityWeights::new(vec![0.5, 0.6]).is_err());
        assert!(IntensityWeights::new(vec![1.0, 0.0]).is_err());
    }
}
