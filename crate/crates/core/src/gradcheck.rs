//! Central finite-difference gradient checking.
//!
//! The relative error of one coordinate is `|analytic - numeric| /
//! max(|analytic|, |numeric|, REL_FLOOR)`. The floor keeps coordinates whose
//! true gradient is zero (or nearly so) from dividing round-off by round-off.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::Result;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub values: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    /// Operation kinds the checked function recorded.
    pub kinds: BTreeSet<OpKind>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.inputs
            .iter()
            .map(|i| i.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < REL_TOLERANCE
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        for inp in other.inputs {
            match self.inputs.iter_mut().find(|i| i.name == inp.name) {
                Some(existing) => {
                    existing.values += inp.values;
                    existing.max_rel_error = existing.max_rel_error.max(inp.max_rel_error);
                    existing.max_abs_analytic =
                        existing.max_abs_analytic.max(inp.max_abs_analytic);
                }
                None => self.inputs.push(inp),
            }
        }
        self.kinds.extend(other.kinds);
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for inp in &self.inputs {
            writeln!(
                f,
                "  {:<28} n={:<6} max_rel_err={:.3e}  max|grad|={:.3e}  {}",
                inp.name,
                inp.values,
                inp.max_rel_error,
                inp.max_abs_analytic,
                if inp.max_rel_error < REL_TOLERANCE {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Each input becomes a leaf on a fresh tape and `f` must map the leaves to a
/// scalar. `f` is re-run twice per input coordinate.
pub fn check_gradients<F>(inputs: &[(String, Tensor)], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let kinds = tape.op_kinds();

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        inputs: Vec::with_capacity(inputs.len()),
        kinds,
    };
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let mut worst: f64 = 0.0;
        for (idx, &exact) in analytic.iter().enumerate() {
            let orig = values[k].data()[idx];
            values[k].data_mut()[idx] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[k].data_mut()[idx] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(exact, numeric));
        }
        report.inputs.push(InputReport {
            name: name.clone(),
            values: analytic.len(),
            max_rel_error: worst,
            max_abs_analytic: analytic.iter().map(|v| v.abs()).fold(0.0, f64::max),
        });
    }
    Ok(report)
}

/// Central-difference gradient of a plain scalar function. Kept separate from
/// the tape so tests can use it as an independent oracle.
pub fn numeric_gradient<F>(point: &[f64], f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + FD_STEP;
            let plus = f(&x);
            x[i] = point[i] - FD_STEP;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}
