//! Finite-difference gradient suites over single operations, one graph
//! module, and the whole model, plus the stop-gradient check on the fusion
//! branch.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::ImageSequence;
use crate::error::{Error, Result};
use crate::fusion::{classify, intensity_weights, weighted_fusion, ClassifierVars, MeanAxis};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::graph::{
    graph_module_forward, stacked_forward, BiLstmVars, GcnVars, RecurrentCell, DEFAULT_SLOPE,
};
use crate::model::{Model, ModelConfig};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Random instances per operation in the `ops` suite.
pub const OP_INSTANCES: usize = 20;
/// Instances are redrawn until every leaky-relu input is at least this far
/// from the kink, so a finite-difference step never crosses it.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Module,
    EndToEnd,
    StopGradient,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "module" => Ok(Self::Module),
            "end_to_end" | "end-to-end" => Ok(Self::EndToEnd),
            "stop_gradient" | "stop-gradient" => Ok(Self::StopGradient),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?}"))),
        }
    }

    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
    /// Exact-zero checks that are not relative-error comparisons.
    pub exact_failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.exact_failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
    /// Differentiable operations no suite exercised; only meaningful for
    /// [`Scope::All`].
    pub uncovered: Vec<OpKind>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed) && self.uncovered.is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.suites
            .iter()
            .map(|s| s.report.worst())
            .fold(0.0, f64::max)
    }

    pub fn covered(&self) -> BTreeSet<OpKind> {
        self.suites
            .iter()
            .flat_map(|s| s.report.kinds.iter().copied())
            .collect()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "[{}] {} worst relative error {:.3e}",
                if s.passed() { "pass" } else { "FAIL" },
                s.name,
                s.report.worst()
            )?;
            write!(f, "{}", s.report)?;
            for e in &s.exact_failures {
                writeln!(f, "  {e}")?;
            }
        }
        if !self.uncovered.is_empty() {
            writeln!(f, "uncovered operations: {:?}", self.uncovered)?;
        }
        Ok(())
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Like [`uniform`] but keeps every value at least `KINK_MARGIN` from zero.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..2.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Scalar probe `sum(out * r)` so every output coordinate gets a distinct
/// upstream gradient.
fn probe(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[1, n])?;
    let rv = tape.leaf(r.clone())?;
    let prod = tape.mul(flat, rv)?;
    tape.sum(prod)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance of `kind`: named inputs and the function to check.
fn op_instance(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<(String, Tensor)>, OpFn) {
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=4usize);
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let named = |v: Vec<(&str, Tensor)>| -> Vec<(String, Tensor)> {
        v.into_iter().map(|(s, t)| (s.to_string(), t)).collect()
    };
    // Output size is needed for the probe weights; compute it from a dry run.
    let with_probe = |inputs: Vec<(String, Tensor)>, f: OpFn, rng: &mut ChaCha8Rng| {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(_, x)| t.leaf(x.clone()).unwrap()).collect();
        let out = f(&mut t, &vars).expect("instance is well formed");
        let numel = t.value(out).numel();
        let r = uniform(&[1, numel], -1.0, 1.0, rng);
        let g: OpFn = Box::new(move |tape, v| {
            let out = f(tape, v)?;
            probe(tape, out, &r)
        });
        (inputs, g)
    };
    match kind {
        OpKind::MatMul => with_probe(
            named(vec![("a", uniform(&[m, k], -1.0, 1.0, rng)), ("b", uniform(&[k, n], -1.0, 1.0, rng))]),
            Box::new(|t, v| t.matmul(v[0], v[1])),
            rng,
        ),
        OpKind::Add | OpKind::Mul => with_probe(
            named(vec![("a", uniform(&[m, n], -1.0, 1.0, rng)), ("b", uniform(&[m, n], -1.0, 1.0, rng))]),
            if kind == OpKind::Add {
                Box::new(|t, v| t.add(v[0], v[1]))
            } else {
                Box::new(|t, v| t.mul(v[0], v[1]))
            },
            rng,
        ),
        OpKind::Scale => {
            let factor = rng.random_range(-2.0..2.0);
            with_probe(
                named(vec![("x", uniform(&[m, n], -1.0, 1.0, rng))]),
                Box::new(move |t, v| t.scale(v[0], factor)),
                rng,
            )
        }
        OpKind::AddRowVector => with_probe(
            named(vec![("x", uniform(&[m, n], -1.0, 1.0, rng)), ("v", uniform(&[1, n], -1.0, 1.0, rng))]),
            Box::new(|t, v| t.add_row_vector(v[0], v[1])),
            rng,
        ),
        OpKind::LeakyRelu => with_probe(
            named(vec![("x", away_from_zero(&[m, n], rng))]),
            Box::new(|t, v| t.leaky_relu(v[0], DEFAULT_SLOPE)),
            rng,
        ),
        OpKind::Sigmoid => with_probe(
            named(vec![("x", uniform(&[m, n], -3.0, 3.0, rng))]),
            Box::new(|t, v| t.sigmoid(v[0])),
            rng,
        ),
        OpKind::Tanh => with_probe(
            named(vec![("x", uniform(&[m, n], -3.0, 3.0, rng))]),
            Box::new(|t, v| t.tanh(v[0])),
            rng,
        ),
        OpKind::Softmax => with_probe(
            named(vec![("x", uniform(&[m, n + 1], -3.0, 3.0, rng))]),
            Box::new(|t, v| t.softmax(v[0])),
            rng,
        ),
        OpKind::MeanOverRows => with_probe(
            named(vec![("x", uniform(&[m, n], -1.0, 1.0, rng))]),
            Box::new(|t, v| t.mean_over_rows(v[0])),
            rng,
        ),
        OpKind::CrossEntropy => {
            let classes = n + 1;
            let label = rng.random_range(0..classes);
            (
                named(vec![("logits", uniform(&[1, classes], -3.0, 3.0, rng))]),
                Box::new(move |t, v| t.cross_entropy(v[0], label)),
            )
        }
        OpKind::Sum => (
            named(vec![("x", uniform(&[m, n], -1.0, 1.0, rng))]),
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            }),
        ),
        OpKind::Transpose => with_probe(
            named(vec![("x", uniform(&[m, n], -1.0, 1.0, rng))]),
            Box::new(|t, v| t.transpose(v[0])),
            rng,
        ),
        OpKind::ConcatCols => with_probe(
            named(vec![
                ("a", uniform(&[m, k], -1.0, 1.0, rng)),
                ("b", uniform(&[m, n], -1.0, 1.0, rng)),
            ]),
            // The first block appears twice so gradients must accumulate.
            Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]])),
            rng,
        ),
        OpKind::StackRows => with_probe(
            named(vec![
                ("a", uniform(&[1, n], -1.0, 1.0, rng)),
                ("b", uniform(&[1, n], -1.0, 1.0, rng)),
            ]),
            Box::new(|t, v| t.stack_rows(&[v[1], v[0], v[1]])),
            rng,
        ),
        OpKind::Gather => {
            let rows: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..m)).collect();
            let cols: Vec<usize> = (0..n + 1).map(|_| rng.random_range(0..n)).collect();
            with_probe(
                named(vec![("x", uniform(&[m, n], -1.0, 1.0, rng))]),
                Box::new(move |t, v| t.gather(v[0], &rows, &cols)),
                rng,
            )
        }
        OpKind::Reshape => with_probe(
            named(vec![("x", uniform(&[m, n * 2], -1.0, 1.0, rng))]),
            Box::new(move |t, v| {
                let r = t.reshape(v[0], &[n, m * 2])?;
                // Reshape alone is the identity on values; squaring makes the
                // probe depend on the layout.
                t.mul(r, r)
            }),
            rng,
        ),
        OpKind::Conv2d => {
            let b = rng.random_range(1..=2usize);
            let cin = rng.random_range(1..=2usize);
            let cout = rng.random_range(1..=2usize);
            let ks = if rng.random::<bool>() { 3 } else { 1 };
            let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
            with_probe(
                named(vec![
                    ("input", uniform(&[b, cin, h, w], -1.0, 1.0, rng)),
                    ("kernel", uniform(&[cout, cin, ks, ks], -1.0, 1.0, rng)),
                    ("bias", uniform(&[1, cout], -1.0, 1.0, rng)),
                ]),
                Box::new(|t, v| t.conv2d(v[0], v[1], v[2])),
                rng,
            )
        }
        OpKind::MeanPool2 => {
            let b = rng.random_range(1..=2usize);
            let c = rng.random_range(1..=2usize);
            with_probe(
                named(vec![("x", uniform(&[b, c, 2 * m, 2 * n], -1.0, 1.0, rng))]),
                Box::new(|t, v| t.mean_pool2(v[0])),
                rng,
            )
        }
        OpKind::AdjacencyMix => with_probe(
            named(vec![
                ("adjacency", uniform(&[m, m], -1.0, 1.0, rng)),
                ("x", uniform(&[m, n], -1.0, 1.0, rng)),
            ]),
            Box::new(|t, v| t.adjacency_mix(v[0], v[1])),
            rng,
        ),
        OpKind::Leaf | OpKind::StopGradient => unreachable!("not checked by finite differences"),
    }
}

/// Every differentiable operation except `StopGradient`, whose zero gradient
/// is checked exactly by [`stop_gradient_suite`].
pub fn ops_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport::default();
    for &kind in OpKind::DIFFERENTIABLE {
        if kind == OpKind::StopGradient {
            continue;
        }
        for _ in 0..OP_INSTANCES {
            let (inputs, f) = op_instance(kind, &mut rng);
            let mut report = check_gradients(&inputs, f)?;
            for inp in &mut report.inputs {
                inp.name = format!("{kind:?}.{}", inp.name);
            }
            total.merge(report);
        }
    }
    Ok(SuiteResult {
        name: "ops".into(),
        report: total,
        exact_failures: Vec::new(),
    })
}

/// Draws instances from `draw` until the forward pass keeps every leaky-relu
/// input at least [`KINK_MARGIN`] from zero.
fn draw_smooth<T>(
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> T,
    margin: impl Fn(&T) -> Result<Option<f64>>,
) -> Result<T> {
    for _ in 0..MAX_REDRAWS {
        let inst = draw(rng);
        if margin(&inst)?.is_none_or(|m| m > KINK_MARGIN) {
            return Ok(inst);
        }
    }
    Err(Error::State(
        "could not draw an instance away from leaky-relu kinks".into(),
    ))
}

fn module_inputs(n: usize, d: usize, cell: RecurrentCell, modules: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor)> {
    let h = d / 2;
    let rows = cell.embed_rows(d);
    let mut v = vec![
        ("features".to_string(), uniform(&[n, d], -1.0, 1.0, rng)),
        ("adjacency".to_string(), uniform(&[n, n], -1.0, 1.0, rng)),
    ];
    for k in 0..modules {
        for (name, shape) in [
            ("gcn.w", vec![d, d]),
            ("rnn.u_f", vec![rows, 2 * d]),
            ("rnn.u_b", vec![rows, 2 * d]),
            ("rnn.v_f", vec![d, h]),
            ("rnn.v_b", vec![d, h]),
            ("rnn.b", vec![1, d]),
            ("rnn.s0_f", vec![1, d]),
            ("rnn.s0_b", vec![1, d]),
        ] {
            v.push((format!("module{k}.{name}"), uniform(&shape, -1.0, 1.0, rng)));
        }
    }
    v
}

fn module_vars(v: &[Var], k: usize, cell: RecurrentCell) -> (GcnVars, BiLstmVars) {
    let o = 2 + 8 * k;
    (
        GcnVars {
            w: v[o],
            slope: DEFAULT_SLOPE,
        },
        BiLstmVars {
            u_f: v[o + 1],
            u_b: v[o + 2],
            v_f: v[o + 3],
            v_b: v[o + 4],
            b: v[o + 5],
            s0_f: v[o + 6],
            s0_b: v[o + 7],
            cell,
        },
    )
}

fn leaf_margin(inputs: &[(String, Tensor)], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<Option<f64>> {
    let mut t = Tape::new();
    let vars = inputs
        .iter()
        .map(|(_, x)| t.leaf(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    f(&mut t, &vars)?;
    Ok(t.kink_margin())
}

/// One graph module (both cells) and two stacked modules sharing `A`, at
/// `N = 3`, `d = 4`.
pub fn module_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport::default();
    for (cell, modules) in [
        (RecurrentCell::Gateless, 1),
        (RecurrentCell::Gated, 1),
        (RecurrentCell::Gateless, 2),
    ] {
        let r = uniform(&[1, 12], -1.0, 1.0, &mut rng);
        let f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let out = if modules == 1 {
                let (g, b) = module_vars(v, 0, cell);
                graph_module_forward(t, v[0], v[1], &g, &b)?
            } else {
                let ms: Vec<_> = (0..modules).map(|k| module_vars(v, k, cell)).collect();
                *stacked_forward(t, v[0], v[1], &ms)?.last().expect("at least one module")
            };
            probe(t, out, &r)
        };
        for _ in 0..3 {
            let inputs = draw_smooth(
                &mut rng,
                |rng| module_inputs(3, 4, cell, modules, rng),
                |inp| leaf_margin(inp, &f),
            )?;
            total.merge(check_gradients(&inputs, &f)?);
        }
    }
    Ok(SuiteResult {
        name: "module".into(),
        report: total,
        exact_failures: Vec::new(),
    })
}

/// Configuration of the end-to-end check: `N = 3`, `d = 4`, `K = 2`, 4x4 frames.
pub fn end_to_end_config(seed: u64) -> ModelConfig {
    ModelConfig {
        frames: 3,
        dim: 4,
        classes: 2,
        rows: 4,
        cols: 4,
        module_count: 2,
        weighted_fusion: true,
        mean_axis: MeanAxis::Column,
        seed,
        ..ModelConfig::default()
    }
}

struct EndToEnd {
    model: Model,
    images: ImageSequence,
    label: usize,
}

fn perturbed_model(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<EndToEnd> {
    let mut model = Model::new(cfg)?;
    // Move A and the biases off their structured initial values so every
    // gradient path is generic.
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let t = model.params_mut().get_mut(id);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let n = cfg.frames * cfg.rows * cfg.cols;
    let images = ImageSequence::new(
        cfg.frames,
        cfg.rows,
        cfg.cols,
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let label = rng.random_range(0..cfg.classes);
    Ok(EndToEnd {
        model,
        images,
        label,
    })
}

/// Loss of the whole model with the fusion weights held at `weights`.
fn frozen_weight_loss<'a>(
    e: &'a EndToEnd,
    weights: &Tensor,
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'a {
    let weights = weights.clone();
    move |t, v| {
        let x = t.leaf(e.images.to_tensor())?;
        let out = e.model.forward_with_weights(t, v, x, Some(&weights))?;
        t.cross_entropy(out.logits, e.label)
    }
}

/// Whole-model gradients against finite differences with the fusion weights
/// held constant, and a bitwise comparison showing the real forward pass
/// (weights computed from `A` behind a stop-gradient) has the same gradients.
pub fn end_to_end_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport::default();
    let mut exact_failures = Vec::new();
    for instance in 0..2 {
        let cfg = end_to_end_config(seed.wrapping_add(instance));
        let e = draw_smooth(
            &mut rng,
            |rng| perturbed_model(cfg, rng),
            |e| {
                let e = e.as_ref().map_err(|err| Error::State(err.to_string()))?;
                let mut t = Tape::new();
                e.model.forward(&mut t, &e.images)?;
                Ok(t.kink_margin())
            },
        )??;
        let weights = e.model.intensity_weights()?;
        let w = Tensor::row_vector(weights.values())?;
        let inputs: Vec<(String, Tensor)> = e
            .model
            .params()
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect();
        let report = check_gradients(&inputs, frozen_weight_loss(&e, &w))?;

        // Same gradients from the unmodified forward pass.
        let mut t = Tape::new();
        let vars = e.model.params().bind(&mut t)?;
        let x = t.leaf(e.images.to_tensor())?;
        let out = e.model.forward_bound(&mut t, &vars, x)?;
        let loss = t.cross_entropy(out.logits, e.label)?;
        let real = t.backward(loss)?;
        let kinds = t.op_kinds();

        let mut t2 = Tape::new();
        let vars2 = e.model.params().bind(&mut t2)?;
        let loss2 = frozen_weight_loss(&e, &w)(&mut t2, &vars2)?;
        let frozen = t2.backward(loss2)?;
        for (k, (_, name, _)) in e.model.params().iter().enumerate() {
            let a = real.wrt(vars[k]);
            let b = frozen.wrt(vars2[k]);
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                exact_failures.push(format!(
                    "{name}: gradient with stop-gradient fusion differs from frozen-weight gradient"
                ));
            }
        }
        total.merge(report);
        total.kinds.extend(kinds);
    }
    Ok(SuiteResult {
        name: "end_to_end".into(),
        report: total,
        exact_failures,
    })
}

/// The fusion branch alone (`A -> weights -> fused -> logits -> loss`) must
/// give `A` an exactly zero gradient.
pub fn stop_gradient_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exact_failures = Vec::new();
    let mut kinds = BTreeSet::new();
    for axis in [MeanAxis::Column, MeanAxis::Row] {
        for _ in 0..5 {
            let (n, d, k) = (4, 3, 3);
            let mut t = Tape::new();
            let a = t.leaf(uniform(&[n, n], -1.0, 1.0, &mut rng))?;
            let h = t.leaf(uniform(&[n, d], -1.0, 1.0, &mut rng))?;
            let cls = ClassifierVars {
                weight: t.leaf(uniform(&[k, d], -1.0, 1.0, &mut rng))?,
                bias: t.leaf(uniform(&[1, k], -1.0, 1.0, &mut rng))?,
            };
            let w = intensity_weights(&mut t, a, axis)?;
            let r = weighted_fusion(&mut t, h, w)?;
            let logits = classify(&mut t, r, &cls)?;
            let loss = t.cross_entropy(logits, rng.random_range(0..k))?;
            let g = t.backward(loss)?;
            let grad_a = g.wrt(a);
            if grad_a.iter().any(|v| *v != 0.0) || g.reached(a) {
                exact_failures.push(format!(
                    "{} axis: fusion-branch gradient on A is {grad_a:?}",
                    axis.name()
                ));
            }
            kinds.extend(t.op_kinds());
        }
    }
    Ok(SuiteResult {
        name: "stop_gradient".into(),
        report: GradCheckReport {
            inputs: Vec::new(),
            kinds,
        },
        exact_failures,
    })
}

/// Runs the suites selected by `scope`. With [`Scope::All`] the union of
/// recorded operations must cover [`OpKind::DIFFERENTIABLE`].
pub fn run(scope: Scope, seed: u64) -> Result<VerifyReport> {
    let mut suites = Vec::new();
    if scope.includes(Scope::Ops) {
        suites.push(ops_suite(seed)?);
    }
    if scope.includes(Scope::Module) {
        suites.push(module_suite(seed)?);
    }
    if scope.includes(Scope::EndToEnd) {
        suites.push(end_to_end_suite(seed)?);
    }
    if scope.includes(Scope::StopGradient) {
        suites.push(stop_gradient_suite(seed)?);
    }
    let mut report = VerifyReport {
        suites,
        uncovered: Vec::new(),
    };
    if scope == Scope::All {
        let covered = report.covered();
        report.uncovered = OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .filter(|k| !covered.contains(k))
            .collect();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_parse() {
        assert_eq!(Scope::parse("end_to_end").unwrap(), Scope::EndToEnd);
        assert!(Scope::parse("everything").is_err());
    }

    #[test]
    fn stop_gradient_branch_is_exactly_zero() {
        let s = stop_gradient_suite(1).unwrap();
        assert!(s.passed(), "{:?}", s.exact_failures);
        assert!(s.report.kinds.contains(&OpKind::StopGradient));
    }

    #[test]
    fn module_suite_passes() {
        let s = module_suite(2).unwrap();
        assert!(s.passed(), "{}", s.report);
    }
}
