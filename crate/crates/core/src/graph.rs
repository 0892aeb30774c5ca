//! Frame graph convolution with a learnable adjacency matrix, followed by a
//! bidirectional recurrent layer.
//!
//! The `N` frames of a clip are the nodes of a fully connected graph. Node `i`
//! embeds its neighbours' features with `W`, mixes them with row `i` of the
//! adjacency matrix `A` and adds its own embedded feature scaled by `A[i][i]`:
//!
//! ```text
//! o_i = leaky_relu( A[i, not i] * (n_i W) + A[i][i] * (H_i W) )
//! ```
//!
//! where `n_i` stacks every frame except `i`. The recurrent layer then scans
//! the graph output in both directions. Several modules can be stacked; they
//! all read the same `A`, so its gradient sums the contributions of every
//! module.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::xavier_uniform;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_SLOPE: f64 = 0.2;

/// `N` per-frame feature vectors of dimension `d`, stored as an `N x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    features: Tensor,
}

impl FrameFeatureSequence {
    pub fn new(features: Tensor) -> Result<Self> {
        features.dims2()?;
        if !features.is_finite() {
            return Err(Error::NonFinite("frame feature sequence".into()));
        }
        Ok(Self { features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }

    pub fn into_tensor(self) -> Tensor {
        self.features
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Chronological resampling to exactly `target` frames, repeating frames
    /// when the source is shorter.
    pub fn resample(&self, target: usize) -> Result<Self> {
        if target == 0 {
            return Err(Error::Config("cannot resample to zero frames".into()));
        }
        let src = self.frames();
        let rows: Vec<Vec<f64>> = (0..target)
            .map(|t| self.frame(t * src / target).to_vec())
            .collect();
        Self::from_rows(&rows)
    }
}

/// The single `N x N` adjacency matrix shared by all graph modules and the
/// fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    pub id: ParamId,
    pub nodes: usize,
}

impl AdjacencyMatrix {
    /// Registers `A = I`, so every frame starts independent of the others.
    pub fn identity(store: &mut ParamStore, nodes: usize) -> Self {
        let id = store.add("adjacency", Tensor::identity(nodes));
        Self { id, nodes }
    }

    /// Mean absolute off-diagonal entry.
    pub fn offdiag_magnitude(a: &Tensor) -> f64 {
        let n = a.rows();
        if n < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += a.at(i, j).abs();
                }
            }
        }
        total / (n * (n - 1)) as f64
    }
}

/// Graph convolution weights: a `d x d` embedding and the leaky-relu slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcnParams {
    pub w: ParamId,
    pub slope: f64,
}

impl GcnParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{prefix}.gcn.w"), xavier_uniform(&[d, d], d, d, rng));
        Self {
            w,
            slope: DEFAULT_SLOPE,
        }
    }

    pub fn bind(&self, vars: &[Var]) -> GcnVars {
        GcnVars {
            w: vars[self.w.index()],
            slope: self.slope,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GcnVars {
    pub w: Var,
    pub slope: f64,
}

/// Recurrent update used inside each direction of the bidirectional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecurrentCell {
    /// `h_i = sigmoid(U [s_{i-1}; o_i])`, `s_i = V h_i`. No gates.
    #[default]
    Gateless,
    /// Standard LSTM gates over the same `[s_{i-1}; o_i]` input, with the cell's
    /// output projected by `V` into the next hidden state.
    Gated,
}

impl RecurrentCell {
    pub fn name(self) -> &'static str {
        match self {
            RecurrentCell::Gateless => "gateless",
            RecurrentCell::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gateless" => Ok(Self::Gateless),
            "gated" | "lstm" => Ok(Self::Gated),
            other => Err(Error::Config(format!("unknown recurrent cell {other:?}"))),
        }
    }

    /// Rows of `U`: `d/2` for the gateless cell, four gate blocks otherwise.
    pub fn embed_rows(self, d: usize) -> usize {
        match self {
            RecurrentCell::Gateless => d / 2,
            RecurrentCell::Gated => 2 * d,
        }
    }
}

/// Parameters of the bidirectional layer.
///
/// `u_*` are `(d/2) x 2d` (times four for the gated cell), `v_*` are
/// `d x (d/2)`, `b` and the initial states `s0_*` are `1 x d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiLstmParams {
    pub u_f: ParamId,
    pub u_b: ParamId,
    pub v_f: ParamId,
    pub v_b: ParamId,
    pub b: ParamId,
    pub s0_f: ParamId,
    pub s0_b: ParamId,
    pub cell: RecurrentCell,
}

impl BiLstmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        cell: RecurrentCell,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "recurrent layer needs an even feature dimension, got {d}"
            )));
        }
        let h = d / 2;
        let rows = cell.embed_rows(d);
        let mut add_u = |name: &str, rng: &mut _| {
            store.add(
                format!("{prefix}.rnn.{name}"),
                xavier_uniform(&[rows, 2 * d], 2 * d, h, rng),
            )
        };
        let u_f = add_u("u_f", rng);
        let u_b = add_u("u_b", rng);
        let v_f = store.add(format!("{prefix}.rnn.v_f"), xavier_uniform(&[d, h], h, d, rng));
        let v_b = store.add(format!("{prefix}.rnn.v_b"), xavier_uniform(&[d, h], h, d, rng));
        let b = store.add(format!("{prefix}.rnn.b"), Tensor::zeros(&[1, d]));
        let s0_f = store.add(format!("{prefix}.rnn.s0_f"), Tensor::zeros(&[1, d]));
        let s0_b = store.add(format!("{prefix}.rnn.s0_b"), Tensor::zeros(&[1, d]));
        Ok(Self {
            u_f,
            u_b,
            v_f,
            v_b,
            b,
            s0_f,
            s0_b,
            cell,
        })
    }

    pub fn bind(&self, vars: &[Var]) -> BiLstmVars {
        BiLstmVars {
            u_f: vars[self.u_f.index()],
            u_b: vars[self.u_b.index()],
            v_f: vars[self.v_f.index()],
            v_b: vars[self.v_b.index()],
            b: vars[self.b.index()],
            s0_f: vars[self.s0_f.index()],
            s0_b: vars[self.s0_b.index()],
            cell: self.cell,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmVars {
    pub u_f: Var,
    pub u_b: Var,
    pub v_f: Var,
    pub v_b: Var,
    pub b: Var,
    pub s0_f: Var,
    pub s0_b: Var,
    pub cell: RecurrentCell,
}

impl BiLstmVars {
    /// The same layer with its two directions exchanged.
    pub fn swapped(self) -> Self {
        Self {
            u_f: self.u_b,
            u_b: self.u_f,
            v_f: self.v_b,
            v_b: self.v_f,
            s0_f: self.s0_b,
            s0_b: self.s0_f,
            ..self
        }
    }
}

/// One graph module: graph convolution then the bidirectional layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphModuleParams {
    pub gcn: GcnParams,
    pub rnn: BiLstmParams,
}

impl GraphModuleParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        cell: RecurrentCell,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            gcn: GcnParams::init(store, prefix, d, rng),
            rnn: BiLstmParams::init(store, prefix, d, cell, rng)?,
        })
    }

    pub fn bind(&self, vars: &[Var]) -> (GcnVars, BiLstmVars) {
        (self.gcn.bind(vars), self.rnn.bind(vars))
    }
}

fn others(n: usize, i: usize) -> Vec<usize> {
    (0..n).filter(|&j| j != i).collect()
}

fn node_count(tape: &Tape, h: Var, i: usize) -> Result<(usize, usize)> {
    let (n, d) = tape.value(h).dims2()?;
    if i >= n {
        return Err(Error::Index(format!("node {i} out of range for {n} frames")));
    }
    Ok((n, d))
}

/// Every frame except `i`, in the original order: `(N-1) x d`.
pub fn neighbor_stack(tape: &mut Tape, h: Var, i: usize) -> Result<Var> {
    let (n, d) = node_count(tape, h, i)?;
    if n < 2 {
        return Err(Error::DegenerateGraph(
            "a single frame has no neighbours".into(),
        ));
    }
    let cols: Vec<usize> = (0..d).collect();
    tape.gather(h, &others(n, i), &cols)
}

/// Embedded neighbour messages `n_i W`.
pub fn message_embed(tape: &mut Tape, neighbors: Var, gcn: &GcnVars) -> Result<Var> {
    tape.matmul(neighbors, gcn.w)
}

/// Updated state of node `i`, evaluated term by term (`1 x d`).
pub fn node_update(tape: &mut Tape, h: Var, a: Var, gcn: &GcnVars, i: usize) -> Result<Var> {
    let (n, d) = node_count(tape, h, i)?;
    check_adjacency(tape, a, n)?;
    let cols: Vec<usize> = (0..d).collect();
    let own = tape.gather(h, &[i], &cols)?;
    let own_embedded = tape.matmul(own, gcn.w)?;
    let a_ii = tape.gather(a, &[i], &[i])?;
    let own_term = tape.matmul(a_ii, own_embedded)?;
    let pre = if n == 1 {
        own_term
    } else {
        let neighbors = neighbor_stack(tape, h, i)?;
        let messages = message_embed(tape, neighbors, gcn)?;
        let a_row = tape.gather(a, &[i], &others(n, i))?;
        let mixed = tape.matmul(a_row, messages)?;
        tape.add(mixed, own_term)?
    };
    tape.leaky_relu(pre, gcn.slope)
}

fn check_adjacency(tape: &Tape, a: Var, n: usize) -> Result<()> {
    if tape.shape(a) != [n, n] {
        return Err(Error::shape(
            "graph",
            format!(
                "adjacency {:?} does not match {n} frames",
                tape.shape(a)
            ),
        ));
    }
    Ok(())
}

/// All `N` node updates at once. Row `i` equals [`node_update`] for node `i`.
pub fn gcn_forward(tape: &mut Tape, h: Var, a: Var, gcn: &GcnVars) -> Result<Var> {
    let (n, _) = tape.value(h).dims2()?;
    check_adjacency(tape, a, n)?;
    let embedded = tape.matmul(h, gcn.w)?;
    let mixed = tape.adjacency_mix(a, embedded)?;
    tape.leaky_relu(mixed, gcn.slope)
}

/// Bidirectional recurrent layer over an `N x d` sequence.
///
/// Output row `i` is `tanh(V_f h_{f,i} + V_b h_{b,i} + b)`. The forward
/// direction visits frames `0..N`, the backward direction `N..0`, and each
/// direction's projected state `V h` becomes its next hidden state.
pub fn bilstm_forward(tape: &mut Tape, o: Var, p: &BiLstmVars) -> Result<Var> {
    let (n, d) = tape.value(o).dims2()?;
    if d % 2 != 0 {
        return Err(Error::Config(format!(
            "recurrent layer needs an even feature dimension, got {d}"
        )));
    }
    let rows = p.cell.embed_rows(d);
    for (name, var, shape) in [
        ("u_f", p.u_f, [rows, 2 * d]),
        ("u_b", p.u_b, [rows, 2 * d]),
        ("v_f", p.v_f, [d, d / 2]),
        ("v_b", p.v_b, [d, d / 2]),
        ("b", p.b, [1, d]),
        ("s0_f", p.s0_f, [1, d]),
        ("s0_b", p.s0_b, [1, d]),
    ] {
        if tape.shape(var) != shape {
            return Err(Error::Config(format!(
                "recurrent parameter {name} has shape {:?}, expected {shape:?} for d={d}",
                tape.shape(var)
            )));
        }
    }
    let inputs = (0..n)
        .map(|i| tape.row(o, i))
        .collect::<Result<Vec<_>>>()?;
    let forward = scan_direction(tape, &inputs, p.u_f, p.v_f, p.s0_f, p.cell, false)?;
    let backward = scan_direction(tape, &inputs, p.u_b, p.v_b, p.s0_b, p.cell, true)?;
    let fwd = tape.stack_rows(&forward)?;
    let bwd = tape.stack_rows(&backward)?;
    let both = tape.add(fwd, bwd)?;
    let biased = tape.add_row_vector(both, p.b)?;
    tape.tanh(biased)
}

/// Runs one direction and returns the projected state for each frame in
/// frame order.
fn scan_direction(
    tape: &mut Tape,
    inputs: &[Var],
    u: Var,
    v: Var,
    s0: Var,
    cell: RecurrentCell,
    reverse: bool,
) -> Result<Vec<Var>> {
    let n = inputs.len();
    let half = tape.shape(v)[1];
    let u_t = tape.transpose(u)?;
    let v_t = tape.transpose(v)?;
    let mut state = s0;
    let mut memory = match cell {
        RecurrentCell::Gated => Some(tape.leaf(Tensor::zeros(&[1, half]))?),
        RecurrentCell::Gateless => None,
    };
    let mut out = vec![None; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for i in order {
        let x = tape.concat_cols(&[state, inputs[i]])?;
        let z = tape.matmul(x, u_t)?;
        let hidden = match cell {
            RecurrentCell::Gateless => tape.sigmoid(z)?,
            RecurrentCell::Gated => {
                let c_prev = memory.expect("gated cell keeps a memory");
                let zi = tape.slice_cols(z, 0, half)?;
                let zf = tape.slice_cols(z, half, half)?;
                let zo = tape.slice_cols(z, 2 * half, half)?;
                let zg = tape.slice_cols(z, 3 * half, half)?;
                let gi = tape.sigmoid(zi)?;
                let gf = tape.sigmoid(zf)?;
                let go = tape.sigmoid(zo)?;
                let cand = tape.tanh(zg)?;
                let keep = tape.mul(gf, c_prev)?;
                let write = tape.mul(gi, cand)?;
                let c = tape.add(keep, write)?;
                memory = Some(c);
                let tc = tape.tanh(c)?;
                tape.mul(go, tc)?
            }
        };
        let projected = tape.matmul(hidden, v_t)?;
        state = projected;
        out[i] = Some(projected);
    }
    Ok(out.into_iter().map(|v| v.expect("every frame visited")).collect())
}

/// Graph convolution followed by the bidirectional layer.
pub fn graph_module_forward(
    tape: &mut Tape,
    h: Var,
    a: Var,
    gcn: &GcnVars,
    rnn: &BiLstmVars,
) -> Result<Var> {
    let o = gcn_forward(tape, h, a, gcn)?;
    bilstm_forward(tape, o, rnn)
}

/// Applies the modules in order, all reading the same adjacency matrix.
/// Returns the output of every module; the last one is the stack's output.
pub fn stacked_forward(
    tape: &mut Tape,
    h: Var,
    a: Var,
    modules: &[(GcnVars, BiLstmVars)],
) -> Result<Vec<Var>> {
    let d = tape.value(h).dims2()?.1;
    for (k, (gcn, _)) in modules.iter().enumerate() {
        if tape.shape(gcn.w) != [d, d] {
            return Err(Error::Config(format!(
                "module {k} has embedding {:?} but features have d={d}",
                tape.shape(gcn.w)
            )));
        }
    }
    let mut outputs = Vec::with_capacity(modules.len());
    let mut current = h;
    for (gcn, rnn) in modules {
        current = graph_module_forward(tape, current, a, gcn, rnn)?;
        outputs.push(current);
    }
    Ok(outputs)
}

/// Mean pairwise cosine distance between the rows of an `N x d` matrix.
/// Zero when all frames collapse onto one direction.
pub fn mean_pairwise_cosine_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    if n < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            let denom = norms[i] * norms[j];
            let cos = if denom > 0.0 { dot / denom } else { 1.0 };
            total += 1.0 - cos;
            pairs += 1;
        }
    }
    total / pairs as f64
}
