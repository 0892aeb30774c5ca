//! Loop-based reference implementations and seeded invariant checks shared
//! by the oracle and acceptance test targets. Each check returns the largest
//! deviation it saw.

#![allow(dead_code)]

use fergcn_core::fusion::{
    classify, intensity_weights, intensity_weights_of, weighted_fusion, ClassifierParams, MeanAxis,
};
use fergcn_core::graph::{
    bilstm_forward, gcn_forward, node_update, BiLstmParams, GcnParams, RecurrentCell,
};
use fergcn_core::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 100;

pub type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn max_diff(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max)
}

fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// `o_i = leaky(sum_j A_ij h_j W)`.
pub fn gcn_oracle(h: &Mat, a: &Mat, w: &Mat, slope: f64) -> Mat {
    let n = h.len();
    let d = w[0].len();
    (0..n)
        .map(|i| {
            (0..d)
                .map(|c| {
                    let mut s = 0.0;
                    for j in 0..n {
                        for k in 0..h[j].len() {
                            s += a[i][j] * h[j][k] * w[k][c];
                        }
                    }
                    leaky(s, slope)
                })
                .collect()
        })
        .collect()
}

/// One direction of the gateless layer. Returns the projected state per
/// frame, in frame order.
fn direction_oracle(o: &Mat, u: &Mat, v: &Mat, s0: &[f64], reverse: bool) -> Mat {
    let n = o.len();
    let mut s = s0.to_vec();
    let mut out = vec![Vec::new(); n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for i in order {
        let x: Vec<f64> = s.iter().chain(o[i].iter()).copied().collect();
        let hidden: Vec<f64> = u
            .iter()
            .map(|row| sigmoid(row.iter().zip(&x).map(|(a, b)| a * b).sum()))
            .collect();
        s = v
            .iter()
            .map(|row| row.iter().zip(&hidden).map(|(a, b)| a * b).sum())
            .collect();
        out[i] = s.clone();
    }
    out
}

pub struct RnnWeights {
    pub u_f: Mat,
    pub u_b: Mat,
    pub v_f: Mat,
    pub v_b: Mat,
    pub b: Vec<f64>,
    pub s0_f: Vec<f64>,
    pub s0_b: Vec<f64>,
}

pub fn bilstm_oracle(o: &Mat, p: &RnnWeights) -> Mat {
    let f = direction_oracle(o, &p.u_f, &p.v_f, &p.s0_f, false);
    let b = direction_oracle(o, &p.u_b, &p.v_b, &p.s0_b, true);
    (0..o.len())
        .map(|i| (0..p.b.len()).map(|c| (f[i][c] + b[i][c] + p.b[c]).tanh()).collect())
        .collect()
}

pub fn weights_oracle(a: &Mat) -> Vec<f64> {
    let n = a.len();
    let means: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| a[i][j]).sum::<f64>() / n as f64)
        .collect();
    let m = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = means.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Graph convolution (batched and per node) against [`gcn_oracle`],
/// `N <= 6`, `d <= 5`.
pub fn gcn_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=5);
        let h = random_mat(n, d, &mut rng);
        let a = random_mat(n, n, &mut rng);
        let mut store = ParamStore::new();
        let gcn = GcnParams::init(&mut store, "m", d, &mut rng);
        let w = to_mat(store.get(gcn.w));

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape).unwrap();
        let hv = tape.leaf(tensor(&h)).unwrap();
        let av = tape.leaf(tensor(&a)).unwrap();
        let g = gcn.bind(&vars);
        let out = gcn_forward(&mut tape, hv, av, &g).unwrap();
        let want = gcn_oracle(&h, &a, &w, gcn.slope);
        worst = worst.max(max_diff(tape.value(out).data(), &flat(&want)));

        let i = rng.random_range(0..n);
        let row = node_update(&mut tape, hv, av, &g, i).unwrap();
        worst = worst.max(max_diff(tape.value(row).data(), &want[i]));
    }
    worst
}

/// Gateless bidirectional layer against [`bilstm_oracle`], `d` in {2, 4}.
pub fn bilstm_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=6);
        let d = 2 * rng.random_range(1..=2);
        let mut store = ParamStore::new();
        let p = BiLstmParams::init(&mut store, "m", d, RecurrentCell::Gateless, &mut rng).unwrap();
        // Non-zero bias and initial states so every term is exercised.
        for id in [p.b, p.s0_f, p.s0_b] {
            store.assign(id, tensor(&random_mat(1, d, &mut rng))).unwrap();
        }
        let o = random_mat(n, d, &mut rng);
        let weights = RnnWeights {
            u_f: to_mat(store.get(p.u_f)),
            u_b: to_mat(store.get(p.u_b)),
            v_f: to_mat(store.get(p.v_f)),
            v_b: to_mat(store.get(p.v_b)),
            b: store.get(p.b).data().to_vec(),
            s0_f: store.get(p.s0_f).data().to_vec(),
            s0_b: store.get(p.s0_b).data().to_vec(),
        };

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape).unwrap();
        let ov = tape.leaf(tensor(&o)).unwrap();
        let out = bilstm_forward(&mut tape, ov, &p.bind(&vars)).unwrap();
        worst = worst.max(max_diff(tape.value(out).data(), &flat(&bilstm_oracle(&o, &weights))));
    }
    worst
}

/// Intensity weights, weighted fusion and classifier logits against loops.
pub fn fusion_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(2..=6);
        let h = random_mat(n, d, &mut rng);
        let a = random_mat(n, n, &mut rng);
        let mut store = ParamStore::new();
        let cls = ClassifierParams::init(&mut store, k, d, &mut rng).unwrap();
        let bias = random_mat(1, k, &mut rng);
        store.assign(cls.bias, tensor(&bias)).unwrap();
        let wc = to_mat(store.get(cls.weight));

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape).unwrap();
        let hv = tape.leaf(tensor(&h)).unwrap();
        let av = tape.leaf(tensor(&a)).unwrap();
        let w = intensity_weights(&mut tape, av, MeanAxis::Column).unwrap();
        let r = weighted_fusion(&mut tape, hv, w).unwrap();
        let logits = classify(&mut tape, r, &cls.bind(&vars)).unwrap();

        let w_want = weights_oracle(&a);
        let r_want: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|i| w_want[i] * h[i][c]).sum())
            .collect();
        let l_want: Vec<f64> = (0..k)
            .map(|j| (0..d).map(|c| r_want[c] * wc[j][c]).sum::<f64>() + bias[0][j])
            .collect();
        worst = worst
            .max(max_diff(tape.value(w).data(), &w_want))
            .max(max_diff(tape.value(r).data(), &r_want))
            .max(max_diff(tape.value(logits).data(), &l_want));
    }
    worst
}

fn gcn_output(h: &Mat, a: &Mat, seed: u64) -> Tensor {
    let d = h[0].len();
    let mut store = ParamStore::new();
    let gcn = GcnParams::init(&mut store, "m", d, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape).unwrap();
    let hv = tape.leaf(tensor(h)).unwrap();
    let av = tape.leaf(tensor(a)).unwrap();
    let out = gcn_forward(&mut tape, hv, av, &gcn.bind(&vars)).unwrap();
    tape.value(out).clone()
}

/// Relabelling the frames (rows of `H`, rows and columns of `A`) relabels
/// the graph convolution output the same way.
pub fn permutation_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=5);
        let h = random_mat(n, d, &mut rng);
        let a = random_mat(n, n, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let ph: Mat = perm.iter().map(|&p| h[p].clone()).collect();
        let pa: Mat = perm
            .iter()
            .map(|&p| perm.iter().map(|&q| a[p][q]).collect())
            .collect();
        let out = gcn_output(&h, &a, seed);
        let pout = gcn_output(&ph, &pa, seed);
        for (i, &p) in perm.iter().enumerate() {
            worst = worst.max(max_diff(pout.row(i), out.row(p)));
        }
    }
    worst
}

/// With `A = 1/N` everywhere every output row is the same.
pub fn uniform_collapse_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(1..=5);
        let h = random_mat(n, d, &mut rng);
        let a = vec![vec![1.0 / n as f64; n]; n];
        let out = gcn_output(&h, &a, seed);
        for i in 1..n {
            worst = worst.max(max_diff(out.row(i), out.row(0)));
        }
    }
    worst
}

/// Reversing the sequence and exchanging the two directions' parameters
/// reverses the output rows, for both cells.
pub fn reversal_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..INSTANCES {
        let n = rng.random_range(1..=6);
        let d = 2 * rng.random_range(1..=3);
        let cell = if k % 2 == 0 { RecurrentCell::Gateless } else { RecurrentCell::Gated };
        let mut store = ParamStore::new();
        let p = BiLstmParams::init(&mut store, "m", d, cell, &mut rng).unwrap();
        let h = random_mat(n, d, &mut rng);
        let rev: Mat = h.iter().rev().cloned().collect();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape).unwrap();
        let bound = p.bind(&vars);
        let hv = tape.leaf(tensor(&h)).unwrap();
        let rv = tape.leaf(tensor(&rev)).unwrap();
        let out = bilstm_forward(&mut tape, hv, &bound).unwrap();
        let rout = bilstm_forward(&mut tape, rv, &bound.swapped()).unwrap();
        let (out, rout) = (tape.value(out), tape.value(rout));
        for i in 0..n {
            worst = worst.max(max_diff(out.row(i), rout.row(n - 1 - i)));
        }
    }
    worst
}

/// Adding a constant to every entry of `A` leaves the weights unchanged, and
/// the weights always sum to one. Returns the larger of the two deviations.
pub fn weight_invariance_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=6);
        let a = random_mat(n, n, &mut rng);
        let c: f64 = rng.random_range(-5.0..5.0);
        let shifted: Mat = a.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        let w = intensity_weights_of(&tensor(&a), MeanAxis::Column).unwrap();
        let ws = intensity_weights_of(&tensor(&shifted), MeanAxis::Column).unwrap();
        worst = worst
            .max(max_diff(w.values(), ws.values()))
            .max((w.values().iter().sum::<f64>() - 1.0).abs());
    }
    worst
}
