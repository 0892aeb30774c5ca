//! Weight-curve CSVs and per-frame spatial energy heatmaps.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::IntensityWeights;
use crate::model::Model;
use crate::synth::Dataset;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Header `w_1..w_N` and one row of values.
pub fn weights_csv(values: &[f64]) -> String {
    let header: Vec<String> = (1..=values.len()).map(|i| format!("w_{i}")).collect();
    let row: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("{}\n{}\n", header.join(","), row.join(","))
}

/// Writes `weights.csv` (raw softmax weights) and `weights_sigmoid.csv`
/// (logistic of the raw weights, for plotting) into `dir`.
pub fn export_weights(weights: &IntensityWeights, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw = dir.join("weights.csv");
    let sig = dir.join("weights_sigmoid.csv");
    std::fs::write(&raw, weights_csv(weights.values())).map_err(|e| Error::io(&raw, e))?;
    std::fs::write(&sig, weights_csv(&weights.sigmoid_mapped())).map_err(|e| Error::io(&sig, e))?;
    Ok(vec![raw, sig])
}

/// Plain-text graymap with maximum value 255. Values are scaled by the
/// map's maximum; an all-zero map stays zero.
pub fn pgm(map: &[f64], rows: usize, cols: usize) -> String {
    let max = map.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = map[r * cols..(r + 1) * cols]
            .iter()
            .map(|v| {
                let q = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
                (q as u8).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Spatial energy maps for every frame, upsampled to frame resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub rows: usize,
    pub cols: usize,
    /// `before[t]` is frame `t`'s map from the encoder output.
    pub before: Vec<Vec<f64>>,
    /// `after[t]` is frame `t`'s map from the last graph module's output.
    pub after: Vec<Vec<f64>>,
}

/// Back-projects `N x d` features through the encoder's projection matrix
/// onto the pooled spatial grid and sums squared activations over channels.
fn energy(features: &Tensor, proj: &Tensor, channels: usize, ph: usize, pw: usize, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = features.rows();
    let d = features.cols();
    let flat = proj.rows();
    let (sy, sx) = (rows / ph, cols / pw);
    (0..n)
        .map(|t| {
            let f = features.row(t);
            let back: Vec<f64> = (0..flat)
                .map(|j| (0..d).map(|k| proj.at(j, k) * f[k]).sum())
                .collect();
            let mut pooled = vec![0.0; ph * pw];
            for c in 0..channels {
                for p in 0..ph * pw {
                    pooled[p] += back[c * ph * pw + p].powi(2);
                }
            }
            let mut full = vec![0.0; rows * cols];
            for r in 0..rows {
                for col in 0..cols {
                    full[r * cols + col] = pooled[(r / sy) * pw + col / sx];
                }
            }
            full
        })
        .collect()
}

/// Per-frame energy maps averaged over the validation clips of `ds`.
pub fn heatmaps(model: &Model, ds: &Dataset) -> Result<Heatmaps> {
    let cfg = model.config();
    let enc = cfg.encoder();
    let (ph, pw) = enc.pooled();
    let proj = model.params().get(model.encoder_params().proj_weight).clone();
    let val = ds.split().val;
    let mut before = vec![vec![0.0; cfg.rows * cfg.cols]; cfg.frames];
    let mut after = before.clone();
    for &i in &val {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &ds.samples[i].images)?;
        let b = energy(tape.value(out.encoded), &proj, enc.channels[1], ph, pw, cfg.rows, cfg.cols);
        let a = energy(tape.value(out.final_features()), &proj, enc.channels[1], ph, pw, cfg.rows, cfg.cols);
        for t in 0..cfg.frames {
            before[t].iter_mut().zip(&b[t]).for_each(|(x, y)| *x += y);
            after[t].iter_mut().zip(&a[t]).for_each(|(x, y)| *x += y);
        }
    }
    let scale = 1.0 / val.len().max(1) as f64;
    for m in before.iter_mut().chain(after.iter_mut()) {
        m.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Heatmaps {
        rows: cfg.rows,
        cols: cfg.cols,
        before,
        after,
    })
}

/// Writes `heatmap_before_fXX.pgm` and `heatmap_after_fXX.pgm` per frame.
pub fn export_heatmaps(maps: &Heatmaps, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (stage, set) in [("before", &maps.before), ("after", &maps.after)] {
        for (t, m) in set.iter().enumerate() {
            let path = dir.join(format!("heatmap_{stage}_f{:02}.pgm", t + 1));
            std::fs::write(&path, pgm(m, maps.rows, maps.cols)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Spearman rank correlation between `values` and their indices. Ties get
/// their average rank.
pub fn spearman_with_index(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let idx: Vec<f64> = (0..n).map(|i| i as f64).collect();
    pearson(&ranks, &idx)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
