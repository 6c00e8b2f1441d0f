//! Independent 64-bit reference forward pass and finite-difference gradients.
#![allow(dead_code)]

use metalth::model::{Architecture, NetworkSpec};

/// Mean softmax cross-entropy of the network in f64.
pub fn loss_f64(spec: &NetworkSpec, params: &[Vec<f64>], inputs: &[f64], labels: &[usize]) -> f64 {
    loss_and_pattern(spec, params, inputs, labels).0
}

/// Loss plus the piecewise-linear region it was evaluated in: every ReLU's
/// sign and every pooling window's winner.
pub fn loss_and_pattern(spec: &NetworkSpec, params: &[Vec<f64>], inputs: &[f64], labels: &[usize]) -> (f64, Vec<u32>) {
    let n = labels.len();
    let per = inputs.len() / n;
    let mut total = 0.0;
    let mut pattern = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let logits = forward_one(spec, params, &inputs[i * per..(i + 1) * per], &mut pattern);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[label];
    }
    (total / n as f64, pattern)
}

fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>())
        .collect()
}

fn relu(v: &mut [f64], pattern: &mut Vec<u32>) {
    for x in v {
        pattern.push((*x > 0.0) as u32);
        *x = x.max(0.0);
    }
}

/// Same-padded 3x3 cross-correlation, weights `[out, in, 3, 3]`.
fn conv(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = vec![0.0; out * h * w];
    for o in 0..out {
        for r in 0..h {
            for s in 0..w {
                let mut acc = b[o];
                for ci in 0..c {
                    for dr in 0..3 {
                        for ds in 0..3 {
                            let (rr, ss) = (r as isize + dr as isize - 1, s as isize + ds as isize - 1);
                            if rr < 0 || ss < 0 || rr >= h as isize || ss >= w as isize {
                                continue;
                            }
                            acc += k[((o * c + ci) * 3 + dr) * 3 + ds] * x[(ci * h + rr as usize) * w + ss as usize];
                        }
                    }
                }
                y[(o * h + r) * w + s] = acc;
            }
        }
    }
    y
}

/// 2x2 max pool with partial windows at odd edges.
fn pool(x: &[f64], c: usize, h: usize, w: usize, pattern: &mut Vec<u32>) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = vec![f64::NEG_INFINITY; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ci in 0..c {
        for r in 0..h {
            for s in 0..w {
                let o = (ci * oh + r / 2) * ow + s / 2;
                let v = x[(ci * h + r) * w + s];
                if v > y[o] {
                    y[o] = v;
                    arg[o] = ((r % 2) * 2 + s % 2) as u32;
                }
            }
        }
    }
    pattern.extend(arg);
    (y, oh, ow)
}

pub fn forward_one(spec: &NetworkSpec, params: &[Vec<f64>], x: &[f64], pattern: &mut Vec<u32>) -> Vec<f64> {
    let layers = params.len() / 2;
    let mut h = x.to_vec();
    match spec.arch {
        Architecture::Conv4Tiny => {
            let (mut c, mut hh, mut ww) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
            for l in 0..layers - 1 {
                let mut y = conv(&h, c, hh, ww, &params[2 * l], &params[2 * l + 1]);
                relu(&mut y, pattern);
                c = params[2 * l + 1].len();
                let (p, oh, ow) = pool(&y, c, hh, ww, pattern);
                h = p;
                hh = oh;
                ww = ow;
            }
        }
        Architecture::MlpTiny => {
            for l in 0..layers - 1 {
                h = dense(&h, &params[2 * l], &params[2 * l + 1]);
                relu(&mut h, pattern);
            }
        }
    }
    dense(&h, &params[2 * layers - 2], &params[2 * layers - 1])
}

/// Central difference of [`loss_f64`] at every coordinate; `None` where the
/// two probes land in different linear regions than the base point, so the
/// difference straddles a kink and estimates no derivative.
pub fn numeric_gradients(
    spec: &NetworkSpec,
    params: &[Vec<f64>],
    inputs: &[f64],
    labels: &[usize],
    h: f64,
) -> Vec<Vec<Option<f64>>> {
    let base = loss_and_pattern(spec, params, inputs, labels).1;
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for t in 0..p.len() {
        let mut g = Vec::with_capacity(p[t].len());
        for j in 0..p[t].len() {
            let orig = p[t][j];
            p[t][j] = orig + h;
            let (up, pu) = loss_and_pattern(spec, &p, inputs, labels);
            p[t][j] = orig - h;
            let (down, pd) = loss_and_pattern(spec, &p, inputs, labels);
            p[t][j] = orig;
            g.push((pu == base && pd == base).then(|| (up - down) / (2.0 * h)));
        }
        out.push(g);
    }
    out
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn rel_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}
