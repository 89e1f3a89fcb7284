//! Brute-force nested-loop versions of the losses, shared with the acceptance run.
#![allow(dead_code)]

use ssa_core::data::SplitMix64;
use ssa_core::{LabelMask, Tensor};

pub const IGNORE: u32 = 255;

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn random_labels(h: usize, w: usize, k: usize, rng: &mut SplitMix64, ignore_frac: f64) -> LabelMask {
    // blocky maps so that boundaries and interiors both exist
    let bh = 1 + rng.below(3);
    let bw = 1 + rng.below(3);
    let base: Vec<u32> = (0..36).map(|_| rng.below(k) as u32).collect();
    let mut m = LabelMask::from_fn(h, w, |y, x| base[(y / bh) * 6 + x / bw]);
    for y in 0..h {
        for x in 0..w {
            if rng.next_f64() < ignore_frac {
                m.set(y, x, IGNORE);
            }
        }
    }
    m
}

pub fn ce_oracle(o: &Tensor<f64>, mg: &LabelMask) -> f64 {
    let k = o.shape()[2];
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &l) in mg.labels().iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let p = softmax(&o.data()[i * k..(i + 1) * k]);
        sum -= p[l as usize].ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn dice_oracle(o: &Tensor<f64>, mg: &LabelMask) -> f64 {
    let k = o.shape()[2];
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..k {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for (i, &l) in mg.labels().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let p = softmax(&o.data()[i * k..(i + 1) * k])[c];
            let g = if l as usize == c { 1.0 } else { 0.0 };
            inter += p * g;
            ps += p;
            gs += g;
        }
        if gs > 0.0 {
            present += 1;
            total += 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
        }
    }
    if present == 0 {
        0.0
    } else {
        total / present as f64
    }
}

/// Band by definition: within Chebyshev distance r of a pixel that has a
/// differently-labelled (non-ignored) 4-neighbour.
pub fn band_oracle(mg: &LabelMask, edge: usize) -> Vec<bool> {
    let (h, w) = (mg.height() as isize, mg.width() as isize);
    let r = ((edge - 1) / 2) as isize;
    let lab = |y: isize, x: isize| mg.get(y as usize, x as usize);
    let is_seed = |y: isize, x: isize| {
        let l = lab(y, x);
        l != IGNORE
            && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0 && xx >= 0 && yy < h && xx < w && lab(yy, xx) != IGNORE && lab(yy, xx) != l
            })
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut hit = false;
            for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                    hit |= is_seed(yy, xx);
                }
            }
            out.push(hit);
        }
    }
    out
}

/// Response distillation written out term by term.
pub fn response_oracle(o: &Tensor<f64>, o_hat: &Tensor<f64>, mg: &LabelMask, edge: usize) -> f64 {
    let k = o.shape()[2];
    let hw = mg.len();
    let band = band_oracle(mg, edge);
    let mut lrd = vec![0.0; hw];
    let mut ent = vec![0.0; hw];
    for i in 0..hw {
        let q = softmax(&o_hat.data()[i * k..(i + 1) * k]);
        let p = softmax(&o.data()[i * k..(i + 1) * k]);
        for j in 0..k {
            lrd[i] -= q[j] * p[j].ln();
            ent[i] -= q[j] * q[j].ln();
        }
    }
    let mut sum = 0.0;
    let mut terms = 0;
    for c in 0..k {
        for want_band in [true, false] {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..hw {
                let l = mg.labels()[i];
                if l == IGNORE || l as usize != c || band[i] != want_band {
                    continue;
                }
                num += ent[i] * lrd[i];
                den += ent[i];
            }
            if den >= 1e-12 {
                sum += num / den;
                terms += 1;
            }
        }
    }
    if terms == 0 {
        0.0
    } else {
        sum / terms as f64
    }
}

pub fn relation(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (k, d) = (x.shape()[0], x.shape()[1]);
    (0..k)
        .map(|i| {
            let row: Vec<f64> = (0..k)
                .map(|j| (0..d).map(|c| x.at(&[i, c]) * x.at(&[j, c])).sum())
                .collect();
            softmax(&row)
        })
        .collect()
}

pub fn semantic_oracle(sp: &Tensor<f64>, sp_hat: &Tensor<f64>) -> f64 {
    let k = sp.shape()[0];
    let (m, mh) = (relation(sp), relation(sp_hat));
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let v = m[i][j] - mh[i][j];
            if i != j && v > 0.0 {
                s += v;
            }
        }
    }
    s / k as f64
}

pub fn spatial_oracle(pp: &Tensor<f64>, pp_hat: &Tensor<f64>) -> f64 {
    let (k, d) = (pp.shape()[0], pp.shape()[1]);
    let mut s = 0.0;
    for r in 0..k {
        let p = softmax(&pp.data()[r * d..(r + 1) * d]);
        let q = softmax(&pp_hat.data()[r * d..(r + 1) * d]);
        for c in 0..d {
            s -= p[c] * q[c].ln();
        }
    }
    s / k as f64
}
