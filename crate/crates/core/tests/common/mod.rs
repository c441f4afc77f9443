//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use sbrl_core::gradcore::RngState;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

fn median_distance(v: &[f64]) -> f64 {
    let mut d = Vec::new();
    for i in 0..v.len() {
        for j in (i + 1)..v.len() {
            d.push((v[i] - v[j]).abs());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased full-kernel HSIC, `tr(K H L H) / n^2`, with RBF kernels at the
/// median heuristic bandwidth.
pub fn full_hsic(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let gram = |v: &[f64]| {
        let s = median_distance(v);
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = v[i] - v[j];
                k[i * n + j] = (-d * d / (2.0 * s * s)).exp();
            }
        }
        k
    };
    let center = |k: &mut Vec<f64>| {
        let row: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| k[i * n + j]).sum::<f64>() / n as f64)
            .collect();
        let all = row.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] += all - row[i] - row[j];
            }
        }
    };
    let mut k = gram(a);
    let mut l = gram(b);
    center(&mut k);
    center(&mut l);
    k.iter().zip(&l).map(|(x, y)| x * y).sum::<f64>() / (n * n) as f64
}

/// Direct biased MMD^2 between two row sets with an RBF kernel.
pub fn mmd2_direct(x: &[Vec<f64>], y: &[Vec<f64>], s: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d / (2.0 * s * s)).exp()
    };
    let avg = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut acc = 0.0;
        for a in p {
            for b in q {
                acc += k(a, b);
            }
        }
        acc / (p.len() * q.len()) as f64
    };
    avg(x, x) + avg(y, y) - 2.0 * avg(x, y)
}

/// 95th percentile of `stat(a, shuffled b)` over `rounds` shuffles.
pub fn permutation_threshold(
    a: &[f64],
    b: &[f64],
    rounds: usize,
    rng: &mut RngState,
    stat: impl Fn(&[f64], &[f64]) -> f64,
) -> f64 {
    let mut perm = b.to_vec();
    let mut null: Vec<f64> = (0..rounds)
        .map(|_| {
            perm.shuffle(rng);
            stat(a, &perm)
        })
        .collect();
    null.sort_by(f64::total_cmp);
    null[(rounds as f64 * 0.95).ceil() as usize - 1]
}

pub fn normals(n: usize, rng: &mut RngState) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn uniforms(n: usize, rng: &mut RngState) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}
