//! Nested-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use drag::correlation::AttentionParams;
use drag::kmeans::wcss;
use drag::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// `F_w[b,i,x,y] = (1/C)·Σ_c F_b[b,c,x,y]·cr′[b,i,c]`.
pub fn features_oracle(fb: &Tensor, cr: &Tensor) -> Tensor {
    let s = fb.shape();
    let n = cr.shape()[1];
    Tensor::from_fn(&[s[0], n, s[2], s[3]], |i| {
        let sum: f64 = (0..s[1])
            .map(|c| fb.get(&[i[0], c, i[2], i[3]]) * cr.get(&[i[0], i[1], c]))
            .sum();
        sum / s[1] as f64
    })
}

/// First row-major maximum of map `(b, i)`.
pub fn peak_oracle(fw: &Tensor, b: usize, i: usize) -> (usize, usize) {
    let (h, w) = (fw.shape()[2], fw.shape()[3]);
    let mut best = (0, 0);
    for x in 0..h {
        for y in 0..w {
            if fw.get(&[b, i, x, y]) > fw.get(&[b, i, best.0, best.1]) {
                best = (x, y);
            }
        }
    }
    best
}

pub fn dis_oracle(fw: &Tensor) -> f64 {
    let &[bn, n, h, w] = fw.shape() else { unreachable!() };
    let mut total = 0.0;
    for b in 0..bn {
        for i in 0..n {
            let (tx, ty) = peak_oracle(fw, b, i);
            for x in 0..h {
                for y in 0..w {
                    let v = fw.get(&[b, i, x, y]);
                    let d2 = (x as f64 - tx as f64).powi(2) + (y as f64 - ty as f64).powi(2);
                    total += v * v * d2;
                }
            }
        }
    }
    total / bn as f64
}

pub fn div_oracle(fw: &Tensor) -> f64 {
    let &[bn, n, h, w] = fw.shape() else { unreachable!() };
    if n == 1 {
        return 0.0;
    }
    let mut total = 0.0;
    for b in 0..bn {
        let mut mrg = 0.0;
        for i in 0..n {
            for x in 0..h {
                for y in 0..w {
                    mrg += fw.get(&[b, i, x, y]);
                }
            }
        }
        mrg /= (n * h * w) as f64;
        for i in 0..n {
            for x in 0..h {
                for y in 0..w {
                    let rival = (0..n)
                        .filter(|&j| j != i)
                        .map(|j| fw.get(&[b, j, x, y]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let v = fw.get(&[b, i, x, y]);
                    total += v * v * (rival - mrg).powi(2);
                }
            }
        }
    }
    total / bn as f64
}

/// Binary cross-entropy of `cr′` against a hard `N×C` matrix, batch mean.
pub fn bce_oracle(cr_prime: &Tensor, cr: &Tensor) -> f64 {
    let &[b, n, c] = cr_prime.shape() else { unreachable!() };
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..n {
            for j in 0..c {
                let y = cr.get(&[i, j]);
                let p = cr_prime.get(&[bi, i, j]);
                total -= y * (p + 1e-12).ln() + (1.0 - y) * (1.0 - p + 1e-12).ln();
            }
        }
    }
    total / b as f64
}

/// Cluster labels with every one of the `n` clusters nonempty.
pub fn random_labels(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..c).map(|j| if j < n { j } else { rng.gen_range(0..n) }).collect();
    for j in (1..c).rev() {
        labels.swap(j, rng.gen_range(0..=j));
    }
    labels
}

/// Smallest WCSS over every split of the points into two nonempty groups.
pub fn exhaustive_two_partition(points: &[Vec<f64>]) -> f64 {
    let c = points.len();
    (1..(1u32 << (c - 1)))
        .map(|mask| {
            let labels: Vec<usize> = (0..c).map(|j| ((mask >> j) & 1) as usize).collect();
            wcss(points, &labels, 2)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, r)| x * r[j]).sum()).collect())
        .collect()
}

/// The trailing matrix of `t` at leading index `lead`, as rows.
pub fn rows(t: &Tensor, lead: &[usize]) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut idx = lead.to_vec();
    idx.extend([0, 0]);
    let k = idx.len();
    (0..r)
        .map(|i| {
            (0..c)
                .map(|j| {
                    idx[k - 2] = i;
                    idx[k - 1] = j;
                    t.get(&idx)
                })
                .collect()
        })
        .collect()
}

pub fn plus_bias(m: Vec<Vec<f64>>, b: &Tensor) -> Vec<Vec<f64>> {
    m.into_iter().map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect()).collect()
}

pub fn relu_rows(m: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    m.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn max_diff(a: &[Vec<f64>], t: &Tensor, lead: &[usize]) -> f64 {
    let b = rows(t, lead);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Per image: the softmax factor and `A = softmax(Q·Kᵀ/√d_k)·V`.
pub fn attention_oracle(fw: &Tensor, p: &AttentionParams) -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let &[b, n, h, w] = fw.shape() else { unreachable!() };
    let flat = fw.clone().reshape(&[b, n, h * w]).unwrap();
    let dk = p.wq.shape()[1] as f64;
    (0..b)
        .map(|bi| {
            let x = rows(&flat, &[bi]);
            let q = plus_bias(matmul(&x, &rows(&p.wq, &[])), &p.bq);
            let k = matmul(&x, &rows(&p.wk, &[]));
            let v = plus_bias(matmul(&x, &rows(&p.wv, &[])), &p.bv);
            let s: Vec<Vec<f64>> = q
                .iter()
                .map(|qi| {
                    let logits: Vec<f64> = k
                        .iter()
                        .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                        .collect();
                    softmax_row(&logits)
                })
                .collect();
            let a = matmul(&s, &v);
            (s, a)
        })
        .collect()
}

/// `D̂^{-1/2}·Â·D̂^{-1/2}` with `Â = (relu(A) + relu(A)ᵀ)/2 + I`.
pub fn adjacency_oracle(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let hat: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| 0.5 * (a[i][j].max(0.0) + a[j][i].max(0.0)) + if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let d: Vec<f64> = hat.iter().map(|r| r.iter().sum::<f64>().max(1e-6)).collect();
    (0..n)
        .map(|i| (0..n).map(|j| hat[i][j] / (d[i] * d[j]).sqrt()).collect())
        .collect()
}

/// Class probabilities and mean cross-entropy of `affine(F_c ⊕ F_p)` for
/// `d×1` region maps.
pub fn classify_oracle(fc: &Tensor, fp: &Tensor, weight: &Tensor, bias: &Tensor, labels: &[u8]) -> (Vec<Vec<f64>>, f64) {
    let (b, n, d) = (fp.shape()[0], fp.shape()[1], fp.shape()[2]);
    let mut probs = Vec::new();
    let mut loss = 0.0;
    for bi in 0..b {
        let mut input: Vec<f64> = (0..d).map(|k| fc.get(&[bi, 0, k, 0])).collect();
        for r in 0..n {
            input.extend((0..d).map(|k| fp.get(&[bi, r, k, 0])));
        }
        let logits: Vec<f64> = (0..2)
            .map(|o| input.iter().enumerate().map(|(k, x)| x * weight.get(&[k, o])).sum::<f64>() + bias.data()[o])
            .collect();
        let p = softmax_row(&logits);
        loss -= (p[labels[bi] as usize] + 1e-12).ln();
        probs.push(p);
    }
    (probs, loss / b as f64)
}
