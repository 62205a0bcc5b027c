//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

use msflow_core::coupling::FlowChain;
use msflow_core::metrics::PixelData;
use msflow_core::params::{self, Params};
use msflow_core::trainer::{mean_loss, TrainItem};
use msflow_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, dims: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0f32..1.0) * scale)
}

/// Overwrites every trainable tensor with uniform noise of the given scale;
/// norm gains are kept near one.
pub fn randomize<P: Params>(p: &mut P, rng: &mut impl Rng, scale: f32) {
    p.visit_mut("", &mut |name, t| {
        let gain = name.ends_with("gain");
        for v in t.data_mut() {
            let r = rng.gen_range(-1.0f32..1.0) * scale;
            *v = if gain { 1.0 + r } else { r };
        }
    });
}

/// Fan-in scaled noise: conv weights get `k / sqrt(fan_in)`, vectors `k / 4`,
/// norm gains stay near one.
pub fn randomize_scaled<P: Params>(p: &mut P, rng: &mut impl Rng, k: f32) {
    p.visit_mut("", &mut |name, t| {
        let dims = t.dims().to_vec();
        let scale = if dims.len() == 4 { k / ((dims[1] * dims[2] * dims[3]) as f32).sqrt() } else { k / 4.0 };
        let gain = name.ends_with("gain");
        for v in t.data_mut() {
            let r = rng.gen_range(-1.0f32..1.0) * scale;
            *v = if gain { 1.0 + r } else { r };
        }
    });
}

/// Pick `count` random (tensor, element) coordinates across all parameters.
pub fn sample_param_coords<P: Params>(p: &P, rng: &mut impl Rng, count: usize) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = params::tensors(p).iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    (0..count)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            for (ti, &s) in sizes.iter().enumerate() {
                if k < s {
                    return (ti, k);
                }
                k -= s;
            }
            unreachable!()
        })
        .collect()
}

pub fn set_param<P: Params>(p: &mut P, coord: (usize, usize), value: f32) {
    params::tensors_mut(p)[coord.0].data_mut()[coord.1] = value;
}

pub fn get_param<P: Params>(p: &P, coord: (usize, usize)) -> f32 {
    params::tensors(p)[coord.0].data()[coord.1]
}

/// Relative error with a floor for gradients that are numerically zero.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite-difference Jacobian `J[i][j] = d f_i / d x_j` (row-major, f64).
pub fn fd_jacobian(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, h: f32) -> Vec<f64> {
    let n = x.len();
    let m = f(x).len();
    let mut jac = vec![0.0f64; m * n];
    for j in 0..n {
        let mut xp = x.clone();
        xp.data_mut()[j] += h;
        let mut xm = x.clone();
        xm.data_mut()[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for i in 0..m {
            jac[i * n + j] = (f64::from(fp.data()[i]) - f64::from(fm.data()[i])) / (2.0 * f64::from(h));
        }
    }
    jac
}

/// `log|det A|` by LU decomposition with partial pivoting.
pub fn log_abs_det(mut a: Vec<f64>, n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
        }
        let p = a[col * n + col];
        assert!(p != 0.0, "singular Jacobian");
        acc += p.abs().ln();
        for r in col + 1..n {
            let factor = a[r * n + col] / p;
            for k in col..n {
                a[r * n + k] -= factor * a[col * n + k];
            }
        }
    }
    acc
}

/// Direct nested-loop cross-correlation.
pub fn conv_oracle(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Tensor {
    let (ci_n, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (co_n, k) = (weight.dims()[0], weight.dims()[2]);
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let mut out = Tensor::zeros(&[co_n, ho, wo]);
    for co in 0..co_n {
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = f64::from(bias.data()[co]);
                for ci in 0..ci_n {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = x as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weight.data()[((co * ci_n + ci) * k + ky) * k + kx];
                            let iv = input.data()[(ci * h + iy as usize) * w + ix as usize];
                            acc += f64::from(wv) * f64::from(iv);
                        }
                    }
                }
                out.data_mut()[(co * ho + y) * wo + x] = acc as f32;
            }
        }
    }
    out
}

/// Sliding-window mean that divides by the full window area.
pub fn avg_pool_oracle(input: &Tensor, k: usize, s: usize, pad: usize) -> Tensor {
    let (c, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let ho = (h + 2 * pad - k) / s + 1;
    let wo = (w + 2 * pad - k) / s + 1;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for dy in 0..k {
                    for dx in 0..k {
                        let y = (oy * s + dy) as isize - pad as isize;
                        let x = (ox * s + dx) as isize - pad as isize;
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            acc += f64::from(input.data()[(ch * h + y as usize) * w + x as usize]);
                        }
                    }
                }
                out.data_mut()[(ch * ho + oy) * wo + ox] = (acc / (k * k) as f64) as f32;
            }
        }
    }
    out
}

/// Central-difference gradient of a scalar function of one tensor entry.
pub fn fd_scalar(mut f: impl FnMut(f32) -> f64, x0: f32, h: f32) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * f64::from(h))
}

/// Fourth-order central difference, `O(h^4)` truncation.
pub fn fd_scalar4(mut f: impl FnMut(f32) -> f64, x0: f32, h: f32) -> f64 {
    let h64 = f64::from(h);
    (-f(x0 + 2.0 * h) + 8.0 * f(x0 + h) - 8.0 * f(x0 - h) + f(x0 - 2.0 * h)) / (12.0 * h64)
}

/// Sum of squares over a list of tensors, in f64.
pub fn half_sq(ts: &[Tensor]) -> f64 {
    ts.iter().map(|t| t.sum_squares()).sum::<f64>() / 2.0
}

/// Two-component isotropic Gaussian mixture in 2-D.
pub const MEANS: [[f64; 2]; 2] = [[-2.5, -1.5], [2.5, 1.5]];
pub const SD: f64 = 0.5;

pub fn mixture_sample(r: &mut impl Rng) -> [f64; 2] {
    let m = MEANS[usize::from(r.gen_bool(0.5))];
    let (a, b): (f64, f64) = (StandardNormal.sample(r), StandardNormal.sample(r));
    [m[0] + SD * a, m[1] + SD * b]
}

pub fn mixture_log_density(x: [f64; 2]) -> f64 {
    let comp = |m: [f64; 2]| {
        let q = ((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)) / (SD * SD);
        -0.5 * q - (2.0 * PI * SD * SD).ln()
    };
    let (a, b) = (comp(MEANS[0]), comp(MEANS[1]));
    let hi = a.max(b);
    hi + (0.5 * ((a - hi).exp() + (b - hi).exp())).ln()
}

/// Monte Carlo differential entropy per element of the mixture.
pub fn entropy_oracle() -> f64 {
    let mut r = rng(99);
    let n = 400_000;
    -(0..n).map(|_| mixture_log_density(mixture_sample(&mut r))).sum::<f64>() / n as f64 / 2.0
}

pub fn toy_items(n: usize, seed: u64) -> Vec<TrainItem<Tensor>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let x = mixture_sample(&mut r);
            TrainItem::normal(format!("p{i}"), Tensor::new(vec![2, 1, 1], vec![x[0] as f32, x[1] as f32]).unwrap())
        })
        .collect()
}

pub fn per_element_nll(flow: &FlowChain, items: &[TrainItem<Tensor>]) -> f64 {
    let samples: Vec<&Tensor> = items.iter().map(|i| &i.sample).collect();
    mean_loss(flow, &samples).unwrap() + 0.5 * (2.0 * PI).ln()
}

/// Entropy per element of the moment-matched Gaussian.
pub fn gaussian_fit_entropy() -> f64 {
    let var = |d: usize| 0.5 * (MEANS[0][d].powi(2) + MEANS[1][d].powi(2)) + SD * SD;
    let cov = 0.5 * (MEANS[0][0] * MEANS[0][1] + MEANS[1][0] * MEANS[1][1]);
    let det = var(0) * var(1) - cov * cov;
    (1.0 + (2.0 * PI).ln() + 0.5 * det.ln()) / 2.0
}

pub fn pair_count_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Two-pass union-find labelling, returned as sets of pixel indices.
pub fn union_find_partition(mask: &[bool], h: usize, w: usize) -> Vec<BTreeSet<usize>> {
    let mut parent: Vec<usize> = (0..mask.len()).collect();
    fn find(p: &mut Vec<usize>, mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            let mut nbrs = vec![];
            if x > 0 {
                nbrs.push(i - 1);
            }
            if y > 0 {
                nbrs.push(i - w);
                if x > 0 {
                    nbrs.push(i - w - 1);
                }
                if x + 1 < w {
                    nbrs.push(i - w + 1);
                }
            }
            for n in nbrs.into_iter().filter(|&n| mask[n]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, n));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, BTreeSet<usize>> = Default::default();
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().insert(i);
    }
    let mut out: Vec<_> = groups.into_values().collect();
    out.sort_by_key(|g| *g.iter().next().unwrap());
    out
}

/// Straight evaluation of every distinct threshold.
pub fn exhaustive_pro(images: &[(Vec<f32>, Vec<bool>, usize, usize)], limit: f64) -> f64 {
    let mut regions = vec![];
    for (k, (_, mask, h, w)) in images.iter().enumerate() {
        for reg in union_find_partition(mask, *h, *w) {
            regions.push((k, reg));
        }
    }
    let mut thresholds: Vec<f32> = images.iter().flat_map(|i| i.0.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let negatives: usize = images.iter().map(|i| i.1.iter().filter(|&&m| !m).count()).sum();
    let (mut xs, mut ys) = (vec![0.0], vec![0.0]);
    for t in thresholds {
        let fp: usize = images.iter().map(|i| i.0.iter().zip(&i.1).filter(|(s, m)| !**m && **s >= t).count()).sum();
        let overlap: f64 = regions
            .iter()
            .map(|(k, reg)| reg.iter().filter(|&&p| images[*k].0[p] >= t).count() as f64 / reg.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        xs.push(fp as f64 / negatives as f64);
        ys.push(overlap);
    }
    let mut area = 0.0;
    for i in 1..xs.len() {
        if xs[i - 1] >= limit {
            break;
        }
        if xs[i] > limit {
            let y = ys[i - 1] + (ys[i] - ys[i - 1]) * (limit - xs[i - 1]) / (xs[i] - xs[i - 1]);
            area += (limit - xs[i - 1]) * (ys[i - 1] + y) / 2.0;
            break;
        }
        area += (xs[i] - xs[i - 1]) * (ys[i - 1] + ys[i]) / 2.0;
    }
    area / limit
}

pub fn as_pixels(images: &[(Vec<f32>, Vec<bool>, usize, usize)]) -> Vec<PixelData<'_>> {
    images.iter().map(|(s, m, h, w)| PixelData { scores: s, mask: m, height: *h, width: *w }).collect()
}
