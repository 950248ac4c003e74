//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use fedstage_core::mim::{init_mim, mim_forward, mim_gradient, mim_loss, patchify, sample_mask, MaskPlan};
use fedstage_core::model::{
    attach_head, forward, gradient, init_model, Image, LabeledDataset, ModelArchitecture,
    ParameterSet,
};
use fedstage_core::rng;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so coordinates whose true
/// derivative is ~0 are judged on absolute error.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn random_image(side: usize, rng: &mut impl Rng) -> Image {
    Image::new(side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn perturbed(p: &ParameterSet, j: usize, delta: f64) -> ParameterSet {
    let mut q = p.clone();
    q.values_mut()[j] += delta;
    q
}

/// Largest relative error between `analytic` and central differences of `loss`.
pub fn max_fd_error(p: &ParameterSet, analytic: &[f64], loss: impl Fn(&ParameterSet) -> f64) -> f64 {
    (0..p.len())
        .map(|j| {
            let num = (loss(&perturbed(p, j, FD_STEP)) - loss(&perturbed(p, j, -FD_STEP)))
                / (2.0 * FD_STEP);
            rel_err(analytic[j], num)
        })
        .fold(0.0, f64::max)
}

/// Classifier gradient check on a tiny seeded model and batch.
pub fn cross_entropy_fd_error(seed: u64) -> f64 {
    let mut r = rng::stream(seed);
    let arch = ModelArchitecture::backbone(2, 4, 3, 5).unwrap();
    let model = attach_head(&init_model(&arch, seed), 3, seed + 1).unwrap();
    let images: Vec<Image> = (0..3).map(|_| random_image(4, &mut r)).collect();
    let batch: Vec<(&Image, usize)> = images.iter().zip([0, 2, 1]).collect();
    let (_, g) = gradient(&model, &batch).unwrap();
    let loss = |p: &ParameterSet| {
        batch.iter().map(|(x, y)| cross_entropy(&forward(p, x).unwrap(), *y)).sum::<f64>()
            / batch.len() as f64
    };
    max_fd_error(&model, &g, loss)
}

/// Reconstruction-loss gradient check over encoder, decoder and mask token.
pub fn mim_fd_error(seed: u64) -> f64 {
    let mut r = rng::stream(seed);
    let arch = ModelArchitecture::backbone(2, 6, 3, 4).unwrap();
    let params = init_mim(&arch, 5, seed).unwrap();
    let batch: Vec<(Vec<Vec<f64>>, MaskPlan)> = (0..2)
        .map(|_| {
            let img = random_image(6, &mut r);
            (patchify(&img, 2).unwrap(), sample_mask(9, 0.34, &mut r))
        })
        .collect();
    let (_, g) = mim_gradient(&params, &batch).unwrap();
    let loss = |p: &ParameterSet| {
        batch
            .iter()
            .map(|(x, plan)| mim_loss(&mim_forward(p, x, plan).unwrap(), x, plan).unwrap())
            .sum::<f64>()
            / batch.len() as f64
    };
    max_fd_error(&params, &g, loss)
}

/// Γ(k/2) for a positive integer k by the half-integer recursion.
fn gamma_half(k: u32) -> f64 {
    let (mut g, mut x) = if k.is_multiple_of(2) { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
    while x < k as f64 / 2.0 {
        g *= x;
        x += 1.0;
    }
    g
}

fn t_density(x: f64, dof: u32) -> f64 {
    let v = dof as f64;
    let c = gamma_half(dof + 1) / ((v * std::f64::consts::PI).sqrt() * gamma_half(dof));
    c * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + adaptive(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Two-tailed p-value as 1 − 2∫₀^|t| f(x) dx by adaptive Simpson quadrature.
pub fn p_value_by_quadrature(t: f64, dof: u32) -> f64 {
    let f = |x: f64| t_density(x, dof);
    let b = t.abs();
    if b == 0.0 {
        return 1.0;
    }
    let (fa, fm, fb) = (f(0.0), f(b / 2.0), f(b));
    let whole = simpson(0.0, b, fa, fm, fb);
    1.0 - 2.0 * adaptive(&f, 0.0, b, fa, fm, fb, whole, 1e-13, 50)
}

pub fn nearest_centroid_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
    let k = train.num_classes();
    let dim = train.images()[0].pixels().len();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (img, &y) in train.images().iter().zip(train.labels()) {
        counts[y] += 1;
        for (c, p) in centroids[y].iter_mut().zip(img.pixels()) {
            *c += p;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let dist = |c: &[f64], img: &Image| c.iter().zip(img.pixels()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let hits = test
        .images()
        .iter()
        .zip(test.labels())
        .filter(|(img, &y)| {
            let best = (0..k)
                .min_by(|&a, &b| dist(&centroids[a], img).total_cmp(&dist(&centroids[b], img)))
                .unwrap();
            best == y
        })
        .count();
    hits as f64 / test.len() as f64
}
