//! Training objectives.
//!
//! The data-uncertainty loss treats the scalar variance `sigma2` as a
//! temperature on a cosine classifier: `L_d = CE(mu) / sigma2 + ln(sigma2)`,
//! where `CE` is the temperature-1 cross-entropy on l2-normalized features
//! and class weights. The sampling-based baseline (`dnet_loss`) draws a
//! reparameterized feature instead and regularizes the Gaussian entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::HeadOutput;
use crate::numcore::{Tape, Tensor, Var};

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Added to squared distances before the square root in the triplet loss.
pub const DIST_EPS: f64 = 1e-12;

/// Scalar summary of one evaluation of the total objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub data_term: f64,
    pub triplet_term: f64,
    pub ce_inner: f64,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + crate::numcore::NORM_EPS;
    v.iter().map(|x| x / n).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn cosine_scores(mu: &[f64], classifier: &Tensor) -> Result<Vec<f64>> {
    let (rows, c) = classifier
        .dims2()
        .ok_or_else(|| Error::shape("classifier", classifier.shape(), &[]))?;
    if mu.len() != c {
        return Err(Error::shape("posterior", &[mu.len()], classifier.shape()));
    }
    let m = normalized(mu);
    Ok((0..rows)
        .map(|i| {
            let w = normalized(classifier.row(i));
            w.iter().zip(&m).map(|(a, b)| a * b).sum()
        })
        .collect())
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("variance must be positive, got {sigma2}")))
    }
}

/// Class posterior `softmax(w_i . mu / sigma2)` over l2-normalized vectors.
pub fn posterior(mu: &[f64], classifier: &Tensor, sigma2: f64) -> Result<Vec<f64>> {
    check_sigma2(sigma2)?;
    let scores: Vec<f64> = cosine_scores(mu, classifier)?
        .into_iter()
        .map(|s| s / sigma2)
        .collect();
    let lse = log_sum_exp(&scores);
    Ok(scores.into_iter().map(|s| (s - lse).exp()).collect())
}

/// `-ln posterior(label)` at temperature `sigma2`, without the approximation
/// used by [`data_uncertainty_loss`].
pub fn exact_nll(mu: &[f64], classifier: &Tensor, sigma2: f64, label: usize) -> Result<f64> {
    check_sigma2(sigma2)?;
    let scores: Vec<f64> = cosine_scores(mu, classifier)?
        .into_iter()
        .map(|s| s / sigma2)
        .collect();
    let s = *scores
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range")))?;
    Ok(log_sum_exp(&scores) - s)
}

/// Temperature-1 cross-entropy on normalized vectors.
pub fn cross_entropy(mu: &[f64], classifier: &Tensor, label: usize) -> Result<f64> {
    exact_nll(mu, classifier, 1.0, label)
}

/// `ce / sigma2 + ln(sigma2)` on plain numbers.
pub fn data_uncertainty_value(ce: f64, sigma2: f64) -> Result<f64> {
    check_sigma2(sigma2)?;
    Ok(ce / sigma2 + sigma2.ln())
}

/// `[batch, c]` features against `[classes, c]` weights, both row-normalized.
pub fn cosine_logits<'t>(mu: Var<'t>, classifier: Var<'t>) -> Result<Var<'t>> {
    mu.l2_normalize()?
        .matmul(classifier.l2_normalize()?.transpose()?)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape("labels", &[batch], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    Ok(())
}

/// Per-row cross-entropy of `[batch, classes]` logits.
pub fn cross_entropy_rows<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    check_labels(labels, shape[0], shape[1])?;
    logits.logsumexp_last()?.sub(logits.pick_per_row(labels)?)
}

/// Per-sample `(L_d, ce_inner)`, each `[batch]`.
pub fn data_uncertainty_loss<'t>(
    mu: Var<'t>,
    sigma2: Var<'t>,
    labels: &[usize],
    classifier: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if let Some(&bad) = sigma2.value().data().iter().find(|&&s| s <= 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {bad}")));
    }
    let ce = cross_entropy_rows(cosine_logits(mu, classifier)?, labels)?;
    let l_d = ce.div(sigma2)?.add(sigma2.ln()?)?;
    Ok((l_d, ce))
}

/// Euclidean distances between l2-normalized rows, `[batch, batch]`.
pub fn pairwise_distances<'t>(features: Var<'t>) -> Result<Var<'t>> {
    features
        .l2_normalize()?
        .pairwise_sq_dist()?
        .add_scalar(DIST_EPS)?
        .sqrt()
}

/// Batch-hard hinge over a precomputed distance matrix.
///
/// Anchors without both a positive and a negative are left out of the mean.
pub fn batch_hard_triplet<'t>(dist: Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    let d = dist.value();
    let b = labels.len();
    if d.shape() != [b, b] {
        return Err(Error::shape("batch_hard_triplet", d.shape(), &[b, b]));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::invalid("triplet loss needs at least two identities"));
    }
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for i in 0..b {
        let row = d.row(i);
        let hardest_pos = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .max_by(|&x, &y| row[x].total_cmp(&row[y]).then(y.cmp(&x)));
        let hardest_neg = (0..b)
            .filter(|&j| labels[j] != labels[i])
            .min_by(|&x, &y| row[x].total_cmp(&row[y]).then(x.cmp(&y)));
        if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
            pos_idx.push(i * b + p);
            neg_idx.push(i * b + n);
        }
    }
    if pos_idx.is_empty() {
        return Err(Error::invalid("triplet loss needs an identity with two samples"));
    }
    dist.gather(&pos_idx)?
        .sub(dist.gather(&neg_idx)?)?
        .add_scalar(margin)?
        .relu()?
        .mean()
}

pub fn triplet_loss<'t>(features: Var<'t>, labels: &[usize], margin: f64) -> Result<Var<'t>> {
    batch_hard_triplet(pairwise_distances(features)?, labels, margin)
}

/// `L_d` (batch mean) plus batch-hard triplet on the pooled features.
///
/// `class_labels` index classifier rows; `identities` drive triplet mining.
pub fn total_loss<'t>(
    out: &HeadOutput<'t>,
    class_labels: &[usize],
    identities: &[usize],
    classifier: Var<'t>,
    margin: f64,
) -> Result<(Var<'t>, LossReport)> {
    let (l_d, ce) = data_uncertainty_loss(out.mu, out.sigma2, class_labels, classifier)?;
    let data_term = l_d.mean()?;
    let triplet = triplet_loss(out.mu, identities, margin)?;
    let total = data_term.add(triplet)?;
    let report = LossReport {
        total: total.item(),
        data_term: data_term.item(),
        triplet_term: triplet.item(),
        ce_inner: ce.mean()?.item(),
    };
    Ok((total, report))
}

/// Differential entropy of `N(mu, diag(sigma2))`.
pub fn gaussian_entropy(sigma2: &[f64]) -> f64 {
    let two_pi_e = 2.0 * std::f64::consts::PI * std::f64::consts::E;
    sigma2.iter().map(|s| 0.5 * (two_pi_e * s).ln()).sum()
}

/// Baseline regularizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DNetConfig {
    pub lambda: f64,
    pub entropy_floor: f64,
}

impl DNetConfig {
    /// `lambda = 0.01`, floor = entropy of a Gaussian with variance 0.5 per dimension.
    pub fn for_dim(c: usize) -> Self {
        DNetConfig {
            lambda: 0.01,
            entropy_floor: gaussian_entropy(&vec![0.5; c]),
        }
    }
}

/// Per-sample `CE(mu + eps * sigma) + lambda * max(0, floor - H)`, `[batch]`.
///
/// `sigma` holds standard deviations; `noise` is the `eps` draw, same shape.
pub fn dnet_loss_with_noise<'t>(
    mu: Var<'t>,
    sigma: Var<'t>,
    labels: &[usize],
    classifier: Var<'t>,
    cfg: &DNetConfig,
    noise: &Tensor,
) -> Result<Var<'t>> {
    let sv = sigma.value();
    if sv.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("baseline sigma must be positive element-wise"));
    }
    if sv.shape() != mu.shape().as_slice() {
        return Err(Error::shape("dnet_loss", &mu.shape(), sv.shape()));
    }
    if noise.shape() != sv.shape() {
        return Err(Error::shape("dnet_loss noise", sv.shape(), noise.shape()));
    }
    let tape = mu.tape();
    let z = mu.add(tape.constant(noise.clone()).mul(sigma)?)?;
    let ce = cross_entropy_rows(cosine_logits(z, classifier)?, labels)?;

    let c = sv.shape()[1];
    let half_log_two_pi_e = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    // H = sum ln(sigma) + c/2 ln(2 pi e), one value per row
    let entropy = sigma
        .ln()?
        .mean_axis(1)?
        .mul_scalar(c as f64)?
        .add_scalar(c as f64 * half_log_two_pi_e)?;
    let shortfall = entropy.neg()?.add_scalar(cfg.entropy_floor)?.relu()?;
    ce.add(shortfall.mul_scalar(cfg.lambda)?)
}

pub fn dnet_loss<'t>(
    mu: Var<'t>,
    sigma: Var<'t>,
    labels: &[usize],
    classifier: Var<'t>,
    cfg: &DNetConfig,
    seed: u64,
) -> Result<Var<'t>> {
    let shape = mu.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal(&shape, &mut rng);
    dnet_loss_with_noise(mu, sigma, labels, classifier, cfg, &noise)
}

pub(crate) fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

/// Baseline objective for a batch: mean D-Net loss plus batch-hard triplet.
pub fn dnet_total_loss<'t>(
    out: &HeadOutput<'t>,
    class_labels: &[usize],
    identities: &[usize],
    classifier: Var<'t>,
    margin: f64,
    cfg: &DNetConfig,
    noise: &Tensor,
) -> Result<(Var<'t>, LossReport)> {
    let sigma = out.sigma2_channels.sqrt()?;
    let per_sample = dnet_loss_with_noise(out.mu, sigma, class_labels, classifier, cfg, noise)?;
    let data_term = per_sample.mean()?;
    let triplet = triplet_loss(out.mu, identities, margin)?;
    let total = data_term.add(triplet)?;
    let ce = cross_entropy_rows(cosine_logits(out.mu, classifier)?, class_labels)?;
    let report = LossReport {
        total: total.item(),
        data_term: data_term.item(),
        triplet_term: triplet.item(),
        ce_inner: ce.mean()?.item(),
    };
    Ok((total, report))
}

/// Convenience: a fresh tape evaluation of `L_d` for one plain sample.
pub fn data_uncertainty_scalar(
    mu: &[f64],
    sigma2: f64,
    label: usize,
    classifier: &Tensor,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let m = tape.constant(Tensor::matrix(1, mu.len(), mu.to_vec())?);
    let s = tape.constant(Tensor::vector(vec![sigma2])?);
    let w = tape.constant(classifier.clone());
    let (l, ce) = data_uncertainty_loss(m, s, &[label], w)?;
    Ok((l.item(), ce.item()))
}
