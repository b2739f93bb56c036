//! Monte-Carlo aggregation over Bayesian-layer mask draws.
//!
//! One [`MaskSet`] is drawn per evaluation run and shared by every sample, so
//! all samples see the same `T` networks. Per sample:
//! - feature `mu_bar` is the mean of the pooled `mu_t`,
//! - data uncertainty is the mean of the scalar `sigma2_t`,
//! - model uncertainty is the population variance (divisor `T`) of the
//!   pre-pooling grids `mu_hat_t`, averaged over all grid elements.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{sample_mask_with, Mask, Network};
use crate::numcore::{Tape, Tensor};
use crate::synthdata::LabeledSample;
use crate::textio::{self, fmt_f64, join_f64, LineCtx};

pub const DEFAULT_T: usize = 10;

/// Largest batch pushed through one tape during embedding.
const CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding {
    pub sample_id: usize,
    pub identity: usize,
    pub camera: usize,
    pub mean: Vec<f64>,
    pub data_uncertainty: f64,
    pub model_uncertainty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub seed: u64,
    masks: Vec<Mask>,
}

impl MaskSet {
    pub fn sample(net: &Network, t: usize, seed: u64) -> Result<Self> {
        if t == 0 {
            return Err(Error::invalid("mask set needs at least one draw"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let masks = (0..t)
            .map(|_| sample_mask_with(net.rho, net.dims.c, &mut rng))
            .collect::<Result<_>>()?;
        Ok(MaskSet { seed, masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }
}

/// Element-wise population variance across `T` same-shape grids, averaged
/// over elements. Single pass (Welford).
pub fn model_uncertainty(grids: &[Tensor]) -> Result<f64> {
    if grids.len() < 2 {
        return Err(Error::invalid(format!(
            "model uncertainty needs T >= 2 draws, got {}",
            grids.len()
        )));
    }
    let shape = grids[0].shape();
    if let Some(bad) = grids.iter().find(|g| g.shape() != shape) {
        return Err(Error::shape("model_uncertainty", shape, bad.shape()));
    }
    let n = grids[0].numel();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for (k, g) in grids.iter().enumerate() {
        let count = (k + 1) as f64;
        for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(g.data()) {
            let delta = x - *m;
            *m += delta / count;
            *s += delta * (x - *m);
        }
    }
    let t = grids.len() as f64;
    Ok(m2.iter().map(|s| s / t).sum::<f64>() / n as f64)
}

/// Embeds every sample with the shared mask set. Output is sorted by `sample_id`.
pub fn embed(net: &Network, samples: &[LabeledSample], masks: &MaskSet) -> Result<Vec<GaussianEmbedding>> {
    if masks.len() < 2 {
        return Err(Error::invalid("embedding needs T >= 2 mask draws"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        out.extend(embed_chunk(net, chunk, masks)?);
    }
    out.sort_by_key(|e| e.sample_id);
    Ok(out)
}

fn embed_chunk(net: &Network, samples: &[LabeledSample], masks: &MaskSet) -> Result<Vec<GaussianEmbedding>> {
    let d_in = net.dims.d_in;
    let c = net.dims.c;
    let grid = net.dims.grid_len();
    let b = samples.len();
    let mut flat = Vec::with_capacity(b * d_in);
    for s in samples {
        if s.input.len() != d_in {
            return Err(Error::shape("embed", &[d_in], &[s.input.len()]));
        }
        flat.extend_from_slice(&s.input);
    }

    let tape = Tape::new();
    let bound = net.bind(&tape);
    let x = tape.constant(Tensor::matrix(b, d_in, flat)?);
    // backbone once; only the Bayesian layer and heads repeat per draw
    let features = net.backbone(&bound, x)?;

    let t = masks.len();
    let mut mu_sum = vec![0.0; b * c];
    let mut sigma2_sum = vec![0.0; b];
    let mut grids: Vec<Vec<Tensor>> = vec![Vec::with_capacity(t); b];
    for mask in masks.masks() {
        let head = net.head(&bound, features, mask)?;
        let mu = head.mu.value();
        let sigma2 = head.sigma2.value();
        let mu_hat = head.mu_hat.value();
        for i in 0..b {
            for (acc, v) in mu_sum[i * c..(i + 1) * c].iter_mut().zip(mu.row(i)) {
                *acc += v;
            }
            sigma2_sum[i] += sigma2.data()[i];
            let g = mu_hat.data()[i * grid..(i + 1) * grid].to_vec();
            grids[i].push(Tensor::from_parts(vec![net.dims.h, net.dims.w, c], g));
        }
    }

    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(GaussianEmbedding {
                sample_id: s.sample_id,
                identity: s.identity,
                camera: s.camera,
                mean: mu_sum[i * c..(i + 1) * c].iter().map(|v| v / t as f64).collect(),
                data_uncertainty: sigma2_sum[i] / t as f64,
                model_uncertainty: model_uncertainty(&grids[i])?,
            })
        })
        .collect()
}

/// Cosine similarity of the embedding means.
pub fn similarity(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    cosine(&a.mean, &b.mean)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("similarity", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("similarity of a zero-norm feature"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub const EMBED_MAGIC: &str = "ual-embed v1";

pub fn format_embeddings(c: usize, t: usize, embeddings: &[GaussianEmbedding]) -> Result<String> {
    let mut out = format!("{EMBED_MAGIC} c={c} T={t}\n");
    for e in embeddings {
        if e.mean.len() != c {
            return Err(Error::shape("format_embeddings", &[c], &[e.mean.len()]));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.sample_id,
            e.identity,
            e.camera,
            fmt_f64(e.data_uncertainty),
            fmt_f64(e.model_uncertainty),
            join_f64(&e.mean)
        ));
    }
    Ok(out)
}

/// Parsed embedding file: `(c, T, embeddings)`.
pub fn parse_embeddings(path: &str, text: &str) -> Result<(usize, usize, Vec<GaussianEmbedding>)> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let ctx = LineCtx { path, line: 1 };
    if !header.starts_with(EMBED_MAGIC) {
        return Err(ctx.err(format!("expected header `{EMBED_MAGIC} c=<n> T=<n>`")));
    }
    let c = ctx.usize(textio::header_value(header, "c").ok_or_else(|| ctx.err("missing c"))?)?;
    let t = ctx.usize(textio::header_value(header, "T").ok_or_else(|| ctx.err("missing T"))?)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: i + 2 };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 + c {
            return Err(ctx.err(format!("expected {} fields, found {}", 5 + c, f.len())));
        }
        out.push(GaussianEmbedding {
            sample_id: ctx.usize(f[0])?,
            identity: ctx.usize(f[1])?,
            camera: ctx.usize(f[2])?,
            data_uncertainty: ctx.f64(f[3])?,
            model_uncertainty: ctx.f64(f[4])?,
            mean: f[5..].iter().map(|v| ctx.f64(v)).collect::<Result<_>>()?,
        });
    }
    Ok((c, t, out))
}

pub fn save_embeddings(path: &Path, c: usize, t: usize, embeddings: &[GaussianEmbedding]) -> Result<()> {
    textio::write_file(path, &format_embeddings(c, t, embeddings)?)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<GaussianEmbedding>> {
    let text = textio::read_to_string(path)?;
    Ok(parse_embeddings(&path.display().to_string(), &text)?.2)
}
