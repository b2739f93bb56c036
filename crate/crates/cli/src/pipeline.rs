//! Experiment pipelines shared by the `ual` commands and the acceptance suite.

use std::path::Path;

use ual_core::eval::{self, EvalReport, Fusion, RetrievalRun, SweepRow};
use ual_core::inference::{self, GaussianEmbedding, MaskSet};
use ual_core::synthdata::{self, CorruptionPlan, DatasetSpec, LabeledSample};
use ual_core::textio::{fmt_f64, mix_seed};
use ual_core::trainer::{self, ProbeConfig};
use ual_core::{Error, Network, Result};

pub const TRAIN_FILE: &str = "train.txt";
pub const QUERY_FILE: &str = "query.txt";
pub const QUERY_CORRUPTED_FILE: &str = "query_corrupted.txt";
pub const GALLERY_FILE: &str = "gallery.txt";
pub const OOD_SHIFTED_FILE: &str = "ood_shifted.txt";
pub const OOD_FAR_FILE: &str = "ood_far.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataConfig {
    pub spec: DatasetSpec,
    /// Identities below this index form the training split.
    pub train_identities: usize,
    pub query_fraction: f64,
    pub corrupt_prob: f64,
    pub corrupt_eta: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        GenDataConfig {
            train_identities: spec.num_identities / 2,
            spec,
            query_fraction: 0.5,
            corrupt_prob: 0.5,
            corrupt_eta: 2.0,
        }
    }
}

impl GenDataConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.train_identities == 0 || self.train_identities >= self.spec.num_identities {
            return Err(Error::invalid(
                "train_identities must leave at least one identity on each side of the split",
            ));
        }
        CorruptionPlan {
            probability: self.corrupt_prob,
            eta: self.corrupt_eta,
        }
        .validate()
    }

    /// Same-size spec whose clusters sit `scale` times further apart and
    /// `spread` times wider, drawn from an unrelated seed.
    fn shifted_spec(&self, scale: f64, spread: f64, salt: u64) -> DatasetSpec {
        DatasetSpec {
            num_identities: self.spec.num_identities - self.train_identities,
            inter_cluster_scale: self.spec.inter_cluster_scale * scale,
            cluster_spread: self.spec.cluster_spread * spread,
            seed: mix_seed(self.spec.seed, salt),
            ..self.spec.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub d_in: usize,
    pub train: Vec<LabeledSample>,
    pub query: Vec<LabeledSample>,
    pub query_corrupted: Vec<LabeledSample>,
    pub gallery: Vec<LabeledSample>,
    pub ood_shifted: Vec<LabeledSample>,
    pub ood_far: Vec<LabeledSample>,
}

pub fn generate_bundle(cfg: &GenDataConfig) -> Result<DataBundle> {
    cfg.validate()?;
    let all = synthdata::generate(&cfg.spec)?;
    let (train, test) = synthdata::split_by_identity(&all, cfg.train_identities);
    let split_seed = mix_seed(cfg.spec.seed, 0x5011);
    let (query, gallery) = synthdata::split_multi_query(&test, cfg.query_fraction, &CorruptionPlan::none(), split_seed)?;
    let plan = CorruptionPlan {
        probability: cfg.corrupt_prob,
        eta: cfg.corrupt_eta,
    };
    let (query_corrupted, _) = synthdata::split_multi_query(&test, cfg.query_fraction, &plan, split_seed)?;
    let ood_shifted = synthdata::generate(&cfg.shifted_spec(1.5, 2.0, 0x0D1))?;
    let ood_far = synthdata::generate(&cfg.shifted_spec(3.0, 4.0, 0x0D2))?;
    Ok(DataBundle {
        d_in: cfg.spec.d_in,
        train,
        query,
        query_corrupted,
        gallery,
        ood_shifted,
        ood_far,
    })
}

impl DataBundle {
    pub fn files(&self) -> [(&'static str, &[LabeledSample]); 6] {
        [
            (TRAIN_FILE, &self.train),
            (QUERY_FILE, &self.query),
            (QUERY_CORRUPTED_FILE, &self.query_corrupted),
            (GALLERY_FILE, &self.gallery),
            (OOD_SHIFTED_FILE, &self.ood_shifted),
            (OOD_FAR_FILE, &self.ood_far),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string().into(),
            source,
        })?;
        for (name, samples) in self.files() {
            synthdata::save_dataset(&dir.join(name), self.d_in, samples)?;
        }
        Ok(())
    }
}

pub fn embed_with(net: &Network, samples: &[LabeledSample], t: usize, seed: u64) -> Result<Vec<GaussianEmbedding>> {
    inference::embed(net, samples, &MaskSet::sample(net, t, seed)?)
}

/// Embeddings for a query set and a gallery under one shared mask set.
pub fn retrieval_run(
    net: &Network,
    queries: &[LabeledSample],
    gallery: &[LabeledSample],
    t: usize,
    seed: u64,
) -> Result<(Vec<GaussianEmbedding>, Vec<GaussianEmbedding>)> {
    let masks = MaskSet::sample(net, t, seed)?;
    Ok((inference::embed(net, queries, &masks)?, inference::embed(net, gallery, &masks)?))
}

pub fn single_query(net: &Network, queries: &[LabeledSample], gallery: &[LabeledSample], t: usize, seed: u64) -> Result<EvalReport> {
    let (q, g) = retrieval_run(net, queries, gallery, t, seed)?;
    eval::single_query_eval(&RetrievalRun::single(q, g))
}

pub fn sweep(
    net: &Network,
    queries: &[LabeledSample],
    gallery: &[LabeledSample],
    alphas: &[f64],
    t: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let (q, g) = retrieval_run(net, queries, gallery, t, seed)?;
    eval::risk_sweep(&RetrievalRun::single(q, g), alphas)
}

/// Multi-query mAP with uniform and reliability weighting on the same embeddings.
pub fn multi_query_pair(
    net: &Network,
    queries: &[LabeledSample],
    gallery: &[LabeledSample],
    tau: (f64, f64),
    t: usize,
    seed: u64,
) -> Result<(EvalReport, EvalReport)> {
    let (q, g) = retrieval_run(net, queries, gallery, t, seed)?;
    let run = RetrievalRun::multi(q, g);
    let (uniform, _) = eval::multi_query_eval(&run, Fusion::Uniform)?;
    let (weighted, _) = eval::multi_query_eval(
        &run,
        Fusion::Reliability {
            tau_min: tau.0,
            tau_max: tau.1,
        },
    )?;
    Ok((uniform, weighted))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseRow {
    pub eta: f64,
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

/// Mean and quartiles of data uncertainty after corrupting `samples` at each eta.
pub fn noise_probe(net: &Network, samples: &[LabeledSample], etas: &[f64], t: usize, seed: u64) -> Result<Vec<NoiseRow>> {
    if samples.is_empty() {
        return Err(Error::invalid("noise probe needs samples"));
    }
    let masks = MaskSet::sample(net, t, seed)?;
    etas.iter()
        .enumerate()
        .map(|(i, &eta)| {
            let noisy = synthdata::corrupt_all(samples, eta, mix_seed(seed, 0xE7A0 + i as u64))?;
            let mut d: Vec<f64> = inference::embed(net, &noisy, &masks)?
                .iter()
                .map(|e| e.data_uncertainty)
                .collect();
            d.sort_by(f64::total_cmp);
            Ok(NoiseRow {
                eta,
                mean: mean(&d),
                q25: quantile(&d, 0.25),
                median: quantile(&d, 0.5),
                q75: quantile(&d, 0.75),
            })
        })
        .collect()
}

pub fn format_noise(rows: &[NoiseRow]) -> String {
    let mut out = String::from("eta,mean_sigma2_d,q25,median,q75\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(r.eta),
            fmt_f64(r.mean),
            fmt_f64(r.q25),
            fmt_f64(r.median),
            fmt_f64(r.q75)
        ));
    }
    out
}

/// Mean model uncertainty per dataset, in input order.
pub fn ood_probe(net: &Network, datasets: &[&[LabeledSample]], t: usize, seed: u64) -> Result<Vec<f64>> {
    let masks = MaskSet::sample(net, t, seed)?;
    datasets
        .iter()
        .map(|ds| {
            if ds.is_empty() {
                return Err(Error::invalid("OOD probe got an empty dataset"));
            }
            let m: Vec<f64> = inference::embed(net, ds, &masks)?
                .iter()
                .map(|e| e.model_uncertainty)
                .collect();
            Ok(mean(&m))
        })
        .collect()
}

pub fn format_ood(names: &[String], values: &[f64]) -> String {
    let mut out = String::from("dataset,mean_sigma2_m\n");
    for (n, v) in names.iter().zip(values) {
        out.push_str(&format!("{n},{}\n", fmt_f64(*v)));
    }
    out
}

/// Mean model-change probe value over `samples` corrupted at each eta.
pub fn model_change_by_eta(
    net: &Network,
    samples: &[LabeledSample],
    etas: &[f64],
    cfg: &ProbeConfig,
) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::invalid("model-change probe needs samples"));
    }
    etas.iter()
        .enumerate()
        .map(|(i, &eta)| {
            let noisy = synthdata::corrupt_all(samples, eta, mix_seed(cfg.seed, 0x9B0E + i as u64))?;
            let v = noisy
                .iter()
                .map(|s| trainer::model_change_probe(net, s, cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok((eta, mean(&v)))
        })
        .collect()
}

pub fn format_model_change(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("eta,mean_param_change\n");
    for (eta, v) in rows {
        out.push_str(&format!("{},{}\n", fmt_f64(*eta), fmt_f64(*v)));
    }
    out
}

/// Average ranks (1-based) with ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
