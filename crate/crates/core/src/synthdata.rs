//! Synthetic identity data: Gaussian clusters standing in for person images,
//! additive-noise corruption, and query/gallery splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::textio::{self, fmt_f64, join_f64, mix_seed, LineCtx};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub sample_id: usize,
    pub identity: usize,
    pub camera: usize,
    /// Strength of the additive noise applied to `input`; 0 for clean samples.
    pub eta: f64,
    pub input: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub d_in: usize,
    pub cluster_spread: f64,
    pub inter_cluster_scale: f64,
    pub num_cameras: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_identities: 100,
            samples_per_identity: 12,
            d_in: 32,
            cluster_spread: 0.5,
            inter_cluster_scale: 4.0,
            num_cameras: 4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0
            || self.samples_per_identity == 0
            || self.d_in == 0
            || self.num_cameras == 0
        {
            return Err(Error::invalid("dataset counts must be positive"));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::invalid("cluster_spread must be a finite value >= 0"));
        }
        if !(self.inter_cluster_scale > 0.0 && self.inter_cluster_scale.is_finite()) {
            return Err(Error::invalid("inter_cluster_scale must be positive"));
        }
        if self.cluster_spread >= self.inter_cluster_scale {
            return Err(Error::invalid(
                "cluster_spread must be smaller than inter_cluster_scale",
            ));
        }
        Ok(())
    }
}

/// One Gaussian center per identity, samples scattered around it, cameras
/// assigned round-robin within each identity.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
    for identity in 0..spec.num_identities {
        let center: Vec<f64> = (0..spec.d_in)
            .map(|_| spec.inter_cluster_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..spec.samples_per_identity {
            let input = center
                .iter()
                .map(|c| c + spec.cluster_spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(LabeledSample {
                sample_id: out.len(),
                identity,
                camera: j % spec.num_cameras,
                eta: 0.0,
                input,
            });
        }
    }
    Ok(out)
}

/// `x + eta * eps`, `eps ~ N(0, I)`, drawn from `rng`.
pub fn corrupt_with<R: Rng>(sample: &LabeledSample, eta: f64, rng: &mut R) -> Result<LabeledSample> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("corruption strength must be >= 0, got {eta}")));
    }
    let mut out = sample.clone();
    if eta > 0.0 {
        for v in &mut out.input {
            *v += eta * rng.sample::<f64, _>(StandardNormal);
        }
    }
    out.eta = eta;
    Ok(out)
}

pub fn corrupt(sample: &LabeledSample, eta: f64, seed: u64) -> Result<LabeledSample> {
    corrupt_with(sample, eta, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Corrupts every sample at strength `eta`, each with its own derived seed.
pub fn corrupt_all(samples: &[LabeledSample], eta: f64, seed: u64) -> Result<Vec<LabeledSample>> {
    samples
        .iter()
        .map(|s| corrupt(s, eta, mix_seed(seed, s.sample_id as u64)))
        .collect()
}

/// Independent per-sample corruption: with `probability`, noise of strength `eta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionPlan {
    pub probability: f64,
    pub eta: f64,
}

impl CorruptionPlan {
    pub fn none() -> Self {
        CorruptionPlan {
            probability: 0.0,
            eta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid("corruption probability must lie in [0, 1]"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("corruption eta must be >= 0"));
        }
        Ok(())
    }

    pub fn apply(&self, samples: &[LabeledSample], seed: u64) -> Result<Vec<LabeledSample>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        samples
            .iter()
            .map(|s| {
                if rng.random::<f64>() < self.probability {
                    corrupt(s, self.eta, mix_seed(seed, s.sample_id as u64))
                } else {
                    Ok(s.clone())
                }
            })
            .collect()
    }
}

/// Identity-disjoint split: identities below `num_train` go to training.
pub fn split_by_identity(
    samples: &[LabeledSample],
    num_train: usize,
) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    samples.iter().cloned().partition(|s| s.identity < num_train)
}

/// Groups by `(identity, camera)`, in key order.
pub fn group_by_identity_camera(
    samples: &[LabeledSample],
) -> BTreeMap<(usize, usize), Vec<LabeledSample>> {
    let mut groups: BTreeMap<(usize, usize), Vec<LabeledSample>> = BTreeMap::new();
    for s in samples {
        groups.entry((s.identity, s.camera)).or_default().push(s.clone());
    }
    groups
}

/// Per `(identity, camera)` group, sends `ceil(fraction * n)` randomly chosen
/// samples to the query set and the rest to the gallery, then applies `plan`
/// to the queries.
pub fn split_multi_query(
    samples: &[LabeledSample],
    fraction: f64,
    plan: &CorruptionPlan,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("query fraction must lie in (0, 1), got {fraction}")));
    }
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for ((identity, camera), mut group) in group_by_identity_camera(samples) {
        if group.len() < 2 {
            return Err(Error::UndersizedGroup {
                identity,
                camera,
                size: group.len(),
            });
        }
        let n_query = (fraction * group.len() as f64).ceil() as usize;
        group.shuffle(&mut rng);
        let (q, g) = group.split_at(n_query);
        let mut q = q.to_vec();
        let mut g = g.to_vec();
        q.sort_by_key(|s| s.sample_id);
        g.sort_by_key(|s| s.sample_id);
        queries.extend(q);
        gallery.extend(g);
    }
    gallery.sort_by_key(|s| s.sample_id);
    let queries = plan.apply(&queries, mix_seed(seed, 0xC0AA))?;
    Ok((queries, gallery))
}

pub const DATASET_MAGIC: &str = "ual-dataset v1";

pub fn format_dataset(d_in: usize, samples: &[LabeledSample]) -> Result<String> {
    let mut out = format!("{DATASET_MAGIC} D_in={d_in}\n");
    for s in samples {
        if s.input.len() != d_in {
            return Err(Error::shape("format_dataset", &[d_in], &[s.input.len()]));
        }
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.sample_id,
            s.identity,
            s.camera,
            fmt_f64(s.eta),
            join_f64(&s.input)
        ));
    }
    Ok(out)
}

/// Parses a dataset file body; `path` is used only in error messages.
pub fn parse_dataset(path: &str, text: &str) -> Result<(usize, Vec<LabeledSample>)> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let ctx = LineCtx { path, line: 1 };
    if !header.starts_with(DATASET_MAGIC) {
        return Err(ctx.err(format!("expected header `{DATASET_MAGIC} D_in=<n>`")));
    }
    let d_in = textio::header_value(header, "D_in")
        .ok_or_else(|| ctx.err("missing D_in"))
        .and_then(|v| ctx.usize(v))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx { path, line: i + 2 };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + d_in {
            return Err(ctx.err(format!("expected {} fields, found {}", 4 + d_in, fields.len())));
        }
        let input = fields[4..].iter().map(|f| ctx.f64(f)).collect::<Result<_>>()?;
        samples.push(LabeledSample {
            sample_id: ctx.usize(fields[0])?,
            identity: ctx.usize(fields[1])?,
            camera: ctx.usize(fields[2])?,
            eta: ctx.f64(fields[3])?,
            input,
        });
    }
    Ok((d_in, samples))
}

pub fn save_dataset(path: &Path, d_in: usize, samples: &[LabeledSample]) -> Result<()> {
    textio::write_file(path, &format_dataset(d_in, samples)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledSample>> {
    let text = textio::read_to_string(path)?;
    Ok(parse_dataset(&path.display().to_string(), &text)?.1)
}
