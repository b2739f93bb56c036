//! Optimization loop and the per-sample model-change probe.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{self, DNetConfig, LossReport};
use crate::model::{Network, NetworkDims, Pooling};
use crate::numcore::{Tape, Tensor};
use crate::synthdata::{corrupt_with, LabeledSample};
use crate::textio::{self, fmt_f64};

/// Which data-uncertainty objective is paired with the triplet term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Sampling-free `CE / sigma2 + ln sigma2` with quality-aware pooling.
    Ual,
    /// Reparameterized sampling plus entropy floor, plain pooling.
    DNet,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Ual => "ual",
            Objective::DNet => "dnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ual" => Ok(Objective::Ual),
            "dnet" => Ok(Objective::DNet),
            _ => Err(Error::invalid(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity.
    pub k: usize,
    pub learning_rate: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rho: f64,
    pub margin: f64,
    pub objective: Objective,
    pub dnet_lambda: f64,
    /// Probability that a batch sample is corrupted on the fly.
    pub aug_prob: f64,
    /// On-the-fly corruption strength is uniform in `[0, aug_eta_max]`.
    pub aug_eta_max: f64,
    pub hidden: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            iterations_per_epoch: 50,
            p: 8,
            k: 4,
            learning_rate: 3.5e-4,
            decay_epochs: vec![15, 25],
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
            rho: 0.7,
            margin: loss::DEFAULT_MARGIN,
            objective: Objective::Ual,
            dnet_lambda: 0.01,
            aug_prob: 0.5,
            aug_eta_max: 4.0,
            hidden: 64,
            grid_h: 2,
            grid_w: 2,
            channels: 16,
        }
    }
}

impl TrainConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::invalid("batches need P >= 2 identities and K >= 2 samples"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("adam_eps must be > 0 and weight_decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) || !(self.aug_eta_max >= 0.0) {
            return Err(Error::invalid("aug_prob must lie in [0, 1] and aug_eta_max >= 0"));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::invalid("margin must be >= 0"));
        }
        Ok(())
    }

    pub fn dims(&self, d_in: usize) -> NetworkDims {
        NetworkDims {
            d_in,
            hidden: self.hidden,
            h: self.grid_h,
            w: self.grid_w,
            c: self.channels,
        }
    }

    /// Step schedule: multiply by `decay_factor` once per passed decay epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let decay: Vec<String> = self.decay_epochs.iter().map(|e| e.to_string()).collect();
        vec![
            ("epochs", self.epochs.to_string()),
            ("iterations_per_epoch", self.iterations_per_epoch.to_string()),
            ("p", self.p.to_string()),
            ("k", self.k.to_string()),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("decay_epochs", decay.join(",")),
            ("decay_factor", fmt_f64(self.decay_factor)),
            ("beta1", fmt_f64(self.beta1)),
            ("beta2", fmt_f64(self.beta2)),
            ("adam_eps", fmt_f64(self.adam_eps)),
            ("weight_decay", fmt_f64(self.weight_decay)),
            ("seed", self.seed.to_string()),
            ("rho", fmt_f64(self.rho)),
            ("margin", fmt_f64(self.margin)),
            ("objective", self.objective.as_str().to_string()),
            ("dnet_lambda", fmt_f64(self.dnet_lambda)),
            ("aug_prob", fmt_f64(self.aug_prob)),
            ("aug_eta_max", fmt_f64(self.aug_eta_max)),
            ("hidden", self.hidden.to_string()),
            ("grid_h", self.grid_h.to_string()),
            ("grid_w", self.grid_w.to_string()),
            ("channels", self.channels.to_string()),
        ]
    }

    /// Flat `key = value` text.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(path: &str, text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let ctx = textio::LineCtx { path, line: i + 1 };
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ctx.err("expected `key = value`"))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| ctx.err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::invalid(format!("bad value {value:?} for {key}"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let real = |v: &str| v.parse::<f64>().map_err(|_| bad());
        match key {
            "epochs" => self.epochs = int(value)?,
            "iterations_per_epoch" => self.iterations_per_epoch = int(value)?,
            "p" => self.p = int(value)?,
            "k" => self.k = int(value)?,
            "learning_rate" => self.learning_rate = real(value)?,
            "decay_epochs" => {
                self.decay_epochs = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| int(v.trim())).collect::<Result<_>>()?
                }
            }
            "decay_factor" => self.decay_factor = real(value)?,
            "beta1" => self.beta1 = real(value)?,
            "beta2" => self.beta2 = real(value)?,
            "adam_eps" => self.adam_eps = real(value)?,
            "weight_decay" => self.weight_decay = real(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "rho" => self.rho = real(value)?,
            "margin" => self.margin = real(value)?,
            "objective" => self.objective = Objective::parse(value)?,
            "dnet_lambda" => self.dnet_lambda = real(value)?,
            "aug_prob" => self.aug_prob = real(value)?,
            "aug_eta_max" => self.aug_eta_max = real(value)?,
            "hidden" => self.hidden = int(value)?,
            "grid_h" => self.grid_h = int(value)?,
            "grid_w" => self.grid_w = int(value)?,
            "channels" => self.channels = int(value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&path.display().to_string(), &textio::read_to_string(path)?)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Adam with coupled L2 weight decay (`g + wd * p`) and bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Updates `params[i]` in place from `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (pj, &gj)) in p.iter_mut().zip(g.iter()).enumerate() {
                let g = gj + self.weight_decay * *pj;
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *pj -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Identity-balanced batch construction.
pub struct PkSampler {
    by_identity: Vec<(usize, Vec<usize>)>,
}

impl PkSampler {
    pub fn new(dataset: &[LabeledSample]) -> Self {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in dataset.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        PkSampler {
            by_identity: map.into_iter().collect(),
        }
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    /// `p` distinct identities, `k` dataset indices each; identities with
    /// fewer than `k` samples are drawn with replacement.
    pub fn sample<R: Rng>(&self, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.by_identity.len() < p {
            return Err(Error::invalid(format!(
                "need {p} identities for a batch, dataset has {}",
                self.by_identity.len()
            )));
        }
        let mut batch = Vec::with_capacity(p * k);
        for (_, members) in self.by_identity.choose_multiple(rng, p) {
            if members.len() >= k {
                batch.extend(members.choose_multiple(rng, k).copied());
            } else {
                for _ in 0..k {
                    batch.push(*members.choose(rng).unwrap());
                }
            }
        }
        Ok(batch)
    }
}

pub fn pk_sample(dataset: &[LabeledSample], p: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    PkSampler::new(dataset).sample(p, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub report: LossReport,
}

pub fn format_history(history: &[HistoryRow]) -> String {
    let mut out = String::from("iteration,loss_total,loss_data,loss_triplet\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.iteration,
            fmt_f64(h.report.total),
            fmt_f64(h.report.data_term),
            fmt_f64(h.report.triplet_term)
        ));
    }
    out
}

pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<HistoryRow>,
}

/// Training stopped early; `last_good` holds the parameters before the
/// failing step when one exists.
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Network>,
    pub history: Vec<HistoryRow>,
}

impl fmt::Debug for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainFailure")
            .field("error", &self.error)
            .field("history_len", &self.history.len())
            .finish()
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

fn class_ids(dataset: &[LabeledSample]) -> Vec<usize> {
    let mut ids: Vec<usize> = dataset.iter().map(|s| s.identity).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// The network `train` starts from.
pub fn init_network(dataset: &[LabeledSample], config: &TrainConfig) -> Result<Network> {
    let d_in = dataset
        .first()
        .map(|s| s.input.len())
        .ok_or_else(|| Error::invalid("training set is empty"))?;
    let pooling = match config.objective {
        Objective::Ual => Pooling::QualityAware,
        Objective::DNet => Pooling::Plain,
    };
    Network::new(config.dims(d_in), config.rho, pooling, class_ids(dataset), config.seed)
}

fn batch_inputs<R: Rng>(
    dataset: &[LabeledSample],
    batch: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let d_in = dataset[batch[0]].input.len();
    let mut flat = Vec::with_capacity(batch.len() * d_in);
    for &i in batch {
        let s = &dataset[i];
        if rng.random::<f64>() < config.aug_prob {
            let eta = rng.random::<f64>() * config.aug_eta_max;
            flat.extend(corrupt_with(s, eta, rng)?.input);
        } else {
            flat.extend_from_slice(&s.input);
        }
    }
    Tensor::matrix(batch.len(), d_in, flat)
}

/// One forward/backward pass; returns per-parameter gradients and the loss report.
fn step_gradients<R: Rng>(
    net: &Network,
    inputs: Tensor,
    class_labels: &[usize],
    identities: &[usize],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<Tensor>, LossReport)> {
    let mask = net.sample_mask_with(rng)?;
    let tape = Tape::new();
    let bound = net.bind(&tape);
    let x = tape.constant(inputs);
    let out = net.forward(&bound, x, &mask)?;
    let (total, report) = match config.objective {
        Objective::Ual => loss::total_loss(&out, class_labels, identities, bound.classifier(), config.margin)?,
        Objective::DNet => {
            let cfg = DNetConfig {
                lambda: config.dnet_lambda,
                ..DNetConfig::for_dim(net.dims.c)
            };
            let noise = loss::standard_normal(&out.mu.shape(), rng);
            loss::dnet_total_loss(&out, class_labels, identities, bound.classifier(), config.margin, &cfg, &noise)?
        }
    };
    let grads = tape.backward(total)?.params();
    Ok((grads, report))
}

#[allow(clippy::result_large_err)]
pub fn train(dataset: &[LabeledSample], config: &TrainConfig) -> Result<TrainOutcome, TrainFailure> {
    let fail = |error: Error| TrainFailure {
        error,
        last_good: None,
        history: Vec::new(),
    };
    config.validate().map_err(fail)?;
    let mut net = init_network(dataset, config).map_err(fail)?;
    let sampler = PkSampler::new(dataset);
    if sampler.num_identities() < config.p {
        return Err(fail(Error::invalid(format!(
            "need {} identities, training set has {}",
            config.p,
            sampler.num_identities()
        ))));
    }
    let class_of: HashMap<usize, usize> = net
        .class_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let sizes: Vec<usize> = net.params().iter().map(|p| p.value.numel()).collect();
    let mut adam = Adam::new(&sizes, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(textio::mix_seed(config.seed, 0x7124));
    let mut history = Vec::with_capacity(config.epochs * config.iterations_per_epoch);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        for _ in 0..config.iterations_per_epoch {
            let iteration = history.len();
            let result = (|| {
                let batch = sampler.sample(config.p, config.k, &mut rng)?;
                let identities: Vec<usize> = batch.iter().map(|&i| dataset[i].identity).collect();
                let labels: Vec<usize> = identities.iter().map(|id| class_of[id]).collect();
                let inputs = batch_inputs(dataset, &batch, config, &mut rng)?;
                step_gradients(&net, inputs, &labels, &identities, config, &mut rng)
            })();
            let (grads, report) = match result {
                Ok((g, r)) if r.total.is_finite() && g.iter().all(Tensor::all_finite) => (g, r),
                Ok(_) => {
                    return Err(TrainFailure {
                        error: Error::Diverged { iteration },
                        last_good: Some(net),
                        history,
                    })
                }
                Err(e) => {
                    let error = if e.is_numerical() {
                        Error::Diverged { iteration }
                    } else {
                        e
                    };
                    return Err(TrainFailure {
                        error,
                        last_good: Some(net),
                        history,
                    });
                }
            };
            let mut params: Vec<&mut [f64]> = net.params_mut().iter_mut().map(|p| p.value.data_mut()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
            adam.step(&mut params, &grad_refs, lr);
            history.push(HistoryRow { iteration, report });
        }
    }
    Ok(TrainOutcome { network: net, history })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    /// Plain gradient-descent step size.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 10,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a copy of `network` on `sample` alone with `L_d` and returns the
/// mean absolute parameter change. `network` itself is untouched.
pub fn model_change_probe(network: &Network, sample: &LabeledSample, cfg: &ProbeConfig) -> Result<f64> {
    let label = network
        .class_ids
        .iter()
        .position(|&id| id == sample.identity)
        .ok_or_else(|| Error::invalid(format!("identity {} is not a training class", sample.identity)))?;
    let mut net = network.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(textio::mix_seed(cfg.seed, sample.sample_id as u64));
    for _ in 0..cfg.iterations {
        let mask = net.sample_mask_with(&mut rng)?;
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let x = tape.constant(Tensor::matrix(1, sample.input.len(), sample.input.clone())?);
        let out = net.forward(&bound, x, &mask)?;
        let (l_d, _) = loss::data_uncertainty_loss(out.mu, out.sigma2, &[label], bound.classifier())?;
        let grads = tape.backward(l_d.mean()?)?.params();
        for (p, g) in net.params_mut().iter_mut().zip(&grads) {
            for (pv, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                *pv -= cfg.learning_rate * gv;
            }
        }
    }
    let (sum, count) = net
        .params()
        .iter()
        .zip(network.params())
        .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
        .fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y).abs(), n + 1));
    Ok(sum / count as f64)
}
