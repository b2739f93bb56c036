//! The unified network: deterministic backbone, Bernoulli-masked Bayesian
//! layer, mean and variance heads, and quality-aware pooling.
//!
//! Feature grids travel through the tape as `[batch * h * w, c]` matrices so
//! every per-position affine map is a single matmul. Grid element order is
//! `(h, w, c)` row-major.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::textio::{self, fmt_f64, join_f64, LineCtx};

pub const BACKBONE_W1: &str = "backbone.w1";
pub const BACKBONE_B1: &str = "backbone.b1";
pub const BACKBONE_W2: &str = "backbone.w2";
pub const BACKBONE_B2: &str = "backbone.b2";
pub const BAYES_WEIGHT: &str = "bayes.weight";
pub const BAYES_BIAS: &str = "bayes.bias";
pub const HEAD_MU_WEIGHT: &str = "head_mu.weight";
pub const HEAD_MU_BIAS: &str = "head_mu.bias";
pub const HEAD_SIGMA_WEIGHT: &str = "head_sigma.weight";
pub const HEAD_SIGMA_BIAS: &str = "head_sigma.bias";
pub const CLASSIFIER: &str = "classifier.weight";

const PARAM_ORDER: [&str; 11] = [
    BACKBONE_W1,
    BACKBONE_B1,
    BACKBONE_W2,
    BACKBONE_B2,
    BAYES_WEIGHT,
    BAYES_BIAS,
    HEAD_MU_WEIGHT,
    HEAD_MU_BIAS,
    HEAD_SIGMA_WEIGHT,
    HEAD_SIGMA_BIAS,
    CLASSIFIER,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkDims {
    pub d_in: usize,
    pub hidden: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Default for NetworkDims {
    fn default() -> Self {
        NetworkDims {
            d_in: 32,
            hidden: 64,
            h: 2,
            w: 2,
            c: 16,
        }
    }
}

impl NetworkDims {
    /// Number of spatial positions, `h * w`.
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn grid_len(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// How the per-position features collapse to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// `GAP(mu_hat / sigma2_grid)`.
    QualityAware,
    /// `GAP(mu_hat)`; used by the sampling-based baseline.
    Plain,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::QualityAware => "quality",
            Pooling::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(Pooling::QualityAware),
            "plain" => Ok(Pooling::Plain),
            _ => Err(Error::invalid(format!("unknown pooling {s:?}"))),
        }
    }
}

/// Binary keep-mask `z` over the Bayesian layer's `c x c` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Tensor);

impl Mask {
    pub fn ones(c: usize) -> Self {
        Mask(Tensor::filled(&[c, c], 1.0))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn kept(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("keep probability must lie in (0, 1], got {rho}")))
    }
}

/// Draws `z_ij ~ Bernoulli(rho)` for a `c x c` weight matrix.
pub fn sample_mask_with<R: Rng>(rho: f64, c: usize, rng: &mut R) -> Result<Mask> {
    check_rho(rho)?;
    let data = (0..c * c)
        .map(|_| if rng.random::<f64>() < rho { 1.0 } else { 0.0 })
        .collect();
    Ok(Mask(Tensor::from_parts(vec![c, c], data)))
}

pub fn sample_mask(rho: f64, c: usize, seed: u64) -> Result<Mask> {
    sample_mask_with(rho, c, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Network weights plus the cosine classifier used during training.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub dims: NetworkDims,
    /// Keep probability of the Bayesian layer's weight mask.
    pub rho: f64,
    pub pooling: Pooling,
    /// Training identity for each classifier row.
    pub class_ids: Vec<usize>,
    params: Vec<Param>,
}

/// Parameters registered on a tape, in [`Network::params`] order.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn get(&self, idx: usize) -> Var<'t> {
        self.vars[idx]
    }

    pub fn classifier(&self) -> Var<'t> {
        self.vars[10]
    }
}

/// Tape outputs of one forward pass over a batch with a single mask draw.
pub struct HeadOutput<'t> {
    /// Pooled features `mu_t`, `[batch, c]`.
    pub mu: Var<'t>,
    /// Scalar data uncertainty per sample, `[batch]`.
    pub sigma2: Var<'t>,
    /// Per-position features, `[batch * h * w, c]`.
    pub mu_hat: Var<'t>,
    /// Per-element variances, `[batch * h * w, c]`.
    pub sigma2_grid: Var<'t>,
    /// Variance averaged over positions, `[batch, c]`.
    pub sigma2_channels: Var<'t>,
}

/// Plain-valued forward output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleForward {
    pub mu_t: Vec<f64>,
    pub sigma2_t: f64,
    /// `[h, w, c]`.
    pub mu_hat_t: Tensor,
    /// `[h, w, c]`.
    pub sigma2_grid_t: Tensor,
}

trait Stage<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| match e {
            Error::NonFinite { stage } => Error::NonFinite {
                stage: format!("{name}/{stage}"),
            },
            other => other,
        })
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).unwrap();
    Tensor::from_parts(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl Network {
    pub fn new(
        dims: NetworkDims,
        rho: f64,
        pooling: Pooling,
        class_ids: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        check_rho(rho)?;
        if [dims.d_in, dims.hidden, dims.h, dims.w, dims.c].contains(&0) {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if class_ids.is_empty() {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = dims.c;
        // softplus(ln(e - 1)) = 1, so every sigma2 element starts at 1
        let sigma_bias = (std::f64::consts::E - 1.0).ln();
        let classifier = Tensor::from_parts(
            vec![class_ids.len(), c],
            (0..class_ids.len() * c)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let values = [
            glorot(dims.d_in, dims.hidden, &mut rng),
            Tensor::zeros(&[dims.hidden]),
            glorot(dims.hidden, dims.grid_len(), &mut rng),
            Tensor::zeros(&[dims.grid_len()]),
            glorot(c, c, &mut rng),
            Tensor::zeros(&[c]),
            glorot(c, c, &mut rng),
            Tensor::zeros(&[c]),
            glorot(c, c, &mut rng),
            Tensor::filled(&[c], sigma_bias),
            classifier,
        ];
        let params = PARAM_ORDER
            .iter()
            .zip(values)
            .map(|(name, value)| Param {
                name: name.to_string(),
                value,
            })
            .collect();
        Ok(Network {
            dims,
            rho,
            pooling,
            class_ids,
            params,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect(),
        }
    }

    pub fn sample_mask_with<R: Rng>(&self, rng: &mut R) -> Result<Mask> {
        sample_mask_with(self.rho, self.dims.c, rng)
    }

    /// Inputs `[batch, d_in]` to the backbone feature grid `F` as `[batch * h * w, c]`.
    pub fn backbone<'t>(&self, bound: &Bound<'t>, inputs: Var<'t>) -> Result<Var<'t>> {
        let shape = inputs.shape();
        if shape.len() != 2 || shape[1] != self.dims.d_in {
            return Err(Error::shape("backbone", &shape, &[0, self.dims.d_in]));
        }
        let batch = shape[0];
        let hidden = inputs
            .matmul(bound.get(0))?
            .add_bias(bound.get(1))?
            .tanh()
            .stage("backbone")?;
        hidden
            .matmul(bound.get(2))?
            .add_bias(bound.get(3))?
            .reshape(&[batch * self.dims.positions(), self.dims.c])
            .stage("backbone")
    }

    /// Masked Bayesian layer, both heads and pooling on a backbone grid.
    pub fn head<'t>(&self, bound: &Bound<'t>, grid: Var<'t>, mask: &Mask) -> Result<HeadOutput<'t>> {
        let c = self.dims.c;
        let hw = self.dims.positions();
        if mask.tensor().shape() != [c, c] {
            return Err(Error::shape("mask", mask.tensor().shape(), &[c, c]));
        }
        let rows = grid.shape()[0];
        let batch = rows / hw;
        let tape = bound.get(0).tape();
        let masked = tape.constant(mask.tensor().clone()).mul(bound.get(4))?;
        let f_t = grid
            .matmul(masked)?
            .add_bias(bound.get(5))
            .stage("bayesian")?;
        let mu_hat = f_t
            .matmul(bound.get(6))?
            .add_bias(bound.get(7))
            .stage("head_mu")?;
        let sigma2_grid = f_t
            .matmul(bound.get(8))?
            .add_bias(bound.get(9))?
            .softplus()
            .stage("head_sigma")?;
        let pooled_src = match self.pooling {
            Pooling::QualityAware => mu_hat.div(sigma2_grid).stage("pooling")?,
            Pooling::Plain => mu_hat,
        };
        let mu = pooled_src
            .reshape(&[batch, hw, c])?
            .mean_axis(1)
            .stage("pooling")?;
        let sigma2 = sigma2_grid
            .reshape(&[batch, hw * c])?
            .mean_axis(1)
            .stage("pooling")?;
        let sigma2_channels = sigma2_grid.reshape(&[batch, hw, c])?.mean_axis(1)?;
        Ok(HeadOutput {
            mu,
            sigma2,
            mu_hat,
            sigma2_grid,
            sigma2_channels,
        })
    }

    pub fn forward<'t>(&self, bound: &Bound<'t>, inputs: Var<'t>, mask: &Mask) -> Result<HeadOutput<'t>> {
        let grid = self.backbone(bound, inputs)?;
        self.head(bound, grid, mask)
    }

    /// Single-sample forward with plain outputs.
    pub fn forward_sample(&self, input: &[f64], mask: &Mask) -> Result<SampleForward> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let x = tape.constant(Tensor::matrix(1, input.len(), input.to_vec())?);
        let out = self.forward(&bound, x, mask)?;
        let grid_shape = [self.dims.h, self.dims.w, self.dims.c];
        Ok(SampleForward {
            mu_t: out.mu.value().into_data(),
            sigma2_t: out.sigma2.item(),
            mu_hat_t: out.mu_hat.value().reshape(&grid_shape)?,
            sigma2_grid_t: out.sigma2_grid.value().reshape(&grid_shape)?,
        })
    }

    pub fn to_checkpoint(&self) -> String {
        let d = &self.dims;
        let mut out = format!("{CHECKPOINT_MAGIC}\n");
        out.push_str(&format!(
            "arch d_in={} hidden={} h={} w={} c={} rho={} pooling={}\n",
            d.d_in,
            d.hidden,
            d.h,
            d.w,
            d.c,
            fmt_f64(self.rho),
            self.pooling.as_str()
        ));
        let ids: Vec<String> = self.class_ids.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("classes {} {}\n", self.class_ids.len(), ids.join(",")));
        for p in &self.params {
            let shape: Vec<String> = p.value.shape().iter().map(|s| s.to_string()).collect();
            out.push_str(&format!("param {} {}\n", p.name, shape.join(",")));
            out.push_str(&join_f64(p.value.data()));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(path: &str, text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let ctx = |line: usize| LineCtx { path, line };
        if lines.first() != Some(&CHECKPOINT_MAGIC) {
            return Err(ctx(1).err(format!("expected header `{CHECKPOINT_MAGIC}`")));
        }
        let arch = lines.get(1).copied().unwrap_or_default();
        if !arch.starts_with("arch ") {
            return Err(ctx(2).err("expected `arch` line"));
        }
        let field = |key: &str| {
            textio::header_value(arch, key).ok_or_else(|| ctx(2).err(format!("missing {key}")))
        };
        let dims = NetworkDims {
            d_in: ctx(2).usize(field("d_in")?)?,
            hidden: ctx(2).usize(field("hidden")?)?,
            h: ctx(2).usize(field("h")?)?,
            w: ctx(2).usize(field("w")?)?,
            c: ctx(2).usize(field("c")?)?,
        };
        let rho = ctx(2).f64(field("rho")?)?;
        let pooling = Pooling::parse(field("pooling")?)?;

        let classes = lines.get(2).copied().unwrap_or_default();
        let mut parts = classes.split_whitespace();
        if parts.next() != Some("classes") {
            return Err(ctx(3).err("expected `classes` line"));
        }
        let n = ctx(3).usize(parts.next().unwrap_or_default())?;
        let class_ids: Vec<usize> = parts
            .next()
            .unwrap_or_default()
            .split(',')
            .map(|s| ctx(3).usize(s))
            .collect::<Result<_>>()?;
        if class_ids.len() != n {
            return Err(ctx(3).err("class count mismatch"));
        }

        let mut net = Network::new(dims, rho, pooling, class_ids, 0)?;
        let mut seen = 0;
        let mut i = 3;
        while i < lines.len() {
            if lines[i].trim().is_empty() {
                i += 1;
                continue;
            }
            let head: Vec<&str> = lines[i].split_whitespace().collect();
            if head.len() != 3 || head[0] != "param" {
                return Err(ctx(i + 1).err("expected `param <name> <shape>`"));
            }
            let shape: Vec<usize> = head[2]
                .split(',')
                .map(|s| ctx(i + 1).usize(s))
                .collect::<Result<_>>()?;
            let values_line = lines.get(i + 1).ok_or_else(|| ctx(i + 2).err("missing values"))?;
            let values: Vec<f64> = values_line
                .split(',')
                .map(|s| ctx(i + 2).f64(s))
                .collect::<Result<_>>()?;
            let tensor = Tensor::new(shape, values).map_err(|e| ctx(i + 2).err(e.to_string()))?;
            net.set_param(head[1], tensor)
                .map_err(|e| ctx(i + 1).err(e.to_string()))?;
            seen += 1;
            i += 2;
        }
        if seen != PARAM_ORDER.len() {
            return Err(ctx(lines.len()).err(format!(
                "expected {} parameter blocks, found {seen}",
                PARAM_ORDER.len()
            )));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textio::write_file(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = textio::read_to_string(path)?;
        Self::from_checkpoint(&path.display().to_string(), &text)
    }
}

pub const CHECKPOINT_MAGIC: &str = "ual-model v1";
