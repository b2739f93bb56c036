//! Tape gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ual_core::loss;
use ual_core::model::{sample_mask, Network, NetworkDims, Pooling};
use ual_core::numcore::gradcheck::{max_relative_error, numeric_gradient, FD_STEP};
use ual_core::{Result, Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Max relative error of d/d(inputs) sum(f(inputs) * r) for a random `r`.
fn audit<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&vars).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let r = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    let loss = out.mul(tape.constant(r.clone())).unwrap().sum().unwrap();
    let analytic: Vec<f64> = tape
        .backward(loss)
        .unwrap()
        .params()
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |x: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let v = tape.constant(Tensor::new(s.clone(), x[offset..offset + n].to_vec()).unwrap());
                offset += n;
                v
            })
            .collect();
        let out = f(&vars)?;
        Ok(out.mul(tape.constant(r.clone()))?.sum()?.item())
    };
    let numeric = numeric_gradient(eval, &flat, FD_STEP).unwrap();
    max_relative_error(&analytic, &numeric)
}

fn check_primitive<G, F>(name: &str, gen: G, f: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = gen(&mut rng);
        worst = worst.max(audit(&inputs, seed, &f));
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

fn two(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |rng| vec![uniform(rng, shape, -2.0, 2.0), uniform(rng, shape, -2.0, 2.0)]
}

fn one(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |rng| vec![uniform(rng, shape, -2.0, 2.0)]
}

fn positive(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |rng| vec![uniform(rng, shape, 0.2, 3.0)]
}

#[test]
fn elementwise_binary() {
    check_primitive("add", two(&[2, 3]), |v| v[0].add(v[1]));
    check_primitive("sub", two(&[2, 3]), |v| v[0].sub(v[1]));
    check_primitive("mul", two(&[2, 3]), |v| v[0].mul(v[1]));
    check_primitive(
        "div",
        |rng| vec![uniform(rng, &[2, 3], -2.0, 2.0), away_from_zero(rng, &[2, 3], 0.3, 2.0)],
        |v| v[0].div(v[1]),
    );
}

#[test]
fn scalar_broadcast() {
    let gen = |rng: &mut ChaCha8Rng| vec![uniform(rng, &[2, 3], -2.0, 2.0), uniform(rng, &[1], 0.5, 2.0)];
    check_primitive("add scalar tensor", gen, |v| v[0].add(v[1]));
    check_primitive("mul scalar tensor", gen, |v| v[0].mul(v[1]));
    check_primitive("div by scalar tensor", gen, |v| v[0].div(v[1]));
    check_primitive("scalar minus tensor", gen, |v| v[1].sub(v[0]));
    check_primitive("add_scalar", one(&[3, 2]), |v| v[0].add_scalar(0.7));
    check_primitive("mul_scalar", one(&[3, 2]), |v| v[0].mul_scalar(-1.3));
    check_primitive("neg", one(&[3, 2]), |v| v[0].neg());
}

#[test]
fn linear_algebra() {
    check_primitive(
        "matmul",
        |rng| vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
        |v| v[0].matmul(v[1]),
    );
    check_primitive("transpose", one(&[2, 5]), |v| v[0].transpose());
    check_primitive(
        "add_bias",
        |rng| vec![uniform(rng, &[4, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
        |v| v[0].add_bias(v[1]),
    );
    check_primitive("pairwise_sq_dist", one(&[4, 3]), |v| v[0].pairwise_sq_dist());
}

#[test]
fn elementwise_unary() {
    check_primitive("exp", one(&[2, 3]), |v| v[0].exp());
    check_primitive("ln", positive(&[2, 3]), |v| v[0].ln());
    check_primitive("softplus", one(&[2, 3]), |v| v[0].softplus());
    check_primitive("tanh", one(&[2, 3]), |v| v[0].tanh());
    check_primitive("sqrt", positive(&[2, 3]), |v| v[0].sqrt());
    check_primitive("square", one(&[2, 3]), |v| v[0].square());
    check_primitive("relu", |rng| vec![away_from_zero(rng, &[2, 3], 0.1, 2.0)], |v| v[0].relu());
}

#[test]
fn reductions() {
    check_primitive("l2_normalize", one(&[3, 4]), |v| v[0].l2_normalize());
    check_primitive("sum", one(&[2, 3]), |v| v[0].sum());
    check_primitive("mean", one(&[2, 3]), |v| v[0].mean());
    for axis in 0..3 {
        check_primitive("mean_axis", one(&[2, 3, 4]), move |v| v[0].mean_axis(axis));
    }
    check_primitive("logsumexp_last", one(&[3, 5]), |v| v[0].logsumexp_last());
    check_primitive(
        "max_last",
        // distinct values per row so the argmax is stable under the probe step
        |rng| {
            let mut rows = Vec::new();
            for _ in 0..3 {
                let mut row: Vec<f64> = (0..5).map(|k| k as f64 * 0.25).collect();
                for i in (1..row.len()).rev() {
                    row.swap(i, rng.random_range(0..=i));
                }
                rows.extend(row.iter().map(|v| v + rng.random_range(0.0..0.1)));
            }
            vec![Tensor::matrix(3, 5, rows).unwrap()]
        },
        |v| v[0].max_last(),
    );
}

#[test]
fn indexing() {
    check_primitive("reshape", one(&[2, 6]), |v| v[0].reshape(&[3, 4]));
    check_primitive("gather", one(&[2, 3]), |v| v[0].gather(&[5, 0, 0, 3]));
    check_primitive("pick_per_row", one(&[3, 4]), |v| v[0].pick_per_row(&[2, 0, 2]));
}

#[test]
fn twelve_parameter_composite() {
    check_primitive(
        "composite",
        |rng| vec![uniform(rng, &[12], -1.5, 1.5)],
        |v| {
            let p = v[0];
            let m = p.reshape(&[3, 4])?;
            let a = m.l2_normalize()?.matmul(m.transpose()?)?; // [3, 3]
            let b = a.softplus()?.add(a.tanh()?.mul_scalar(0.5)?)?;
            let c = b.exp()?.mean_axis(1)?.ln()?; // [3]
            let d = m.square()?.sum()?.add_scalar(1.0)?.sqrt()?;
            let e = m.logsumexp_last()?.div(d)?;
            let f = c.mul(e)?.sum()?.add(m.max_last()?.mean()?)?;
            f.add(p.gather(&[0, 11])?.sub(p.gather(&[5, 6])?)?.mean()?)
        },
    );
}

#[test]
fn l2_normalize_backward_is_orthogonal_to_direction() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[1, 6], -3.0, 3.0);
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let y = v.l2_normalize().unwrap();
        let loss = y.mul(tape.constant(y.value())).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap().wrt(v);
        let dot: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let gnorm: f64 = g.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(dot.abs() < 1e-12, "seed {seed}: <g, x> = {dot:e}");
        assert!(gnorm < 1e-12, "seed {seed}: |g| = {gnorm:e}");
    }
}

/// `L_total` as a function of one flattened parameter vector.
fn network_loss(net: &Network, inputs: &Tensor, labels: &[usize], ids: &[usize], mask: &ual_core::model::Mask) -> Result<f64> {
    let tape = Tape::new();
    let bound = net.bind(&tape);
    let out = net.forward(&bound, tape.constant(inputs.clone()), mask)?;
    let (total, _) = loss::total_loss(&out, labels, ids, bound.classifier(), loss::DEFAULT_MARGIN)?;
    Ok(total.item())
}

#[test]
fn total_loss_through_network() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = NetworkDims {
            d_in: 5,
            hidden: 6,
            h: 2,
            w: 1 + (seed as usize % 2),
            c: 3,
        };
        let mut net = Network::new(dims, 0.7, Pooling::QualityAware, vec![0, 1, 2], seed).unwrap();
        let ids = [0, 0, 1, 1, 2, 2];
        let inputs = uniform(&mut rng, &[6, 5], -2.0, 2.0);
        let mask = sample_mask(0.7, 3, seed).unwrap();

        let tape = Tape::new();
        let bound = net.bind(&tape);
        let out = net.forward(&bound, tape.constant(inputs.clone()), &mask).unwrap();
        let (total, _) = loss::total_loss(&out, &ids, &ids, bound.classifier(), loss::DEFAULT_MARGIN).unwrap();
        let analytic: Vec<f64> = tape
            .backward(total)
            .unwrap()
            .params()
            .iter()
            .flat_map(|g| g.data().to_vec())
            .collect();

        let names: Vec<(String, Vec<usize>)> = net
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        let flat: Vec<f64> = net.params().iter().flat_map(|p| p.value.data().to_vec()).collect();
        let numeric = numeric_gradient(
            |x| {
                let mut offset = 0;
                for (name, shape) in &names {
                    let n: usize = shape.iter().product();
                    net.set_param(name, Tensor::new(shape.clone(), x[offset..offset + n].to_vec())?)?;
                    offset += n;
                }
                network_loss(&net, &inputs, &ids, &ids, &mask)
            },
            &flat,
            FD_STEP,
        )
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < TOL, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn unit_variance_reduces_to_cross_entropy_gradient() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = uniform(&mut rng, &[4, 5], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, 5], -1.0, 1.0);
        let labels = [0, 2, 1, 2];

        let tape = Tape::new();
        let m = tape.param(mu.clone());
        let c = tape.param(w.clone());
        let ones = tape.constant(Tensor::filled(&[4], 1.0));
        let (l_d, _) = loss::data_uncertainty_loss(m, ones, &labels, c).unwrap();
        let g = tape.backward(l_d.mean().unwrap()).unwrap();

        let tape2 = Tape::new();
        let m2 = tape2.param(mu);
        let c2 = tape2.param(w);
        let ce = loss::cross_entropy_rows(loss::cosine_logits(m2, c2).unwrap(), &labels).unwrap();
        let g2 = tape2.backward(ce.mean().unwrap()).unwrap();

        assert_eq!(g.wrt(m), g2.wrt(m2));
        assert_eq!(g.wrt(c), g2.wrt(c2));
    }
}
