//! Central finite-difference checks for tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub epsilon: f64,
    pub rel_tolerance: f64,
    /// Denominator floor so that gradients near zero are compared absolutely.
    pub floor: f64,
    /// Elements probed per tensor; tensors with fewer elements are checked fully.
    pub points: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            rel_tolerance: 1e-4,
            floor: 1e-6,
            points: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ElementCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checks: Vec<ElementCheck>,
    pub rel_tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.max_rel_error() <= self.rel_tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe_indices<R: Rng + ?Sized>(numel: usize, points: usize, rng: &mut R) -> Vec<usize> {
    if numel <= points {
        (0..numel).collect()
    } else {
        let mut idx = sample(rng, numel, points).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Checks d f / d input for a function of a single tensor.
pub fn check_unary<F, R>(name: &str, input: &Tensor, f: F, cfg: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut params = BTreeMap::new();
    params.insert(name.to_string(), input.clone());
    let mut reports = check_params(
        &params,
        |tape, p| {
            let x = tape.param(name, &p[name], true);
            f(tape, x)
        },
        cfg,
        rng,
    )?;
    Ok(reports.remove(0))
}

/// Checks gradients of a scalar function with respect to every named tensor
/// in `params`. `f` must register each parameter on the tape with
/// [`Tape::param`] under its map key.
pub fn check_params<F, R>(
    params: &BTreeMap<String, Tensor>,
    f: F,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss)?;
    let analytic = tape.named_grads();

    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok(t.value(l).item())
    };

    let mut reports = Vec::new();
    let mut work = params.clone();
    for (name, value) in params {
        let grad = analytic.get(name).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        let mut checks = Vec::new();
        for index in probe_indices(value.numel(), cfg.points, rng) {
            let orig = value.data()[index];
            work.get_mut(name).unwrap().data_mut()[index] = orig + cfg.epsilon;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[index] = orig - cfg.epsilon;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = grad.data()[index];
            checks.push(ElementCheck {
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, cfg.floor),
            });
        }
        reports.push(GradCheckReport {
            name: name.clone(),
            checks,
            rel_tolerance: cfg.rel_tolerance,
        });
    }
    Ok(reports)
}

type Scalar = Box<dyn Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<Var>>;

/// `sum(v * w)` for a fixed random `w`, so every output element carries a
/// distinct weight.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(tape.shape(v), 1.0, &mut crate::rng::seeded(seed));
    let w = tape.constant(w);
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

fn case(inputs: &[(&str, &[usize])], rng: &mut crate::rng::Rng) -> BTreeMap<String, Tensor> {
    inputs
        .iter()
        .map(|(n, s)| (n.to_string(), Tensor::uniform(s, 1.0, rng)))
        .collect()
}

fn p(tape: &mut Tape, m: &BTreeMap<String, Tensor>, name: &str) -> Var {
    tape.param(name, &m[name], true)
}

/// Checks every differentiable tape operation on random inputs.
pub fn op_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut r = crate::rng::seeded(seed);
    let cases: Vec<(&str, BTreeMap<String, Tensor>, Scalar)> = vec![
        (
            "matmul",
            case(&[("a", &[3, 4]), ("b", &[4, 2])], &mut r),
            Box::new(|t, m| {
                let (a, b) = (p(t, m, "a"), p(t, m, "b"));
                let y = t.matmul(a, b)?;
                probe(t, y, 1)
            }),
        ),
        (
            "linear",
            case(&[("x", &[3, 4]), ("w", &[2, 4])], &mut r),
            Box::new(|t, m| {
                let (x, w) = (p(t, m, "x"), p(t, m, "w"));
                let y = t.linear(x, w)?;
                probe(t, y, 2)
            }),
        ),
        (
            "bmm",
            case(&[("a", &[2, 3, 4]), ("b", &[2, 4, 2])], &mut r),
            Box::new(|t, m| {
                let (a, b) = (p(t, m, "a"), p(t, m, "b"));
                let y = t.bmm(a, b)?;
                probe(t, y, 3)
            }),
        ),
        (
            "add_broadcast",
            case(&[("a", &[2, 3, 4]), ("b", &[4])], &mut r),
            Box::new(|t, m| {
                let (a, b) = (p(t, m, "a"), p(t, m, "b"));
                let y = t.add(a, b)?;
                probe(t, y, 4)
            }),
        ),
        (
            "sub_mul_scale",
            case(&[("a", &[3, 4]), ("b", &[3, 4])], &mut r),
            Box::new(|t, m| {
                let (a, b) = (p(t, m, "a"), p(t, m, "b"));
                let d = t.sub(a, b)?;
                let y = t.mul(d, a)?;
                let y = t.scale(y, 1.7);
                probe(t, y, 5)
            }),
        ),
        (
            "permute_reshape_transpose",
            case(&[("a", &[2, 3, 4])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let y = t.permute(a, &[2, 0, 1])?;
                let y = t.reshape(y, &[4, 6])?;
                let y = t.transpose(y)?;
                probe(t, y, 6)
            }),
        ),
        (
            "narrow",
            case(&[("a", &[4, 5])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let y = t.narrow(a, 1, 3)?;
                let y = t.narrow(y, 0, 2)?;
                probe(t, y, 7)
            }),
        ),
        (
            "exp",
            case(&[("a", &[3, 4])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let y = t.exp(a);
                probe(t, y, 8)
            }),
        ),
        (
            "softmax",
            case(&[("a", &[3, 5])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let y = t.softmax(a);
                probe(t, y, 9)
            }),
        ),
        (
            "log_softmax",
            case(&[("a", &[3, 5])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let y = t.log_softmax(a);
                probe(t, y, 10)
            }),
        ),
        (
            "gelu",
            case(&[("a", &[12])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let y = t.gelu(a);
                probe(t, y, 11)
            }),
        ),
        (
            "layer_norm",
            case(&[("x", &[3, 6]), ("gain", &[6]), ("bias", &[6])], &mut r),
            Box::new(|t, m| {
                let (x, g, b) = (p(t, m, "x"), p(t, m, "gain"), p(t, m, "bias"));
                let y = t.layer_norm(x, g, b)?;
                probe(t, y, 12)
            }),
        ),
        (
            "embedding",
            case(&[("table", &[5, 3])], &mut r),
            Box::new(|t, m| {
                let e = p(t, m, "table");
                let y = t.embedding(e, &[0, 2, 2, 4])?;
                probe(t, y, 13)
            }),
        ),
        (
            "sum_mean",
            case(&[("a", &[3, 4])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let sq = t.mul(a, a)?;
                let s = t.sum(sq);
                let e = t.exp(a);
                let mu = t.mean(e);
                let mu = t.scale(mu, 3.0);
                t.add(s, mu)
            }),
        ),
        (
            "mean_axis",
            case(&[("a", &[2, 3, 4])], &mut r),
            Box::new(|t, m| {
                let a = p(t, m, "a");
                let y = t.mean_axis(a, 1)?;
                probe(t, y, 14)
            }),
        ),
        (
            "cross_entropy",
            case(&[("z", &[4, 5])], &mut r),
            Box::new(|t, m| {
                let z = p(t, m, "z");
                t.cross_entropy(z, crate::autograd::Target::Indices(vec![0, 3, 4, 1]))
            }),
        ),
        (
            "cross_entropy_soft",
            case(&[("z", &[2, 3])], &mut r),
            Box::new(|t, m| {
                let z = p(t, m, "z");
                let q = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.0, 0.9, 0.1])?;
                t.cross_entropy(z, crate::autograd::Target::Distribution(q))
            }),
        ),
        (
            "kl_divergence",
            case(&[("a", &[3, 4]), ("b", &[3, 4])], &mut r),
            Box::new(|t, m| {
                let (a, b) = (p(t, m, "a"), p(t, m, "b"));
                let pa = t.softmax(a);
                let pb = t.softmax(b);
                t.kl_divergence(pa, pb)
            }),
        ),
        (
            "mse",
            case(&[("a", &[3, 4]), ("b", &[3, 4])], &mut r),
            Box::new(|t, m| {
                let (a, b) = (p(t, m, "a"), p(t, m, "b"));
                t.mse(a, b)
            }),
        ),
    ];
    let mut reports = Vec::new();
    for (op, params, f) in cases {
        for mut rep in check_params(&params, |t, m| f(t, m), cfg, &mut r)? {
            rep.name = format!("{op}/{}", rep.name);
            reports.push(rep);
        }
    }
    Ok(reports)
}
