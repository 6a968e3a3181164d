//! Task, logit-distillation and feature-distillation losses.

use std::collections::BTreeMap;

use crate::autograd::{log_softmax_rows, rows_of, Tape, Target, Var};
use crate::error::{Error, Result};
use crate::model::{ConfigSpace, ForwardOutput};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
    /// One weight per distilled maxnet layer, ascending. A shorter list
    /// repeats its last entry.
    pub betas: Vec<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.9,
            temperature: 1.0,
            betas: vec![0.1],
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.temperature >= 1.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be a finite value >= 1, got {}", self.temperature)));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config(format!("beta weights must be finite and >= 0, got {b}")));
        }
        Ok(())
    }

    pub fn beta(&self, position: usize) -> f64 {
        self.betas.get(position).or(self.betas.last()).copied().unwrap_or(0.0)
    }
}

/// Feature projection matrices `U^m` (`d_low x d_max`), one per distilled
/// maxnet layer `m`. Subnets use the leading columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionBank {
    prefix: String,
    d_low: usize,
    d_max: usize,
    mats: BTreeMap<usize, Tensor>,
}

impl ProjectionBank {
    pub fn new(prefix: &str, layers: &[usize], d_low: usize, d_max: usize, seed: u64) -> Result<Self> {
        if d_low == 0 || d_low > d_max {
            return Err(Error::Config(format!("d_low must be in 1..={d_max}, got {d_low}")));
        }
        let bound = 1.0 / (d_max as f64).sqrt();
        let mats = layers
            .iter()
            .map(|&m| {
                let mut r = rng::seeded(rng::derive(seed, m as u64));
                (m, Tensor::uniform(&[d_low, d_max], bound, &mut r))
            })
            .collect();
        Ok(ProjectionBank {
            prefix: prefix.to_string(),
            d_low,
            d_max,
            mats,
        })
    }

    /// Bank over the distilled layers of `space` with `d_low` capped at the
    /// minnet width.
    pub fn for_space(space: &ConfigSpace, d_low: usize, seed: u64) -> Result<Self> {
        let d_low = d_low.min(space.minnet().hidden);
        ProjectionBank::new("proj", &space.distilled_layers(), d_low, space.maxnet().hidden, seed)
    }

    /// Builds a bank from explicit matrices, all `d_low x d_max`.
    pub fn from_mats(prefix: &str, mats: BTreeMap<usize, Tensor>) -> Result<Self> {
        let Some(first) = mats.values().next() else {
            return Err(Error::Format("projection bank has no matrices".into()));
        };
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("projection bank", &shape, &[0, 0]));
        }
        if let Some(bad) = mats.values().find(|t| t.shape() != shape.as_slice()) {
            return Err(Error::shape("projection bank", &shape, bad.shape()));
        }
        Ok(ProjectionBank {
            prefix: prefix.to_string(),
            d_low: shape[0],
            d_max: shape[1],
            mats,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn d_low(&self) -> usize {
        self.d_low
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.mats.keys().copied()
    }

    pub fn name(&self, m: usize) -> String {
        format!("{}.{m}", self.prefix)
    }

    pub fn get(&self, m: usize) -> Result<&Tensor> {
        self.mats.get(&m).ok_or(Error::Index {
            what: "distilled layer",
            index: m,
            bound: self.mats.keys().last().copied().unwrap_or(0),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.mats.iter().map(|(m, t)| (self.name(*m), t)).collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefix = &self.prefix;
        self.mats.iter_mut().map(|(m, t)| (format!("{prefix}.{m}"), t)).collect()
    }

    /// Parses tensors named `{prefix}.{m}`; other names are ignored.
    pub fn from_named<'a>(prefix: &str, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Option<Self>> {
        let mut mats = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) {
                let m = rest
                    .parse()
                    .map_err(|_| Error::Format(format!("bad projection tensor name `{name}`")))?;
                mats.insert(m, t.clone());
            }
        }
        if mats.is_empty() {
            return Ok(None);
        }
        ProjectionBank::from_mats(prefix, mats).map(Some)
    }
}

/// Leading `d_c` columns of `U^m`.
pub fn slice_projection(bank: &ProjectionBank, d_c: usize, m: usize) -> Result<Tensor> {
    bank.get(m)?.narrow(1, d_c)
}

/// `KL(softmax(z_s / t) || softmax(z_t / t))` over the last axis, averaged
/// over all leading positions. The teacher logits are a constant.
pub fn kd_loss(tape: &mut Tape, z_student: Var, z_teacher: &Tensor, t: f64) -> Result<Var> {
    let shape = tape.shape(z_student).to_vec();
    if shape != z_teacher.shape() {
        return Err(Error::shape("kd_loss", &shape, z_teacher.shape()));
    }
    let (rows, cols) = rows_of(&shape);
    let zt = z_teacher.scale(1.0 / t);
    let log_q = tape.constant(Tensor::new(shape.clone(), log_softmax_rows(zt.data(), cols))?);
    let zs = tape.scale(z_student, 1.0 / t);
    let log_p = tape.log_softmax(zs);
    let p = tape.exp(log_p);
    let ratio = tape.sub(log_p, log_q)?;
    let terms = tape.mul(p, ratio)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / rows.max(1) as f64))
}

/// One term `beta * mse(h_s U_s^T, h_t U_t^T)` of a feature loss. Features
/// are `[rows, d]`, projections `[d_low, d]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureLink {
    pub student: Var,
    pub student_proj: Var,
    pub teacher: Var,
    pub teacher_proj: Var,
    pub beta: f64,
}

pub fn feature_loss(tape: &mut Tape, links: &[FeatureLink]) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for link in links {
        let ps = tape.linear(link.student, link.student_proj)?;
        let pt = tape.linear(link.teacher, link.teacher_proj)?;
        let term = tape.mse(ps, pt)?;
        let term = tape.scale(term, link.beta);
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Feature loss of subnet `c` against detached maxnet features.
///
/// `pairs` holds `(subnet layer, maxnet layer)`, 1-based, as produced by
/// [`ConfigSpace::distill_pairs`]; `teacher[m - 1]` is the maxnet feature of
/// layer `m`. The shared matrix `U^m` is registered once under its bank name
/// and used sliced on the student side and whole on the teacher side.
pub fn fd_loss(
    tape: &mut Tape,
    student: &[Var],
    teacher: &[Tensor],
    bank: &ProjectionBank,
    pairs: &[(usize, usize)],
    cfg: &DistillConfig,
    trainable: bool,
) -> Result<Var> {
    let mut links = Vec::with_capacity(pairs.len());
    for (pos, &(l, m)) in pairs.iter().enumerate() {
        let hs = *student.get(l.wrapping_sub(1)).ok_or(Error::Index {
            what: "subnet feature layer",
            index: l,
            bound: student.len(),
        })?;
        let ht = teacher.get(m.wrapping_sub(1)).ok_or(Error::Index {
            what: "maxnet feature layer",
            index: m,
            bound: teacher.len(),
        })?;
        let u = tape.param(&bank.name(m), bank.get(m)?, trainable);
        let d_c = *tape.shape(hs).last().unwrap_or(&0);
        if d_c > bank.d_max() {
            return Err(Error::shape("fd_loss", tape.shape(hs), &[bank.d_low(), bank.d_max()]));
        }
        let us = tape.narrow(u, 1, d_c)?;
        let ht = tape.constant(ht.clone());
        links.push(FeatureLink {
            student: hs,
            student_proj: us,
            teacher: ht,
            teacher_proj: u,
            beta: cfg.beta(pos),
        });
    }
    feature_loss(tape, &links)
}

/// Detached copy of a forward pass, used as the distillation target.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSignal {
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

impl TeacherSignal {
    pub fn capture(tape: &Tape, out: &ForwardOutput) -> Self {
        TeacherSignal {
            logits: tape.value(out.logits).clone(),
            features: out.features.iter().map(|&f| tape.value(f).clone()).collect(),
        }
    }
}

/// Loss handles plus their values for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub total: Var,
    pub task: f64,
    pub kd: f64,
    pub fd: f64,
    pub total_value: f64,
}

/// `(1 - alpha) task + alpha (kd + fd)`.
pub fn blend(tape: &mut Tape, task: Var, kd: Var, fd: Var, alpha: f64) -> Result<Var> {
    let distill = tape.add(kd, fd)?;
    let a = tape.scale(task, 1.0 - alpha);
    let b = tape.scale(distill, alpha);
    tape.add(a, b)
}

/// Task targets as rows of the logits: one label per sequence for
/// classification, one next token per position for language modelling.
pub fn task_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, Target::Indices(targets.to_vec()))
}

/// `(1 - alpha) task + alpha (kd + fd)` for a subnet; the maxnet returns its
/// task loss unchanged.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    teacher: Option<&TeacherSignal>,
    targets: &[usize],
    cfg: &DistillConfig,
    bank: Option<&ProjectionBank>,
    pairs: &[(usize, usize)],
    is_maxnet: bool,
    bank_trainable: bool,
) -> Result<LossBundle> {
    let task = task_loss(tape, out.logits, targets)?;
    let task_value = tape.value(task).item();
    let teacher = match teacher {
        Some(t) if !is_maxnet => t,
        _ => {
            return Ok(LossBundle {
                total: task,
                task: task_value,
                kd: 0.0,
                fd: 0.0,
                total_value: task_value,
            })
        }
    };
    let kd = kd_loss(tape, out.logits, &teacher.logits, cfg.temperature)?;
    let fd = match bank {
        Some(bank) => fd_loss(tape, &out.features, &teacher.features, bank, pairs, cfg, bank_trainable)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let total = blend(tape, task, kd, fd, cfg.alpha)?;
    Ok(LossBundle {
        total,
        task: task_value,
        kd: tape.value(kd).item(),
        fd: tape.value(fd).item(),
        total_value: tape.value(total).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kd_value(zs: &[f64], zt: &[f64], t: f64) -> f64 {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(zs), true);
        let l = kd_loss(&mut tape, s, &Tensor::vector(zt), t).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn kd_examples() {
        assert_eq!(kd_value(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 1.0), 0.0);
        for t in [1.0, 2.0, 5.0] {
            let expected = 0.5 * (0.5f64 / (1.0 / 3.0)).ln() + 0.5 * (0.5f64 / (2.0 / 3.0)).ln();
            let got = kd_value(&[0.0, 0.0], &[0.0, t * 2f64.ln()], t);
            assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
            assert!((got - 0.058891).abs() < 1e-6);
        }
        assert!(kd_value(&[3.0, -2.0, 0.5], &[-1.0, 4.0, 0.0], 1e6).abs() <= 1e-9);
    }

    #[test]
    fn kd_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::vector(&[0.0, 1.0]), true);
        assert!(matches!(kd_loss(&mut tape, s, &Tensor::vector(&[0.0, 1.0, 2.0]), 1.0), Err(Error::Shape { .. })));
    }

    fn one_layer_bank(u: &[f64]) -> ProjectionBank {
        let mut mats = BTreeMap::new();
        mats.insert(1, Tensor::new(vec![1, u.len()], u.to_vec()).unwrap());
        ProjectionBank::from_mats("proj", mats).unwrap()
    }

    fn fd_value(fs: &[f64], ft: &[f64], beta: f64) -> f64 {
        let bank = one_layer_bank(&[1.0, 0.0]);
        let cfg = DistillConfig { betas: vec![beta], ..Default::default() };
        let mut tape = Tape::new();
        let hs = tape.leaf(Tensor::new(vec![1, fs.len()], fs.to_vec()).unwrap(), true);
        let teacher = vec![Tensor::new(vec![1, ft.len()], ft.to_vec()).unwrap()];
        let l = fd_loss(&mut tape, &[hs], &teacher, &bank, &[(1, 1)], &cfg, true).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn fd_examples() {
        assert!((fd_value(&[2.0, 9.0], &[5.0, 9.0], 0.1) - 0.9).abs() < 1e-12);
        assert_eq!(fd_value(&[2.0, 9.0], &[2.0, 9.0], 0.1), 0.0);
        assert_eq!(fd_value(&[2.0, 9.0], &[5.0, -4.0], 0.0), 0.0);
    }

    #[test]
    fn fd_width_mismatch_is_an_error() {
        let bank = one_layer_bank(&[1.0, 0.0]);
        let mut tape = Tape::new();
        let hs = tape.leaf(Tensor::zeros(&[1, 3]), true);
        let err = fd_loss(&mut tape, &[hs], &[Tensor::zeros(&[1, 2])], &bank, &[(1, 1)], &DistillConfig::default(), true);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn sliced_projection_grad_leaves_other_columns_at_zero() {
        let mut r = rng::seeded(3);
        let bank = ProjectionBank::new("proj", &[1], 2, 6, 9).unwrap();
        let mut tape = Tape::new();
        let hs = tape.leaf(Tensor::uniform(&[4, 3], 1.0, &mut r), false);
        let target = tape.constant(Tensor::uniform(&[4, 2], 1.0, &mut r));
        let u = tape.param("proj.1", bank.get(1).unwrap(), true);
        let us = tape.narrow(u, 1, 3).unwrap();
        let p = tape.linear(hs, us).unwrap();
        let l = tape.mse(p, target).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(slice_projection(&bank, 3, 1).unwrap().data(), tape.value(us).data());
        let g = &tape.named_grads()["proj.1"];
        for row in g.data().chunks(6) {
            assert!(row[..3].iter().all(|v| *v != 0.0));
            assert!(row[3..].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        assert!(DistillConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { temperature: 0.5, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { betas: vec![-0.1], ..Default::default() }.validate().is_err());
    }
}
