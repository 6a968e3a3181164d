//! Multistage supernet fine-tuning, single-student distillation and the
//! plain training loops they are compared against.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::data::{Dataset, Example};
use crate::distill::{self, DistillConfig, FeatureLink, LossBundle, ProjectionBank, TeacherSignal};
use crate::error::{Error, Result};
use crate::model::{self, ArchConfig, ConfigSpace, Supernet, TrainMode};
use crate::rng;
use crate::sampler::{steps_per_epoch, StagePlan, SubnetSampler, NUM_STAGES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with decoupled weight decay; moments are keyed by parameter name.
pub struct AdamW {
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        let c = &self.cfg;
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t);
            let bc2 = 1.0 - c.beta2.powi(st.t);
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// `(n1 / nj)^gamma`.
pub fn gradient_scale(n1: usize, nj: usize, gamma: f64) -> Result<f64> {
    if nj == 0 {
        return Err(Error::Contract("gradient_scale: subnet has no trainable parameters".into()));
    }
    Ok((n1 as f64 / nj as f64).powf(gamma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub gamma: f64,
    /// When false every subnet gradient gets weight 1.
    pub grad_scaling: bool,
    pub optimizer: AdamConfig,
    pub batch: usize,
    pub seed: u64,
    pub stages: StagePlan,
    pub distill: DistillConfig,
    pub d_low: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            gamma: 2.0,
            grad_scaling: true,
            optimizer: AdamConfig::default(),
            batch: 32,
            seed: 0,
            stages: StagePlan::default(),
            distill: DistillConfig::default(),
            d_low: 128,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, space: &ConfigSpace) -> Result<()> {
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be a finite value >= 1, got {}", self.gamma)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.optimizer.lr)));
        }
        self.distill.validate()?;
        self.stages.validate(space)
    }

    fn scale_for(&self, n1: usize, nj: usize) -> Result<f64> {
        let s = gradient_scale(n1, nj, self.gamma)?;
        Ok(if self.grad_scaling { s } else { 1.0 })
    }
}

/// Per-subnet gradient before assembly.
#[derive(Clone, Debug)]
pub struct SubnetGrad {
    pub config: ArchConfig,
    pub scale: f64,
    pub task: f64,
    pub kd: f64,
    pub fd: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub lr: f64,
    pub configs: Vec<ArchConfig>,
    pub task: Vec<f64>,
    pub kd: Vec<f64>,
    pub fd: Vec<f64>,
    pub total: Vec<f64>,
    pub scales: Vec<f64>,
    pub grad_norm: f64,
}

fn bundle_grads(tape: &mut Tape, bundle: &LossBundle) -> Result<BTreeMap<String, Tensor>> {
    tape.backward(bundle.total)?;
    Ok(tape.named_grads())
}

/// Gradient weights `(n_1 / n_j)^gamma` of the sampled subnets, where `n_j`
/// counts the parameters trained at `stage` (the bank only from stage 1 on).
pub fn subnet_scales(net: &Supernet, bank: &ProjectionBank, space: &ConfigSpace, plan: &TrainPlan, stage: usize, configs: &[ArchConfig]) -> Result<Vec<f64>> {
    let bank = (stage > 0).then_some(bank);
    let n1 = model::param_count(net, &space.maxnet(), stage, bank);
    configs
        .iter()
        .map(|c| plan.scale_for(n1, model::param_count(net, c, stage, bank)))
        .collect()
}

/// Forward pass and combined loss of subnet `c`; `teacher` is the detached
/// maxnet output of the same batch, absent for the maxnet itself.
#[allow(clippy::too_many_arguments)]
pub fn subnet_loss(
    tape: &mut Tape,
    net: &Supernet,
    bank: &ProjectionBank,
    space: &ConfigSpace,
    plan: &TrainPlan,
    batch: &model::TokenBatch,
    targets: &[usize],
    stage: usize,
    c: &ArchConfig,
    teacher: Option<&TeacherSignal>,
) -> Result<(model::ForwardOutput, LossBundle)> {
    let fwd = model::forward(tape, net, c, batch, stage, TrainMode::Adapters)?;
    let pairs = space.distill_pairs(c);
    let is_maxnet = *c == space.maxnet();
    let bundle = distill::combined_loss(tape, &fwd, teacher, targets, &plan.distill, Some(bank), &pairs, is_maxnet, true)?;
    Ok((fwd, bundle))
}

/// Forward and backward of each sampled subnet on its own tape. `configs[0]`
/// must be the maxnet; its outputs are the distillation targets of the rest.
#[allow(clippy::too_many_arguments)]
pub fn subnet_gradients(
    net: &Supernet,
    bank: &ProjectionBank,
    space: &ConfigSpace,
    plan: &TrainPlan,
    batch: &model::TokenBatch,
    targets: &[usize],
    stage: usize,
    configs: &[ArchConfig],
) -> Result<Vec<SubnetGrad>> {
    let maxnet = space.maxnet();
    if configs.first() != Some(&maxnet) {
        return Err(Error::Contract("the first sampled configuration must be the maxnet".into()));
    }
    let scales = subnet_scales(net, bank, space, plan, stage, configs)?;
    let mut teacher: Option<TeacherSignal> = None;
    let mut out = Vec::with_capacity(configs.len());
    for (c, scale) in configs.iter().zip(scales) {
        let is_maxnet = *c == maxnet;
        let mut tape = Tape::new();
        let (fwd, bundle) = subnet_loss(&mut tape, net, bank, space, plan, batch, targets, stage, c, teacher.as_ref())?;
        if is_maxnet && teacher.is_none() {
            teacher = Some(TeacherSignal::capture(&tape, &fwd));
        }
        let grads = bundle_grads(&mut tape, &bundle)?;
        out.push(SubnetGrad {
            config: *c,
            scale,
            task: bundle.task,
            kd: bundle.kd,
            fd: bundle.fd,
            total: bundle.total_value,
            grads,
        });
    }
    Ok(out)
}

/// `sum_j scale_j g_j / K`, accumulated in sampling order.
pub fn assemble(parts: &[SubnetGrad]) -> Result<BTreeMap<String, Tensor>> {
    let k = parts.len().max(1) as f64;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for part in parts {
        let w = part.scale / k;
        for (name, g) in &part.grads {
            acc.entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()))
                .add_scaled_assign(g, w)?;
        }
    }
    Ok(acc)
}

/// One update of the stage adapters, the projection bank and the head.
#[allow(clippy::too_many_arguments)]
pub fn mlfs_step(
    net: &mut Supernet,
    bank: &mut ProjectionBank,
    space: &ConfigSpace,
    plan: &TrainPlan,
    opt: &mut AdamW,
    batch: &model::TokenBatch,
    targets: &[usize],
    stage: usize,
    configs: &[ArchConfig],
    lr: f64,
) -> Result<StepRecord> {
    let parts = subnet_gradients(net, bank, space, plan, batch, targets, stage, configs)?;
    let update = assemble(&parts)?;
    let grad_norm = update.values().map(Tensor::norm_sq).sum::<f64>().sqrt();
    let mut params = net.trainable_mut(TrainMode::Adapters, stage);
    params.extend(bank.named_tensors_mut());
    opt.step(params, &update, lr)?;
    Ok(StepRecord {
        step: 0,
        stage,
        lr,
        configs: configs.to_vec(),
        task: parts.iter().map(|p| p.task).collect(),
        kd: parts.iter().map(|p| p.kd).collect(),
        fd: parts.iter().map(|p| p.fd).collect(),
        total: parts.iter().map(|p| p.total).collect(),
        scales: parts.iter().map(|p| p.scale).collect(),
        grad_norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    /// Fraction of rows whose argmax matches the target.
    pub accuracy: f64,
}

/// Mean task loss and accuracy of configuration `c` with adapters composed
/// through `stage`.
pub fn evaluate(net: &Supernet, c: &ArchConfig, stage: usize, examples: &[Example], batch: usize) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluate needs at least one example".into()));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let (mut loss, mut correct, mut rows) = (0.0, 0usize, 0usize);
    for chunk in idx.chunks(batch.max(1)) {
        let (tb, targets) = Dataset::batch(examples, chunk)?;
        let mut tape = Tape::new();
        let out = model::forward(&mut tape, net, c, &tb, stage, TrainMode::Frozen)?;
        let l = distill::task_loss(&mut tape, out.logits, &targets)?;
        loss += tape.value(l).item() * targets.len() as f64;
        let z = tape.value(out.logits);
        let width = *z.shape().last().unwrap();
        for (row, &t) in z.data().chunks(width).zip(&targets) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            correct += usize::from(arg == t);
        }
        rows += targets.len();
    }
    Ok(EvalResult {
        loss: loss / rows as f64,
        accuracy: correct as f64 / rows as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub config: ArchConfig,
    pub loss: f64,
    pub accuracy: f64,
}

/// Checksums of every stored tensor, by name.
pub fn tensor_checksums(net: &Supernet, bank: Option<&ProjectionBank>) -> BTreeMap<String, u32> {
    let mut out: BTreeMap<String, u32> = net
        .base
        .named_tensors()
        .into_iter()
        .chain(net.head.named_tensors())
        .chain(net.adapters.named_tensors())
        .map(|(n, t)| (n, t.checksum()))
        .collect();
    if let Some(bank) = bank {
        out.extend(bank.named_tensors().into_iter().map(|(n, t)| (n, t.checksum())));
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Tensor checksums at the start and end of each stage.
    pub stage_checksums: Vec<(BTreeMap<String, u32>, BTreeMap<String, u32>)>,
}

fn epoch_order(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, stream)));
    order
}

/// Runs stages 0, 1 and 2 over `data.train`, evaluating the maxnet and the
/// minnet on `data.val` after every epoch.
pub fn train_supernet(net: &mut Supernet, bank: &mut ProjectionBank, space: &ConfigSpace, plan: &TrainPlan, data: &Dataset) -> Result<TrainReport> {
    plan.validate(space)?;
    if net.arch() != space.maxnet() {
        return Err(Error::Config(format!(
            "supernet is {} but the configuration space maxnet is {}",
            net.arch(),
            space.maxnet()
        )));
    }
    if net.adapters.num_stages() < NUM_STAGES {
        return Err(Error::Contract(format!("supernet needs {NUM_STAGES} adapter stages")));
    }
    let mut sampler = SubnetSampler::new(rng::derive(plan.seed, 100), plan.stages.policy, plan.stages.k);
    let mut opt = AdamW::new(plan.optimizer.clone());
    let spe = steps_per_epoch(data.train.len(), plan.batch);
    let mut report = TrainReport::default();
    let mut step = 0;
    for stage in 0..NUM_STAGES {
        net.adapters.begin_stage(stage);
        let before = tensor_checksums(net, Some(bank));
        let stage_steps = plan.stages.epochs[stage] * spe;
        let mut local = 0;
        for epoch in 0..plan.stages.epochs[stage] {
            let order = epoch_order(data.train.len(), plan.seed, (stage * 1000 + epoch) as u64);
            for chunk in order.chunks(plan.batch) {
                let (tb, targets) = Dataset::batch(&data.train, chunk)?;
                let lr = cosine_lr(plan.optimizer.lr, local, stage_steps);
                let configs = sampler.sample(space, stage)?;
                let mut rec = mlfs_step(net, bank, space, plan, &mut opt, &tb, &targets, stage, &configs, lr)?;
                rec.step = step;
                report.steps.push(rec);
                step += 1;
                local += 1;
            }
            if !data.val.is_empty() {
                for c in [space.maxnet(), space.minnet()] {
                    let r = evaluate(net, &c, stage, &data.val, 256)?;
                    report.evals.push(EvalRecord {
                        stage,
                        epoch,
                        step,
                        config: c,
                        loss: r.loss,
                        accuracy: r.accuracy,
                    });
                }
            }
        }
        report.stage_checksums.push((before, tensor_checksums(net, Some(bank))));
    }
    Ok(report)
}

/// Budget for the plain full-parameter loops.
#[derive(Clone, Debug, PartialEq)]
pub struct FullPlan {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Validation loss is recorded at step 0 and every `eval_every` steps.
    pub eval_every: usize,
}

/// Loss curves of a training run: `(step, loss)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub train: Vec<(usize, f64)>,
    pub val: Vec<(usize, f64)>,
}

/// Trains every base tensor and the head of `net`'s maxnet on `train`.
pub fn train_full(net: &mut Supernet, train: &[Example], val: &[Example], plan: &FullPlan) -> Result<Curves> {
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let c = net.arch();
    let stage = net.adapters.num_stages().saturating_sub(1);
    let mut opt = AdamW::new(plan.optimizer.clone());
    let mut curves = Curves::default();
    let eval_every = plan.eval_every.max(1);
    let mut order = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..plan.steps {
        if !val.is_empty() && step % eval_every == 0 {
            curves.val.push((step, evaluate(net, &c, stage, val, 256)?.loss));
        }
        if cursor >= order.len() {
            order = epoch_order(train.len(), plan.seed, 5000 + epoch);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + plan.batch).min(order.len());
        let (tb, targets) = Dataset::batch(train, &order[cursor..end])?;
        cursor = end;
        let mut tape = Tape::new();
        let out = model::forward(&mut tape, net, &c, &tb, stage, TrainMode::Full)?;
        let loss = distill::task_loss(&mut tape, out.logits, &targets)?;
        curves.train.push((step, tape.value(loss).item()));
        tape.backward(loss)?;
        let grads = tape.named_grads();
        let lr = cosine_lr(plan.optimizer.lr, step, plan.steps);
        opt.step(net.trainable_mut(TrainMode::Full, stage), &grads, lr)?;
    }
    if !val.is_empty() && plan.steps.is_multiple_of(eval_every) {
        curves.val.push((plan.steps, evaluate(net, &c, stage, val, 256)?.loss));
    }
    Ok(curves)
}

/// Trapezoidal area under a `(step, loss)` curve.
pub fn area_under(curve: &[(usize, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitCurves {
    pub sliced: Curves,
    pub random: Curves,
}

/// Trains subnet `c` from its slice of the trained supernet and from a
/// random initialization under the same budget.
pub fn sliced_vs_random_init(net: &Supernet, space: &ConfigSpace, c: &ArchConfig, stage: usize, data: &Dataset, plan: &FullPlan) -> Result<InitCurves> {
    let mut sliced = model::export(net, space, c, stage)?;
    let mut random = Supernet::random(net.dims, *c, 1, 0, rng::derive(plan.seed, 7))?;
    Ok(InitCurves {
        sliced: train_full(&mut sliced, &data.train, &data.val, plan)?,
        random: train_full(&mut random, &data.train, &data.val, plan)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentPlan {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub rank: usize,
    pub d_low: usize,
    pub eval_every: usize,
}

pub struct StudentRun {
    pub student: Supernet,
    pub u_student: ProjectionBank,
    pub u_teacher: ProjectionBank,
    /// Loss of the first batch before any update.
    pub initial_loss: f64,
    pub curves: Curves,
}

/// Distils a fine-tuned `teacher` (adapters composed through
/// `teacher_stage`) into a pre-trained student through one adapter pair and
/// per-layer projections `U_S^l`, `U_T^l`.
///
/// `U_S^l` starts as the leading columns of `U_T^l`, so a student identical
/// to its teacher starts at zero distillation loss.
pub fn distill_student(
    teacher: &Supernet,
    teacher_stage: usize,
    student_pre: &Supernet,
    cfg: &DistillConfig,
    plan: &StudentPlan,
    data: &Dataset,
) -> Result<StudentRun> {
    cfg.validate()?;
    let (ct, cs) = (teacher.arch(), student_pre.arch());
    if cs.hidden > ct.hidden || cs.layers > ct.layers {
        return Err(Error::Contract(format!("student {cs} must not be larger than teacher {ct}")));
    }
    if data.train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut student = student_pre.clone().with_fresh_adapters(plan.rank, 1, rng::derive(plan.seed, 11))?;
    let layers: Vec<usize> = (1..=cs.layers).collect();
    let d_low = plan.d_low.min(cs.hidden);
    let mut u_teacher = ProjectionBank::new("proj.teacher", &layers, d_low, ct.hidden, rng::derive(plan.seed, 12))?;
    let mats = u_teacher
        .named_tensors()
        .into_iter()
        .zip(&layers)
        .map(|((_, t), &l)| Ok((l, t.narrow(1, cs.hidden)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut u_student = ProjectionBank::from_mats("proj.student", mats)?;
    let mapped = layers
        .iter()
        .map(|&l| model::layer_map(cs.layers, ct.layers, l))
        .collect::<Result<Vec<_>>>()?;

    let mut opt = AdamW::new(plan.optimizer.clone());
    let mut curves = Curves::default();
    let eval_every = plan.eval_every.max(1);
    let mut initial_loss = f64::NAN;
    let (mut order, mut cursor, mut epoch) = (Vec::new(), 0, 0u64);
    for step in 0..plan.steps {
        if !data.val.is_empty() && step % eval_every == 0 {
            curves.val.push((step, evaluate(&student, &cs, 0, &data.val, 256)?.loss));
        }
        if cursor >= order.len() {
            order = epoch_order(data.train.len(), plan.seed, 9000 + epoch);
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + plan.batch).min(order.len());
        let (tb, targets) = Dataset::batch(&data.train, &order[cursor..end])?;
        cursor = end;

        let mut tt = Tape::new();
        let tout = model::forward(&mut tt, teacher, &ct, &tb, teacher_stage, TrainMode::Frozen)?;
        let signal = TeacherSignal::capture(&tt, &tout);

        let mut tape = Tape::new();
        let out = model::forward(&mut tape, &student, &cs, &tb, 0, TrainMode::Adapters)?;
        let task = distill::task_loss(&mut tape, out.logits, &targets)?;
        let kd = distill::kd_loss(&mut tape, out.logits, &signal.logits, cfg.temperature)?;
        let mut links = Vec::with_capacity(layers.len());
        for (pos, (&l, &m)) in layers.iter().zip(&mapped).enumerate() {
            let us = tape.param(&u_student.name(l), u_student.get(l)?, true);
            let ut = tape.param(&u_teacher.name(l), u_teacher.get(l)?, true);
            let ht = tape.constant(signal.features[m - 1].clone());
            links.push(FeatureLink {
                student: out.features[l - 1],
                student_proj: us,
                teacher: ht,
                teacher_proj: ut,
                beta: cfg.beta(pos),
            });
        }
        let fd = distill::feature_loss(&mut tape, &links)?;
        let total = distill::blend(&mut tape, task, kd, fd, cfg.alpha)?;
        let value = tape.value(total).item();
        if step == 0 {
            initial_loss = value;
        }
        curves.train.push((step, value));
        tape.backward(total)?;
        let grads = tape.named_grads();
        let lr = cosine_lr(plan.optimizer.lr, step, plan.steps);
        let mut params = student.trainable_mut(TrainMode::Adapters, 0);
        params.extend(u_student.named_tensors_mut());
        params.extend(u_teacher.named_tensors_mut());
        opt.step(params, &grads, lr)?;
    }
    if !data.val.is_empty() && plan.steps.is_multiple_of(eval_every) {
        curves.val.push((plan.steps, evaluate(&student, &cs, 0, &data.val, 256)?.loss));
    }
    Ok(StudentRun {
        student,
        u_student,
        u_teacher,
        initial_loss,
        curves,
    })
}
