//! End-to-end pipelines shared by the command line and the acceptance tests.

use std::collections::BTreeMap;

use crate::autograd::{Tape, Var};
use crate::config::RunConfig;
use crate::data::{gen_synthetic_task, Dataset};
use crate::distill::{DistillConfig, ProjectionBank, TeacherSignal};
use crate::error::Result;
use crate::gradcheck::{check_params, GradCheckConfig, GradCheckReport};
use crate::metrics::GammaRow;
use crate::model::{self, ArchConfig, ConfigSpace, ModelDims, Supernet, TaskHead, TaskKind, TrainMode, Width};
use crate::rng;
use crate::sampler::NUM_STAGES;
use crate::tensor::Tensor;
use crate::trainer::{self, AdamConfig, FullPlan, InitCurves, StudentPlan, StudentRun, TrainPlan, TrainReport};

/// Learning rate of the full-parameter pre-training that produces the
/// frozen base.
pub const PRETRAIN_LR: f64 = 3e-3;

pub fn task_data(cfg: &RunConfig) -> Result<Dataset> {
    gen_synthetic_task(&cfg.task, rng::derive(cfg.plan.seed, 22))
}

/// A random maxnet trained with all weights on a companion dataset (same
/// generator, different seed), followed by a fresh task head. This stands in
/// for a pre-trained checkpoint.
pub fn pretrained_supernet(cfg: &RunConfig) -> Result<Supernet> {
    let seed = cfg.plan.seed;
    let mut net = Supernet::random(cfg.dims, cfg.space.maxnet(), cfg.rank, NUM_STAGES, rng::derive(seed, 20))?;
    if cfg.pretrain_steps > 0 {
        let corpus = gen_synthetic_task(&cfg.task, rng::derive(seed, 21))?;
        let plan = FullPlan {
            steps: cfg.pretrain_steps,
            batch: cfg.plan.batch,
            optimizer: AdamConfig {
                lr: PRETRAIN_LR,
                ..AdamConfig::default()
            },
            seed: rng::derive(seed, 24),
            eval_every: cfg.pretrain_steps,
        };
        trainer::train_full(&mut net, &corpus.train, &[], &plan)?;
        net.head = TaskHead::random(cfg.dims.out_dim(), cfg.space.maxnet().hidden, rng::derive(seed, 25));
    }
    Ok(net)
}

pub struct MlfsRun {
    pub net: Supernet,
    pub bank: ProjectionBank,
    pub data: Dataset,
    pub report: TrainReport,
}

/// Runs all three stages from an already pre-trained supernet.
pub fn run_mlfs_from(mut net: Supernet, cfg: &RunConfig, plan: &TrainPlan, data: Dataset) -> Result<MlfsRun> {
    let mut bank = ProjectionBank::for_space(&cfg.space, plan.d_low, rng::derive(plan.seed, 23))?;
    let report = trainer::train_supernet(&mut net, &mut bank, &cfg.space, plan, &data)?;
    Ok(MlfsRun { net, bank, data, report })
}

pub fn run_mlfs(cfg: &RunConfig) -> Result<MlfsRun> {
    let net = pretrained_supernet(cfg)?;
    run_mlfs_from(net, cfg, &cfg.plan, task_data(cfg)?)
}

/// Two runs from the same pre-trained weights and data: one with scaling
/// exponent `plan.gamma`, one with scaling disabled.
pub struct GammaPair {
    pub seed: u64,
    pub scaled: MlfsRun,
    pub unscaled: MlfsRun,
}

pub fn gamma_pair(cfg: &RunConfig, seed: u64) -> Result<GammaPair> {
    let mut c = cfg.clone();
    c.plan.seed = seed;
    let net = pretrained_supernet(&c)?;
    let data = task_data(&c)?;
    let mut runs = [true, false].into_iter().map(|scaling| {
        let mut plan = c.plan.clone();
        plan.grad_scaling = scaling;
        run_mlfs_from(net.clone(), &c, &plan, data.clone())
    });
    Ok(GammaPair {
        seed,
        scaled: runs.next().unwrap()?,
        unscaled: runs.next().unwrap()?,
    })
}

pub fn gamma_rows(cfg: &RunConfig, pair: &GammaPair) -> Result<Vec<GammaRow>> {
    let last = NUM_STAGES - 1;
    let (minnet, maxnet) = (cfg.space.minnet(), cfg.space.maxnet());
    [(true, &pair.scaled), (false, &pair.unscaled)]
        .into_iter()
        .map(|(grad_scaling, run)| {
            Ok(GammaRow {
                seed: pair.seed,
                grad_scaling,
                gamma: cfg.plan.gamma,
                minnet_train_loss: trainer::evaluate(&run.net, &minnet, last, &run.data.train, 256)?.loss,
                maxnet_train_loss: trainer::evaluate(&run.net, &maxnet, last, &run.data.train, 256)?.loss,
                minnet_val_loss: trainer::evaluate(&run.net, &minnet, last, &run.data.val, 256)?.loss,
            })
        })
        .collect()
}

/// Trains with scaling exponent `cfg.plan.gamma` and with scaling disabled
/// from the same pre-trained weights, for every seed.
pub fn ablate_gamma(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<GammaRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        rows.extend(gamma_rows(cfg, &gamma_pair(cfg, seed)?)?);
    }
    Ok(rows)
}

/// Default full-parameter budget for the initialization comparison.
pub fn init_plan(cfg: &RunConfig, steps: usize, seed: u64) -> FullPlan {
    FullPlan {
        steps,
        batch: cfg.plan.batch,
        optimizer: cfg.plan.optimizer.clone(),
        seed,
        eval_every: (steps / 10).max(1),
    }
}

pub fn ablate_init(run: &MlfsRun, space: &ConfigSpace, c: &ArchConfig, plan: &FullPlan) -> Result<InitCurves> {
    trainer::sliced_vs_random_init(&run.net, space, c, NUM_STAGES - 1, &run.data, plan)
}

/// The pre-trained student for configuration `c`: the slice of the frozen
/// base with every adapter product zeroed, plus the sliced head.
pub fn student_base(net: &Supernet, space: &ConfigSpace, c: &ArchConfig) -> Result<Supernet> {
    let mut bare = net.clone();
    for slot in bare.adapters.slots_mut() {
        for pair in &mut slot.pairs {
            pair.b = Tensor::zeros(pair.b.shape());
        }
    }
    model::export(&bare, space, c, 0)
}

/// The composed maxnet of `net`, further trained with all weights for
/// `plan.steps` steps.
pub fn finetuned_teacher(net: &Supernet, space: &ConfigSpace, data: &Dataset, plan: &FullPlan) -> Result<Supernet> {
    let last = net.adapters.num_stages().saturating_sub(1);
    let mut teacher = model::export(net, space, &space.maxnet(), last)?;
    trainer::train_full(&mut teacher, &data.train, &[], plan)?;
    Ok(teacher)
}

/// Outcome of distilling one fine-tuned maxnet into one pre-trained student
/// with several distillation factors.
pub struct DistillComparison {
    pub seed: u64,
    pub teacher_val_loss: f64,
    pub runs: Vec<(f64, StudentRun)>,
}

/// The single-stage distillation setting: the pre-trained maxnet is fully
/// fine-tuned on the task to become the teacher, and the student is the
/// pre-trained slice `student` with one fresh adapter pair.
pub fn distill_comparison(cfg: &RunConfig, seed: u64, student: &ArchConfig, teacher_steps: usize, alphas: &[f64], plan: &StudentPlan) -> Result<DistillComparison> {
    let mut c = cfg.clone();
    c.plan.seed = seed;
    let net = pretrained_supernet(&c)?;
    let data = task_data(&c)?;
    let tplan = FullPlan {
        steps: teacher_steps,
        batch: c.plan.batch,
        optimizer: AdamConfig {
            lr: PRETRAIN_LR,
            ..AdamConfig::default()
        },
        seed: rng::derive(seed, 31),
        eval_every: teacher_steps.max(1),
    };
    let teacher = finetuned_teacher(&net, &c.space, &data, &tplan)?;
    let teacher_val_loss = trainer::evaluate(&teacher, &c.space.maxnet(), 0, &data.val, 256)?.loss;
    let base = student_base(&net, &c.space, student)?;
    let plan = StudentPlan {
        seed: rng::derive(seed, 30),
        ..plan.clone()
    };
    let runs = student_runs(&teacher, &base, &data, &c.plan.distill, alphas, &plan)?;
    Ok(DistillComparison {
        seed,
        teacher_val_loss,
        runs: alphas.iter().copied().zip(runs).collect(),
    })
}

/// Distils `teacher` into `student_pre` once per entry of `alphas`, with
/// everything else shared.
pub fn student_runs(
    teacher: &Supernet,
    student_pre: &Supernet,
    data: &Dataset,
    distill: &DistillConfig,
    alphas: &[f64],
    plan: &StudentPlan,
) -> Result<Vec<StudentRun>> {
    alphas
        .iter()
        .map(|&alpha| {
            let dc = DistillConfig {
                alpha,
                ..distill.clone()
            };
            trainer::distill_student(teacher, 0, student_pre, &dc, plan, data)
        })
        .collect()
}

/// A two-layer, width-16 supernet with random adapters, used to check the
/// gradients of every trainable parameter class.
pub struct GradFixture {
    pub net: Supernet,
    pub bank: ProjectionBank,
    pub space: ConfigSpace,
    pub plan: TrainPlan,
    pub batch: model::TokenBatch,
    pub targets: Vec<usize>,
    pub stage: usize,
    pub configs: Vec<ArchConfig>,
}

impl GradFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let dims = ModelDims {
            vocab: 8,
            max_seq: 4,
            task: TaskKind::Classify { classes: 3 },
        };
        let space = ConfigSpace::new(
            vec![
                Width { hidden: 8, heads: 1, ffn: 16 },
                Width { hidden: 16, heads: 2, ffn: 32 },
            ],
            vec![1, 2],
        )?;
        let mut net = Supernet::random(dims, space.maxnet(), 2, NUM_STAGES, rng::derive(seed, 1))?;
        let mut r = rng::seeded(rng::derive(seed, 2));
        for slot in net.adapters.slots_mut() {
            for pair in &mut slot.pairs {
                pair.b = Tensor::uniform(pair.b.shape(), 0.3, &mut r);
            }
        }
        let bank = ProjectionBank::for_space(&space, 4, rng::derive(seed, 3))?;
        let plan = TrainPlan {
            distill: DistillConfig {
                alpha: 0.5,
                temperature: 2.0,
                betas: vec![0.3],
            },
            ..TrainPlan::default()
        };
        let tokens = (0..8).map(|i| (i * 5 + seed as usize) % 8).collect();
        Ok(GradFixture {
            batch: model::TokenBatch::new(tokens, 2, 4)?,
            targets: vec![0, 2],
            stage: 2,
            configs: vec![space.maxnet(), ArchConfig::new(8, 1, 16, 1)],
            net,
            bank,
            space,
            plan,
        })
    }

    /// Current values of the stage adapters, the head and the bank.
    pub fn params(&mut self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self
            .net
            .trainable_mut(TrainMode::Adapters, self.stage)
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        out.extend(self.bank.named_tensors().into_iter().map(|(n, t)| (n, t.clone())));
        out
    }

    fn with_params(&self, params: &BTreeMap<String, Tensor>) -> (Supernet, ProjectionBank) {
        let mut net = self.net.clone();
        let mut bank = self.bank.clone();
        for (name, t) in net.trainable_mut(TrainMode::Adapters, self.stage).into_iter().chain(bank.named_tensors_mut()) {
            if let Some(v) = params.get(&name) {
                *t = v.clone();
            }
        }
        (net, bank)
    }

    /// `sum_j scale_j L_j / K` with the maxnet outputs of the unperturbed
    /// weights held fixed as distillation targets.
    pub fn scaled_loss(&self, tape: &mut Tape, params: &BTreeMap<String, Tensor>, teacher: &TeacherSignal) -> Result<Var> {
        let (net, bank) = self.with_params(params);
        let scales = trainer::subnet_scales(&self.net, &self.bank, &self.space, &self.plan, self.stage, &self.configs)?;
        let k = self.configs.len() as f64;
        let mut total = tape.constant(Tensor::scalar(0.0));
        for (c, scale) in self.configs.iter().zip(scales) {
            let t = (*c != self.space.maxnet()).then_some(teacher);
            let (_, bundle) = trainer::subnet_loss(tape, &net, &bank, &self.space, &self.plan, &self.batch, &self.targets, self.stage, c, t)?;
            let term = tape.scale(bundle.total, scale / k);
            total = tape.add(total, term)?;
        }
        Ok(total)
    }

    pub fn teacher(&self) -> Result<TeacherSignal> {
        let mut tape = Tape::new();
        let out = model::forward(&mut tape, &self.net, &self.space.maxnet(), &self.batch, self.stage, TrainMode::Adapters)?;
        Ok(TeacherSignal::capture(&tape, &out))
    }
}

/// Finite-difference check of the scaled multi-subnet loss with respect to
/// every stage adapter, the head and the projection bank.
pub fn model_gradcheck(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut fx = GradFixture::new(seed)?;
    let teacher = fx.teacher()?;
    let params = fx.params();
    let mut r = rng::seeded(rng::derive(seed, 4));
    check_params(&params, |tape, p| fx.scaled_loss(tape, p, &teacher), cfg, &mut r)
}
