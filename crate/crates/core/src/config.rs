//! TOML run configuration.
//!
//! ```toml
//! [model]
//! vocab = 16
//! d_max = 32
//! h_max = 4
//! f_max = 64
//! l_max = 4
//! allowed_widths = [[16, 2, 32], [24, 3, 48], [32, 4, 64]]
//! allowed_depths = [2, 3, 4]
//!
//! [train]
//! lr = 1e-3
//! batch = 32
//! epochs = [2, 3, 3]
//! k = 3
//! gamma = 2.0
//! seed = 0
//!
//! [distill]
//! alpha = 0.9
//! temperature = 1.0
//! beta = 0.1
//! d_low = 128
//! rank = 8
//!
//! [task]
//! name = "classify"
//! size = 2000
//! seq_len = 8
//! classes = 4
//! ```
//!
//! Every field outside `[model]` has a default. `MLFS_SEED` in the
//! environment overrides `train.seed` when loading from a file.

use std::ops::Range;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use crate::data::{TaskName, TaskSpec};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::{ConfigSpace, ModelDims, TaskKind, Width};
use crate::sampler::{SamplingPolicy, StagePlan};
use crate::trainer::{AdamConfig, TrainPlan};

pub const SEED_ENV: &str = "MLFS_SEED";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    distill: RawDistill,
    #[serde(default)]
    task: RawTask,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    vocab: Spanned<usize>,
    d_max: Spanned<usize>,
    h_max: Spanned<usize>,
    f_max: Spanned<usize>,
    l_max: Spanned<usize>,
    allowed_widths: Spanned<Vec<Spanned<[usize; 3]>>>,
    allowed_depths: Spanned<Vec<usize>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    lr: Option<Spanned<f64>>,
    batch: Option<Spanned<usize>>,
    epochs: Option<Spanned<[usize; 3]>>,
    k: Option<Spanned<usize>>,
    policy: Option<SamplingPolicy>,
    gamma: Option<Spanned<f64>>,
    grad_scaling: Option<bool>,
    seed: Option<u64>,
    weight_decay: Option<Spanned<f64>>,
    pretrain_steps: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDistill {
    alpha: Option<Spanned<f64>>,
    temperature: Option<Spanned<f64>>,
    beta: Option<Spanned<OneOrMany>>,
    d_low: Option<Spanned<usize>>,
    rank: Option<Spanned<usize>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTask {
    name: Option<TaskName>,
    size: Option<Spanned<usize>>,
    seq_len: Option<Spanned<usize>>,
    classes: Option<Spanned<usize>>,
}

/// A validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub space: ConfigSpace,
    pub plan: TrainPlan,
    pub rank: usize,
    pub task: TaskSpec,
    /// Full-parameter steps used to produce the frozen base weights.
    pub pretrain_steps: usize,
}

struct Locator<'a> {
    path: &'a str,
    src: &'a str,
}

impl Locator<'_> {
    fn line(&self, offset: usize) -> usize {
        self.src[..offset.min(self.src.len())].matches('\n').count() + 1
    }

    fn err(&self, span: Range<usize>, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            line: self.line(span.start),
            message: message.into(),
        }
    }

    /// Line of the `[section]` header, or 1 when it is absent.
    fn section(&self, name: &str) -> Range<usize> {
        let header = format!("[{name}]");
        let at = self.src.find(&header).unwrap_or(0);
        at..at
    }
}

fn check<T>(loc: &Locator, v: &Spanned<T>, ok: bool, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(loc.err(v.span(), message))
    }
}

impl RunConfig {
    /// Reads `path`, then applies the `MLFS_SEED` override.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let src = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::parse(&src, &path.display().to_string())?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.plan.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{seed}`")))?;
        }
        Ok(cfg)
    }

    /// Parses and validates TOML text; `path` only labels error messages.
    pub fn parse(src: &str, path: &str) -> Result<RunConfig> {
        let loc = Locator { path, src };
        let raw: Raw = toml::from_str(src).map_err(|e| loc.err(e.span().unwrap_or(0..0), e.message().trim()))?;
        let m = &raw.model;

        let mut widths = Vec::new();
        for w in m.allowed_widths.get_ref() {
            let [hidden, heads, ffn] = *w.get_ref();
            check(&loc, w, hidden > 0 && heads > 0 && ffn > 0, "width triples need positive (hidden, heads, ffn)")?;
            check(
                &loc,
                w,
                hidden % heads == 0,
                format!("hidden width {hidden} is not divisible by {heads} heads; pick a head count that divides it"),
            )?;
            widths.push(Width { hidden, heads, ffn });
        }
        check(&loc, &m.allowed_widths, !widths.is_empty(), "allowed_widths must not be empty")?;
        let largest = *widths.iter().max().unwrap();
        let d_head = *m.d_max.get_ref() / (*m.h_max.get_ref()).max(1);
        for (w, raw_w) in widths.iter().zip(m.allowed_widths.get_ref()) {
            check(
                &loc,
                raw_w,
                w.hidden / w.heads == d_head,
                format!(
                    "width {}/{} heads has head size {}, but d_max / h_max = {d_head}; scale heads with width",
                    w.hidden,
                    w.heads,
                    w.hidden / w.heads
                ),
            )?;
            check(
                &loc,
                raw_w,
                w.hidden <= *m.d_max.get_ref() && w.heads <= *m.h_max.get_ref() && w.ffn <= *m.f_max.get_ref(),
                "width triple exceeds (d_max, h_max, f_max)",
            )?;
        }
        check(&loc, &m.h_max, *m.h_max.get_ref() > 0, "h_max must be positive")?;
        check(
            &loc,
            &m.d_max,
            m.d_max.get_ref().is_multiple_of(*m.h_max.get_ref()),
            format!("d_max {} is not divisible by h_max {}", m.d_max.get_ref(), m.h_max.get_ref()),
        )?;
        check(
            &loc,
            &m.d_max,
            (largest.hidden, largest.heads, largest.ffn) == (*m.d_max.get_ref(), *m.h_max.get_ref(), *m.f_max.get_ref()),
            "the largest allowed width must equal (d_max, h_max, f_max)",
        )?;
        let depths = m.allowed_depths.get_ref().clone();
        check(&loc, &m.allowed_depths, !depths.is_empty() && depths.iter().all(|&d| d > 0), "allowed_depths must be positive")?;
        check(
            &loc,
            &m.l_max,
            depths.iter().max() == Some(m.l_max.get_ref()),
            "l_max must equal the largest allowed depth",
        )?;
        check(&loc, &m.vocab, *m.vocab.get_ref() >= 2, "vocab must be at least 2")?;
        let space = ConfigSpace::new(widths, depths).map_err(|e| loc.err(m.allowed_widths.span(), e.to_string()))?;

        let t = &raw.train;
        let mut plan = TrainPlan::default();
        if let Some(lr) = &t.lr {
            check(&loc, lr, *lr.get_ref() > 0.0 && lr.get_ref().is_finite(), "lr must be positive")?;
            plan.optimizer.lr = *lr.get_ref();
        }
        if let Some(b) = &t.batch {
            check(&loc, b, *b.get_ref() > 0, "batch must be positive")?;
            plan.batch = *b.get_ref();
        }
        let mut stages = StagePlan::default();
        if let Some(e) = &t.epochs {
            check(&loc, e, e.get_ref()[0] > 0, "stage 0 needs at least one epoch")?;
            stages.epochs = *e.get_ref();
        }
        if let Some(p) = t.policy {
            stages.policy = p;
        }
        let k_span = match &t.k {
            Some(k) => {
                check(&loc, k, *k.get_ref() >= 2, "k must be at least 2")?;
                stages.k = *k.get_ref();
                k.span()
            }
            None => loc.section("train"),
        };
        stages.validate(&space).map_err(|e| loc.err(k_span, e.to_string()))?;
        plan.stages = stages;
        if let Some(g) = &t.gamma {
            check(&loc, g, *g.get_ref() >= 1.0 && g.get_ref().is_finite(), "gamma must be >= 1")?;
            plan.gamma = *g.get_ref();
        }
        if let Some(s) = t.grad_scaling {
            plan.grad_scaling = s;
        }
        if let Some(s) = t.seed {
            plan.seed = s;
        }
        if let Some(wd) = &t.weight_decay {
            check(&loc, wd, *wd.get_ref() >= 0.0, "weight_decay must be >= 0")?;
            plan.optimizer = AdamConfig {
                weight_decay: *wd.get_ref(),
                ..plan.optimizer
            };
        }

        let d = &raw.distill;
        let mut dc = DistillConfig::default();
        if let Some(a) = &d.alpha {
            check(&loc, a, (0.0..=1.0).contains(a.get_ref()), "alpha must lie in [0, 1]")?;
            dc.alpha = *a.get_ref();
        }
        if let Some(tv) = &d.temperature {
            check(&loc, tv, *tv.get_ref() >= 1.0 && tv.get_ref().is_finite(), "temperature must be >= 1")?;
            dc.temperature = *tv.get_ref();
        }
        if let Some(b) = &d.beta {
            dc.betas = match b.get_ref() {
                OneOrMany::One(v) => vec![*v],
                OneOrMany::Many(v) => v.clone(),
            };
            check(&loc, b, !dc.betas.is_empty() && dc.betas.iter().all(|v| *v >= 0.0 && v.is_finite()), "beta must be >= 0")?;
        }
        plan.distill = dc;
        if let Some(dl) = &d.d_low {
            check(&loc, dl, *dl.get_ref() > 0, "d_low must be positive")?;
            plan.d_low = *dl.get_ref();
        }
        let min_dim = space.minnet().hidden.min(space.minnet().ffn);
        let rank = match &d.rank {
            Some(r) => {
                check(
                    &loc,
                    r,
                    *r.get_ref() >= 1 && *r.get_ref() <= min_dim,
                    format!("rank must be in 1..={min_dim} (smallest adapted matrix)"),
                )?;
                *r.get_ref()
            }
            None => 8.min(min_dim),
        };

        let tk = &raw.task;
        let name = tk.name.unwrap_or(TaskName::Classify);
        let size = match &tk.size {
            Some(s) => {
                check(&loc, s, *s.get_ref() >= 10, "task size must be at least 10")?;
                *s.get_ref()
            }
            None => 2000,
        };
        let seq_len = match &tk.seq_len {
            Some(s) => {
                check(&loc, s, *s.get_ref() >= 1, "seq_len must be positive")?;
                *s.get_ref()
            }
            None => 8,
        };
        let classes = match &tk.classes {
            Some(c) => {
                check(&loc, c, *c.get_ref() >= 2, "classes must be at least 2")?;
                *c.get_ref()
            }
            None => 4,
        };
        let task = TaskSpec {
            name,
            size,
            seq_len,
            vocab: *m.vocab.get_ref(),
            classes,
        };
        let dims = ModelDims {
            vocab: task.vocab,
            max_seq: seq_len,
            task: match name {
                TaskName::Classify => TaskKind::Classify { classes },
                TaskName::CharLm => TaskKind::LanguageModel,
            },
        };
        Ok(RunConfig {
            dims,
            space,
            plan,
            rank,
            task,
            pretrain_steps: t.pretrain_steps.unwrap_or(300),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[model]
vocab = 16
d_max = 32
h_max = 4
f_max = 64
l_max = 4
allowed_widths = [[16, 2, 32], [24, 3, 48], [32, 4, 64]]
allowed_depths = [2, 3, 4]

[train]
epochs = [1, 1, 1]
gamma = 1.5

[distill]
beta = [0.1, 0.2]

[task]
name = "char_lm"
size = 100
"#;

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = RunConfig::parse(GOOD, "good.toml").unwrap();
        assert_eq!(cfg.space.maxnet().to_string(), "d32h4f64L4");
        assert_eq!(cfg.plan.stages.epochs, [1, 1, 1]);
        assert_eq!(cfg.plan.gamma, 1.5);
        assert_eq!(cfg.plan.distill.betas, vec![0.1, 0.2]);
        assert_eq!(cfg.plan.distill.alpha, 0.9);
        assert_eq!(cfg.rank, 8);
        assert_eq!(cfg.dims.task, TaskKind::LanguageModel);
    }

    fn line_of(src: &str) -> (usize, String) {
        match RunConfig::parse(src, "x.toml").unwrap_err() {
            Error::Parse { line, message, .. } => (line, message),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn indivisible_heads_point_at_the_triple() {
        let src = GOOD.replace("[24, 3, 48]", "[24, 5, 48]");
        let (line, msg) = line_of(&src);
        assert_eq!(line, 8);
        assert!(msg.contains("not divisible"), "{msg}");
    }

    #[test]
    fn bad_alpha_and_unknown_key_have_lines() {
        let src = GOOD.replace("beta = [0.1, 0.2]", "beta = [0.1]\nalpha = 1.5");
        assert_eq!(line_of(&src).0, 17);
        let src = GOOD.replace("gamma = 1.5", "gamma = 1.5\nlearning = 3");
        assert_eq!(line_of(&src).0, 14);
        let src = GOOD.replace("gamma = 1.5", "gamma = 0.5");
        assert_eq!(line_of(&src).0, 13);
    }

    #[test]
    fn maxnet_must_match_model_dims() {
        let src = GOOD.replace("l_max = 4", "l_max = 5");
        assert_eq!(line_of(&src).0, 7);
        let src = GOOD.replace("d_max = 32", "d_max = 48");
        assert!(line_of(&src).0 >= 3);
    }
}
