//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! reach the console.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mlfs::autograd::{Tape, Target};
use mlfs::checkpoint::{self, ADAPTER_FILE, BASE_FILE, TRAINABLE_FILE};
use mlfs::config::RunConfig;
use mlfs::distill::{self, DistillConfig, FeatureLink, ProjectionBank, TeacherSignal};
use mlfs::experiments::{self, GammaPair};
use mlfs::gradcheck::GradCheckConfig;
use mlfs::lora::{self, AdaptTarget, AdapterStack};
use mlfs::metrics::{self, EvalRow};
use mlfs::model::{self, ConfigSpace, ModelDims, Supernet, TaskKind, TokenBatch, TrainMode, Width};
use mlfs::rng;
use mlfs::sampler::NUM_STAGES;
use mlfs::trainer::{self, StudentPlan};
use mlfs::{Error, Tensor};
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny_config() -> RunConfig {
    let src = r#"
[model]
vocab = 12
d_max = 16
h_max = 2
f_max = 32
l_max = 2
allowed_widths = [[8, 1, 16], [16, 2, 32]]
allowed_depths = [1, 2]

[train]
lr = 0.01
batch = 16
epochs = [1, 1, 1]
k = 2
seed = 11
pretrain_steps = 10

[distill]
d_low = 4
rank = 2

[task]
name = "classify"
size = 120
seq_len = 6
classes = 3
"#;
    RunConfig::parse(src, "tiny.toml").expect("tiny config parses")
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// 1. gradients of every trainable parameter class
// ---------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let reports = experiments::model_gradcheck(7, &GradCheckConfig::default()).expect("gradcheck runs");
    let elapsed = start.elapsed();
    let class_of = |name: &str| {
        if name.starts_with("adapter.") && name.ends_with(".a") {
            "A_s"
        } else if name.starts_with("adapter.") && name.ends_with(".b") {
            "B_s"
        } else if name.starts_with("proj.") {
            "U_1"
        } else if name.starts_with("head.") {
            "head"
        } else {
            "other"
        }
    };
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut all_pass = true;
    for r in &reports {
        let e = worst.entry(class_of(&r.name)).or_insert(0.0);
        *e = e.max(r.max_rel_error());
        all_pass &= r.passed();
    }
    let classes = ["A_s", "B_s", "U_1", "head"].iter().all(|c| worst.contains_key(c));
    let detail = format!(
        "{} tensors, worst rel err {:?}, {:.2}s",
        reports.len(),
        worst.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect::<Vec<_>>(),
        elapsed.as_secs_f64()
    );
    outcome(all_pass && classes && elapsed < Duration::from_secs(60), detail)
}

// ---------------------------------------------------------------------------
// 2. slicing commutes with adapter composition
// ---------------------------------------------------------------------------

fn naive_block(w: &Tensor, pairs: &[(Tensor, Tensor)], rows: usize, cols: usize) -> Vec<f64> {
    let n = w.shape()[1];
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut v = w.data()[i * n + j];
            for (a, b) in pairs {
                let r = a.shape()[1];
                v += (0..r).map(|k| a.data()[i * r + k] * b.data()[k * n + j]).sum::<f64>();
            }
            out.push(v);
        }
    }
    out
}

fn commutation() -> Outcome {
    let start = Instant::now();
    let widths = [8usize, 16, 24, 32];
    let mut r = rng::seeded(2024);
    let (mut exact, mut worst_oracle) = (0, 0.0f64);
    for trial in 0..50 {
        let d = widths[r.gen_range(1..widths.len())];
        let f = 2 * d;
        let rank = r.gen_range(1..=4);
        let mut stack = AdapterStack::new(1, d, f, rank, NUM_STAGES, trial).unwrap();
        for slot in stack.slots_mut() {
            for pair in &mut slot.pairs {
                pair.a = Tensor::uniform(pair.a.shape(), 1.0, &mut r);
                pair.b = Tensor::uniform(pair.b.shape(), 1.0, &mut r);
            }
        }
        let target = AdaptTarget::ALL[r.gen_range(0..AdaptTarget::ALL.len())];
        let (d_out, d_in) = target.dims(d, f);
        let w_pre = Tensor::uniform(&[d_out, d_in], 1.0, &mut r);
        let dc = widths[r.gen_range(0..widths.len())].min(d);
        let (rows, cols) = target.dims(dc, 2 * dc);
        let slot = stack.slot(0, target).unwrap();
        let stage = r.gen_range(0..NUM_STAGES);

        let lhs = lora::compose(&w_pre, slot, stage).unwrap().leading_block(rows, cols).unwrap();
        let rhs = lora::compose_sliced(&w_pre, Some(slot), 0..stage + 1, rows, cols).unwrap();
        if lhs.bit_eq(&rhs) {
            exact += 1;
        }
        let pairs: Vec<(Tensor, Tensor)> = slot.pairs[..=stage].iter().map(|p| (p.a.clone(), p.b.clone())).collect();
        let oracle = naive_block(&w_pre, &pairs, rows, cols);
        for (x, y) in rhs.data().iter().zip(&oracle) {
            worst_oracle = worst_oracle.max((x - y).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        exact == 50 && worst_oracle < 1e-12 && elapsed < Duration::from_secs(5),
        format!("{exact}/50 bit-exact, max dev from loop oracle {worst_oracle:.1e}, {:.3}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// 3. trainable count over three stages
// ---------------------------------------------------------------------------

fn six_rd() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (d, rank) in [(16usize, 2usize), (32, 8), (64, 4)] {
        let stack = AdapterStack::new(1, d, d, rank, NUM_STAGES, 5).unwrap();
        let slot = stack.slot(0, AdaptTarget::Query).unwrap();
        let count: usize = slot.pairs.iter().map(|p| p.a.numel() + p.b.numel()).sum();
        ok &= count == 6 * rank * d && slot.pairs.len() == 3;
        lines.push(format!("(d={d},r={rank})->{count}"));
    }
    let pair = lora::init_pair(16, 16, 2, 0, 1).unwrap();
    ok &= pair.sliced_len(16, 16) == 64 && pair.sliced_len(8, 8) == 32;
    outcome(ok, lines.join(" "))
}

// ---------------------------------------------------------------------------
// 4. supernet forward equals exported forward
// ---------------------------------------------------------------------------

fn forward_equivalence() -> Outcome {
    let space = ConfigSpace::new(
        vec![
            Width { hidden: 8, heads: 1, ffn: 16 },
            Width { hidden: 16, heads: 2, ffn: 32 },
            Width { hidden: 24, heads: 3, ffn: 48 },
            Width { hidden: 32, heads: 4, ffn: 64 },
        ],
        vec![1, 2, 3, 4],
    )
    .unwrap();
    let all = space.configs();
    let mut r = rng::seeded(77);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..10u64 {
        let task = if i % 2 == 0 { TaskKind::Classify { classes: 5 } } else { TaskKind::LanguageModel };
        let dims = ModelDims { vocab: 13, max_seq: 6, task };
        let mut net = Supernet::random(dims, space.maxnet(), 3, NUM_STAGES, 100 + i).unwrap();
        for slot in net.adapters.slots_mut() {
            for pair in &mut slot.pairs {
                pair.b = Tensor::uniform(pair.b.shape(), 0.2, &mut r);
            }
        }
        let c = all[r.gen_range(0..all.len())];
        let stage = NUM_STAGES - 1;
        let exported = model::export(&net, &space, &c, stage).unwrap();
        for _ in 0..10 {
            let (batch, seq) = (r.gen_range(1..4), r.gen_range(1..=6));
            let tokens = (0..batch * seq).map(|_| r.gen_range(0..13)).collect();
            let tb = TokenBatch::new(tokens, batch, seq).unwrap();
            let mut t1 = Tape::new();
            let a = model::forward(&mut t1, &net, &c, &tb, stage, TrainMode::Frozen).unwrap();
            let mut t2 = Tape::new();
            let b = model::forward(&mut t2, &exported, &c, &tb, 0, TrainMode::Frozen).unwrap();
            worst = worst.max(t1.value(a.logits).max_abs_diff(t2.value(b.logits)));
            checked += 1;
        }
    }
    outcome(worst <= 1e-12 && checked == 100, format!("{checked} batches, max |dlogit| {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 5. sampling order, maxnet loss, stage-1 depth, frozen tensors
// ---------------------------------------------------------------------------

fn stage_of_name(name: &str) -> Option<usize> {
    let tail = name.strip_prefix("adapter.")?;
    tail.split('.').find_map(|p| p.strip_prefix('s')?.parse().ok())
}

fn algorithm_semantics() -> Outcome {
    let cfg = tiny_config();
    let run = experiments::run_mlfs(&cfg).expect("tiny run");
    let (maxnet, space) = (cfg.space.maxnet(), &cfg.space);
    let steps = &run.report.steps;

    let first_is_maxnet = steps.iter().all(|s| s.configs[0] == maxnet);
    let stage0_only_maxnet = steps.iter().filter(|s| s.stage == 0).all(|s| s.configs == [maxnet]);
    let stage1_depth = steps.iter().filter(|s| s.stage == 1).all(|s| s.configs.iter().all(|c| c.layers == maxnet.layers));
    let stage2_mixes = steps.iter().filter(|s| s.stage == 2).any(|s| s.configs.iter().any(|c| c.layers != maxnet.layers));
    let maxnet_pure = steps.iter().all(|s| s.kd[0] == 0.0 && s.fd[0] == 0.0 && s.total[0] == s.task[0]);

    // direct check with a large alpha and a real teacher signal
    let idx: Vec<usize> = (0..run.data.train.len().min(8)).collect();
    let (tb, targets) = mlfs::data::Dataset::batch(&run.data.train, &idx).unwrap();
    let mut plan = cfg.plan.clone();
    plan.distill.alpha = 0.9;
    let mut tt = Tape::new();
    let tout = model::forward(&mut tt, &run.net, &maxnet, &tb, 2, TrainMode::Adapters).unwrap();
    let signal = TeacherSignal::capture(&tt, &tout);
    let mut tape = Tape::new();
    let (_, bundle) = trainer::subnet_loss(&mut tape, &run.net, &run.bank, space, &plan, &tb, &targets, 2, &maxnet, Some(&signal)).unwrap();
    let alpha_zero = bundle.total_value == bundle.task;

    let mut frozen_ok = true;
    let mut trained_moved = true;
    for (stage, (before, after)) in run.report.stage_checksums.iter().enumerate() {
        for (name, sum) in before {
            let frozen = name.starts_with("base.") || stage_of_name(name).is_some_and(|s| s < stage) || (stage == 0 && name.starts_with("proj."));
            if frozen && after.get(name) != Some(sum) {
                frozen_ok = false;
            }
        }
        let moved = before.iter().any(|(n, s)| stage_of_name(n) == Some(stage) && after.get(n) != Some(s));
        trained_moved &= moved;
    }
    let base_start = &run.report.stage_checksums[0].0;
    let base_end = &run.report.stage_checksums[NUM_STAGES - 1].1;
    let base_constant = base_start.iter().filter(|(n, _)| n.starts_with("base.")).all(|(n, s)| base_end.get(n) == Some(s));

    let pass = first_is_maxnet && stage0_only_maxnet && stage1_depth && stage2_mixes && maxnet_pure && alpha_zero && frozen_ok && base_constant && trained_moved;
    outcome(
        pass,
        format!(
            "{} steps; maxnet first {first_is_maxnet}, stage-0 maxnet only {stage0_only_maxnet}, stage-1 depth fixed {stage1_depth}, maxnet alpha=0 {}, frozen checksums constant {}",
            steps.len(),
            maxnet_pure && alpha_zero,
            frozen_ok && base_constant
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. gradient scaling helps the minnet
// ---------------------------------------------------------------------------

fn gamma_ablation(pairs: &mut Vec<GammaPair>) -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("classify.toml")).expect("classify config");
    let start = Instant::now();
    let mut wins = 0;
    let mut cells = Vec::new();
    for &seed in &SEEDS {
        let pair = experiments::gamma_pair(&cfg, seed).expect("gamma pair");
        let rows = experiments::gamma_rows(&cfg, &pair).expect("gamma rows");
        let (scaled, plain) = (rows[0].minnet_train_loss, rows[1].minnet_train_loss);
        if scaled <= plain {
            wins += 1;
        }
        cells.push(format!("{scaled:.3}/{plain:.3}"));
        pairs.push(pair);
    }
    let elapsed = start.elapsed();
    outcome(
        wins >= 4 && elapsed < Duration::from_secs(600),
        format!("gamma=2 <= unscaled in {wins}/5 seeds [{}], {:.0}s", cells.join(" "), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------------------
// 7. sliced initialization beats random initialization
// ---------------------------------------------------------------------------

fn init_ablation(pairs: &[GammaPair]) -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("classify.toml")).expect("classify config");
    let c = cfg.space.find(16, 3).expect("d16 L3 in space");
    let mut wins = 0;
    let mut cells = Vec::new();
    for pair in pairs {
        let mut run_cfg = cfg.clone();
        run_cfg.plan.seed = pair.seed;
        let plan = experiments::init_plan(&run_cfg, 100, rng::derive(pair.seed, 40));
        let curves = experiments::ablate_init(&pair.scaled, &cfg.space, &c, &plan).expect("init ablation");
        let (s0, r0) = (curves.sliced.val[0].1, curves.random.val[0].1);
        let (sa, ra) = (trainer::area_under(&curves.sliced.val), trainer::area_under(&curves.random.val));
        if s0 < r0 && sa < ra {
            wins += 1;
        }
        cells.push(format!("{s0:.2}<{r0:.2},{sa:.0}<{ra:.0}"));
    }
    outcome(wins >= 4 && pairs.len() == 5, format!("{wins}/5 seeds [{}]", cells.join(" ")))
}

// ---------------------------------------------------------------------------
// 8. distillation helps the single student
// ---------------------------------------------------------------------------

fn student_distillation() -> Outcome {
    let cfg = RunConfig::load(&configs_dir().join("char_lm.toml")).expect("char_lm config");
    let student = cfg.space.find(16, 2).expect("d16 L2 in space");
    let plan = StudentPlan {
        steps: 100,
        batch: cfg.plan.batch,
        optimizer: cfg.plan.optimizer.clone(),
        seed: 0,
        rank: cfg.rank,
        d_low: cfg.plan.d_low,
        eval_every: 10,
    };
    let mut wins = 0;
    let mut cells = Vec::new();
    for &seed in &SEEDS {
        let cmp = experiments::distill_comparison(&cfg, seed, &student, 300, &[0.9, 0.0], &plan).expect("distillation");
        let last = |i: usize| cmp.runs[i].1.curves.val.last().expect("val curve").1;
        let (kd, plain) = (last(0), last(1));
        if kd <= plain {
            wins += 1;
        }
        cells.push(format!("{kd:.3}/{plain:.3}"));
    }
    outcome(wins >= 4, format!("alpha=0.9 <= alpha=0 in {wins}/5 seeds [{}], t={}", cells.join(" "), cfg.plan.distill.temperature))
}

// ---------------------------------------------------------------------------
// 9. determinism and checkpoint integrity
// ---------------------------------------------------------------------------

fn metrics_bytes(cfg: &RunConfig) -> Vec<u8> {
    let run = experiments::run_mlfs(cfg).expect("tiny run");
    let mut bytes = metrics::to_csv(&metrics::step_rows(&run.report.steps)).unwrap();
    let evals: Vec<EvalRow> = run.report.evals.iter().map(EvalRow::from).collect();
    bytes.extend(metrics::to_csv(&evals).unwrap());
    bytes
}

fn read_all(dir: &Path) -> Vec<Vec<u8>> {
    [BASE_FILE, ADAPTER_FILE, TRAINABLE_FILE].iter().map(|f| std::fs::read(dir.join(f)).expect("checkpoint file")).collect()
}

fn determinism_and_io() -> Outcome {
    let cfg = tiny_config();
    let (a, b) = (metrics_bytes(&cfg), metrics_bytes(&cfg));
    let csv_same = a == b && !a.is_empty();

    let run = experiments::run_mlfs(&cfg).expect("tiny run");
    let tmp = tempfile::tempdir().unwrap();
    let (d1, d2) = (tmp.path().join("one"), tmp.path().join("two"));
    checkpoint::save_supernet(&d1, &run.net, &cfg.space, Some(&run.bank)).unwrap();
    let loaded = checkpoint::load_supernet(&d1).unwrap();
    checkpoint::save_supernet(&d2, &loaded.net, &loaded.space, loaded.bank.as_ref()).unwrap();
    let roundtrip = read_all(&d1) == read_all(&d2);

    let path = d1.join(ADAPTER_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    let rejected = matches!(checkpoint::load_supernet(&d1), Err(Error::Checksum { .. }));

    outcome(
        csv_same && roundtrip && rejected,
        format!("metrics csv identical {csv_same} ({} bytes), save/load/save identical {roundtrip}, corrupted crc rejected {rejected}", a.len()),
    )
}

// ---------------------------------------------------------------------------
// 10. loss examples
// ---------------------------------------------------------------------------

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

fn kd(zs: &[f64], zt: &[f64], t: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.leaf(row(zs), true);
    let l = distill::kd_loss(&mut tape, s, &row(zt), t).unwrap();
    tape.value(l).item()
}

fn fd(u: &[f64], fs: &[f64], ft: &[f64], beta: f64) -> f64 {
    let mut mats = BTreeMap::new();
    mats.insert(1, row(u));
    let bank = ProjectionBank::from_mats("proj", mats).unwrap();
    let mut tape = Tape::new();
    let us = tape.leaf(bank.get(1).unwrap().clone(), true);
    let ut = tape.constant(bank.get(1).unwrap().clone());
    let hs = tape.leaf(row(fs), true);
    let ht = tape.constant(row(ft));
    let l = distill::feature_loss(
        &mut tape,
        &[FeatureLink {
            student: hs,
            student_proj: us,
            teacher: ht,
            teacher_proj: ut,
            beta,
        }],
    )
    .unwrap();
    let via_bank = {
        let cfg = DistillConfig {
            betas: vec![beta],
            ..DistillConfig::default()
        };
        let mut t2 = Tape::new();
        let h = t2.leaf(row(fs), true);
        let v = distill::fd_loss(&mut t2, &[h], &[row(ft)], &bank, &[(1, 1)], &cfg, true).unwrap();
        t2.value(v).item()
    };
    assert_eq!(tape.value(l).item(), via_bank);
    via_bank
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let (pv, qv) = (tape.leaf(row(p), true), tape.leaf(row(q), true));
    let l = tape.kl_divergence(pv, qv).unwrap();
    tape.value(l).item()
}

fn ce(z: &[f64], target: usize) -> f64 {
    let mut tape = Tape::new();
    let zv = tape.leaf(row(z), true);
    let l = tape.cross_entropy(zv, Target::Indices(vec![target])).unwrap();
    tape.value(l).item()
}

fn loss_examples() -> Outcome {
    let ln = f64::ln;
    let cases: Vec<(&str, f64, f64)> = vec![
        ("kd equal logits", kd(&[0.4, -1.2, 2.0], &[0.4, -1.2, 2.0], 1.0), 0.0),
        ("kd t=1", kd(&[0.0, 0.0], &[0.0, ln(2.0)], 1.0), 0.5 * ln(0.5 / (1.0 / 3.0)) + 0.5 * ln(0.5 / (2.0 / 3.0))),
        ("kd t=3", kd(&[0.0, 0.0], &[0.0, 3.0 * ln(2.0)], 3.0), 0.5 * ln(1.5) + 0.5 * ln(0.75)),
        ("kd t=1e6", kd(&[3.0, -2.0, 0.5], &[-1.0, 4.0, 0.0], 1e6), 0.0),
        ("fd single layer", fd(&[1.0, 0.0], &[2.0, 9.0], &[5.0, 9.0], 0.1), 0.1 * 9.0),
        ("fd same features", fd(&[0.3, -0.7], &[2.0, 9.0], &[2.0, 9.0], 0.1), 0.0),
        ("fd beta 0", fd(&[1.0, 0.0], &[2.0, 9.0], &[5.0, -4.0], 0.0), 0.0),
        ("kl p=q", kl(&[0.3, 0.7], &[0.3, 0.7]), 0.0),
        ("kl one-hot", kl(&[1.0, 0.0], &[0.5, 0.5]), ln(2.0)),
        ("kl half", kl(&[0.5, 0.5], &[0.9, 0.1]), 0.5 * ln(0.5 / 0.9) + 0.5 * ln(0.5 / 0.1)),
        ("ce [0,0]", ce(&[0.0, 0.0], 0), ln(2.0)),
        ("ce confident", ce(&[30.0, -30.0], 0), (1.0 + (-60.0f64).exp()).ln()),
        ("ce uniform 4", ce(&[0.0; 4], 3), ln(4.0)),
        ("scale 64/64", trainer::gradient_scale(64, 64, 2.0).unwrap(), 1.0),
        ("scale 64/32 g2", trainer::gradient_scale(64, 32, 2.0).unwrap(), 4.0),
        ("scale 64/32 g1", trainer::gradient_scale(64, 32, 1.0).unwrap(), 2.0),
    ];
    let failed: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| !close(*got, *want, 1e-9))
        .map(|(n, got, want)| format!("{n}: {got} vs {want}"))
        .collect();
    let zero_rejected = trainer::gradient_scale(64, 0, 2.0).is_err();
    let pass = failed.is_empty() && zero_rejected;
    let detail = if pass {
        format!("{} examples within 1e-9", cases.len())
    } else {
        format!("failed: {}", failed.join("; "))
    };
    outcome(pass, detail)
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    // `cargo test` passes libtest flags such as --nocapture; `--list` must
    // report no tests so that test discovery does not run the suite.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut pairs = Vec::new();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Vec<GammaPair>) -> Outcome>)> = vec![
        ("gradient correctness", Box::new(|_| gradient_correctness())),
        ("slicing commutes with composition", Box::new(|_| commutation())),
        ("three-stage count is 6rd", Box::new(|_| six_rd())),
        ("exported forward matches supernet", Box::new(|_| forward_equivalence())),
        ("multistage sampling and freezing", Box::new(|_| algorithm_semantics())),
        ("gradient scaling helps minnet", Box::new(gamma_ablation)),
        ("sliced init beats random init", Box::new(|p: &mut Vec<GammaPair>| init_ablation(p))),
        ("distillation helps student", Box::new(|_| student_distillation())),
        ("determinism and checkpoint io", Box::new(|_| determinism_and_io())),
        ("loss examples", Box::new(|_| loss_examples())),
    ];
    let total = criteria.len();
    let mut passed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let o = guarded(|| check(&mut pairs));
        passed += o.pass as usize;
        println!(
            "{} AC{:<2} {:<36} {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            name,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed}/{total} criteria passed");
    if passed == total {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
