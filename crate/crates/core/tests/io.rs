use mlfs::checkpoint::{self, ADAPTER_FILE};
use mlfs::data::{gen_synthetic_task, TaskName, TaskSpec};
use mlfs::lora::AdaptTarget;
use mlfs::model::{ArchConfig, ConfigSpace, ModelDims, Supernet, TaskKind, Width};
use mlfs::trainer::{self, AdamConfig, FullPlan};
use mlfs::Error;

fn classify(size: usize) -> TaskSpec {
    TaskSpec {
        name: TaskName::Classify,
        size,
        seq_len: 8,
        vocab: 16,
        classes: 4,
    }
}

// header: magic, version, count; trailer: crc
const FILE_OVERHEAD: usize = 4 + 2 + 4 + 4;

fn record_overhead(name: &str, rank: usize) -> usize {
    2 + name.len() + 1 + 4 * rank + 1
}

#[test]
fn adapter_file_size_matches_the_layout() {
    let (d, f, layers, rank, stages) = (16, 32, 3, 4, 3);
    let dims = ModelDims {
        vocab: 10,
        max_seq: 6,
        task: TaskKind::LanguageModel,
    };
    let net = Supernet::random(dims, ArchConfig::new(d, 2, f, layers), rank, stages, 5).unwrap();
    let space = ConfigSpace::new(vec![Width { hidden: d, heads: 2, ffn: f }], vec![layers]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_supernet(dir.path(), &net, &space, None).unwrap();

    let mut expected = FILE_OVERHEAD;
    for l in 0..layers {
        for t in AdaptTarget::ALL {
            let (o, i) = t.dims(d, f);
            for s in 0..stages {
                for (side, n) in [("a", i * rank), ("b", rank * o)] {
                    expected += record_overhead(&format!("adapter.{l}.{t}.s{s}.{side}"), 2) + 4 * n;
                }
            }
        }
    }
    let size = std::fs::metadata(dir.path().join(ADAPTER_FILE)).unwrap().len() as usize;
    assert_eq!(size, expected);
}

#[test]
fn truncated_and_foreign_files_are_errors() {
    let dims = ModelDims {
        vocab: 6,
        max_seq: 3,
        task: TaskKind::Classify { classes: 2 },
    };
    let net = Supernet::random(dims, ArchConfig::new(8, 1, 16, 2), 2, 3, 1).unwrap();
    let space = ConfigSpace::new(vec![Width { hidden: 8, heads: 1, ffn: 16 }], vec![1, 2]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save_supernet(dir.path(), &net, &space, None).unwrap();
    let path = dir.path().join(ADAPTER_FILE);
    let bytes = std::fs::read(&path).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut foreign = bytes.clone();
    foreign[..4].copy_from_slice(b"NOPE");
    assert!(checkpoint::decode(&foreign).is_err());
    assert!(matches!(checkpoint::load(&dir.path().join("missing.ckpt")), Err(Error::Io(_))));
}

#[test]
fn generators_are_seeded_and_balanced() {
    let spec = classify(2000);
    let a = gen_synthetic_task(&spec, 9).unwrap();
    assert_eq!(a.to_bytes(), gen_synthetic_task(&spec, 9).unwrap().to_bytes());
    assert_ne!(a.to_bytes(), gen_synthetic_task(&spec, 10).unwrap().to_bytes());
    let mut counts = [0usize; 4];
    for e in a.train.iter().chain(&a.val) {
        counts[e.targets[0]] += 1;
    }
    let share = 2000.0 / 4.0;
    for c in counts {
        assert!((c as f64 - share).abs() <= 0.05 * share, "{counts:?}");
    }
    let lm = TaskSpec {
        name: TaskName::CharLm,
        ..classify(300)
    };
    let ds = gen_synthetic_task(&lm, 9).unwrap();
    for e in &ds.train {
        assert_eq!(e.targets.len(), 8);
        assert_eq!(e.tokens[1..], e.targets[..7]);
    }
}

#[test]
fn classify_task_is_learnable() {
    let ds = gen_synthetic_task(&classify(600), 4).unwrap();
    let dims = ModelDims {
        vocab: 16,
        max_seq: 8,
        task: TaskKind::Classify { classes: 4 },
    };
    let c = ArchConfig::new(16, 2, 32, 2);
    let mut net = Supernet::random(dims, c, 1, 1, 2).unwrap();
    let plan = FullPlan {
        steps: 400,
        batch: 32,
        optimizer: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        seed: 0,
        eval_every: 400,
    };
    trainer::train_full(&mut net, &ds.train, &ds.val, &plan).unwrap();
    let acc = trainer::evaluate(&net, &c, 0, &ds.train, 64).unwrap().accuracy;
    assert!(acc >= 0.95, "train accuracy {acc}");
}
