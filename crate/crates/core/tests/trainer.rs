use std::collections::BTreeMap;

use mlfs::autograd::Tape;
use mlfs::distill::ProjectionBank;
use mlfs::experiments::GradFixture;
use mlfs::model::{ArchConfig, TrainMode};
use mlfs::trainer::{self, AdamConfig, AdamW, SubnetGrad};
use mlfs::Tensor;

fn fixture() -> GradFixture {
    GradFixture::new(3).unwrap()
}

fn grads(fx: &GradFixture, configs: &[ArchConfig], scaling: bool) -> Vec<SubnetGrad> {
    let mut plan = fx.plan.clone();
    plan.grad_scaling = scaling;
    trainer::subnet_gradients(&fx.net, &fx.bank, &fx.space, &plan, &fx.batch, &fx.targets, fx.stage, configs).unwrap()
}

#[test]
fn update_is_the_scaled_average_of_subnet_gradients() {
    let fx = fixture();
    let parts = grads(&fx, &fx.configs, true);
    let update = trainer::assemble(&parts).unwrap();
    let k = parts.len() as f64;
    let mut oracle: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in &parts {
        for (name, g) in &p.grads {
            let acc = oracle.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += p.scale / k * v;
            }
        }
    }
    assert_eq!(update.keys().collect::<Vec<_>>(), oracle.keys().collect::<Vec<_>>());
    for (name, g) in &update {
        let worst = g.data().iter().zip(&oracle[name]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-15, "{name}: {worst}");
    }
    // the minnet-like config has fewer trainable weights, so it is upweighted
    assert_eq!(parts[0].scale, 1.0);
    assert!(parts[1].scale > 1.0);
}

#[test]
fn disabled_scaling_is_the_plain_average() {
    let fx = fixture();
    let parts = grads(&fx, &fx.configs, false);
    assert!(parts.iter().all(|p| p.scale == 1.0));
    let update = trainer::assemble(&parts).unwrap();
    let name = "adapter.1.q.s2.a";
    let expected: Vec<f64> = parts[0].grads[name].data().iter().zip(parts[1].grads[name].data()).map(|(a, b)| a / 2.0 + b / 2.0).collect();
    assert_eq!(update[name].data(), &expected[..]);
}

#[test]
fn scaled_gradient_matches_the_scaled_loss_derivative() {
    let mut fx = fixture();
    let teacher = fx.teacher().unwrap();
    let params = fx.params();
    let mut tape = Tape::new();
    let loss = fx.scaled_loss(&mut tape, &params, &teacher).unwrap();
    tape.backward(loss).unwrap();
    let from_loss = tape.named_grads();
    let from_parts = trainer::assemble(&grads(&fx, &fx.configs, true)).unwrap();
    for (name, g) in &from_parts {
        assert!(g.max_abs_diff(&from_loss[name]) < 1e-12, "{name}");
    }
}

#[test]
fn sliced_away_weights_get_no_gradient() {
    let fx = fixture();
    let small = ArchConfig::new(8, 1, 16, 1);
    let parts = grads(&fx, &[fx.space.maxnet(), small], true);
    let g = &parts[1].grads;
    // depth 1 of 2 keeps only the top layer
    assert!(g.keys().all(|n| !n.starts_with("adapter.0.")));
    let a = &g["adapter.1.q.s2.a"];
    for (row, vals) in a.data().chunks(a.shape()[1]).enumerate() {
        assert_eq!(row >= 8, vals.iter().all(|v| *v == 0.0), "row {row}");
    }
    // the teacher side projects through the whole matrix, so columns past the slice still learn
    let bank = &g["proj.2"];
    assert!(bank.data().chunks(16).any(|row| row[8..].iter().any(|v| *v != 0.0)));
}

#[test]
fn earlier_stages_and_base_are_never_trained() {
    let fx = fixture();
    let parts = grads(&fx, &fx.configs, true);
    for p in &parts {
        for name in p.grads.keys() {
            assert!(!name.starts_with("base."), "{name}");
            assert!(!name.contains(".s0.") && !name.contains(".s1."), "{name}");
        }
    }
}

#[test]
fn steps_are_bit_reproducible() {
    let run = || {
        let mut fx = fixture();
        let mut opt = AdamW::new(AdamConfig::default());
        let mut bank: ProjectionBank = fx.bank.clone();
        for _ in 0..3 {
            trainer::mlfs_step(&mut fx.net, &mut bank, &fx.space, &fx.plan, &mut opt, &fx.batch, &fx.targets, fx.stage, &fx.configs, 1e-2).unwrap();
        }
        let mut net = fx.net.clone();
        net.trainable_mut(TrainMode::Adapters, fx.stage).into_iter().map(|(n, t)| (n, t.clone())).collect::<BTreeMap<String, Tensor>>()
    };
    let (a, b) = (run(), run());
    for (name, t) in &a {
        assert!(t.bit_eq(&b[name]), "{name}");
    }
}

#[test]
fn maxnet_must_come_first() {
    let fx = fixture();
    let mut configs = fx.configs.clone();
    configs.reverse();
    let err = trainer::subnet_gradients(&fx.net, &fx.bank, &fx.space, &fx.plan, &fx.batch, &fx.targets, fx.stage, &configs);
    assert!(matches!(err, Err(mlfs::Error::Contract(_))));
}
