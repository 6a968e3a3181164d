//! Seeded synthetic tasks.
//!
//! `classify`: each token carries a hidden score vector and a sequence's
//! label is the class with the largest summed score. Sequences with a small
//! margin between the top two classes are rejected so the task is
//! separable, and classes are filled to equal quotas.
//!
//! `char_lm`: sequences from a sparse first-order Markov chain; the target
//! at each position is the next token.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Classify,
    CharLm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: TaskName,
    pub size: usize,
    pub seq_len: usize,
    pub vocab: usize,
    /// Ignored for `char_lm`.
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// One label for `classify`, `seq_len` next tokens for `char_lm`.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

const MARGIN: f64 = 0.25;
const SUCCESSORS: usize = 3;

pub fn gen_synthetic_task(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    if spec.size == 0 || spec.seq_len == 0 || spec.vocab < 2 {
        return Err(Error::Config("task needs size >= 1, seq_len >= 1 and vocab >= 2".into()));
    }
    let examples = match spec.name {
        TaskName::Classify => classify(spec, seed)?,
        TaskName::CharLm => char_lm(spec, seed),
    };
    let n_val = spec.size / 10;
    let split = examples.len() - n_val;
    let mut train = examples;
    let val = train.split_off(split);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

fn classify(spec: &TaskSpec, seed: u64) -> Result<Vec<Example>> {
    let k = spec.classes;
    if k < 2 {
        return Err(Error::Config("classify needs at least 2 classes".into()));
    }
    let mut table_rng = rng::seeded(rng::derive(seed, 0));
    let scores: Vec<f64> = (0..spec.vocab * k).map(|_| table_rng.gen_range(-1.0..1.0)).collect();
    let mut r = rng::seeded(rng::derive(seed, 1));
    let quota = spec.size.div_ceil(k);
    let mut counts = vec![0usize; k];
    let mut out = Vec::with_capacity(spec.size);
    let mut attempts = 0usize;
    while out.len() < spec.size {
        attempts += 1;
        if attempts > spec.size * 1000 {
            return Err(Error::Config("classify generator could not fill class quotas".into()));
        }
        let tokens: Vec<usize> = (0..spec.seq_len).map(|_| r.gen_range(0..spec.vocab)).collect();
        let mut total = vec![0.0; k];
        for &t in &tokens {
            for (c, s) in total.iter_mut().enumerate() {
                *s += scores[t * k + c];
            }
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|a, b| total[*b].total_cmp(&total[*a]));
        let label = order[0];
        if total[label] - total[order[1]] < MARGIN || counts[label] >= quota {
            continue;
        }
        counts[label] += 1;
        out.push(Example {
            tokens,
            targets: vec![label],
        });
    }
    Ok(out)
}

fn char_lm(spec: &TaskSpec, seed: u64) -> Vec<Example> {
    let v = spec.vocab;
    let mut g = rng::seeded(rng::derive(seed, 0));
    // successor lists with cumulative weights
    let grammar: Vec<Vec<(usize, f64)>> = (0..v)
        .map(|_| {
            let mut next: Vec<usize> = (0..v).collect();
            next.shuffle(&mut g);
            next.truncate(SUCCESSORS.min(v));
            let w: Vec<f64> = next.iter().map(|_| g.gen_range(0.2..1.0)).collect();
            let sum: f64 = w.iter().sum();
            let mut acc = 0.0;
            next.into_iter()
                .zip(w)
                .map(|(t, w)| {
                    acc += w / sum;
                    (t, acc)
                })
                .collect()
        })
        .collect();
    let mut r = rng::seeded(rng::derive(seed, 1));
    (0..spec.size)
        .map(|_| {
            let mut seq = Vec::with_capacity(spec.seq_len + 1);
            seq.push(r.gen_range(0..v));
            while seq.len() <= spec.seq_len {
                let u: f64 = r.gen();
                let succ = &grammar[*seq.last().unwrap()];
                let next = succ.iter().find(|(_, c)| u < *c).unwrap_or(succ.last().unwrap()).0;
                seq.push(next);
            }
            Example {
                tokens: seq[..spec.seq_len].to_vec(),
                targets: seq[1..].to_vec(),
            }
        })
        .collect()
}

impl Dataset {
    /// Token batch and flattened targets for the examples at `idx`.
    pub fn batch(examples: &[Example], idx: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        let seq = examples.first().map_or(0, |e| e.tokens.len());
        let mut tokens = Vec::with_capacity(idx.len() * seq);
        let mut targets = Vec::new();
        for &i in idx {
            let e = examples.get(i).ok_or(Error::Index {
                what: "example",
                index: i,
                bound: examples.len(),
            })?;
            tokens.extend_from_slice(&e.tokens);
            targets.extend_from_slice(&e.targets);
        }
        Ok((TokenBatch::new(tokens, idx.len(), seq)?, targets))
    }

    /// Canonical byte encoding, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in self.train.iter().chain(&self.val) {
            for &t in e.tokens.iter().chain(&e.targets) {
                out.extend_from_slice(&(t as u32).to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: TaskName) -> TaskSpec {
        TaskSpec {
            name,
            size: 1200,
            seq_len: 8,
            vocab: 16,
            classes: 4,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        for name in [TaskName::Classify, TaskName::CharLm] {
            let a = gen_synthetic_task(&spec(name), 3).unwrap();
            let b = gen_synthetic_task(&spec(name), 3).unwrap();
            let c = gen_synthetic_task(&spec(name), 4).unwrap();
            assert_eq!(a.to_bytes(), b.to_bytes());
            assert_ne!(a.to_bytes(), c.to_bytes());
        }
    }

    #[test]
    fn split_is_ninety_ten() {
        let d = gen_synthetic_task(&spec(TaskName::CharLm), 0).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (1080, 120));
        assert!(d.train.iter().all(|e| e.tokens[1..] == e.targets[..7]));
    }

    #[test]
    fn classify_labels_are_balanced() {
        let d = gen_synthetic_task(&spec(TaskName::Classify), 9).unwrap();
        let mut counts = [0usize; 4];
        for e in d.train.iter().chain(&d.val) {
            counts[e.targets[0]] += 1;
        }
        for c in counts {
            let share = c as f64 / 1200.0;
            assert!((share - 0.25).abs() <= 0.05, "{counts:?}");
        }
    }
}
