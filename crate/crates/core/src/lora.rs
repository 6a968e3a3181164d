//! Stage-indexed low-rank adapter pairs shared by every subnet.
//!
//! The effective weight of an adapted matrix at stage `s` is
//! `w_pre + sum_{l <= s} A_l B_l`. Slicing a subnet takes the leading rows of
//! each `A_l` and the leading columns of each `B_l`, which equals slicing the
//! materialized sum because every output element keeps the same inner sum.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Weight matrices that carry adapters: attention Q, K, V and the FFN input
/// projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AdaptTarget {
    Query,
    Key,
    Value,
    FfnIn,
}

impl AdaptTarget {
    pub const ALL: [AdaptTarget; 4] = [AdaptTarget::Query, AdaptTarget::Key, AdaptTarget::Value, AdaptTarget::FfnIn];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptTarget::Query => "q",
            AdaptTarget::Key => "k",
            AdaptTarget::Value => "v",
            AdaptTarget::FfnIn => "ffn_in",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AdaptTarget::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// `(d_out, d_in)` of the adapted matrix for hidden width `hidden` and
    /// FFN width `ffn`.
    pub fn dims(self, hidden: usize, ffn: usize) -> (usize, usize) {
        match self {
            AdaptTarget::FfnIn => (ffn, hidden),
            _ => (hidden, hidden),
        }
    }
}

impl fmt::Display for AdaptTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `d_out x r`
    pub a: Tensor,
    /// `r x d_in`
    pub b: Tensor,
    pub stage: usize,
}

/// Uniform `A` in `+-1/sqrt(d_in)` and zero `B`, so the initial delta is exactly zero.
pub fn init_pair(d_out: usize, d_in: usize, rank: usize, stage: usize, seed: u64) -> Result<LoraPair> {
    if rank == 0 {
        return Err(Error::Rank { rank, max: d_out.min(d_in) });
    }
    if rank > d_out.min(d_in) {
        return Err(Error::Rank {
            rank,
            max: d_out.min(d_in),
        });
    }
    let mut r = rng::seeded(seed);
    let bound = 1.0 / (d_in as f64).sqrt();
    Ok(LoraPair {
        a: Tensor::uniform(&[d_out, rank], bound, &mut r),
        b: Tensor::zeros(&[rank, d_in]),
        stage,
    })
}

impl LoraPair {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn delta(&self) -> Tensor {
        self.a.matmul(&self.b).expect("pair shapes conform")
    }

    /// `A[..rows, :] * B[:, ..cols]`, without forming the full product.
    pub fn slice_delta(&self, rows: usize, cols: usize) -> Result<Tensor> {
        self.a.narrow(0, rows)?.matmul(&self.b.narrow(1, cols)?)
    }

    /// Trainable elements that survive slicing to `rows x cols`.
    pub fn sliced_len(&self, rows: usize, cols: usize) -> usize {
        rows * self.rank() + self.rank() * cols
    }
}

/// All stage pairs attached to one adapted matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSlot {
    pub layer: usize,
    pub target: AdaptTarget,
    pub pairs: Vec<LoraPair>,
}

impl AdapterSlot {
    pub fn pair(&self, stage: usize) -> Option<&LoraPair> {
        self.pairs.get(stage)
    }
}

pub fn param_name(layer: usize, target: AdaptTarget, stage: usize, side: char) -> String {
    format!("adapter.{layer}.{target}.s{stage}.{side}")
}

/// Adapter pairs for every adapted matrix of a model, one pair per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    rank: usize,
    num_stages: usize,
    slots: Vec<AdapterSlot>,
    frozen: Vec<bool>,
}

impl AdapterStack {
    /// Creates pairs for `layers` layers of a model with hidden width `hidden`
    /// and FFN width `ffn`.
    pub fn new(layers: usize, hidden: usize, ffn: usize, rank: usize, num_stages: usize, seed: u64) -> Result<Self> {
        let mut slots = Vec::with_capacity(layers * AdaptTarget::ALL.len());
        for layer in 0..layers {
            for (t_idx, target) in AdaptTarget::ALL.into_iter().enumerate() {
                let (d_out, d_in) = target.dims(hidden, ffn);
                let pairs = (0..num_stages)
                    .map(|s| {
                        let stream = ((layer * 4 + t_idx) * 8 + s) as u64;
                        init_pair(d_out, d_in, rank, s, rng::derive(seed, stream))
                    })
                    .collect::<Result<Vec<_>>>()?;
                slots.push(AdapterSlot { layer, target, pairs });
            }
        }
        let mut stack = AdapterStack {
            rank,
            num_stages,
            slots,
            frozen: vec![false; num_stages],
        };
        if num_stages > 0 {
            stack.begin_stage(0);
        }
        Ok(stack)
    }

    /// A stack with no pairs, used by standalone exported models.
    pub fn empty() -> Self {
        AdapterStack {
            rank: 0,
            num_stages: 0,
            slots: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn slots(&self) -> &[AdapterSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [AdapterSlot] {
        &mut self.slots
    }

    pub fn slot(&self, layer: usize, target: AdaptTarget) -> Option<&AdapterSlot> {
        self.slots.get(layer * AdaptTarget::ALL.len() + target as usize).filter(|s| s.layer == layer && s.target == target)
    }

    /// Marks every stage other than `stage` as frozen.
    pub fn begin_stage(&mut self, stage: usize) {
        for (s, f) in self.frozen.iter_mut().enumerate() {
            *f = s != stage;
        }
    }

    pub fn is_frozen(&self, stage: usize) -> bool {
        self.frozen.get(stage).copied().unwrap_or(true)
    }

    /// Trainable tensors of `stage`, by checkpoint name.
    pub fn stage_params_mut(&mut self, stage: usize) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for slot in &mut self.slots {
            if let Some(p) = slot.pairs.get_mut(stage) {
                out.push((param_name(slot.layer, slot.target, stage, 'a'), &mut p.a));
                out.push((param_name(slot.layer, slot.target, stage, 'b'), &mut p.b));
            }
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for slot in &self.slots {
            for (s, p) in slot.pairs.iter().enumerate() {
                out.push((param_name(slot.layer, slot.target, s, 'a'), &p.a));
                out.push((param_name(slot.layer, slot.target, s, 'b'), &p.b));
            }
        }
        out
    }

    /// Rebuilds a stack from checkpoint tensors named by [`param_name`].
    pub fn from_named<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Self> {
        let mut entries: Vec<(usize, AdaptTarget, usize, char, Tensor)> = Vec::new();
        for (name, t) in tensors {
            let parts: Vec<&str> = name.split('.').collect();
            let parsed = match parts[..] {
                ["adapter", layer, target, stage, side] => (|| {
                    let layer = layer.parse().ok()?;
                    let target = AdaptTarget::parse(target)?;
                    let stage = stage.strip_prefix('s')?.parse().ok()?;
                    let side = match side {
                        "a" => 'a',
                        "b" => 'b',
                        _ => return None,
                    };
                    Some((layer, target, stage, side))
                })(),
                _ => None,
            };
            let (layer, target, stage, side) =
                parsed.ok_or_else(|| Error::Format(format!("unrecognised adapter tensor name `{name}`")))?;
            entries.push((layer, target, stage, side, t.clone()));
        }
        if entries.is_empty() {
            return Ok(AdapterStack::empty());
        }
        let layers = entries.iter().map(|e| e.0).max().unwrap() + 1;
        let num_stages = entries.iter().map(|e| e.2).max().unwrap() + 1;
        let mut slots = Vec::new();
        let mut rank = 0;
        for layer in 0..layers {
            for target in AdaptTarget::ALL {
                let mut pairs = Vec::new();
                for stage in 0..num_stages {
                    let find = |side| {
                        entries
                            .iter()
                            .find(|e| e.0 == layer && e.1 == target && e.2 == stage && e.3 == side)
                            .map(|e| e.4.clone())
                            .ok_or_else(|| Error::Format(format!("missing {}", param_name(layer, target, stage, side))))
                    };
                    let (a, b) = (find('a')?, find('b')?);
                    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                        return Err(Error::shape("adapter pair", a.shape(), b.shape()));
                    }
                    rank = a.shape()[1];
                    pairs.push(LoraPair { a, b, stage });
                }
                slots.push(AdapterSlot { layer, target, pairs });
            }
        }
        if entries.len() != layers * AdaptTarget::ALL.len() * num_stages * 2 {
            return Err(Error::Format("adapter tensors do not form a complete stack".into()));
        }
        let mut stack = AdapterStack {
            rank,
            num_stages,
            slots,
            frozen: vec![false; num_stages],
        };
        stack.begin_stage(num_stages - 1);
        Ok(stack)
    }
}

/// `w_pre + sum_{l <= stage} A_l B_l`.
pub fn compose(w_pre: &Tensor, slot: &AdapterSlot, stage: usize) -> Result<Tensor> {
    let mut w = w_pre.clone();
    for pair in slot.pairs.iter().take(stage + 1) {
        let delta = pair.delta();
        if delta.shape() != w.shape() {
            return Err(Error::shape("compose", w.shape(), delta.shape()));
        }
        w.add_scaled_assign(&delta, 1.0)?;
    }
    Ok(w)
}

/// The leading `rows x cols` block of `w_pre + sum_{l <= stage} A_l B_l`, built
/// from sliced factors.
pub fn compose_sliced(w_pre: &Tensor, slot: Option<&AdapterSlot>, stages: std::ops::Range<usize>, rows: usize, cols: usize) -> Result<Tensor> {
    let mut w = w_pre.leading_block(rows, cols)?;
    if let Some(slot) = slot {
        for pair in slot.pairs.iter().skip(stages.start).take(stages.len()) {
            w.add_scaled_assign(&pair.slice_delta(rows, cols)?, 1.0)?;
        }
    }
    Ok(w)
}

/// Standalone copy of one matrix for a subnet: the sliced frozen weight plus
/// the slice of the materialized adapter sum.
pub fn merge_export(w_pre: &Tensor, slot: Option<&AdapterSlot>, rows: usize, cols: usize, stage: usize) -> Result<Tensor> {
    let mut w = w_pre.leading_block(rows, cols)?;
    if let Some(slot) = slot {
        let mut sum = Tensor::zeros(w_pre.shape());
        for pair in slot.pairs.iter().take(stage + 1) {
            sum.add_scaled_assign(&pair.delta(), 1.0)?;
        }
        w.add_scaled_assign(&sum.leading_block(rows, cols)?, 1.0)?;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_pair(d_out: usize, d_in: usize, r: usize, seed: u64) -> LoraPair {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LoraPair {
            a: Tensor::uniform(&[d_out, r], 1.0, &mut rng),
            b: Tensor::uniform(&[r, d_in], 1.0, &mut rng),
            stage: 0,
        }
    }

    #[test]
    fn init_pair_has_zero_delta_and_shapes() {
        let p = init_pair(8, 8, 2, 0, 3).unwrap();
        assert_eq!(p.a.shape(), &[8, 2]);
        assert_eq!(p.b.shape(), &[2, 8]);
        assert!(p.delta().data().iter().all(|&v| v == 0.0));
        assert!(p.a.data().iter().any(|&v| v != 0.0));
        assert!(p.a.data().iter().all(|&v| v.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn init_pair_is_deterministic() {
        let a = init_pair(6, 4, 3, 1, 42).unwrap();
        let b = init_pair(6, 4, 3, 1, 42).unwrap();
        assert!(a.a.bit_eq(&b.a) && a.b.bit_eq(&b.b));
    }

    #[test]
    fn init_pair_rejects_rank() {
        assert!(matches!(init_pair(4, 3, 4, 0, 0), Err(Error::Rank { rank: 4, max: 3 })));
        assert!(matches!(init_pair(4, 3, 0, 0, 0), Err(Error::Rank { .. })));
    }

    fn slot_of(pairs: Vec<LoraPair>) -> AdapterSlot {
        AdapterSlot {
            layer: 0,
            target: AdaptTarget::Query,
            pairs,
        }
    }

    #[test]
    fn compose_outer_product_case() {
        let zero = LoraPair {
            a: Tensor::zeros(&[4, 1]),
            b: Tensor::zeros(&[1, 4]),
            stage: 0,
        };
        let one = LoraPair {
            a: Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            b: Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
            stage: 1,
        };
        let w = compose(&Tensor::zeros(&[4, 4]), &slot_of(vec![zero, one]), 1).unwrap();
        let mut expect = Tensor::zeros(&[4, 4]);
        expect.data_mut()[1] = 1.0;
        assert_eq!(w, expect);
    }

    #[test]
    fn compose_at_init_is_identity() {
        let w_pre = Tensor::uniform(&[5, 5], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let pairs = (0..3).map(|s| init_pair(5, 5, 2, s, s as u64).unwrap()).collect();
        let w = compose(&w_pre, &slot_of(pairs), 2).unwrap();
        assert!(w.bit_eq(&w_pre) || w == w_pre);
    }

    #[test]
    fn compose_stage_zero_adds_first_pair_only() {
        let w_pre = Tensor::zeros(&[3, 3]);
        let p0 = random_pair(3, 3, 1, 1);
        let p1 = random_pair(3, 3, 1, 2);
        let w = compose(&w_pre, &slot_of(vec![p0.clone(), p1]), 0).unwrap();
        assert_eq!(w, p0.delta());
    }

    #[test]
    fn slice_delta_matches_materialized_slice() {
        let p = random_pair(16, 16, 4, 9);
        let fast = p.slice_delta(8, 8).unwrap();
        let slow = p.delta().leading_block(8, 8).unwrap();
        assert!(fast.bit_eq(&slow));
        assert_eq!(p.slice_delta(16, 16).unwrap(), p.delta());
        let z = init_pair(16, 16, 4, 0, 0).unwrap().slice_delta(8, 8).unwrap();
        assert_eq!(z, Tensor::zeros(&[8, 8]));
    }

    #[test]
    fn compose_is_linear_in_a() {
        let p = random_pair(4, 4, 2, 5);
        let mut scaled = p.clone();
        scaled.a = scaled.a.scale(3.0);
        let base = Tensor::zeros(&[4, 4]);
        let d1 = compose(&base, &slot_of(vec![p]), 0).unwrap();
        let d3 = compose(&base, &slot_of(vec![scaled]), 0).unwrap();
        assert!(d3.max_abs_diff(&d1.scale(3.0)) < 1e-12);
    }

    #[test]
    fn sliced_counts() {
        let p = init_pair(16, 16, 2, 0, 0).unwrap();
        assert_eq!(p.sliced_len(16, 16), 64);
        assert_eq!(p.sliced_len(8, 8), 32);
    }

    #[test]
    fn stack_roundtrips_through_names() {
        let stack = AdapterStack::new(2, 8, 16, 2, 3, 7).unwrap();
        let named = stack.named_tensors();
        let rebuilt = AdapterStack::from_named(named.iter().map(|(n, t)| (n.as_str(), *t))).unwrap();
        assert_eq!(rebuilt.slots(), stack.slots());
        assert_eq!(rebuilt.rank(), 2);
    }

    #[test]
    fn begin_stage_freezes_others() {
        let mut stack = AdapterStack::new(1, 4, 8, 1, 3, 0).unwrap();
        stack.begin_stage(1);
        assert!(stack.is_frozen(0) && !stack.is_frozen(1) && stack.is_frozen(2));
    }
}
