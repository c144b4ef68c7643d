//! Soft-fault injection: single bit flips in the preconditioned correction
//! vector, the output most likely to carry a silent data corruption into the
//! Krylov update.
//!
//! Injection is decided per eligible preconditioner application with fixed
//! probability. When a run injects, one rank of the partition is struck and
//! a number of its local entries proportional to the configured loss
//! fraction are corrupted, one random bit flip each. The initial p^0 setup
//! call is not eligible; only the inner-loop calls are.

use crate::gcr::PrecondHook;
use crate::grid::Partition;
use crate::operators::Field;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BitPolicy {
    /// Any of the 64 bits, uniform.
    #[default]
    UniformAnyBit,
    /// Fraction bits 0..=51.
    Mantissa,
    /// Exponent bits 52..=62.
    Exponent,
    /// Bit 63.
    Sign,
}

impl BitPolicy {
    pub fn sample_bit(self, rng: &mut impl Rng) -> u32 {
        match self {
            BitPolicy::UniformAnyBit => rng.gen_range(0..64),
            BitPolicy::Mantissa => rng.gen_range(0..52),
            BitPolicy::Exponent => rng.gen_range(52..63),
            BitPolicy::Sign => 63,
        }
    }
}

fn default_prob() -> f64 {
    0.02
}
fn default_max_events() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultConfig {
    /// Probability that any given eligible preconditioner call injects.
    #[serde(default = "default_prob")]
    pub injection_prob: f64,
    /// Hard cap on injections per run.
    #[serde(default = "default_max_events")]
    pub max_events: usize,
    /// Fraction of the *global* state lost; converted to a local entry count.
    pub loss_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub bit_policy: BitPolicy,
}

/// Flips bit `b` (0 = LSB of the fraction, 63 = sign) of an f64.
pub fn flip_bit(x: f64, b: u32) -> f64 {
    f64::from_bits(x.to_bits() ^ (1u64 << b))
}

/// Entries to corrupt on the struck rank: at least one, proportional to the
/// global loss, clamped to what the rank actually holds.
pub fn corrupt_count(loss_fraction: f64, nglobal: usize, local_len: usize) -> usize {
    let want = (loss_fraction * nglobal as f64).round() as usize;
    want.max(1).min(local_len)
}

/// One injection: which call it hit, where, and whether the detector caught it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultEvent {
    pub n: usize,
    pub nu: usize,
    pub rank: usize,
    pub indices: Vec<usize>,
    pub bits: Vec<u32>,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// None while the outcome is still pending, then Some(detected).
    pub detected: Option<bool>,
}

/// Corrupts a field in place per the config; returns the event, or None when
/// the Bernoulli draw passes the call through clean.
pub fn maybe_inject(
    field: &mut Field,
    part: &Partition,
    cfg: &FaultConfig,
    rng: &mut ChaCha8Rng,
    n: usize,
    nu: usize,
) -> Option<FaultEvent> {
    if !rng.gen_bool(cfg.injection_prob.clamp(0.0, 1.0)) {
        return None;
    }
    let rank = rng.gen_range(0..part.nranks);
    let range = part.ranges[rank].clone();
    let local_len = range.len();
    let count = corrupt_count(cfg.loss_fraction, part.nglobal, local_len);
    let picks = sample(rng, local_len, count);
    let mut indices: Vec<usize> = picks.iter().map(|i| range.start + i).collect();
    indices.sort_unstable();
    let mut bits = Vec::with_capacity(count);
    let mut before = Vec::with_capacity(count);
    let mut after = Vec::with_capacity(count);
    for &i in &indices {
        let b = cfg.bit_policy.sample_bit(rng);
        let old = field.values[i];
        let new = flip_bit(old, b);
        field.values[i] = new;
        bits.push(b);
        before.push(old);
        after.push(new);
    }
    Some(FaultEvent {
        n,
        nu,
        rank,
        indices,
        bits,
        before,
        after,
        detected: None,
    })
}

/// PrecondHook that injects faults into inner-loop corrections and attributes
/// detection outcomes from the supervisor's restore/checkpoint callbacks: a
/// restore marks every pending event detected, a commit marks them missed.
pub struct FaultInjector {
    cfg: FaultConfig,
    part: Partition,
    rng: ChaCha8Rng,
    pub events: Vec<FaultEvent>,
    /// Index into `events` of the first event with an undecided outcome.
    pending_from: usize,
}

impl FaultInjector {
    pub fn new(cfg: FaultConfig, part: Partition) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        FaultInjector {
            cfg,
            part,
            rng,
            events: Vec::new(),
            pending_from: 0,
        }
    }

    pub fn faults_injected(&self) -> usize {
        self.events.len()
    }

    pub fn faults_detected(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.detected == Some(true))
            .count()
    }

    fn settle(&mut self, detected: bool) {
        for e in &mut self.events[self.pending_from..] {
            e.detected = Some(detected);
        }
        self.pending_from = self.events.len();
    }

    /// Events still awaiting an outcome (faults in the pass that converged,
    /// or injected after the last commit): count them as missed.
    pub fn settle_remaining_undetected(&mut self) {
        self.settle(false);
    }
}

impl PrecondHook for FaultInjector {
    fn on_preconditioned(&mut self, n: usize, nu: usize, e: &mut Field) {
        if self.events.len() >= self.cfg.max_events {
            return;
        }
        if let Some(ev) = maybe_inject(e, &self.part, &self.cfg, &mut self.rng, n, nu) {
            self.events.push(ev);
        }
    }

    fn on_restore(&mut self) {
        self.settle(true);
    }

    fn on_checkpoint(&mut self) {
        self.settle(false);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_partition;
    use proptest::prelude::*;

    #[test]
    fn flip_bit_reference_values() {
        assert_eq!(flip_bit(1.0, 63), -1.0);
        assert_eq!(flip_bit(1.0, 62), f64::INFINITY);
        assert_eq!(flip_bit(-1.0, 63), 1.0);
        assert_eq!(flip_bit(0.0, 52).to_bits(), (1u64 << 52)); // subnormal->min normal exponent
        // mantissa LSB of 1.0 is the next representable double
        assert_eq!(flip_bit(1.0, 0), 1.0 + f64::EPSILON);
    }

    proptest! {
        #[test]
        fn flip_bit_is_an_involution(x in proptest::num::f64::ANY, b in 0u32..64) {
            let y = flip_bit(x, b);
            prop_assert_eq!(flip_bit(y, b).to_bits(), x.to_bits());
            prop_assert_ne!(y.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn corrupt_count_examples() {
        // whole-rank loss on the big config: 20% of 1452480 far exceeds the
        // 13448-entry rank, so the clamp gives the full local state
        assert_eq!(corrupt_count(0.2, 1_452_480, 13_448), 13_448);
        // tiny loss: 4e-6 * 1452480 = 5.81 -> 6 entries
        assert_eq!(corrupt_count(4e-6, 1_452_480, 13_448), 6);
        // floor of one entry
        assert_eq!(corrupt_count(1e-12, 1_452_480, 13_448), 1);
        assert_eq!(corrupt_count(0.5, 100, 10), 10);
    }

    fn test_cfg(prob: f64, seed: u64) -> FaultConfig {
        FaultConfig {
            injection_prob: prob,
            max_events: 10,
            loss_fraction: 1e-3,
            seed,
            bit_policy: BitPolicy::UniformAnyBit,
        }
    }

    #[test]
    fn prob_zero_never_injects_prob_one_always() {
        let part = make_partition(1000, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut f = Field::zeros(1000);
        for _ in 0..50 {
            assert!(maybe_inject(&mut f, &part, &test_cfg(0.0, 0), &mut rng, 1, 0).is_none());
        }
        assert!(f.values.iter().all(|&v| v == 0.0));
        for _ in 0..50 {
            assert!(maybe_inject(&mut f, &part, &test_cfg(1.0, 0), &mut rng, 1, 0).is_some());
        }
    }

    #[test]
    fn injection_rate_matches_bernoulli() {
        let part = make_partition(1000, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = test_cfg(0.02, 0);
        let trials = 100_000;
        let mut hits = 0usize;
        let mut f = Field::zeros(1000);
        for _ in 0..trials {
            if maybe_inject(&mut f, &part, &cfg, &mut rng, 1, 0).is_some() {
                hits += 1;
            }
        }
        // binomial(1e5, 0.02): mean 2000, sigma ~44.3; accept within 3 sigma
        let mean = trials as f64 * 0.02;
        let sigma = (trials as f64 * 0.02 * 0.98).sqrt();
        assert!(
            (hits as f64 - mean).abs() < 3.0 * sigma,
            "hits = {hits}, expected {mean} +/- {:.0}",
            3.0 * sigma
        );
    }

    #[test]
    fn corruption_stays_on_the_struck_rank() {
        let part = make_partition(1000, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = test_cfg(1.0, 0);
        for _ in 0..100 {
            let mut f = Field::zeros(1000);
            let ev = maybe_inject(&mut f, &part, &cfg, &mut rng, 1, 0).unwrap();
            let range = &part.ranges[ev.rank];
            assert!(!ev.indices.is_empty());
            for &i in &ev.indices {
                assert!(range.contains(&i), "index {i} outside rank {}", ev.rank);
            }
            for (i, &v) in f.values.iter().enumerate() {
                if v != 0.0 || ev.indices.contains(&i) {
                    assert!(ev.indices.contains(&i), "stray corruption at {i}");
                }
            }
        }
    }

    #[test]
    fn bit_policies_respect_their_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            assert!(BitPolicy::Mantissa.sample_bit(&mut rng) < 52);
            let e = BitPolicy::Exponent.sample_bit(&mut rng);
            assert!((52..63).contains(&e));
            assert_eq!(BitPolicy::Sign.sample_bit(&mut rng), 63);
            assert!(BitPolicy::UniformAnyBit.sample_bit(&mut rng) < 64);
        }
    }

    #[test]
    fn same_seed_replays_identical_events() {
        let part = make_partition(500, 3).unwrap();
        let run = |seed: u64| {
            let mut inj = FaultInjector::new(
                FaultConfig {
                    injection_prob: 0.5,
                    max_events: 10,
                    loss_fraction: 0.01,
                    seed,
                    bit_policy: BitPolicy::UniformAnyBit,
                },
                part.clone(),
            );
            let mut f = Field::from_vec(vec![1.0; 500]);
            for call in 0..20 {
                inj.on_preconditioned(call / 5 + 1, call % 5, &mut f);
            }
            (inj.events, f)
        };
        let (ev_a, f_a) = run(99);
        let (ev_b, f_b) = run(99);
        assert_eq!(ev_a.len(), ev_b.len());
        for (a, b) in ev_a.iter().zip(&ev_b) {
            assert_eq!(a.indices, b.indices);
            assert_eq!(a.bits, b.bits);
        }
        assert_eq!(f_a, f_b);
        let (ev_c, _) = run(100);
        let differs = ev_a.len() != ev_c.len()
            || ev_a
                .iter()
                .zip(&ev_c)
                .any(|(a, c)| a.indices != c.indices || a.bits != c.bits);
        assert!(differs, "different seeds should not replay");
    }

    #[test]
    fn max_events_caps_injection() {
        let part = make_partition(100, 2).unwrap();
        let mut inj = FaultInjector::new(
            FaultConfig {
                injection_prob: 1.0,
                max_events: 3,
                loss_fraction: 0.01,
                seed: 1,
                bit_policy: BitPolicy::UniformAnyBit,
            },
            part,
        );
        let mut f = Field::zeros(100);
        for call in 0..10 {
            inj.on_preconditioned(1, call, &mut f);
        }
        assert_eq!(inj.faults_injected(), 3);
    }

    #[test]
    fn attribution_marks_pending_events() {
        let part = make_partition(100, 2).unwrap();
        let mk = || {
            FaultInjector::new(
                FaultConfig {
                    injection_prob: 1.0,
                    max_events: 10,
                    loss_fraction: 0.01,
                    seed: 5,
                    bit_policy: BitPolicy::UniformAnyBit,
                },
                make_partition(100, 2).unwrap(),
            )
        };
        let _ = part;
        let mut inj = mk();
        let mut f = Field::zeros(100);
        inj.on_preconditioned(1, 0, &mut f);
        inj.on_restore();
        assert_eq!(inj.events[0].detected, Some(true));
        assert_eq!(inj.faults_detected(), 1);

        inj.on_preconditioned(2, 0, &mut f);
        inj.on_checkpoint();
        assert_eq!(inj.events[1].detected, Some(false));

        inj.on_preconditioned(3, 0, &mut f);
        assert_eq!(inj.events[2].detected, None);
        inj.settle_remaining_undetected();
        assert_eq!(inj.events[2].detected, Some(false));
        assert_eq!(inj.faults_detected(), 1);
    }
}
