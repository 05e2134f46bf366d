//! Synthetic tasks the toy model trains on.
//!
//! Two flavors share one vocabulary size of 16:
//! * `KeyValueLookup` — classification through one level of indirection.
//!   Section one binds every key to a bridge token, section two (in an
//!   independently shuffled order) binds every bridge to a value, and the
//!   final token queries one key; the model must emit the value reachable
//!   through that key's bridge. Because *all* bridges and values appear in
//!   every episode and both listing orders are independent permutations,
//!   no positional shortcut and no candidate-set heuristic beats chance:
//!   answering requires a previous-token copy plus two sequential
//!   content-addressed hops, a circuit that cannot fit in the first and
//!   last layers alone. Middle layers therefore carry real work and naive
//!   layer removal collapses accuracy toward chance.
//! * `MarkovLm` — language modeling over a seeded sparse Markov chain, used
//!   for the perplexity-based reward path.

use crate::calibration::ScaleTable;
use crate::error::{DashError, Result};
use crate::model::{argmax, LayerState, ToyModel};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const VOCAB_SIZE: usize = 16;

// Token layout for the lookup task: keys bind to bridges, bridges to values.
pub const N_KEYS: usize = 4;
pub const N_BRIDGES: usize = 4;
pub const N_VALUES: usize = 4;
pub const FIRST_KEY: usize = 0; // keys 0..4
pub const FIRST_BRIDGE: usize = 4; // bridges 4..8
pub const FIRST_VALUE: usize = 8; // values 8..12
pub const SEP: usize = 12;
pub const BOS: usize = 13;

/// Fixed lookup-episode length:
/// `[BOS (k b)x4 SEP (b v)x4 SEP bq SEP kp SEP kq]`.
pub const LOOKUP_SEQ_LEN: usize = 24;

/// One labeled sequence. The gold token is read from the prediction at
/// `answer_pos`; for LM episodes `gold` is unused (0). `aux` lists extra
/// supervised positions used only by the training loss — their targets are
/// never part of the input tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub tokens: Vec<usize>,
    pub answer_pos: usize,
    pub gold: usize,
    #[serde(default)]
    pub aux: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    KeyValueLookup,
    MarkovLm,
}

/// Task definition plus training knobs for the base model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train_seed: u64,
    pub val_seed: u64,
    pub val_size: usize,
    /// Full-path validation accuracy (classification) or the perplexity
    /// margin over chance (LM) the trained base model must reach.
    pub accuracy_floor: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
}

impl TaskSpec {
    pub fn lookup_default() -> Self {
        Self {
            kind: TaskKind::KeyValueLookup,
            train_seed: 11,
            val_seed: 12,
            val_size: 256,
            accuracy_floor: 0.95,
            max_steps: 14000,
            batch_size: 64,
            learning_rate: 1e-3,
            eval_every: 100,
        }
    }

    pub fn markov_default() -> Self {
        Self {
            kind: TaskKind::MarkovLm,
            train_seed: 21,
            val_seed: 22,
            val_size: 128,
            accuracy_floor: 0.5,
            max_steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            eval_every: 50,
        }
    }

    /// Probability of a correct answer under uniform guessing.
    pub fn chance_level(&self) -> f64 {
        match self.kind {
            TaskKind::KeyValueLookup => 1.0 / N_VALUES as f64,
            TaskKind::MarkovLm => 1.0 / VOCAB_SIZE as f64,
        }
    }

    pub fn sample_episode(&self, rng: &mut ChaCha8Rng) -> Episode {
        match self.kind {
            TaskKind::KeyValueLookup => sample_lookup_episode(rng),
            TaskKind::MarkovLm => sample_markov_episode(rng, self.train_seed),
        }
    }

    /// Deterministic validation set drawn from `val_seed`.
    pub fn validation_set(&self) -> Vec<Episode> {
        self.episode_batch(self.val_size, self.val_seed)
    }

    /// Deterministic episode batch from an explicit seed (evaluation sets
    /// that must not collide with the validation draw).
    pub fn episode_batch(&self, n: usize, seed: u64) -> Vec<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| match self.kind {
                TaskKind::KeyValueLookup => sample_lookup_episode(&mut rng),
                TaskKind::MarkovLm => sample_markov_episode(&mut rng, self.train_seed),
            })
            .collect()
    }
}

/// A uniformly random permutation of `0..4`.
fn perm4(rng: &mut ChaCha8Rng) -> [usize; 4] {
    let mut p = [0, 1, 2, 3];
    p.shuffle(rng);
    p
}

/// `[BOS, (k,b)x4, SEP, (b,v)x4, SEP, bq, SEP, kp, SEP, kq]`, length 24.
///
/// Two hidden permutations define the episode: `p1` binds key `k` to bridge
/// `p1[k]`, and `p2` binds bridge `b` to value `p2[b]`. Section one lists
/// all four `(key, bridge)` pairs, section two all four `(bridge, value)`
/// pairs; the two listing orders are drawn independently, so position never
/// predicts content. The answer at the final position is the two-hop chase
/// `p2[p1[kq]]`.
///
/// `bq` and `kp` are probe tokens whose targets appear only in `aux` (the
/// value of `bq`, the bridge of `kp`), never in the input. They give the
/// single hops direct supervision during training without revealing
/// anything about the queried chain: both probes are drawn independently of
/// `kq`, and since every bridge and value occurs in every episode, knowing
/// a probe answer narrows nothing.
fn sample_lookup_episode(rng: &mut ChaCha8Rng) -> Episode {
    let p1 = perm4(rng); // key -> bridge
    let p2 = perm4(rng); // bridge -> value
    let sec1_order = perm4(rng);
    let sec2_order = perm4(rng);
    let bq = rng.gen_range(0..N_BRIDGES);
    let kp = rng.gen_range(0..N_KEYS);
    let kq = rng.gen_range(0..N_KEYS);

    let mut tokens = Vec::with_capacity(LOOKUP_SEQ_LEN);
    tokens.push(BOS);
    for &k in &sec1_order {
        tokens.push(FIRST_KEY + k);
        tokens.push(FIRST_BRIDGE + p1[k]);
    }
    tokens.push(SEP);
    for &b in &sec2_order {
        tokens.push(FIRST_BRIDGE + b);
        tokens.push(FIRST_VALUE + p2[b]);
    }
    tokens.push(SEP);
    tokens.push(FIRST_BRIDGE + bq);
    tokens.push(SEP);
    tokens.push(FIRST_KEY + kp);
    tokens.push(SEP);
    tokens.push(FIRST_KEY + kq);
    debug_assert_eq!(tokens.len(), LOOKUP_SEQ_LEN);

    let probe_hop2 = (19, FIRST_VALUE + p2[bq]);
    let probe_hop1 = (21, FIRST_BRIDGE + p1[kp]);
    Episode {
        answer_pos: tokens.len() - 1,
        gold: FIRST_VALUE + p2[p1[kq]],
        tokens,
        aux: vec![probe_hop2, probe_hop1],
    }
}

/// Sparse Markov chain: each state has two successors with probs 0.8 / 0.2.
/// The chain itself is fixed by `chain_seed`, independent of the sampling rng.
pub const MARKOV_SEQ_LEN: usize = 12;

fn markov_successors(chain_seed: u64) -> Vec<[usize; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    (0..VOCAB_SIZE)
        .map(|_| {
            let a = rng.gen_range(0..VOCAB_SIZE);
            let mut b = rng.gen_range(0..VOCAB_SIZE - 1);
            if b >= a {
                b += 1;
            }
            [a, b]
        })
        .collect()
}

fn sample_markov_episode(rng: &mut ChaCha8Rng, chain_seed: u64) -> Episode {
    let succ = markov_successors(chain_seed);
    let mut tokens = Vec::with_capacity(MARKOV_SEQ_LEN);
    tokens.push(rng.gen_range(0..VOCAB_SIZE));
    for _ in 1..MARKOV_SEQ_LEN {
        let prev = *tokens.last().unwrap();
        let [a, b] = succ[prev];
        tokens.push(if rng.gen_bool(0.8) { a } else { b });
    }
    Episode {
        answer_pos: tokens.len() - 1,
        tokens,
        gold: 0,
        aux: Vec::new(),
    }
}

/// Entropy rate of the 0.8/0.2 successor distribution, in nats. A perfectly
/// fit model's per-token perplexity approaches exp of this.
pub fn markov_entropy_nats() -> f64 {
    -(0.8f64.ln() * 0.8 + 0.2f64.ln() * 0.2)
}

// ── Evaluation ─────────────────────────────────────────────────────────

/// Fraction of episodes whose argmax prediction at `answer_pos` is gold.
pub fn accuracy(
    model: &ToyModel,
    path: &[LayerState],
    episodes: &[Episode],
    scales: &ScaleTable,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(DashError::InvalidArgument("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for ep in episodes {
        let logits = model.forward_with_path(&ep.tokens, path, scales)?;
        if argmax(logits.row(ep.answer_pos)) == ep.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / episodes.len() as f64)
}

/// Mean per-token perplexity over episodes.
pub fn mean_perplexity(
    model: &ToyModel,
    path: &[LayerState],
    episodes: &[Episode],
    scales: &ScaleTable,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(DashError::InvalidArgument("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for ep in episodes {
        total += model.perplexity(path, &ep.tokens, scales)?;
    }
    Ok(total / episodes.len() as f64)
}
