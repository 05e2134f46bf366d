//! Differential rewards, the policy-gradient update, and scorer training.
//!
//! Each decision step earns r_i = r_acc * omega_i + r_eff:
//! * r_acc — episode-level task outcome (+/-1 for classification, a
//!   perplexity-gap form for LM), shared across steps;
//! * omega_i — position weight steering credit toward earlier layers and
//!   executed (non-skipped) states;
//! * r_eff — beta * (4 - s_next), paying for aggressive skipping.
//!
//! The scorer trains by REINFORCE on L_RL = -sum_i r_i log pi(s_{i+1}|...),
//! with a batch-mean baseline, under the joint objective
//! L_all = L_CE + lambda * L_RL. The base model stays frozen by default;
//! co-training mode also updates it through the straight-through estimator.

use crate::calibration::ScaleTable;
use crate::error::{DashError, Result};
use crate::model::{LayerState, ToyModel, ALL_STATES};
use crate::numerics::{dot, gelu_grad, sigmoid};
use crate::policy::{
    score_candidates_cached, temperature, DecisionStep, DecisionTrace, ScorerGrads, ScorerParams,
};
use crate::task::{Episode, TaskKind, TaskSpec};
use crate::train::AdamState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

// ── Configuration ──────────────────────────────────────────────────────

/// How the LM reward combines the two perplexities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PplSignMode {
    /// (eps - |ppl_full - ppl_skip|) / ppl_full — the degradation gap.
    Difference,
    /// (eps - |ppl_full + ppl_skip|) / ppl_full — kept for comparison;
    /// strongly negative for all realistic perplexities.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Efficiency weight in r_eff = beta * (4 - s). Zero disables the
    /// efficiency incentive (used by the budget controller's lower bound).
    pub beta: f64,
    /// RL weight in L_all = L_CE + lambda * L_RL.
    pub lambda: f64,
    /// Tolerance in the LM reward.
    pub epsilon: f64,
    pub ppl_sign_mode: PplSignMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lambda: 1.0,
            epsilon: 0.1,
            ppl_sign_mode: PplSignMode::Difference,
        }
    }
}

impl RewardConfig {
    /// beta and lambda may be zero (the controller and ablations need both
    /// endpoints); epsilon must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.lambda >= 0.0 && self.epsilon > 0.0)
            || !self.beta.is_finite()
            || !self.lambda.is_finite()
            || !self.epsilon.is_finite()
        {
            return Err(DashError::InvalidArgument(format!(
                "reward config requires beta >= 0, lambda >= 0, epsilon > 0; got beta={} lambda={} epsilon={}",
                self.beta, self.lambda, self.epsilon
            )));
        }
        Ok(())
    }
}

// ── Reward pieces ──────────────────────────────────────────────────────

/// One step's reward decomposition; r == r_acc * omega + r_eff exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReward {
    pub r_acc: f64,
    pub omega: f64,
    pub r_eff: f64,
    pub r: f64,
}

/// +1 for a correct prediction, -1 otherwise.
pub fn acc_reward_classification(predicted: usize, gold: usize) -> f64 {
    if predicted == gold {
        1.0
    } else {
        -1.0
    }
}

/// LM reward from full-path and skip-path perplexities.
pub fn acc_reward_perplexity(ppl_full: f64, ppl_skip: f64, cfg: &RewardConfig) -> Result<f64> {
    if ppl_full <= 0.0 || ppl_skip <= 0.0 {
        return Err(DashError::InvalidArgument(format!(
            "perplexities must be positive, got full={ppl_full} skip={ppl_skip}"
        )));
    }
    let combined = match cfg.ppl_sign_mode {
        PplSignMode::Difference => (ppl_full - ppl_skip).abs(),
        PplSignMode::PaperLiteral => (ppl_full + ppl_skip).abs(),
    };
    Ok((cfg.epsilon - combined) / ppl_full)
}

/// Position weight for the decided layer l (1-based):
///
///   omega = ((|S_X| - |S_X,l|) / |S_X|) * sigmoid(s_l - |S_M| / |S_X|)
///
/// with |S_X| the state-code sum over the whole trace, |S_X,l| the prefix
/// sum through layer l, and |S_M| = 4L. Early layers and executed states
/// earn more accuracy credit.
pub fn position_weight(trace: &DecisionTrace, l: usize) -> Result<f64> {
    let n = trace.states.len();
    if l == 0 || l > n {
        return Err(DashError::LayerIndexOutOfRange {
            index: l,
            layers: n,
        });
    }
    let s_x = trace.state_code_sum() as f64;
    // Boundary rules guarantee s_x >= 8 > 0.
    let prefix: u64 = trace.states[..l].iter().map(|s| s.code() as u64).sum();
    let s_m = 4.0 * n as f64;
    let first = (s_x - prefix as f64) / s_x;
    let s_l = trace.states[l - 1].code() as f64;
    Ok(first * sigmoid(s_l - s_m / s_x))
}

/// beta * (4 - s): full execution earns nothing, skipping earns the most.
pub fn efficiency_reward(s_next: LayerState, beta: f64) -> f64 {
    beta * (4.0 - s_next.code() as f64)
}

/// Compose r = r_acc * omega + r_eff exactly.
pub fn step_reward(r_acc: f64, omega: f64, r_eff: f64) -> StepReward {
    StepReward {
        r_acc,
        omega,
        r_eff,
        r: r_acc * omega + r_eff,
    }
}

/// Fill every decision step's reward from the episode outcome.
pub fn assign_rewards(trace: &mut DecisionTrace, r_acc: f64, cfg: &RewardConfig) -> Result<()> {
    let layers: Vec<usize> = trace.steps.iter().map(|s| s.layer).collect();
    for (idx, layer) in layers.into_iter().enumerate() {
        let omega = position_weight(trace, layer)?;
        let r_eff = efficiency_reward(trace.states[layer - 1], cfg.beta);
        trace.steps[idx].reward = Some(step_reward(r_acc, omega, r_eff));
    }
    Ok(())
}

// ── Episode rollout ────────────────────────────────────────────────────

/// A sampled rollout: logits under the sampled path, the trace with
/// recorded probabilities, and the pooled hidden fed to each decision.
/// Produced by the same decision engine inference uses.
pub type Rollout = crate::runtime::EngineRun;

/// Run one episode with temperature sampling at each decidable layer.
/// Decisions see the true hidden state (synchronous semantics).
pub fn rollout_sampled(
    model: &ToyModel,
    scorer: &ScorerParams,
    scales: &ScaleTable,
    tokens: &[usize],
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    crate::runtime::run_with_rule(
        model,
        scorer,
        scales,
        tokens,
        crate::runtime::DecisionRule::Sample { tau, rng },
    )
}

// ── REINFORCE ──────────────────────────────────────────────────────────

/// L_RL = -sum_i r_i log pi(s_{i+1} | s_i, h_i), recomputed from params.
/// The probabilities recorded at decision time must be present (they pin
/// the sampled temperature and admissible set).
pub fn rl_loss(
    params: &ScorerParams,
    trace: &DecisionTrace,
    hiddens: &[Vec<f64>],
) -> Result<f64> {
    let mut loss = 0.0;
    for_each_step(params, trace, hiddens, |_, step, probs, _| {
        let r = step
            .reward
            .as_ref()
            .map(|s| s.r)
            .ok_or(DashError::InvalidArgument("step missing reward".into()))?;
        let chosen = trace.states[step.layer - 1];
        loss -= r * probs[chosen.slot()].ln();
        Ok(())
    })?;
    Ok(loss)
}

/// Gradient of `rl_loss` with respect to the scorer parameters, computed by
/// reverse-mode differentiation through the MLP and the sampling softmax.
pub fn reinforce_gradient(
    params: &ScorerParams,
    trace: &DecisionTrace,
    hiddens: &[Vec<f64>],
) -> Result<ScorerGrads> {
    reinforce_gradient_with_baseline(params, trace, hiddens, 0.0)
}

/// As `reinforce_gradient` but uses the advantage r_i - baseline. The
/// baseline shifts no expectation; it only reduces variance.
pub fn reinforce_gradient_with_baseline(
    params: &ScorerParams,
    trace: &DecisionTrace,
    hiddens: &[Vec<f64>],
    baseline: f64,
) -> Result<ScorerGrads> {
    let mut grads = ScorerGrads::zeros_like(params);
    for_each_step(params, trace, hiddens, |cache, step, probs, tau| {
        let r = step
            .reward
            .as_ref()
            .map(|s| s.r)
            .ok_or(DashError::InvalidArgument("step missing reward".into()))?;
        let advantage = r - baseline;
        let chosen = trace.states[step.layer - 1];
        // d(-a ln p[chosen])/d score_c = -a (1{c=chosen} - p_c) / tau over
        // the admissible candidates; masked slots have p = 0 and no path.
        let mut d_score = [0.0; 4];
        for s in ALL_STATES {
            let slot = s.slot();
            if !params.allowed.contains(s) {
                continue;
            }
            let indicator = if s == chosen { 1.0 } else { 0.0 };
            d_score[slot] = -advantage * (indicator - probs[slot]) / tau;
        }
        backprop_mlp(params, cache, &d_score, &mut grads);
        Ok(())
    })?;
    Ok(grads)
}

/// Shared walk over decision steps: recompute scores/probabilities from
/// the current parameters and hand each step to `f`.
fn for_each_step(
    params: &ScorerParams,
    trace: &DecisionTrace,
    hiddens: &[Vec<f64>],
    mut f: impl FnMut(&crate::policy::ScorerCache, &DecisionStep, &[f64; 4], f64) -> Result<()>,
) -> Result<()> {
    if trace.steps.len() != hiddens.len() {
        return Err(DashError::DimensionMismatch(format!(
            "{} decision steps vs {} hiddens",
            trace.steps.len(),
            hiddens.len()
        )));
    }
    for (step, h) in trace.steps.iter().zip(hiddens) {
        if step.probs.is_none() {
            return Err(DashError::InvalidArgument(
                "trace has no recorded sampling probabilities (greedy trace?)".into(),
            ));
        }
        let l_i = step.layer - 1;
        let s_i = trace.states[step.layer - 2];
        let (scores, cache) = score_candidates_cached(params, h, l_i, s_i)?;
        let probs = crate::policy::state_probabilities(&scores, &params.allowed, step.tau)?;
        f(&cache, step, &probs, step.tau)?;
    }
    Ok(())
}

/// Reverse pass through base = W3^T gelu(W2^T gelu(W1^T x)); the penalty
/// term is parameter-free. Gradients accumulate into `grads`.
fn backprop_mlp(
    params: &ScorerParams,
    cache: &crate::policy::ScorerCache,
    d_base: &[f64; 4],
    grads: &mut ScorerGrads,
) {
    let d_out: Vec<f64> = match params.conditioning {
        crate::policy::Conditioning::PerCandidate => d_base.to_vec(),
        crate::policy::Conditioning::SingleOutput => vec![d_base.iter().sum()],
    };
    // W3: out = a2^T W3
    let mut d_a2 = vec![0.0; params.d_2];
    for (k, da) in d_a2.iter_mut().enumerate() {
        *da = dot(params.w3.row(k), &d_out);
        let grow = grads.w3.row_mut(k);
        for (c, g) in grow.iter_mut().enumerate() {
            *g += cache.a2[k] * d_out[c];
        }
    }
    // GELU at z2, then W2.
    let d_z2: Vec<f64> = d_a2
        .iter()
        .zip(&cache.z2)
        .map(|(d, &z)| d * gelu_grad(z))
        .collect();
    let mut d_a1 = vec![0.0; params.d_1];
    for (k, da) in d_a1.iter_mut().enumerate() {
        *da = dot(params.w2.row(k), &d_z2);
        let grow = grads.w2.row_mut(k);
        for (c, g) in grow.iter_mut().enumerate() {
            *g += cache.a1[k] * d_z2[c];
        }
    }
    // GELU at z1, then W1 and the input segments.
    let d_z1: Vec<f64> = d_a1
        .iter()
        .zip(&cache.z1)
        .map(|(d, &z)| d * gelu_grad(z))
        .collect();
    let mut d_x = vec![0.0; cache.x.len()];
    for (k, dx) in d_x.iter_mut().enumerate() {
        *dx = dot(params.w1.row(k), &d_z1);
        let grow = grads.w1.row_mut(k);
        for (c, g) in grow.iter_mut().enumerate() {
            *g += cache.x[k] * d_z1[c];
        }
    }
    // The hidden-state segment of d_x stops here (frozen base); the two
    // embedding segments flow into the table.
    let d_l = params.d_l;
    let e0 = params.d_h;
    let g_low = grads.e_layer.row_mut(cache.l_i);
    for (g, &v) in g_low.iter_mut().zip(&d_x[e0..e0 + d_l]) {
        *g += v;
    }
    let g_high = grads.e_layer.row_mut(cache.l_i + 1);
    for (g, &v) in g_high.iter_mut().zip(&d_x[e0 + d_l..e0 + 2 * d_l]) {
        *g += v;
    }
}

/// Clip to max gradient norm 1.0 and apply plain SGD.
pub fn sgd_update(params: &mut ScorerParams, grads: &mut ScorerGrads, lr: f64) {
    let norm = grads.l2_norm();
    if norm > 1.0 {
        grads.scale(1.0 / norm);
    }
    let mut ps = params.tensors_mut();
    let gs = grads.tensors();
    for i in 0..ps.len() {
        for (p, g) in ps[i].iter_mut().zip(gs[i]) {
            *p -= lr * g;
        }
    }
}

// ── Joint training ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Base model frozen; only the scorer learns.
    FrozenBase,
    /// Base model co-trained through the straight-through estimator.
    CoTrain { model_lr: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainScorerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau0: f64,
    pub alpha_decay: f64,
    pub episode_seed: u64,
    pub sample_seed: u64,
    /// Subtract the batch-mean reward before the gradient (variance cut).
    pub baseline: bool,
    pub mode: TrainMode,
    pub log_every: usize,
}

impl Default for TrainScorerConfig {
    fn default() -> Self {
        Self {
            steps: 240,
            batch_size: 4,
            learning_rate: 2e-2,
            tau0: 1.0,
            alpha_decay: 0.02,
            episode_seed: 41,
            sample_seed: 42,
            baseline: true,
            mode: TrainMode::FrozenBase,
            log_every: 10,
        }
    }
}

/// Training-log row; written as CSV `step,loss_ce,loss_rl,mean_cost_ratio,accuracy,tau`.
#[derive(Debug, Clone, Serialize)]
pub struct ScorerLogRow {
    pub step: usize,
    pub loss_ce: f64,
    pub loss_rl: f64,
    pub mean_cost_ratio: f64,
    pub accuracy: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss_ce: f64,
    pub loss_rl: f64,
    pub loss_all: f64,
    pub mean_cost_ratio: f64,
    pub accuracy: f64,
    pub mean_r_eff: f64,
}

/// One update of L_all = L_CE + lambda * L_RL over a batch of episodes.
/// FrozenBase leaves the model untouched; CoTrain applies an Adam step to
/// the base weights through the straight-through estimator.
#[allow(clippy::too_many_arguments)]
pub fn joint_train_step(
    model: &mut ToyModel,
    scorer: &mut ScorerParams,
    batch: &[Episode],
    task_kind: TaskKind,
    scales: &ScaleTable,
    reward_cfg: &RewardConfig,
    train_cfg: &TrainScorerConfig,
    tau: f64,
    sample_rng: &mut ChaCha8Rng,
    adam: Option<&mut AdamState>,
) -> Result<StepStats> {
    reward_cfg.validate()?;
    if batch.is_empty() {
        return Err(DashError::InvalidArgument("empty training batch".into()));
    }
    let n_layers = model.config.n_layers;
    let full = crate::model::full_path(n_layers);

    let mut rollouts = Vec::with_capacity(batch.len());
    let mut loss_ce = 0.0;
    let mut correct = 0usize;
    let mut cost_sum = 0.0;
    let mut r_eff_sum = 0.0;
    let mut n_steps = 0usize;
    for ep in batch {
        let mut ro = rollout_sampled(model, scorer, scales, &ep.tokens, tau, sample_rng)?;
        let r_acc = match task_kind {
            TaskKind::KeyValueLookup => {
                let pred = crate::model::argmax(ro.logits.row(ep.answer_pos));
                if pred == ep.gold {
                    correct += 1;
                }
                acc_reward_classification(pred, ep.gold)
            }
            TaskKind::MarkovLm => {
                let ppl_full = model.perplexity(&full, &ep.tokens, scales)?;
                let ppl_skip =
                    crate::model::perplexity_from_logits(&ro.logits, &ep.tokens)?;
                if (ppl_full - ppl_skip).abs() <= reward_cfg.epsilon {
                    correct += 1;
                }
                acc_reward_perplexity(ppl_full, ppl_skip, reward_cfg)?
            }
        };
        assign_rewards(&mut ro.trace, r_acc, reward_cfg)?;
        let targets = crate::train::loss_targets(ep, task_kind);
        let (ce, _) = crate::train::ce_loss_and_dlogits(&ro.logits, &targets);
        loss_ce += ce / targets.len() as f64;
        cost_sum += ro.trace.cost() as f64 / (4.0 * n_layers as f64);
        for s in &ro.trace.steps {
            r_eff_sum += s.reward.as_ref().expect("assigned").r_eff;
            n_steps += 1;
        }
        rollouts.push(ro);
    }
    loss_ce /= batch.len() as f64;

    // Batch-mean baseline over all step rewards.
    let baseline = if train_cfg.baseline && n_steps > 0 {
        rollouts
            .iter()
            .flat_map(|ro| ro.trace.steps.iter())
            .map(|s| s.reward.as_ref().expect("assigned").r)
            .sum::<f64>()
            / n_steps as f64
    } else {
        0.0
    };

    let mut loss_rl = 0.0;
    let mut grads = ScorerGrads::zeros_like(scorer);
    for ro in &rollouts {
        loss_rl += rl_loss(scorer, &ro.trace, &ro.hiddens)?;
        let g = reinforce_gradient_with_baseline(scorer, &ro.trace, &ro.hiddens, baseline)?;
        grads.add(&g);
    }
    loss_rl /= batch.len() as f64;
    // d L_all / d theta = lambda * d L_RL / d theta (CE has no direct
    // scorer dependence; path credit flows through the rewards).
    grads.scale(reward_cfg.lambda / batch.len() as f64);
    sgd_update(scorer, &mut grads, train_cfg.learning_rate);

    if let TrainMode::CoTrain { model_lr } = train_cfg.mode {
        let adam = adam.ok_or_else(|| {
            DashError::InvalidArgument("co-training requires optimizer state".into())
        })?;
        let mut mgrads = crate::model::ModelParams::zeros_like(&model.config);
        let total_positions: usize = batch
            .iter()
            .map(|ep| crate::train::loss_targets(ep, task_kind).len())
            .sum();
        let inv = 1.0 / total_positions as f64;
        for (ep, ro) in batch.iter().zip(&rollouts) {
            let cache =
                crate::train::forward_cached(model, &ep.tokens, &ro.trace.states, scales)?;
            let targets = crate::train::loss_targets(ep, task_kind);
            let (_, mut dlogits) = crate::train::ce_loss_and_dlogits(&cache.logits, &targets);
            for v in dlogits.data.iter_mut() {
                *v *= inv;
            }
            crate::train::backward(model, &cache, &dlogits, &mut mgrads);
        }
        let mut params = model.params.clone();
        adam.step(&mut params, &mgrads, model_lr);
        *model = ToyModel::from_params(model.config.clone(), params)?;
    }

    let loss_all = loss_ce + reward_cfg.lambda * loss_rl;
    if !loss_all.is_finite() {
        return Err(DashError::Divergence("non-finite joint loss".into()));
    }
    Ok(StepStats {
        loss_ce,
        loss_rl,
        loss_all,
        mean_cost_ratio: cost_sum / batch.len() as f64,
        accuracy: correct as f64 / batch.len() as f64,
        mean_r_eff: if n_steps > 0 {
            r_eff_sum / n_steps as f64
        } else {
            0.0
        },
    })
}

pub struct ScorerTrainOutcome {
    pub scorer: ScorerParams,
    pub model: ToyModel,
    pub log: Vec<ScorerLogRow>,
}

/// Full scorer-training driver with temperature decay and a divergence
/// guard (abort if |L_all| grows more than tenfold over 100 steps).
pub fn train_scorer(
    model: &ToyModel,
    task: &TaskSpec,
    scorer_init: ScorerParams,
    scales: &ScaleTable,
    reward_cfg: &RewardConfig,
    train_cfg: &TrainScorerConfig,
) -> Result<ScorerTrainOutcome> {
    reward_cfg.validate()?;
    scorer_init.validate(&model.config)?;
    let mut model = model.clone();
    let mut scorer = scorer_init;
    let mut episode_rng = ChaCha8Rng::seed_from_u64(train_cfg.episode_seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(train_cfg.sample_seed);
    let mut adam = match train_cfg.mode {
        TrainMode::CoTrain { .. } => Some(AdamState::new(&model.config)),
        TrainMode::FrozenBase => None,
    };
    let mut log = Vec::new();
    let mut loss_window: Vec<f64> = Vec::with_capacity(train_cfg.steps);

    for step in 1..=train_cfg.steps {
        let tau = temperature(step - 1, train_cfg.tau0, train_cfg.alpha_decay);
        let batch: Vec<Episode> = (0..train_cfg.batch_size)
            .map(|_| task.sample_episode(&mut episode_rng))
            .collect();
        let stats = joint_train_step(
            &mut model,
            &mut scorer,
            &batch,
            task.kind,
            scales,
            reward_cfg,
            train_cfg,
            tau,
            &mut sample_rng,
            adam.as_mut(),
        )?;
        loss_window.push(stats.loss_all);
        if step > 100 {
            let then = loss_window[step - 101];
            if stats.loss_all.abs() > 10.0 * then.abs().max(1e-3) {
                return Err(DashError::Divergence(format!(
                    "joint loss grew from {then:.4} to {:.4} within 100 steps",
                    stats.loss_all
                )));
            }
        }
        if step % train_cfg.log_every == 0 || step == train_cfg.steps {
            log.push(ScorerLogRow {
                step,
                loss_ce: stats.loss_ce,
                loss_rl: stats.loss_rl,
                mean_cost_ratio: stats.mean_cost_ratio,
                accuracy: stats.accuracy,
                tau,
            });
        }
    }
    Ok(ScorerTrainOutcome {
        scorer,
        model,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{path_from_string, ModelConfig};
    use crate::policy::ScorerConfig;
    use rand::Rng;

    fn trace_from(path: &str) -> DecisionTrace {
        DecisionTrace {
            states: path_from_string(path).unwrap(),
            steps: Vec::new(),
            timing: Vec::new(),
        }
    }

    #[test]
    fn position_weight_hand_example() {
        // L=4 all-full, l=2: 0.5 * sigmoid(3) = 0.476287...
        let t = trace_from("4444");
        let w = position_weight(&t, 2).unwrap();
        assert!((w - 0.5 * sigmoid(3.0)).abs() < 1e-12);
        assert!((w - 0.476287).abs() < 1e-6);
    }

    #[test]
    fn position_weight_vanishes_at_last_layer() {
        for path in ["4444", "4024", "420014"] {
            let t = trace_from(path);
            let l = t.states.len();
            assert_eq!(position_weight(&t, l).unwrap(), 0.0);
        }
    }

    #[test]
    fn position_weight_bounds_and_monotone_first_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let l = rng.gen_range(3..8);
            let mut states = vec![LayerState::Full];
            for _ in 0..l - 2 {
                states.push(ALL_STATES[rng.gen_range(0..4)]);
            }
            states.push(LayerState::Full);
            let t = DecisionTrace {
                states,
                steps: Vec::new(),
                timing: Vec::new(),
            };
            let mut prev_first = f64::INFINITY;
            for layer in 1..=l {
                let w = position_weight(&t, layer).unwrap();
                assert!((0.0..=1.0).contains(&w), "omega out of range: {w}");
                // First factor alone is nonincreasing in l.
                let s_x = t.state_code_sum() as f64;
                let prefix: u64 = t.states[..layer].iter().map(|s| s.code() as u64).sum();
                let first = (s_x - prefix as f64) / s_x;
                assert!(first <= prev_first + 1e-15);
                prev_first = first;
            }
        }
    }

    #[test]
    fn efficiency_reward_values() {
        assert_eq!(efficiency_reward(LayerState::Full, 0.5), 0.0);
        assert_eq!(efficiency_reward(LayerState::Skip, 0.5), 2.0);
        // Strictly decreasing in the state code.
        let vals: Vec<f64> = ALL_STATES
            .iter()
            .map(|&s| efficiency_reward(s, 0.3))
            .collect();
        assert!(vals.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn step_reward_identity() {
        let s = step_reward(1.0, 0.5, 0.2);
        assert_eq!(s.r, 0.7);
        let s = step_reward(-1.0, 1.0, 0.0);
        assert_eq!(s.r, -1.0);
        let s = step_reward(0.0, 0.3, 0.9);
        assert_eq!(s.r, s.r_eff);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (a, o, e) = (
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..2.0),
            );
            let s = step_reward(a, o, e);
            assert_eq!(s.r, a * o + e); // exact identity, no tolerance
        }
    }

    #[test]
    fn classification_reward_signs() {
        assert_eq!(acc_reward_classification(3, 3), 1.0);
        assert_eq!(acc_reward_classification(3, 5), -1.0);
        for v in 0..10 {
            assert_eq!(acc_reward_classification(v, v), 1.0);
        }
    }

    #[test]
    fn perplexity_reward_modes() {
        let mut cfg = RewardConfig {
            epsilon: 1.0,
            ..RewardConfig::default()
        };
        assert!((acc_reward_perplexity(10.0, 10.0, &cfg).unwrap() - 0.1).abs() < 1e-12);
        assert!((acc_reward_perplexity(10.0, 15.0, &cfg).unwrap() + 0.4).abs() < 1e-12);
        cfg.ppl_sign_mode = PplSignMode::PaperLiteral;
        assert!((acc_reward_perplexity(10.0, 10.0, &cfg).unwrap() + 1.9).abs() < 1e-12);
        assert!(acc_reward_perplexity(0.0, 1.0, &cfg).is_err());
        assert!(acc_reward_perplexity(1.0, -2.0, &cfg).is_err());
    }

    #[test]
    fn reward_config_validation_allows_zero_beta_lambda() {
        let mut cfg = RewardConfig::default();
        cfg.beta = 0.0;
        cfg.lambda = 0.0;
        cfg.validate().unwrap();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    // ── gradient machinery ─────────────────────────────────────────────

    fn fixture() -> (ToyModel, ScorerParams, ScaleTable, TaskSpec) {
        let cfg = ModelConfig {
            n_layers: 5,
            d_model: 12,
            n_heads: 2,
            d_ff: 16,
            vocab_size: crate::task::VOCAB_SIZE,
            max_seq_len: crate::task::LOOKUP_SEQ_LEN,
            seed: 17,
        };
        let model =
            ToyModel::from_params(cfg.clone(), crate::train::init_params(&cfg, 17)).unwrap();
        let scorer = ScorerParams::init(
            &cfg,
            &ScorerConfig {
                d_l: 4,
                d_1: 8,
                d_2: 8,
                alpha_penalty: 0.05,
                seed: 23,
                ..ScorerConfig::default()
            },
        );
        let scales = ScaleTable::identity(cfg.n_layers);
        (model, scorer, scales, TaskSpec::lookup_default())
    }

    fn sampled_episode(
        model: &ToyModel,
        scorer: &ScorerParams,
        scales: &ScaleTable,
        task: &TaskSpec,
        seed: u64,
    ) -> (DecisionTrace, Vec<Vec<f64>>) {
        let mut ep_rng = ChaCha8Rng::seed_from_u64(seed);
        let ep = task.sample_episode(&mut ep_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut ro = rollout_sampled(model, scorer, scales, &ep.tokens, 0.7, &mut rng).unwrap();
        let pred = crate::model::argmax(ro.logits.row(ep.answer_pos));
        let r_acc = acc_reward_classification(pred, ep.gold);
        assign_rewards(&mut ro.trace, r_acc, &RewardConfig::default()).unwrap();
        (ro.trace, ro.hiddens)
    }

    #[test]
    fn zero_rewards_zero_gradient() {
        let (model, scorer, scales, task) = fixture();
        let (mut trace, hiddens) = sampled_episode(&model, &scorer, &scales, &task, 1);
        for s in trace.steps.iter_mut() {
            s.reward = Some(step_reward(0.0, 0.0, 0.0));
        }
        let g = reinforce_gradient(&scorer, &trace, &hiddens).unwrap();
        assert_eq!(g.l2_norm(), 0.0);
    }

    #[test]
    fn reward_scaling_scales_gradient_linearly() {
        let (model, scorer, scales, task) = fixture();
        let (trace, hiddens) = sampled_episode(&model, &scorer, &scales, &task, 2);
        let g1 = reinforce_gradient(&scorer, &trace, &hiddens).unwrap();
        let mut scaled = trace.clone();
        for s in scaled.steps.iter_mut() {
            let r = s.reward.unwrap();
            s.reward = Some(StepReward {
                r_acc: r.r_acc,
                omega: r.omega,
                r_eff: r.r_eff,
                r: 3.0 * r.r,
            });
        }
        let g3 = reinforce_gradient(&scorer, &scaled, &hiddens).unwrap();
        let t1 = g1.tensors();
        let t3 = g3.tensors();
        for i in 0..t1.len() {
            for (a, b) in t1[i].iter().zip(t3[i]) {
                assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn greedy_trace_rejected_for_gradient() {
        let (model, scorer, scales, task) = fixture();
        let (mut trace, hiddens) = sampled_episode(&model, &scorer, &scales, &task, 3);
        for s in trace.steps.iter_mut() {
            s.probs = None;
        }
        assert!(reinforce_gradient(&scorer, &trace, &hiddens).is_err());
    }

    /// Central finite differences of rl_loss over every scorer tensor, on
    /// several random initializations (the gradient-check contract).
    #[test]
    fn reinforce_gradient_matches_finite_differences() {
        let (model, _, scales, task) = fixture();
        for draw in 0..5u64 {
            let scorer = ScorerParams::init(
                &model.config,
                &ScorerConfig {
                    d_l: 4,
                    d_1: 8,
                    d_2: 8,
                    alpha_penalty: 0.05,
                    seed: 31 + draw,
                    ..ScorerConfig::default()
                },
            );
            let (trace, hiddens) = sampled_episode(&model, &scorer, &scales, &task, 50 + draw);
            let analytic = reinforce_gradient(&scorer, &trace, &hiddens).unwrap();
            let g_tensors = analytic.tensors();
            let h = 1e-5;
            for ti in 0..g_tensors.len() {
                let len = g_tensors[ti].len();
                let stride = (len / 10).max(1);
                for c in (0..len).step_by(stride) {
                    let mut plus = scorer.clone();
                    plus.tensors_mut()[ti][c] += h;
                    let mut minus = scorer.clone();
                    minus.tensors_mut()[ti][c] -= h;
                    let fd = (rl_loss(&plus, &trace, &hiddens).unwrap()
                        - rl_loss(&minus, &trace, &hiddens).unwrap())
                        / (2.0 * h);
                    let an = g_tensors[ti][c];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        rel < 1e-4,
                        "draw {draw} tensor {ti} coord {c}: fd={fd:.6e} an={an:.6e} rel={rel:.2e}"
                    );
                }
            }
        }
    }

    #[test]
    fn baseline_changes_gradient_but_not_at_zero() {
        let (model, scorer, scales, task) = fixture();
        let (trace, hiddens) = sampled_episode(&model, &scorer, &scales, &task, 4);
        let g0 = reinforce_gradient(&scorer, &trace, &hiddens).unwrap();
        let gb = reinforce_gradient_with_baseline(&scorer, &trace, &hiddens, 0.0).unwrap();
        let a = g0.tensors();
        let b = gb.tensors();
        for i in 0..a.len() {
            assert_eq!(a[i], b[i]);
        }
    }

    #[test]
    fn frozen_mode_leaves_model_bit_identical() {
        let (model, scorer, scales, task) = fixture();
        let before = model.params.clone();
        let mut m = model.clone();
        let mut s = scorer.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<Episode> = {
            let mut er = ChaCha8Rng::seed_from_u64(6);
            (0..3).map(|_| task.sample_episode(&mut er)).collect()
        };
        joint_train_step(
            &mut m,
            &mut s,
            &batch,
            task.kind,
            &scales,
            &RewardConfig::default(),
            &TrainScorerConfig::default(),
            0.8,
            &mut rng,
            None,
        )
        .unwrap();
        assert_eq!(m.params, before);
        assert_ne!(s, scorer); // the scorer did move
    }

    #[test]
    fn lambda_zero_leaves_scorer_unchanged() {
        let (model, scorer, scales, task) = fixture();
        let mut m = model.clone();
        let mut s = scorer.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch: Vec<Episode> = {
            let mut er = ChaCha8Rng::seed_from_u64(8);
            (0..3).map(|_| task.sample_episode(&mut er)).collect()
        };
        let cfg = RewardConfig {
            lambda: 0.0,
            ..RewardConfig::default()
        };
        joint_train_step(
            &mut m,
            &mut s,
            &batch,
            task.kind,
            &scales,
            &cfg,
            &TrainScorerConfig::default(),
            0.8,
            &mut rng,
            None,
        )
        .unwrap();
        assert_eq!(s, scorer);
    }

    #[test]
    fn co_training_updates_model_weights() {
        let (model, scorer, scales, task) = fixture();
        let mut m = model.clone();
        let mut s = scorer;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut adam = AdamState::new(&m.config);
        let batch: Vec<Episode> = {
            let mut er = ChaCha8Rng::seed_from_u64(10);
            (0..3).map(|_| task.sample_episode(&mut er)).collect()
        };
        let cfg = TrainScorerConfig {
            mode: TrainMode::CoTrain { model_lr: 1e-3 },
            ..TrainScorerConfig::default()
        };
        joint_train_step(
            &mut m,
            &mut s,
            &batch,
            task.kind,
            &scales,
            &RewardConfig::default(),
            &cfg,
            0.8,
            &mut rng,
            Some(&mut adam),
        )
        .unwrap();
        assert_ne!(m.params, model.params);
    }

    #[test]
    fn train_scorer_is_deterministic() {
        let (model, scorer, scales, task) = fixture();
        let cfg = TrainScorerConfig {
            steps: 12,
            batch_size: 2,
            log_every: 6,
            ..TrainScorerConfig::default()
        };
        let a = train_scorer(
            &model,
            &task,
            scorer.clone(),
            &scales,
            &RewardConfig::default(),
            &cfg,
        )
        .unwrap();
        let b = train_scorer(
            &model,
            &task,
            scorer,
            &scales,
            &RewardConfig::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(a.scorer, b.scorer);
        assert_eq!(a.log.len(), b.log.len());
        // tau column is monotone nonincreasing.
        let taus: Vec<f64> = a.log.iter().map(|r| r.tau).collect();
        assert!(taus.windows(2).all(|w| w[1] <= w[0]));
    }
}
