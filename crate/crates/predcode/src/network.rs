//! Multi-stage orchestration: bottom-up state and cause inference with
//! top-down outer passes, online parameter updates over mini batches, and
//! per-epoch training metrics.
//!
//! Static wiring per outer pass: each stage sparse-codes the stage below's
//! causes (the stimulus at stage 1) under the sparsity field derived from the
//! previous pass's causes (2 alpha' at batch start), pools, then infers
//! causes anchored to the previous pass's own causes (weight eta') and to the
//! stage above's previous-pass reconstruction (weight alpha, block-coordinate
//! style). Temporal mode instead spends alpha on the state-transition term
//! and anchors causes to the closed-form top-down prediction built from the
//! previous frame.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cause::{infer_causes_with, update_sparsity, CauseProblem};
use crate::data::{epoch_batches, gather, Dataset};
use crate::error::{Error, Result};
use crate::learning::{update_dictionary, update_invariance, LearnerState, TrainerMode};
use crate::ops::conv_synthesize;
use crate::schedule::{InertialSchedule, RestartPolicy, ScheduleKind, DEFAULT_POLY_D, DEFAULT_POLY_R};
use crate::solver::{SolverOptions, SolverReport};
use crate::state::{infer_states_with, SparsityField, StateProblem};
use crate::tensor::{FilterBank, PoolIndex, Tensor4};
use crate::topdown::{predict_topdown, TransitionMatrix};

/// Filter norms must sit this close to one; wide enough to absorb a 32-bit
/// round trip through a checkpoint, tight enough to catch a missed
/// renormalization.
pub const UNIT_NORM_TOL: f64 = 1e-4;

pub const DEFAULT_STATE_ITERS: usize = 500;
pub const DEFAULT_CAUSE_ITERS: usize = 1000;
pub const DEFAULT_OUTER_PASSES: usize = 2;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_ALPHA_PRIME: f64 = 1.0;
/// Weight of the quadratic anchor tying causes to the top-down prediction.
pub const DEFAULT_ETA_PRIME: f64 = 0.1;
/// Huber width of the smoothed temporal term in the state objective.
pub const DEFAULT_MU: f64 = 0.05;

/// Per-depth default for the cause L1 weight; depths past the third keep the
/// deepest value.
pub fn lambda_prime_default(stage: usize) -> f64 {
    [0.2, 0.25, 0.35][stage.min(2)]
}

/// Per-depth default feedback strength: 1 for the first two stages, 3 deeper.
pub fn alpha_default(stage: usize) -> f64 {
    if stage >= 2 {
        3.0
    } else {
        1.0
    }
}

/// One stage's parameter set.
#[derive(Debug, Clone)]
pub struct StageParameters {
    /// Synthesis dictionary: state_channels filters over the input channels.
    pub dictionary: FilterBank,
    /// State-transition mixing, temporal mode only.
    pub transition: Option<TransitionMatrix>,
    /// Cause-to-pooled-state bank: cause_channels filters over state channels.
    pub invariance: FilterBank,
    /// Feedback strength: transition weight in temporal mode, inter-stage
    /// coupling weight in static mode.
    pub alpha: f64,
    pub alpha_prime: f64,
    pub lambda_prime: f64,
    pub eta_prime: f64,
    pub mu: f64,
}

impl StageParameters {
    pub fn state_channels(&self) -> usize {
        self.dictionary.q
    }

    pub fn cause_channels(&self) -> usize {
        self.invariance.q
    }

    pub fn input_channels(&self) -> usize {
        self.dictionary.c
    }

    pub fn filter_size(&self) -> usize {
        self.dictionary.f
    }

    pub fn validate(&self) -> Result<()> {
        if self.invariance.c != self.dictionary.q {
            return Err(Error::Shape(format!(
                "invariance bank feeds {} state channels but the dictionary holds {}",
                self.invariance.c, self.dictionary.q
            )));
        }
        if let Some(c) = &self.transition {
            if c.channels() != self.dictionary.q {
                return Err(Error::Shape(format!(
                    "transition mixes {} channels but the stage has {} states",
                    c.channels(),
                    self.dictionary.q
                )));
            }
        }
        for (label, bank) in [("dictionary", &self.dictionary), ("invariance", &self.invariance)] {
            for (j, norm) in bank.filter_norms().iter().enumerate() {
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Config(format!(
                        "{label} filter {j} has norm {norm}, expected unit norm"
                    )));
                }
            }
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Argument(format!("feedback weight must be nonnegative, got {}", self.alpha)));
        }
        if !(self.alpha_prime > 0.0) || !self.alpha_prime.is_finite() {
            return Err(Error::Argument(format!(
                "cause sparsity scale must be positive, got {}",
                self.alpha_prime
            )));
        }
        if !(self.lambda_prime >= 0.0) || !self.lambda_prime.is_finite() {
            return Err(Error::Argument(format!(
                "cause L1 weight must be nonnegative, got {}",
                self.lambda_prime
            )));
        }
        if !(self.eta_prime >= 0.0) || !self.eta_prime.is_finite() {
            return Err(Error::Argument(format!(
                "top-down weight must be nonnegative, got {}",
                self.eta_prime
            )));
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::Argument(format!("smoothing width must be positive, got {}", self.mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub schedule: ScheduleKind,
    pub restart: RestartPolicy,
    pub state_iters: usize,
    pub cause_iters: usize,
    /// Top-down outer iterations per batch.
    pub outer_passes: usize,
    /// Parameter-update iterations per batch on the stabilized codes.
    pub param_iters: usize,
    pub trainer: TrainerMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub temporal: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            schedule: ScheduleKind::Polynomial { r: DEFAULT_POLY_R, d: DEFAULT_POLY_D },
            restart: RestartPolicy::function_value(),
            state_iters: DEFAULT_STATE_ITERS,
            cause_iters: DEFAULT_CAUSE_ITERS,
            outer_passes: DEFAULT_OUTER_PASSES,
            param_iters: 1,
            trainer: TrainerMode::DualEstimation,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 2,
            seed: 0,
            temporal: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.outer_passes == 0 {
            return Err(Error::Config("at least one top-down outer pass is required".into()));
        }
        if self.param_iters == 0 {
            return Err(Error::Config("at least one parameter iteration per batch is required".into()));
        }
        if self.state_iters == 0 || self.cause_iters == 0 {
            return Err(Error::Config("solver iteration caps must be at least 1".into()));
        }
        InertialSchedule::new(self.schedule)?;
        Ok(())
    }
}

/// Shape request for one seeded stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub state_channels: usize,
    pub cause_channels: usize,
    pub filter_size: usize,
}

/// Two-stage sizing for desk-scale runs.
pub fn desk_architecture() -> Vec<StageSpec> {
    vec![
        StageSpec { state_channels: 32, cause_channels: 64, filter_size: 5 },
        StageSpec { state_channels: 64, cause_channels: 128, filter_size: 5 },
    ]
}

/// Three-stage sizing used for the full image benchmarks.
pub fn full_architecture() -> Vec<StageSpec> {
    vec![
        StageSpec { state_channels: 128, cause_channels: 256, filter_size: 5 },
        StageSpec { state_channels: 128, cause_channels: 512, filter_size: 5 },
        StageSpec { state_channels: 256, cause_channels: 1024, filter_size: 5 },
    ]
}

#[derive(Debug, Clone)]
pub struct PredNet {
    pub stages: Vec<StageParameters>,
    pub config: NetworkConfig,
}

impl PredNet {
    pub fn new(stages: Vec<StageParameters>, config: NetworkConfig) -> Result<Self> {
        let net = PredNet { stages, config };
        net.validate()?;
        Ok(net)
    }

    /// Fresh net with unit-norm Gaussian filters. Every parameter is rounded
    /// through 32-bit floats so a checkpoint round trip is bit-exact.
    pub fn seeded(
        specs: &[StageSpec],
        input_channels: usize,
        config: NetworkConfig,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        if specs.is_empty() {
            return Err(Error::Config("a network needs at least one stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if spec.filter_size == 0 || spec.filter_size % 2 == 0 {
                return Err(Error::Config(format!(
                    "stage {i} filter size must be odd, got {}",
                    spec.filter_size
                )));
            }
            if spec.state_channels == 0 || spec.cause_channels == 0 {
                return Err(Error::Config(format!("stage {i} channel counts must be positive")));
            }
            let c_in = if i == 0 { input_channels } else { specs[i - 1].cause_channels };
            let dictionary = seeded_bank(spec.state_channels, c_in, spec.filter_size, &mut rng)?;
            let invariance =
                seeded_bank(spec.cause_channels, spec.state_channels, spec.filter_size, &mut rng)?;
            let transition = if config.temporal {
                Some(TransitionMatrix::identity(spec.state_channels)?)
            } else {
                None
            };
            stages.push(StageParameters {
                dictionary,
                transition,
                invariance,
                alpha: alpha_default(i),
                alpha_prime: DEFAULT_ALPHA_PRIME,
                lambda_prime: lambda_prime_default(i),
                eta_prime: DEFAULT_ETA_PRIME,
                mu: DEFAULT_MU,
            });
        }
        PredNet::new(stages, config)
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("a network needs at least one stage".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            stage
                .validate()
                .map_err(|e| Error::Config(format!("stage {i}: {e}")))?;
            if i > 0 {
                let expect = self.stages[i - 1].cause_channels();
                if stage.input_channels() != expect {
                    return Err(Error::Config(format!(
                        "stage {i} consumes {} channels but stage {} emits {} causes",
                        stage.input_channels(),
                        i - 1,
                        expect
                    )));
                }
            }
            if self.config.temporal && stage.transition.is_none() {
                return Err(Error::Config(format!(
                    "temporal mode needs a transition matrix at stage {i}"
                )));
            }
        }
        Ok(())
    }

    /// Order-stable digest of every parameter's bit pattern; inference must
    /// leave it unchanged.
    pub fn param_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.stages.len().hash(&mut h);
        for stage in &self.stages {
            for bank in [&stage.dictionary, &stage.invariance] {
                bank.q.hash(&mut h);
                bank.c.hash(&mut h);
                bank.f.hash(&mut h);
                for w in bank.weights() {
                    w.to_bits().hash(&mut h);
                }
            }
            match &stage.transition {
                Some(c) => {
                    c.channels().hash(&mut h);
                    for w in c.weights() {
                        w.to_bits().hash(&mut h);
                    }
                }
                None => 0usize.hash(&mut h),
            }
            for v in [stage.alpha, stage.alpha_prime, stage.lambda_prime, stage.eta_prime, stage.mu]
            {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn seeded_bank(q: usize, c: usize, f: usize, rng: &mut ChaCha8Rng) -> Result<FilterBank> {
    let weights = (0..q * c * f * f).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut bank = FilterBank::new(q, c, f, weights)?;
    bank.normalize_filters();
    round_through_f32(bank.weights_mut());
    Ok(bank)
}

/// Clamp every value to its nearest 32-bit float, the checkpoint precision.
pub fn round_through_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// One stage's tensors after the final outer pass.
#[derive(Debug, Clone)]
pub struct StagePass {
    /// What this stage reconstructed: the batch at stage 0, else the stage
    /// below's causes from the same pass.
    pub input: Tensor4,
    /// States at full resolution.
    pub pre_pool: Tensor4,
    pub pooled: Tensor4,
    pub pool_index: PoolIndex,
    pub causes: Tensor4,
    /// input - synthesize(dictionary, pre_pool).
    pub residual: Tensor4,
    /// Sparsity field derived from the final causes, at state resolution.
    pub sparsity: SparsityField,
    pub state_report: SolverReport,
    pub cause_report: SolverReport,
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub stages: Vec<StagePass>,
    pub passes: usize,
}

/// Static-mode inference over one batch; also serves as the first frame of a
/// temporal run (no previous-frame context exists yet).
pub fn forward_infer(net: &PredNet, batch: &Tensor4) -> Result<InferenceResult> {
    infer_impl(net, batch, None)
}

/// Temporal inference: the previous frame's result supplies the transition
/// anchors and the top-down prediction context.
pub fn forward_infer_temporal(
    net: &PredNet,
    batch: &Tensor4,
    prev_frame: Option<&InferenceResult>,
) -> Result<InferenceResult> {
    if !net.config.temporal {
        return Err(Error::Config("temporal inference needs a temporal-mode configuration".into()));
    }
    infer_impl(net, batch, prev_frame)
}

fn uniform_field(n: usize, q: usize, h: usize, w: usize, value: f64) -> Tensor4 {
    let mut t = Tensor4::zeros(n, q, h, w);
    t.fill(value);
    t
}

fn infer_impl(
    net: &PredNet,
    batch: &Tensor4,
    prev_frame: Option<&InferenceResult>,
) -> Result<InferenceResult> {
    net.validate()?;
    if batch.c != net.stages[0].input_channels() {
        return Err(Error::Shape(format!(
            "batch has {} channels but stage 0 consumes {}",
            batch.c,
            net.stages[0].input_channels()
        )));
    }
    if let Some(prev) = prev_frame {
        if prev.stages.len() != net.depth() {
            return Err(Error::Shape(format!(
                "previous frame has {} stages but the net has {}",
                prev.stages.len(),
                net.depth()
            )));
        }
    }
    let depth = net.depth();
    let temporal = net.config.temporal;
    let mut prev_pass: Option<Vec<StagePass>> = None;
    for _ in 0..net.config.outer_passes {
        let mut current: Vec<StagePass> = Vec::with_capacity(depth);
        for i in 0..depth {
            let stage = &net.stages[i];
            let input = if i == 0 { batch.clone() } else { current[i - 1].causes.clone() };
            let (n, q, h, w) = (input.n, stage.state_channels(), input.h, input.w);
            let sparsity = match prev_pass.as_ref() {
                Some(p) => p[i].sparsity.clone(),
                None => uniform_field(n, q, h, w, 2.0 * stage.alpha_prime),
            };
            let mut sp = StateProblem::new(input.clone(), stage.dictionary.clone(), sparsity, stage.mu)?;
            if temporal {
                if let Some(prev) = prev_frame {
                    let c = stage.transition.as_ref().expect("validated temporal stage");
                    sp = sp.with_temporal(c.clone(), prev.stages[i].pre_pool.clone(), stage.alpha)?;
                }
            }
            let mut state_sched = InertialSchedule::new(net.config.schedule)?;
            let state_opts = SolverOptions::with_max_iters(net.config.state_iters);
            let warm_states = prev_pass.as_ref().map(|p| p[i].pre_pool.clone());
            let (pooled, pool_index, mut state_report) =
                infer_states_with(&sp, &mut state_sched, net.config.restart, &state_opts, warm_states)?;
            let pre_pool = state_report.pre_pool.take().expect("state solver returns its iterate");

            let cause_shape = (n, stage.cause_channels(), pooled.h, pooled.w);
            let topdown_anchor = match (temporal, prev_frame, prev_pass.as_ref()) {
                // Temporal: closed-form prediction assembled by the stage
                // above from the previous frame's states and the previous
                // pass's causes.
                (true, Some(frame), Some(p)) if i + 1 < depth => predict_topdown(
                    &net.stages[i + 1].dictionary,
                    &net.stages[i + 1].invariance,
                    net.stages[i + 1].transition.as_ref().expect("validated temporal stage"),
                    &frame.stages[i + 1].pre_pool,
                    &p[i + 1].causes,
                    &p[i + 1].pool_index,
                    net.stages[i + 1].alpha,
                    net.stages[i + 1].alpha_prime,
                )?,
                // Static: anchor to this stage's own causes from the previous
                // pass; zero on the first pass.
                (_, _, Some(p)) if !temporal => p[i].causes.clone(),
                _ => Tensor4::zeros(cause_shape.0, cause_shape.1, cause_shape.2, cause_shape.3),
            };
            let mut cp = CauseProblem::new(
                pooled.clone(),
                stage.invariance.clone(),
                topdown_anchor,
                stage.alpha_prime,
                stage.lambda_prime,
                stage.eta_prime,
            )?;
            if !temporal && i + 1 < depth {
                if let Some(p) = prev_pass.as_ref() {
                    let recon = conv_synthesize(&net.stages[i + 1].dictionary, &p[i + 1].pre_pool)?;
                    cp = cp.with_interstage(recon, stage.alpha)?;
                }
            }
            let mut cause_sched = InertialSchedule::new(net.config.schedule)?;
            let cause_opts = SolverOptions::with_max_iters(net.config.cause_iters);
            let warm_causes = prev_pass.as_ref().map(|p| p[i].causes.clone());
            let (causes, cause_report) =
                infer_causes_with(&cp, &mut cause_sched, net.config.restart, &cause_opts, warm_causes)?;
            let sparsity_next = update_sparsity(&stage.invariance, &causes, stage.alpha_prime, &pool_index)?;

            let mut residual = conv_synthesize(&stage.dictionary, &pre_pool)?;
            residual.scale(-1.0);
            residual.add_scaled(1.0, &input);

            current.push(StagePass {
                input,
                pre_pool,
                pooled,
                pool_index,
                causes,
                residual,
                sparsity: sparsity_next,
                state_report,
                cause_report,
            });
        }
        prev_pass = Some(current);
    }
    Ok(InferenceResult {
        stages: prev_pass.expect("at least one outer pass"),
        passes: net.config.outer_passes,
    })
}

/// Batch-mean reconstruction error as a percentage: per sample,
/// 100 * ||residual_i||^2 / ||input_i||^2.
///
/// Samples with zero input energy carry no evidence about reconstruction
/// quality and are skipped; a batch with no energetic samples scores 0.
/// Zero inputs are routine above the first stage, where the input is the
/// previous stage's sparse cause tensor and the solver may zero a sample
/// outright early in training.
pub fn mse_percentage(input: &Tensor4, residual: &Tensor4) -> Result<f64> {
    let (total, counted) = mse_components(input, residual)?;
    if counted == 0 {
        return Ok(0.0);
    }
    Ok(total / counted as f64)
}

/// Sum of per-sample error percentages plus the number of energetic
/// samples, so callers averaging across batches can weight by sample.
fn mse_components(input: &Tensor4, residual: &Tensor4) -> Result<(f64, usize)> {
    if !input.same_shape(residual) {
        return Err(Error::Shape("residual shape does not match the input".into()));
    }
    let per_sample = input.c * input.h * input.w;
    let mut total = 0.0;
    let mut counted = 0usize;
    for s in 0..input.n {
        let xs = &input.data()[s * per_sample..(s + 1) * per_sample];
        let rs = &residual.data()[s * per_sample..(s + 1) * per_sample];
        let energy: f64 = xs.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            continue;
        }
        let res: f64 = rs.iter().map(|v| v * v).sum();
        total += 100.0 * res / energy;
        counted += 1;
    }
    Ok((total, counted))
}

/// Per-epoch training metrics, one entry per stage where applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean reconstruction MSE percentage over the epoch's energetic
    /// samples (samples whose stage input carries nonzero energy).
    pub recon_mse: Vec<f64>,
    /// Mean fraction of nonzero state coefficients.
    pub state_sparsity: Vec<f64>,
    pub state_iterations: Vec<f64>,
    pub cause_iterations: Vec<f64>,
}

/// Renders a metrics history as CSV, one row per epoch and stage.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,stage,recon_mse,state_sparsity,state_iters,cause_iters\n");
    for m in history {
        for s in 0..m.recon_mse.len() {
            out.push_str(&format!(
                "{},{},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                m.epoch,
                s,
                m.recon_mse[s],
                m.state_sparsity[s],
                m.state_iterations[s],
                m.cause_iterations[s]
            ));
        }
    }
    out
}

fn stamp(e: Error, epoch: usize, batch: usize, stage: Option<usize>) -> Error {
    let ctx = match stage {
        Some(s) => format!("epoch {epoch}, batch {batch}, stage {s}"),
        None => format!("epoch {epoch}, batch {batch}"),
    };
    match e {
        Error::Shape(m) => Error::Shape(format!("{ctx}: {m}")),
        Error::Argument(m) => Error::Argument(format!("{ctx}: {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{ctx}: {m}")),
        Error::Corrupt(m) => Error::Corrupt(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
        Error::Unsupported(m) => Error::Unsupported(format!("{ctx}: {m}")),
        Error::Io(e) => Error::Io(e),
    }
}

/// Learning-rate and averaging knobs forwarded to the trainer's state; the
/// defaults mirror a freshly constructed state.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerTuning {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub noise_base: f64,
    pub psi: f64,
    pub psi_prime: f64,
    pub psi_dprime: f64,
}

impl Default for LearnerTuning {
    fn default() -> Self {
        let ls = LearnerState::new(TrainerMode::DualEstimation, 0);
        LearnerTuning {
            base_lr: ls.base_lr,
            beta1: ls.beta1,
            beta2: ls.beta2,
            epsilon: ls.epsilon,
            noise_base: ls.noise_base,
            psi: ls.psi,
            psi_prime: ls.psi_prime,
            psi_dprime: ls.psi_dprime,
        }
    }
}

impl LearnerTuning {
    fn apply(&self, ls: &mut LearnerState) {
        ls.base_lr = self.base_lr;
        ls.beta1 = self.beta1;
        ls.beta2 = self.beta2;
        ls.epsilon = self.epsilon;
        ls.noise_base = self.noise_base;
        ls.psi = self.psi;
        ls.psi_prime = self.psi_prime;
        ls.psi_dprime = self.psi_dprime;
    }
}

/// Mini-batch training: forward inference then dictionary and invariance
/// updates per stage, with per-epoch metric summaries. Deterministic for a
/// fixed seed. The dataset is expected to be whitened already.
pub fn train(net: &mut PredNet, data: &Dataset, epochs: usize) -> Result<Vec<EpochMetrics>> {
    train_tuned(net, data, epochs, &LearnerTuning::default())
}

/// `train` with explicit trainer knobs.
pub fn train_tuned(
    net: &mut PredNet,
    data: &Dataset,
    epochs: usize,
    tuning: &LearnerTuning,
) -> Result<Vec<EpochMetrics>> {
    use rand::SeedableRng;
    net.validate()?;
    if net.config.temporal {
        return Err(Error::Unsupported(
            "temporal training consumes ordered frame sequences; this trainer shuffles static batches"
                .into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::Argument("training needs a non-empty dataset".into()));
    }
    let depth = net.depth();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(net.config.seed);
    let mut learner = LearnerState::new(net.config.trainer, net.config.seed.wrapping_add(1));
    tuning.apply(&mut learner);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        learner.epoch = epoch as u32;
        let batches = epoch_batches(data.len(), net.config.batch_size, &mut batch_rng)?;
        let mut mse_sum = vec![0.0; depth];
        let mut mse_count = vec![0usize; depth];
        let mut sparsity = vec![0.0; depth];
        let mut state_iters = vec![0.0; depth];
        let mut cause_iters = vec![0.0; depth];
        for (bi, ids) in batches.iter().enumerate() {
            let batch = gather(&data.images, ids)?;
            let result = forward_infer(net, &batch).map_err(|e| stamp(e, epoch, bi, None))?;
            for i in 0..depth {
                let pass = &result.stages[i];
                let (sum, count) = mse_components(&pass.input, &pass.residual)
                    .map_err(|e| stamp(e, epoch, bi, Some(i)))?;
                mse_sum[i] += sum;
                mse_count[i] += count;
                sparsity[i] += pass.state_report.final_sparsity;
                state_iters[i] += pass.state_report.iterations as f64;
                cause_iters[i] += pass.cause_report.iterations as f64;
                for _ in 0..net.config.param_iters {
                    net.stages[i].dictionary = update_dictionary(
                        &net.stages[i].dictionary,
                        &pass.input,
                        &pass.pre_pool,
                        &mut learner,
                        &format!("stage{i}.dictionary"),
                    )
                    .map_err(|e| stamp(e, epoch, bi, Some(i)))?;
                    net.stages[i].invariance = update_invariance(
                        &net.stages[i].invariance,
                        &pass.causes,
                        &pass.pooled,
                        &mut learner,
                        &format!("stage{i}.invariance"),
                    )
                    .map_err(|e| stamp(e, epoch, bi, Some(i)))?;
                }
            }
            learner.advance_batch();
        }
        let nb = batches.len() as f64;
        for acc in [&mut sparsity, &mut state_iters, &mut cause_iters] {
            for v in acc.iter_mut() {
                *v /= nb;
            }
        }
        let recon_mse = mse_sum
            .iter()
            .zip(&mse_count)
            .map(|(s, c)| if *c == 0 { 0.0 } else { s / *c as f64 })
            .collect();
        history.push(EpochMetrics {
            epoch,
            recon_mse,
            state_sparsity: sparsity,
            state_iterations: state_iters,
            cause_iterations: cause_iters,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            state_iters: 40,
            cause_iters: 40,
            outer_passes: 2,
            batch_size: 4,
            trainer: TrainerMode::Adam,
            ..NetworkConfig::default()
        }
    }

    fn tiny_net(depth: usize, seed: u64, config: NetworkConfig) -> PredNet {
        let specs: Vec<StageSpec> = (0..depth)
            .map(|_| StageSpec { state_channels: 2, cause_channels: 2, filter_size: 3 })
            .collect();
        PredNet::seeded(&specs, 1, config, seed).unwrap()
    }

    fn random_batch(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn zero_batch_infers_zero_everywhere() {
        let net = tiny_net(2, 3, tiny_config());
        let batch = Tensor4::zeros(2, 1, 8, 8);
        let out = forward_infer(&net, &batch).unwrap();
        for (i, pass) in out.stages.iter().enumerate() {
            assert!(pass.pre_pool.data().iter().all(|v| *v == 0.0), "stage {i} states");
            assert!(pass.causes.data().iter().all(|v| *v == 0.0), "stage {i} causes");
        }
    }

    #[test]
    fn one_stage_net_replays_the_standalone_solvers() {
        let config = NetworkConfig { outer_passes: 1, ..tiny_config() };
        let net = tiny_net(1, 7, config);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(2, 1, 6, 6, &mut rng);
        let out = forward_infer(&net, &batch).unwrap();

        let stage = &net.stages[0];
        let field = uniform_field(2, 2, 6, 6, 2.0 * stage.alpha_prime);
        let sp = StateProblem::new(batch.clone(), stage.dictionary.clone(), field, stage.mu).unwrap();
        let mut sched = InertialSchedule::new(net.config.schedule).unwrap();
        let opts = SolverOptions::with_max_iters(net.config.state_iters);
        let (pooled, idx, report) =
            infer_states_with(&sp, &mut sched, net.config.restart, &opts, None).unwrap();
        assert_eq!(out.stages[0].pooled.data(), pooled.data());
        assert_eq!(out.stages[0].pool_index.codes(), idx.codes());
        assert_eq!(out.stages[0].pre_pool.data(), report.pre_pool.as_ref().unwrap().data());

        let anchor = Tensor4::zeros(2, 2, 3, 3);
        let cp = CauseProblem::new(
            pooled,
            stage.invariance.clone(),
            anchor,
            stage.alpha_prime,
            stage.lambda_prime,
            stage.eta_prime,
        )
        .unwrap();
        let mut csched = InertialSchedule::new(net.config.schedule).unwrap();
        let copts = SolverOptions::with_max_iters(net.config.cause_iters);
        let (causes, _) =
            infer_causes_with(&cp, &mut csched, net.config.restart, &copts, None).unwrap();
        assert_eq!(out.stages[0].causes.data(), causes.data());
    }

    #[test]
    fn stage_two_consumes_stage_one_causes_bit_for_bit() {
        let net = tiny_net(3, 11, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(2, 1, 8, 8, &mut rng);
        let out = forward_infer(&net, &batch).unwrap();
        assert_eq!(out.stages[1].input.data(), out.stages[0].causes.data());
        assert_eq!(out.stages[2].input.data(), out.stages[1].causes.data());
    }

    #[test]
    fn inference_never_touches_the_parameters() {
        let net = tiny_net(2, 5, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(2, 1, 8, 8, &mut rng);
        let before = net.param_hash();
        forward_infer(&net, &batch).unwrap();
        assert_eq!(net.param_hash(), before);
    }

    #[test]
    fn training_does_change_the_parameters() {
        let mut net = tiny_net(1, 5, NetworkConfig { epochs: 1, ..tiny_config() });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images = random_batch(8, 1, 6, 6, &mut rng);
        let data = Dataset::new(images, None).unwrap();
        let before = net.param_hash();
        train(&mut net, &data, 1).unwrap();
        assert_ne!(net.param_hash(), before);
    }

    #[test]
    fn reported_residual_matches_external_recomputation() {
        let net = tiny_net(2, 13, tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(2, 1, 8, 8, &mut rng);
        let out = forward_infer(&net, &batch).unwrap();
        for (i, pass) in out.stages.iter().enumerate() {
            let synth = conv_synthesize(&net.stages[i].dictionary, &pass.pre_pool).unwrap();
            let max_diff = pass
                .residual
                .data()
                .iter()
                .zip(pass.input.data().iter().zip(synth.data()))
                .map(|(r, (x, s))| (r - (x - s)).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1e-10, "stage {i} residual off by {max_diff}");
        }
    }

    #[test]
    fn identical_images_drive_stage_one_mse_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let one = random_batch(1, 1, 6, 6, &mut rng);
        let mut images = Tensor4::zeros(12, 1, 6, 6);
        for s in 0..12 {
            images.plane_mut(s, 0).copy_from_slice(one.plane(0, 0));
        }
        let data = Dataset::new(images, None).unwrap();
        let config = NetworkConfig {
            outer_passes: 1,
            batch_size: 4,
            state_iters: 60,
            cause_iters: 60,
            trainer: TrainerMode::Adam,
            ..NetworkConfig::default()
        };
        let specs = [StageSpec { state_channels: 4, cause_channels: 4, filter_size: 3 }];
        let mut net = PredNet::seeded(&specs, 1, config, 9).unwrap();
        // A gentler sparsity scale keeps the states active on this stimulus.
        net.stages[0].alpha_prime = 0.3;
        let history = train(&mut net, &data, 2).unwrap();
        assert!(
            history[1].recon_mse[0] < history[0].recon_mse[0],
            "epoch MSE did not fall: {} -> {}",
            history[0].recon_mse[0],
            history[1].recon_mse[0]
        );
    }

    #[test]
    fn seed_fixed_training_is_deterministic() {
        let config = NetworkConfig {
            outer_passes: 1,
            batch_size: 4,
            state_iters: 25,
            cause_iters: 25,
            trainer: TrainerMode::DualEstimation,
            seed: 17,
            ..NetworkConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let images = random_batch(8, 1, 6, 6, &mut rng);
        let data = Dataset::new(images, None).unwrap();
        let specs = [StageSpec { state_channels: 2, cause_channels: 2, filter_size: 3 }];
        let mut net_a = PredNet::seeded(&specs, 1, config.clone(), 21).unwrap();
        let mut net_b = PredNet::seeded(&specs, 1, config, 21).unwrap();
        let hist_a = train(&mut net_a, &data, 2).unwrap();
        let hist_b = train(&mut net_b, &data, 2).unwrap();
        assert_eq!(hist_a, hist_b);
        assert_eq!(metrics_csv(&hist_a), metrics_csv(&hist_b));
        assert_eq!(net_a.param_hash(), net_b.param_hash());
    }

    #[test]
    fn huge_sparsity_scale_zeroes_the_codes() {
        let mut net = tiny_net(1, 15, NetworkConfig { outer_passes: 1, ..tiny_config() });
        net.stages[0].alpha_prime = 1e8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = random_batch(3, 1, 6, 6, &mut rng);
        let out = forward_infer(&net, &batch).unwrap();
        assert!(out.stages[0].pre_pool.data().iter().all(|v| *v == 0.0));
        assert!(out.stages[0].causes.data().iter().all(|v| *v == 0.0));
        let data = Dataset::new(batch, None).unwrap();
        let history = train(&mut net, &data, 1).unwrap();
        assert!((history[0].recon_mse[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn config_mismatches_fail_before_any_compute() {
        let good = tiny_net(2, 19, tiny_config());
        // Break adjacency: stage 1 consuming 3 channels after a 2-cause stage.
        let mut bad = good.clone();
        bad.stages[1].dictionary = seeded_bank(2, 3, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let batch = Tensor4::zeros(1, 1, 8, 8);
        assert!(matches!(forward_infer(&bad, &batch), Err(Error::Config(_))));
        // Temporal mode without transitions.
        let mut temporal = good.clone();
        temporal.config.temporal = true;
        assert!(matches!(forward_infer_temporal(&temporal, &batch, None), Err(Error::Config(_))));
        // Non-unit filter norms.
        let mut unnormalized = good;
        unnormalized.stages[0].dictionary.weights_mut()[0] += 0.5;
        assert!(matches!(forward_infer(&unnormalized, &batch), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_mode_pulls_states_toward_the_previous_frame() {
        let config = NetworkConfig { temporal: true, outer_passes: 2, ..tiny_config() };
        let specs = [
            StageSpec { state_channels: 2, cause_channels: 2, filter_size: 3 },
            StageSpec { state_channels: 2, cause_channels: 2, filter_size: 3 },
        ];
        let net = PredNet::seeded(&specs, 1, config, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frame1 = random_batch(1, 1, 8, 8, &mut rng);
        let frame2 = random_batch(1, 1, 8, 8, &mut rng);
        let first = forward_infer_temporal(&net, &frame1, None).unwrap();
        let with_context = forward_infer_temporal(&net, &frame2, Some(&first)).unwrap();
        // Against the same batch with no context, the transition term changes
        // the solution.
        let without_context = forward_infer_temporal(&net, &frame2, None).unwrap();
        assert_ne!(with_context.stages[0].pre_pool.data(), without_context.stages[0].pre_pool.data());
        let before = net.param_hash();
        forward_infer_temporal(&net, &frame2, Some(&first)).unwrap();
        assert_eq!(net.param_hash(), before);
    }

    #[test]
    fn seeded_nets_are_reproducible() {
        let a = tiny_net(2, 31, tiny_config());
        let b = tiny_net(2, 31, tiny_config());
        let c = tiny_net(2, 32, tiny_config());
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
        for stage in &a.stages {
            for norm in stage.dictionary.filter_norms() {
                assert!((norm - 1.0).abs() <= UNIT_NORM_TOL);
            }
            for w in stage.dictionary.weights() {
                assert_eq!(*w, *w as f32 as f64, "weights must sit on the f32 grid");
            }
        }
    }

    #[test]
    fn mse_percentage_skips_zero_energy_samples() {
        // An all-zero batch has nothing to explain and scores 0.
        let input = Tensor4::zeros(1, 1, 2, 2);
        let residual = Tensor4::zeros(1, 1, 2, 2);
        assert_eq!(mse_percentage(&input, &residual).unwrap(), 0.0);

        // A zero-energy sample drops out of the average instead of
        // poisoning it: only the energetic sample counts.
        let input =
            Tensor4::from_vec(2, 1, 1, 2, vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let residual =
            Tensor4::from_vec(2, 1, 1, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(mse_percentage(&input, &residual).unwrap(), 25.0);
    }
}
