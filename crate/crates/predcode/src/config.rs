//! Flat key = value run configuration: network sizing, solver schedules,
//! trainer knobs, and per-stage hyperparameters.
//!
//! Lines hold one `key = value` pair; `#` starts a comment. Unknown or
//! duplicate keys fail with the key named. Stage blocks are `stageN.*` and
//! must be contiguous from stage0. Keys that apply only under some mode
//! (schedule.r, restart.tol_scale) are rejected when the mode ignores them,
//! so a config never silently drops a setting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::learning::TrainerMode;
use crate::network::{
    alpha_default, desk_architecture, lambda_prime_default, LearnerTuning, NetworkConfig, PredNet,
    StageSpec, DEFAULT_ALPHA_PRIME, DEFAULT_ETA_PRIME, DEFAULT_MU,
};
use crate::schedule::{RestartPolicy, ScheduleKind, DEFAULT_POLY_D, DEFAULT_POLY_R, RESTART_TOL_SCALE};

/// Ridge added to covariance eigenvalues when whitening.
pub const DEFAULT_WHITEN_EPS: f64 = 1e-2;

/// One stage's sizing and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub state_channels: usize,
    pub cause_channels: usize,
    pub filter_size: usize,
    pub alpha: f64,
    pub alpha_prime: f64,
    pub lambda_prime: f64,
    pub eta_prime: f64,
    pub mu: f64,
}

impl StageConfig {
    /// Depth-dependent defaults around a given sizing.
    pub fn defaults_for(index: usize, spec: StageSpec) -> Self {
        StageConfig {
            state_channels: spec.state_channels,
            cause_channels: spec.cause_channels,
            filter_size: spec.filter_size,
            alpha: alpha_default(index),
            alpha_prime: DEFAULT_ALPHA_PRIME,
            lambda_prime: lambda_prime_default(index),
            eta_prime: DEFAULT_ETA_PRIME,
            mu: DEFAULT_MU,
        }
    }

    pub fn spec(&self) -> StageSpec {
        StageSpec {
            state_channels: self.state_channels,
            cause_channels: self.cause_channels,
            filter_size: self.filter_size,
        }
    }
}

/// Everything a batch run needs beyond the data itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input_channels: usize,
    pub network: NetworkConfig,
    pub stages: Vec<StageConfig>,
    pub tuning: LearnerTuning,
    pub whiten_eps: f64,
}

impl RunConfig {
    pub fn with_stages(specs: &[StageSpec]) -> Self {
        RunConfig {
            input_channels: 1,
            network: NetworkConfig::default(),
            stages: specs
                .iter()
                .enumerate()
                .map(|(i, s)| StageConfig::defaults_for(i, *s))
                .collect(),
            tuning: LearnerTuning::default(),
            whiten_eps: DEFAULT_WHITEN_EPS,
        }
    }

    /// Builds and validates the configured network, seeding filters from the
    /// configured seed.
    pub fn build_net(&self) -> Result<PredNet> {
        let specs: Vec<StageSpec> = self.stages.iter().map(|s| s.spec()).collect();
        let mut net =
            PredNet::seeded(&specs, self.input_channels, self.network.clone(), self.network.seed)?;
        for (stage, cfg) in net.stages.iter_mut().zip(&self.stages) {
            stage.alpha = cfg.alpha;
            stage.alpha_prime = cfg.alpha_prime;
            stage.lambda_prime = cfg.lambda_prime;
            stage.eta_prime = cfg.eta_prime;
            stage.mu = cfg.mu;
        }
        net.validate()?;
        Ok(net)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::with_stages(&desk_architecture())
    }
}

fn bad_value(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("config key `{key}`: cannot read `{value}` as {want}"))
}

struct KeyBag {
    map: BTreeMap<String, String>,
}

impl KeyBag {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => {
                let x: f64 = v.parse().map_err(|_| bad_value(key, &v, "a number"))?;
                if !x.is_finite() {
                    return Err(Error::Config(format!("config key `{key}`: value must be finite")));
                }
                Ok(x)
            }
        }
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad_value(key, &v, "a nonnegative integer")),
        }
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad_value(key, &v, "true or false")),
            },
        }
    }
}

fn require_positive(key: &str, value: usize) -> Result<usize> {
    if value == 0 {
        return Err(Error::Config(format!("config key `{key}`: must be at least 1")));
    }
    Ok(value)
}

fn require_range(key: &str, value: f64, ok: bool, want: &str) -> Result<f64> {
    if !ok {
        return Err(Error::Config(format!("config key `{key}`: must be {want}, got {value}")));
    }
    Ok(value)
}

/// Parses configuration text. Every failure names the offending key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: `{line}` is not a key = value pair",
                i + 1
            )));
        };
        let key = k.trim().to_string();
        let value = v.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate config key `{key}`")));
        }
    }
    let mut bag = KeyBag { map };

    let input_channels = require_positive("input_channels", bag.usize("input_channels", 1)?)?;
    let temporal = bag.bool("temporal", false)?;

    let kind_name = bag.take("schedule.kind").unwrap_or_else(|| "polynomial".into());
    let r_set = bag.map.contains_key("schedule.r");
    let d_set = bag.map.contains_key("schedule.d");
    let schedule = match kind_name.as_str() {
        "polynomial" => {
            let r = bag.f64("schedule.r", DEFAULT_POLY_R)?;
            let d = bag.f64("schedule.d", DEFAULT_POLY_D)?;
            require_range("schedule.r", r, r > 1.0, "greater than 1")?;
            require_range("schedule.d", d, d > 0.0, "positive")?;
            ScheduleKind::Polynomial { r, d }
        }
        "nesterov" | "plain" => {
            if r_set || d_set {
                let key = if r_set { "schedule.r" } else { "schedule.d" };
                return Err(Error::Config(format!(
                    "config key `{key}`: only applies to the polynomial schedule"
                )));
            }
            if kind_name == "nesterov" {
                ScheduleKind::Nesterov
            } else {
                ScheduleKind::Plain
            }
        }
        other => {
            return Err(bad_value("schedule.kind", other, "polynomial, nesterov, or plain"));
        }
    };

    let restart_name = bag.take("restart.mode").unwrap_or_else(|| "function_value".into());
    let tol_set = bag.map.contains_key("restart.tol_scale");
    let restart = match restart_name.as_str() {
        "function_value" => {
            let tol = bag.f64("restart.tol_scale", RESTART_TOL_SCALE)?;
            require_range("restart.tol_scale", tol, tol >= 0.0, "nonnegative")?;
            RestartPolicy::FunctionValue { tol_scale: tol }
        }
        "none" => {
            if tol_set {
                return Err(Error::Config(
                    "config key `restart.tol_scale`: only applies to the function_value restart"
                        .into(),
                ));
            }
            RestartPolicy::None
        }
        other => return Err(bad_value("restart.mode", other, "function_value or none")),
    };

    let state_iters =
        require_positive("solver.state_iters", bag.usize("solver.state_iters", 500)?)?;
    let cause_iters =
        require_positive("solver.cause_iters", bag.usize("solver.cause_iters", 1000)?)?;
    let outer_passes =
        require_positive("network.outer_passes", bag.usize("network.outer_passes", 2)?)?;

    let trainer = match bag.take("train.mode").unwrap_or_else(|| "dual_estimation".into()).as_str()
    {
        "dual_estimation" => TrainerMode::DualEstimation,
        "adam" => TrainerMode::Adam,
        other => return Err(bad_value("train.mode", other, "dual_estimation or adam")),
    };
    let batch_size = require_positive("train.batch_size", bag.usize("train.batch_size", 32)?)?;
    let epochs = require_positive("train.epochs", bag.usize("train.epochs", 2)?)?;
    let seed = match bag.take("train.seed") {
        None => 0u64,
        Some(v) => v.parse().map_err(|_| bad_value("train.seed", &v, "a nonnegative integer"))?,
    };
    let param_iters = require_positive("train.param_iters", bag.usize("train.param_iters", 1)?)?;

    let defaults = LearnerTuning::default();
    let base_lr = bag.f64("learning.base_lr", defaults.base_lr)?;
    let tuning = LearnerTuning {
        base_lr: require_range("learning.base_lr", base_lr, base_lr > 0.0, "positive")?,
        beta1: bag.f64("learning.beta1", defaults.beta1)?,
        beta2: bag.f64("learning.beta2", defaults.beta2)?,
        epsilon: bag.f64("learning.epsilon", defaults.epsilon)?,
        noise_base: bag.f64("learning.noise_base", defaults.noise_base)?,
        psi: bag.f64("learning.psi", defaults.psi)?,
        psi_prime: bag.f64("learning.psi_prime", defaults.psi_prime)?,
        psi_dprime: bag.f64("learning.psi_dprime", defaults.psi_dprime)?,
    };

    let whiten_eps = bag.f64("data.whiten_eps", DEFAULT_WHITEN_EPS)?;
    let whiten_eps = require_range("data.whiten_eps", whiten_eps, whiten_eps > 0.0, "positive")?;

    let stages = parse_stages(&mut bag)?;

    if let Some(key) = bag.map.keys().next() {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }

    let network = NetworkConfig {
        schedule,
        restart,
        state_iters,
        cause_iters,
        outer_passes,
        param_iters,
        trainer,
        batch_size,
        epochs,
        seed,
        temporal,
    };
    Ok(RunConfig { input_channels, network, stages, tuning, whiten_eps })
}

fn parse_stages(bag: &mut KeyBag) -> Result<Vec<StageConfig>> {
    let mut max_index: Option<usize> = None;
    for key in bag.map.keys() {
        if let Some(rest) = key.strip_prefix("stage") {
            if let Some((num, _)) = rest.split_once('.') {
                if let Ok(i) = num.parse::<usize>() {
                    max_index = Some(max_index.map_or(i, |m: usize| m.max(i)));
                }
            }
        }
    }
    let Some(max_index) = max_index else {
        return Err(Error::Config(
            "at least one stage block is required (stage0.states, stage0.causes)".into(),
        ));
    };
    let mut stages = Vec::with_capacity(max_index + 1);
    for i in 0..=max_index {
        let prefix = format!("stage{i}");
        let declared = bag.map.keys().any(|k| k.starts_with(&format!("{prefix}.")));
        if !declared {
            return Err(Error::Config(format!(
                "stage {i} is missing; stages must be contiguous from stage0"
            )));
        }
        let states_key = format!("{prefix}.states");
        let causes_key = format!("{prefix}.causes");
        let states = match bag.take(&states_key) {
            Some(v) => v.parse().map_err(|_| bad_value(&states_key, &v, "a positive integer"))?,
            None => return Err(Error::Config(format!("config key `{states_key}` is required"))),
        };
        let causes = match bag.take(&causes_key) {
            Some(v) => v.parse().map_err(|_| bad_value(&causes_key, &v, "a positive integer"))?,
            None => return Err(Error::Config(format!("config key `{causes_key}` is required"))),
        };
        require_positive(&states_key, states)?;
        require_positive(&causes_key, causes)?;
        let filter_key = format!("{prefix}.filter");
        let filter = require_positive(&filter_key, bag.usize(&filter_key, 5)?)?;
        if filter % 2 == 0 {
            return Err(Error::Config(format!("config key `{filter_key}`: must be odd, got {filter}")));
        }
        let spec = StageSpec { state_channels: states, cause_channels: causes, filter_size: filter };
        let mut cfg = StageConfig::defaults_for(i, spec);
        let alpha_key = format!("{prefix}.alpha");
        cfg.alpha = bag.f64(&alpha_key, cfg.alpha)?;
        require_range(&alpha_key, cfg.alpha, cfg.alpha >= 0.0, "nonnegative")?;
        let ap_key = format!("{prefix}.alpha_prime");
        cfg.alpha_prime = bag.f64(&ap_key, cfg.alpha_prime)?;
        require_range(&ap_key, cfg.alpha_prime, cfg.alpha_prime > 0.0, "positive")?;
        let lp_key = format!("{prefix}.lambda_prime");
        cfg.lambda_prime = bag.f64(&lp_key, cfg.lambda_prime)?;
        require_range(&lp_key, cfg.lambda_prime, cfg.lambda_prime >= 0.0, "nonnegative")?;
        let ep_key = format!("{prefix}.eta_prime");
        cfg.eta_prime = bag.f64(&ep_key, cfg.eta_prime)?;
        require_range(&ep_key, cfg.eta_prime, cfg.eta_prime >= 0.0, "nonnegative")?;
        let mu_key = format!("{prefix}.mu");
        cfg.mu = bag.f64(&mu_key, cfg.mu)?;
        require_range(&mu_key, cfg.mu, cfg.mu > 0.0, "positive")?;
        stages.push(cfg);
    }
    Ok(stages)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Renders a configuration with every key explicit; parse(render(c)) == c.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("input_channels = {}\n", cfg.input_channels));
    out.push_str(&format!("temporal = {}\n", cfg.network.temporal));
    match cfg.network.schedule {
        ScheduleKind::Polynomial { r, d } => {
            out.push_str("schedule.kind = polynomial\n");
            out.push_str(&format!("schedule.r = {r}\n"));
            out.push_str(&format!("schedule.d = {d}\n"));
        }
        ScheduleKind::Nesterov => out.push_str("schedule.kind = nesterov\n"),
        ScheduleKind::Plain => out.push_str("schedule.kind = plain\n"),
    }
    match cfg.network.restart {
        RestartPolicy::FunctionValue { tol_scale } => {
            out.push_str("restart.mode = function_value\n");
            out.push_str(&format!("restart.tol_scale = {tol_scale}\n"));
        }
        RestartPolicy::None => out.push_str("restart.mode = none\n"),
    }
    out.push_str(&format!("solver.state_iters = {}\n", cfg.network.state_iters));
    out.push_str(&format!("solver.cause_iters = {}\n", cfg.network.cause_iters));
    out.push_str(&format!("network.outer_passes = {}\n", cfg.network.outer_passes));
    let mode = match cfg.network.trainer {
        TrainerMode::DualEstimation => "dual_estimation",
        TrainerMode::Adam => "adam",
    };
    out.push_str(&format!("train.mode = {mode}\n"));
    out.push_str(&format!("train.batch_size = {}\n", cfg.network.batch_size));
    out.push_str(&format!("train.epochs = {}\n", cfg.network.epochs));
    out.push_str(&format!("train.seed = {}\n", cfg.network.seed));
    out.push_str(&format!("train.param_iters = {}\n", cfg.network.param_iters));
    out.push_str(&format!("learning.base_lr = {}\n", cfg.tuning.base_lr));
    out.push_str(&format!("learning.beta1 = {}\n", cfg.tuning.beta1));
    out.push_str(&format!("learning.beta2 = {}\n", cfg.tuning.beta2));
    out.push_str(&format!("learning.epsilon = {}\n", cfg.tuning.epsilon));
    out.push_str(&format!("learning.noise_base = {}\n", cfg.tuning.noise_base));
    out.push_str(&format!("learning.psi = {}\n", cfg.tuning.psi));
    out.push_str(&format!("learning.psi_prime = {}\n", cfg.tuning.psi_prime));
    out.push_str(&format!("learning.psi_dprime = {}\n", cfg.tuning.psi_dprime));
    out.push_str(&format!("data.whiten_eps = {}\n", cfg.whiten_eps));
    for (i, s) in cfg.stages.iter().enumerate() {
        out.push_str(&format!("stage{i}.states = {}\n", s.state_channels));
        out.push_str(&format!("stage{i}.causes = {}\n", s.cause_channels));
        out.push_str(&format!("stage{i}.filter = {}\n", s.filter_size));
        out.push_str(&format!("stage{i}.alpha = {}\n", s.alpha));
        out.push_str(&format!("stage{i}.alpha_prime = {}\n", s.alpha_prime));
        out.push_str(&format!("stage{i}.lambda_prime = {}\n", s.lambda_prime));
        out.push_str(&format!("stage{i}.eta_prime = {}\n", s.eta_prime));
        out.push_str(&format!("stage{i}.mu = {}\n", s.mu));
    }
    out
}
