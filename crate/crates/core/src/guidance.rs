//! Identity-aware guidance over an abstract noise predictor.
//!
//! The guided prediction combines three conditionings of the same sample:
//!
//! ```text
//! eps_guided = eps(x | text, id)
//!            + w_c * [eps(x | text, id) - eps(x | -, id)]
//!            + w_i * [eps(x | text, id) - eps_weak(x | text, -)]
//! ```
//!
//! `eps_weak` comes from a degraded copy of the predictor that never sees the
//! identity and runs with some refinement passes disabled.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::testbed::{
    analytic_epsilon, ancestral_step, ConditionSet, MixtureWorld, NoisySample, TestbedError,
    TimestepSchedule,
};

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("guidance weight {name} must be finite and >= 0, got {value}")]
    Weight { name: &'static str, value: f64 },
    #[error("refinement pass {index} does not exist (denoiser has {available})")]
    InvalidSkip { index: usize, available: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Testbed(#[from] TestbedError),
}

pub type Result<T> = std::result::Result<T, GuidanceError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayMode {
    #[default]
    Constant,
    LinearToZero,
    CosineToZero,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub mode: DecayMode,
}

impl DecaySchedule {
    /// Multiplier applied to `w_i`; `progress` is 0 at the noisiest step and 1 at the last.
    pub fn multiplier(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        match self.mode {
            DecayMode::Constant => 1.0,
            DecayMode::LinearToZero => 1.0 - p,
            DecayMode::CosineToZero => 0.5 * (1.0 + (PI * p).cos()),
        }
    }
}

/// How the weak branch is degraded relative to the full predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    #[serde(default = "yes")]
    pub drop_identity: bool,
    #[serde(default)]
    pub skip_layers: BTreeSet<usize>,
    #[serde(default = "one")]
    pub temperature: f64,
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self { drop_identity: true, skip_layers: BTreeSet::new(), temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGuidanceConfig")]
pub struct GuidanceConfig {
    pub w_c: f64,
    pub w_i: f64,
    pub decay: DecaySchedule,
    pub degradation: DegradationSpec,
}

#[derive(Deserialize)]
struct RawGuidanceConfig {
    #[serde(default = "default_w_c")]
    w_c: f64,
    #[serde(default = "default_w_i")]
    w_i: f64,
    #[serde(default)]
    decay: DecaySchedule,
    #[serde(default)]
    degradation: DegradationSpec,
}

fn default_w_c() -> f64 {
    5.0
}
fn default_w_i() -> f64 {
    1.0
}

impl TryFrom<RawGuidanceConfig> for GuidanceConfig {
    type Error = GuidanceError;

    fn try_from(raw: RawGuidanceConfig) -> Result<Self> {
        let cfg = GuidanceConfig { w_c: raw.w_c, w_i: raw.w_i, decay: raw.decay, degradation: raw.degradation };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_c: default_w_c(),
            w_i: default_w_i(),
            decay: DecaySchedule::default(),
            degradation: DegradationSpec::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn new(w_c: f64, w_i: f64) -> Result<Self> {
        let cfg = Self { w_c, w_i, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_weight("w_c", self.w_c)?;
        check_weight("w_i", self.w_i)?;
        if !(self.degradation.temperature >= 1.0 && self.degradation.temperature.is_finite()) {
            return Err(GuidanceError::Parameter(format!(
                "degradation temperature must be >= 1, got {}",
                self.degradation.temperature
            )));
        }
        Ok(())
    }
}

fn check_weight(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(GuidanceError::Weight { name, value })
    }
}

fn check_len(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(GuidanceError::Dimension { expected, got: v.len() });
    }
    Ok(())
}

/// Classifier-free guidance: `cond + w_c * (cond - uncond)`.
pub fn combine_cfg(eps_cond: &[f64], eps_uncond_text: &[f64], w_c: f64) -> Result<Vec<f64>> {
    check_len(eps_cond.len(), eps_uncond_text)?;
    Ok(eps_cond
        .iter()
        .zip(eps_uncond_text)
        .map(|(c, u)| c + w_c * (c - u))
        .collect())
}

/// CFG plus the identity term `w_i * (eps_full - eps_weak)`.
///
/// With `w_i == 0` the result is exactly [`combine_cfg`]; the identity term is
/// not added at all, so signed zeros survive.
pub fn combine_identity_guidance(
    eps_full: &[f64],
    eps_no_text: &[f64],
    eps_weak: &[f64],
    w_c: f64,
    w_i_effective: f64,
) -> Result<Vec<f64>> {
    check_weight("w_c", w_c)?;
    check_weight("w_i", w_i_effective)?;
    check_len(eps_full.len(), eps_weak)?;
    let mut out = combine_cfg(eps_full, eps_no_text, w_c)?;
    if w_i_effective != 0.0 {
        for (o, (f, b)) in out.iter_mut().zip(eps_full.iter().zip(eps_weak)) {
            *o += w_i_effective * (f - b);
        }
    }
    Ok(out)
}

/// `w_i` scaled by the decay multiplier at timestep `t` of `steps`.
pub fn effective_wi(config: &GuidanceConfig, t: usize, steps: usize) -> f64 {
    let progress = if steps > 1 {
        1.0 - t.min(steps - 1) as f64 / (steps - 1) as f64
    } else {
        0.0
    };
    config.w_i * config.decay.multiplier(progress)
}

/// Knobs a caller may turn down when asking for a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PassControl {
    pub skip: BTreeSet<usize>,
    pub temperature: f64,
}

impl Default for PassControl {
    fn default() -> Self {
        Self { skip: BTreeSet::new(), temperature: 1.0 }
    }
}

/// A noise predictor `(x_t, conditions) -> eps`.
///
/// Implementations must be deterministic and must not mutate shared state; the
/// sampler calls them from several threads.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;

    /// Names of the refinement passes that a degraded copy may skip.
    fn refinement_passes(&self) -> Vec<String> {
        Vec::new()
    }

    fn predict_with(
        &self,
        sample: &NoisySample,
        cond: &ConditionSet,
        control: &PassControl,
    ) -> Result<Vec<f64>>;

    fn predict(&self, sample: &NoisySample, cond: &ConditionSet) -> Result<Vec<f64>> {
        self.predict_with(sample, cond, &PassControl::default())
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn refinement_passes(&self) -> Vec<String> {
        (**self).refinement_passes()
    }
    fn predict_with(&self, sample: &NoisySample, cond: &ConditionSet, control: &PassControl) -> Result<Vec<f64>> {
        (**self).predict_with(sample, cond, control)
    }
}

/// Exact predictor of the analytic testbed. Exposes no refinement passes;
/// temperature is its only degradation knob.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    world: MixtureWorld,
    sched: TimestepSchedule,
}

impl AnalyticDenoiser {
    pub fn new(world: MixtureWorld, sched: TimestepSchedule) -> Self {
        Self { world, sched }
    }

    pub fn world(&self) -> &MixtureWorld {
        &self.world
    }

    pub fn schedule(&self) -> &TimestepSchedule {
        &self.sched
    }
}

impl Denoiser for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn predict_with(&self, sample: &NoisySample, cond: &ConditionSet, control: &PassControl) -> Result<Vec<f64>> {
        if let Some(&index) = control.skip.iter().next() {
            return Err(GuidanceError::InvalidSkip { index, available: 0 });
        }
        Ok(analytic_epsilon(sample, cond, &self.world, &self.sched, control.temperature)?)
    }
}

/// Degraded, identity-agnostic view of a base predictor.
#[derive(Debug, Clone)]
pub struct WeakDenoiser<'a, D: Denoiser + ?Sized> {
    base: &'a D,
    spec: DegradationSpec,
}

impl<D: Denoiser + ?Sized> WeakDenoiser<'_, D> {
    pub fn spec(&self) -> &DegradationSpec {
        &self.spec
    }
}

/// Wraps `base` so that it ignores identity, skips `spec.skip_layers` and runs
/// at `spec.temperature`. `drop_identity` is forced on.
pub fn make_weak_denoiser<'a, D: Denoiser + ?Sized>(
    base: &'a D,
    spec: &DegradationSpec,
) -> Result<WeakDenoiser<'a, D>> {
    let available = base.refinement_passes().len();
    if let Some(&index) = spec.skip_layers.iter().find(|&&i| i >= available) {
        return Err(GuidanceError::InvalidSkip { index, available });
    }
    if !(spec.temperature >= 1.0 && spec.temperature.is_finite()) {
        return Err(GuidanceError::Parameter(format!(
            "degradation temperature must be >= 1, got {}",
            spec.temperature
        )));
    }
    if !spec.drop_identity {
        log::warn!("weak branch always drops the identity condition; ignoring drop_identity=false");
    }
    let mut spec = spec.clone();
    spec.drop_identity = true;
    Ok(WeakDenoiser { base, spec })
}

impl<D: Denoiser + ?Sized> Denoiser for WeakDenoiser<'_, D> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn refinement_passes(&self) -> Vec<String> {
        self.base.refinement_passes()
    }

    fn predict_with(&self, sample: &NoisySample, cond: &ConditionSet, control: &PassControl) -> Result<Vec<f64>> {
        let merged = PassControl {
            skip: self.spec.skip_layers.union(&control.skip).copied().collect(),
            temperature: self.spec.temperature * control.temperature,
        };
        self.base.predict_with(sample, &cond.without_identity(), &merged)
    }
}

/// Audit record of one sampling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub x: Vec<f64>,
    pub eps_full: Vec<f64>,
    pub eps_no_text: Vec<f64>,
    pub eps_weak: Vec<f64>,
    pub eps_guided: Vec<f64>,
    pub w_i_effective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedRun {
    pub final_x: Vec<f64>,
    pub trace: Vec<TraceStep>,
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Ancestral loop from pure noise to a clean sample.
///
/// `x_T` and every per-step noise vector are drawn from a ChaCha8 stream seeded
/// with `seed`; no noise is drawn for the final (`t = 0`) step. `eps_at` sees
/// each intermediate sample once, from the noisiest step down.
pub fn run_ancestral<F>(sched: &TimestepSchedule, dim: usize, seed: u64, mut eps_at: F) -> Result<Vec<f64>>
where
    F: FnMut(&NoisySample) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = sched.steps();
    let mut sample = NoisySample { x: normal_vec(&mut rng, dim), t: steps - 1 };
    for t in (0..steps).rev() {
        debug_assert_eq!(sample.t, t);
        let eps = eps_at(&sample)?;
        check_len(dim, &eps)?;
        let noise = if t > 0 { normal_vec(&mut rng, dim) } else { Vec::new() };
        sample = ancestral_step(&sample, &eps, sched, &noise)?;
    }
    Ok(sample.x)
}

/// Full guided sampling loop with a per-step trace of all three predictions.
pub fn guided_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &ConditionSet,
    config: &GuidanceConfig,
    sched: &TimestepSchedule,
    seed: u64,
) -> Result<GuidedRun> {
    config.validate()?;
    if cond.identity.is_none() {
        return Err(GuidanceError::Parameter("guided sampling needs an identity condition".into()));
    }
    let weak = make_weak_denoiser(denoiser, &config.degradation)?;
    let no_text = cond.without_text();
    let steps = sched.steps();
    let mut trace = Vec::with_capacity(steps);
    let final_x = run_ancestral(sched, denoiser.dim(), seed, |s| {
        let eps_full = denoiser.predict(s, cond)?;
        let eps_no_text = denoiser.predict(s, &no_text)?;
        let eps_weak = weak.predict(s, cond)?;
        let w_i = effective_wi(config, s.t, steps);
        let eps_guided = combine_identity_guidance(&eps_full, &eps_no_text, &eps_weak, config.w_c, w_i)?;
        trace.push(TraceStep {
            t: s.t,
            x: s.x.clone(),
            eps_full,
            eps_no_text,
            eps_weak,
            eps_guided: eps_guided.clone(),
            w_i_effective: w_i,
        });
        Ok(eps_guided)
    })?;
    Ok(GuidedRun { final_x, trace })
}
