//! Analytic conditional diffusion over isotropic Gaussian mixtures.
//!
//! Every component of the mixture stays Gaussian under the variance-preserving
//! forward process, so the noised conditional density and its score are known
//! in closed form. The exact noise predictor is `eps*(x_t) = -sigma_t * grad log p_t(x_t | cond)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TestbedError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("condition error: {0}")]
    Condition(String),
}

pub type Result<T> = std::result::Result<T, TestbedError>;

/// One mixture component, tagged with the text class and identity it represents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub text_class: String,
    pub identity: String,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Optional text / identity labels. `None` is the null condition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionSet {
    #[serde(default)]
    pub text_class: Option<String>,
    #[serde(default)]
    pub identity: Option<String>,
}

impl ConditionSet {
    pub fn new(text_class: Option<&str>, identity: Option<&str>) -> Self {
        Self {
            text_class: text_class.map(str::to_owned),
            identity: identity.map(str::to_owned),
        }
    }

    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn without_identity(&self) -> Self {
        Self { text_class: self.text_class.clone(), identity: None }
    }

    pub fn without_text(&self) -> Self {
        Self { text_class: None, identity: self.identity.clone() }
    }

    fn admits(&self, mode: &Mode) -> bool {
        self.text_class.as_deref().is_none_or(|t| t == mode.text_class)
            && self.identity.as_deref().is_none_or(|i| i == mode.identity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureWorld {
    dim: usize,
    modes: Vec<Mode>,
    prior: Vec<f64>,
}

#[derive(Deserialize)]
struct RawWorld {
    dim: usize,
    modes: Vec<Mode>,
    prior: Vec<f64>,
}

impl<'de> Deserialize<'de> for MixtureWorld {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawWorld::deserialize(d)?;
        MixtureWorld::new(raw.dim, raw.modes, raw.prior).map_err(serde::de::Error::custom)
    }
}

impl MixtureWorld {
    pub fn new(dim: usize, modes: Vec<Mode>, prior: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(TestbedError::Parameter("dim must be positive".into()));
        }
        if modes.is_empty() {
            return Err(TestbedError::Parameter("world needs at least one mode".into()));
        }
        if prior.len() != modes.len() {
            return Err(TestbedError::Parameter(format!(
                "prior has {} weights for {} modes",
                prior.len(),
                modes.len()
            )));
        }
        if prior.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(TestbedError::Parameter("prior weights must be nonnegative".into()));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TestbedError::Parameter(format!("prior sums to {total}, not 1")));
        }
        let mut seen = BTreeSet::new();
        for m in &modes {
            if m.mean.len() != dim {
                return Err(TestbedError::Dimension { expected: dim, got: m.mean.len() });
            }
            if !(m.std > 0.0 && m.std.is_finite()) {
                return Err(TestbedError::Parameter(format!(
                    "mode ({}, {}) has non-positive std",
                    m.text_class, m.identity
                )));
            }
            if !seen.insert((m.text_class.as_str(), m.identity.as_str())) {
                return Err(TestbedError::Parameter(format!(
                    "duplicate mode ({}, {})",
                    m.text_class, m.identity
                )));
            }
        }
        Ok(Self { dim, modes, prior })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// Rejects labels that name no mode in the world.
    pub fn check_condition(&self, cond: &ConditionSet) -> Result<()> {
        if let Some(t) = &cond.text_class {
            if !self.modes.iter().any(|m| &m.text_class == t) {
                return Err(TestbedError::Condition(format!("unknown text class {t:?}")));
            }
        }
        if let Some(i) = &cond.identity {
            if !self.modes.iter().any(|m| &m.identity == i) {
                return Err(TestbedError::Condition(format!("unknown identity {i:?}")));
            }
        }
        Ok(())
    }

    fn matching(&self, cond: &ConditionSet) -> Result<Vec<usize>> {
        self.check_condition(cond)?;
        let idx: Vec<usize> = (0..self.modes.len())
            .filter(|&k| cond.admits(&self.modes[k]) && self.prior[k] > 0.0)
            .collect();
        if idx.is_empty() {
            return Err(TestbedError::Condition(format!(
                "no mode with positive prior matches {cond:?}"
            )));
        }
        Ok(idx)
    }
}

/// Variance-preserving schedule; index 0 is the cleanest step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl TimestepSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// `alpha_bar` of the step before `t`; 1 before the first step.
    fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(TestbedError::Parameter(format!(
                "timestep {t} out of range for {} steps",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear-beta schedule with `alpha_bar_t = prod_{s<=t} (1 - beta_s)`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<TimestepSchedule> {
    if steps == 0 {
        return Err(TestbedError::Parameter("steps must be >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(TestbedError::Parameter(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|s| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * s as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(TimestepSchedule { betas, alpha_bar })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisySample {
    pub x: Vec<f64>,
    pub t: usize,
}

/// `x_t = sqrt(alpha_bar_t) x0 + sigma_t noise`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    noise: &[f64],
    sched: &TimestepSchedule,
) -> Result<NoisySample> {
    sched.check_t(t)?;
    if noise.len() != x0.len() {
        return Err(TestbedError::Dimension { expected: x0.len(), got: noise.len() });
    }
    let a = sched.alpha_bar(t).sqrt();
    let s = sched.sigma(t);
    let x = x0.iter().zip(noise).map(|(x, n)| a * x + s * n).collect();
    Ok(NoisySample { x, t })
}

struct Component<'a> {
    log_weight: f64,
    mean: Vec<f64>,
    var: f64,
    _mode: &'a Mode,
}

fn noised_components<'a>(
    world: &'a MixtureWorld,
    cond: &ConditionSet,
    sched: &TimestepSchedule,
    t: usize,
    temperature: f64,
) -> Result<Vec<Component<'a>>> {
    let ab = sched.alpha_bar(t);
    let s2 = 1.0 - ab;
    let ra = ab.sqrt();
    Ok(world
        .matching(cond)?
        .into_iter()
        .map(|k| {
            let m = &world.modes[k];
            Component {
                log_weight: world.prior[k].ln(),
                mean: m.mean.iter().map(|v| ra * v).collect(),
                var: ab * m.std * m.std * temperature + s2,
                _mode: m,
            }
        })
        .collect())
}

fn check_inputs(
    sample: &NoisySample,
    world: &MixtureWorld,
    sched: &TimestepSchedule,
    temperature: f64,
) -> Result<()> {
    sched.check_t(sample.t)?;
    if sample.x.len() != world.dim {
        return Err(TestbedError::Dimension { expected: world.dim, got: sample.x.len() });
    }
    if !(temperature >= 1.0 && temperature.is_finite()) {
        return Err(TestbedError::Parameter(format!("temperature must be >= 1, got {temperature}")));
    }
    Ok(())
}

fn component_log_terms(x: &[f64], comps: &[Component<'_>]) -> Vec<f64> {
    let d = x.len() as f64;
    comps
        .iter()
        .map(|c| {
            let r2: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
            c.log_weight - 0.5 * d * (2.0 * std::f64::consts::PI * c.var).ln() - 0.5 * r2 / c.var
        })
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

/// Log-density of the noised mixture restricted to the modes admitted by `cond`.
///
/// The restricted prior is not renormalised, so this is `log p_t(x, cond)`; the
/// gradient is unaffected.
pub fn log_density(
    sample: &NoisySample,
    cond: &ConditionSet,
    world: &MixtureWorld,
    sched: &TimestepSchedule,
    temperature: f64,
) -> Result<f64> {
    check_inputs(sample, world, sched, temperature)?;
    let comps = noised_components(world, cond, sched, sample.t, temperature)?;
    Ok(log_sum_exp(&component_log_terms(&sample.x, &comps)))
}

/// Exact score `grad_x log p_t(x | cond)` of the noised mixture.
pub fn score(
    sample: &NoisySample,
    cond: &ConditionSet,
    world: &MixtureWorld,
    sched: &TimestepSchedule,
    temperature: f64,
) -> Result<Vec<f64>> {
    check_inputs(sample, world, sched, temperature)?;
    let comps = noised_components(world, cond, sched, sample.t, temperature)?;
    let logs = component_log_terms(&sample.x, &comps);
    let lse = log_sum_exp(&logs);
    let mut out = vec![0.0; world.dim];
    for (c, l) in comps.iter().zip(&logs) {
        let resp = (l - lse).exp();
        for (o, (x, m)) in out.iter_mut().zip(sample.x.iter().zip(&c.mean)) {
            *o -= resp * (x - m) / c.var;
        }
    }
    Ok(out)
}

/// Exact noise prediction `-sigma_t * score`.
pub fn analytic_epsilon(
    sample: &NoisySample,
    cond: &ConditionSet,
    world: &MixtureWorld,
    sched: &TimestepSchedule,
    temperature: f64,
) -> Result<Vec<f64>> {
    let s = sched.sigma(sample.t.min(sched.steps().saturating_sub(1)));
    Ok(score(sample, cond, world, sched, temperature)?
        .into_iter()
        .map(|g| -s * g)
        .collect())
}

/// One DDPM ancestral update from `t` to `t - 1`.
///
/// At `t = 0` the posterior mean is the clean estimate
/// `(x - sigma_0 eps) / sqrt(alpha_bar_0)`; `noise` is ignored and the returned
/// sample keeps `t = 0`.
pub fn ancestral_step(
    sample: &NoisySample,
    eps_hat: &[f64],
    sched: &TimestepSchedule,
    noise: &[f64],
) -> Result<NoisySample> {
    let t = sample.t;
    sched.check_t(t)?;
    let d = sample.x.len();
    if eps_hat.len() != d {
        return Err(TestbedError::Dimension { expected: d, got: eps_hat.len() });
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar_prev(t);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    let sigma = sched.sigma(t);
    let coef = beta / sigma;
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let mean = sample.x.iter().zip(eps_hat).map(|(x, e)| inv_sqrt_alpha * (x - coef * e));
    if t == 0 {
        return Ok(NoisySample { x: mean.collect(), t: 0 });
    }
    if noise.len() != d {
        return Err(TestbedError::Dimension { expected: d, got: noise.len() });
    }
    let post_std = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
    let x = mean.zip(noise).map(|(m, z)| m + post_std * z).collect();
    Ok(NoisySample { x, t: t - 1 })
}

/// Fraction of `finals` whose nearest mode mean carries every non-null label of `target`.
pub fn mode_hit_rate(finals: &[Vec<f64>], world: &MixtureWorld, target: &ConditionSet) -> Result<f64> {
    if finals.is_empty() {
        return Err(TestbedError::Parameter("no samples to score".into()));
    }
    world.check_condition(target)?;
    let mut hits = 0usize;
    for x in finals {
        if nearest_mode(x, world)?.is_some_and(|m| target.admits(m)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / finals.len() as f64)
}

/// Nearest mode by Euclidean distance to its mean; ties go to the first listed mode.
pub fn nearest_mode<'a>(x: &[f64], world: &'a MixtureWorld) -> Result<Option<&'a Mode>> {
    if x.len() != world.dim {
        return Err(TestbedError::Dimension { expected: world.dim, got: x.len() });
    }
    let mut best: Option<(f64, &Mode)> = None;
    for m in &world.modes {
        let d2: f64 = x.iter().zip(&m.mean).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, m));
        }
    }
    Ok(best.map(|(_, m)| m))
}

/// JSON form of a testbed: world plus schedule parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub dim: usize,
    pub modes: Vec<Mode>,
    pub prior: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    /// Condition the sampler aims for when none is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ConditionSet>,
}

fn default_steps() -> usize {
    50
}
fn default_beta_min() -> f64 {
    1e-4
}
fn default_beta_max() -> f64 {
    0.02
}

impl TestbedConfig {
    pub fn build(&self) -> Result<(MixtureWorld, TimestepSchedule)> {
        let world = MixtureWorld::new(self.dim, self.modes.clone(), self.prior.clone())?;
        let sched = make_schedule(self.steps, self.beta_min, self.beta_max)?;
        Ok((world, sched))
    }

    /// Two text classes by two identities in the plane. Identities sit at
    /// `x = +-0.5` and overlap (std 0.5), text classes are split along `y`.
    pub fn two_identity_demo() -> Self {
        let mode = |text: &str, id: &str, mean: [f64; 2]| Mode {
            text_class: text.into(),
            identity: id.into(),
            mean: mean.to_vec(),
            std: 0.5,
        };
        Self {
            dim: 2,
            modes: vec![
                mode("sprint", "A", [0.5, 1.0]),
                mode("sprint", "B", [-0.5, 1.0]),
                mode("swim", "A", [0.5, -1.0]),
                mode("swim", "B", [-0.5, -1.0]),
            ],
            prior: vec![0.25; 4],
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            target: Some(ConditionSet::new(Some("sprint"), Some("A"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_mode_world(std: f64) -> MixtureWorld {
        MixtureWorld::new(
            2,
            vec![
                Mode { text_class: "t".into(), identity: "A".into(), mean: vec![1.0, 0.0], std },
                Mode { text_class: "t".into(), identity: "B".into(), mean: vec![-1.0, 0.0], std },
            ],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn schedule_single_step() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn schedule_two_steps() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(5, 0.3, 0.2).is_err());
        assert!(make_schedule(5, 0.0, 0.2).is_err());
        assert!(make_schedule(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        let z = forward_noise(&[2.0, -1.0], 1, &[0.0, 0.0], &s).unwrap();
        assert!((z.x[0] - 2.0 * 0.9).abs() < 1e-15);
        let x = forward_noise(&[1.0, 0.0], 1, &[1.0, 1.0], &s).unwrap();
        let r = 0.19f64.sqrt();
        assert!((x.x[0] - (0.9 + r)).abs() < 1e-15);
        assert!((x.x[1] - r).abs() < 1e-15);
        assert_eq!(
            forward_noise(&[1.0], 0, &[1.0, 2.0], &s),
            Err(TestbedError::Dimension { expected: 1, got: 2 })
        );
    }

    #[test]
    fn epsilon_vanishes_at_single_mode() {
        let world = MixtureWorld::new(
            2,
            vec![Mode { text_class: "t".into(), identity: "A".into(), mean: vec![0.3, -0.7], std: 0.4 }],
            vec![1.0],
        )
        .unwrap();
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let ra = s.alpha_bar(4).sqrt();
        let sample = NoisySample { x: vec![0.3 * ra, -0.7 * ra], t: 4 };
        let eps = analytic_epsilon(&sample, &ConditionSet::default(), &world, &s, 1.0).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn epsilon_vanishes_by_symmetry() {
        let world = two_mode_world(0.3);
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let sample = NoisySample { x: vec![0.0, 0.0], t: 7 };
        let eps = analytic_epsilon(&sample, &ConditionSet::default(), &world, &s, 1.0).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn unknown_label_is_condition_error() {
        let world = two_mode_world(0.1);
        let s = make_schedule(3, 0.1, 0.1).unwrap();
        let sample = NoisySample { x: vec![0.0, 0.0], t: 0 };
        let err = analytic_epsilon(&sample, &ConditionSet::new(None, Some("Z")), &world, &s, 1.0);
        assert!(matches!(err, Err(TestbedError::Condition(_))));
    }

    #[test]
    fn temperature_below_one_rejected() {
        let world = two_mode_world(0.1);
        let s = make_schedule(3, 0.1, 0.1).unwrap();
        let sample = NoisySample { x: vec![0.0, 0.0], t: 0 };
        assert!(analytic_epsilon(&sample, &ConditionSet::default(), &world, &s, 0.5).is_err());
    }

    #[test]
    fn ancestral_step_final_ignores_noise() {
        let s = make_schedule(3, 0.1, 0.2).unwrap();
        let sample = NoisySample { x: vec![0.4, -0.2], t: 0 };
        let a = ancestral_step(&sample, &[0.1, 0.3], &s, &[5.0, 5.0]).unwrap();
        let b = ancestral_step(&sample, &[0.1, 0.3], &s, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.t, 0);
    }

    #[test]
    fn ancestral_step_hand_value() {
        // steps=2, beta=0.1: alpha_bar = [0.9, 0.81]; at t=1:
        // alpha = 0.9, beta = 0.1, sigma = sqrt(0.19)
        // mean = (x - 0.1/sqrt(0.19) eps)/sqrt(0.9)
        // var  = (1-0.9)/(1-0.81) * 0.1 = 0.01/0.19
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        let sample = NoisySample { x: vec![1.0], t: 1 };
        let out = ancestral_step(&sample, &[0.5], &s, &[2.0]).unwrap();
        let expected = (1.0 - 0.1 / 0.19f64.sqrt() * 0.5) / 0.9f64.sqrt() + (0.01f64 / 0.19).sqrt() * 2.0;
        assert!((out.x[0] - expected).abs() < 1e-14);
        assert_eq!(out.t, 0);
    }

    #[test]
    fn hit_rate_extremes() {
        let world = two_mode_world(0.1);
        let target = ConditionSet::new(None, Some("A"));
        assert_eq!(mode_hit_rate(&vec![vec![1.0, 0.0]; 4], &world, &target).unwrap(), 1.0);
        assert_eq!(mode_hit_rate(&vec![vec![-1.0, 0.0]; 4], &world, &target).unwrap(), 0.0);
        assert!(mode_hit_rate(&[], &world, &target).is_err());
    }

    #[test]
    fn world_validation() {
        let m = |id: &str| Mode { text_class: "t".into(), identity: id.into(), mean: vec![0.0], std: 1.0 };
        assert!(MixtureWorld::new(1, vec![m("A"), m("A")], vec![0.5, 0.5]).is_err());
        assert!(MixtureWorld::new(1, vec![m("A"), m("B")], vec![0.6, 0.5]).is_err());
        let mut bad = m("A");
        bad.std = 0.0;
        assert!(MixtureWorld::new(1, vec![bad], vec![1.0]).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TestbedConfig::two_identity_demo();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TestbedConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["dim", "modes", "prior", "steps", "beta_min", "beta_max"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let (world, sched) = back.build().unwrap();
        assert_eq!(world.dim(), 2);
        assert_eq!(sched.steps(), 50);
    }
}
