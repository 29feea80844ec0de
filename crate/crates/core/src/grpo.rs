//! Group-relative policy optimization math: rewards, group-standardized
//! advantages, the dynamic-sampling filter, the k3 KL estimate, and the
//! unclipped GRPO loss with its analytic gradient.
//!
//! The loss over a group of `n` completions is
//!
//! ```text
//! L = -(1/n) * sum_i [ exp(logp_i - base_i) * A_i - beta * KL_i ]
//! ```
//!
//! where `base_i` is the reference log-probability (or the old-policy one
//! when [`RatioBaseline::OldPolicy`] is selected) and `KL_i` is the k3
//! estimate `exp(d) - d - 1` with `d = ref_i - logp_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::extract_answer;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("group has {0} samples, need at least 2")]
    GroupTooSmall(usize),
    #[error("advantages have not been computed for this group")]
    MissingAdvantages,
    #[error("group has {have} samples, config expects {want}")]
    GroupSizeMismatch { have: usize, want: usize },
    #[error("old-policy ratio baseline selected but sample {0} has no old_logprob")]
    MissingOldLogprob(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioBaseline {
    /// Ratio against the frozen reference policy.
    #[default]
    Reference,
    /// Ratio against the behaviour policy that sampled the group.
    OldPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub beta: f64,
    pub group_size: usize,
    pub advantage_epsilon: f64,
    pub temperature: f64,
    #[serde(default)]
    pub ratio_baseline: RatioBaseline,
}

impl GrpoConfig {
    pub const BETA_V1: f64 = 0.04;
    pub const BETA_V2: f64 = 0.01;

    pub fn v1(group_size: usize) -> Self {
        GrpoConfig { beta: Self::BETA_V1, ..Self::v2(group_size) }
    }

    pub fn v2(group_size: usize) -> Self {
        GrpoConfig {
            beta: Self::BETA_V2,
            group_size,
            advantage_epsilon: 1e-6,
            temperature: 1.0,
            ratio_baseline: RatioBaseline::Reference,
        }
    }
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig::v2(4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    #[serde(default)]
    pub completion_text: String,
    pub policy_logprob: f64,
    pub ref_logprob: f64,
    pub reward: f64,
    #[serde(default)]
    pub old_logprob: Option<f64>,
    /// Replaces the k3 estimate with an externally computed KL value.
    #[serde(default)]
    pub kl_override: Option<f64>,
}

impl GroupSample {
    pub fn new(policy_logprob: f64, ref_logprob: f64, reward: f64) -> Self {
        GroupSample {
            completion_text: String::new(),
            policy_logprob,
            ref_logprob,
            reward,
            old_logprob: None,
            kl_override: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub samples: Vec<GroupSample>,
    #[serde(default)]
    pub advantages: Option<Vec<f64>>,
}

impl Group {
    pub fn new(samples: Vec<GroupSample>) -> Self {
        Group { samples, advantages: None }
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.reward).collect()
    }

    /// Fills `advantages` from the sample rewards.
    pub fn with_advantages(mut self, eps: f64) -> Result<Self, GrpoError> {
        self.advantages = Some(compute_advantages(&self.rewards(), eps)?);
        Ok(self)
    }

    pub fn reward_variance(&self) -> f64 {
        let (_, var) = mean_var(&self.rewards());
        var
    }
}

pub fn reward_accuracy(prediction: &str, truth: &str) -> f64 {
    if prediction == truth {
        1.0
    } else {
        0.0
    }
}

/// 1.0 iff the response holds exactly one `<answer>...</answer>` pair, in order.
pub fn reward_format(response: &str) -> f64 {
    let opens = response.matches("<answer>").count();
    let closes = response.matches("</answer>").count();
    let ordered = match (response.find("<answer>"), response.find("</answer>")) {
        (Some(o), Some(c)) => o < c,
        _ => false,
    };
    if opens == 1 && closes == 1 && ordered {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub accuracy: f64,
    pub format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { accuracy: 1.0, format: 0.0 }
    }
}

/// Weighted accuracy + format reward for a raw response. The prediction is
/// the extracted answer passed through `normalize`.
pub fn total_reward(
    response: &str,
    truth: &str,
    weights: RewardWeights,
    normalize: impl Fn(&str) -> String,
) -> f64 {
    let prediction = extract_answer(response).map(|a| normalize(&a)).unwrap_or_default();
    weights.accuracy * reward_accuracy(&prediction, truth) + weights.format * reward_format(response)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// `(r_i - mean) / (std + eps)` with population std; all zeros when every
/// reward is identical.
pub fn compute_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let (mean, var) = mean_var(rewards);
    let collapsed = rewards.iter().all(|r| *r == rewards[0]);
    if collapsed {
        return Ok(vec![0.0; rewards.len()]);
    }
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

/// Keeps the groups whose rewards are not all identical, in order.
pub fn dynamic_sampling_filter(groups: Vec<Group>) -> (Vec<Group>, usize) {
    let before = groups.len();
    let kept: Vec<Group> = groups
        .into_iter()
        .filter(|g| g.samples.iter().any(|s| s.reward != g.samples[0].reward))
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// k3 estimator `exp(d) - d - 1`, `d = ref - policy`. Non-negative, zero iff equal.
pub fn kl_estimate(policy_logprob: f64, ref_logprob: f64) -> f64 {
    let d = ref_logprob - policy_logprob;
    // expm1 keeps precision near d = 0
    (d.exp_m1() - d).max(0.0)
}

fn ratio_base(s: &GroupSample, i: usize, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    match cfg.ratio_baseline {
        RatioBaseline::Reference => Ok(s.ref_logprob),
        RatioBaseline::OldPolicy => s.old_logprob.ok_or(GrpoError::MissingOldLogprob(i)),
    }
}

fn checked_advantages<'a>(group: &'a Group, cfg: &GrpoConfig) -> Result<&'a [f64], GrpoError> {
    if group.samples.len() != cfg.group_size {
        return Err(GrpoError::GroupSizeMismatch { have: group.samples.len(), want: cfg.group_size });
    }
    match &group.advantages {
        Some(a) if a.len() == group.samples.len() => Ok(a),
        _ => Err(GrpoError::MissingAdvantages),
    }
}

pub fn grpo_loss(group: &Group, cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    let adv = checked_advantages(group, cfg)?;
    let mut acc = 0.0;
    for (i, (s, a)) in group.samples.iter().zip(adv).enumerate() {
        let ratio = (s.policy_logprob - ratio_base(s, i, cfg)?).exp();
        let kl = s.kl_override.unwrap_or_else(|| kl_estimate(s.policy_logprob, s.ref_logprob));
        acc += ratio * a - cfg.beta * kl;
    }
    Ok(-acc / group.samples.len() as f64)
}

/// `dL/d policy_logprob_i`. A sample with `kl_override` treats its KL term as
/// a constant.
pub fn grpo_loss_gradient(group: &Group, cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    let adv = checked_advantages(group, cfg)?;
    let n = group.samples.len() as f64;
    group
        .samples
        .iter()
        .zip(adv)
        .enumerate()
        .map(|(i, (s, a))| {
            let ratio = (s.policy_logprob - ratio_base(s, i, cfg)?).exp();
            let dkl = match s.kl_override {
                Some(_) => 0.0,
                None => 1.0 - (s.ref_logprob - s.policy_logprob).exp(),
            };
            Ok(-(ratio * a - cfg.beta * dkl) / n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rewards() {
        assert_eq!(reward_accuracy("B", "B"), 1.0);
        assert_eq!(reward_accuracy("A", "B"), 0.0);
        assert_eq!(reward_format("<answer>3</answer>"), 1.0);
        assert_eq!(reward_format("no tags"), 0.0);
        assert_eq!(reward_format("<answer>1</answer><answer>2</answer>"), 0.0);
        assert_eq!(reward_format("</answer>x<answer>"), 0.0);
    }

    #[test]
    fn total_reward_default_weights_ignore_format() {
        let upper = |s: &str| s.to_uppercase();
        assert_eq!(total_reward("<answer>b</answer>", "B", RewardWeights::default(), upper), 1.0);
        assert_eq!(total_reward("B", "B", RewardWeights::default(), upper), 1.0);
        let w = RewardWeights { accuracy: 1.0, format: 0.5 };
        assert_eq!(total_reward("<answer>b</answer>", "B", w, upper), 1.5);
        assert_eq!(total_reward("A", "B", w, upper), 0.0);
    }

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 0.0, 0.0, 1.0], 1e-6).unwrap();
        for (got, want) in a.iter().zip([1.0, -1.0, -1.0, 1.0]) {
            assert!(close(*got, want, 1e-5), "{a:?}");
        }
        assert_eq!(compute_advantages(&[1.0; 4], 1e-6).unwrap(), vec![0.0; 4]);
        assert_eq!(compute_advantages(&[1.0], 1e-6), Err(GrpoError::GroupTooSmall(1)));
    }

    fn group(rewards: &[f64]) -> Group {
        Group::new(rewards.iter().map(|&r| GroupSample::new(-1.0, -1.0, r)).collect())
    }

    #[test]
    fn filter_examples() {
        let (kept, dropped) = dynamic_sampling_filter(vec![group(&[1.0, 0.0, 1.0, 0.0])]);
        assert_eq!((kept.len(), dropped), (1, 0));
        let (kept, dropped) = dynamic_sampling_filter(vec![group(&[1.0; 4]), group(&[0.0; 4])]);
        assert_eq!((kept.len(), dropped), (0, 2));
        let mixed = vec![group(&[1.0; 4]), group(&[0.0, 1.0, 0.0, 0.0]), group(&[0.0; 4]), group(&[0.5, 0.25, 0.5, 0.5])];
        let (kept, dropped) = dynamic_sampling_filter(mixed.clone());
        assert_eq!(dropped, 2);
        assert_eq!(kept, vec![mixed[1].clone(), mixed[3].clone()]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_estimate(-2.0, -2.0), 0.0);
        // policy = -1, ref = 0 -> d = 1
        assert!(close(kl_estimate(-1.0, 0.0), std::f64::consts::E - 2.0, 1e-12));
        assert!(kl_estimate(-1.0, -1.0 + 1e-6) > 0.0);
    }

    #[test]
    fn loss_identity_policy_is_zero() {
        let g = Group::new(
            [1.0, 0.0, 0.0, 1.0].iter().enumerate().map(|(i, &r)| GroupSample::new(-(i as f64) - 0.5, -(i as f64) - 0.5, r)).collect(),
        )
        .with_advantages(1e-6)
        .unwrap();
        let loss = grpo_loss(&g, &GrpoConfig::v2(4)).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn loss_single_sample_view() {
        // ratio 2, A = 1, beta 0 -> contribution -2; paired with a zero-advantage
        // twin at ratio 1 the group mean is -1.
        let g = Group {
            samples: vec![GroupSample::new(2f64.ln() - 3.0, -3.0, 0.0), GroupSample::new(-1.0, -1.0, 0.0)],
            advantages: Some(vec![1.0, 0.0]),
        };
        let cfg = GrpoConfig { beta: 0.0, ..GrpoConfig::v2(2) };
        assert!(close(grpo_loss(&g, &cfg).unwrap(), -2.0 / 2.0, 1e-12));
    }

    #[test]
    fn collapsed_group_loss_is_pure_kl() {
        let g = Group::new(vec![
            GroupSample::new(-1.0, -0.5, 1.0),
            GroupSample::new(-2.0, -2.5, 1.0),
            GroupSample::new(-0.3, -0.3, 1.0),
        ])
        .with_advantages(1e-6)
        .unwrap();
        let cfg = GrpoConfig::v2(3);
        let mean_kl = g.samples.iter().map(|s| kl_estimate(s.policy_logprob, s.ref_logprob)).sum::<f64>() / 3.0;
        let loss = grpo_loss(&g, &cfg).unwrap();
        assert!(close(loss, 0.01 * mean_kl, 1e-15));
        assert!(loss >= 0.0);
    }

    #[test]
    fn gradient_examples() {
        let g = Group {
            samples: vec![GroupSample::new(-1.0, -1.0, 1.0), GroupSample::new(-2.0, -2.0, 0.0)],
            advantages: Some(vec![1.0, -1.0]),
        };
        let cfg = GrpoConfig { beta: 0.0, ..GrpoConfig::v2(2) };
        let grad = grpo_loss_gradient(&g, &cfg).unwrap();
        assert!(close(grad[0], -0.5, 1e-12) && close(grad[1], 0.5, 1e-12), "{grad:?}");

        // A = 0, beta > 0: descending the gradient moves policy toward ref.
        let g = Group {
            samples: vec![GroupSample::new(-1.0, -0.5, 0.0), GroupSample::new(-0.5, -1.0, 0.0)],
            advantages: Some(vec![0.0, 0.0]),
        };
        let grad = grpo_loss_gradient(&g, &GrpoConfig::v2(2)).unwrap();
        assert!(grad[0] < 0.0, "policy below ref should be pushed up");
        assert!(grad[1] > 0.0, "policy above ref should be pushed down");
    }

    #[test]
    fn loss_errors() {
        let g = group(&[1.0, 0.0]);
        assert_eq!(grpo_loss(&g, &GrpoConfig::v2(2)), Err(GrpoError::MissingAdvantages));
        let g = g.with_advantages(1e-6).unwrap();
        assert!(matches!(grpo_loss(&g, &GrpoConfig::v2(3)), Err(GrpoError::GroupSizeMismatch { .. })));
        let cfg = GrpoConfig { ratio_baseline: RatioBaseline::OldPolicy, ..GrpoConfig::v2(2) };
        assert_eq!(grpo_loss(&g, &cfg), Err(GrpoError::MissingOldLogprob(0)));
    }

    #[test]
    fn old_policy_baseline_and_kl_override() {
        let mut s = GroupSample::new(-1.0, -3.0, 1.0);
        s.old_logprob = Some(-1.0);
        s.kl_override = Some(0.25);
        let g = Group { samples: vec![s.clone(), s], advantages: Some(vec![1.0, 1.0]) };
        let cfg = GrpoConfig { beta: 0.1, ratio_baseline: RatioBaseline::OldPolicy, ..GrpoConfig::v2(2) };
        assert!(close(grpo_loss(&g, &cfg).unwrap(), -(1.0 - 0.1 * 0.25), 1e-12));
        let grad = grpo_loss_gradient(&g, &cfg).unwrap();
        assert!(close(grad[0], -0.5, 1e-12));
    }

    #[test]
    fn table_defaults() {
        assert_eq!(GrpoConfig::default().beta, 0.01);
        assert_eq!(GrpoConfig::v1(4).beta, 0.04);
        assert_eq!(GrpoConfig::v1(4).temperature, 1.0);
    }
}
