//! Closed-form expressions for returns and h-values.
//!
//! These are independent of the iterative agents and serve as test oracles.
//!
//! Time convention: a schedule has steps `1..=T`; `rewards[l - 1]` is the
//! reward received right after step `l`. Truncated returns index the reward
//! slice directly, so `truncated_return(r, t1, t2, χ) = Σ_{k=0}^{t2-t1} χ^k r[t1 + k]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ps::GlowVariant;

/// Sums longer than this use compensated arithmetic.
pub const COMPENSATED_THRESHOLD: usize = 10_000;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let z = s - a;
    (s, (a - (s - z)) + (b - z))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// `Σ_k x^k coeffs[k]` by Horner's rule, compensated for long inputs.
fn horner(coeffs: &[f64], x: f64) -> f64 {
    if coeffs.len() <= COMPENSATED_THRESHOLD {
        return coeffs.iter().rev().fold(0.0, |acc, &c| c + x * acc);
    }
    let mut s = 0.0;
    let mut c = 0.0;
    for &a in coeffs.iter().rev() {
        let (p, pi) = two_prod(s, x);
        let (next, sigma) = two_sum(p, a);
        c = c * x + (pi + sigma);
        s = next;
    }
    s + c
}

/// `G(t1:t2, χ) = Σ_{k=0}^{t2-t1} χ^k rewards[t1 + k]`.
pub fn truncated_return(rewards: &[f64], t1: usize, t2: usize, chi: f64) -> Result<f64> {
    if t1 > t2 || t2 >= rewards.len() {
        return Err(Error::IndexOutOfRange {
            what: "return window end",
            index: t2.max(t1),
            limit: rewards.len(),
        });
    }
    Ok(horner(&rewards[t1..=t2], chi))
}

/// Visit times of one edge together with the rewards of the whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitSchedule {
    pub horizon: usize,
    /// Sorted visit steps in `1..=horizon`.
    pub visits: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl VisitSchedule {
    pub fn new(visits: Vec<usize>, rewards: Vec<f64>) -> Result<Self> {
        let s = Self {
            horizon: rewards.len(),
            visits,
            rewards,
        };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        if self.rewards.len() != self.horizon {
            return Err(Error::InvalidSchedule(format!(
                "{} rewards for horizon {}",
                self.rewards.len(),
                self.horizon
            )));
        }
        if self.visits.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidSchedule("visit times not sorted".into()));
        }
        if let Some(&l) = self
            .visits
            .iter()
            .find(|&&l| l == 0 || l > self.horizon)
        {
            return Err(Error::InvalidSchedule(format!(
                "visit time {l} outside 1..={}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// `G(l-1 : T-1, χ)`, the return following a visit at step `l`.
    fn tail(&self, l: usize, chi: f64) -> f64 {
        horner(&self.rewards[l - 1..], chi)
    }
}

/// Parameters shared by the explicit h-value expressions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosedFormParams {
    pub variant: GlowVariant,
    pub eta: f64,
    pub gamma_damp: f64,
    pub h0: f64,
    pub h_eq: f64,
    pub order_s: f64,
}

/// The reward-independent part `γ̄^T h0 + (1 - γ̄^T) h_eq`.
pub fn h_rest(h0: f64, h_eq: f64, gamma_damp: f64, t: usize) -> f64 {
    let decay = (1.0 - gamma_damp).powi(t as i32);
    h_eq + decay * (h0 - h_eq)
}

/// h-value after the last step of `schedule`, from the return-based form.
///
/// First-visit glow treats the schedule as one episode and ignores `gamma_damp`.
pub fn closed_form_h(schedule: &VisitSchedule, p: &ClosedFormParams) -> Result<f64> {
    schedule.check()?;
    let t = schedule.horizon;
    let eta_bar = 1.0 - p.eta;
    let gamma_damp = match p.variant {
        GlowVariant::FirstVisit => 0.0,
        _ => p.gamma_damp,
    };
    let gamma_bar = 1.0 - gamma_damp;
    let rest = h_rest(p.h0, p.h_eq, gamma_damp, t);
    if schedule.visits.is_empty() {
        return Ok(rest);
    }
    if gamma_bar == 0.0 {
        return Ok(rest + closed_form_h_direct(schedule, p)?);
    }
    let chi = eta_bar / gamma_bar;
    let back = |l: usize| gamma_bar.powi((t - l) as i32);
    let experience = match p.variant {
        GlowVariant::Accumulating => {
            compensated_sum(schedule.visits.iter().map(|&l| back(l) * schedule.tail(l, chi)))
        }
        GlowVariant::Replacing => {
            let v = &schedule.visits;
            compensated_sum((0..v.len()).filter_map(|j| {
                let start = v[j] - 1;
                // the segment runs until the step before the next visit
                let end = v.get(j + 1).map_or(t, |&n| n - 1);
                (end > start).then(|| back(v[j]) * horner(&schedule.rewards[start..end], chi))
            }))
        }
        GlowVariant::FirstVisit => schedule.tail(schedule.visits[0], eta_bar),
    };
    Ok(rest + p.order_s * experience)
}

/// The experience term written as a sum over steps with explicit glow weights.
pub fn closed_form_h_direct(schedule: &VisitSchedule, p: &ClosedFormParams) -> Result<f64> {
    schedule.check()?;
    let t = schedule.horizon;
    let eta_bar = 1.0 - p.eta;
    let gamma_bar = match p.variant {
        GlowVariant::FirstVisit => 1.0,
        _ => 1.0 - p.gamma_damp,
    };
    let v = &schedule.visits;
    let Some(&first) = v.first() else {
        return Ok(0.0);
    };
    let mut terms = Vec::with_capacity(t);
    let mut next = 0;
    for k in first..=t {
        while next < v.len() && v[next] <= k {
            next += 1;
        }
        let glow = match p.variant {
            GlowVariant::Replacing => eta_bar.powi((k - v[next - 1]) as i32),
            GlowVariant::Accumulating => v[..next]
                .iter()
                .map(|&l| eta_bar.powi((k - l) as i32))
                .sum(),
            GlowVariant::FirstVisit => eta_bar.powi((k - first) as i32),
        };
        terms.push(gamma_bar.powi((t - k) as i32) * glow * schedule.rewards[k - 1]);
    }
    Ok(p.order_s * compensated_sum(terms))
}

/// Replacing-glow experience as a single sum over visits of full tail returns
/// minus the revisit correction. Requires strictly increasing visit times.
pub fn replacing_h_exp_rearranged(
    schedule: &VisitSchedule,
    eta: f64,
    gamma_damp: f64,
    order_s: f64,
) -> Result<f64> {
    schedule.check()?;
    if schedule.visits.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidSchedule(
            "rearranged form needs distinct visit times".into(),
        ));
    }
    let t = schedule.horizon;
    let eta_bar = 1.0 - eta;
    let gamma_bar = 1.0 - gamma_damp;
    if gamma_bar == 0.0 {
        return Err(Error::InvalidParameter(
            "rearranged form needs gamma_damp < 1".into(),
        ));
    }
    let chi = eta_bar / gamma_bar;
    let v = &schedule.visits;
    let sum = compensated_sum((0..v.len()).map(|j| {
        let back = gamma_bar.powi((t - v[j]) as i32);
        let correction = if j == 0 {
            0.0
        } else {
            back * eta_bar.powi((v[j] - v[j - 1]) as i32)
        };
        (back - correction) * schedule.tail(v[j], chi)
    }));
    Ok(order_s * sum)
}

/// Full discounted return from time `t`: `Σ_k γ^k rewards[t + k]`.
pub fn full_return(rewards: &[f64], t: usize, gamma_dis: f64) -> f64 {
    if t >= rewards.len() {
        return 0.0;
    }
    horner(&rewards[t..], gamma_dis)
}

/// n-step return `G_{t:t+n}`; `values[k]` estimates the state at time `k`.
///
/// Clipped to the full return once `t + n` reaches the episode length.
pub fn n_step_return(rewards: &[f64], values: &[f64], t: usize, n: usize, gamma_dis: f64) -> Result<f64> {
    let len = rewards.len();
    if n == 0 {
        return Err(Error::InvalidParameter("n-step return needs n >= 1".into()));
    }
    if t >= len {
        return Err(Error::IndexOutOfRange {
            what: "time",
            index: t,
            limit: len,
        });
    }
    if t + n >= len {
        return Ok(full_return(rewards, t, gamma_dis));
    }
    let boot = values.get(t + n).ok_or(Error::IndexOutOfRange {
        what: "value time",
        index: t + n,
        limit: values.len(),
    })?;
    Ok(horner(&rewards[t..t + n], gamma_dis) + gamma_dis.powi(n as i32) * boot)
}

/// Episodic λ-return: `(1-λ) Σ_{n=1}^{T-t-1} λ^{n-1} G_{t:t+n} + λ^{T-t-1} G_t`.
pub fn lambda_return(
    rewards: &[f64],
    values: &[f64],
    t: usize,
    lambda_tra: f64,
    gamma_dis: f64,
) -> Result<f64> {
    let len = rewards.len();
    if t >= len {
        return Err(Error::IndexOutOfRange {
            what: "time",
            index: t,
            limit: len,
        });
    }
    let tail = len - t;
    let mut mix = Vec::with_capacity(tail);
    for n in 1..tail {
        mix.push(lambda_tra.powi(n as i32 - 1) * n_step_return(rewards, values, t, n, gamma_dis)?);
    }
    let full = lambda_tra.powi(tail as i32 - 1) * full_return(rewards, t, gamma_dis);
    Ok((1.0 - lambda_tra) * compensated_sum(mix) + full)
}

/// Batch weighted arithmetic mean.
pub fn weighted_mean(samples: &[f64], weights: &[f64]) -> Result<f64> {
    if samples.len() != weights.len() || samples.is_empty() {
        return Err(Error::InvalidParameter(
            "samples and weights must be non-empty and of equal length".into(),
        ));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidParameter("weights must be non-negative".into()));
    }
    let total = compensated_sum(weights.iter().copied());
    if total == 0.0 {
        return Err(Error::InvalidParameter("all weights are zero".into()));
    }
    Ok(compensated_sum(samples.iter().zip(weights).map(|(x, w)| x * w)) / total)
}

/// One step of the incremental mean `(1-α) prev + α x`.
pub fn weighted_mean_incremental(prev_mean: f64, sample: f64, alpha: f64) -> f64 {
    prev_mean + alpha * (sample - prev_mean)
}

/// Learning rates `α_t = w_t / Σ_{k≤t} w_k` for a weight sequence.
pub fn weight_learning_rates(weights: &[f64]) -> Vec<f64> {
    let mut total = 0.0;
    weights
        .iter()
        .map(|&w| {
            total += w;
            if total == 0.0 {
                0.0
            } else {
                w / total
            }
        })
        .collect()
}

/// `α_t` for exponential weights `w_k = w^k`; `1/t` when `w = 1`.
pub fn exp_weight_alpha(w: f64, t: u32) -> f64 {
    if w == 1.0 {
        return 1.0 / t as f64;
    }
    (1.0 - w.recip()) / (1.0 - w.powi(-(t as i32)))
}

/// Expected accumulating-glow experience over an ensemble:
/// `Σ_{l=1}^{t} γ̄^{t-l} G(l-1 : t-1, χ) p_l`, with `p[l-1]` the visit probability at step `l`.
pub fn ensemble_h_expected(
    occupation: &[f64],
    rewards: &[f64],
    eta: f64,
    gamma_damp: f64,
    t: usize,
) -> Result<f64> {
    check_ensemble_inputs(occupation, rewards, t)?;
    if occupation.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParameter("occupation probabilities outside [0, 1]".into()));
    }
    Ok(compensated_sum(
        ensemble_terms(rewards, eta, gamma_damp, t)
            .into_iter()
            .zip(occupation)
            .map(|(term, p)| term * p),
    ))
}

fn check_ensemble_inputs(occupation: &[f64], rewards: &[f64], t: usize) -> Result<()> {
    if occupation.len() < t || rewards.len() < t {
        return Err(Error::IndexOutOfRange {
            what: "horizon",
            index: t,
            limit: occupation.len().min(rewards.len()),
        });
    }
    Ok(())
}

/// `γ̄^{t-l} G(l-1 : t-1, χ)` for `l = 1..=t`, computed directly (valid for γ̄ = 0 too).
fn ensemble_terms(rewards: &[f64], eta: f64, gamma_damp: f64, t: usize) -> Vec<f64> {
    let eta_bar = 1.0 - eta;
    let gamma_bar = 1.0 - gamma_damp;
    (1..=t)
        .map(|l| {
            compensated_sum(
                (l..=t).map(|k| {
                    gamma_bar.powi((t - k) as i32) * eta_bar.powi((k - l) as i32) * rewards[k - 1]
                }),
            )
        })
        .collect()
}

/// Visit-normalised ensemble experience, `(1/N) Σ_{l=1}^{t} γ̄^{t-l} G(l-1 : t-1, χ)`.
pub fn ensemble_h_normalized(rewards: &[f64], eta: f64, gamma_damp: f64, t: usize, n_agents: usize) -> Result<f64> {
    if rewards.len() < t {
        return Err(Error::IndexOutOfRange {
            what: "horizon",
            index: t,
            limit: rewards.len(),
        });
    }
    if n_agents == 0 {
        return Err(Error::InvalidParameter("ensemble size must be positive".into()));
    }
    let gamma_bar = 1.0 - gamma_damp;
    let sum = if gamma_bar == 0.0 {
        compensated_sum(ensemble_terms(rewards, eta, gamma_damp, t))
    } else {
        let chi = (1.0 - eta) / gamma_bar;
        compensated_sum((1..=t).map(|l| {
            gamma_bar.powi((t - l) as i32) * horner(&rewards[l - 1..t], chi)
        }))
    };
    Ok(sum / n_agents as f64)
}

/// The same quantity as a difference of two returns from the start:
/// `(1/N) γ̄^t / (1-η̄) [G(0:t, 1/γ̄) - G(0:t, χ)]` over the reward sequence
/// prefixed with the zero reward of time 0. Needs `η > 0` and `γ̄ > 0`.
pub fn ensemble_h_difference_form(
    rewards: &[f64],
    eta: f64,
    gamma_damp: f64,
    t: usize,
    n_agents: usize,
) -> Result<f64> {
    let gamma_bar = 1.0 - gamma_damp;
    if !(eta > 0.0) || !(gamma_bar > 0.0) {
        return Err(Error::InvalidParameter(
            "difference form needs eta > 0 and gamma_damp < 1".into(),
        ));
    }
    if rewards.len() < t {
        return Err(Error::IndexOutOfRange {
            what: "horizon",
            index: t,
            limit: rewards.len(),
        });
    }
    if n_agents == 0 {
        return Err(Error::InvalidParameter("ensemble size must be positive".into()));
    }
    let chi = (1.0 - eta) / gamma_bar;
    let mut ext = Vec::with_capacity(t + 1);
    ext.push(0.0);
    ext.extend_from_slice(&rewards[..t]);
    let lead = gamma_bar.powi(t as i32);
    let diff = lead * (horner(&ext, gamma_bar.recip()) - horner(&ext, chi));
    if diff.is_finite() {
        return Ok(diff / eta / n_agents as f64);
    }
    // γ̄^{-t} overflowed; fold γ̄^t into each term instead
    let folded = compensated_sum((1..=t).map(|k| {
        (gamma_bar.powi((t - k) as i32) - lead * chi.powi(k as i32)) * ext[k]
    }));
    Ok(folded / eta / n_agents as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(variant: GlowVariant, eta: f64, gamma_damp: f64) -> ClosedFormParams {
        ClosedFormParams {
            variant,
            eta,
            gamma_damp,
            h0: 0.0,
            h_eq: 0.0,
            order_s: 1.0,
        }
    }

    #[test]
    fn truncated_return_examples() {
        let r = [1.0, 1.0, 1.0];
        assert_eq!(truncated_return(&r, 0, 2, 0.5).unwrap(), 1.75);
        assert_eq!(truncated_return(&[3.0, 5.0], 1, 1, 0.0).unwrap(), 5.0);
        assert_eq!(truncated_return(&[3.0, 5.0], 0, 1, 0.0).unwrap(), 3.0);
        assert!(truncated_return(&r, 0, 3, 0.5).is_err());
        assert!(truncated_return(&r, 2, 1, 0.5).is_err());
    }

    #[test]
    fn compensated_paths_agree() {
        let r: Vec<f64> = (0..20_000).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
        let fast = r.iter().rev().fold(0.0, |acc, &c| c + 0.999 * acc);
        let slow = truncated_return(&r, 0, r.len() - 1, 0.999).unwrap();
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-9);
        assert_eq!(compensated_sum([1e16, 1.0, -1e16]), 1.0);
    }

    #[test]
    fn rest_term() {
        assert_abs_diff_eq!(h_rest(2.0, 1.0, 0.5, 3), 1.125, epsilon = 1e-15);
        for t in 0..50 {
            assert_eq!(h_rest(0.7, 0.7, 0.2, t), 0.7);
        }
        let s = VisitSchedule::new(vec![], vec![0.0; 4]).unwrap();
        let mut p = params(GlowVariant::Replacing, 0.5, 0.5);
        p.h0 = 2.0;
        p.h_eq = 1.0;
        assert_abs_diff_eq!(closed_form_h(&s, &p).unwrap(), 1.0 + 0.5f64.powi(4), epsilon = 1e-15);
    }

    #[test]
    fn single_visit_hand_value() {
        let s = VisitSchedule::new(vec![1], vec![0.0, 1.0, 0.0]).unwrap();
        for v in [GlowVariant::Replacing, GlowVariant::Accumulating, GlowVariant::FirstVisit] {
            assert_eq!(closed_form_h(&s, &params(v, 0.5, 0.0)).unwrap(), 0.5);
        }
    }

    #[test]
    fn first_visit_hand_value() {
        let s = VisitSchedule::new(vec![2, 3], vec![5.0, 0.0, 0.0, 1.0]).unwrap();
        let h = closed_form_h(&s, &params(GlowVariant::FirstVisit, 0.7, 0.0)).unwrap();
        assert_abs_diff_eq!(h, 0.09, epsilon = 1e-15);
    }

    #[test]
    fn return_and_direct_forms_agree() {
        let rewards: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let s = VisitSchedule::new(vec![2, 3, 9, 17, 30], rewards).unwrap();
        for v in [GlowVariant::Replacing, GlowVariant::Accumulating, GlowVariant::FirstVisit] {
            for (eta, gd) in [(0.3, 0.1), (0.9, 0.0), (0.0, 0.4), (1.0, 0.2), (0.5, 1.0)] {
                for order_s in [1.0, 1.0 - eta] {
                    let mut p = params(v, eta, gd);
                    p.order_s = order_s;
                    let a = closed_form_h(&s, &p).unwrap();
                    let b = closed_form_h_direct(&s, &p).unwrap();
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rearranged_replacing_form() {
        let rewards: Vec<f64> = (0..25).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let s = VisitSchedule::new(vec![1, 4, 5, 12, 20], rewards).unwrap();
        for (eta, gd) in [(0.3, 0.1), (0.6, 0.0), (0.1, 0.5)] {
            let a = closed_form_h(&s, &params(GlowVariant::Replacing, eta, gd)).unwrap();
            let b = replacing_h_exp_rearranged(&s, eta, gd, 1.0).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let dup = VisitSchedule::new(vec![2, 2], vec![0.0; 3]).unwrap();
        assert!(replacing_h_exp_rearranged(&dup, 0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn schedule_checks() {
        assert!(VisitSchedule::new(vec![0], vec![0.0]).is_err());
        assert!(VisitSchedule::new(vec![2], vec![0.0]).is_err());
        assert!(VisitSchedule::new(vec![2, 1], vec![0.0; 2]).is_err());
        let empty = VisitSchedule::new(vec![], vec![]).unwrap();
        assert_eq!(closed_form_h(&empty, &params(GlowVariant::Accumulating, 0.5, 0.1)).unwrap(), 0.0);
    }

    #[test]
    fn n_step_examples() {
        let r = [1.0, 0.0, 2.0];
        let v = [10.0; 4];
        assert_eq!(n_step_return(&r, &v, 0, 2, 0.5).unwrap(), 3.5);
        assert_eq!(n_step_return(&r, &[0.0; 4], 1, 1, 0.5).unwrap(), 0.0);
        assert_eq!(n_step_return(&r, &[0.0; 4], 0, 1, 0.5).unwrap(), 1.0);
        assert_eq!(n_step_return(&r, &v, 0, 3, 0.5).unwrap(), full_return(&r, 0, 0.5));
        assert_eq!(n_step_return(&r, &v, 0, 9, 0.5).unwrap(), 1.5);
        assert!(n_step_return(&r, &v, 0, 0, 0.5).is_err());
    }

    #[test]
    fn lambda_return_limits_and_mixture() {
        let r = [1.0, -0.5, 2.0, 0.25];
        let v = [0.3, -1.0, 4.0, 2.0, 0.0];
        for t in 0..4 {
            assert_eq!(
                lambda_return(&r, &v, t, 0.0, 0.9).unwrap(),
                n_step_return(&r, &v, t, 1, 0.9).unwrap()
            );
            assert_eq!(lambda_return(&r, &v, t, 1.0, 0.9).unwrap(), full_return(&r, t, 0.9));
        }
        // three-step tail from t = 1
        let g = 0.9;
        let g1 = -0.5 + g * 4.0;
        let g2 = -0.5 + g * 2.0 + g * g * 2.0;
        let full = -0.5 + g * 2.0 + g * g * 0.25;
        let want = 0.5 * (g1 + 0.5 * g2) + 0.25 * full;
        assert_abs_diff_eq!(lambda_return(&r, &v, 1, 0.5, g).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn weighted_means() {
        assert_abs_diff_eq!(weighted_mean(&[1.0, 2.0, 3.0], &[1.0; 3]).unwrap(), 2.0);
        assert_eq!(weighted_mean(&[4.0, 9.0], &[1.0, 0.0]).unwrap(), 4.0);
        assert_abs_diff_eq!(
            weighted_mean(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(),
            17.0 / 7.0,
            epsilon = 1e-15
        );
        assert!(weighted_mean(&[1.0], &[0.0]).is_err());
        assert!(weighted_mean(&[1.0], &[-1.0]).is_err());

        let xs = [0.3, -1.2, 4.0, 2.5, 0.0, 1.1];
        let ws = [1.0, 0.5, 2.0, 0.0, 3.0, 0.25];
        let mut m = 0.0;
        for (x, a) in xs.iter().zip(weight_learning_rates(&ws)) {
            m = weighted_mean_incremental(m, *x, a);
        }
        assert_abs_diff_eq!(m, weighted_mean(&xs, &ws).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn exponential_weights() {
        for t in 1..30 {
            assert_eq!(exp_weight_alpha(1.0, t), 1.0 / t as f64);
        }
        assert_abs_diff_eq!(exp_weight_alpha(2.0, 200), 0.5, epsilon = 1e-15);
        let a = exp_weight_alpha(0.5, 20);
        assert_abs_diff_eq!(a, 1.0 / ((1u64 << 20) - 1) as f64, epsilon = 1e-20);
        assert!(a < 1e-5);

        for w in [0.5f64, 0.9, 1.0, 1.3] {
            let xs: Vec<f64> = (0..40).map(|i| ((i * 17) % 9) as f64 - 4.0).collect();
            let ws: Vec<f64> = (1..=40).map(|k| w.powi(k)).collect();
            let mut m = 0.0;
            for (t, x) in xs.iter().enumerate() {
                m = weighted_mean_incremental(m, *x, exp_weight_alpha(w, t as u32 + 1));
            }
            assert_abs_diff_eq!(m, weighted_mean(&xs, &ws).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn ensemble_forms() {
        let r = [0.5, -1.0, 2.0, 0.0, 1.5];
        assert_eq!(ensemble_h_expected(&[0.0; 5], &r, 0.3, 0.2, 5).unwrap(), 0.0);

        // p ≡ 1 is an every-step accumulating schedule
        let s = VisitSchedule::new(vec![1, 2, 3, 4, 5], r.to_vec()).unwrap();
        let acc = closed_form_h(&s, &params(GlowVariant::Accumulating, 0.3, 0.2)).unwrap();
        assert_abs_diff_eq!(ensemble_h_expected(&[1.0; 5], &r, 0.3, 0.2, 5).unwrap(), acc, epsilon = 1e-12);

        let a = ensemble_h_normalized(&r, 0.3, 0.2, 5, 7).unwrap();
        let b = ensemble_h_difference_form(&r, 0.3, 0.2, 5, 7).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert_abs_diff_eq!(a * 7.0, acc, epsilon = 1e-12);
        assert!(ensemble_h_difference_form(&r, 0.0, 0.2, 5, 1).is_err());
    }
}
