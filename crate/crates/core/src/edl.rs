//! Evidential head for binary classification.
//!
//! The network emits two unconstrained logits per sample; [`logits_to_evidence`]
//! maps them to nonnegative evidence `(e_0, e_1)`, which parameterizes a
//! Beta(e_0 + 1, e_1 + 1) posterior over the cancer probability. The training
//! objective is the closed-form Bayes risk of that posterior plus an annealed
//! KL penalty that drives evidence *against* the labeled class toward zero.
//! Every operation here is pure and comes with an analytic gradient; the tests
//! pin the math against Monte-Carlo, quadrature, and finite-difference oracles.

use ndarray::Array2;
use statrs::function::beta::ln_beta;
use statrs::function::gamma::digamma;

use crate::domain::EvidenceOutput;
use crate::error::{Error, Result};

/// KL annealing schedule: the penalty weight ramps linearly from 0 to
/// `kl_max_weight` over `kl_anneal_epochs` epochs and stays flat afterwards.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EdlLossConfig {
    pub kl_anneal_epochs: usize,
    pub kl_max_weight: f64,
}

impl Default for EdlLossConfig {
    fn default() -> Self {
        Self {
            kl_anneal_epochs: 10,
            kl_max_weight: 1.0,
        }
    }
}

impl EdlLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kl_anneal_epochs == 0 {
            return Err(Error::InvalidConfig(
                "kl_anneal_epochs must be at least 1".into(),
            ));
        }
        if !(self.kl_max_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "kl_max_weight must be nonnegative, got {}",
                self.kl_max_weight
            )));
        }
        Ok(())
    }

    /// λ(epoch) = kl_max_weight · min(1, epoch / kl_anneal_epochs).
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        self.kl_max_weight * (epoch as f64 / self.kl_anneal_epochs as f64).min(1.0)
    }
}

/// Numerically stable softplus ln(1 + eˣ).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps raw logits to strictly positive evidence, elementwise softplus.
pub fn logits_to_evidence(logits: &Array2<f64>) -> Result<Array2<f64>> {
    if logits.ncols() != 2 {
        return Err(Error::ShapeMismatch {
            expected: "n x 2 logits".into(),
            got: format!("{} x {}", logits.nrows(), logits.ncols()),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig("non-finite logit".into()));
    }
    Ok(logits.mapv(softplus))
}

/// Belief/uncertainty assignment for one evidence pair; see
/// [`EvidenceOutput::from_evidence`] for the arithmetic.
pub fn evidence_to_output(e0: f64, e1: f64) -> Result<EvidenceOutput> {
    EvidenceOutput::from_evidence(e0, e1)
}

/// Mean probability of class 1 under the Beta(e_1+1, e_0+1) posterior.
pub fn evidence_to_prob_cancer(e0: f64, e1: f64) -> f64 {
    (e1 + 1.0) / (e0 + e1 + 2.0)
}

/// Closed-form Bayes risk `E[(p − y)²]` under p ~ Beta(α_1, α_0) with
/// α_j = e_j + 1 and one-hot y: with S = α_0 + α_1 and p_j = α_j / S,
///
/// ```text
/// loss = Σ_j (y_j − p_j)² + p_j (1 − p_j) / (S + 1)
/// ```
pub fn bayes_risk_loss(e: (f64, f64), y: u8) -> Result<f64> {
    check_evidence(e)?;
    crate::domain::check_label(y)?;
    let (a0, a1) = (e.0 + 1.0, e.1 + 1.0);
    let s = a0 + a1;
    let (p0, p1) = (a0 / s, a1 / s);
    let (y0, y1) = one_hot(y);
    Ok((y0 - p0).powi(2)
        + (y1 - p1).powi(2)
        + (p0 * (1.0 - p0) + p1 * (1.0 - p1)) / (s + 1.0))
}

/// Gradient of [`bayes_risk_loss`] with respect to the evidence pair.
pub fn bayes_risk_grad(e: (f64, f64), y: u8) -> (f64, f64) {
    let (a0, a1) = (e.0 + 1.0, e.1 + 1.0);
    let s = a0 + a1;
    let p = [a0 / s, a1 / s];
    let yv = {
        let (y0, y1) = one_hot(y);
        [y0, y1]
    };
    // Common term: ∂/∂α_k of Σ_j p_j(1−p_j)/(S+1) through the explicit S.
    let var_term: f64 = (p[0] * (1.0 - p[0]) + p[1] * (1.0 - p[1])) / (s + 1.0).powi(2);
    let mut g = [0.0; 2];
    for (k, gk) in g.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..2 {
            let dp = (if j == k { 1.0 } else { 0.0 } - p[j]) / s;
            acc += (2.0 * (p[j] - yv[j]) + (1.0 - 2.0 * p[j]) / (s + 1.0)) * dp;
        }
        *gk = acc - var_term;
    }
    (g[0], g[1])
}

/// Misleading-evidence Beta parameters: evidence-plus-one with the true-class
/// component reset to 1, so only evidence *against* the label survives.
pub fn misleading_alpha(e: (f64, f64), y: u8) -> (f64, f64) {
    match y {
        0 => (1.0, e.1 + 1.0),
        _ => (e.0 + 1.0, 1.0),
    }
}

/// KL(Beta(a, b) ‖ Beta(1, 1)) in closed form via log-Beta and digamma:
///
/// ```text
/// KL = −ln B(a, b) + (a−1)ψ(a) + (b−1)ψ(b) − (a+b−2)ψ(a+b)
/// ```
pub fn kl_beta_vs_uniform(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "Beta parameters must be positive, got ({a}, {b})"
        )));
    }
    Ok(-ln_beta(a, b) + (a - 1.0) * digamma(a) + (b - 1.0) * digamma(b)
        - (a + b - 2.0) * digamma(a + b))
}

/// Annealed misleading-evidence penalty:
/// λ(epoch) · KL(Beta(α̃_0, α̃_1) ‖ Beta(1, 1)).
pub fn kl_regularizer(e: (f64, f64), y: u8, epoch: usize, config: &EdlLossConfig) -> Result<f64> {
    check_evidence(e)?;
    crate::domain::check_label(y)?;
    let lambda = config.kl_weight(epoch);
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let (a, b) = misleading_alpha(e, y);
    Ok(lambda * kl_beta_vs_uniform(a, b)?)
}

/// Gradient of [`kl_regularizer`] with respect to the evidence pair. The
/// true-class component is pinned at α̃ = 1 by construction, so its gradient
/// is zero; for the other component the digamma terms collapse through the
/// trigamma recurrence ψ′(x) − ψ′(x+1) = 1/x², leaving
/// dKL/dα̃ = (α̃ − 1)/α̃².
pub fn kl_regularizer_grad(e: (f64, f64), y: u8, epoch: usize, config: &EdlLossConfig) -> (f64, f64) {
    let lambda = config.kl_weight(epoch);
    if lambda == 0.0 {
        return (0.0, 0.0);
    }
    let against = 1 - y as usize;
    let alpha = [e.0, e.1][against] + 1.0;
    let d = lambda * (alpha - 1.0) / (alpha * alpha);
    if against == 0 {
        (d, 0.0)
    } else {
        (0.0, d)
    }
}

/// Per-sample evidential losses (Bayes risk + annealed KL) for a batch of
/// logits; used for small-loss sample selection.
pub fn per_sample_losses(
    logits: &Array2<f64>,
    labels: &[u8],
    epoch: usize,
    config: &EdlLossConfig,
) -> Result<Vec<f64>> {
    let evidence = logits_to_evidence(logits)?;
    if evidence.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", evidence.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    config.validate()?;
    let mut out = Vec::with_capacity(labels.len());
    for (row, &y) in evidence.outer_iter().zip(labels) {
        let e = (row[0], row[1]);
        out.push(bayes_risk_loss(e, y)? + kl_regularizer(e, y, epoch, config)?);
    }
    Ok(out)
}

/// Mean evidential loss over a batch.
pub fn edl_total_loss(
    logits: &Array2<f64>,
    labels: &[u8],
    epoch: usize,
    config: &EdlLossConfig,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("loss batch"));
    }
    let losses = per_sample_losses(logits, labels, epoch, config)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean evidential loss and its gradient with respect to the logits.
pub fn edl_total_loss_grad(
    logits: &Array2<f64>,
    labels: &[u8],
    epoch: usize,
    config: &EdlLossConfig,
) -> Result<(f64, Array2<f64>)> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("loss batch"));
    }
    let evidence = logits_to_evidence(logits)?;
    if evidence.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", evidence.nrows()),
            got: format!("{}", labels.len()),
        });
    }
    config.validate()?;
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (row, &y)) in evidence.outer_iter().zip(labels).enumerate() {
        let e = (row[0], row[1]);
        total += bayes_risk_loss(e, y)? + kl_regularizer(e, y, epoch, config)?;
        let gb = bayes_risk_grad(e, y);
        let gk = kl_regularizer_grad(e, y, epoch, config);
        grad[[i, 0]] = (gb.0 + gk.0) * sigmoid(logits[[i, 0]]) / n;
        grad[[i, 1]] = (gb.1 + gk.1) * sigmoid(logits[[i, 1]]) / n;
    }
    Ok((total / n, grad))
}

fn one_hot(y: u8) -> (f64, f64) {
    if y == 0 {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    }
}

fn check_evidence(e: (f64, f64)) -> Result<()> {
    if !(e.0 >= 0.0 && e.1 >= 0.0) {
        return Err(Error::NegativeEvidence(e.0, e.1));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Distribution};

    #[test]
    fn softplus_fixed_points() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(softplus(-40.0) < 1e-12);
        assert_abs_diff_eq!(softplus(20.0), 20.0, epsilon = 1e-6);
        // Strictly positive everywhere.
        assert!(softplus(-700.0) >= 0.0);
    }

    #[test]
    fn bayes_risk_no_evidence_is_two_thirds() {
        // α = (1, 1), S = 2: 0.25 + 0.25 + 2·(1/4)/3 = 2/3.
        let loss = bayes_risk_loss((0.0, 0.0), 1).unwrap();
        assert_abs_diff_eq!(loss, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bayes_risk_symmetric_evidence_label_invariant() {
        for k in [0.0, 0.5, 3.0, 40.0] {
            let l0 = bayes_risk_loss((k, k), 0).unwrap();
            let l1 = bayes_risk_loss((k, k), 1).unwrap();
            assert_abs_diff_eq!(l0, l1, epsilon = 1e-14);
        }
    }

    #[test]
    fn bayes_risk_rewards_correct_evidence() {
        let strong = bayes_risk_loss((100.0, 0.0), 0).unwrap();
        let none = bayes_risk_loss((0.0, 0.0), 0).unwrap();
        assert!(strong < none);
    }

    /// Monte-Carlo oracle: the closed form must match the empirical mean of
    /// (p − y)² for p drawn from Beta(α_1, α_0), within 3 standard errors.
    /// The full 100-pair sweep runs in the acceptance suite; this is a smoke
    /// version of the same oracle.
    #[test]
    fn bayes_risk_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xed1_0001);
        for &(e, y) in &[((0.0, 0.0), 1u8), ((3.0, 0.5), 0), ((0.2, 6.0), 1)] {
            let closed = bayes_risk_loss(e, y).unwrap();
            // p ~ Beta(α_1, α_0) is the probability of class 1.
            let beta = Beta::new(e.1 + 1.0, e.0 + 1.0).unwrap();
            let n = 200_000;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..n {
                let p = beta.sample(&mut rng);
                let (y0, y1) = if y == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
                let v = ((1.0 - p) - y0).powi(2) + (p - y1).powi(2);
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n as f64;
            let var = (sum_sq / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (closed - mean).abs() <= 3.0 * se.max(1e-6),
                "closed {closed} vs MC {mean} ± {se} at e={e:?}, y={y}"
            );
        }
    }

    #[test]
    fn kl_identity_distribution_is_zero() {
        assert_abs_diff_eq!(kl_beta_vs_uniform(1.0, 1.0).unwrap(), 0.0, epsilon = 1e-12);
        // No misleading evidence: e against the label is zero.
        let cfg = EdlLossConfig::default();
        let v = kl_regularizer((5.0, 0.0), 0, 20, &cfg).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_anneal_zero_epoch_is_zero() {
        let cfg = EdlLossConfig::default();
        assert_eq!(kl_regularizer((7.0, 3.0), 1, 0, &cfg).unwrap(), 0.0);
        assert_abs_diff_eq!(cfg.kl_weight(5), 0.5, epsilon = 1e-15);
        assert_eq!(cfg.kl_weight(10), 1.0);
        assert_eq!(cfg.kl_weight(1000), 1.0);
    }

    /// Value fixed by the quadrature oracle below: KL(Beta(3,1) ‖ Beta(1,1))
    /// = ln 3 − 2/3. (Closed form: −ln B(3,1) + 2ψ(3) − 2ψ(4), with
    /// ψ(3) − ψ(4) = −1/3.)
    #[test]
    fn kl_beta_three_one_fixed_value() {
        let v = kl_beta_vs_uniform(3.0, 1.0).unwrap();
        assert_abs_diff_eq!(v, 0.431_945_622_001_443_2, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 3f64.ln() - 2.0 / 3.0, epsilon = 1e-12);
    }

    /// Quadrature oracle: KL(Beta(a,b) ‖ Beta(1,1)) = ∫ f ln f dp, integrated
    /// by composite Simpson. Independent of the closed-form path.
    pub(crate) fn kl_by_quadrature(a: f64, b: f64) -> f64 {
        let ln_norm = -ln_beta(a, b);
        let f_ln_f = |p: f64| -> f64 {
            // For a, b ≥ 1 the integrand extends continuously to the
            // endpoints: each power term vanishes from ln f when its
            // exponent is zero, and ln f → −∞ means f ln f → 0.
            let t0 = if a == 1.0 { 0.0 } else { (a - 1.0) * p.ln() };
            let t1 = if b == 1.0 { 0.0 } else { (b - 1.0) * (1.0 - p).ln() };
            let ln_f = ln_norm + t0 + t1;
            if ln_f == f64::NEG_INFINITY {
                0.0
            } else {
                ln_f.exp() * ln_f
            }
        };
        let n = 40_000; // even
        let h = 1.0 / n as f64;
        let mut acc = f_ln_f(0.0) + f_ln_f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f_ln_f(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn kl_closed_form_matches_quadrature() {
        for &(a, b) in &[(3.0, 1.0), (1.0, 4.5), (2.2, 1.0), (1.0, 1.0), (7.9, 1.0)] {
            let closed = kl_beta_vs_uniform(a, b).unwrap();
            let quad = kl_by_quadrature(a, b);
            assert!(
                (closed - quad).abs() < 1e-4,
                "closed {closed} vs quadrature {quad} at ({a}, {b})"
            );
        }
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let cfg = EdlLossConfig::default();
        for &(e, y) in &[((2.0, 3.0), 0u8), ((0.5, 8.0), 1), ((4.0, 0.1), 0)] {
            let g = kl_regularizer_grad(e, y, 15, &cfg);
            let h = 1e-6;
            let num0 = (kl_regularizer((e.0 + h, e.1), y, 15, &cfg).unwrap()
                - kl_regularizer((e.0 - h, e.1), y, 15, &cfg).unwrap())
                / (2.0 * h);
            let num1 = (kl_regularizer((e.0, e.1 + h), y, 15, &cfg).unwrap()
                - kl_regularizer((e.0, e.1 - h), y, 15, &cfg).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(g.0, num0, epsilon = 1e-6);
            assert_abs_diff_eq!(g.1, num1, epsilon = 1e-6);
        }
    }

    #[test]
    fn total_loss_single_sample_reduces_to_parts() {
        let cfg = EdlLossConfig::default();
        let logits = arr2(&[[0.7, -1.2]]);
        let e = (softplus(0.7), softplus(-1.2));
        let total = edl_total_loss(&logits, &[1], 6, &cfg).unwrap();
        let expect =
            bayes_risk_loss(e, 1).unwrap() + kl_regularizer(e, 1, 6, &cfg).unwrap();
        assert_abs_diff_eq!(total, expect, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_batch_duplication_invariant() {
        let cfg = EdlLossConfig::default();
        let logits = arr2(&[[0.3, 1.1], [-2.0, 0.4], [5.0, -1.0]]);
        let labels = [0u8, 1, 0];
        let single = edl_total_loss(&logits, &labels, 4, &cfg).unwrap();
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[logits.view(), logits.view()])
            .unwrap();
        let mut labels2 = labels.to_vec();
        labels2.extend_from_slice(&labels);
        let twice = edl_total_loss(&doubled, &labels2, 4, &cfg).unwrap();
        assert_abs_diff_eq!(single, twice, epsilon = 1e-9);
    }

    #[test]
    fn total_loss_empty_batch_rejected() {
        let cfg = EdlLossConfig::default();
        let logits = Array2::<f64>::zeros((0, 2));
        assert!(edl_total_loss(&logits, &[], 1, &cfg).is_err());
    }

    #[test]
    fn total_loss_grad_matches_finite_differences() {
        let cfg = EdlLossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..5 {
            let logits =
                Array2::from_shape_fn((4, 2), |_| rng.gen_range(-4.0..4.0));
            let labels: Vec<u8> = (0..4).map(|_| rng.gen_range(0..2) as u8).collect();
            let (_, grad) = edl_total_loss_grad(&logits, &labels, 7, &cfg).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for j in 0..2 {
                    let mut plus = logits.clone();
                    plus[[i, j]] += h;
                    let mut minus = logits.clone();
                    minus[[i, j]] -= h;
                    let num = (edl_total_loss(&plus, &labels, 7, &cfg).unwrap()
                        - edl_total_loss(&minus, &labels, 7, &cfg).unwrap())
                        / (2.0 * h);
                    let denom = grad[[i, j]].abs().max(num.abs()).max(1e-8);
                    assert!(
                        (grad[[i, j]] - num).abs() / denom < 1e-4,
                        "grad[{i},{j}] analytic {} vs numeric {num}",
                        grad[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn per_sample_losses_finite_for_extreme_logits() {
        let cfg = EdlLossConfig::default();
        let logits = arr2(&[[-50.0, 50.0], [50.0, -50.0], [0.0, 0.0]]);
        let losses = per_sample_losses(&logits, &[0, 1, 0], 30, &cfg).unwrap();
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn prob_cancer_is_posterior_mean() {
        assert_abs_diff_eq!(evidence_to_prob_cancer(0.0, 0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(evidence_to_prob_cancer(0.0, 18.0), 0.95, epsilon = 1e-12);
        assert!(evidence_to_prob_cancer(18.0, 0.0) < 0.1);
    }
}
