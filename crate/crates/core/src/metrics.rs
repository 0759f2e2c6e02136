//! Likelihood metrics: model NLL, the naive constant predictor, LLHN, and
//! LLHN-Uplift. All values use the nonnegative NLL convention, which keeps
//! "positive LLHN means the model beats naive" true.

use crate::error::{Error, Result};

/// Predicted probabilities are clamped into [PROB_CLAMP, 1 - PROB_CLAMP]
/// before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Below this, LLHN denominators are treated as degenerate (one-class sets).
pub const DEGENERATE_EPS: f64 = 1e-9;

/// Predicted probability / label pairs for one evaluation scope.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pairs: Vec<(f64, i8)>,
}

impl ScoredSet {
    pub fn new(pairs: Vec<(f64, i8)>) -> Result<Self> {
        for (i, &(p, y)) in pairs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::Argument(format!("pair {i}: probability is not finite")));
            }
            if y != 1 && y != -1 {
                return Err(Error::Argument(format!("pair {i}: label must be +1 or -1")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn push(&mut self, p: f64, y: i8) {
        self.pairs.push((p, y));
    }

    pub fn pairs(&self) -> &[(f64, i8)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-event negative log-likelihood of label `y` under probability `p`.
pub fn event_nll(p: f64, y: i8) -> f64 {
    let p = clamp_prob(p);
    if y > 0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn require_nonempty(s: &ScoredSet, op: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Argument(format!("{op} requires a nonempty scored set")));
    }
    Ok(())
}

/// Sum of -log P(y_i | x_i) over the set, probabilities clamped.
pub fn model_nll(s: &ScoredSet) -> Result<f64> {
    require_nonempty(s, "model_nll")?;
    Ok(pairwise_sum(s.pairs(), |&(p, y)| event_nll(p, y)))
}

/// Fraction of positive labels: the constant the naive model predicts.
pub fn naive_constant(s: &ScoredSet) -> Result<f64> {
    require_nonempty(s, "naive_constant")?;
    let positives = s.pairs().iter().filter(|&&(_, y)| y > 0).count();
    Ok(positives as f64 / s.len() as f64)
}

/// NLL of the naive constant predictor; equals n * H(c) in nats.
pub fn naive_nll(s: &ScoredSet) -> Result<f64> {
    require_nonempty(s, "naive_nll")?;
    let positives = s.pairs().iter().filter(|&&(_, y)| y > 0).count() as u64;
    Ok(naive_nll_from_counts(positives, s.len() as u64 - positives))
}

/// Naive NLL directly from label tallies, with the same clamping as
/// [`naive_nll`]. Used when period cells are assembled from counters.
pub fn naive_nll_from_counts(positives: u64, negatives: u64) -> f64 {
    let n = positives + negatives;
    if n == 0 {
        return 0.0;
    }
    let c = clamp_prob(positives as f64 / n as f64);
    positives as f64 * -c.ln() + negatives as f64 * -(1.0 - c).ln()
}

/// LLHN = (naive - model) / naive. Positive values mean the model beats naive.
pub fn llhn(model_nll: f64, naive_nll: f64) -> Result<f64> {
    if naive_nll <= DEGENERATE_EPS {
        return Err(Error::Degenerate(format!(
            "naive NLL {naive_nll} is (numerically) zero; one-class test set"
        )));
    }
    Ok((naive_nll - model_nll) / naive_nll)
}

/// LLHN-Uplift = (model LLHN - baseline LLHN) / baseline LLHN.
pub fn llhn_uplift(model_llhn: f64, baseline_llhn: f64) -> Result<f64> {
    if baseline_llhn.abs() < DEGENERATE_EPS {
        return Err(Error::Degenerate(format!(
            "baseline LLHN {baseline_llhn} is too close to zero; uplift undefined"
        )));
    }
    Ok((model_llhn - baseline_llhn) / baseline_llhn)
}

fn pairwise_sum<T>(items: &[T], term: impl Fn(&T) -> f64 + Copy) -> f64 {
    match items.len() {
        0 => 0.0,
        n if n <= 32 => items.iter().map(term).sum(),
        n => {
            let (a, b) = items.split_at(n / 2);
            pairwise_sum(a, term) + pairwise_sum(b, term)
        }
    }
}
