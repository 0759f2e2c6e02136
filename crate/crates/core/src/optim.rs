//! Weighted L2-regularized logistic loss, its gradient, and the two-stage
//! SGD-warm-started L-BFGS minimizer.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SparseFeatureVector;

const ADAGRAD_EPS: f64 = 1e-8;
const ARMIJO_C1: f64 = 1e-4;
const MAX_HALVINGS: u32 = 50;
const CURVATURE_MIN: f64 = 1e-10;

/// Dense coefficient vector of length 2^dimension_bits with its regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    w: Vec<f64>,
    dimension_bits: u8,
    lambda: f64,
}

impl ModelWeights {
    /// All-zero weights.
    pub fn zeros(dimension_bits: u8, lambda: f64) -> Result<Self> {
        Self::from_vec(vec![0.0; 1usize << dimension_bits], dimension_bits, lambda)
    }

    pub fn from_vec(w: Vec<f64>, dimension_bits: u8, lambda: f64) -> Result<Self> {
        if w.len() != 1usize << dimension_bits {
            return Err(Error::Argument(format!(
                "weight vector length {} does not match 2^{dimension_bits}",
                w.len()
            )));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Argument(format!("lambda must be positive, got {lambda}")));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("weight vector contains non-finite entries".into()));
        }
        Ok(Self { w, dimension_bits, lambda })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn dimension_bits(&self) -> u8 {
        self.dimension_bits
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// One training row: features, label in {-1, +1}, and importance weight.
#[derive(Debug, Clone)]
pub struct DataRow {
    pub x: SparseFeatureVector,
    pub y: i8,
    pub weight: f64,
}

/// Importance-weighted training set over a shared hash space.
#[derive(Debug, Clone)]
pub struct WeightedDataset {
    rows: Vec<DataRow>,
    dimension_bits: u8,
}

impl WeightedDataset {
    pub fn new(rows: Vec<DataRow>, dimension_bits: u8) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.x.dimension_bits() != dimension_bits {
                return Err(Error::Argument(format!(
                    "row {i}: dimension_bits {} does not match dataset {dimension_bits}",
                    row.x.dimension_bits()
                )));
            }
            if row.y != 1 && row.y != -1 {
                return Err(Error::Argument(format!("row {i}: label must be +1 or -1")));
            }
            if !(row.weight > 0.0) || !row.weight.is_finite() {
                return Err(Error::Argument(format!(
                    "row {i}: weight must be positive and finite, got {}",
                    row.weight
                )));
            }
        }
        Ok(Self { rows, dimension_bits })
    }

    pub fn rows(&self) -> &[DataRow] {
        &self.rows
    }

    pub fn dimension_bits(&self) -> u8 {
        self.dimension_bits
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Hyperparameters for the SGD warm start and the L-BFGS refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub sgd_epochs: u32,
    pub sgd_learning_rate: f64,
    pub lbfgs_memory: usize,
    /// Termination threshold on the gradient's infinity norm.
    pub gradient_tolerance: f64,
    pub max_lbfgs_iterations: u32,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            sgd_epochs: 1,
            sgd_learning_rate: 0.1,
            lbfgs_memory: 10,
            gradient_tolerance: 1e-6,
            max_lbfgs_iterations: 100,
            seed: 42,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sgd_learning_rate < 0.0 || !self.sgd_learning_rate.is_finite() {
            return Err(Error::Config("sgd_learning_rate must be nonnegative".into()));
        }
        if self.lbfgs_memory < 3 {
            return Err(Error::Config("lbfgs_memory must be at least 3".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Config("gradient_tolerance must be positive".into()));
        }
        if self.max_lbfgs_iterations == 0 {
            return Err(Error::Config("max_lbfgs_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Numerically stable log(1 + e^u).
#[inline]
fn log1p_exp(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Numerically stable logistic function, exact for |z| well beyond 500.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Pairwise reduction of fixed-size sequential blocks; deterministic for a
/// given input order and more accurate than a running sum on long inputs.
fn block_pairwise_sum<I: Iterator<Item = f64>>(mut terms: I) -> f64 {
    const BLOCK: usize = 1024;
    let mut partials: Vec<f64> = Vec::new();
    loop {
        let mut block_sum = 0.0;
        let mut n = 0;
        for t in terms.by_ref().take(BLOCK) {
            block_sum += t;
            n += 1;
        }
        if n == 0 {
            break;
        }
        partials.push(block_sum);
    }
    pairwise(&partials)
}

fn pairwise(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise(a) + pairwise(b)
        }
    }
}

fn check_dims(weights: &ModelWeights, dimension_bits: u8) -> Result<()> {
    if weights.dimension_bits() != dimension_bits {
        return Err(Error::Argument(format!(
            "dimension mismatch: weights have {} bits, data has {dimension_bits}",
            weights.dimension_bits()
        )));
    }
    Ok(())
}

/// sigma(w . x) for a single example, clamped into the open interval (0, 1)
/// so saturated margins never round to exactly 0 or 1.
pub fn predict_probability(weights: &ModelWeights, x: &SparseFeatureVector) -> Result<f64> {
    check_dims(weights, x.dimension_bits())?;
    Ok(sigmoid(x.dot(weights.as_slice())).clamp(f64::MIN_POSITIVE, 1.0f64.next_down()))
}

fn regularizer(w: &[f64], lambda: f64) -> f64 {
    let mut sq = 0.0;
    for &v in w {
        sq += v * v;
    }
    0.5 * lambda * sq
}

fn objective(rows: &[DataRow], w: &[f64], lambda: f64) -> f64 {
    let terms = rows.iter().map(|r| {
        let z = f64::from(r.y) * r.x.dot(w);
        r.weight * log1p_exp(-z)
    });
    block_pairwise_sum(terms) + regularizer(w, lambda)
}

/// Fused objective + gradient evaluation; `grad` is overwritten.
fn objective_and_gradient(rows: &[DataRow], w: &[f64], lambda: f64, grad: &mut [f64]) -> f64 {
    const BLOCK: usize = 1024;
    for g in grad.iter_mut() {
        *g = 0.0;
    }
    let mut partials = Vec::with_capacity(rows.len() / BLOCK + 1);
    for block in rows.chunks(BLOCK) {
        let mut block_sum = 0.0;
        for r in block {
            let y = f64::from(r.y);
            let z = y * r.x.dot(w);
            block_sum += r.weight * log1p_exp(-z);
            let coef = r.weight * -y * sigmoid(-z);
            for &(i, v) in r.x.entries() {
                grad[i as usize] += coef * v;
            }
        }
        partials.push(block_sum);
    }
    for (g, &v) in grad.iter_mut().zip(w) {
        *g += lambda * v;
    }
    pairwise(&partials) + regularizer(w, lambda)
}

/// WNLL = sum_i d(t_i) log(1 + exp(-y_i w.x_i)) + (lambda/2) ||w||^2.
/// With all weights 1 this is the plain regularized logistic loss.
pub fn weighted_nll(weights: &ModelWeights, data: &WeightedDataset) -> Result<f64> {
    check_dims(weights, data.dimension_bits())?;
    let value = objective(data.rows(), weights.as_slice(), weights.lambda());
    if !value.is_finite() {
        return Err(Error::Numeric("weighted_nll produced a non-finite value".into()));
    }
    Ok(value)
}

/// Gradient of [`weighted_nll`]: sum_i d(t_i) (-y_i sigma(-y_i w.x_i)) x_i + lambda w.
pub fn weighted_nll_gradient(weights: &ModelWeights, data: &WeightedDataset) -> Result<Vec<f64>> {
    check_dims(weights, data.dimension_bits())?;
    let mut grad = vec![0.0; weights.len()];
    let value =
        objective_and_gradient(data.rows(), weights.as_slice(), weights.lambda(), &mut grad);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("gradient produced a non-finite value".into()));
    }
    Ok(grad)
}

/// One (or more) seeded shuffled passes of per-example AdaGrad steps.
///
/// Each example's loss gradient is scaled by its importance weight; the
/// regularizer is applied per example as (lambda/N) w on the touched
/// coordinates. Deterministic for a fixed (data, w0, config).
pub fn sgd_warmstart(
    data: &WeightedDataset,
    w0: &ModelWeights,
    config: &OptimConfig,
) -> Result<ModelWeights> {
    check_dims(w0, data.dimension_bits())?;
    config.validate()?;
    let mut w = w0.as_slice().to_vec();
    if data.is_empty() || config.sgd_learning_rate == 0.0 {
        return ModelWeights::from_vec(w, w0.dimension_bits(), w0.lambda());
    }

    let lambda_per_row = w0.lambda() / data.len() as f64;
    let lr = config.sgd_learning_rate;
    let mut accum = vec![0.0f64; w.len()];
    let mut order: Vec<u32> = (0..data.len() as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for _ in 0..config.sgd_epochs {
        order.shuffle(&mut rng);
        for &ri in &order {
            let row = &data.rows()[ri as usize];
            let y = f64::from(row.y);
            let z = y * row.x.dot(&w);
            let coef = row.weight * -y * sigmoid(-z);
            for &(i, v) in row.x.entries() {
                let i = i as usize;
                let g = coef * v + lambda_per_row * w[i];
                accum[i] += g * g;
                w[i] -= lr * g / (accum[i] + ADAGRAD_EPS).sqrt();
            }
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("SGD produced non-finite weights".into()));
    }
    ModelWeights::from_vec(w, w0.dimension_bits(), w0.lambda())
}

/// How an L-BFGS run terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    /// Gradient infinity norm reached the configured tolerance.
    GradientTolerance,
    /// Iteration cap reached first.
    IterationLimit,
    /// Backtracking found no decreasing step; best-so-far returned.
    LineSearchFailed,
}

/// Result of [`lbfgs_minimize`].
#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub weights: ModelWeights,
    pub iterations: u32,
    pub final_grad_norm: f64,
    pub objective: f64,
    pub convergence: Convergence,
}

/// Limited-memory BFGS with two-loop recursion and Armijo backtracking.
///
/// Terminates when the gradient infinity norm falls below
/// `config.gradient_tolerance` or after `config.max_lbfgs_iterations`
/// iterations. The returned objective never exceeds the objective at `w0`.
pub fn lbfgs_minimize(
    data: &WeightedDataset,
    w0: &ModelWeights,
    config: &OptimConfig,
) -> Result<LbfgsOutcome> {
    check_dims(w0, data.dimension_bits())?;
    config.validate()?;
    let lambda = w0.lambda();
    let n = w0.len();

    let mut x = w0.as_slice().to_vec();
    let mut grad = vec![0.0; n];
    let mut fx = objective_and_gradient(data.rows(), &x, lambda, &mut grad);
    if !fx.is_finite() {
        return Err(Error::Numeric("objective non-finite at the starting point".into()));
    }

    let mut s_history: Vec<Vec<f64>> = Vec::with_capacity(config.lbfgs_memory);
    let mut y_history: Vec<Vec<f64>> = Vec::with_capacity(config.lbfgs_memory);
    let mut rho_history: Vec<f64> = Vec::with_capacity(config.lbfgs_memory);

    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
    let mut grad_norm = inf_norm(&grad);
    let mut iterations = 0u32;
    let mut convergence = Convergence::IterationLimit;

    let mut x_new = vec![0.0; n];
    let mut grad_new = vec![0.0; n];

    while iterations < config.max_lbfgs_iterations {
        if grad_norm <= config.gradient_tolerance {
            convergence = Convergence::GradientTolerance;
            break;
        }

        // Two-loop recursion: d approximates -H^{-1} grad.
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let k = s_history.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let alpha = rho_history[i] * dot(&s_history[i], &d);
            alphas[i] = alpha;
            axpy(-alpha, &y_history[i], &mut d);
        }
        if k > 0 {
            let s = &s_history[k - 1];
            let y = &y_history[k - 1];
            let gamma = dot(s, y) / dot(y, y);
            for v in d.iter_mut() {
                *v *= gamma;
            }
        }
        for i in 0..k {
            let beta = rho_history[i] * dot(&y_history[i], &d);
            axpy(alphas[i] - beta, &s_history[i], &mut d);
        }

        let mut dg = dot(&grad, &d);
        if dg >= 0.0 {
            // Not a descent direction (stale curvature); fall back to steepest descent.
            for (di, gi) in d.iter_mut().zip(&grad) {
                *di = -gi;
            }
            dg = -dot(&grad, &grad);
        }

        // Backtracking Armijo line search.
        let mut step = 1.0f64;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_new = objective(data.rows(), &x_new, lambda);
            if f_new.is_finite() && f_new <= fx + ARMIJO_C1 * step * dg {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            convergence = Convergence::LineSearchFailed;
            break;
        }

        let f_new = objective_and_gradient(data.rows(), &x_new, lambda, &mut grad_new);
        debug_assert!(f_new <= fx, "accepted step must not increase the objective");

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > CURVATURE_MIN {
            if s_history.len() == config.lbfgs_memory {
                s_history.remove(0);
                y_history.remove(0);
                rho_history.remove(0);
            }
            rho_history.push(1.0 / sy);
            s_history.push(s);
            y_history.push(y);
        }

        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut grad, &mut grad_new);
        fx = f_new;
        grad_norm = inf_norm(&grad);
        iterations += 1;
    }
    if iterations == config.max_lbfgs_iterations {
        convergence = if grad_norm <= config.gradient_tolerance {
            Convergence::GradientTolerance
        } else {
            Convergence::IterationLimit
        };
    }

    Ok(LbfgsOutcome {
        weights: ModelWeights::from_vec(x, w0.dimension_bits(), lambda)?,
        iterations,
        final_grad_norm: grad_norm,
        objective: fx,
        convergence,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// d(t) = 2^(-age / half_life), age = reference_day - event_day.
pub fn decay_weight(event_day: i64, reference_day: i64, half_life_days: f64) -> Result<f64> {
    if !(half_life_days > 0.0) {
        return Err(Error::Argument(format!(
            "half_life_days must be positive, got {half_life_days}"
        )));
    }
    if event_day > reference_day {
        return Err(Error::Argument(format!(
            "event day {event_day} is after reference day {reference_day}; \
             future data must never enter training"
        )));
    }
    let age = (reference_day - event_day) as f64;
    Ok((-age / half_life_days).exp2())
}

/// lambda_WNLL = lambda_NLL * mean(weights).
pub fn adapt_lambda(lambda_nll: f64, weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Argument("adapt_lambda requires a nonempty weight sequence".into()));
    }
    let sum: f64 = weights.iter().sum();
    Ok(lambda_nll * sum / weights.len() as f64)
}

const WEIGHTS_MAGIC: &[u8; 4] = b"CRWT";
const WEIGHTS_VERSION: u16 = 1;

/// Binary weight block: magic, version, b, lambda, little-endian f64 array.
pub fn write_weights<W: Write>(weights: &ModelWeights, out: &mut W) -> Result<()> {
    out.write_all(WEIGHTS_MAGIC)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    out.write_all(&[weights.dimension_bits(), 0])?;
    out.write_all(&weights.lambda().to_le_bytes())?;
    out.write_all(&(weights.len() as u64).to_le_bytes())?;
    for v in weights.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_weights<R: Read>(input: &mut R) -> Result<ModelWeights> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Argument("not a weight artifact (bad magic)".into()));
    }
    let mut buf2 = [0u8; 2];
    input.read_exact(&mut buf2)?;
    if u16::from_le_bytes(buf2) != WEIGHTS_VERSION {
        return Err(Error::Argument("unsupported weight artifact version".into()));
    }
    input.read_exact(&mut buf2)?;
    let dimension_bits = buf2[0];
    let mut buf8 = [0u8; 8];
    input.read_exact(&mut buf8)?;
    let lambda = f64::from_le_bytes(buf8);
    input.read_exact(&mut buf8)?;
    let len = u64::from_le_bytes(buf8) as usize;
    if len != 1usize << dimension_bits {
        return Err(Error::Argument("weight artifact length does not match 2^b".into()));
    }
    let mut w = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut buf8)?;
        w.push(f64::from_le_bytes(buf8));
    }
    ModelWeights::from_vec(w, dimension_bits, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn vecf(pairs: Vec<(u32, f64)>, b: u8) -> SparseFeatureVector {
        SparseFeatureVector::from_pairs(pairs, b).unwrap()
    }

    fn dataset(rows: Vec<(Vec<(u32, f64)>, i8, f64)>, b: u8) -> WeightedDataset {
        let rows = rows
            .into_iter()
            .map(|(pairs, y, weight)| DataRow { x: vecf(pairs, b), y, weight })
            .collect();
        WeightedDataset::new(rows, b).unwrap()
    }

    /// Independent oracle: naive Kahan-compensated sum over the textbook formula.
    fn nll_oracle(weights: &ModelWeights, data: &WeightedDataset) -> f64 {
        let w = weights.as_slice();
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        let mut add = |v: f64| {
            let t = v - comp;
            let s = sum + t;
            comp = (s - sum) - t;
            sum = s;
        };
        for r in data.rows() {
            let mut z = 0.0;
            for &(i, v) in r.x.entries() {
                z += w[i as usize] * v;
            }
            add(r.weight * (1.0 + (-f64::from(r.y) * z).exp()).ln());
        }
        let mut sq = 0.0;
        for &v in w {
            sq += v * v;
        }
        sum + 0.5 * weights.lambda() * sq
    }

    fn random_instance(rng: &mut impl Rng, b: u8, max_rows: usize) -> (WeightedDataset, ModelWeights) {
        let dim = 1usize << b;
        let n = rng.gen_range(1..=max_rows);
        let mut rows = Vec::new();
        for _ in 0..n {
            let nnz = rng.gen_range(1..=10.min(dim));
            let mut pairs = Vec::new();
            for _ in 0..nnz {
                pairs.push((rng.gen_range(0..dim) as u32, rng.gen_range(-2.0..2.0)));
            }
            let y = if rng.gen_bool(0.5) { 1 } else { -1 };
            let weight = rng.gen_range(0.1..3.0);
            let x = SparseFeatureVector::from_pairs(pairs, b).unwrap();
            if x.nnz() == 0 {
                continue;
            }
            rows.push(DataRow { x, y, weight });
        }
        if rows.is_empty() {
            rows.push(DataRow { x: vecf(vec![(0, 1.0)], b), y: 1, weight: 1.0 });
        }
        let lambda = rng.gen_range(0.5..2.0);
        let w: Vec<f64> = (0..dim)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let weights = ModelWeights::from_vec(w, b, lambda).unwrap();
        (WeightedDataset::new(rows, b).unwrap(), weights)
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(500.0).is_finite());
        assert!(sigmoid(-500.0) > 0.0);
        assert!(sigmoid(-500.0).is_finite());
        assert!(!sigmoid(40.0).is_nan() && !sigmoid(-40.0).is_nan());
    }

    #[test]
    fn predict_probability_basics() {
        let b = 4;
        let w = ModelWeights::zeros(b, 1.0).unwrap();
        let x = vecf(vec![(1, 1.0), (3, 2.0)], b);
        assert_eq!(predict_probability(&w, &x).unwrap(), 0.5);

        // saturated margin stays strictly inside (0, 1) and finite
        let mut dense = vec![0.0; 16];
        dense[1] = 40.0;
        let w = ModelWeights::from_vec(dense, b, 1.0).unwrap();
        let p = predict_probability(&w, &vecf(vec![(1, 1.0)], b)).unwrap();
        assert!(p > 1.0 - 1e-15 && p < 1.0 && p.is_finite());
        let q = predict_probability(&w, &vecf(vec![(1, -12.5)], b)).unwrap();
        assert!(q > 0.0 && q < 1e-15);

        let x_bad = vecf(vec![(1, 1.0)], 5);
        assert!(predict_probability(&w, &x_bad).is_err());
    }

    #[test]
    fn nll_at_zero_weights_is_n_log2() {
        let b = 3;
        let data = dataset(
            vec![
                (vec![(0, 1.0)], 1, 1.0),
                (vec![(1, 1.0)], -1, 1.0),
                (vec![(2, 1.0)], 1, 1.0),
            ],
            b,
        );
        let w = ModelWeights::zeros(b, 7.5).unwrap();
        let nll = weighted_nll(&w, &data).unwrap();
        assert!((nll - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn nll_weight_linearity_on_zero_margin() {
        // w = (a, -a), x has both coordinates at 1.0, so y w.x = 0.
        let b = 3;
        let data = dataset(vec![(vec![(0, 1.0), (1, 1.0)], 1, 2.0)], b);
        let mut dense = vec![0.0; 8];
        dense[0] = 1.5;
        dense[1] = -1.5;
        let lambda = 0.8;
        let w = ModelWeights::from_vec(dense.clone(), b, lambda).unwrap();
        let nll = weighted_nll(&w, &data).unwrap();
        let norm_sq: f64 = dense.iter().map(|v| v * v).sum();
        let expected = 2.0 * std::f64::consts::LN_2 + 0.5 * lambda * norm_sq;
        assert!((nll - expected).abs() < 1e-15, "{nll} vs {expected}");
    }

    #[test]
    fn nll_matches_high_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let (data, weights) = random_instance(&mut rng, 5, 50);
            let got = weighted_nll(&weights, &data).unwrap();
            let want = nll_oracle(&weights, &data);
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn unit_weights_reduce_to_plain_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (data, weights) = random_instance(&mut rng, 4, 30);
        let unit_rows: Vec<DataRow> = data
            .rows()
            .iter()
            .map(|r| DataRow { x: r.x.clone(), y: r.y, weight: 1.0 })
            .collect();
        let unit = WeightedDataset::new(unit_rows, data.dimension_bits()).unwrap();
        // Same code path evaluates both; equality must be exact.
        let via_weighted = weighted_nll(&weights, &unit).unwrap();
        let plain = nll_oracle(&weights, &unit);
        assert!((via_weighted - plain).abs() <= 1e-15 * plain.abs().max(1.0));
    }

    #[test]
    fn scaling_weights_and_lambda_scales_objective_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (data, weights) = random_instance(&mut rng, 4, 30);
        let c = 2.0; // power of two: scaling must be bit-exact
        let scaled_rows: Vec<DataRow> = data
            .rows()
            .iter()
            .map(|r| DataRow { x: r.x.clone(), y: r.y, weight: c * r.weight })
            .collect();
        let scaled = WeightedDataset::new(scaled_rows, data.dimension_bits()).unwrap();
        let scaled_w = ModelWeights::from_vec(
            weights.as_slice().to_vec(),
            weights.dimension_bits(),
            c * weights.lambda(),
        )
        .unwrap();
        let base = weighted_nll(&weights, &data).unwrap();
        let scaled_val = weighted_nll(&scaled_w, &scaled).unwrap();
        assert_eq!(scaled_val, c * base);
    }

    #[test]
    fn scaling_leaves_argmin_unchanged() {
        let b = 4;
        let data = dataset(
            vec![
                (vec![(0, 1.0), (2, 1.0)], 1, 1.0),
                (vec![(0, 1.0), (3, 0.5)], -1, 0.7),
                (vec![(1, 1.0), (2, -1.0)], 1, 1.3),
                (vec![(1, 1.0)], -1, 0.4),
            ],
            b,
        );
        let c = 3.0;
        let scaled_rows: Vec<DataRow> = data
            .rows()
            .iter()
            .map(|r| DataRow { x: r.x.clone(), y: r.y, weight: c * r.weight })
            .collect();
        let scaled = WeightedDataset::new(scaled_rows, b).unwrap();
        let cfg = OptimConfig { gradient_tolerance: 1e-10, ..Default::default() };
        let w0 = ModelWeights::zeros(b, 1.0).unwrap();
        let w0_scaled = ModelWeights::zeros(b, c).unwrap();
        let a = lbfgs_minimize(&data, &w0, &cfg).unwrap();
        let bb = lbfgs_minimize(&scaled, &w0_scaled, &cfg).unwrap();
        for (x, y) in a.weights.as_slice().iter().zip(bb.weights.as_slice()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn convexity_witness() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let (data, w1) = random_instance(&mut rng, 4, 30);
            let (_, w2) = random_instance(&mut rng, 4, 30);
            let w2 = ModelWeights::from_vec(
                w2.as_slice().to_vec(),
                w1.dimension_bits(),
                w1.lambda(),
            )
            .unwrap();
            let t: f64 = rng.gen_range(0.01..0.99);
            let mixed: Vec<f64> = w1
                .as_slice()
                .iter()
                .zip(w2.as_slice())
                .map(|(a, b)| t * a + (1.0 - t) * b)
                .collect();
            let wm =
                ModelWeights::from_vec(mixed, w1.dimension_bits(), w1.lambda()).unwrap();
            let fm = weighted_nll(&wm, &data).unwrap();
            let f1 = weighted_nll(&w1, &data).unwrap();
            let f2 = weighted_nll(&w2, &data).unwrap();
            assert!(fm <= t * f1 + (1.0 - t) * f2 + 1e-12);
        }
    }

    #[test]
    fn gradient_symmetry_cancellation() {
        // Balanced +/- labels on the same x at w = 0 with tiny lambda: the data
        // term cancels; lambda * 0 = 0.
        let b = 3;
        let data = dataset(
            vec![
                (vec![(0, 1.0), (1, 2.0)], 1, 1.0),
                (vec![(0, 1.0), (1, 2.0)], -1, 1.0),
            ],
            b,
        );
        let w = ModelWeights::zeros(b, 1e-300).unwrap();
        let g = weighted_nll_gradient(&w, &data).unwrap();
        assert!(g.iter().all(|&v| v == 0.0), "{g:?}");
    }

    #[test]
    fn gradient_of_empty_dataset_is_regularizer() {
        let b = 3;
        let data = WeightedDataset::new(vec![], b).unwrap();
        let dense: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let lambda = 2.5;
        let w = ModelWeights::from_vec(dense.clone(), b, lambda).unwrap();
        let g = weighted_nll_gradient(&w, &data).unwrap();
        for (gi, wi) in g.iter().zip(&dense) {
            assert_eq!(*gi, lambda * wi);
        }
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = 1e-5;
        for _ in 0..20 {
            let (data, weights) = random_instance(&mut rng, 5, 20);
            let g = weighted_nll_gradient(&weights, &data).unwrap();
            for j in 0..weights.len() {
                let mut plus = weights.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[j] += h;
                minus[j] -= h;
                let wp = ModelWeights::from_vec(plus, 5, weights.lambda()).unwrap();
                let wm = ModelWeights::from_vec(minus, 5, weights.lambda()).unwrap();
                let fd = (weighted_nll(&wp, &data).unwrap()
                    - weighted_nll(&wm, &data).unwrap())
                    / (2.0 * h);
                let denom = g[j].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (g[j] - fd).abs() / denom < 1e-5,
                    "coord {j}: analytic {} vs fd {fd}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn sgd_zero_learning_rate_is_identity() {
        let b = 3;
        let data = dataset(vec![(vec![(0, 1.0)], 1, 1.0)], b);
        let w0 = ModelWeights::zeros(b, 1.0).unwrap();
        let cfg = OptimConfig { sgd_learning_rate: 0.0, ..Default::default() };
        let w1 = sgd_warmstart(&data, &w0, &cfg).unwrap();
        assert_eq!(w1.as_slice(), w0.as_slice());
    }

    #[test]
    fn sgd_increases_margin_on_separable_point() {
        let b = 3;
        let data = dataset(vec![(vec![(1, 1.0)], 1, 1.0)], b);
        let w0 = ModelWeights::zeros(b, 0.1).unwrap();
        let cfg = OptimConfig::default();
        let w1 = sgd_warmstart(&data, &w0, &cfg).unwrap();
        let x = vecf(vec![(1, 1.0)], b);
        let margin = x.dot(w1.as_slice());
        assert!(margin > 0.0, "margin should increase from 0, got {margin}");
    }

    #[test]
    fn sgd_same_seed_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (data, _) = random_instance(&mut rng, 4, 40);
        let w0 = ModelWeights::zeros(4, 1.0).unwrap();
        let cfg = OptimConfig { sgd_epochs: 3, ..Default::default() };
        let a = sgd_warmstart(&data, &w0, &cfg).unwrap();
        let b = sgd_warmstart(&data, &w0, &cfg).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn lbfgs_returns_immediately_at_stationary_point() {
        let b = 3;
        let data = dataset(
            vec![
                (vec![(0, 1.0)], 1, 1.0),
                (vec![(0, 1.0)], -1, 1.0),
            ],
            b,
        );
        let w0 = ModelWeights::zeros(b, 1.0).unwrap();
        let out = lbfgs_minimize(&data, &w0, &OptimConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.convergence, Convergence::GradientTolerance);
    }

    /// Golden-section search oracle over a 1-D objective.
    fn golden_min(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        while hi - lo > 1e-12 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) <= f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        f(0.5 * (lo + hi))
    }

    #[test]
    fn lbfgs_matches_golden_section_on_one_feature() {
        let b = 3;
        let data = dataset(
            vec![
                (vec![(2, 1.0)], 1, 1.0),
                (vec![(2, 1.5)], -1, 1.0),
            ],
            b,
        );
        let lambda = 1.0;
        let w0 = ModelWeights::zeros(b, lambda).unwrap();
        let cfg = OptimConfig { gradient_tolerance: 1e-10, ..Default::default() };
        let out = lbfgs_minimize(&data, &w0, &cfg).unwrap();

        let rows = data.rows().to_vec();
        let oracle = golden_min(-20.0, 20.0, |w| {
            let mut obj = 0.5 * lambda * w * w;
            for r in &rows {
                let z = f64::from(r.y) * w * r.x.entries()[0].1;
                obj += r.weight * (1.0 + (-z).exp()).ln();
            }
            obj
        });
        assert!((out.objective - oracle).abs() < 1e-9, "{} vs {oracle}", out.objective);
    }

    #[test]
    fn lbfgs_beats_sgd_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (data, _) = random_instance(&mut rng, 4, 40);
        let w0 = ModelWeights::zeros(4, 1.0).unwrap();
        let cfg = OptimConfig::default();
        let warm = sgd_warmstart(&data, &w0, &cfg).unwrap();
        let f_sgd = weighted_nll(&warm, &data).unwrap();
        let out = lbfgs_minimize(&data, &warm, &cfg).unwrap();
        assert!(out.objective <= f_sgd + 1e-12);
        let f_start = weighted_nll(&w0, &data).unwrap();
        assert!(out.objective <= f_start);
    }

    #[test]
    fn decay_weight_examples() {
        assert_eq!(decay_weight(10, 10, 5.0).unwrap(), 1.0);
        assert_eq!(decay_weight(5, 10, 5.0).unwrap(), 0.5);
        assert_eq!(decay_weight(0, 10, 5.0).unwrap(), 0.25);
        assert!(decay_weight(11, 10, 5.0).is_err());
        assert!(decay_weight(0, 10, 0.0).is_err());
    }

    #[test]
    fn adapt_lambda_examples() {
        assert_eq!(adapt_lambda(2.0, &[1.0, 1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(adapt_lambda(2.0, &[0.5, 0.5]).unwrap(), 1.0);
        assert!(adapt_lambda(2.0, &[]).is_err());

        // 10 days of uniform volume, half-life 5, reference = newest day.
        let weights: Vec<f64> =
            (0..10).map(|a| decay_weight(9 - a, 9, 5.0).unwrap()).collect();
        let adapted = adapt_lambda(1.0, &weights).unwrap();
        // Oracle: geometric series (1 - r^10) / (1 - r) / 10 with r = 2^(-1/5).
        let r = (-1.0f64 / 5.0).exp2();
        let closed_form = (1.0 - r.powi(10)) / (1.0 - r) / 10.0;
        assert!((adapted - closed_form).abs() < 1e-12);
        assert!((adapted - 0.57938).abs() < 1e-4, "{adapted}");
    }

    #[test]
    fn weight_artifact_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let dense: Vec<f64> = (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let w = ModelWeights::from_vec(dense, 8, 0.75).unwrap();
        let mut buf = Vec::new();
        write_weights(&w, &mut buf).unwrap();
        let back = read_weights(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }
}
