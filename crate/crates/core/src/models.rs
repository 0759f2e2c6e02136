//! Training and scoring for the four model kinds: the plain baseline, the
//! historic-CR-feature model, the time-decay weighting model, and the
//! long/short mixture.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{DailyAdvertiserStats, EventLog, EventRecord};
use crate::features::{
    append_cr_feature, encode_event, historic_cr_feature, reserved_cr_index, CrFeatureConfig,
    EncoderConfig, SparseFeatureVector,
};
use crate::optim::{
    adapt_lambda, decay_weight, lbfgs_minimize, predict_probability, read_weights,
    sgd_warmstart, write_weights, DataRow, ModelWeights, OptimConfig, WeightedDataset,
};

/// Which of the four model families a spec trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Hcrfm,
    Tdwm,
    Mltstm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Hcrfm => "hcrfm",
            ModelKind::Tdwm => "tdwm",
            ModelKind::Mltstm => "mltstm",
        };
        f.write_str(s)
    }
}

fn default_long_window() -> i64 {
    21
}
fn default_short_window() -> i64 {
    7
}
fn default_half_life() -> f64 {
    5.0
}
fn default_alpha() -> f64 {
    0.6
}
fn default_lambda() -> f64 {
    1.0
}

/// Everything needed to train one model for one target day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "default_long_window")]
    pub long_window_days: i64,
    /// Mixture only: the short component's window.
    #[serde(default = "default_short_window")]
    pub short_window_days: i64,
    /// TDWM only: exponential decay half-life in days.
    #[serde(default = "default_half_life")]
    pub half_life_days: f64,
    /// Mixture only: weight of the short-term component.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// HCRFM only: smoothing for the historic CR feature.
    #[serde(default)]
    pub cr_config: CrFeatureConfig,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            long_window_days: default_long_window(),
            short_window_days: default_short_window(),
            half_life_days: default_half_life(),
            alpha: default_alpha(),
            lambda: default_lambda(),
            optim: OptimConfig::default(),
            encoder: EncoderConfig::default(),
            cr_config: CrFeatureConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.long_window_days < 1 || self.short_window_days < 1 {
            return Err(Error::Config("window lengths must be at least 1 day".into()));
        }
        if self.short_window_days > self.long_window_days {
            return Err(Error::Config(format!(
                "short_window_days {} exceeds long_window_days {}",
                self.short_window_days, self.long_window_days
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.half_life_days > 0.0) {
            return Err(Error::Config("half_life_days must be positive".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        self.optim.validate()?;
        self.encoder.validate()?;
        self.cr_config.validate()
    }
}

/// Validated inclusive training window strictly before its target day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainingWindow {
    pub first_day: i64,
    pub last_day: i64,
    pub target_day: i64,
}

impl TrainingWindow {
    /// The window [target - days, target - 1] used by the daily protocol.
    pub fn for_target(target_day: i64, days: i64) -> Self {
        Self { first_day: target_day - days, last_day: target_day - 1, target_day }
    }

    /// Explicit bounds; rejects windows that touch or pass the target day.
    pub fn from_bounds(first_day: i64, last_day: i64, target_day: i64) -> Result<Self> {
        if first_day > last_day {
            return Err(Error::Argument(format!(
                "training window [{first_day}, {last_day}] is empty"
            )));
        }
        if last_day >= target_day {
            return Err(Error::Leakage(format!(
                "training window [{first_day}, {last_day}] touches target day {target_day}"
            )));
        }
        Ok(Self { first_day, last_day, target_day })
    }
}

/// Per-row importance weighting applied during a fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Weighting {
    Uniform,
    Decay { half_life_days: f64, reference_day: i64 },
}

/// Trained coefficients: one vector, or the mixture's short/long pair.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedWeights {
    Single(ModelWeights),
    Mixture { short: ModelWeights, long: ModelWeights },
}

/// A model ready to score events on its target day.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub weights: TrainedWeights,
    /// HCRFM only: the training-time stats, kept for audit.
    pub stats_snapshot: Option<DailyAdvertiserStats>,
    pub trained_for_day: i64,
    /// Long (or only) training window actually used.
    pub window: (i64, i64),
    /// Mixture only: the short component's window.
    pub short_window: Option<(i64, i64)>,
}

/// Fits one weight vector on the events inside `window`.
///
/// The leakage guard re-scans every row: any event on or after the target day
/// aborts the fit. Optimization runs in the compacted subspace of indices the
/// window actually touches (identical results from w0 = 0, since untouched
/// coordinates have zero gradient) and the solution is scattered back into the
/// full 2^b vector.
pub(crate) fn fit_component(
    log: &EventLog,
    encoder: &EncoderConfig,
    cr: Option<(&DailyAdvertiserStats, &CrFeatureConfig)>,
    window: &TrainingWindow,
    weighting: Weighting,
    lambda: f64,
    optim: &OptimConfig,
) -> Result<ModelWeights> {
    let rows_src = log.window(window.first_day, window.last_day);
    for e in rows_src {
        if e.day >= window.target_day {
            return Err(Error::Leakage(format!(
                "training event on day {} is not before target day {}",
                e.day, window.target_day
            )));
        }
    }
    if rows_src.is_empty() {
        return Err(Error::Training(format!(
            "empty training window [{}, {}] for target day {}",
            window.first_day, window.last_day, window.target_day
        )));
    }

    let full_bits = encoder.dimension_bits;
    let mut sample_weights = Vec::with_capacity(rows_src.len());
    let mut rows = Vec::with_capacity(rows_src.len());
    for e in rows_src {
        let mut x = encode_event(e, encoder);
        if let Some((stats, cr_cfg)) = cr {
            let value = historic_cr_feature(stats, &e.advertiser_id, e.day, cr_cfg);
            x = append_cr_feature(&x, value)?;
        }
        let weight = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Decay { half_life_days, reference_day } => {
                decay_weight(e.day, reference_day, half_life_days)?
            }
        };
        sample_weights.push(weight);
        rows.push((x, e.label, weight));
    }
    let lambda_used = match weighting {
        Weighting::Uniform => lambda,
        Weighting::Decay { .. } => adapt_lambda(lambda, &sample_weights)?,
    };

    // Compact the index space to what the window actually touches.
    let full_dim = 1usize << full_bits;
    let mut seen = vec![false; full_dim];
    for (x, _, _) in &rows {
        for &(i, _) in x.entries() {
            seen[i as usize] = true;
        }
    }
    let mut remap = vec![u32::MAX; full_dim];
    let mut distinct: Vec<u32> = Vec::new();
    for (i, &hit) in seen.iter().enumerate() {
        if hit {
            remap[i] = distinct.len() as u32;
            distinct.push(i as u32);
        }
    }
    let compact_bits = distinct
        .len()
        .max(2)
        .next_power_of_two()
        .trailing_zeros() as u8;

    let compact_rows: Vec<DataRow> = rows
        .into_iter()
        .map(|(x, y, weight)| {
            let pairs: Vec<(u32, f64)> = x
                .entries()
                .iter()
                .map(|&(i, v)| (remap[i as usize], v))
                .collect();
            let x = SparseFeatureVector::from_pairs(pairs, compact_bits)
                .expect("compact indices are in range");
            DataRow { x, y, weight }
        })
        .collect();
    let data = WeightedDataset::new(compact_rows, compact_bits)?;

    let w0 = ModelWeights::zeros(compact_bits, lambda_used)?;
    let warm = sgd_warmstart(&data, &w0, optim)?;
    let outcome = lbfgs_minimize(&data, &warm, optim)?;

    let mut full = vec![0.0; full_dim];
    for (ci, &fi) in distinct.iter().enumerate() {
        full[fi as usize] = outcome.weights.as_slice()[ci];
    }
    ModelWeights::from_vec(full, full_bits, lambda_used)
}

/// Stats over all log days strictly before `target_day`; feeds the HCRFM
/// feature, whose per-event lookups touch only days before that event.
pub(crate) fn stats_before(log: &EventLog, target_day: i64) -> DailyAdvertiserStats {
    match log.day_range() {
        Some((first, _)) if first < target_day => {
            let history = log.window(first, target_day - 1);
            let mut counts = std::collections::BTreeMap::<(&str, i64), (u64, u64)>::new();
            for e in history {
                let c = counts.entry((e.advertiser_id.as_ref(), e.day)).or_default();
                c.0 += 1;
                if e.is_conversion() {
                    c.1 += 1;
                }
            }
            DailyAdvertiserStats::from_counts(
                counts.into_iter().map(|((a, d), (ev, cv))| (a.to_string(), d, ev, cv)),
            )
            .expect("tallies are consistent")
        }
        _ => DailyAdvertiserStats::default(),
    }
}

/// Trains `spec` to score events on `target_day`, using only log days inside
/// the spec's window(s), all strictly before the target.
pub fn train_model(log: &EventLog, spec: &ModelSpec, target_day: i64) -> Result<TrainedModel> {
    spec.validate()?;
    let long = TrainingWindow::for_target(target_day, spec.long_window_days);
    let (weights, stats_snapshot, short_window) = match spec.kind {
        ModelKind::Baseline => {
            let w = fit_component(
                log,
                &spec.encoder,
                None,
                &long,
                Weighting::Uniform,
                spec.lambda,
                &spec.optim,
            )?;
            (TrainedWeights::Single(w), None, None)
        }
        ModelKind::Hcrfm => {
            let stats = stats_before(log, target_day);
            let w = fit_component(
                log,
                &spec.encoder,
                Some((&stats, &spec.cr_config)),
                &long,
                Weighting::Uniform,
                spec.lambda,
                &spec.optim,
            )?;
            (TrainedWeights::Single(w), Some(stats), None)
        }
        ModelKind::Tdwm => {
            let weighting = Weighting::Decay {
                half_life_days: spec.half_life_days,
                reference_day: target_day - 1,
            };
            let w = fit_component(
                log,
                &spec.encoder,
                None,
                &long,
                weighting,
                spec.lambda,
                &spec.optim,
            )?;
            (TrainedWeights::Single(w), None, None)
        }
        ModelKind::Mltstm => {
            let short = TrainingWindow::for_target(target_day, spec.short_window_days);
            let w_short = fit_component(
                log,
                &spec.encoder,
                None,
                &short,
                Weighting::Uniform,
                spec.lambda,
                &spec.optim,
            )?;
            let w_long = fit_component(
                log,
                &spec.encoder,
                None,
                &long,
                Weighting::Uniform,
                spec.lambda,
                &spec.optim,
            )?;
            (
                TrainedWeights::Mixture { short: w_short, long: w_long },
                None,
                Some((short.first_day, short.last_day)),
            )
        }
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        weights,
        stats_snapshot,
        trained_for_day: target_day,
        window: (long.first_day, long.last_day),
        short_window,
    })
}

/// Scores one event. `stats` must end strictly before the event's day; it is
/// consulted only by HCRFM but the leakage guard applies to every kind.
pub fn score_event(
    model: &TrainedModel,
    event: &EventRecord,
    stats: &DailyAdvertiserStats,
) -> Result<f64> {
    if event.day > model.trained_for_day {
        return Err(Error::Argument(format!(
            "model trained for day {} cannot score day {}; the daily protocol \
             scores exactly the target day",
            model.trained_for_day, event.day
        )));
    }
    if let Some(max_day) = stats.max_day() {
        if max_day >= event.day {
            return Err(Error::Leakage(format!(
                "stats contain day {max_day} but the event is on day {}; \
                 scoring stats must end strictly before the event",
                event.day
            )));
        }
    }
    let mut x = encode_event(event, &model.spec.encoder);
    if model.spec.kind == ModelKind::Hcrfm {
        let cr = historic_cr_feature(stats, &event.advertiser_id, event.day, &model.spec.cr_config);
        x = append_cr_feature(&x, cr)?;
    }
    match &model.weights {
        TrainedWeights::Single(w) => predict_probability(w, &x),
        TrainedWeights::Mixture { short, long } => {
            let alpha = model.spec.alpha;
            let p_short = predict_probability(short, &x)?;
            let p_long = predict_probability(long, &x)?;
            Ok(alpha * p_short + (1.0 - alpha) * p_long)
        }
    }
}

const MODEL_MAGIC: &[u8; 4] = b"CRMD";
const MODEL_VERSION: u16 = 1;

/// Binary model artifact: magic, version, kind, then the weight block(s).
/// Mixture artifacts embed alpha and both blocks.
pub fn write_model<W: Write>(model: &TrainedModel, out: &mut W) -> Result<()> {
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    let kind_byte = match model.spec.kind {
        ModelKind::Baseline => 0u8,
        ModelKind::Hcrfm => 1,
        ModelKind::Tdwm => 2,
        ModelKind::Mltstm => 3,
    };
    out.write_all(&[kind_byte, 0])?;
    out.write_all(&model.trained_for_day.to_le_bytes())?;
    match &model.weights {
        TrainedWeights::Single(w) => write_weights(w, out),
        TrainedWeights::Mixture { short, long } => {
            out.write_all(&model.spec.alpha.to_le_bytes())?;
            write_weights(short, out)?;
            write_weights(long, out)
        }
    }
}

/// Reads back the weight blocks written by [`write_model`]. The returned
/// model reuses `spec` for everything the binary does not carry.
pub fn read_model<R: Read>(input: &mut R, spec: &ModelSpec) -> Result<TrainedModel> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Argument("not a model artifact (bad magic)".into()));
    }
    let mut buf2 = [0u8; 2];
    input.read_exact(&mut buf2)?;
    if u16::from_le_bytes(buf2) != MODEL_VERSION {
        return Err(Error::Argument("unsupported model artifact version".into()));
    }
    input.read_exact(&mut buf2)?;
    let kind = match buf2[0] {
        0 => ModelKind::Baseline,
        1 => ModelKind::Hcrfm,
        2 => ModelKind::Tdwm,
        3 => ModelKind::Mltstm,
        other => {
            return Err(Error::Argument(format!("unknown model kind byte {other}")));
        }
    };
    if kind != spec.kind {
        return Err(Error::Argument(format!(
            "artifact kind {kind} does not match spec kind {}",
            spec.kind
        )));
    }
    let mut buf8 = [0u8; 8];
    input.read_exact(&mut buf8)?;
    let trained_for_day = i64::from_le_bytes(buf8);
    let weights = if kind == ModelKind::Mltstm {
        input.read_exact(&mut buf8)?;
        let alpha = f64::from_le_bytes(buf8);
        if (alpha - spec.alpha).abs() > 1e-12 {
            return Err(Error::Argument("artifact alpha does not match spec alpha".into()));
        }
        let short = read_weights(input)?;
        let long = read_weights(input)?;
        TrainedWeights::Mixture { short, long }
    } else {
        TrainedWeights::Single(read_weights(input)?)
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        weights,
        stats_snapshot: None,
        trained_for_day,
        window: (
            trained_for_day - spec.long_window_days,
            trained_for_day - 1,
        ),
        short_window: (kind == ModelKind::Mltstm).then(|| {
            (trained_for_day - spec.short_window_days, trained_for_day - 1)
        }),
    })
}

/// JSON descriptor accompanying a binary model artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    pub trained_for_day: i64,
    pub window: (i64, i64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short_window: Option<(i64, i64)>,
    /// Hash of the encoder layout; scoring must reuse the identical layout.
    pub encoder_config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reserved_cr_index: Option<u32>,
    pub spec: ModelSpec,
}

impl ModelDescriptor {
    pub fn for_model(model: &TrainedModel) -> Self {
        let encoder_json = serde_json::to_string(&model.spec.encoder)
            .expect("encoder config serializes");
        Self {
            kind: model.spec.kind,
            trained_for_day: model.trained_for_day,
            window: model.window,
            short_window: model.short_window,
            encoder_config_hash: format!(
                "{:016x}",
                crate::features::hash_feature("encoder_config", &encoder_json)
            ),
            reserved_cr_index: (model.spec.kind == ModelKind::Hcrfm)
                .then(|| reserved_cr_index(model.spec.encoder.dimension_bits)),
            spec: model.spec.clone(),
        }
    }
}
