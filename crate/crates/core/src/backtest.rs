//! Longitudinal evaluation: train a fresh model for every test day on
//! strictly earlier data, score that day, and aggregate per-scope metrics.
//! Also hosts the variation-condition study and the half-life / alpha sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{daily_advertiser_stats, DailyAdvertiserStats, EventLog};
use crate::metrics::{event_nll, llhn, llhn_uplift, naive_nll_from_counts};
use crate::models::{
    score_event, ModelKind, ModelSpec, TrainedModel, TrainedWeights, TrainingWindow,
};
use crate::optim::ModelWeights;
use crate::variation::{classify_variation, extremeness, nvi, NviConfig, VariationLevel};

fn default_min_cell() -> u64 {
    50
}

/// One named model spec inside a backtest configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSpec {
    pub name: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
}

/// Configuration of one longitudinal run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    /// Inclusive range of days to score.
    pub test_days: (i64, i64),
    pub model_specs: Vec<NamedSpec>,
    /// Which spec's LLHN is the uplift denominator.
    pub baseline_name: String,
    #[serde(default)]
    pub nvi: NviConfig,
    /// Also emit per-advertiser rows (whole range plus 7-day sub-periods).
    #[serde(default)]
    pub per_advertiser: bool,
    /// Cells with fewer test events are emitted with a marker instead of metrics.
    #[serde(default = "default_min_cell")]
    pub min_test_events_per_cell: u64,
}

impl BacktestConfig {
    pub fn max_long_window(&self) -> i64 {
        self.model_specs.iter().map(|s| s.spec.long_window_days).max().unwrap_or(0)
    }

    pub fn validate(&self, log: &EventLog) -> Result<()> {
        if self.test_days.0 > self.test_days.1 {
            return Err(Error::Config(format!(
                "test_days ({}, {}) is inverted",
                self.test_days.0, self.test_days.1
            )));
        }
        if self.model_specs.is_empty() {
            return Err(Error::Config("at least one model spec is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for named in &self.model_specs {
            if !names.insert(named.name.as_str()) {
                return Err(Error::Config(format!("duplicate model name '{}'", named.name)));
            }
            named.spec.validate()?;
        }
        if !names.contains(self.baseline_name.as_str()) {
            return Err(Error::Config(format!(
                "baseline_name '{}' is not among the model specs",
                self.baseline_name
            )));
        }
        self.nvi.validate()?;
        let Some((first_day, _)) = log.day_range() else {
            return Err(Error::Config("cannot backtest an empty log".into()));
        };
        if self.test_days.0 - first_day < self.max_long_window() {
            return Err(Error::Config(format!(
                "test range starts at day {} but needs {} days of history before it \
                 (log starts at day {first_day})",
                self.test_days.0,
                self.max_long_window()
            )));
        }
        Ok(())
    }

    fn baseline_index(&self) -> usize {
        self.model_specs
            .iter()
            .position(|s| s.name == self.baseline_name)
            .expect("validated: baseline name exists")
    }
}

/// Row scope: the whole traffic or one advertiser.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Global,
    Advertiser(String),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::Advertiser(a) => f.write_str(a),
        }
    }
}

/// One report cell: (scope, period, model) with its metrics and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scope: Scope,
    pub period_start: i64,
    pub period_days: i64,
    pub model: String,
    pub nll: f64,
    pub naive_nll: f64,
    /// None when the naive NLL is degenerate (one-class cell).
    pub llhn: Option<f64>,
    /// Some(0) on baseline rows; None when undefined or insufficient.
    pub llhn_uplift: Option<f64>,
    /// Baseline LLHN too close to zero: uplift reported as "undefined".
    pub uplift_undefined: bool,
    /// Below the configured per-cell event minimum.
    pub insufficient: bool,
    pub nvi: Option<f64>,
    pub level: Option<VariationLevel>,
    pub n_events: u64,
    pub n_conversions: u64,
}

/// Output of a longitudinal run.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub rows: Vec<ReportRow>,
    /// Distinct component trainings executed.
    pub trainings_run: usize,
    /// Test days with zero events, skipped with a notice.
    pub skipped_days: Vec<i64>,
    /// Condition-study cells that could not be populated.
    pub missing_cells: Vec<(String, VariationLevel)>,
}

// ---------------------------------------------------------------------------
// Training-leg engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum WeightKey {
    Uniform,
    Decay { half_life_bits: u64, reference_day: i64 },
}

/// Identity of one component training; equal keys train identical weights,
/// so legs are deduplicated (training is deterministic, verified by test).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct LegKey {
    first_day: i64,
    last_day: i64,
    target_day: i64,
    weighting: WeightKey,
    lambda_bits: u64,
    encoder_json: String,
    optim_json: String,
    cr_json: Option<String>,
}

#[derive(Debug, Clone)]
struct LegPlan {
    spec: ModelSpec,
    window: TrainingWindow,
    weighting: crate::models::Weighting,
    hcrfm: bool,
}

enum ModelHandle {
    Single(usize),
    Mixture { short: usize, long: usize },
}

/// Per-(advertiser, day) accumulation of model NLLs and label tallies.
struct DayCell {
    nll: Vec<f64>,
    events: u64,
    conversions: u64,
}

struct ScoreTable {
    per_adv: BTreeMap<Arc<str>, BTreeMap<i64, DayCell>>,
    trainings_run: usize,
    skipped_days: Vec<i64>,
}

fn leg_key(spec: &ModelSpec, window: &TrainingWindow, weighting: &crate::models::Weighting) -> LegKey {
    LegKey {
        first_day: window.first_day,
        last_day: window.last_day,
        target_day: window.target_day,
        weighting: match weighting {
            crate::models::Weighting::Uniform => WeightKey::Uniform,
            crate::models::Weighting::Decay { half_life_days, reference_day } => WeightKey::Decay {
                half_life_bits: half_life_days.to_bits(),
                reference_day: *reference_day,
            },
        },
        lambda_bits: spec.lambda.to_bits(),
        encoder_json: serde_json::to_string(&spec.encoder).expect("encoder serializes"),
        optim_json: serde_json::to_string(&spec.optim).expect("optim serializes"),
        cr_json: (spec.kind == ModelKind::Hcrfm)
            .then(|| serde_json::to_string(&spec.cr_config).expect("cr config serializes")),
    }
}

fn components_for(spec: &ModelSpec, day: i64) -> Vec<(TrainingWindow, crate::models::Weighting)> {
    use crate::models::Weighting;
    let long = TrainingWindow::for_target(day, spec.long_window_days);
    match spec.kind {
        ModelKind::Baseline | ModelKind::Hcrfm => vec![(long, Weighting::Uniform)],
        ModelKind::Tdwm => vec![(
            long,
            Weighting::Decay { half_life_days: spec.half_life_days, reference_day: day - 1 },
        )],
        ModelKind::Mltstm => vec![
            (TrainingWindow::for_target(day, spec.short_window_days), Weighting::Uniform),
            (long, Weighting::Uniform),
        ],
    }
}

/// Trains every distinct (day, spec) component and scores every test day.
///
/// Trainings run in parallel; scoring and accumulation are sequential in
/// (day, event) order, so the table is identical run to run.
fn run_protocol(
    log: &EventLog,
    specs: &[NamedSpec],
    days: &[i64],
    full_stats: &DailyAdvertiserStats,
) -> Result<ScoreTable> {
    let mut legs: Vec<LegPlan> = Vec::new();
    let mut leg_index: HashMap<LegKey, usize> = HashMap::new();
    // handles[day_idx][spec_idx] -> leg ids making up that model
    let mut handles: Vec<Vec<ModelHandle>> = Vec::with_capacity(days.len());
    let mut scored_days: Vec<i64> = Vec::new();
    let mut skipped_days: Vec<i64> = Vec::new();

    for &day in days {
        if log.day_events(day).is_empty() {
            log::info!("test day {day} has no events; skipped");
            skipped_days.push(day);
            continue;
        }
        scored_days.push(day);
        let mut day_handles = Vec::with_capacity(specs.len());
        for named in specs {
            let comps = components_for(&named.spec, day);
            let mut ids = Vec::with_capacity(comps.len());
            for (window, weighting) in comps {
                let key = leg_key(&named.spec, &window, &weighting);
                let next_id = legs.len();
                let id = *leg_index.entry(key).or_insert_with(|| {
                    legs.push(LegPlan {
                        spec: named.spec.clone(),
                        window,
                        weighting,
                        hcrfm: named.spec.kind == ModelKind::Hcrfm,
                    });
                    next_id
                });
                ids.push(id);
            }
            day_handles.push(match (named.spec.kind, ids.as_slice()) {
                (ModelKind::Mltstm, [short, long]) => {
                    ModelHandle::Mixture { short: *short, long: *long }
                }
                (_, [single]) => ModelHandle::Single(*single),
                _ => unreachable!("components_for returns 1 or 2 windows"),
            });
        }
        handles.push(day_handles);
    }

    let trained: Vec<Result<ModelWeights>> = legs
        .par_iter()
        .map(|leg| {
            let stats;
            let cr = if leg.hcrfm {
                stats = full_stats.restrict_before(leg.window.target_day);
                Some((&stats, &leg.spec.cr_config))
            } else {
                None
            };
            crate::models::fit_component(
                log,
                &leg.spec.encoder,
                cr,
                &leg.window,
                leg.weighting,
                leg.spec.lambda,
                &leg.spec.optim,
            )
        })
        .collect();
    let mut weights: Vec<Arc<ModelWeights>> = Vec::with_capacity(trained.len());
    for t in trained {
        weights.push(Arc::new(t?));
    }

    let mut per_adv: BTreeMap<Arc<str>, BTreeMap<i64, DayCell>> = BTreeMap::new();
    for (day_idx, &day) in scored_days.iter().enumerate() {
        let stats_day = full_stats.restrict_before(day);
        // materialize the day's models once
        let day_models: Vec<TrainedModel> = specs
            .iter()
            .zip(&handles[day_idx])
            .map(|(named, handle)| {
                let trained_weights = match handle {
                    ModelHandle::Single(id) => {
                        TrainedWeights::Single(weights[*id].as_ref().clone())
                    }
                    ModelHandle::Mixture { short, long } => TrainedWeights::Mixture {
                        short: weights[*short].as_ref().clone(),
                        long: weights[*long].as_ref().clone(),
                    },
                };
                TrainedModel {
                    spec: named.spec.clone(),
                    weights: trained_weights,
                    stats_snapshot: None,
                    trained_for_day: day,
                    window: (day - named.spec.long_window_days, day - 1),
                    short_window: (named.spec.kind == ModelKind::Mltstm)
                        .then(|| (day - named.spec.short_window_days, day - 1)),
                }
            })
            .collect();

        for e in log.day_events(day) {
            let cell = per_adv
                .entry(e.advertiser_id.clone())
                .or_default()
                .entry(day)
                .or_insert_with(|| DayCell {
                    nll: vec![0.0; specs.len()],
                    events: 0,
                    conversions: 0,
                });
            cell.events += 1;
            if e.is_conversion() {
                cell.conversions += 1;
            }
            for (m, model) in day_models.iter().enumerate() {
                let p = score_event(model, e, &stats_day)?;
                cell.nll[m] += event_nll(p, e.label);
            }
        }
    }

    Ok(ScoreTable { per_adv, trainings_run: legs.len(), skipped_days })
}

impl ScoreTable {
    /// Per-model NLL sums plus label tallies for one advertiser and period.
    fn advertiser_totals(
        &self,
        advertiser: &str,
        period: (i64, i64),
        n_models: usize,
    ) -> (Vec<f64>, u64, u64) {
        let mut nll = vec![0.0; n_models];
        let (mut events, mut conversions) = (0u64, 0u64);
        if let Some(days) = self.per_adv.get(advertiser) {
            for (_, cell) in days.range(period.0..=period.1) {
                for m in 0..n_models {
                    nll[m] += cell.nll[m];
                }
                events += cell.events;
                conversions += cell.conversions;
            }
        }
        (nll, events, conversions)
    }

    /// Global totals: sum of per-advertiser totals in advertiser order, so
    /// the report additivity invariant holds exactly.
    fn global_totals(&self, period: (i64, i64), n_models: usize) -> (Vec<f64>, u64, u64) {
        let mut nll = vec![0.0; n_models];
        let (mut events, mut conversions) = (0u64, 0u64);
        for adv in self.per_adv.keys() {
            let (a_nll, a_ev, a_cv) = self.advertiser_totals(adv, period, n_models);
            for m in 0..n_models {
                nll[m] += a_nll[m];
            }
            events += a_ev;
            conversions += a_cv;
        }
        (nll, events, conversions)
    }
}

fn make_rows(
    specs: &[NamedSpec],
    baseline_idx: usize,
    scope: Scope,
    period: (i64, i64),
    totals: (Vec<f64>, u64, u64),
    annotation: (Option<f64>, Option<VariationLevel>),
    min_events: u64,
) -> Vec<ReportRow> {
    let (nll, events, conversions) = totals;
    let naive = naive_nll_from_counts(conversions, events - conversions);
    let insufficient = events < min_events;
    let llhn_per_model: Vec<Option<f64>> =
        nll.iter().map(|&m| llhn(m, naive).ok()).collect();
    let baseline_llhn = llhn_per_model[baseline_idx];

    specs
        .iter()
        .enumerate()
        .map(|(m, named)| {
            let (uplift, undefined) = if insufficient {
                (None, false)
            } else if m == baseline_idx {
                (llhn_per_model[m].map(|_| 0.0), llhn_per_model[m].is_none())
            } else {
                match (llhn_per_model[m], baseline_llhn) {
                    (Some(model_llhn), Some(base)) => match llhn_uplift(model_llhn, base) {
                        Ok(u) => (Some(u), false),
                        Err(_) => (None, true),
                    },
                    _ => (None, true),
                }
            };
            ReportRow {
                scope: scope.clone(),
                period_start: period.0,
                period_days: period.1 - period.0 + 1,
                model: named.name.clone(),
                nll: nll[m],
                naive_nll: naive,
                llhn: if insufficient { None } else { llhn_per_model[m] },
                llhn_uplift: uplift,
                uplift_undefined: undefined,
                insufficient,
                nvi: annotation.0,
                level: annotation.1,
                n_events: events,
                n_conversions: conversions,
            }
        })
        .collect()
}

fn annotate(
    stats: &DailyAdvertiserStats,
    advertiser: &str,
    period_start: i64,
    config: &NviConfig,
) -> (Option<f64>, Option<VariationLevel>) {
    match nvi(stats, advertiser, period_start, config) {
        Ok(v) => (Some(v), Some(classify_variation(v, config))),
        Err(_) => (None, None),
    }
}

/// The longitudinal protocol over `config.test_days`: one fresh training per
/// (test day, spec component), scoring exactly that day.
pub fn run_backtest(log: &EventLog, config: &BacktestConfig) -> Result<BacktestReport> {
    config.validate(log)?;
    let full_stats = daily_advertiser_stats(log);
    let days: Vec<i64> = (config.test_days.0..=config.test_days.1).collect();
    let table = run_protocol(log, &config.model_specs, &days, &full_stats)?;
    let baseline_idx = config.baseline_index();
    let n_models = config.model_specs.len();
    let period = config.test_days;

    let mut rows = make_rows(
        &config.model_specs,
        baseline_idx,
        Scope::Global,
        period,
        table.global_totals(period, n_models),
        (None, None),
        config.min_test_events_per_cell,
    );

    if config.per_advertiser {
        let advertisers: Vec<Arc<str>> = table.per_adv.keys().cloned().collect();
        for adv in &advertisers {
            rows.extend(make_rows(
                &config.model_specs,
                baseline_idx,
                Scope::Advertiser(adv.to_string()),
                period,
                table.advertiser_totals(adv, period, n_models),
                annotate(&full_stats, adv, period.0, &config.nvi),
                config.min_test_events_per_cell,
            ));
            let mut start = period.0;
            while start <= period.1 {
                let end = (start + 6).min(period.1);
                if (start, end) == period {
                    break; // single chunk would duplicate the whole-range row
                }
                rows.extend(make_rows(
                    &config.model_specs,
                    baseline_idx,
                    Scope::Advertiser(adv.to_string()),
                    (start, end),
                    table.advertiser_totals(adv, (start, end), n_models),
                    annotate(&full_stats, adv, start, &config.nvi),
                    config.min_test_events_per_cell,
                ));
                start = end + 1;
            }
        }
    }

    Ok(BacktestReport {
        rows,
        trainings_run: table.trainings_run,
        skipped_days: table.skipped_days,
        missing_cells: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// One evaluated parameter value of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub param: f64,
    /// Unweighted mean of the defined period uplifts.
    pub mean_uplift: Option<f64>,
    pub period_uplifts: Vec<Option<f64>>,
}

/// Uplift curve over a hyperparameter, averaged over the evaluation periods.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    /// The five consecutive non-overlapping 7-day evaluation periods.
    pub periods: Vec<(i64, i64)>,
    pub trainings_run: usize,
}

const SWEEP_PERIODS: i64 = 5;
const SWEEP_PERIOD_DAYS: i64 = 7;

fn sweep_periods(log: &EventLog, history_days: i64) -> Result<Vec<(i64, i64)>> {
    let Some((first_day, last_day)) = log.day_range() else {
        return Err(Error::Config("cannot sweep an empty log".into()));
    };
    let span = SWEEP_PERIODS * SWEEP_PERIOD_DAYS;
    let start = last_day - span + 1;
    if start - first_day < history_days {
        return Err(Error::Config(format!(
            "log too short for {SWEEP_PERIODS} seven-day evaluation periods plus \
             {history_days} days of history"
        )));
    }
    Ok((0..SWEEP_PERIODS)
        .map(|k| {
            let s = start + k * SWEEP_PERIOD_DAYS;
            (s, s + SWEEP_PERIOD_DAYS - 1)
        })
        .collect())
}

/// Shared sweep executor: trains baseline + all variants over the five
/// evaluation periods in one protocol run (shared legs are deduplicated),
/// then averages per-period global uplifts per variant.
fn run_sweep(
    log: &EventLog,
    baseline: &NamedSpec,
    variants: Vec<(f64, NamedSpec)>,
) -> Result<SweepCurve> {
    let history = variants
        .iter()
        .map(|(_, s)| s.spec.long_window_days)
        .chain([baseline.spec.long_window_days])
        .max()
        .unwrap_or(0);
    let periods = sweep_periods(log, history)?;
    let days: Vec<i64> = (periods[0].0..=periods.last().unwrap().1).collect();

    let mut specs = vec![baseline.clone()];
    specs.extend(variants.iter().map(|(_, s)| s.clone()));
    let full_stats = daily_advertiser_stats(log);
    let table = run_protocol(log, &specs, &days, &full_stats)?;
    let n_models = specs.len();

    let mut points = Vec::with_capacity(variants.len());
    for (vi, (param, _)) in variants.iter().enumerate() {
        let model_idx = vi + 1;
        let mut period_uplifts = Vec::with_capacity(periods.len());
        for &period in &periods {
            let (nll, events, conversions) = table.global_totals(period, n_models);
            let naive = naive_nll_from_counts(conversions, events - conversions);
            let uplift = llhn(nll[0], naive).ok().and_then(|base| {
                llhn(nll[model_idx], naive)
                    .ok()
                    .and_then(|m| llhn_uplift(m, base).ok())
            });
            period_uplifts.push(uplift);
        }
        let defined: Vec<f64> = period_uplifts.iter().flatten().copied().collect();
        let mean_uplift = (!defined.is_empty())
            .then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        points.push(SweepPoint { param: *param, mean_uplift, period_uplifts });
    }
    Ok(SweepCurve { points, periods, trainings_run: table.trainings_run })
}

/// Fig. 2 analogue: TDWM uplift as a function of the decay half-life.
pub fn sweep_half_life(
    log: &EventLog,
    base: &BacktestConfig,
    half_lives: &[f64],
) -> Result<SweepCurve> {
    if half_lives.len() < 2 {
        return Err(Error::Argument("sweep needs at least two half-life values".into()));
    }
    for &h in half_lives {
        if !(h > 0.0) {
            return Err(Error::Argument(format!("half-life must be positive, got {h}")));
        }
    }
    let baseline = base
        .model_specs
        .iter()
        .find(|s| s.name == base.baseline_name)
        .ok_or_else(|| Error::Config("baseline spec not found".into()))?;
    let template = base
        .model_specs
        .iter()
        .find(|s| s.spec.kind == ModelKind::Tdwm)
        .ok_or_else(|| Error::Config("half-life sweep needs a tdwm spec as template".into()))?;
    let variants = half_lives
        .iter()
        .map(|&h| {
            let mut named = template.clone();
            named.name = format!("tdwm_h{h}");
            named.spec.half_life_days = h;
            (h, named)
        })
        .collect();
    run_sweep(log, baseline, variants)
}

/// Fig. 3 analogue: MLTSTM uplift as a function of the mixing factor alpha.
pub fn sweep_alpha(log: &EventLog, base: &BacktestConfig, alphas: &[f64]) -> Result<SweepCurve> {
    for &a in alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Argument(format!("alpha must be in [0, 1], got {a}")));
        }
    }
    if !alphas.contains(&0.0) || !alphas.contains(&1.0) {
        return Err(Error::Argument("alpha grid must include both endpoints 0 and 1".into()));
    }
    let baseline = base
        .model_specs
        .iter()
        .find(|s| s.name == base.baseline_name)
        .ok_or_else(|| Error::Config("baseline spec not found".into()))?;
    let template = base
        .model_specs
        .iter()
        .find(|s| s.spec.kind == ModelKind::Mltstm)
        .ok_or_else(|| Error::Config("alpha sweep needs a mltstm spec as template".into()))?;
    let variants = alphas
        .iter()
        .map(|&a| {
            let mut named = template.clone();
            named.name = format!("mltstm_a{a}");
            named.spec.alpha = a;
            (a, named)
        })
        .collect();
    run_sweep(log, baseline, variants)
}

// ---------------------------------------------------------------------------
// Condition study
// ---------------------------------------------------------------------------

/// Per-advertiser comparison across demand-variation conditions: selects one
/// 7-day period per level (max extremeness for extreme, median for average,
/// min for moderate) and reports uplift per (advertiser, level, model).
pub fn condition_study(log: &EventLog, config: &BacktestConfig) -> Result<BacktestReport> {
    if !config.per_advertiser {
        return Err(Error::Config("condition_study requires per_advertiser = true".into()));
    }
    config.validate(log)?;
    let (first_day, last_day) = log.day_range().expect("validated: log is nonempty");
    let full_stats = daily_advertiser_stats(log);
    let min_start = first_day + config.max_long_window().max(config.nvi.long_days);
    let max_start = last_day - SWEEP_PERIOD_DAYS + 1;

    // Candidate (extremeness, start day) per level per advertiser.
    let advertisers: Vec<Arc<str>> = full_stats.advertisers().cloned().collect();
    let mut selected: Vec<(Arc<str>, VariationLevel, i64, f64)> = Vec::new();
    let mut missing_cells: Vec<(String, VariationLevel)> = Vec::new();
    for adv in &advertisers {
        let mut by_level: BTreeMap<VariationLevel, Vec<(f64, i64)>> = BTreeMap::new();
        for day in min_start..=max_start {
            if let Ok(v) = nvi(&full_stats, adv, day, &config.nvi) {
                let level = classify_variation(v, &config.nvi);
                if level != VariationLevel::Unclassified {
                    by_level.entry(level).or_default().push((extremeness(v), day));
                }
            }
        }
        for level in [VariationLevel::Extreme, VariationLevel::Average, VariationLevel::Moderate] {
            match by_level.get_mut(&level) {
                Some(candidates) if !candidates.is_empty() => {
                    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    let (e, day) = match level {
                        VariationLevel::Extreme => *candidates.last().unwrap(),
                        VariationLevel::Moderate => candidates[0],
                        _ => candidates[(candidates.len() - 1) / 2],
                    };
                    selected.push((adv.clone(), level, day, e));
                }
                _ => {
                    log::info!("advertiser {adv} has no {level} period; cell unavailable");
                    missing_cells.push((adv.to_string(), level));
                }
            }
        }
    }

    let mut days: Vec<i64> = selected
        .iter()
        .flat_map(|(_, _, start, _)| *start..*start + SWEEP_PERIOD_DAYS)
        .collect();
    days.sort_unstable();
    days.dedup();

    let table = run_protocol(log, &config.model_specs, &days, &full_stats)?;
    let baseline_idx = config.baseline_index();
    let n_models = config.model_specs.len();

    let mut rows = Vec::new();
    for (adv, level, start, _) in &selected {
        let period = (*start, *start + SWEEP_PERIOD_DAYS - 1);
        let v = nvi(&full_stats, adv, *start, &config.nvi).ok();
        rows.extend(make_rows(
            &config.model_specs,
            baseline_idx,
            Scope::Advertiser(adv.to_string()),
            period,
            table.advertiser_totals(adv, period, n_models),
            (v, Some(*level)),
            config.min_test_events_per_cell,
        ));
    }

    Ok(BacktestReport {
        rows,
        trainings_run: table.trainings_run,
        skipped_days: table.skipped_days,
        missing_cells,
    })
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

fn metric_cell(value: Option<f64>, insufficient: bool, undefined: bool) -> String {
    if insufficient {
        "insufficient".to_string()
    } else if undefined {
        "undefined".to_string()
    } else {
        value.map(|v| v.to_string()).unwrap_or_default()
    }
}

/// Report CSV: metric columns plus (nvi, level, n_events, n_conversions).
/// Insufficient cells carry a marker instead of metric values.
pub fn write_report_csv<W: Write>(report: &BacktestReport, mut out: W) -> Result<()> {
    writeln!(
        out,
        "advertiser,period_start,period_days,model,nll,naive_nll,llhn,llhn_uplift,\
         nvi,level,n_events,n_conversions"
    )?;
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scope,
            r.period_start,
            r.period_days,
            r.model,
            metric_cell(Some(r.nll), r.insufficient, false),
            metric_cell(Some(r.naive_nll), r.insufficient, false),
            metric_cell(r.llhn, r.insufficient, false),
            metric_cell(r.llhn_uplift, r.insufficient, r.uplift_undefined),
            r.nvi.map(|v| v.to_string()).unwrap_or_default(),
            r.level.map(|l| l.to_string()).unwrap_or_default(),
            r.n_events,
            r.n_conversions
        )?;
    }
    Ok(())
}

/// Sweep CSV: one row per parameter with the mean and per-period uplifts.
pub fn write_sweep_csv<W: Write>(curve: &SweepCurve, mut out: W) -> Result<()> {
    let mut header = String::from("param,mean_uplift");
    for i in 1..=curve.periods.len() {
        header.push_str(&format!(",period_{i}"));
    }
    writeln!(out, "{header}")?;
    for p in &curve.points {
        let mut line = format!(
            "{},{}",
            p.param,
            p.mean_uplift.map(|v| v.to_string()).unwrap_or_default()
        );
        for u in &p.period_uplifts {
            line.push(',');
            if let Some(u) = u {
                line.push_str(&u.to_string());
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Long-format sweep export for plotting: (param, period_index, period_start, uplift).
pub fn write_sweep_plot_csv<W: Write>(curve: &SweepCurve, mut out: W) -> Result<()> {
    writeln!(out, "param,period_index,period_start,uplift")?;
    for p in &curve.points {
        for (i, (u, period)) in p.period_uplifts.iter().zip(&curve.periods).enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                p.param,
                i + 1,
                period.0,
                u.map(|v| v.to_string()).unwrap_or_default()
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::EncoderConfig;
    use crate::synthgen::{AdvertiserProfile, ShiftWindow, SimConfig};
    use std::collections::BTreeMap;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            dimension_bits: 10,
            namespaces: vec![
                "advertiser_id".into(),
                "device_type".into(),
                "category".into(),
            ],
            include_bias: true,
            cross_features: vec![],
        }
    }

    fn named(name: &str, kind: ModelKind) -> NamedSpec {
        let mut spec = ModelSpec::new(kind);
        spec.long_window_days = 5;
        spec.short_window_days = 2;
        spec.encoder = tiny_encoder();
        NamedSpec { name: name.into(), spec }
    }

    fn shifted_log(days: i64, seed: u64) -> EventLog {
        let vocab: BTreeMap<String, u32> =
            [("category".to_string(), 6u32), ("device_type".to_string(), 2)].into_iter().collect();
        let effects: BTreeMap<String, f64> = [
            ("category=category_0".to_string(), 0.9),
            ("category=category_1".to_string(), -0.9),
        ]
        .into_iter()
        .collect();
        let profiles = vec![
            AdvertiserProfile {
                advertiser_id: "adv_a".into(),
                daily_events: 400,
                base_cr: 0.06,
                feature_vocab: vocab.clone(),
                feature_effects: effects.clone(),
                shift_schedule: vec![ShiftWindow {
                    start_day: days - 12,
                    end_day: days - 3,
                    cr_multiplier: 2.2,
                }],
            },
            AdvertiserProfile {
                advertiser_id: "adv_b".into(),
                daily_events: 300,
                base_cr: 0.05,
                feature_vocab: vocab,
                feature_effects: effects,
                shift_schedule: vec![],
            },
        ];
        crate::synthgen::generate_log(&SimConfig { day_range: (0, days), profiles, seed })
            .unwrap()
    }

    #[test]
    fn one_training_per_test_day() {
        let log = shifted_log(12, 3);
        let config = BacktestConfig {
            test_days: (8, 10),
            model_specs: vec![named("baseline", ModelKind::Baseline)],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: false,
            min_test_events_per_cell: 1,
        };
        let report = run_backtest(&log, &config).unwrap();
        assert_eq!(report.trainings_run, 3);
        assert!(report.skipped_days.is_empty());
    }

    #[test]
    fn baseline_uplift_is_exactly_zero() {
        let log = shifted_log(12, 4);
        let config = BacktestConfig {
            test_days: (8, 11),
            model_specs: vec![
                named("baseline", ModelKind::Baseline),
                named("tdwm", ModelKind::Tdwm),
            ],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: true,
            min_test_events_per_cell: 1,
        };
        let report = run_backtest(&log, &config).unwrap();
        for row in report.rows.iter().filter(|r| r.model == "baseline") {
            if !r_insufficient(row) {
                assert_eq!(row.llhn_uplift, Some(0.0), "row {row:?}");
            }
        }
    }

    fn r_insufficient(r: &ReportRow) -> bool {
        r.insufficient
    }

    #[test]
    fn identical_specs_under_different_names_match_bitwise() {
        let log = shifted_log(12, 5);
        let config = BacktestConfig {
            test_days: (8, 10),
            model_specs: vec![
                named("baseline", ModelKind::Baseline),
                named("copy", ModelKind::Baseline),
            ],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: true,
            min_test_events_per_cell: 1,
        };
        let report = run_backtest(&log, &config).unwrap();
        let a: Vec<_> = report.rows.iter().filter(|r| r.model == "baseline").collect();
        let b: Vec<_> = report.rows.iter().filter(|r| r.model == "copy").collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.nll, y.nll);
            assert_eq!(x.llhn, y.llhn);
        }
    }

    #[test]
    fn global_nll_is_sum_of_advertiser_nlls() {
        let log = shifted_log(12, 6);
        let config = BacktestConfig {
            test_days: (8, 11),
            model_specs: vec![
                named("baseline", ModelKind::Baseline),
                named("mix", ModelKind::Mltstm),
            ],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: true,
            min_test_events_per_cell: 0,
        };
        let report = run_backtest(&log, &config).unwrap();
        for model in ["baseline", "mix"] {
            let global: f64 = report
                .rows
                .iter()
                .filter(|r| r.scope == Scope::Global && r.model == model)
                .map(|r| r.nll)
                .sum();
            let per_adv: f64 = report
                .rows
                .iter()
                .filter(|r| {
                    matches!(r.scope, Scope::Advertiser(_))
                        && r.model == model
                        && r.period_days == 4 // the whole-range advertiser rows
                })
                .map(|r| r.nll)
                .sum();
            assert_eq!(global, per_adv, "{model}");
        }
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let log = shifted_log(12, 7);
        let config = BacktestConfig {
            test_days: (8, 11),
            model_specs: vec![
                named("baseline", ModelKind::Baseline),
                named("tdwm", ModelKind::Tdwm),
                named("mix", ModelKind::Mltstm),
            ],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: true,
            min_test_events_per_cell: 10,
        };
        let mut csv1 = Vec::new();
        write_report_csv(&run_backtest(&log, &config).unwrap(), &mut csv1).unwrap();
        let mut csv2 = Vec::new();
        write_report_csv(&run_backtest(&log, &config).unwrap(), &mut csv2).unwrap();
        assert_eq!(csv1, csv2);
    }

    #[test]
    fn small_cells_get_the_insufficient_marker() {
        let log = shifted_log(12, 8);
        let config = BacktestConfig {
            test_days: (8, 9),
            model_specs: vec![named("baseline", ModelKind::Baseline)],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: true,
            min_test_events_per_cell: 1_000_000,
        };
        let report = run_backtest(&log, &config).unwrap();
        assert!(report.rows.iter().all(|r| r.insufficient));
        let mut csv = Vec::new();
        write_report_csv(&report, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().contains("insufficient"));
    }

    #[test]
    fn history_requirement_is_validated() {
        let log = shifted_log(12, 9);
        let config = BacktestConfig {
            test_days: (2, 5),
            model_specs: vec![named("baseline", ModelKind::Baseline)],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: false,
            min_test_events_per_cell: 1,
        };
        assert!(matches!(run_backtest(&log, &config), Err(Error::Config(_))));
    }

    fn sweep_base(log_days: i64) -> (EventLog, BacktestConfig) {
        let log = shifted_log(log_days, 10);
        let config = BacktestConfig {
            test_days: (0, 0), // sweeps pick their own periods
            model_specs: vec![
                named("baseline", ModelKind::Baseline),
                named("tdwm", ModelKind::Tdwm),
                named("mix", ModelKind::Mltstm),
            ],
            baseline_name: "baseline".into(),
            nvi: NviConfig::default(),
            per_advertiser: false,
            min_test_events_per_cell: 1,
        };
        (log, config)
    }

    #[test]
    fn huge_half_life_has_negligible_uplift() {
        let (log, config) = sweep_base(45);
        let curve = sweep_half_life(&log, &config, &[1e9, 3.0]).unwrap();
        let point = &curve.points[0];
        assert_eq!(point.param, 1e9);
        let mean = point.mean_uplift.unwrap();
        assert!(mean.abs() < 0.005, "uplift at decay-free limit: {mean}");
    }

    #[test]
    fn alpha_endpoints_match_pure_models() {
        let (log, config) = sweep_base(45);
        let curve = sweep_alpha(&log, &config, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(curve.points.len(), 3);

        // alpha = 0 equals a pure long-window baseline model's uplift
        let mix = config.model_specs[2].clone();
        let mut pure_long = named("long", ModelKind::Baseline);
        pure_long.spec.long_window_days = mix.spec.long_window_days;
        let pure_curve = run_sweep(&log, &config.model_specs[0], vec![(0.0, pure_long)]).unwrap();
        for (a, b) in curve.points[0]
            .period_uplifts
            .iter()
            .zip(&pure_curve.points[0].period_uplifts)
        {
            assert_eq!(a, b, "alpha=0 must equal the pure long-term model");
        }

        // alpha = 1 equals a pure short-window baseline model's uplift
        let mut pure_short = named("short", ModelKind::Baseline);
        pure_short.spec.long_window_days = mix.spec.short_window_days;
        let pure_curve =
            run_sweep(&log, &config.model_specs[0], vec![(1.0, pure_short)]).unwrap();
        for (a, b) in curve.points[2]
            .period_uplifts
            .iter()
            .zip(&pure_curve.points[0].period_uplifts)
        {
            assert_eq!(a, b, "alpha=1 must equal the pure short-term model");
        }
    }

    #[test]
    fn sweep_validation() {
        let (log, config) = sweep_base(45);
        assert!(sweep_half_life(&log, &config, &[5.0]).is_err());
        assert!(sweep_half_life(&log, &config, &[5.0, -1.0]).is_err());
        assert!(sweep_alpha(&log, &config, &[0.0, 0.5]).is_err(), "grid must include 1");
        assert!(sweep_alpha(&log, &config, &[0.0, 1.5, 1.0]).is_err());

        let short_log = shifted_log(20, 11);
        assert!(matches!(
            sweep_half_life(&short_log, &config, &[3.0, 5.0]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn condition_study_requires_per_advertiser_flag() {
        let (log, mut config) = sweep_base(45);
        config.test_days = (40, 44);
        config.per_advertiser = false;
        assert!(matches!(condition_study(&log, &config), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_csv_round_trip_shape() {
        let (log, config) = sweep_base(45);
        let curve = sweep_half_life(&log, &config, &[3.0, 10.0]).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("param,mean_uplift,period_1"));
        assert_eq!(text.lines().count(), 3);

        let mut buf = Vec::new();
        write_sweep_plot_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * curve.periods.len());
    }
}
