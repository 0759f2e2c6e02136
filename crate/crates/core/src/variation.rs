//! Normalized Variation Index, variation-level classification, and quantile
//! calibration of the level boundaries.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::DailyAdvertiserStats;

/// Extremeness thresholds separating the variation levels. The printed
/// defaults leave deliberate gaps ((0.05, 0.07) and (0.29, 0.34)) that map to
/// [`VariationLevel::Unclassified`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelBoundaries {
    pub moderate_max: f64,
    pub average_min: f64,
    pub average_max: f64,
    pub extreme_min: f64,
}

impl Default for LevelBoundaries {
    fn default() -> Self {
        Self { moderate_max: 0.05, average_min: 0.07, average_max: 0.29, extreme_min: 0.34 }
    }
}

/// NVI windows and classification boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NviConfig {
    /// Numerator window length, anchored at the evaluation day.
    pub short_days: i64,
    /// Denominator window length, ending the day before the evaluation day.
    pub long_days: i64,
    pub boundaries: LevelBoundaries,
}

impl Default for NviConfig {
    fn default() -> Self {
        Self { short_days: 7, long_days: 30, boundaries: LevelBoundaries::default() }
    }
}

impl NviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.short_days < 1 || self.long_days < 1 {
            return Err(Error::Config("NVI window lengths must be at least 1 day".into()));
        }
        let b = &self.boundaries;
        if !(b.moderate_max < b.average_min
            && b.average_min <= b.average_max
            && b.average_max < b.extreme_min)
        {
            return Err(Error::Config(format!(
                "level boundaries must satisfy moderate_max < average_min <= average_max < extreme_min, \
                 got ({}, {}, {}, {})",
                b.moderate_max, b.average_min, b.average_max, b.extreme_min
            )));
        }
        Ok(())
    }
}

/// Demand-variation level of one (advertiser, period).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariationLevel {
    Moderate,
    Average,
    Extreme,
    Unclassified,
}

impl fmt::Display for VariationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VariationLevel::Moderate => "moderate",
            VariationLevel::Average => "average",
            VariationLevel::Extreme => "extreme",
            VariationLevel::Unclassified => "unclassified",
        };
        f.write_str(s)
    }
}

/// V = CR over [day, day + short - 1] divided by CR over [day - long, day - 1].
/// Window CRs are event-weighted pooled rates, not means of daily rates.
pub fn nvi(
    stats: &DailyAdvertiserStats,
    advertiser: &str,
    day: i64,
    config: &NviConfig,
) -> Result<f64> {
    config.validate()?;
    let short = stats.window_totals(advertiser, day, day + config.short_days - 1);
    let long = stats.window_totals(advertiser, day - config.long_days, day - 1);
    if short.events == 0 || long.events == 0 {
        return Err(Error::InsufficientData(format!(
            "advertiser {advertiser} day {day}: empty NVI window \
             (short {} events, long {} events)",
            short.events, long.events
        )));
    }
    if long.conversions == 0 {
        return Err(Error::Degenerate(format!(
            "advertiser {advertiser} day {day}: denominator window has no conversions"
        )));
    }
    let cr_short = short.conversions as f64 / short.events as f64;
    let cr_long = long.conversions as f64 / long.events as f64;
    Ok(cr_short / cr_long)
}

/// |1 - v|: distance of current demand from the historic norm.
pub fn extremeness(v: f64) -> f64 {
    (1.0 - v).abs()
}

/// Maps an NVI value to its level; values in the boundary gaps are
/// `Unclassified`. Total over positive inputs.
pub fn classify_variation(v: f64, config: &NviConfig) -> VariationLevel {
    let e = extremeness(v);
    let b = &config.boundaries;
    if e <= b.moderate_max {
        VariationLevel::Moderate
    } else if e >= b.extreme_min {
        VariationLevel::Extreme
    } else if e >= b.average_min && e <= b.average_max {
        VariationLevel::Average
    } else {
        VariationLevel::Unclassified
    }
}

/// Nearest-rank quantile of an ascending-sorted sample.
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Recomputes the level boundaries as the 0.20 / 0.25 / 0.75 / 0.80
/// nearest-rank quantiles of the observed extremeness distribution.
pub fn calibrate_boundaries(
    stats: &DailyAdvertiserStats,
    config: &NviConfig,
) -> Result<NviConfig> {
    config.validate()?;
    let sample = extremeness_sample(stats, config);
    if sample.len() < 100 {
        return Err(Error::Calibration(format!(
            "need at least 100 NVI evaluations to calibrate, found {}",
            sample.len()
        )));
    }
    let mut sorted = sample;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let boundaries = LevelBoundaries {
        moderate_max: nearest_rank(&sorted, 0.20),
        average_min: nearest_rank(&sorted, 0.25),
        average_max: nearest_rank(&sorted, 0.75),
        extreme_min: nearest_rank(&sorted, 0.80),
    };
    let calibrated = NviConfig { boundaries, ..config.clone() };
    calibrated.validate().map_err(|e| {
        Error::Calibration(format!("calibrated quantiles violate the ordering invariant: {e}"))
    })?;
    Ok(calibrated)
}

/// Extremeness of every evaluable (advertiser, day) pair in the table.
pub fn extremeness_sample(stats: &DailyAdvertiserStats, config: &NviConfig) -> Vec<f64> {
    let (Some(min_day), Some(max_day)) = (stats.min_day(), stats.max_day()) else {
        return Vec::new();
    };
    let advertisers: Vec<_> = stats.advertisers().cloned().collect();
    let mut sample = Vec::new();
    for adv in &advertisers {
        for day in (min_day + config.long_days)..=(max_day - config.short_days + 1) {
            if let Ok(v) = nvi(stats, adv, day, config) {
                sample.push(extremeness(v));
            }
        }
    }
    sample
}

/// One row of the NVI time-series export.
#[derive(Debug, Clone, PartialEq)]
pub struct NviPoint {
    pub advertiser: String,
    pub day: i64,
    pub nvi: f64,
    pub extremeness: f64,
    pub level: VariationLevel,
}

/// NVI series for every evaluable day, optionally restricted to one advertiser.
/// Days where NVI is undefined (empty windows, zero denominator) are skipped.
pub fn nvi_series(
    stats: &DailyAdvertiserStats,
    advertiser: Option<&str>,
    config: &NviConfig,
) -> Vec<NviPoint> {
    let (Some(min_day), Some(max_day)) = (stats.min_day(), stats.max_day()) else {
        return Vec::new();
    };
    let advertisers: Vec<String> = stats
        .advertisers()
        .filter(|a| advertiser.map_or(true, |want| a.as_ref() == want))
        .map(|a| a.to_string())
        .collect();
    let mut points = Vec::new();
    for adv in &advertisers {
        for day in (min_day + config.long_days)..=(max_day - config.short_days + 1) {
            if let Ok(v) = nvi(stats, adv, day, config) {
                points.push(NviPoint {
                    advertiser: adv.clone(),
                    day,
                    nvi: v,
                    extremeness: extremeness(v),
                    level: classify_variation(v, config),
                });
            }
        }
    }
    points
}

/// Writes the Fig. 4-style export: (advertiser, day, nvi, extremeness, level).
pub fn write_nvi_csv<W: Write>(points: &[NviPoint], mut out: W) -> Result<()> {
    writeln!(out, "advertiser,day,nvi,extremeness,level")?;
    for p in points {
        writeln!(out, "{},{},{},{},{}", p.advertiser, p.day, p.nvi, p.extremeness, p.level)?;
    }
    Ok(())
}
