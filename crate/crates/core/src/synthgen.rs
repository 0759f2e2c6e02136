//! Synthetic multi-advertiser event-log generator with scheduled demand
//! shifts: the desk-scale stand-in for production traffic logs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventLog, EventRecord, LogMetadata, MISSING_TOKEN};
use crate::features::hash_feature;
use crate::optim::sigmoid;

/// Probability clamp for the label draw; engaging it on many events means the
/// profile is mis-specified.
const PROB_CLAMP: f64 = 1e-6;
const MAX_EFFECT_COMBOS: usize = 100_000;

/// A multiplicative CR shift over an inclusive day interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftWindow {
    pub start_day: i64,
    pub end_day: i64,
    pub cr_multiplier: f64,
}

/// Event volume, conversion behavior, and demand-shift schedule for one
/// advertiser. Namespaces named `device_type` / `user_segment` fill those
/// event fields; every other namespace becomes a product attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvertiserProfile {
    pub advertiser_id: String,
    /// Poisson mean of events per day.
    pub daily_events: u32,
    pub base_cr: f64,
    /// Namespace name -> number of uniformly sampled categories.
    #[serde(default)]
    pub feature_vocab: BTreeMap<String, u32>,
    /// "namespace=value" -> log-odds offset applied to the conversion logit.
    #[serde(default)]
    pub feature_effects: BTreeMap<String, f64>,
    #[serde(default)]
    pub shift_schedule: Vec<ShiftWindow>,
}

impl AdvertiserProfile {
    fn active_multiplier(&self, day: i64) -> f64 {
        let mut m = 1.0;
        for s in &self.shift_schedule {
            if day >= s.start_day && day <= s.end_day {
                m *= s.cr_multiplier;
            }
        }
        m
    }

    fn max_multiplier(&self) -> f64 {
        // Overlapping windows compose multiplicatively; bound by the product
        // of all >1 multipliers.
        let product: f64 = self
            .shift_schedule
            .iter()
            .map(|s| s.cr_multiplier.max(1.0))
            .product();
        product.max(1.0)
    }
}

/// Full generator input: day span, advertiser profiles, and the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Inclusive [first_day, last_day].
    pub day_range: (i64, i64),
    pub profiles: Vec<AdvertiserProfile>,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::Config("SimConfig needs at least one profile".into()));
        }
        if self.day_range.0 > self.day_range.1 {
            return Err(Error::Config(format!(
                "day_range ({}, {}) is inverted",
                self.day_range.0, self.day_range.1
            )));
        }
        let mut ids = BTreeSet::new();
        for p in &self.profiles {
            if !ids.insert(&p.advertiser_id) {
                return Err(Error::Config(format!(
                    "duplicate advertiser_id '{}'",
                    p.advertiser_id
                )));
            }
            if p.daily_events == 0 {
                return Err(Error::Config(format!(
                    "{}: daily_events must be positive",
                    p.advertiser_id
                )));
            }
            if !(p.base_cr > 0.0 && p.base_cr < 1.0) {
                return Err(Error::Config(format!(
                    "{}: base_cr must be inside (0, 1)",
                    p.advertiser_id
                )));
            }
            if p.base_cr * p.max_multiplier() >= 1.0 {
                return Err(Error::Config(format!(
                    "{}: base_cr times the largest multiplier must stay below 1",
                    p.advertiser_id
                )));
            }
            for s in &p.shift_schedule {
                if s.start_day > s.end_day {
                    return Err(Error::Config(format!(
                        "{}: shift window ({}, {}) is inverted",
                        p.advertiser_id, s.start_day, s.end_day
                    )));
                }
                if s.start_day < self.day_range.0 || s.end_day > self.day_range.1 {
                    return Err(Error::Config(format!(
                        "{}: shift window ({}, {}) leaves the log range",
                        p.advertiser_id, s.start_day, s.end_day
                    )));
                }
                if !(s.cr_multiplier > 0.0) {
                    return Err(Error::Config(format!(
                        "{}: cr_multiplier must be positive",
                        p.advertiser_id
                    )));
                }
            }
            for (ns, count) in &p.feature_vocab {
                if *count == 0 {
                    return Err(Error::Config(format!(
                        "{}: namespace '{ns}' has an empty vocabulary",
                        p.advertiser_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Distribution of the total feature-effect offset under uniform category
/// sampling: exact enumeration of (offset, probability) pairs.
fn effect_offsets(profile: &AdvertiserProfile) -> Result<Vec<(f64, f64)>> {
    let mut acc: Vec<(f64, f64)> = vec![(0.0, 1.0)];
    for (ns, &count) in &profile.feature_vocab {
        let deltas: Vec<f64> = (0..count)
            .map(|k| {
                profile
                    .feature_effects
                    .get(&format!("{ns}={ns}_{k}"))
                    .copied()
                    .unwrap_or(0.0)
            })
            .collect();
        if deltas.iter().all(|&d| d == 0.0) {
            continue;
        }
        let mut next = Vec::with_capacity(acc.len() * count as usize);
        for &(d, p) in &acc {
            for &dk in &deltas {
                next.push((d + dk, p / count as f64));
            }
        }
        if next.len() > MAX_EFFECT_COMBOS {
            return Err(Error::Config(format!(
                "{}: too many feature-effect combinations to calibrate",
                profile.advertiser_id
            )));
        }
        acc = next;
    }
    Ok(acc)
}

/// Base logit such that the expected conversion probability over the feature
/// distribution equals `target_cr` exactly; found by bisection.
fn calibrated_logit(target_cr: f64, offsets: &[(f64, f64)]) -> f64 {
    let expected = |c: f64| -> f64 {
        offsets.iter().map(|&(d, p)| p * sigmoid(c + d)).sum()
    };
    let center = (target_cr / (1.0 - target_cr)).ln();
    let (mut lo, mut hi) = (center - 20.0, center + 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target_cr {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draws the full event log. Each advertiser gets an independent random
/// substream derived from (seed, advertiser_id), so editing one profile's
/// schedule leaves every other advertiser's events untouched. The merge
/// order is (day, time_of_day, advertiser_id).
pub fn generate_log(config: &SimConfig) -> Result<EventLog> {
    config.validate()?;

    // Attribute schema: union of product namespaces across profiles.
    let mut attr_union: BTreeSet<String> = BTreeSet::new();
    for p in &config.profiles {
        for ns in p.feature_vocab.keys() {
            if ns != "device_type" && ns != "user_segment" {
                attr_union.insert(ns.clone());
            }
        }
    }
    let attr_columns: Vec<String> = attr_union.into_iter().collect();
    let attr_names: Vec<Arc<str>> = attr_columns.iter().map(|s| Arc::from(s.as_str())).collect();
    let missing: Arc<str> = Arc::from(MISSING_TOKEN);

    let mut events: Vec<EventRecord> = Vec::new();
    let mut clamped_events = 0u64;
    let mut total_events = 0u64;

    for profile in &config.profiles {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ hash_feature("advertiser", &profile.advertiser_id),
        );
        let advertiser: Arc<str> = Arc::from(profile.advertiser_id.as_str());
        let poisson = Poisson::new(f64::from(profile.daily_events))
            .map_err(|e| Error::Config(format!("bad Poisson mean: {e}")))?;
        let offsets = effect_offsets(profile)?;
        let mut logit_cache: HashMap<u64, f64> = HashMap::new();

        // Pre-intern category tokens per namespace.
        let mut tokens: BTreeMap<&str, Vec<Arc<str>>> = BTreeMap::new();
        for (ns, &count) in &profile.feature_vocab {
            tokens.insert(
                ns.as_str(),
                (0..count).map(|k| Arc::from(format!("{ns}_{k}").as_str())).collect(),
            );
        }

        for day in config.day_range.0..=config.day_range.1 {
            let target = profile.base_cr * profile.active_multiplier(day);
            if target >= 1.0 {
                return Err(Error::Config(format!(
                    "{}: day {day} target CR {target} is not below 1",
                    profile.advertiser_id
                )));
            }
            let logit0 = *logit_cache
                .entry(target.to_bits())
                .or_insert_with(|| calibrated_logit(target, &offsets));
            let n = poisson.sample(&mut rng) as u64;

            for _ in 0..n {
                let time_of_day = rng.gen_range(0..86_400u32);
                let mut delta = 0.0;
                let mut device_type = missing.clone();
                let mut user_segment = missing.clone();
                let mut attrs: Vec<(Arc<str>, Arc<str>)> = Vec::with_capacity(attr_names.len());
                let mut sampled: BTreeMap<&str, &Arc<str>> = BTreeMap::new();
                for (ns, values) in &tokens {
                    let k = rng.gen_range(0..values.len());
                    let value = &values[k];
                    if let Some(d) = profile.feature_effects.get(&format!("{ns}={value}")) {
                        delta += d;
                    }
                    match *ns {
                        "device_type" => device_type = value.clone(),
                        "user_segment" => user_segment = value.clone(),
                        _ => {
                            sampled.insert(ns, value);
                        }
                    }
                }
                for (name_arc, name) in attr_names.iter().zip(&attr_columns) {
                    let value = sampled
                        .get(name.as_str())
                        .map(|v| (*v).clone())
                        .unwrap_or_else(|| missing.clone());
                    attrs.push((name_arc.clone(), value));
                }

                // price is log-uniform over [5, 500), rounded to cents
                let u: f64 = rng.gen_range(0.0..1.0);
                let price = (5.0f64.ln() + u * (500.0f64 / 5.0).ln()).exp();
                let price = (price * 100.0).round() / 100.0;

                let p = sigmoid(logit0 + delta);
                let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                if clamped != p {
                    clamped_events += 1;
                }
                let converted = rng.gen_bool(clamped);
                total_events += 1;

                events.push(EventRecord {
                    day,
                    time_of_day,
                    advertiser_id: advertiser.clone(),
                    device_type: device_type.clone(),
                    user_segment: user_segment.clone(),
                    product_attrs: attrs,
                    product_price: price,
                    label: if converted { 1 } else { -1 },
                    revenue: if converted { price } else { 0.0 },
                });
            }
        }
    }

    if total_events > 0 && clamped_events as f64 > 0.01 * total_events as f64 {
        log::warn!(
            "generator clamped the conversion probability on {clamped_events} of \
             {total_events} events; a profile is likely mis-specified"
        );
    }

    events.sort_by(|a, b| {
        (a.day, a.time_of_day, a.advertiser_id.as_ref())
            .cmp(&(b.day, b.time_of_day, b.advertiser_id.as_ref()))
    });
    EventLog::new(events, LogMetadata { epoch_date: None, attr_columns })
}

/// Five advertisers matching the published traffic-volume table (daily events
/// and CR), over 90 days, each with one extreme and one mild demand shift so
/// all three variation levels occur.
pub fn table1_preset() -> SimConfig {
    let vocab: BTreeMap<String, u32> = [
        ("category".to_string(), 12u32),
        ("brand".to_string(), 8),
        ("device_type".to_string(), 3),
        ("user_segment".to_string(), 2),
    ]
    .into_iter()
    .collect();
    // Strong within-advertiser signal keeps the per-advertiser baseline LLHN
    // positive even inside extreme shift periods, matching the published
    // study's setting where uplift denominators are positive.
    let mut effects: BTreeMap<String, f64> = BTreeMap::new();
    for (k, delta) in [1.3, -1.3, 1.0, -1.0, 0.8, -0.8, 0.6, -0.6, 0.4, -0.4].iter().enumerate() {
        effects.insert(format!("category=category_{k}"), *delta);
    }
    for (k, delta) in [0.5, -0.5, 0.35, -0.35, 0.2, -0.2].iter().enumerate() {
        effects.insert(format!("brand=brand_{k}"), *delta);
    }
    effects.insert("device_type=device_type_0".into(), 0.25);
    effects.insert("device_type=device_type_1".into(), -0.25);
    effects.insert("user_segment=user_segment_0".into(), 0.2);
    effects.insert("user_segment=user_segment_1".into(), -0.2);

    let rows: [(u32, f64, f64, f64); 5] = [
        // (daily events, base CR, extreme multiplier, average multiplier)
        (21_500, 0.012, 0.55, 1.25),
        (5_500, 0.018, 1.9, 0.78),
        (850, 0.024, 2.0, 1.25),
        (14_550, 0.079, 1.6, 1.22),
        (5_500, 0.018, 0.55, 0.78),
    ];
    let profiles = rows
        .iter()
        .enumerate()
        .map(|(i, &(daily_events, base_cr, extreme, average))| AdvertiserProfile {
            advertiser_id: format!("advertiser_{}", i + 1),
            daily_events,
            base_cr,
            feature_vocab: vocab.clone(),
            feature_effects: effects.clone(),
            shift_schedule: vec![
                ShiftWindow { start_day: 48, end_day: 61, cr_multiplier: average },
                ShiftWindow { start_day: 72, end_day: 81, cr_multiplier: extreme },
            ],
        })
        .collect();

    SimConfig { day_range: (0, 89), profiles, seed: 1337 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::daily_advertiser_stats;
    use crate::variation::{nvi, NviConfig};

    fn small_profile(id: &str, daily: u32, cr: f64) -> AdvertiserProfile {
        AdvertiserProfile {
            advertiser_id: id.to_string(),
            daily_events: daily,
            base_cr: cr,
            feature_vocab: BTreeMap::new(),
            feature_effects: BTreeMap::new(),
            shift_schedule: vec![],
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let config = SimConfig {
            day_range: (0, 10),
            profiles: vec![small_profile("a", 300, 0.02), small_profile("b", 150, 0.05)],
            seed: 7,
        };
        let log1 = generate_log(&config).unwrap();
        let log2 = generate_log(&config).unwrap();
        assert_eq!(log1, log2);

        let mut buf1 = Vec::new();
        let mut buf2 = Vec::new();
        crate::events::write_tsv(&log1, &mut buf1).unwrap();
        crate::events::write_tsv(&log2, &mut buf2).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn flat_profile_hits_base_cr_within_3_sigma() {
        let config = SimConfig {
            day_range: (0, 29),
            profiles: vec![small_profile("a", 2_000, 0.03)],
            seed: 11,
        };
        let log = generate_log(&config).unwrap();
        let stats = daily_advertiser_stats(&log);
        let totals = stats.window_totals("a", 0, 29);
        let n = totals.events as f64;
        let p = 0.03;
        let sigma = (p * (1.0 - p) / n).sqrt();
        let empirical = totals.conversions as f64 / n;
        assert!(
            (empirical - p).abs() < 3.0 * sigma,
            "empirical {empirical} vs {p} (sigma {sigma})"
        );
    }

    #[test]
    fn effects_are_calibrated_to_preserve_base_cr() {
        let mut profile = small_profile("a", 4_000, 0.05);
        profile.feature_vocab.insert("category".into(), 4);
        profile.feature_effects.insert("category=category_0".into(), 1.0);
        profile.feature_effects.insert("category=category_1".into(), -1.0);
        let config = SimConfig { day_range: (0, 19), profiles: vec![profile], seed: 3 };
        let log = generate_log(&config).unwrap();
        let stats = daily_advertiser_stats(&log);
        let totals = stats.window_totals("a", 0, 19);
        let n = totals.events as f64;
        let sigma = (0.05 * 0.95 / n).sqrt();
        let empirical = totals.conversions as f64 / n;
        assert!(
            (empirical - 0.05).abs() < 3.0 * sigma,
            "empirical {empirical} (sigma {sigma})"
        );
    }

    #[test]
    fn multiplier_shift_shows_up_in_nvi() {
        let mut profile = small_profile("a", 2_000, 0.02);
        profile.shift_schedule.push(ShiftWindow {
            start_day: 40,
            end_day: 46,
            cr_multiplier: 2.0,
        });
        let config = SimConfig { day_range: (0, 50), profiles: vec![profile], seed: 5 };
        let log = generate_log(&config).unwrap();
        let stats = daily_advertiser_stats(&log);
        let v = nvi(&stats, "a", 40, &NviConfig::default()).unwrap();

        // sigma of the NVI ratio from realized conversion counts
        let short = stats.window_totals("a", 40, 46);
        let long = stats.window_totals("a", 10, 39);
        let rel = (1.0 / short.conversions as f64 + 1.0 / long.conversions as f64).sqrt();
        assert!(
            (v - 2.0).abs() < 3.0 * (2.0 * rel),
            "NVI {v}, expected 2.0 +- {}",
            3.0 * 2.0 * rel
        );
    }

    #[test]
    fn perturbing_one_schedule_leaves_others_unchanged() {
        let base = SimConfig {
            day_range: (0, 12),
            profiles: vec![small_profile("a", 200, 0.02), small_profile("b", 200, 0.02)],
            seed: 9,
        };
        let mut perturbed = base.clone();
        perturbed.profiles[1].shift_schedule.push(ShiftWindow {
            start_day: 5,
            end_day: 8,
            cr_multiplier: 2.5,
        });
        let log_a: Vec<_> = generate_log(&base)
            .unwrap()
            .events()
            .iter()
            .filter(|e| e.advertiser_id.as_ref() == "a")
            .cloned()
            .collect();
        let log_a2: Vec<_> = generate_log(&perturbed)
            .unwrap()
            .events()
            .iter()
            .filter(|e| e.advertiser_id.as_ref() == "a")
            .cloned()
            .collect();
        assert_eq!(log_a, log_a2);
    }

    #[test]
    fn generated_log_round_trips_through_tsv() {
        let mut profile = small_profile("a", 150, 0.04);
        profile.feature_vocab.insert("category".into(), 3);
        profile.feature_vocab.insert("device_type".into(), 2);
        let config = SimConfig { day_range: (0, 5), profiles: vec![profile], seed: 2 };
        let log = generate_log(&config).unwrap();
        let mut buf = Vec::new();
        crate::events::write_tsv(&log, &mut buf).unwrap();
        let reparsed = crate::events::parse_event_log(std::io::Cursor::new(buf), None).unwrap();
        assert_eq!(reparsed, log);
    }

    #[test]
    fn preset_matches_published_volumes() {
        let preset = table1_preset();
        preset.validate().unwrap();
        assert_eq!(preset.day_range, (0, 89));
        assert_eq!(preset.profiles.len(), 5);
        assert_eq!(preset.profiles[2].daily_events, 850);
        assert!((preset.profiles[2].base_cr - 0.024).abs() < 1e-15);
        assert!((preset.profiles[3].base_cr - 0.079).abs() < 1e-15);
        assert_eq!(preset.profiles[3].daily_events, 14_550);
        for p in &preset.profiles {
            assert!(!p.shift_schedule.is_empty());
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut config = SimConfig {
            day_range: (0, 10),
            profiles: vec![small_profile("a", 100, 0.5)],
            seed: 1,
        };
        config.profiles[0].shift_schedule.push(ShiftWindow {
            start_day: 0,
            end_day: 5,
            cr_multiplier: 3.0,
        });
        assert!(config.validate().is_err(), "base_cr * multiplier >= 1");

        let config = SimConfig {
            day_range: (5, 0),
            profiles: vec![small_profile("a", 100, 0.1)],
            seed: 1,
        };
        assert!(config.validate().is_err(), "inverted day range");

        let config = SimConfig { day_range: (0, 10), profiles: vec![], seed: 1 };
        assert!(config.validate().is_err(), "no profiles");
    }
}
