//! Hashed sparse feature encoding and the historic conversion-rate feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{DailyAdvertiserStats, EventRecord, MISSING_TOKEN};

/// Namespace whose value is encoded as log(1 + price) instead of one-hot.
pub const PRICE_NAMESPACE: &str = "product_price";

/// Clamp bounds keeping the historic CR feature strictly inside (0, 1).
const CR_EPS: f64 = 1e-12;

/// FNV-1a 64-bit over `namespace`, `=`, `value`. Fixed offset basis and prime,
/// so indices are reproducible across runs and platforms.
pub fn hash_feature(namespace: &str, value: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for chunk in [namespace.as_bytes(), b"=", value.as_bytes()] {
        for &b in chunk {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

/// Index 0 holds the bias; index 2^b - 1 is reserved for the CR feature.
/// Hashes are reduced into [1, 2^b - 2] so they never collide with either slot.
fn hash_index(h: u64, dimension_bits: u8) -> u32 {
    let usable = (1u64 << dimension_bits) - 2;
    (1 + h % usable) as u32
}

/// Reserved index where [`append_cr_feature`] places the historic CR value.
pub fn reserved_cr_index(dimension_bits: u8) -> u32 {
    (1u32 << dimension_bits) - 1
}

/// Sparse vector with strictly increasing indices and no zero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureVector {
    entries: Vec<(u32, f64)>,
    dimension_bits: u8,
}

impl SparseFeatureVector {
    /// Builds a vector from arbitrary (index, value) pairs: sorts, sums
    /// colliding indices, and drops entries that end up exactly zero.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>, dimension_bits: u8) -> Result<Self> {
        let dim = 1u64 << dimension_bits;
        for &(i, _) in &pairs {
            if (i as u64) >= dim {
                return Err(Error::Argument(format!(
                    "feature index {i} out of range for {dimension_bits} bits"
                )));
            }
        }
        pairs.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match entries.last_mut() {
                Some((last_i, last_v)) if *last_i == i => *last_v += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        Ok(Self { entries, dimension_bits })
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn dimension_bits(&self) -> u8 {
        self.dimension_bits
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn contains_index(&self, index: u32) -> bool {
        self.entries.binary_search_by_key(&index, |&(i, _)| i).is_ok()
    }

    /// Dot product against a dense vector of length 2^dimension_bits.
    pub fn dot(&self, dense: &[f64]) -> f64 {
        debug_assert_eq!(dense.len(), 1usize << self.dimension_bits);
        let mut acc = 0.0;
        for &(i, v) in &self.entries {
            acc += dense[i as usize] * v;
        }
        acc
    }
}

/// Feature-hashing layout: which namespaces are encoded, at what width,
/// and which namespace pairs are conjoined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dimension_bits: u8,
    pub namespaces: Vec<String>,
    pub include_bias: bool,
    #[serde(default)]
    pub cross_features: Vec<(String, String)>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dimension_bits: 22,
            namespaces: vec![
                "advertiser_id".into(),
                "device_type".into(),
                "user_segment".into(),
                PRICE_NAMESPACE.into(),
            ],
            include_bias: true,
            cross_features: Vec::new(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(8..=30).contains(&self.dimension_bits) {
            return Err(Error::Config(format!(
                "dimension_bits must be in [8, 30], got {}",
                self.dimension_bits
            )));
        }
        for (a, b) in &self.cross_features {
            for ns in [a, b] {
                if !self.namespaces.contains(ns) {
                    return Err(Error::Config(format!(
                        "cross feature references undeclared namespace '{ns}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn namespace_value<'a>(event: &'a EventRecord, namespace: &str) -> &'a str {
    match namespace {
        "advertiser_id" => &event.advertiser_id,
        "device_type" => &event.device_type,
        "user_segment" => &event.user_segment,
        _ => event.attr(namespace).unwrap_or(MISSING_TOKEN),
    }
}

/// Deterministically encodes one event. Each populated namespace contributes
/// one entry: categoricals at value 1.0, the price namespace at log(1 + price).
/// Hash collisions sum.
pub fn encode_event(event: &EventRecord, config: &EncoderConfig) -> SparseFeatureVector {
    let b = config.dimension_bits;
    let mut pairs = Vec::with_capacity(
        config.namespaces.len() + config.cross_features.len() + usize::from(config.include_bias),
    );
    if config.include_bias {
        pairs.push((0u32, 1.0));
    }
    for ns in &config.namespaces {
        if ns == PRICE_NAMESPACE {
            let value = (1.0 + event.product_price).ln();
            pairs.push((hash_index(hash_feature(ns, ""), b), value));
        } else {
            let value = namespace_value(event, ns);
            pairs.push((hash_index(hash_feature(ns, value), b), 1.0));
        }
    }
    for (ns_a, ns_b) in &config.cross_features {
        let va = namespace_value(event, ns_a);
        let vb = namespace_value(event, ns_b);
        let token_ns = format!("{ns_a}^{ns_b}");
        let token_val = format!("{va}^{vb}");
        pairs.push((hash_index(hash_feature(&token_ns, &token_val), b), 1.0));
    }
    SparseFeatureVector::from_pairs(pairs, b)
        .expect("hash_index keeps indices in range")
}

/// Smoothing and fallback policy for the historic CR feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrFeatureConfig {
    /// Pseudo-conversions added to the numerator.
    pub smoothing_alpha: f64,
    /// Pseudo-events added to the denominator.
    pub smoothing_beta: f64,
    /// Trailing window consulted when day-1 has no events.
    pub fallback_window_days: i64,
}

impl Default for CrFeatureConfig {
    fn default() -> Self {
        Self { smoothing_alpha: 1.0, smoothing_beta: 2.0, fallback_window_days: 30 }
    }
}

impl CrFeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_alpha > 0.0) || !(self.smoothing_beta > 0.0) {
            return Err(Error::Config("smoothing constants must be positive".into()));
        }
        if self.smoothing_alpha > self.smoothing_beta {
            return Err(Error::Config("smoothing_alpha must not exceed smoothing_beta".into()));
        }
        if self.fallback_window_days < 1 {
            return Err(Error::Config("fallback_window_days must be at least 1".into()));
        }
        Ok(())
    }
}

/// Smoothed conversion rate of `advertiser` on `day - 1`.
///
/// Falls back to the trailing `fallback_window_days` ending at day - 1 when
/// day - 1 has no events, and to alpha/beta when the advertiser has no events
/// at all. The result is always strictly inside (0, 1).
pub fn historic_cr_feature(
    stats: &DailyAdvertiserStats,
    advertiser: &str,
    day: i64,
    config: &CrFeatureConfig,
) -> f64 {
    let alpha = config.smoothing_alpha;
    let beta = config.smoothing_beta;
    let count = match stats.day_count(advertiser, day - 1) {
        Some(c) if c.events > 0 => c,
        _ => stats.window_totals(advertiser, day - config.fallback_window_days, day - 1),
    };
    let cr = if count.events > 0 {
        (count.conversions as f64 + alpha) / (count.events as f64 + beta)
    } else {
        alpha / beta
    };
    cr.clamp(CR_EPS, 1.0 - CR_EPS)
}

/// Returns `x` plus one entry at the reserved index holding log(cr).
pub fn append_cr_feature(x: &SparseFeatureVector, cr: f64) -> Result<SparseFeatureVector> {
    if !(cr > 0.0 && cr < 1.0) {
        return Err(Error::Argument(format!("cr must be strictly inside (0, 1), got {cr}")));
    }
    let reserved = reserved_cr_index(x.dimension_bits());
    if x.contains_index(reserved) {
        return Err(Error::Argument(
            "vector already carries the reserved CR feature index".into(),
        ));
    }
    let mut entries = x.entries().to_vec();
    entries.push((reserved, cr.ln()));
    Ok(SparseFeatureVector { entries, dimension_bits: x.dimension_bits() })
}
