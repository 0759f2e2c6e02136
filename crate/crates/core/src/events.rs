//! Event-log data model: click events, TSV parsing, per-advertiser daily tallies.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved category token for empty attribute cells.
pub const MISSING_TOKEN: &str = "__missing__";

/// Columns every log file must declare in its header.
pub const REQUIRED_COLUMNS: [&str; 8] = [
    "day",
    "time_of_day",
    "advertiser_id",
    "device_type",
    "user_segment",
    "product_price",
    "label",
    "revenue",
];

/// One ad-click event. `label` is +1 for a conversion, -1 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub day: i64,
    pub time_of_day: u32,
    pub advertiser_id: Arc<str>,
    pub device_type: Arc<str>,
    pub user_segment: Arc<str>,
    /// Categorical attributes in schema order; absent cells hold [`MISSING_TOKEN`].
    pub product_attrs: Vec<(Arc<str>, Arc<str>)>,
    pub product_price: f64,
    pub label: i8,
    pub revenue: f64,
}

impl EventRecord {
    pub fn is_conversion(&self) -> bool {
        self.label > 0
    }

    /// Attribute value by name, if the column exists for this event.
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.product_attrs
            .iter()
            .find(|(k, _)| k.as_ref() == name)
            .map(|(_, v)| v.as_ref())
    }

    fn validate(&self) -> Result<()> {
        if self.label != 1 && self.label != -1 {
            return Err(Error::Argument(format!("label must be +1 or -1, got {}", self.label)));
        }
        if self.label == -1 && self.revenue != 0.0 {
            return Err(Error::Argument(
                "revenue must be 0 for non-converting events".into(),
            ));
        }
        if !(self.product_price >= 0.0) {
            return Err(Error::Argument(format!(
                "product_price must be nonnegative, got {}",
                self.product_price
            )));
        }
        if !(self.revenue >= 0.0) {
            return Err(Error::Argument(format!(
                "revenue must be nonnegative, got {}",
                self.revenue
            )));
        }
        if self.time_of_day >= 86_400 {
            return Err(Error::Argument(format!(
                "time_of_day must be in [0, 86400), got {}",
                self.time_of_day
            )));
        }
        Ok(())
    }
}

/// Log-level metadata carried as a JSON sidecar next to the TSV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogMetadata {
    /// ISO date corresponding to day index 0, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_date: Option<String>,
    /// Attribute column names in file order (everything beyond the required columns).
    #[serde(default)]
    pub attr_columns: Vec<String>,
}

/// An immutable event log sorted by (day, time_of_day).
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    events: Vec<EventRecord>,
    metadata: LogMetadata,
    day_range: Option<(i64, i64)>,
}

impl EventLog {
    /// Builds a log from records, sorting them by (day, time_of_day) and
    /// validating every record's invariants.
    pub fn new(mut events: Vec<EventRecord>, metadata: LogMetadata) -> Result<Self> {
        for e in &events {
            e.validate()?;
        }
        events.sort_by(|a, b| (a.day, a.time_of_day).cmp(&(b.day, b.time_of_day)));
        let day_range = match (events.first(), events.last()) {
            (Some(f), Some(l)) => Some((f.day, l.day)),
            _ => None,
        };
        Ok(Self { events, metadata, day_range })
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn metadata(&self) -> &LogMetadata {
        &self.metadata
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Inclusive [first_day, last_day], or `None` for an empty log.
    pub fn day_range(&self) -> Option<(i64, i64)> {
        self.day_range
    }

    /// Borrowed view of the events with `from_day <= day <= to_day`.
    /// Events are day-sorted, so the view is one contiguous slice.
    pub fn window(&self, from_day: i64, to_day: i64) -> &[EventRecord] {
        if from_day > to_day {
            return &[];
        }
        let start = self.events.partition_point(|e| e.day < from_day);
        let end = self.events.partition_point(|e| e.day <= to_day);
        &self.events[start..end]
    }

    /// Borrowed view of one day's events.
    pub fn day_events(&self, day: i64) -> &[EventRecord] {
        self.window(day, day)
    }
}

/// Extracts the sub-log with `from_day <= day <= to_day`, order preserved.
pub fn slice_window(log: &EventLog, from_day: i64, to_day: i64) -> Result<EventLog> {
    if from_day > to_day {
        return Err(Error::Argument(format!(
            "slice_window: from_day {from_day} > to_day {to_day}"
        )));
    }
    let events = log.window(from_day, to_day).to_vec();
    EventLog::new(events, log.metadata().clone())
}

/// Per-(advertiser, day) event and conversion tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DayCount {
    pub events: u64,
    pub conversions: u64,
}

/// Table keyed by (advertiser, day); pairs with zero events are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DailyAdvertiserStats {
    table: BTreeMap<Arc<str>, BTreeMap<i64, DayCount>>,
}

impl DailyAdvertiserStats {
    /// Builds a table from pre-aggregated (advertiser, day, events, conversions)
    /// tuples. Zero-event entries are dropped to preserve the absence invariant.
    pub fn from_counts<I, S>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, i64, u64, u64)>,
        S: AsRef<str>,
    {
        let mut table: BTreeMap<Arc<str>, BTreeMap<i64, DayCount>> = BTreeMap::new();
        for (adv, day, events, conversions) in counts {
            if conversions > events {
                return Err(Error::Argument(format!(
                    "advertiser {} day {day}: conversions {conversions} exceed events {events}",
                    adv.as_ref()
                )));
            }
            if events == 0 {
                continue;
            }
            let entry = table
                .entry(Arc::from(adv.as_ref()))
                .or_default()
                .entry(day)
                .or_default();
            entry.events += events;
            entry.conversions += conversions;
        }
        Ok(Self { table })
    }

    pub fn day_count(&self, advertiser: &str, day: i64) -> Option<DayCount> {
        self.table.get(advertiser).and_then(|m| m.get(&day)).copied()
    }

    /// Pooled totals over the inclusive day window (zeros when empty).
    pub fn window_totals(&self, advertiser: &str, from_day: i64, to_day: i64) -> DayCount {
        let mut total = DayCount::default();
        if let Some(days) = self.table.get(advertiser) {
            for (_, c) in days.range(from_day..=to_day) {
                total.events += c.events;
                total.conversions += c.conversions;
            }
        }
        total
    }

    pub fn advertisers(&self) -> impl Iterator<Item = &Arc<str>> {
        self.table.keys()
    }

    /// Latest day present anywhere in the table.
    pub fn max_day(&self) -> Option<i64> {
        self.table
            .values()
            .filter_map(|m| m.keys().next_back().copied())
            .max()
    }

    /// Earliest day present anywhere in the table.
    pub fn min_day(&self) -> Option<i64> {
        self.table
            .values()
            .filter_map(|m| m.keys().next().copied())
            .min()
    }

    /// Copy of the table containing only days strictly before `day`.
    /// Used as the scoring-time leakage guard input.
    pub fn restrict_before(&self, day: i64) -> Self {
        let mut table = BTreeMap::new();
        for (adv, days) in &self.table {
            let kept: BTreeMap<i64, DayCount> =
                days.range(..day).map(|(d, c)| (*d, *c)).collect();
            if !kept.is_empty() {
                table.insert(adv.clone(), kept);
            }
        }
        Self { table }
    }

    pub fn total_events(&self) -> u64 {
        self.table
            .values()
            .flat_map(|m| m.values())
            .map(|c| c.events)
            .sum()
    }
}

/// Exact per-(advertiser, day) tallies for the whole log.
pub fn daily_advertiser_stats(log: &EventLog) -> DailyAdvertiserStats {
    let mut table: BTreeMap<Arc<str>, BTreeMap<i64, DayCount>> = BTreeMap::new();
    for e in log.events() {
        let days = match table.get_mut(e.advertiser_id.as_ref()) {
            Some(days) => days,
            None => table.entry(e.advertiser_id.clone()).or_default(),
        };
        let c = days.entry(e.day).or_default();
        c.events += 1;
        if e.is_conversion() {
            c.conversions += 1;
        }
    }
    DailyAdvertiserStats { table }
}

/// String interner so repeated categorical values share one allocation.
#[derive(Default)]
pub(crate) struct Interner {
    pool: HashMap<Arc<str>, ()>,
}

impl Interner {
    pub(crate) fn intern(&mut self, s: &str) -> Arc<str> {
        if let Some((k, _)) = self.pool.get_key_value(s) {
            return k.clone();
        }
        let arc: Arc<str> = Arc::from(s);
        self.pool.insert(arc.clone(), ());
        arc
    }
}

/// Parses a tab-separated event log with a self-describing header row.
///
/// Required columns are listed in [`REQUIRED_COLUMNS`]; any additional column
/// becomes a `product_attrs` entry. Empty attribute cells map to the reserved
/// missing token. Labels may be stored as {0, 1} or {-1, 1}; 0 is normalized
/// to -1 in memory.
pub fn parse_event_log<R: BufRead>(reader: R, metadata_hint: Option<LogMetadata>) -> Result<EventLog> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => {
            return Err(Error::Parse { line: 1, message: "missing header row".into() });
        }
    };
    let columns: Vec<&str> = header.trim_end_matches('\n').split('\t').collect();

    let mut required_pos: HashMap<&str, usize> = HashMap::new();
    let mut attr_pos: Vec<(usize, String)> = Vec::new();
    for (i, name) in columns.iter().enumerate() {
        if REQUIRED_COLUMNS.contains(name) {
            if required_pos.insert(name, i).is_some() {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("duplicate column '{name}'"),
                });
            }
        } else {
            attr_pos.push((i, (*name).to_string()));
        }
    }
    for name in REQUIRED_COLUMNS {
        if !required_pos.contains_key(name) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing required column '{name}'"),
            });
        }
    }

    let col = |name: &str| required_pos[name];
    let (c_day, c_time, c_adv) = (col("day"), col("time_of_day"), col("advertiser_id"));
    let (c_dev, c_seg, c_price) = (col("device_type"), col("user_segment"), col("product_price"));
    let (c_label, c_rev) = (col("label"), col("revenue"));

    let mut interner = Interner::default();
    let missing = interner.intern(MISSING_TOKEN);
    let attr_names: Vec<Arc<str>> = attr_pos.iter().map(|(_, n)| interner.intern(n)).collect();

    let mut events = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", columns.len(), fields.len()),
            });
        }

        let parse_num = |name: &str, s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("unparsable {name} value '{s}'"),
            })
        };
        let day = fields[c_day].parse::<i64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("unparsable day value '{}'", fields[c_day]),
        })?;
        let time_of_day = fields[c_time].parse::<u32>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("unparsable time_of_day value '{}'", fields[c_time]),
        })?;
        let label = match fields[c_label].trim() {
            "1" | "+1" => 1i8,
            "-1" => -1,
            "0" => -1,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label must be one of {{-1, 0, 1}}, got '{other}'"),
                });
            }
        };
        let advertiser = fields[c_adv];
        if advertiser.is_empty() {
            return Err(Error::Parse { line: line_no, message: "empty advertiser_id".into() });
        }

        let cat = |interner: &mut Interner, s: &str| {
            if s.is_empty() {
                missing.clone()
            } else {
                interner.intern(s)
            }
        };
        let device_type = cat(&mut interner, fields[c_dev]);
        let user_segment = cat(&mut interner, fields[c_seg]);
        let mut product_attrs = Vec::with_capacity(attr_pos.len());
        for ((pos, _), name) in attr_pos.iter().zip(&attr_names) {
            product_attrs.push((name.clone(), cat(&mut interner, fields[*pos])));
        }

        let record = EventRecord {
            day,
            time_of_day,
            advertiser_id: interner.intern(advertiser),
            device_type,
            user_segment,
            product_attrs,
            product_price: parse_num("product_price", fields[c_price])?,
            label,
            revenue: parse_num("revenue", fields[c_rev])?,
        };
        record.validate().map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        events.push(record);
    }

    let metadata = match metadata_hint {
        Some(mut m) => {
            m.attr_columns = attr_pos.iter().map(|(_, n)| n.clone()).collect();
            m
        }
        None => LogMetadata {
            epoch_date: None,
            attr_columns: attr_pos.iter().map(|(_, n)| n.clone()).collect(),
        },
    };
    EventLog::new(events, metadata)
}

/// Serializes the log back to the TSV format accepted by [`parse_event_log`].
/// Missing attribute values are written as empty cells.
pub fn write_tsv<W: Write>(log: &EventLog, mut out: W) -> Result<()> {
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    for name in &log.metadata().attr_columns {
        header.push(name);
    }
    writeln!(out, "{}", header.join("\t"))?;

    for e in log.events() {
        write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.day,
            e.time_of_day,
            e.advertiser_id,
            e.device_type,
            e.user_segment,
            e.product_price,
            e.label,
            e.revenue
        )?;
        for name in &log.metadata().attr_columns {
            let value = e.attr(name).unwrap_or(MISSING_TOKEN);
            let cell = if value == MISSING_TOKEN { "" } else { value };
            write!(out, "\t{cell}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Sidecar document describing a serialized log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogSidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch_date: Option<String>,
    pub attr_columns: Vec<String>,
    pub day_range: Option<(i64, i64)>,
    pub n_events: usize,
}

impl LogSidecar {
    pub fn for_log(log: &EventLog) -> Self {
        Self {
            epoch_date: log.metadata().epoch_date.clone(),
            attr_columns: log.metadata().attr_columns.clone(),
            day_range: log.day_range(),
            n_events: log.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample_tsv() -> String {
        let mut s = String::from(
            "day\ttime_of_day\tadvertiser_id\tdevice_type\tuser_segment\tproduct_price\tlabel\trevenue\tcategory\n",
        );
        s.push_str("3\t100\tadv_a\tmobile\tnew\t10.5\t1\t10.5\tshoes\n");
        s.push_str("1\t50\tadv_a\tdesktop\treturning\t0\t0\t0\t\n");
        s.push_str("2\t75\tadv_b\tmobile\tnew\t3.25\t-1\t0\tbags\n");
        s
    }

    #[test]
    fn parses_three_rows_and_sorts() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.day_range(), Some((1, 3)));
        let days: Vec<i64> = log.events().iter().map(|e| e.day).collect();
        assert_eq!(days, vec![1, 2, 3]);
        // label 0 normalized to -1, empty attr cell becomes the missing token
        assert_eq!(log.events()[0].label, -1);
        assert_eq!(log.events()[0].attr("category"), Some(MISSING_TOKEN));
        assert_eq!(log.events()[2].attr("category"), Some("shoes"));
    }

    #[test]
    fn empty_file_yields_empty_log() {
        let header = sample_tsv().lines().next().unwrap().to_string() + "\n";
        let log = parse_event_log(Cursor::new(header), None).unwrap();
        assert_eq!(log.len(), 0);
        assert_eq!(log.day_range(), None);
    }

    #[test]
    fn zero_one_labels_match_line_count() {
        // Oracle: count '1' labels directly in the text before parsing.
        let text = sample_tsv();
        let positives_in_text = text
            .lines()
            .skip(1)
            .filter(|l| l.split('\t').nth(6) == Some("1"))
            .count();
        let log = parse_event_log(Cursor::new(text), None).unwrap();
        let conversions = log.events().iter().filter(|e| e.is_conversion()).count();
        assert_eq!(conversions, positives_in_text);
        assert!(log.events().iter().all(|e| e.label == 1 || e.label == -1));
    }

    #[test]
    fn malformed_rows_cite_line_numbers() {
        let mut bad_count = sample_tsv();
        bad_count.push_str("4\t1\tadv_a\tmobile\tnew\t1.0\t1\n");
        let err = parse_event_log(Cursor::new(bad_count), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");

        let bad_label = sample_tsv().replace("\t-1\t", "\t7\t");
        let err = parse_event_log(Cursor::new(bad_label), None).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");

        let bad_num = sample_tsv().replace("3.25", "not-a-number");
        let err = parse_event_log(Cursor::new(bad_num), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn missing_required_column_rejected() {
        let text = sample_tsv().replace("revenue", "rev");
        let err = parse_event_log(Cursor::new(text), None).unwrap_err();
        assert!(err.to_string().contains("revenue"), "{err}");
    }

    #[test]
    fn slice_window_full_range_is_identity() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        let (first, last) = log.day_range().unwrap();
        let sliced = slice_window(&log, first, last).unwrap();
        assert_eq!(sliced, log);
    }

    #[test]
    fn slice_window_single_day_count_matches_scan() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        for d in 0..5 {
            let expected = log.events().iter().filter(|e| e.day == d).count();
            let got = slice_window(&log, d, d).unwrap().len();
            assert_eq!(got, expected, "day {d}");
        }
    }

    #[test]
    fn slice_window_disjoint_is_empty() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        let sliced = slice_window(&log, 100, 200).unwrap();
        assert!(sliced.is_empty());
        assert_eq!(sliced.day_range(), None);
    }

    #[test]
    fn slice_window_rejects_inverted_range() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        assert!(matches!(slice_window(&log, 3, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn slice_composition_equals_intersection() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        for (a, b, c, d) in [(1, 3, 2, 3), (1, 2, 2, 3), (0, 10, 1, 1), (1, 1, 1, 3)] {
            let chained = slice_window(&slice_window(&log, a, b).unwrap(), c, d).unwrap();
            let direct = slice_window(&log, a.max(c), b.min(d)).unwrap();
            assert_eq!(chained.events(), direct.events());
        }
    }

    #[test]
    fn stats_tally_single_advertiser() {
        let mut events = Vec::new();
        for i in 0..10 {
            events.push(EventRecord {
                day: 5,
                time_of_day: i,
                advertiser_id: Arc::from("adv"),
                device_type: Arc::from("mobile"),
                user_segment: Arc::from("new"),
                product_attrs: vec![],
                product_price: 1.0,
                label: if i < 2 { 1 } else { -1 },
                revenue: if i < 2 { 1.0 } else { 0.0 },
            });
        }
        let log = EventLog::new(events, LogMetadata::default()).unwrap();
        let stats = daily_advertiser_stats(&log);
        assert_eq!(
            stats.day_count("adv", 5),
            Some(DayCount { events: 10, conversions: 2 })
        );
        assert_eq!(stats.day_count("adv", 4), None);
    }

    #[test]
    fn stats_match_bruteforce_groupby() {
        // Two interleaved advertisers; oracle is a naive nested loop.
        let mut events = Vec::new();
        for day in 0..4 {
            for i in 0..6 {
                let adv = if i % 2 == 0 { "a1" } else { "a2" };
                let label = if (day + i) % 3 == 0 { 1 } else { -1 };
                events.push(EventRecord {
                    day,
                    time_of_day: i as u32,
                    advertiser_id: Arc::from(adv),
                    device_type: Arc::from("d"),
                    user_segment: Arc::from("s"),
                    product_attrs: vec![],
                    product_price: 0.0,
                    label,
                    revenue: 0.0,
                });
            }
        }
        let log = EventLog::new(events, LogMetadata::default()).unwrap();
        let stats = daily_advertiser_stats(&log);

        for adv in ["a1", "a2"] {
            for day in 0..4 {
                let mut want = DayCount::default();
                for e in log.events() {
                    if e.advertiser_id.as_ref() == adv && e.day == day {
                        want.events += 1;
                        if e.is_conversion() {
                            want.conversions += 1;
                        }
                    }
                }
                assert_eq!(stats.day_count(adv, day), Some(want), "{adv} day {day}");
            }
        }
        assert_eq!(stats.total_events(), log.len() as u64);
    }

    #[test]
    fn tsv_round_trip_is_stable() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        let mut buf = Vec::new();
        write_tsv(&log, &mut buf).unwrap();
        let reparsed = parse_event_log(Cursor::new(buf.clone()), None).unwrap();
        assert_eq!(reparsed, log);

        let mut buf2 = Vec::new();
        write_tsv(&reparsed, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn restrict_before_drops_recent_days() {
        let log = parse_event_log(Cursor::new(sample_tsv()), None).unwrap();
        let stats = daily_advertiser_stats(&log);
        let restricted = stats.restrict_before(2);
        assert_eq!(restricted.max_day(), Some(1));
        assert!(restricted.day_count("adv_b", 2).is_none());
        assert_eq!(restricted.day_count("adv_a", 1), stats.day_count("adv_a", 1));
    }

    #[test]
    fn record_invariants_enforced() {
        let mut e = EventRecord {
            day: 0,
            time_of_day: 0,
            advertiser_id: Arc::from("a"),
            device_type: Arc::from("d"),
            user_segment: Arc::from("s"),
            product_attrs: vec![],
            product_price: 1.0,
            label: -1,
            revenue: 0.0,
        };
        assert!(e.validate().is_ok());
        e.revenue = 5.0;
        assert!(e.validate().is_err(), "non-converting event with revenue");
        e.revenue = 0.0;
        e.time_of_day = 86_400;
        assert!(e.validate().is_err(), "time_of_day out of range");
    }
}
