//! Layered twin store.
//!
//! Level 2 (control) is the operations twin: one record per validated cycle
//! frame. Level 3 (supervisory) and level 5 (KPI) are produced by
//! downsampling the level directly below, so every record above level 2 is a
//! pure function of the records it covers. A separate management twin keeps
//! adaptation and service state.
//!
//! Signal names are `x`, `y`, `u_a`, `u_b`, `u_applied` and `source` for
//! asset 0 and the same names suffixed with `@<asset>` for the others.
//! `source` is encoded as 0 (hold), 1 (A) or 2 (B). Aggregated signals are
//! named `<signal>.<aggregation>`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::AsyncTask;
use crate::plant::AssetId;
use crate::ring::{Cycle, ReadCursor, RingReader, SignalFrame, Source};

pub const DEFAULT_DEPTH: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum TwinLevel {
    Control = 2,
    Supervisory = 3,
    Kpi = 5,
}

impl TwinLevel {
    pub fn from_number(n: u8) -> Option<TwinLevel> {
        match n {
            2 => Some(TwinLevel::Control),
            3 => Some(TwinLevel::Supervisory),
            5 => Some(TwinLevel::Kpi),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl From<TwinLevel> for u8 {
    fn from(l: TwinLevel) -> u8 {
        l.number()
    }
}

impl TryFrom<u8> for TwinLevel {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        TwinLevel::from_number(n).ok_or_else(|| format!("unknown twin level {n}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Latest,
    Mean,
    Max,
    Rms,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Latest => "latest",
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
            Aggregation::Rms => "rms",
        }
    }

    /// Aggregates a non-empty window given in cycle order.
    ///
    /// The mean is taken relative to the first value,
    /// `v0 + sum(v - v0) / n`, which is exact for constant windows.
    pub fn apply(self, values: &[f64]) -> f64 {
        debug_assert!(!values.is_empty());
        match self {
            Aggregation::Latest => values[values.len() - 1],
            Aggregation::Mean => {
                let v0 = values[0];
                v0 + values.iter().map(|v| v - v0).sum::<f64>() / values.len() as f64
            }
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Rms => (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt(),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelitySpec {
    pub parameters: Vec<String>,
    /// Cycles per output record.
    pub rate: u64,
    pub aggregations: Vec<Aggregation>,
}

impl FidelitySpec {
    pub fn validate(&self) -> Result<(), TwinError> {
        if self.rate == 0 {
            return Err(TwinError::Config("rate must be >= 1".into()));
        }
        if self.aggregations.is_empty() {
            return Err(TwinError::Config("at least one aggregation required".into()));
        }
        Ok(())
    }

    fn output_names(&self) -> Vec<String> {
        self.parameters
            .iter()
            .flat_map(|p| self.aggregations.iter().map(move |a| format!("{p}.{a}")))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinRecord {
    pub level: TwinLevel,
    /// First and last cycle covered (equal at level 2).
    pub start: Cycle,
    pub end: Cycle,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown signal `{0}`")]
    UnknownSignal(String),
    #[error("level {0} is not stored")]
    UnknownLevel(u8),
    #[error("no shadow records in cycles {start}..={end}")]
    NoShadow { start: Cycle, end: Cycle },
}

pub fn signal_name(base: &str, asset: AssetId) -> String {
    if asset == 0 {
        base.to_string()
    } else {
        format!("{base}@{asset}")
    }
}

fn source_code(s: Source) -> f64 {
    match s {
        Source::Hold => 0.0,
        Source::A => 1.0,
        Source::B => 2.0,
    }
}

/// Level-2 values of one frame. `u_a`/`u_b` are absent when that controller
/// produced nothing.
pub fn frame_values(frame: &SignalFrame) -> BTreeMap<String, f64> {
    let mut v = BTreeMap::new();
    for asset in 0..frame.asset_count {
        let a = frame.asset(asset);
        v.insert(signal_name("x", asset), a.x);
        v.insert(signal_name("y", asset), a.y);
        if let Some(u) = a.u_a {
            v.insert(signal_name("u_a", asset), u);
        }
        if let Some(u) = a.u_b {
            v.insert(signal_name("u_b", asset), u);
        }
        v.insert(signal_name("u_applied", asset), a.u_applied);
        v.insert(signal_name("source", asset), source_code(a.source));
    }
    v
}

fn window_of(cycle: Cycle, rate: u64) -> u64 {
    cycle / rate
}

fn aggregate_window(spec: &FidelitySpec, level: TwinLevel, window: u64, records: &[&TwinRecord]) -> Option<TwinRecord> {
    if records.is_empty() {
        return None;
    }
    let mut values = BTreeMap::new();
    for p in &spec.parameters {
        let series: Vec<f64> = records.iter().filter_map(|r| r.values.get(p).copied()).collect();
        if series.is_empty() {
            continue;
        }
        for a in &spec.aggregations {
            values.insert(format!("{p}.{a}"), a.apply(&series));
        }
    }
    Some(TwinRecord {
        level,
        start: window * spec.rate,
        end: window * spec.rate + spec.rate - 1,
        values,
    })
}

/// Aggregates `source` records into windows of `spec.rate` cycles aligned
/// at multiples of the rate. A window is complete once a later record exists
/// or its last cycle is covered; the trailing incomplete window is emitted
/// only with `flush`.
pub fn downsample(
    source: &[TwinRecord],
    spec: &FidelitySpec,
    level: TwinLevel,
    flush: bool,
) -> Result<Vec<TwinRecord>, TwinError> {
    spec.validate()?;
    let known: BTreeSet<&str> = source
        .iter()
        .flat_map(|r| r.values.keys().map(String::as_str))
        .collect();
    if let Some(unknown) = spec.parameters.iter().find(|p| !known.contains(p.as_str())) {
        if !source.is_empty() {
            return Err(TwinError::UnknownSignal(unknown.clone()));
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i < source.len() {
        let w = window_of(source[i].start, spec.rate);
        let mut j = i;
        while j < source.len() && window_of(source[j].start, spec.rate) == w {
            j += 1;
        }
        let window_end = w * spec.rate + spec.rate - 1;
        let complete = j < source.len() || source[j - 1].end >= window_end;
        if complete || flush {
            let group: Vec<&TwinRecord> = source[i..j].iter().collect();
            out.extend(aggregate_window(spec, level, w, &group));
        }
        i = j;
    }
    Ok(out)
}

/// Incremental form of [`downsample`]; produces the same records.
#[derive(Clone, Debug)]
struct Downsampler {
    spec: FidelitySpec,
    level: TwinLevel,
    window: Option<u64>,
    buffer: Vec<TwinRecord>,
}

impl Downsampler {
    fn new(spec: FidelitySpec, level: TwinLevel) -> Self {
        Downsampler {
            spec,
            level,
            window: None,
            buffer: Vec::new(),
        }
    }

    fn push(&mut self, record: TwinRecord, out: &mut Vec<TwinRecord>) {
        let w = window_of(record.start, self.spec.rate);
        if self.window.is_some_and(|cur| cur != w) {
            self.emit(out);
        }
        self.window = Some(w);
        let end = record.end;
        self.buffer.push(record);
        if end >= w * self.spec.rate + self.spec.rate - 1 {
            self.emit(out);
        }
    }

    fn emit(&mut self, out: &mut Vec<TwinRecord>) {
        if let Some(w) = self.window.take() {
            let group: Vec<&TwinRecord> = self.buffer.iter().collect();
            out.extend(aggregate_window(&self.spec, self.level, w, &group));
        }
        self.buffer.clear();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMetrics {
    pub asset: AssetId,
    pub start: Cycle,
    pub end: Cycle,
    /// `(cycle, |u_a - u_b|)` for every cycle where both were recorded.
    pub per_cycle: Vec<(Cycle, f64)>,
    pub rms: f64,
    pub max: f64,
}

/// Divergence between the A and B outputs of `asset` in level-2 records.
pub fn divergence(
    records: &[TwinRecord],
    asset: AssetId,
    start: Cycle,
    end: Cycle,
) -> Result<DivergenceMetrics, TwinError> {
    let ua = signal_name("u_a", asset);
    let ub = signal_name("u_b", asset);
    let per_cycle: Vec<(Cycle, f64)> = records
        .iter()
        .filter(|r| r.start >= start && r.start <= end)
        .filter_map(|r| match (r.values.get(&ua), r.values.get(&ub)) {
            (Some(a), Some(b)) => Some((r.start, (a - b).abs())),
            _ => None,
        })
        .collect();
    if per_cycle.is_empty() {
        return Err(TwinError::NoShadow { start, end });
    }
    let d: Vec<f64> = per_cycle.iter().map(|(_, d)| *d).collect();
    Ok(DivergenceMetrics {
        asset,
        start,
        end,
        rms: Aggregation::Rms.apply(&d),
        max: Aggregation::Max.apply(&d),
        per_cycle,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinConfig {
    pub depth: usize,
    pub supervisory: FidelitySpec,
    pub kpi: FidelitySpec,
}

impl TwinConfig {
    /// Level 3: mean and max of every level-2 signal of the given assets per
    /// 100 cycles. Level 5: mean of the level-3 means and max of the maxes of
    /// the applied outputs per 10,000 cycles.
    pub fn for_assets(asset_count: usize) -> Self {
        let bases = ["x", "y", "u_a", "u_b", "u_applied"];
        let parameters: Vec<String> = (0..asset_count)
            .flat_map(|a| bases.iter().map(move |b| signal_name(b, a)))
            .collect();
        let kpi_params: Vec<String> = (0..asset_count)
            .flat_map(|a| {
                let u = signal_name("u_applied", a);
                let x = signal_name("x", a);
                [format!("{x}.mean"), format!("{u}.mean"), format!("{u}.max")]
            })
            .collect();
        TwinConfig {
            depth: DEFAULT_DEPTH,
            supervisory: FidelitySpec {
                parameters,
                rate: 100,
                aggregations: vec![Aggregation::Mean, Aggregation::Max],
            },
            kpi: FidelitySpec {
                parameters: kpi_params,
                rate: 10_000,
                aggregations: vec![Aggregation::Mean, Aggregation::Max],
            },
        }
    }

    pub fn validate(&self) -> Result<(), TwinError> {
        if self.depth == 0 {
            return Err(TwinError::Config("depth must be >= 1".into()));
        }
        self.supervisory.validate()?;
        self.kpi.validate()?;
        let l3 = self.supervisory.output_names();
        if let Some(p) = self.kpi.parameters.iter().find(|p| !l3.contains(p)) {
            return Err(TwinError::UnknownSignal(p.clone()));
        }
        Ok(())
    }
}

/// Operations twin plus its derived levels. Single writer.
#[derive(Clone, Debug)]
pub struct TwinStore {
    config: TwinConfig,
    signals: BTreeSet<String>,
    ops: VecDeque<TwinRecord>,
    supervisory: VecDeque<TwinRecord>,
    kpi: VecDeque<TwinRecord>,
    l3: Downsampler,
    l5: Downsampler,
    recorded: u64,
    skipped: u64,
    torn: u64,
}

impl TwinStore {
    pub fn new(config: TwinConfig, asset_count: usize) -> Result<Self, TwinError> {
        config.validate()?;
        let signals: BTreeSet<String> = (0..asset_count)
            .flat_map(|a| {
                ["x", "y", "u_a", "u_b", "u_applied", "source"]
                    .into_iter()
                    .map(move |b| signal_name(b, a))
            })
            .collect();
        if let Some(p) = config.supervisory.parameters.iter().find(|p| !signals.contains(*p)) {
            return Err(TwinError::UnknownSignal(p.clone()));
        }
        Ok(TwinStore {
            l3: Downsampler::new(config.supervisory.clone(), TwinLevel::Supervisory),
            l5: Downsampler::new(config.kpi.clone(), TwinLevel::Kpi),
            config,
            signals,
            ops: VecDeque::new(),
            supervisory: VecDeque::new(),
            kpi: VecDeque::new(),
            recorded: 0,
            skipped: 0,
            torn: 0,
        })
    }

    pub fn config(&self) -> &TwinConfig {
        &self.config
    }

    /// Appends a validated frame.
    pub fn record(&mut self, frame: &SignalFrame) {
        let rec = TwinRecord {
            level: TwinLevel::Control,
            start: frame.cycle,
            end: frame.cycle,
            values: frame_values(frame),
        };
        self.recorded += 1;
        let mut l3 = Vec::new();
        self.l3.push(rec.clone(), &mut l3);
        push_bounded(&mut self.ops, rec, self.config.depth);
        for r in l3 {
            let mut l5 = Vec::new();
            self.l5.push(r.clone(), &mut l5);
            push_bounded(&mut self.supervisory, r, self.config.depth);
            for k in l5 {
                push_bounded(&mut self.kpi, k, self.config.depth);
            }
        }
    }

    pub fn count_skipped(&mut self, n: u64) {
        self.skipped += n;
    }

    pub fn count_torn(&mut self, n: u64) {
        self.torn += n;
    }

    pub fn recorded(&self) -> u64 {
        self.recorded
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn torn(&self) -> u64 {
        self.torn
    }

    pub fn skip_ratio(&self) -> f64 {
        let total = self.recorded + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }

    pub fn records(&self, level: TwinLevel) -> &VecDeque<TwinRecord> {
        match level {
            TwinLevel::Control => &self.ops,
            TwinLevel::Supervisory => &self.supervisory,
            TwinLevel::Kpi => &self.kpi,
        }
    }

    fn known_signals(&self, level: TwinLevel) -> BTreeSet<String> {
        match level {
            TwinLevel::Control => self.signals.clone(),
            TwinLevel::Supervisory => self.config.supervisory.output_names().into_iter().collect(),
            TwinLevel::Kpi => self.config.kpi.output_names().into_iter().collect(),
        }
    }

    /// Records of `level` whose start lies in `start..=end`, restricted to
    /// the given signals (all when empty).
    pub fn query(&self, level: u8, signals: &[String], start: Cycle, end: Cycle) -> Result<Vec<TwinRecord>, TwinError> {
        let level = TwinLevel::from_number(level).ok_or(TwinError::UnknownLevel(level))?;
        let known = self.known_signals(level);
        if let Some(s) = signals.iter().find(|s| !known.contains(*s)) {
            return Err(TwinError::UnknownSignal(s.clone()));
        }
        let recs = self.records(level);
        let first = recs.partition_point(|r| r.start < start);
        Ok(recs
            .iter()
            .skip(first)
            .take_while(|r| r.start <= end)
            .map(|r| {
                if signals.is_empty() {
                    r.clone()
                } else {
                    TwinRecord {
                        values: r
                            .values
                            .iter()
                            .filter(|(k, _)| signals.contains(k))
                            .map(|(k, v)| (k.clone(), *v))
                            .collect(),
                        ..r.clone()
                    }
                }
            })
            .collect())
    }

    pub fn divergence(&self, asset: AssetId, start: Cycle, end: Cycle) -> Result<DivergenceMetrics, TwinError> {
        let recs = self.query(2, &[], start, end)?;
        divergence(&recs, asset, start, end)
    }

    /// Flushes the incomplete trailing windows of the derived levels.
    pub fn flush(&mut self) {
        let mut l3 = Vec::new();
        self.l3.emit(&mut l3);
        for r in l3 {
            let mut l5 = Vec::new();
            self.l5.push(r.clone(), &mut l5);
            push_bounded(&mut self.supervisory, r, self.config.depth);
            for k in l5 {
                push_bounded(&mut self.kpi, k, self.config.depth);
            }
        }
        let mut l5 = Vec::new();
        self.l5.emit(&mut l5);
        for k in l5 {
            push_bounded(&mut self.kpi, k, self.config.depth);
        }
    }

    /// CSV of one level: `cycle_start,cycle_end,<signals...>`. Missing
    /// values are empty fields.
    pub fn write_csv(&self, level: TwinLevel, mut out: impl Write) -> std::io::Result<()> {
        let columns: Vec<String> = self.known_signals(level).into_iter().collect();
        write!(out, "cycle_start,cycle_end")?;
        for c in &columns {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
        for r in self.records(level) {
            write!(out, "{},{}", r.start, r.end)?;
            for c in &columns {
                match r.values.get(c) {
                    Some(v) => write!(out, ",{v}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn push_bounded(q: &mut VecDeque<TwinRecord>, r: TwinRecord, depth: usize) {
    if q.len() == depth {
        q.pop_front();
    }
    q.push_back(r);
}

pub type SharedTwin = Arc<RwLock<TwinStore>>;

/// Stage-4 recorder: reads validated frames from the ring into the twin.
pub struct TwinRecorder {
    cursor: ReadCursor,
    twin: SharedTwin,
}

impl TwinRecorder {
    pub fn new(twin: SharedTwin) -> Self {
        TwinRecorder {
            cursor: ReadCursor::new(0),
            twin,
        }
    }
}

impl AsyncTask for TwinRecorder {
    fn poll(&mut self, reader: &RingReader) {
        let (skipped0, torn0) = (self.cursor.skipped(), self.cursor.torn());
        let mut frames = Vec::new();
        self.cursor.poll(reader, |f| frames.push(f));
        let Ok(mut twin) = self.twin.write() else {
            return;
        };
        for f in &frames {
            twin.record(f);
        }
        twin.count_skipped(self.cursor.skipped() - skipped0);
        twin.count_torn(self.cursor.torn() - torn0);
    }
}

/// One entry of the management twin log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagementEvent {
    pub cycle: Cycle,
    pub kind: String,
    pub detail: serde_json::Value,
}

/// Management twin: an append-only log of IPC, service and adaptation
/// events, exportable as line-delimited JSON.
#[derive(Clone, Debug, Default)]
pub struct ManagementTwin {
    events: Vec<ManagementEvent>,
}

impl ManagementTwin {
    pub fn push(&mut self, cycle: Cycle, kind: impl Into<String>, detail: serde_json::Value) {
        self.events.push(ManagementEvent {
            cycle,
            kind: kind.into(),
            detail,
        });
    }

    pub fn events(&self) -> &[ManagementEvent] {
        &self.events
    }

    pub fn write_ndjson(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cycle: Cycle, v: f64) -> TwinRecord {
        TwinRecord {
            level: TwinLevel::Control,
            start: cycle,
            end: cycle,
            values: BTreeMap::from([("x".to_string(), v)]),
        }
    }

    fn spec(rate: u64, agg: Aggregation) -> FidelitySpec {
        FidelitySpec {
            parameters: vec!["x".into()],
            rate,
            aggregations: vec![agg],
        }
    }

    #[test]
    fn constant_signal_mean_is_constant() {
        let src: Vec<_> = (0..1000).map(|c| rec(c, 0.37)).collect();
        let out = downsample(&src, &spec(100, Aggregation::Mean), TwinLevel::Supervisory, false).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|r| r.values["x.mean"] == 0.37));
    }

    #[test]
    fn rate_one_latest_is_identity() {
        let src: Vec<_> = (0..50).map(|c| rec(c, c as f64 * 1.5)).collect();
        let out = downsample(&src, &spec(1, Aggregation::Latest), TwinLevel::Supervisory, false).unwrap();
        assert_eq!(out.len(), 50);
        for (a, b) in src.iter().zip(&out) {
            assert_eq!(a.values["x"], b.values["x.latest"]);
            assert_eq!((a.start, a.end), (b.start, b.end));
        }
    }

    #[test]
    fn trailing_window_needs_flush() {
        let src: Vec<_> = (0..150).map(|c| rec(c, 1.0)).collect();
        let s = spec(100, Aggregation::Max);
        assert_eq!(downsample(&src, &s, TwinLevel::Supervisory, false).unwrap().len(), 1);
        assert_eq!(downsample(&src, &s, TwinLevel::Supervisory, true).unwrap().len(), 2);
    }

    #[test]
    fn unknown_signal_is_config_error() {
        let src = vec![rec(0, 1.0)];
        let mut s = spec(10, Aggregation::Mean);
        s.parameters = vec!["nope".into()];
        assert_eq!(
            downsample(&src, &s, TwinLevel::Supervisory, false),
            Err(TwinError::UnknownSignal("nope".into()))
        );
    }

    #[test]
    fn divergence_of_constant_offset() {
        let src: Vec<_> = (0..20)
            .map(|c| TwinRecord {
                level: TwinLevel::Control,
                start: c,
                end: c,
                values: BTreeMap::from([("u_a".to_string(), 1.0), ("u_b".to_string(), 0.0)]),
            })
            .collect();
        let d = divergence(&src, 0, 0, 19).unwrap();
        assert_eq!((d.rms, d.max), (1.0, 1.0));
        assert_eq!(d.per_cycle.len(), 20);
    }

    #[test]
    fn divergence_without_shadow_is_empty_result() {
        let src: Vec<_> = (0..5).map(|c| rec(c, 1.0)).collect();
        assert!(matches!(divergence(&src, 0, 0, 4), Err(TwinError::NoShadow { .. })));
    }

    #[test]
    fn query_ranges_and_errors() {
        let mut store = TwinStore::new(TwinConfig::for_assets(1), 1).unwrap();
        for c in 0..150 {
            let mut f = SignalFrame::new(c, 0, 1);
            f.asset_mut(0).x = c as f64;
            store.record(&f);
        }
        assert_eq!(store.query(2, &["x".into()], 0, 99).unwrap().len(), 100);
        assert!(store.query(2, &[], 500, 600).unwrap().is_empty());
        assert_eq!(store.query(3, &["x.mean".into()], 0, 1000).unwrap().len(), 1);
        assert_eq!(store.query(4, &[], 0, 1), Err(TwinError::UnknownLevel(4)));
        assert!(matches!(
            store.query(2, &["z".into()], 0, 1),
            Err(TwinError::UnknownSignal(_))
        ));
    }

    #[test]
    fn depth_bounds_the_ops_twin() {
        let mut cfg = TwinConfig::for_assets(1);
        cfg.depth = 10;
        let mut store = TwinStore::new(cfg, 1).unwrap();
        for c in 0..25 {
            store.record(&SignalFrame::new(c, 0, 1));
        }
        assert_eq!(store.records(TwinLevel::Control).len(), 10);
        assert_eq!(store.records(TwinLevel::Control).front().unwrap().start, 15);
        assert_eq!(store.recorded(), 25);
    }
}
