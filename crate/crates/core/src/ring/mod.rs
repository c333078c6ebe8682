//! Bounded shared ring with per-stage sequence barriers.
//!
//! This is a Disruptor-style pipeline adapted for cyclic control:
//!
//! * one producer (the stage-1 input processor) claims the slot of each new
//!   cycle without ever looking at consumer progress, so `claim` is wait-free;
//! * the synchronous stages 1..=3 hand a cycle to each other through release
//!   ordered completion counters;
//! * asynchronous readers do not gate the producer at all. They read
//!   optimistically and validate the read against the slot's cycle stamp.
//!
//! Stamping protocol: `claim` stores the new cycle into the slot stamp with
//! release ordering followed by a release fence, and only then are frame words
//! written. The stamp is not touched again after the writes. A reader
//! captures the stamp (acquire), checks that the stamped cycle has already
//! been committed by the last writing stage, copies the words, issues an
//! acquire fence and re-reads the stamp. Equal stamps on a committed cycle
//! mean the copy belongs to exactly that cycle.
//!
//! All slot memory is atomic words, so concurrent readers never race in the
//! language-level sense; torn copies are possible and are reported invalid.

mod frame;
mod graph;

use std::fmt::Write as _;
use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use frame::{checksum, AssetSignals, SignalFrame, Source, FRAME_WORDS, MAX_ASSETS};
pub use graph::{Access, StageGraph, StageGraphDelta, StageId, TaskId, TaskRef};

pub type Cycle = u64;

/// Stamp of a slot that has never been claimed.
pub const NEVER_WRITTEN: Cycle = u64::MAX;

/// Number of shared-memory operations a claim performs. There is no loop in
/// `claim`, so this is the same for every call.
pub const CLAIM_STEPS: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{stage} is read-only; frame write rejected")]
    ReadOnly { stage: StageId },
}

#[repr(align(64))]
struct Padded(AtomicU64);

#[repr(align(64))]
struct Slot {
    stamp: AtomicU64,
    words: [AtomicU64; FRAME_WORDS + 1],
}

impl Slot {
    fn new() -> Self {
        Slot {
            stamp: AtomicU64::new(NEVER_WRITTEN),
            words: std::array::from_fn(|_| AtomicU64::new(0)),
        }
    }
}

struct Ring {
    slots: Box<[Slot]>,
    mask: u64,
    /// Count of claimed cycles (next cycle to claim).
    produced: Padded,
    /// Count of cycles completed per synchronous stage (index = stage - 1).
    completed: [Padded; 3],
    write_violations: AtomicU64,
}

impl Ring {
    fn slot(&self, cycle: Cycle) -> &Slot {
        &self.slots[(cycle & self.mask) as usize]
    }

    fn completed_count(&self, stage: StageId) -> u64 {
        self.completed[stage as usize - 1].0.load(Ordering::Acquire)
    }

    /// Count of cycles available to `stage`.
    fn available_to(&self, stage: StageId) -> u64 {
        match stage.upstream() {
            None => self.produced.0.load(Ordering::Acquire),
            Some(up) => self.completed_count(up),
        }
    }

    fn publish(&self, stage: StageId, cycle: Cycle) -> Result<(), PipelineError> {
        if !stage.is_synchronous() {
            return Err(PipelineError::Protocol(
                "asynchronous stage has no completion barrier".into(),
            ));
        }
        let counter = &self.completed[stage as usize - 1].0;
        let next = counter.load(Ordering::Relaxed);
        if cycle != next {
            return Err(PipelineError::Protocol(format!(
                "{stage} publishing cycle {cycle}, expected {next}"
            )));
        }
        let upstream = self.available_to(stage);
        if cycle >= upstream {
            return Err(PipelineError::Protocol(format!(
                "{stage} publishing cycle {cycle} ahead of its upstream"
            )));
        }
        counter.store(cycle + 1, Ordering::Release);
        Ok(())
    }

    fn store(&self, stage: StageId, cycle: Cycle, frame: &SignalFrame) -> Result<(), PipelineError> {
        if !stage.may_write() {
            self.write_violations.fetch_add(1, Ordering::Relaxed);
            return Err(PipelineError::ReadOnly { stage });
        }
        let slot = self.slot(cycle);
        if slot.stamp.load(Ordering::Relaxed) != cycle {
            return Err(PipelineError::Protocol(format!("cycle {cycle} is not claimed")));
        }
        if self.completed_count(stage) > cycle || self.available_to(stage) <= cycle {
            return Err(PipelineError::Protocol(format!(
                "{stage} cannot write cycle {cycle} outside its turn"
            )));
        }
        let words = frame.encode();
        for (dst, w) in slot.words.iter().zip(words.iter()) {
            dst.store(*w, Ordering::Relaxed);
        }
        slot.words[FRAME_WORDS].store(checksum(&words), Ordering::Relaxed);
        Ok(())
    }

    fn load(&self, stage: StageId, cycle: Cycle) -> Result<SignalFrame, PipelineError> {
        if !stage.is_synchronous() {
            return Err(PipelineError::Protocol(
                "asynchronous readers must use transactions".into(),
            ));
        }
        if self.available_to(stage) <= cycle || self.completed_count(stage) > cycle {
            return Err(PipelineError::Protocol(format!(
                "{stage} cannot read cycle {cycle} outside its turn"
            )));
        }
        let slot = self.slot(cycle);
        let words: [u64; FRAME_WORDS] = std::array::from_fn(|i| slot.words[i].load(Ordering::Relaxed));
        Ok(SignalFrame::decode(&words))
    }

    fn begin_read(&self, position: usize) -> ReadTxn {
        let slot = &self.slots[position];
        let stamp = slot.stamp.load(Ordering::Acquire);
        let committed = stamp != NEVER_WRITTEN && stamp < self.completed_count(StageId::Control);
        ReadTxn {
            slot_position: position,
            observed_stamp: stamp,
            committed,
        }
    }

    fn copy(&self, txn: &ReadTxn) -> RawFrame {
        let slot = &self.slots[txn.slot_position];
        RawFrame {
            words: std::array::from_fn(|i| slot.words[i].load(Ordering::Relaxed)),
            checksum: slot.words[FRAME_WORDS].load(Ordering::Relaxed),
        }
    }

    fn end_read(&self, txn: &ReadTxn) -> bool {
        fence(Ordering::Acquire);
        let stamp = self.slots[txn.slot_position].stamp.load(Ordering::Relaxed);
        txn.committed && stamp == txn.observed_stamp
    }

    fn sequences(&self) -> SequenceSet {
        // Read downstream first so the snapshot always satisfies the
        // barrier ordering even while stages are advancing.
        let c3 = self.completed_count(StageId::Output);
        let c2 = self.completed_count(StageId::Control);
        let c1 = self.completed_count(StageId::Input);
        let p = self.produced.0.load(Ordering::Acquire);
        let last = |n: u64| n.checked_sub(1);
        SequenceSet {
            produced: last(p),
            completed: [last(c1), last(c2), last(c3)],
        }
    }
}

/// A point-in-time view of the pipeline's counters. `None` means nothing yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceSet {
    pub produced: Option<Cycle>,
    pub completed: [Option<Cycle>; 3],
}

impl SequenceSet {
    pub fn completed(&self, stage: StageId) -> Option<Cycle> {
        match stage {
            StageId::Async => None,
            s => self.completed[s as usize - 1],
        }
    }

    /// `completed[s] <= completed[s-1] <= produced` for every synchronous stage.
    pub fn is_monotone(&self) -> bool {
        let key = |c: Option<Cycle>| c.map_or(0, |c| c + 1);
        key(self.completed[2]) <= key(self.completed[1])
            && key(self.completed[1]) <= key(self.completed[0])
            && key(self.completed[0]) <= key(self.produced)
    }
}

/// An optimistic read of one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadTxn {
    pub slot_position: usize,
    pub observed_stamp: Cycle,
    committed: bool,
}

/// Words copied out of a slot during a transaction.
#[derive(Clone, Copy, Debug)]
pub struct RawFrame {
    pub words: [u64; FRAME_WORDS],
    pub checksum: u64,
}

impl RawFrame {
    pub fn checksum_matches(&self) -> bool {
        checksum(&self.words) == self.checksum
    }

    pub fn decode(&self) -> SignalFrame {
        SignalFrame::decode(&self.words)
    }
}

// Frames are plain `Copy` data and read on the async lane every cycle, so
// the valid case stays unboxed.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReadOutcome {
    Valid(SignalFrame),
    /// The slot already carries a later cycle.
    Overwritten,
    /// The cycle has not been committed by stage 2 yet.
    NotReady,
    /// The slot was re-claimed while the copy was in progress.
    Torn,
}

/// Result of a successful claim.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Claim {
    pub cycle: Cycle,
    pub position: usize,
    /// Instrumented count of shared-memory operations performed.
    pub steps: u32,
}

/// The pipeline owned by the cyclic executor.
pub struct RingPipeline {
    ring: Arc<Ring>,
    graph: StageGraph,
}

impl RingPipeline {
    pub fn create(capacity: usize, graph: StageGraph) -> Result<Self, PipelineError> {
        if capacity < 2 || !capacity.is_power_of_two() {
            return Err(PipelineError::Config(format!(
                "capacity {capacity} must be a power of two >= 2"
            )));
        }
        graph.validate()?;
        let ring = Ring {
            slots: (0..capacity).map(|_| Slot::new()).collect(),
            mask: capacity as u64 - 1,
            produced: Padded(AtomicU64::new(0)),
            completed: std::array::from_fn(|_| Padded(AtomicU64::new(0))),
            write_violations: AtomicU64::new(0),
        };
        Ok(RingPipeline {
            ring: Arc::new(ring),
            graph,
        })
    }

    pub fn capacity(&self) -> usize {
        self.ring.slots.len()
    }

    pub fn graph(&self) -> &StageGraph {
        &self.graph
    }

    /// Reserves the slot for `cycle`. Never waits on any consumer.
    pub fn claim(&self, cycle: Cycle) -> Result<Claim, PipelineError> {
        let ring = &*self.ring;
        let next = ring.produced.0.load(Ordering::Relaxed);
        if cycle != next {
            return Err(PipelineError::Protocol(format!(
                "claim of cycle {cycle}, expected {next}"
            )));
        }
        let position = (cycle & ring.mask) as usize;
        ring.slots[position].stamp.store(cycle, Ordering::Release);
        fence(Ordering::Release);
        ring.produced.0.store(cycle + 1, Ordering::Release);
        Ok(Claim {
            cycle,
            position,
            steps: CLAIM_STEPS,
        })
    }

    pub fn store(&self, stage: StageId, cycle: Cycle, frame: &SignalFrame) -> Result<(), PipelineError> {
        self.ring.store(stage, cycle, frame)
    }

    pub fn load(&self, stage: StageId, cycle: Cycle) -> Result<SignalFrame, PipelineError> {
        self.ring.load(stage, cycle)
    }

    pub fn publish_stage(&self, stage: StageId, cycle: Cycle) -> Result<(), PipelineError> {
        self.ring.publish(stage, cycle)
    }

    /// Applies a stage/task change set. Takes `&mut self`: only the owner of
    /// the pipeline (the executor, inside its preparation window) can call it.
    pub fn reconfigure(&mut self, delta: &StageGraphDelta) -> Result<(), PipelineError> {
        if delta.is_empty() {
            return Ok(());
        }
        self.graph = self.graph.apply(delta)?;
        Ok(())
    }

    pub fn sequences(&self) -> SequenceSet {
        self.ring.sequences()
    }

    pub fn reader(&self) -> RingReader {
        RingReader {
            ring: Arc::clone(&self.ring),
        }
    }

    /// Handle for a synchronous stage running on another worker.
    pub fn stage_handle(&self, stage: StageId) -> Result<StageHandle, PipelineError> {
        if !stage.is_synchronous() || stage == StageId::Input {
            return Err(PipelineError::Config(format!("{stage} has no stage handle")));
        }
        Ok(StageHandle {
            ring: Arc::clone(&self.ring),
            stage,
        })
    }

    /// Frame writes rejected because they came from a read-only stage.
    pub fn write_violations(&self) -> u64 {
        self.ring.write_violations.load(Ordering::Relaxed)
    }

    /// Diagnostic text report: sequences and the slot table.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let seq = self.sequences();
        let fmt = |c: Option<Cycle>| c.map_or_else(|| "-".to_string(), |c| c.to_string());
        let _ = writeln!(out, "capacity {}", self.capacity());
        let _ = writeln!(
            out,
            "produced {} | stage1 {} | stage2 {} | stage3 {}",
            fmt(seq.produced),
            fmt(seq.completed[0]),
            fmt(seq.completed[1]),
            fmt(seq.completed[2])
        );
        for stage in self.graph.stages() {
            let names: Vec<_> = self.graph.tasks(stage).iter().map(|t| t.id.as_str()).collect();
            let _ = writeln!(out, "{stage}: [{}]", names.join(", "));
        }
        for (i, slot) in self.ring.slots.iter().enumerate() {
            let stamp = slot.stamp.load(Ordering::Acquire);
            let stamp = if stamp == NEVER_WRITTEN {
                "never".to_string()
            } else {
                stamp.to_string()
            };
            let _ = writeln!(out, "slot {i:>4}  stamp {stamp}");
        }
        out
    }
}

/// Read-side handle for asynchronous consumers and twin recorders.
#[derive(Clone)]
pub struct RingReader {
    ring: Arc<Ring>,
}

impl RingReader {
    pub fn capacity(&self) -> usize {
        self.ring.slots.len()
    }

    pub fn position_of(&self, cycle: Cycle) -> usize {
        (cycle & self.ring.mask) as usize
    }

    pub fn begin_read(&self, position: usize) -> ReadTxn {
        self.ring.begin_read(position)
    }

    pub fn read(&self, txn: &ReadTxn) -> RawFrame {
        self.ring.copy(txn)
    }

    pub fn end_read(&self, txn: &ReadTxn) -> bool {
        self.ring.end_read(txn)
    }

    /// Transactional read of a specific cycle.
    pub fn read_cycle(&self, cycle: Cycle) -> ReadOutcome {
        let txn = self.begin_read(self.position_of(cycle));
        if txn.observed_stamp != NEVER_WRITTEN && txn.observed_stamp > cycle {
            return ReadOutcome::Overwritten;
        }
        if txn.observed_stamp != cycle || !txn.committed {
            return ReadOutcome::NotReady;
        }
        let raw = self.read(&txn);
        if self.end_read(&txn) {
            ReadOutcome::Valid(raw.decode())
        } else {
            ReadOutcome::Torn
        }
    }

    pub fn sequences(&self) -> SequenceSet {
        self.ring.sequences()
    }

    /// Count of cycles completed by `stage` (i.e. the next cycle it will
    /// complete).
    pub fn completed_count(&self, stage: StageId) -> u64 {
        self.ring.completed_count(stage)
    }
}

/// Publisher/reader for one synchronous downstream stage.
pub struct StageHandle {
    ring: Arc<Ring>,
    stage: StageId,
}

impl StageHandle {
    pub fn stage(&self) -> StageId {
        self.stage
    }

    /// Count of cycles the upstream stage has released to this one.
    pub fn available(&self) -> u64 {
        self.ring.available_to(self.stage)
    }

    pub fn load(&self, cycle: Cycle) -> Result<SignalFrame, PipelineError> {
        self.ring.load(self.stage, cycle)
    }

    pub fn store(&self, cycle: Cycle, frame: &SignalFrame) -> Result<(), PipelineError> {
        self.ring.store(self.stage, cycle, frame)
    }

    pub fn publish(&self, cycle: Cycle) -> Result<(), PipelineError> {
        self.ring.publish(self.stage, cycle)
    }
}

/// Sequential asynchronous consumer: walks cycles in order, skipping those
/// that were overwritten before it got to them.
#[derive(Debug)]
pub struct ReadCursor {
    next: Cycle,
    skipped: u64,
    torn: u64,
    delivered: u64,
}

impl ReadCursor {
    pub fn new(start: Cycle) -> Self {
        ReadCursor {
            next: start,
            skipped: 0,
            torn: 0,
            delivered: 0,
        }
    }

    pub fn next_cycle(&self) -> Cycle {
        self.next
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn torn(&self) -> u64 {
        self.torn
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Reads every cycle completed by stage 3 that the cursor has not seen
    /// yet, handing valid frames to `sink`. Returns the number delivered.
    pub fn poll(&mut self, reader: &RingReader, mut sink: impl FnMut(SignalFrame)) -> u64 {
        let upto = reader.completed_count(StageId::Output);
        let oldest = upto.saturating_sub(reader.capacity() as u64);
        if self.next < oldest {
            self.skipped += oldest - self.next;
            self.next = oldest;
        }
        let mut n = 0;
        while self.next < upto {
            match reader.read_cycle(self.next) {
                ReadOutcome::Valid(frame) => {
                    sink(frame);
                    n += 1;
                }
                ReadOutcome::Overwritten => self.skipped += 1,
                ReadOutcome::Torn => {
                    self.torn += 1;
                    self.skipped += 1;
                }
                ReadOutcome::NotReady => break,
            }
            self.next += 1;
        }
        self.delivered += n;
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pipeline(cap: usize) -> RingPipeline {
        RingPipeline::create(cap, StageGraph::canonical("input")).unwrap()
    }

    fn run_cycle(p: &RingPipeline, c: Cycle) {
        p.claim(c).unwrap();
        let mut f = SignalFrame::new(c, c * 1000, 1);
        f.assets[0].y = c as f64;
        p.store(StageId::Input, c, &f).unwrap();
        p.publish_stage(StageId::Input, c).unwrap();
        let mut f = p.load(StageId::Control, c).unwrap();
        f.assets[0].u_a = Some(-(c as f64));
        p.store(StageId::Control, c, &f).unwrap();
        p.publish_stage(StageId::Control, c).unwrap();
        p.load(StageId::Output, c).unwrap();
        p.publish_stage(StageId::Output, c).unwrap();
    }

    #[test]
    fn create_rejects_bad_capacity() {
        for cap in [0, 1, 6, 1000] {
            assert!(matches!(
                RingPipeline::create(cap, StageGraph::canonical("p")),
                Err(PipelineError::Config(_))
            ));
        }
    }

    #[test]
    fn create_four_stage_pipeline() {
        let p = pipeline(1024);
        assert_eq!(p.capacity(), 1024);
        assert_eq!(p.graph().stages().count(), 4);
        let seq = p.sequences();
        assert_eq!(seq.produced, None);
        assert_eq!(seq.completed, [None; 3]);
        let r = p.reader();
        for pos in 0..1024 {
            assert_eq!(r.begin_read(pos).observed_stamp, NEVER_WRITTEN);
        }
    }

    #[test]
    fn first_claim_replaces_sentinel() {
        let p = pipeline(8);
        let claim = p.claim(0).unwrap();
        assert_eq!(claim.position, 0);
        assert_eq!(p.reader().begin_read(0).observed_stamp, 0);
        let claim = p.claim(1).unwrap();
        assert_eq!(claim.position, 1);
        assert_eq!(claim.steps, CLAIM_STEPS);
    }

    #[test]
    fn out_of_order_claim_is_protocol_error() {
        let p = pipeline(8);
        for c in 0..3 {
            p.claim(c).unwrap();
        }
        // produced == 2, next expected is 3
        assert!(matches!(p.claim(5), Err(PipelineError::Protocol(_))));
        assert!(matches!(p.claim(2), Err(PipelineError::Protocol(_))));
        p.claim(3).unwrap();
    }

    #[test]
    fn stage_handoff_and_barrier_violation() {
        let p = pipeline(4);
        p.claim(0).unwrap();
        let stage2 = p.stage_handle(StageId::Control).unwrap();
        assert_eq!(stage2.available(), 0);
        p.publish_stage(StageId::Input, 0).unwrap();
        assert_eq!(stage2.available(), 1);
        // stage 3 cannot overtake stage 2
        assert!(matches!(
            p.publish_stage(StageId::Output, 0),
            Err(PipelineError::Protocol(_))
        ));
        p.publish_stage(StageId::Control, 0).unwrap();
        p.publish_stage(StageId::Output, 0).unwrap();
        assert!(p.sequences().is_monotone());
    }

    #[test]
    fn read_only_stages_cannot_write() {
        let p = pipeline(4);
        p.claim(0).unwrap();
        p.publish_stage(StageId::Input, 0).unwrap();
        p.publish_stage(StageId::Control, 0).unwrap();
        let f = SignalFrame::new(0, 0, 1);
        assert_eq!(
            p.store(StageId::Output, 0, &f),
            Err(PipelineError::ReadOnly { stage: StageId::Output })
        );
        assert!(p.store(StageId::Async, 0, &f).is_err());
        assert_eq!(p.write_violations(), 2);
    }

    #[test]
    fn quiescent_read_is_valid() {
        let p = pipeline(4);
        run_cycle(&p, 0);
        let r = p.reader();
        let txn = r.begin_read(0);
        let raw = r.read(&txn);
        assert!(r.end_read(&txn));
        assert!(raw.checksum_matches());
        assert_eq!(raw.decode().assets[0].u_a, Some(-0.0));
    }

    #[test]
    fn read_overlapping_reclaim_is_invalid() {
        let p = pipeline(4);
        for c in 0..4 {
            run_cycle(&p, c);
        }
        let r = p.reader();
        let txn = r.begin_read(1);
        assert_eq!(txn.observed_stamp, 1);
        let _ = r.read(&txn);
        // producer wraps around and re-claims slot 1 for cycle 5
        run_cycle(&p, 4);
        p.claim(5).unwrap();
        assert!(!r.end_read(&txn));
        assert_eq!(r.read_cycle(1), ReadOutcome::Overwritten);
    }

    #[test]
    fn read_of_never_written_slot_fails_validation() {
        let p = pipeline(4);
        let r = p.reader();
        let txn = r.begin_read(2);
        assert!(!r.end_read(&txn));
    }

    #[test]
    fn claimed_but_uncommitted_cycle_is_not_valid() {
        let p = pipeline(4);
        p.claim(0).unwrap();
        let r = p.reader();
        let txn = r.begin_read(0);
        assert_eq!(txn.observed_stamp, 0);
        assert!(!r.end_read(&txn));
        assert_eq!(r.read_cycle(0), ReadOutcome::NotReady);
    }

    #[test]
    fn empty_reconfigure_is_noop() {
        let mut p = pipeline(4);
        let before = p.graph().clone();
        p.reconfigure(&StageGraphDelta::default()).unwrap();
        assert_eq!(p.graph(), &before);
    }

    #[test]
    fn reconfigure_adds_and_removes_stage_two_tasks() {
        let mut p = pipeline(4);
        p.reconfigure(&StageGraphDelta::default().add(StageId::Control, "A", Access::ReadWrite))
            .unwrap();
        p.reconfigure(&StageGraphDelta::default().add(StageId::Control, "B", Access::ReadWrite))
            .unwrap();
        assert_eq!(p.graph().tasks(StageId::Control).len(), 2);
        p.reconfigure(&StageGraphDelta::default().remove("B")).unwrap();
        let ids: Vec<_> = p
            .graph()
            .tasks(StageId::Control)
            .iter()
            .map(|t| t.id.as_str())
            .collect();
        assert_eq!(ids, ["A"]);
        assert!(p.reconfigure(&StageGraphDelta::default().remove("input")).is_err());
        assert!(p
            .reconfigure(&StageGraphDelta::default().add(StageId::Output, "w", Access::ReadWrite))
            .is_err());
    }

    #[test]
    fn cursor_counts_skips_for_stalled_reader() {
        let p = pipeline(4);
        let r = p.reader();
        let mut cursor = ReadCursor::new(0);
        for c in 0..10 {
            run_cycle(&p, c);
        }
        let mut got = Vec::new();
        cursor.poll(&r, |f| got.push(f.cycle));
        assert_eq!(got, vec![6, 7, 8, 9]);
        assert_eq!(cursor.skipped(), 6);
        assert_eq!(cursor.skipped() + cursor.delivered(), 10);
    }

    #[test]
    fn dump_lists_slots_and_sequences() {
        let p = pipeline(2);
        run_cycle(&p, 0);
        let d = p.dump();
        assert!(d.contains("produced 0 | stage1 0 | stage2 0 | stage3 0"), "{d}");
        assert!(d.contains("slot    0  stamp 0"));
        assert!(d.contains("slot    1  stamp never"));
    }
}
