use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::PipelineError;

/// The four canonical execution stages of a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum StageId {
    /// Input processing; hosts the single producer.
    Input = 1,
    /// Control execution and gate evaluation.
    Control = 2,
    /// Output forwarding to actuators.
    Output = 3,
    /// Asynchronous management, twinning and logging.
    Async = 4,
}

impl StageId {
    pub const ALL: [StageId; 4] = [StageId::Input, StageId::Control, StageId::Output, StageId::Async];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<StageId> {
        match n {
            1 => Some(StageId::Input),
            2 => Some(StageId::Control),
            3 => Some(StageId::Output),
            4 => Some(StageId::Async),
            _ => None,
        }
    }

    pub fn is_synchronous(self) -> bool {
        self != StageId::Async
    }

    /// Only stages 1 and 2 may mutate slot frames.
    pub fn may_write(self) -> bool {
        matches!(self, StageId::Input | StageId::Control)
    }

    pub(crate) fn upstream(self) -> Option<StageId> {
        match self {
            StageId::Input => None,
            StageId::Control => Some(StageId::Input),
            StageId::Output => Some(StageId::Control),
            StageId::Async => Some(StageId::Output),
        }
    }
}

impl From<StageId> for u8 {
    fn from(s: StageId) -> u8 {
        s.number()
    }
}

impl TryFrom<u8> for StageId {
    type Error = String;
    fn try_from(n: u8) -> Result<Self, String> {
        StageId::from_number(n).ok_or_else(|| format!("invalid stage {n}"))
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl TaskId {
    pub fn new(id: impl Into<String>) -> Self {
        TaskId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    Read,
    ReadWrite,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskRef {
    pub id: TaskId,
    pub access: Access,
}

/// Stage layout of a pipeline: which tasks run in which stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageGraph {
    stages: BTreeMap<StageId, Vec<TaskRef>>,
}

impl StageGraph {
    /// Four empty stages plus the single producer in stage 1.
    pub fn canonical(producer: impl Into<TaskId>) -> Self {
        let mut stages: BTreeMap<StageId, Vec<TaskRef>> = StageId::ALL.iter().map(|s| (*s, Vec::new())).collect();
        stages.get_mut(&StageId::Input).unwrap().push(TaskRef {
            id: producer.into(),
            access: Access::ReadWrite,
        });
        StageGraph { stages }
    }

    /// A graph with no stages and no tasks; only useful to exercise validation.
    pub fn empty() -> Self {
        StageGraph {
            stages: BTreeMap::new(),
        }
    }

    pub fn with_stage(mut self, stage: StageId) -> Self {
        self.stages.entry(stage).or_default();
        self
    }

    pub fn with_task(mut self, stage: StageId, id: impl Into<TaskId>, access: Access) -> Self {
        self.stages
            .entry(stage)
            .or_default()
            .push(TaskRef { id: id.into(), access });
        self
    }

    pub fn stages(&self) -> impl Iterator<Item = StageId> + '_ {
        self.stages.keys().copied()
    }

    pub fn tasks(&self, stage: StageId) -> &[TaskRef] {
        self.stages.get(&stage).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn stage_of(&self, id: &TaskId) -> Option<StageId> {
        self.stages
            .iter()
            .find(|(_, tasks)| tasks.iter().any(|t| &t.id == id))
            .map(|(s, _)| *s)
    }

    pub fn producer(&self) -> Option<&TaskId> {
        self.tasks(StageId::Input).first().map(|t| &t.id)
    }

    pub fn may_write(&self, id: &TaskId) -> bool {
        self.stages
            .values()
            .flatten()
            .any(|t| &t.id == id && t.access == Access::ReadWrite)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for s in StageId::ALL {
            if !self.stages.contains_key(&s) {
                return Err(PipelineError::Config(format!("missing {s}")));
            }
        }
        match self.tasks(StageId::Input).len() {
            0 => return Err(PipelineError::Config("no stage-1 producer task".into())),
            1 => {}
            n => {
                return Err(PipelineError::Config(format!(
                    "{n} stage-1 producers; exactly one allowed"
                )))
            }
        }
        for (stage, tasks) in &self.stages {
            if let Some(t) = tasks
                .iter()
                .find(|t| !stage.may_write() && t.access == Access::ReadWrite)
            {
                return Err(PipelineError::Config(format!(
                    "task {} in {stage} requests write access; stages 3 and 4 are read-only",
                    t.id
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in self.stages.values().flatten() {
            if !seen.insert(&t.id) {
                return Err(PipelineError::Config(format!("duplicate task id {}", t.id)));
            }
        }
        Ok(())
    }

    /// Applies a change set, returning the new graph without touching `self`
    /// if the result would be invalid.
    pub fn apply(&self, delta: &StageGraphDelta) -> Result<StageGraph, PipelineError> {
        let mut next = self.clone();
        for id in &delta.remove {
            let mut found = false;
            for tasks in next.stages.values_mut() {
                let before = tasks.len();
                tasks.retain(|t| &t.id != id);
                found |= tasks.len() != before;
            }
            if !found {
                return Err(PipelineError::Config(format!("unknown task {id}")));
            }
        }
        for (stage, task) in &delta.add {
            next.stages.entry(*stage).or_default().push(task.clone());
        }
        next.validate()?;
        Ok(next)
    }
}

/// Tasks to add and remove at the next cycle start.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageGraphDelta {
    pub add: Vec<(StageId, TaskRef)>,
    pub remove: Vec<TaskId>,
}

impl StageGraphDelta {
    pub fn add(mut self, stage: StageId, id: impl Into<TaskId>, access: Access) -> Self {
        self.add.push((stage, TaskRef { id: id.into(), access }));
        self
    }

    pub fn remove(mut self, id: impl Into<TaskId>) -> Self {
        self.remove.push(id.into());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.add.is_empty() && self.remove.is_empty()
    }
}
