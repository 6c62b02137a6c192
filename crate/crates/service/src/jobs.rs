use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Classifier,
    Segmenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingJob {
    pub id: String,
    pub session_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    pub report: Option<Value>,
    pub error: Option<String>,
}

impl TrainingJob {
    pub fn new(id: String, session_id: String, kind: JobKind) -> Self {
        Self {
            id,
            session_id,
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            report: None,
            error: None,
        }
    }

    /// Moves forward only: queued → running → done | failed.
    pub fn advance(&mut self, to: JobStatus) -> bool {
        let ok = match (self.status, to) {
            (JobStatus::Queued, JobStatus::Running) => true,
            (JobStatus::Queued | JobStatus::Running, JobStatus::Failed) => true,
            (JobStatus::Running, JobStatus::Done) => true,
            _ => false,
        };
        if ok {
            self.status = to;
            if to == JobStatus::Done {
                self.progress = 1.0;
            }
        }
        ok
    }

    /// Progress never goes backwards and stays in [0, 1].
    pub fn set_progress(&mut self, p: f64) {
        if self.status == JobStatus::Running {
            self.progress = self.progress.max(p.clamp(0.0, 1.0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_are_monotone() {
        let mut j = TrainingJob::new("j".into(), "s".into(), JobKind::Classifier);
        assert!(!j.advance(JobStatus::Done));
        assert!(j.advance(JobStatus::Running));
        assert!(!j.advance(JobStatus::Queued));
        j.set_progress(0.5);
        j.set_progress(0.2);
        assert_eq!(j.progress, 0.5);
        assert!(j.advance(JobStatus::Done));
        assert_eq!(j.progress, 1.0);
        assert!(!j.advance(JobStatus::Failed));
        assert!(!j.advance(JobStatus::Running));
    }
}
