//! Append-only clinician feedback.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use drgrade::fundus::GradeLabel;
use drgrade::model::NUM_CLASSES;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// One persisted correction (or confirmation) of a prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub record_id: u64,
    /// UTC, RFC 3339 with millisecond precision.
    pub timestamp: String,
    /// The prediction this feedback refers to.
    pub request_id: String,
    pub image_sha256: String,
    pub model_id: String,
    pub predicted_grade: GradeLabel,
    pub probabilities: [f64; NUM_CLASSES],
    pub clinician_grade: GradeLabel,
}

/// Everything in a record except what the store assigns.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackDraft {
    pub request_id: String,
    pub image_sha256: String,
    pub model_id: String,
    pub predicted_grade: GradeLabel,
    pub probabilities: [f64; NUM_CLASSES],
    pub clinician_grade: GradeLabel,
}

/// Storage for feedback records. Appends are durable when they return.
pub trait FeedbackStore: Send + Sync {
    fn append(&self, draft: FeedbackDraft) -> Result<FeedbackRecord, ServiceError>;

    /// Records with `record_id > since_id`, in id order.
    fn since(&self, since_id: u64) -> Vec<FeedbackRecord>;

    fn count(&self) -> usize;

    /// Forces everything written so far to stable storage.
    fn flush(&self) -> Result<(), ServiceError>;
}

struct Inner {
    file: File,
    records: Vec<FeedbackRecord>,
    next_id: u64,
}

/// Newline-delimited JSON file, fsynced after every append. Record ids start
/// at 1 and continue from the last stored record after a restart.
pub struct NdjsonStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl NdjsonStore {
    /// Opens or creates the log. A final line without its newline is the
    /// remnant of an interrupted append and is cut off; any other malformed
    /// line is an error.
    pub fn open(path: &Path) -> Result<Self, ServiceError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut records: Vec<FeedbackRecord> = Vec::new();
        let mut good_len = 0u64;
        let mut reader = BufReader::new(&file);
        let mut line = String::new();
        let mut line_no = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if !line.ends_with('\n') {
                tracing::warn!(path = %path.display(), "dropping incomplete final feedback line");
                break;
            }
            let record: FeedbackRecord = serde_json::from_str(line.trim_end()).map_err(|e| {
                ServiceError::FeedbackLog(format!("{} line {line_no}: {e}", path.display()))
            })?;
            if records.last().is_some_and(|last| record.record_id <= last.record_id) {
                return Err(ServiceError::FeedbackLog(format!(
                    "{} line {line_no}: record_id {} does not increase",
                    path.display(),
                    record.record_id
                )));
            }
            records.push(record);
            good_len += n as u64;
        }
        drop(reader);
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::End(0))?;
        let next_id = records.last().map_or(1, |r| r.record_id + 1);
        Ok(NdjsonStore {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner { file, records, next_id }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl FeedbackStore for NdjsonStore {
    fn append(&self, draft: FeedbackDraft) -> Result<FeedbackRecord, ServiceError> {
        let mut inner = self.inner.lock().expect("feedback lock");
        let record = FeedbackRecord {
            record_id: inner.next_id,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            request_id: draft.request_id,
            image_sha256: draft.image_sha256,
            model_id: draft.model_id,
            predicted_grade: draft.predicted_grade,
            probabilities: draft.probabilities,
            clinician_grade: draft.clinician_grade,
        };
        let mut line = serde_json::to_vec(&record).map_err(|e| ServiceError::FeedbackLog(e.to_string()))?;
        line.push(b'\n');
        inner.file.write_all(&line)?;
        inner.file.sync_data()?;
        inner.next_id += 1;
        inner.records.push(record.clone());
        Ok(record)
    }

    fn since(&self, since_id: u64) -> Vec<FeedbackRecord> {
        let inner = self.inner.lock().expect("feedback lock");
        let start = inner.records.partition_point(|r| r.record_id <= since_id);
        inner.records[start..].to_vec()
    }

    fn count(&self) -> usize {
        self.inner.lock().expect("feedback lock").records.len()
    }

    fn flush(&self) -> Result<(), ServiceError> {
        self.inner.lock().expect("feedback lock").file.sync_all()?;
        Ok(())
    }
}
