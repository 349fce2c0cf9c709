//! On-disk session directories.
//!
//! ```text
//! <data_dir>/sessions/<session_id>/
//!     session.json   everything except the graph and the labels
//!     graph.json
//!     labels.json
//!     images/<image_id>.png
//!     report.md      written on export
//! ```
//!
//! Every file is replaced atomically (temp file in the same directory, then
//! rename), so a reader only ever sees a complete old or new version.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;
use vipera_core::model::{AggregatedSceneGraph, AuditSession, ImageId, LabelTable, SessionId};

pub const SESSION_FILE: &str = "session.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const LABELS_FILE: &str = "labels.json";
pub const REPORT_FILE: &str = "report.md";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure at {path}: {source}")]
    StorageFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("session {0} not found")]
    NotFound(SessionId),
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn failure(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::StorageFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a synced temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(failure(path))?;
    tmp.write_all(bytes).map_err(failure(path))?;
    tmp.as_file().sync_all().map_err(failure(path))?;
    tmp.persist(path).map_err(|e| StoreError::StorageFailure {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Store {
    sessions_dir: PathBuf,
}

impl Store {
    /// Opens (creating if needed) the store under `data_dir`.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let sessions_dir = data_dir.as_ref().join("sessions");
        fs::create_dir_all(&sessions_dir).map_err(failure(&sessions_dir))?;
        Ok(Self { sessions_dir })
    }

    pub fn session_dir(&self, id: &SessionId) -> PathBuf {
        self.sessions_dir.join(id.as_str())
    }

    pub fn images_dir(&self, id: &SessionId) -> PathBuf {
        self.session_dir(id).join(IMAGES_DIR)
    }

    pub fn image_path(&self, id: &SessionId, image: &ImageId) -> PathBuf {
        self.images_dir(id).join(format!("{image}.png"))
    }

    pub fn report_path(&self, id: &SessionId) -> PathBuf {
        self.session_dir(id).join(REPORT_FILE)
    }

    fn write_json(&self, id: &SessionId, name: &str, value: &impl serde::Serialize) -> Result<(), StoreError> {
        let dir = self.session_dir(id);
        let path = dir.join(name);
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Corrupt {
            path: path.clone(),
            message: e.to_string(),
        })?;
        write_atomic(&path, &bytes)
    }

    fn session_value(session: &AuditSession) -> Value {
        let mut v = serde_json::to_value(session).expect("sessions serialize");
        if let Value::Object(map) = &mut v {
            map.remove("graph");
            map.remove("label_table");
        }
        v
    }

    fn ensure_dirs(&self, id: &SessionId) -> Result<(), StoreError> {
        let images = self.images_dir(id);
        fs::create_dir_all(&images).map_err(failure(&images))
    }

    /// Writes all three state files: session, then graph, then labels.
    ///
    /// Safe for any change that only adds references. Use
    /// [`Store::save_after_removal`] when criteria were removed.
    pub fn save(&self, session: &AuditSession) -> Result<(), StoreError> {
        self.ensure_dirs(&session.id)?;
        self.write_json(&session.id, SESSION_FILE, &Self::session_value(session))?;
        self.write_json(&session.id, GRAPH_FILE, &session.graph)?;
        self.write_json(&session.id, LABELS_FILE, &session.label_table)
    }

    /// Writes labels first, so no label on disk outlives its criterion.
    pub fn save_after_removal(&self, session: &AuditSession) -> Result<(), StoreError> {
        self.ensure_dirs(&session.id)?;
        self.write_json(&session.id, LABELS_FILE, &session.label_table)?;
        self.write_json(&session.id, SESSION_FILE, &Self::session_value(session))?;
        self.write_json(&session.id, GRAPH_FILE, &session.graph)
    }

    pub fn save_labels(&self, session: &AuditSession) -> Result<(), StoreError> {
        self.write_json(&session.id, LABELS_FILE, &session.label_table)
    }

    pub fn write_image(&self, id: &SessionId, image: &ImageId, bytes: &[u8]) -> Result<(), StoreError> {
        self.ensure_dirs(id)?;
        write_atomic(&self.image_path(id, image), bytes)
    }

    pub fn read_image(&self, id: &SessionId, image: &ImageId) -> Result<Vec<u8>, StoreError> {
        let path = self.image_path(id, image);
        fs::read(&path).map_err(failure(&path))
    }

    pub fn write_report(&self, id: &SessionId, markdown: &str) -> Result<PathBuf, StoreError> {
        let path = self.report_path(id);
        write_atomic(&path, markdown.as_bytes())?;
        Ok(path)
    }

    pub fn exists(&self, id: &SessionId) -> bool {
        self.session_dir(id).join(SESSION_FILE).is_file()
    }

    pub fn load(&self, id: &SessionId) -> Result<AuditSession, StoreError> {
        let dir = self.session_dir(id);
        let read = |name: &str| -> Result<Option<Value>, StoreError> {
            let path = dir.join(name);
            match fs::read(&path) {
                Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::Corrupt {
                    path,
                    message: e.to_string(),
                }),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(failure(&path)(e)),
            }
        };
        let Some(Value::Object(mut map)) = read(SESSION_FILE)? else {
            return Err(StoreError::NotFound(id.clone()));
        };
        // a crash right after the first save can leave these missing
        let graph = read(GRAPH_FILE)?.unwrap_or_else(|| serde_json::to_value(AggregatedSceneGraph::default()).unwrap());
        let labels = read(LABELS_FILE)?.unwrap_or_else(|| serde_json::to_value(LabelTable::default()).unwrap());
        map.insert("graph".into(), graph);
        map.insert("label_table".into(), labels);
        serde_json::from_value(Value::Object(map)).map_err(|e| StoreError::Corrupt {
            path: dir.join(SESSION_FILE),
            message: e.to_string(),
        })
    }

    /// Ids of every session directory holding a `session.json`, sorted.
    pub fn list(&self) -> Result<Vec<SessionId>, StoreError> {
        let entries = fs::read_dir(&self.sessions_dir).map_err(failure(&self.sessions_dir))?;
        let mut out: Vec<SessionId> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(SESSION_FILE).is_file())
            .filter_map(|e| e.file_name().to_str().map(SessionId::from))
            .collect();
        out.sort();
        Ok(out)
    }
}
