//! File-backed document store with atomic writes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::documents::{
    self, BatchDocument, ClassDocument, Document, DocumentError, PriorDocument, ReportDocument, SessionDocument,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },

    #[error("invalid document id {0:?}")]
    InvalidId(String),

    #[error("{kind} {id:?}: {source}")]
    Document {
        kind: &'static str,
        id: String,
        #[source]
        source: DocumentError,
    },

    #[error("store I/O: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Directory name for each document kind.
pub trait Stored: Document {
    const DIR: &'static str;
}

impl Stored for PriorDocument {
    const DIR: &'static str = "priors";
}
impl Stored for ClassDocument {
    const DIR: &'static str = "classes";
}
impl Stored for BatchDocument {
    const DIR: &'static str = "batches";
}
impl Stored for ReportDocument {
    const DIR: &'static str = "reports";
}
impl Stored for SessionDocument {
    const DIR: &'static str = "sessions";
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

/// Loaded document together with its stored bytes and their hash.
#[derive(Debug, Clone)]
pub struct Loaded<D> {
    pub id: String,
    pub doc: D,
    pub bytes: Vec<u8>,
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct WorkspaceStore {
    root: PathBuf,
}

impl WorkspaceStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for dir in [
            PriorDocument::DIR,
            ClassDocument::DIR,
            BatchDocument::DIR,
            ReportDocument::DIR,
            SessionDocument::DIR,
        ] {
            fs::create_dir_all(root.join(dir))?;
        }
        Ok(WorkspaceStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path<D: Stored>(&self, id: &str) -> PathBuf {
        self.root.join(D::DIR).join(format!("{id}.json"))
    }

    /// Writes `bytes` via a temporary file in the same directory and an
    /// atomic rename.
    pub fn write_atomic(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = path.parent().unwrap_or(&self.root);
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Saves under a fresh id.
    pub fn save<D: Stored + Clone>(&self, doc: &D) -> Result<Loaded<D>> {
        self.save_as(&new_id(), doc)
    }

    /// Saves (or replaces) under `id`.
    pub fn save_as<D: Stored + Clone>(&self, id: &str, doc: &D) -> Result<Loaded<D>> {
        check_id(id)?;
        let bytes = documents::to_bytes(doc);
        self.write_atomic(&self.path::<D>(id), &bytes)?;
        Ok(Loaded {
            id: id.to_string(),
            doc: doc.clone(),
            sha256: sha256_hex(&bytes),
            bytes,
        })
    }

    pub fn load<D: Stored>(&self, id: &str) -> Result<Loaded<D>> {
        check_id(id)?;
        let bytes = match fs::read(self.path::<D>(id)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound {
                    kind: D::KIND,
                    id: id.to_string(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let doc = documents::from_bytes(&bytes).map_err(|source| StoreError::Document {
            kind: D::KIND,
            id: id.to_string(),
            source,
        })?;
        Ok(Loaded {
            id: id.to_string(),
            doc,
            sha256: sha256_hex(&bytes),
            bytes,
        })
    }

    pub fn exists<D: Stored>(&self, id: &str) -> bool {
        check_id(id).is_ok() && self.path::<D>(id).exists()
    }

    /// Ids of all stored documents of one kind, sorted.
    pub fn list<D: Stored>(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join(D::DIR))? {
            let name = entry?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")) {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Rendered text next to a stored report.
    pub fn save_report_text(&self, id: &str, text: &str) -> Result<PathBuf> {
        check_id(id)?;
        let path = self.root.join(ReportDocument::DIR).join(format!("{id}.txt"));
        self.write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
