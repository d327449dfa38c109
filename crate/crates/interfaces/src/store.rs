//! Content-addressed run persistence.
//!
//! Layout under the store root:
//!
//! ```text
//! runs/<run_id>/manifest.json
//! runs/<run_id>/artifacts/<name>.json
//! runs/<run_id>/declarations.jsonl
//! ```
//!
//! The run id hashes the config snapshot and the input file digests. A run
//! is assembled in a scratch directory and renamed into place, so a visible
//! run directory is always sealed.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{resolve, ConfigError, PipelineConfig, Stage};
use crate::declaration::ExpertDeclaration;
use crate::pipeline::{self, StageFailure};

/// Hex characters of the config digest used as the run id.
pub const RUN_ID_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed json at {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{run}` has no artifact `{name}`")]
    UnknownArtifact { run: String, name: String },
    #[error("run `{0}` is sealed")]
    Sealed(String),
    #[error("run `{0}` is already executing")]
    InProgress(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { stage: Stage, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    /// Seeds HMM restarts and k-means initialization.
    pub pipeline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Digest over artifact names and digests; equal for equal outputs.
    pub run_digest: String,
    pub domain: String,
    pub created_at: String,
    pub seeds: Seeds,
    pub config: PipelineConfig,
    /// Input role to sha256 of the file bytes; unreadable inputs are absent.
    pub input_digests: BTreeMap<String, String>,
    pub stages_run: Vec<Stage>,
    pub status: RunStatus,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    pub sealed: bool,
}

impl RunManifest {
    pub fn has(&self, name: &str) -> bool {
        self.artifacts.contains_key(name)
    }
}

/// Sha256 of each readable declared input.
pub fn input_digests(cfg: &PipelineConfig, base: &Path) -> BTreeMap<String, String> {
    cfg.inputs
        .declared()
        .into_iter()
        .filter_map(|(role, p)| fs::read(resolve(base, p)).ok().map(|b| (role.to_string(), sha256_hex(&b))))
        .collect()
}

pub fn compute_run_id(cfg: &PipelineConfig, digests: &BTreeMap<String, String>) -> String {
    let snapshot = serde_json::to_vec(&(cfg, digests)).expect("config serializes");
    let mut id = sha256_hex(&snapshot);
    id.truncate(RUN_ID_LEN);
    id
}

pub fn run_digest(artifacts: &BTreeMap<String, ArtifactEntry>) -> String {
    let mut h = Sha256::new();
    for (name, e) in artifacts {
        h.update(name.as_bytes());
        h.update(b":");
        h.update(e.sha256.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn valid_id(id: &str) -> bool {
    id.len() == RUN_ID_LEN && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

fn valid_artifact_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

pub struct RunStore {
    root: PathBuf,
    active: Mutex<HashSet<String>>,
    append_lock: Mutex<()>,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let runs = root.join("runs");
        fs::create_dir_all(&runs).map_err(io_err(&runs))?;
        Ok(Self { root, active: Mutex::new(HashSet::new()), append_lock: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn is_sealed(&self, id: &str) -> bool {
        valid_id(id) && self.run_dir(id).join("manifest.json").is_file()
    }

    /// Runs the pipeline and persists a sealed run. Fails with
    /// [`StoreError::Sealed`] when the same config and inputs already ran.
    pub fn execute(&self, cfg: &PipelineConfig, base: &Path) -> Result<RunManifest, StoreError> {
        cfg.validate()?;
        let digests = input_digests(cfg, base);
        let run_id = compute_run_id(cfg, &digests);
        if self.is_sealed(&run_id) {
            return Err(StoreError::Sealed(run_id));
        }
        if !self.active.lock().expect("lock").insert(run_id.clone()) {
            return Err(StoreError::InProgress(run_id));
        }
        let result = self.execute_claimed(cfg, base, &run_id, digests);
        self.active.lock().expect("lock").remove(&run_id);
        result
    }

    fn execute_claimed(
        &self,
        cfg: &PipelineConfig,
        base: &Path,
        run_id: &str,
        input_digests: BTreeMap<String, String>,
    ) -> Result<RunManifest, StoreError> {
        let outcome = pipeline::execute(cfg, base, None);
        let scratch = self.root.join("runs").join(format!(".tmp-{run_id}-{}", std::process::id()));
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(io_err(&scratch))?;
        }
        let art_dir = scratch.join("artifacts");
        fs::create_dir_all(&art_dir).map_err(io_err(&art_dir))?;
        let mut artifacts = BTreeMap::new();
        for (name, bytes) in &outcome.artifacts {
            let file = format!("artifacts/{name}.json");
            let path = scratch.join(&file);
            fs::write(&path, bytes).map_err(io_err(&path))?;
            artifacts.insert(name.clone(), ArtifactEntry { file, sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        }
        let decl = scratch.join("declarations.jsonl");
        fs::write(&decl, b"").map_err(io_err(&decl))?;
        let status = match outcome.failure {
            None => RunStatus::Complete,
            Some(StageFailure { stage, message }) => RunStatus::Failed { stage, message },
        };
        let manifest = RunManifest {
            run_id: run_id.to_string(),
            run_digest: run_digest(&artifacts),
            domain: cfg.domain.clone(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seeds: Seeds { pipeline: cfg.seed },
            config: cfg.clone(),
            input_digests,
            stages_run: outcome.stages_run,
            status,
            artifacts,
            sealed: true,
        };
        let mpath = scratch.join("manifest.json");
        let body = serde_json::to_vec_pretty(&manifest).map_err(|source| StoreError::Json { path: mpath.clone(), source })?;
        fs::write(&mpath, body).map_err(io_err(&mpath))?;
        let dest = self.run_dir(run_id);
        fs::rename(&scratch, &dest).map_err(io_err(&dest))?;
        Ok(manifest)
    }

    pub fn manifest(&self, id: &str) -> Result<RunManifest, StoreError> {
        if !self.is_sealed(id) {
            return Err(StoreError::UnknownRun(id.to_string()));
        }
        let path = self.run_dir(id).join("manifest.json");
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|source| StoreError::Json { path, source })
    }

    /// Run ids of every sealed run, sorted.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let runs = self.root.join("runs");
        let mut ids: Vec<String> = fs::read_dir(&runs)
            .map_err(io_err(&runs))?
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|id| self.is_sealed(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn artifact_bytes(&self, id: &str, name: &str) -> Result<Vec<u8>, StoreError> {
        let manifest = self.manifest(id)?;
        let unknown = || StoreError::UnknownArtifact { run: id.to_string(), name: name.to_string() };
        if !valid_artifact_name(name) {
            return Err(unknown());
        }
        let entry = manifest.artifacts.get(name).ok_or_else(unknown)?;
        let path = self.run_dir(id).join(&entry.file);
        fs::read(&path).map_err(io_err(&path))
    }

    pub fn artifact<T: for<'de> Deserialize<'de>>(&self, id: &str, name: &str) -> Result<T, StoreError> {
        let bytes = self.artifact_bytes(id, name)?;
        serde_json::from_slice(&bytes).map_err(|source| StoreError::Json { path: self.run_dir(id).join(name), source })
    }

    pub fn artifact_opt<T: for<'de> Deserialize<'de>>(&self, id: &str, name: &str) -> Result<Option<T>, StoreError> {
        match self.artifact(id, name) {
            Ok(v) => Ok(Some(v)),
            Err(StoreError::UnknownArtifact { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Appends one JSON line; earlier lines are never rewritten.
    pub fn append_declaration(&self, id: &str, decl: &ExpertDeclaration) -> Result<(), StoreError> {
        if !self.is_sealed(id) {
            return Err(StoreError::UnknownRun(id.to_string()));
        }
        let path = self.run_dir(id).join("declarations.jsonl");
        let mut line = serde_json::to_vec(decl).map_err(|source| StoreError::Json { path: path.clone(), source })?;
        line.push(b'\n');
        let _guard = self.append_lock.lock().expect("lock");
        let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(io_err(&path))?;
        f.write_all(&line).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }

    pub fn declarations(&self, id: &str) -> Result<Vec<ExpertDeclaration>, StoreError> {
        if !self.is_sealed(id) {
            return Err(StoreError::UnknownRun(id.to_string()));
        }
        let path = self.run_dir(id).join("declarations.jsonl");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|source| StoreError::Json { path: path.clone(), source }))
            .collect()
    }
}
