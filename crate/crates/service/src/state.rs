use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use advtransfer::analysis::ResponseRecord;
use advtransfer::stimuli::{load_pool, SessionManifest, StimulusRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Ack, ResponsePost, ServiceError};

/// Opaque, stable name for a stimulus. Stimulus ids encode the condition and the
/// adversarial target, so they never reach the client.
pub fn stimulus_token(stimulus_id: &str) -> String {
    let digest = Sha256::digest(stimulus_id.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientTrial {
    pub index: usize,
    pub stimulus: String,
    pub fixation_ms: u32,
    pub exposure_ms: u32,
    pub mask_count: u32,
    pub mask_ms: u32,
    pub response_window_ms: u32,
    pub mask_seed: u64,
}

/// What `GET /session/{id}` returns: the schedule with everything but the button
/// labels stripped of class information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSession {
    pub session_id: String,
    pub buttons: [String; 2],
    pub trials: Vec<ClientTrial>,
}

/// Why a response was not stored.
#[derive(Debug)]
pub enum Stored {
    /// Well-formed JSON with invalid content.
    Rejected(String),
    /// Refers to a session or trial that does not exist.
    Conflict(String),
    Failed(ServiceError),
}

struct Log {
    path: PathBuf,
    file: File,
    /// `(subject, trial)` pairs that already have a counted response.
    counted: HashSet<(String, usize)>,
}

struct Session {
    manifest: SessionManifest,
    client: ClientSession,
    log: Mutex<Log>,
}

pub struct AppState {
    stimuli_dir: PathBuf,
    stimuli: HashMap<String, StimulusRecord>,
    tokens: HashMap<String, String>,
    sessions: BTreeMap<String, Session>,
}

impl AppState {
    /// Loads the pool and every session manifest (`<sessions>/*.json`), and replays
    /// existing response logs so duplicates stay uncounted across restarts.
    pub fn load(stimuli_dir: &Path, sessions_dir: &Path) -> Result<Self, ServiceError> {
        let pool = load_pool(stimuli_dir)?;
        let tokens = pool.iter().map(|r| (stimulus_token(&r.id), r.id.clone())).collect();
        let stimuli: HashMap<String, StimulusRecord> = pool.into_iter().map(|r| (r.id.clone(), r)).collect();

        let log_dir = sessions_dir.join("responses");
        std::fs::create_dir_all(&log_dir).map_err(|e| ServiceError::io(&log_dir, e))?;
        let mut sessions = BTreeMap::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(sessions_dir)
            .map_err(|e| ServiceError::io(sessions_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let manifest = match SessionManifest::read(&path) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            for t in &manifest.trials {
                if !stimuli.contains_key(&t.stimulus_id) {
                    return Err(ServiceError::MissingStimulus {
                        session: manifest.session_id.clone(),
                        stimulus: t.stimulus_id.clone(),
                    });
                }
            }
            if sessions.contains_key(&manifest.session_id) {
                return Err(ServiceError::DuplicateSession(manifest.session_id));
            }
            let log = open_log(&log_dir.join(format!("{}.jsonl", manifest.session_id)))?;
            let client = client_view(&manifest);
            sessions.insert(
                manifest.session_id.clone(),
                Session {
                    manifest,
                    client,
                    log: Mutex::new(log),
                },
            );
        }
        log::info!("loaded {} stimuli and {} sessions", stimuli.len(), sessions.len());
        Ok(Self {
            stimuli_dir: stimuli_dir.to_path_buf(),
            stimuli,
            tokens,
            sessions,
        })
    }

    pub fn client_session(&self, id: &str) -> Option<&ClientSession> {
        self.sessions.get(id).map(|s| &s.client)
    }

    pub fn stimulus_path(&self, token: &str) -> Option<PathBuf> {
        let id = self.tokens.get(token)?;
        Some(self.stimuli_dir.join(&self.stimuli[id].file))
    }

    pub fn session_ids(&self) -> impl Iterator<Item = &str> {
        self.sessions.keys().map(String::as_str)
    }

    /// Validates, enriches and durably appends one response. Blocking.
    pub fn record(&self, post: &ResponsePost) -> Result<Ack, Stored> {
        let session = self
            .sessions
            .get(&post.session_id)
            .ok_or_else(|| Stored::Conflict(format!("unknown session `{}`", post.session_id)))?;
        let trial = session.manifest.trials.get(post.trial_index).ok_or_else(|| {
            Stored::Conflict(format!(
                "session `{}` has no trial {}",
                post.session_id, post.trial_index
            ))
        })?;
        if let Some(token) = &post.stimulus {
            if *token != session.client.trials[post.trial_index].stimulus {
                return Err(Stored::Conflict(format!(
                    "trial {} does not show stimulus `{token}`",
                    post.trial_index
                )));
            }
        }
        if post.subject_id.trim().is_empty() {
            return Err(Stored::Rejected("subject_id is empty".into()));
        }
        if let Some(c) = &post.chosen {
            if !session.manifest.buttons.contains(c) {
                return Err(Stored::Rejected(format!("`{c}` is not a response option")));
            }
        }
        if let Some(rt) = post.rt_ms {
            if !(rt >= 0.0 && rt.is_finite()) {
                return Err(Stored::Rejected(format!("invalid rt_ms {rt}")));
            }
        }
        let stim = &self.stimuli[&trial.stimulus_id];

        let mut log = session.log.lock().unwrap_or_else(|p| p.into_inner());
        let key = (post.subject_id.clone(), post.trial_index);
        let first = !log.counted.contains(&key);
        let record = ResponseRecord {
            session_id: post.session_id.clone(),
            subject_id: post.subject_id.clone(),
            group: session.manifest.group.clone(),
            trial_index: post.trial_index,
            stimulus_id: stim.id.clone(),
            condition: stim.condition,
            chosen: post.chosen.clone(),
            rt_ms: post.rt_ms,
            first_press: first,
            true_class: stim.true_class.clone(),
            target_class: stim.target.clone(),
        };
        let mut line = serde_json::to_string(&record).expect("response serializes");
        line.push('\n');
        let path = log.path.clone();
        log.file
            .write_all(line.as_bytes())
            .and_then(|_| log.file.sync_data())
            .map_err(|e| Stored::Failed(ServiceError::io(&path, e)))?;
        if first {
            log.counted.insert(key);
        }
        Ok(Ack {
            session_id: post.session_id.clone(),
            trial_index: post.trial_index,
            counted: first,
        })
    }
}

fn client_view(m: &SessionManifest) -> ClientSession {
    ClientSession {
        session_id: m.session_id.clone(),
        buttons: m.buttons.clone(),
        trials: m
            .trials
            .iter()
            .map(|t| ClientTrial {
                index: t.index,
                stimulus: stimulus_token(&t.stimulus_id),
                fixation_ms: t.fixation_ms,
                exposure_ms: t.exposure_ms,
                mask_count: t.mask_count,
                mask_ms: t.mask_ms,
                response_window_ms: t.response_window_ms,
                mask_seed: t.mask_seed,
            })
            .collect(),
    }
}

/// Opens a log for appending and replays it. A trailing partial line can only come
/// from a write that was never acknowledged, so it is cut off.
fn open_log(path: &Path) -> Result<Log, ServiceError> {
    let io = |e| ServiceError::io(path, e);
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(io)?;
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(io)?;
    if !text.is_empty() && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        log::warn!("{}: dropping {} bytes of unacknowledged partial write", path.display(), text.len() - keep);
        file.set_len(keep as u64).map_err(io)?;
        file.seek(SeekFrom::End(0)).map_err(io)?;
        text.truncate(keep);
    }
    let mut counted = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let r: ResponseRecord = serde_json::from_str(line).map_err(|e| ServiceError::CorruptLog {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.first_press {
            counted.insert((r.subject_id, r.trial_index));
        }
    }
    Ok(Log {
        path: path.to_path_buf(),
        file,
        counted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_is_stable_and_opaque() {
        let t = stimulus_token("img00012-false-dog");
        assert_eq!(t.len(), 16);
        assert_eq!(t, stimulus_token("img00012-false-dog"));
        assert_ne!(t, stimulus_token("img00012-adv"));
        assert!(t.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn partial_tail_is_truncated_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let rec = ResponseRecord {
            session_id: "s".into(),
            subject_id: "a".into(),
            group: "g".into(),
            trial_index: 3,
            stimulus_id: "x-image".into(),
            condition: advtransfer::stimuli::Condition::Image,
            chosen: None,
            rt_ms: None,
            first_press: true,
            true_class: None,
            target_class: None,
        };
        let mut text = serde_json::to_string(&rec).unwrap();
        text.push('\n');
        text.push_str("{\"session_id\":\"s\",\"sub");
        std::fs::write(&p, &text).unwrap();
        let log = open_log(&p).unwrap();
        assert!(log.counted.contains(&("a".to_string(), 3)));
        drop(log);
        let after = std::fs::read_to_string(&p).unwrap();
        assert_eq!(after.lines().count(), 1);
        assert!(after.ends_with('\n'));
    }

    #[test]
    fn corrupt_complete_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(open_log(&p), Err(ServiceError::CorruptLog { line: 1, .. })));
    }
}
