//! Visual Turing Test sessions: blinded trial decks drawn from real and
//! synthetic pools, one image served at a time, responses appended to a
//! per-session JSON-lines log before they are acknowledged.

pub mod http;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use base64::Engine;
use patholab_core::eval::{vtt_score, Origin, Response, ResponseLabels, SessionReport};
use patholab_core::io::pixels_u8;
use patholab_core::phantom::read_bundle;
use patholab_core::Tensor;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DECK_FILE: &str = "deck.json";
pub const LOG_FILE: &str = "responses.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum VttError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("deck exhausted")]
    DeckExhausted,
    #[error("item {0} already answered")]
    Duplicate(usize),
    #[error("session has {open} unanswered items; request a partial report to finalize early")]
    Incomplete { open: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("corrupt session log {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] patholab_core::Error),
}

pub type Result<T> = std::result::Result<T, VttError>;

fn invalid(msg: impl Into<String>) -> VttError {
    VttError::Invalid(msg.into())
}

/// An 8-bit grayscale image with its optional tumor label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    #[serde(with = "b64")]
    pub pixels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tumor: Option<bool>,
}

impl PoolImage {
    /// Quantize a `(H, W)` or `(1, H, W)` image in `[-1, 1]`.
    pub fn from_tensor(id: impl Into<String>, img: &Tensor<f32>, tumor: Option<bool>) -> Result<Self> {
        let (width, height, pixels) = pixels_u8(img)?;
        Ok(Self {
            id: id.into(),
            width,
            height,
            pixels,
            tumor,
        })
    }
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Images of a 2-D scene bundle; a scene with boxes counts as a tumor image.
pub fn load_pool(dir: &Path) -> Result<Vec<PoolImage>> {
    let (manifest, scenes) = read_bundle(dir)?;
    if manifest.dims != 2 {
        return Err(invalid(format!("{} holds {}-D scenes; raters see 2-D images", dir.display(), manifest.dims)));
    }
    scenes
        .iter()
        .map(|s| PoolImage::from_tensor(s.id.clone(), &s.image, Some(!s.boxes.is_empty())))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionSet {
    #[serde(default)]
    pub tumor: bool,
}

impl QuestionSet {
    /// Question identifiers shown to the rater, in order.
    pub fn ids(&self) -> Vec<String> {
        let mut q = vec!["origin".to_string()];
        if self.tumor {
            q.push("tumor".to_string());
        }
        q
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub real: usize,
    pub synthetic: usize,
}

impl Default for Composition {
    fn default() -> Self {
        Self { real: 50, synthetic: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeckItem {
    pub image: PoolImage,
    pub truth: ResponseLabels,
}

/// A shuffled deck. Only the service reads it; raters get [`TrialPayload`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialDeck {
    pub session_id: String,
    pub seed: u64,
    pub questions: QuestionSet,
    pub composition: Composition,
    pub items: Vec<DeckItem>,
}

/// Draw `counts` images from each pool without replacement and shuffle them.
pub fn create_session(
    session_id: impl Into<String>,
    real_pool: &[PoolImage],
    synth_pool: &[PoolImage],
    counts: Composition,
    questions: QuestionSet,
    seed: u64,
) -> Result<TrialDeck> {
    if counts.real + counts.synthetic == 0 {
        return Err(invalid("a deck needs at least one item"));
    }
    for (name, pool, n) in [("real", real_pool, counts.real), ("synthetic", synth_pool, counts.synthetic)] {
        if pool.len() < n {
            return Err(invalid(format!("{name} pool holds {} images, {n} requested", pool.len())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(counts.real + counts.synthetic);
    for (pool, n, origin) in [(real_pool, counts.real, Origin::Real), (synth_pool, counts.synthetic, Origin::Synthetic)] {
        for i in index::sample(&mut rng, pool.len(), n) {
            let image = pool[i].clone();
            let tumor = if questions.tumor {
                Some(image.tumor.ok_or_else(|| invalid(format!("image {} has no tumor label", image.id)))?)
            } else {
                None
            };
            items.push(DeckItem {
                image,
                truth: ResponseLabels { origin, tumor },
            });
        }
    }
    items.shuffle(&mut rng);
    Ok(TrialDeck {
        session_id: session_id.into(),
        seed,
        questions,
        composition: counts,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePayload {
    pub width: usize,
    pub height: usize,
    /// Row-major 8-bit pixels, base64.
    pub data: String,
}

/// What the rater sees for one trial.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialPayload {
    pub index: usize,
    pub image: ImagePayload,
    pub questions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub index: usize,
    pub answer: ResponseLabels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub index: usize,
    pub recorded: usize,
}

#[derive(Serialize, Deserialize)]
struct LogEntry {
    index: usize,
    answer: ResponseLabels,
    timestamp_ms: u64,
}

struct SessionState {
    answers: Vec<Option<ResponseLabels>>,
    recorded: usize,
    log: File,
}

struct Session {
    deck: Arc<TrialDeck>,
    state: Mutex<SessionState>,
}

/// Sessions under a data directory, one subdirectory each.
pub struct VttStore {
    root: PathBuf,
    real_pool: Vec<PoolImage>,
    synth_pool: Vec<PoolImage>,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}

/// Replay a session log. A final line without its newline is a write that
/// was never acknowledged; it is cut off.
fn replay(path: &Path, deck: &TrialDeck) -> Result<SessionState> {
    let mut answers = vec![None; deck.items.len()];
    let mut recorded = 0;
    let mut log = OpenOptions::new().read(true).append(true).create(true).open(path)?;
    let mut reader = BufReader::new(&log);
    let mut good = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        let entry: LogEntry = serde_json::from_str(line.trim_end()).map_err(|e| VttError::Corrupt {
            path: path.to_path_buf(),
            detail: format!("line at byte {good}: {e}"),
        })?;
        let slot = answers.get_mut(entry.index).ok_or_else(|| VttError::Corrupt {
            path: path.to_path_buf(),
            detail: format!("index {} outside the deck", entry.index),
        })?;
        if slot.is_some() {
            return Err(VttError::Corrupt {
                path: path.to_path_buf(),
                detail: format!("index {} answered twice", entry.index),
            });
        }
        *slot = Some(entry.answer);
        recorded += 1;
        good += n as u64;
    }
    drop(reader);
    if log.metadata()?.len() != good {
        log.set_len(good)?;
        log.sync_all()?;
    }
    log.seek(std::io::SeekFrom::End(0))?;
    Ok(SessionState { answers, recorded, log })
}

impl VttStore {
    /// Open (or create) a store and replay every session found in it.
    pub fn open(root: impl Into<PathBuf>, real_pool: Vec<PoolImage>, synth_pool: Vec<PoolImage>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut sessions = BTreeMap::new();
        for entry in fs::read_dir(&root)? {
            let dir = entry?.path();
            let deck_path = dir.join(DECK_FILE);
            if !deck_path.is_file() {
                continue;
            }
            let deck: TrialDeck = serde_json::from_slice(&fs::read(&deck_path)?).map_err(|e| VttError::Corrupt {
                path: deck_path.clone(),
                detail: e.to_string(),
            })?;
            let state = replay(&dir.join(LOG_FILE), &deck)?;
            sessions.insert(
                deck.session_id.clone(),
                Arc::new(Session {
                    deck: Arc::new(deck),
                    state: Mutex::new(state),
                }),
            );
        }
        Ok(Self {
            root,
            real_pool,
            synth_pool,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }

    fn session(&self, id: &str) -> Result<Arc<Session>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| VttError::UnknownSession(id.to_string()))
    }

    /// Create and persist a new session; returns its id and deck size.
    pub fn create(&self, counts: Composition, questions: QuestionSet, seed: u64) -> Result<(String, usize)> {
        let mut sessions = self.sessions.write().unwrap();
        let mut n = sessions.len() + 1;
        let id = loop {
            let id = format!("session-{n:04}");
            if !sessions.contains_key(&id) && !self.root.join(&id).exists() {
                break id;
            }
            n += 1;
        };
        let deck = create_session(id.clone(), &self.real_pool, &self.synth_pool, counts, questions, seed)?;
        let dir = self.root.join(&id);
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join(DECK_FILE), &serde_json::to_vec(&deck).map_err(|e| invalid(e.to_string()))?)?;
        let state = replay(&dir.join(LOG_FILE), &deck)?;
        let len = deck.items.len();
        sessions.insert(
            id.clone(),
            Arc::new(Session {
                deck: Arc::new(deck),
                state: Mutex::new(state),
            }),
        );
        Ok((id, len))
    }

    /// The lowest-indexed unanswered item.
    pub fn next_trial(&self, id: &str) -> Result<TrialPayload> {
        let s = self.session(id)?;
        let index = {
            let st = s.state.lock().unwrap();
            st.answers.iter().position(Option::is_none).ok_or(VttError::DeckExhausted)?
        };
        let img = &s.deck.items[index].image;
        Ok(TrialPayload {
            index,
            image: ImagePayload {
                width: img.width,
                height: img.height,
                data: base64::engine::general_purpose::STANDARD.encode(&img.pixels),
            },
            questions: s.deck.questions.ids(),
        })
    }

    /// Append a response to the session log, sync it, then acknowledge.
    pub fn record(&self, id: &str, resp: &RaterResponse) -> Result<Ack> {
        if let Some(sid) = &resp.session_id {
            if sid != id {
                return Err(invalid(format!("response names session {sid} but was sent to {id}")));
            }
        }
        let s = self.session(id)?;
        let n = s.deck.items.len();
        if resp.index >= n {
            return Err(invalid(format!("item {} outside the {n}-item deck", resp.index)));
        }
        if s.deck.questions.tumor != resp.answer.tumor.is_some() {
            return Err(invalid(if s.deck.questions.tumor {
                "this session asks the tumor question; answer it"
            } else {
                "this session does not ask the tumor question"
            }));
        }
        let mut st = s.state.lock().unwrap();
        if st.answers[resp.index].is_some() {
            return Err(VttError::Duplicate(resp.index));
        }
        let entry = LogEntry {
            index: resp.index,
            answer: resp.answer,
            timestamp_ms: resp.timestamp_ms.unwrap_or_else(now_ms),
        };
        let mut line = serde_json::to_vec(&entry).map_err(|e| invalid(e.to_string()))?;
        line.push(b'\n');
        st.log.write_all(&line)?;
        st.log.sync_data()?;
        st.answers[resp.index] = Some(resp.answer);
        st.recorded += 1;
        Ok(Ack {
            session_id: id.to_string(),
            index: resp.index,
            recorded: st.recorded,
        })
    }

    pub fn recorded(&self, id: &str) -> Result<usize> {
        Ok(self.session(id)?.state.lock().unwrap().recorded)
    }

    /// Score the answered items; with `partial` an unfinished session is
    /// scored and marked incomplete.
    pub fn finalize(&self, id: &str, partial: bool) -> Result<SessionReport> {
        let s = self.session(id)?;
        let st = s.state.lock().unwrap();
        let open = st.answers.iter().filter(|a| a.is_none()).count();
        if open > 0 && !partial {
            return Err(VttError::Incomplete { open });
        }
        let responses: Vec<Response> = s
            .deck
            .items
            .iter()
            .zip(&st.answers)
            .filter_map(|(item, a)| a.map(|answer| Response { truth: item.truth, answer }))
            .collect();
        if responses.is_empty() {
            return Err(invalid("no responses recorded"));
        }
        let mut report = vtt_score(&responses)?;
        report.complete = open == 0;
        Ok(report)
    }
}
