//! Closed-loop learning, open-loop inference, and the K sweep.
//!
//! Learning is sequential: a carried control vector, the PID state and the
//! growing knowledge base link every sample to the ones before it.
//! Inference treats samples independently and never writes to the store.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{self, AgentConfig, JudgeVerdict, Prediction};
use crate::backends::{EmbeddingBackend, ModelBackend};
use crate::controller::{
    assemble_inference_control, assemble_training_control, pid_step, ControlVector, FeedbackVector,
    MemorySignal, PidGains, PidState, PolicyConfig, DEFAULT_INTEGRAL_BOUND,
};
use crate::error::{Error, Result};
use crate::harness::{require_labels, MemeRecord};
use crate::knowledge_base::{
    summarize, EntryMeta, KbEntry, KnowledgeBase, Projection, RetrievalHit,
};
use crate::metrics::{evaluate_run, MetricsReport};
use crate::prompt_mapper::{
    map_control_to_prompt, neutral_prompt, DirectiveTag, GuidancePrompt, MapperConfig,
};

#[derive(Clone)]
pub struct Backends {
    pub model: Arc<dyn ModelBackend>,
    pub embedder: Arc<dyn EmbeddingBackend>,
}

impl Backends {
    pub fn new(
        model: impl ModelBackend + 'static,
        embedder: impl EmbeddingBackend + 'static,
    ) -> Self {
        Self {
            model: Arc::new(model),
            embedder: Arc::new(embedder),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnError {
    /// Record the failure in the trace and move to the next sample.
    #[default]
    Skip,
    Fail,
}

/// Component switches. `false` disables the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Retrieval at inference (and during training when enabled there).
    pub retrieval: bool,
    /// When off, `u` is held at zero.
    pub controller: bool,
    /// When off, the judge feedback vector is zeroed before it reaches the prompt.
    pub feedback: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            retrieval: true,
            controller: true,
            feedback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gains: PidGains,
    pub integral_bound: f64,
    pub top_k: usize,
    pub threshold: f64,
    pub mapper: MapperConfig,
    pub policy: PolicyConfig,
    pub projection: Projection,
    pub refine_iters: u32,
    pub train_retrieval: bool,
    pub seed: u64,
    /// Shuffle training order with `seed` instead of manifest order.
    pub shuffle: bool,
    pub on_error: OnError,
    pub agent: AgentConfig,
    pub ablation: Ablation,
    /// Concurrent inference samples.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gains: PidGains::default(),
            integral_bound: DEFAULT_INTEGRAL_BOUND,
            top_k: 3,
            threshold: 0.5,
            mapper: MapperConfig::default(),
            policy: PolicyConfig::default(),
            projection: Projection::Truncate,
            refine_iters: 1,
            train_retrieval: false,
            seed: 0,
            shuffle: false,
            on_error: OnError::Skip,
            agent: AgentConfig::default(),
            ablation: Ablation::default(),
            workers: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        PidState::new(self.integral_bound)?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.refine_iters == 0 {
            return Err(Error::Config("refine_iters must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.mapper.validate()?;
        self.policy.validate()?;
        self.agent.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    /// Neutral-prompt pass that provides the query embedding.
    InferBase,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRef {
    pub id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample_index: usize,
    pub sample_id: String,
    pub phase: Phase,
    pub iteration: u32,
    pub status: Status,
    pub prompt: String,
    pub directives: Vec<DirectiveTag>,
    #[serde(default)]
    pub raw_output: Option<String>,
    #[serde(default)]
    pub score: Option<f64>,
    #[serde(default)]
    pub score_clamped: bool,
    /// SHA-256 of the rationale text.
    #[serde(default)]
    pub rationale_hash: Option<String>,
    /// `label − score`, training only.
    #[serde(default)]
    pub error: Option<f64>,
    /// Training: the control produced by this step. Inference: the control
    /// that built `prompt`.
    #[serde(default)]
    pub control: Option<ControlVector>,
    #[serde(default)]
    pub critique: Option<String>,
    #[serde(default)]
    pub retrieved: Vec<RetrievedRef>,
    #[serde(default)]
    pub failure: Option<String>,
    pub timestamp_ms: u64,
}

impl TraceRecord {
    fn new(
        sample_index: usize,
        meme: &MemeRecord,
        phase: Phase,
        iteration: u32,
        prompt: &GuidancePrompt,
    ) -> Self {
        Self {
            sample_index,
            sample_id: meme.id.clone(),
            phase,
            iteration,
            status: Status::Ok,
            prompt: prompt.text.clone(),
            directives: prompt.directives.clone(),
            raw_output: None,
            score: None,
            score_clamped: false,
            rationale_hash: None,
            error: None,
            control: None,
            critique: None,
            retrieved: Vec::new(),
            failure: None,
            timestamp_ms: now_ms(),
        }
    }

    fn with_prediction(mut self, pred: &Prediction) -> Self {
        self.raw_output = Some(pred.raw_output.clone());
        self.score = Some(pred.score);
        self.score_clamped = pred.score_clamped;
        self.rationale_hash = Some(hex::encode(Sha256::digest(pred.rationale.as_bytes())));
        self
    }

    fn skipped(mut self, err: &Error) -> Self {
        self.status = Status::Skipped;
        self.failure = Some(err.to_string());
        self
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }

    /// SHA-256 over the JSONL rendering with timestamps removed.
    pub fn determinism_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for r in &self.records {
            let mut value = serde_json::to_value(r).expect("trace records serialize");
            if let Some(obj) = value.as_object_mut() {
                obj.remove("timestamp_ms");
            }
            hasher.update(value.to_string().as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    /// Final-pass scores by sample id.
    pub fn final_scores(&self) -> BTreeMap<&str, f64> {
        self.records
            .iter()
            .filter(|r| r.phase == Phase::Infer && r.status == Status::Ok)
            .filter_map(|r| Some((r.sample_id.as_str(), r.score?)))
            .collect()
    }
}

fn recoverable(err: &Error) -> bool {
    matches!(
        err,
        Error::Parse(_) | Error::Backend { .. } | Error::Timeout(_) | Error::Embedding(_)
    )
}

fn hit_refs(hits: &[RetrievalHit<'_>]) -> Vec<RetrievedRef> {
    hits.iter()
        .map(|h| RetrievedRef {
            id: h.entry.id.clone(),
            similarity: h.similarity,
        })
        .collect()
}

fn entry_meta(meme: &MemeRecord, pred: &Prediction, verdict: &JudgeVerdict) -> EntryMeta {
    let mut meta = EntryMeta::new();
    meta.insert("split".into(), "train".into());
    if let Some(label) = meme.label {
        meta.insert("label".into(), label.into());
    }
    meta.insert("score".into(), pred.score.into());
    meta.insert("error".into(), verdict.error.into());
    if !meme.image_ref.is_empty() {
        meta.insert("image".into(), meme.image_ref.clone().into());
    }
    meta
}

/// Runs the judged loop over `train` in order and appends one entry per
/// completed sample to `kb`.
pub fn closed_loop_learn(
    train: &[MemeRecord],
    kb: &mut KnowledgeBase,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<RunTrace> {
    cfg.validate()?;
    require_labels(train)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    if cfg.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    }

    let model = backends.model.as_ref();
    let embedder = backends.embedder.as_ref();
    let mut pid = PidState::new(cfg.integral_bound)?;
    let mut carry = ControlVector::ZERO;
    let mut trace = RunTrace::default();

    for idx in order {
        let meme = &train[idx];
        let mut last = None;
        for iteration in 0..cfg.refine_iters {
            let prompt = map_control_to_prompt(&carry, &cfg.mapper)?;
            let record = TraceRecord::new(idx, meme, Phase::Train, iteration, &prompt);
            let judged = agents::reason(meme, &prompt, model, embedder, &cfg.agent).and_then(
                |(pred, emb)| {
                    let verdict = agents::judge(meme, &pred, model, embedder, &cfg.agent)?;
                    Ok((pred, emb, verdict))
                },
            );
            let (pred, emb, verdict) = match judged {
                Ok(v) => v,
                Err(e) if recoverable(&e) && cfg.on_error == OnError::Skip => {
                    log::warn!("{}: sample skipped: {e}", meme.id);
                    trace.records.push(record.skipped(&e));
                    last = None;
                    break;
                }
                Err(e) => return Err(e),
            };

            let u = if cfg.ablation.controller {
                let (u, next) = pid_step(&pid, &cfg.gains, verdict.error)?;
                // only the final iteration of a sample feeds the integral
                if iteration + 1 == cfg.refine_iters {
                    pid = next;
                }
                u
            } else {
                0.0
            };
            let f = if cfg.ablation.feedback {
                verdict.f
            } else {
                FeedbackVector::ZERO
            };
            let (k, retrieved) = if cfg.train_retrieval && cfg.ablation.retrieval {
                let hits = kb.retrieve_top_k(&emb, cfg.top_k)?;
                (summarize(&hits, &cfg.projection)?, hit_refs(&hits))
            } else {
                (MemorySignal::ZERO, Vec::new())
            };
            carry = assemble_training_control(u, f, k)?;

            let mut record = record.with_prediction(&pred);
            record.error = Some(verdict.error);
            record.control = Some(carry);
            record.critique = Some(verdict.critique.clone());
            record.retrieved = retrieved;
            trace.records.push(record);
            last = Some((pred, emb, verdict));
        }

        if let Some((pred, emb, verdict)) = last {
            let meta = entry_meta(meme, &pred, &verdict);
            kb.append(KbEntry {
                id: meme.id.clone(),
                emb,
                reasoning: pred.rationale,
                feedback: verdict.critique,
                meta: Some(meta),
            })?;
        }
    }
    Ok(trace)
}

struct SampleOutcome {
    prediction: Option<Prediction>,
    records: Vec<TraceRecord>,
}

fn infer_one(
    idx: usize,
    meme: &MemeRecord,
    kb: &KnowledgeBase,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<SampleOutcome> {
    let model = backends.model.as_ref();
    let embedder = backends.embedder.as_ref();
    let base_prompt = neutral_prompt(&cfg.mapper);
    let mut records = Vec::with_capacity(2);
    let skip = |e: Error, record: TraceRecord, mut records: Vec<TraceRecord>| {
        if recoverable(&e) && cfg.on_error == OnError::Skip {
            log::warn!("{}: sample skipped: {e}", meme.id);
            records.push(record.skipped(&e));
            Ok(SampleOutcome {
                prediction: None,
                records,
            })
        } else {
            Err(e)
        }
    };

    let record = TraceRecord::new(idx, meme, Phase::InferBase, 0, &base_prompt);
    let (base, query) = match agents::reason(meme, &base_prompt, model, embedder, &cfg.agent) {
        Ok(v) => v,
        Err(e) => return skip(e, record, records),
    };
    let mut record = record.with_prediction(&base);
    record.control = Some(ControlVector::ZERO);
    records.push(record);

    let (k, retrieved) = if cfg.ablation.retrieval {
        let hits = kb.retrieve_top_k(&query, cfg.top_k)?;
        (summarize(&hits, &cfg.projection)?, hit_refs(&hits))
    } else {
        (MemorySignal::ZERO, Vec::new())
    };
    let mut control = assemble_inference_control(k, &cfg.policy)?;
    if !cfg.ablation.controller {
        control.u = 0.0;
    }
    let prompt = map_control_to_prompt(&control, &cfg.mapper)?;
    let mut record = TraceRecord::new(idx, meme, Phase::Infer, 0, &prompt);
    record.control = Some(control);
    record.retrieved = retrieved;
    let (final_pred, _) = match agents::reason(meme, &prompt, model, embedder, &cfg.agent) {
        Ok(v) => v,
        Err(e) => return skip(e, record, records),
    };
    records.push(record.with_prediction(&final_pred));
    Ok(SampleOutcome {
        prediction: Some(final_pred),
        records,
    })
}

/// Final predictions in `test` order (`None` for skipped samples) and the
/// trace. `kb` is only read.
pub fn open_loop_infer(
    test: &[MemeRecord],
    kb: &KnowledgeBase,
    cfg: &RunConfig,
    backends: &Backends,
) -> Result<(Vec<Option<Prediction>>, RunTrace)> {
    cfg.validate()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<SampleOutcome>)>> =
        Mutex::new(Vec::with_capacity(test.len()));
    let workers = cfg.workers.min(test.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                let Some(meme) = test.get(idx) else { break };
                let outcome = infer_one(idx, meme, kb, cfg, backends);
                let failed = outcome.is_err();
                results
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .push((idx, outcome));
                if failed {
                    // let the other workers drain quickly
                    next.store(test.len(), Ordering::Relaxed);
                }
            });
        }
    });

    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by_key(|(idx, _)| *idx);
    let mut predictions = Vec::with_capacity(test.len());
    let mut trace = RunTrace::default();
    for (_, outcome) in results {
        let outcome = outcome?;
        predictions.push(outcome.prediction);
        trace.records.extend(outcome.records);
    }
    Ok((predictions, trace))
}

/// Scores the labelled samples that produced a prediction.
pub fn evaluate_predictions(
    test: &[MemeRecord],
    predictions: &[Option<Prediction>],
    threshold: f64,
) -> Result<MetricsReport> {
    require_labels(test)?;
    let (labels, scores): (Vec<u8>, Vec<f64>) = test
        .iter()
        .zip(predictions)
        .filter_map(|(m, p)| Some((m.label?, p.as_ref()?.score)))
        .unzip();
    let skipped = test.len() - labels.len();
    if skipped > 0 {
        log::warn!("{skipped} skipped samples excluded from evaluation");
    }
    evaluate_run(&labels, &scores, threshold)
}

/// One report per K, in `ks` order.
pub fn k_sweep(
    test: &[MemeRecord],
    kb: &KnowledgeBase,
    cfg: &RunConfig,
    backends: &Backends,
    ks: &[usize],
) -> Result<Vec<MetricsReport>> {
    require_labels(test)?;
    ks.iter()
        .map(|&k| {
            let cfg = RunConfig {
                top_k: k,
                ..cfg.clone()
            };
            let (predictions, _) = open_loop_infer(test, kb, &cfg, backends)?;
            let mut report = evaluate_predictions(test, &predictions, cfg.threshold)?;
            report.k = Some(k);
            Ok(report)
        })
        .collect()
}
