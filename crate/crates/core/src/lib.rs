//! Feedback-regulated prompting for meme-humor judgment.
//!
//! During learning a judge compares each prediction with its label; the
//! error drives a PID controller and the critique becomes a feedback
//! vector. Together they select guidance directives for the next prompt,
//! and every judged sample is stored in a knowledge base. At inference
//! there is no judge: the nearest stored experiences set the control
//! instead.
//!
//! ```
//! use feedloop_core::{map_control_to_prompt, pid_step, ControlVector, MapperConfig, PidGains, PidState};
//!
//! let (u, _state) = pid_step(&PidState::default(), &PidGains::default(), 1.0).unwrap();
//! assert!((u - 1.6).abs() < 1e-12);
//! let c = ControlVector { u, ..ControlVector::ZERO };
//! let prompt = map_control_to_prompt(&c, &MapperConfig::default()).unwrap();
//! assert_eq!(prompt.directives.len(), 1);
//! ```

pub mod agents;
pub mod backends;
pub mod controller;
pub mod error;
pub mod harness;
pub mod knowledge_base;
pub mod metrics;
pub mod pipelines;
pub mod prompt_mapper;

pub use agents::{AgentConfig, JudgeVerdict, OutputFormat, Prediction};
pub use backends::{
    EmbeddingBackend, Message, MockEmbedder, MockModel, MockModelConfig, ModelBackend, Role,
};
pub use controller::{
    assemble_inference_control, assemble_training_control, inference_policy_u, pid_step,
    ControlVector, FeedbackVector, MemorySignal, PidGains, PidState, PolicyConfig,
};
pub use error::{Error, Result};
pub use harness::{
    load_manifest, split, Config, Manifest, MemeRecord, Partitions, Split, SplitFractions,
};
pub use knowledge_base::{
    cosine_sim, project_g, summarize, Embedding, KbEntry, KnowledgeBase, Projection, RetrievalHit,
};
pub use metrics::{evaluate_run, ConfusionCounts, MetricsReport};
pub use pipelines::{
    closed_loop_learn, k_sweep, open_loop_infer, Ablation, Backends, RunConfig, RunTrace,
    TraceRecord,
};
pub use prompt_mapper::{
    map_control_to_prompt, neutral_prompt, DirectiveTag, GuidancePrompt, MapperConfig,
};
