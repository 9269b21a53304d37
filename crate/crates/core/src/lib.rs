//! Quality-of-data driven continuous workflows.
//!
//! Steps of a DAG workflow are triggered by the predicted impact of new
//! input on their output rather than by every predecessor completion. A
//! Random-Forest classifier learns, from synchronous training waves, which
//! input impacts push a step's output error over its bound; the engine
//! then skips the remaining executions.
//!
//! The store, metrics, engine and learner are generic over the element
//! scalar ([`Scalar`], implemented for `f32` and `f64`). The workloads and
//! experiment harness work in `f64`; the aliases below name the `f64`
//! instantiations.

pub mod engine;
pub mod harness;
pub mod learn;
pub mod metrics;
pub mod scalar;
pub mod store;
pub mod workloads;

pub use scalar::Scalar;

pub type Store = store::ColumnStore<f64>;
pub type Container = store::DataContainer<f64>;
pub type Engine = engine::Engine<f64>;
pub type Actions = engine::ActionRegistry<f64>;
pub type Metrics = metrics::MetricRegistry<f64>;
pub type Example = learn::TrainingExample<f64>;
pub type KnowledgeBase = learn::KnowledgeBase<f64>;
pub type Forest = learn::ForestModel<f64>;
pub type WaveInput = engine::WaveInput<f64>;
pub type WaveResult = engine::WaveResult<f64>;
