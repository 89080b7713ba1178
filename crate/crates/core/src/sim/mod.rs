//! Closed-loop simulation: environment, synthetic human, disturbances,
//! demonstrations, the control loop and run metrics.

pub mod demo;
pub mod disturbance;
pub mod env;
pub mod human;
pub mod log;
pub mod metrics;
pub mod runner;
pub mod scenario;

pub use demo::{fit_from_demos, generate_demos, load_model, save_model, DemoLog, DemoSample};
pub use log::{LogRow, PlanStatus, RunLog};
pub use metrics::{metrics, Summary};
pub use runner::{run_episode, PlanRecord, RunOptions, RunOutput};
pub use scenario::Scenario;
