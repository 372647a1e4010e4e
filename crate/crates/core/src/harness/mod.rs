//! Verification and demonstration: gradient checks, toy training, benchmarks.

pub mod bench;
pub mod data;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use bench::{bench, BenchReport};
pub use data::{gen_toy, ToyDataset, ToySpec};
pub use gradcheck::{gradcheck, GradCheckReport, COMPONENTS};
pub use optim::AdamW;
pub use train::{train_toy, EpochMetrics, TrainConfig, TrainReport};
