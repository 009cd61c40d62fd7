//! Downstream training in both scenarios, watermark-removal attacks and the
//! piracy / independent model zoo.

mod downstream;
mod removal;
mod zoo;

pub use downstream::{accuracy, split_indices, train_downstream, DownstreamConfig, DownstreamOutcome, Scenario, Split};
pub use removal::{overwrite, prune, pruned_count};
pub use zoo::{
    build_zoo, build_zoo_against, build_zoo_with, train_independents, IndependentModels, independent_encoders, member_seed, run_parallel, AttackSchedule, ZooMember, ZooOutcome, ZooSpec,
};
