//! Unbiased pairwise learning from biased implicit feedback.
//!
//! The crate covers the whole offline pipeline:
//!
//! * [`dataset`]: explicit-rating loaders and the semi-synthetic click generator
//! * [`propensity`]: popularity-based exposure propensities and posterior exposure
//! * [`model`]: the inner-product matrix factorization ranker
//! * [`losses`]: pointwise and pairwise risk terms with analytic gradients
//! * [`trainer`]: mini-batch Adam training and the Rel-MF to UPL pipeline
//! * [`evaluation`]: DCG/Recall/MAP, cohorts and one-tailed Welch tests
//! * [`oracle`]: exact enumeration and Monte Carlo checks of estimator bias and variance

pub mod adam;
pub mod dataset;
mod error;
pub mod evaluation;
pub mod kv;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod propensity;
pub mod trainer;

pub use dataset::{ExplicitRatings, IdIndex, ImplicitDataset, Interaction, RatingFormat, Split};
pub use error::{Error, Result};
pub use evaluation::{Cohort, CohortSpec, MetricReport, RankMetrics};
pub use losses::{LossSpec, Method, PairSample, PointSample};
pub use model::FactorModel;
pub use oracle::{Estimator, EstimatorReport, SyntheticWorld};
pub use propensity::{PropensityConfig, PropensityTable};
pub use trainer::{TrainConfig, TrainRun};
