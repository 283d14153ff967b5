//! Online search over three-layer augmentation pipelines for volumetric
//! segmentation training.
//!
//! The search space is a tree of augmentation operations ([`AugTree`]); one
//! root-to-leaf path is trained per epoch and the validation loss it produces
//! is credited back to the path ([`policy`]). Nodes whose loss keeps rising
//! are pruned. The [`engine`] runs the loop against any [`Evaluator`],
//! including a remote trainer speaking newline-delimited JSON.
//!
//! Augmentation kernels and the scalar formulas are generic over
//! [`Scalar`] (`f32` or `f64`); search statistics are kept in `f64`.

pub mod engine;
pub mod evaluator;
pub mod io;
pub mod kernels;
pub mod policy;
pub mod scalar;
pub mod search_space;
pub mod tree;
pub mod volume;

pub use engine::{
    run, Checkpoint, Engine, EngineError, EpochRecord, Policy, Proposal, RunConfig, RunError, RunObserver,
    RunReport,
};
pub use evaluator::{EvalError, Evaluator, Message, SyntheticLandscape, Utility, WireClient};
pub use kernels::{apply, apply_path, AppliedOp, KernelError};
pub use policy::{EpochFeedback, PolicyError, PolicyParams, SampleMode};
pub use scalar::Scalar;
pub use search_space::{default_catalog, Catalog, Level, MagnitudeRange, OpKind, OpVariant, Side, VariantKey};
pub use tree::{AugNode, AugPath, AugTree, NodeId, PruneEvent, TreeError};
pub use volume::{Volume, VolumeError};

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type Feedback = EpochFeedback;
