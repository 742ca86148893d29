//! Learning classifiers from noisy labels with a conditional random field over
//! noisy labels `y`, latent clean labels `ŷ` and hidden units `h`, trained by
//! regularised variational EM with persistent contrastive divergence.

pub mod auxiliary;
pub mod container;
pub mod crf;
pub mod data;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod labels;
pub mod math;
pub mod net;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod variational;

pub use auxiliary::{AuxModel, AuxRbm, AuxRbmConfig, AuxTransition};
pub use crf::{BiasPair, Dims, EnergyParams, FactorialPosterior};
pub use error::{Error, Result};
pub use gibbs::{ChainStore, GibbsConfig};
pub use labels::{LabelMode, LabelVector};
pub use net::{FeatureNet, NetKind};
pub use variational::AlphaSchedule;
