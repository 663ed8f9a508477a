//! Distributionally robust training with Wasserstein penalties: inner
//! maximization, adversarial training, attacks, certificates, and a robust
//! tabular Q-learning demo on cart-pole.

pub mod attacks;
pub mod certify;
pub mod data;
pub mod error;
pub mod inner;
pub mod lp;
pub mod model;
pub mod rl;
pub mod smoothness;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
pub use model::{Activation, Head, Label, Sample, SmoothNet};
pub use transport::TransportCost;
