pub mod biasshift;
pub mod criticfit;
pub mod env;
pub mod error;
pub mod lastfit;
pub mod lqr;
pub mod net;
pub mod rng;
pub mod scalar;
pub mod td3;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network = net::NetworkParams<f64>;
pub type Network32 = net::NetworkParams<f32>;
pub type Linearization = net::EffectiveLinearization<f64>;
pub type Linearization32 = net::EffectiveLinearization<f32>;
pub type Pendulum = env::PendulumParams<f64>;
pub type Pendulum32 = env::PendulumParams<f32>;
pub type Lqr = lqr::LqrSolution<f64>;
pub type Lqr32 = lqr::LqrSolution<f32>;
pub type Agent = td3::Agent<f64>;
pub type Agent32 = td3::Agent<f32>;
