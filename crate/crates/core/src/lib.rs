pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod compiler;
pub mod data;
pub mod distributions;
pub mod eval;
pub mod gradcheck;
pub mod net;
pub mod optim;
pub mod oracles;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Rational = compiler::Rational;
pub type ModelBundle64 = net::ModelBundle<f64>;
pub type ModelBundle32 = net::ModelBundle<f32>;
pub type Batch64 = net::Batch<f64>;
pub type DiagGaussian64 = distributions::DiagGaussian<f64>;
pub type DiagGaussian32 = distributions::DiagGaussian<f32>;
