pub mod cbg;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod maps;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod prb;
pub mod sampling;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Trainer32 = training::Trainer<f32>;
