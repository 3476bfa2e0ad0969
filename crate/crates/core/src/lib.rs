pub mod cli;
pub mod data;
pub mod layers;
pub mod model;
pub mod params;
pub mod pooling;
pub mod tensor;
pub mod train;
