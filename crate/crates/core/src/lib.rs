pub mod dataset;
pub mod schema;
pub mod tensor;
pub mod blocks;
pub mod model;
pub mod training;
pub mod explore;
