pub mod backbone;
pub mod error;
pub mod granularity;
pub mod harness;
pub mod modification;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod verify;
