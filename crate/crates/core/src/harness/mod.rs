pub mod config;
pub mod demo;
pub mod experiments;
pub mod image_io;
pub mod metrics;
pub mod runner;
pub mod tensor_io;
pub mod verify;
