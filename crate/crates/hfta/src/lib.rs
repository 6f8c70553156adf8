// Per-model loops index several parallel arrays by model slot; explicit
// indices read better than zipped iterators here.
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod hfht;
pub mod losses;
pub mod ops;
pub mod planner;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod verify;
pub mod zoo;
