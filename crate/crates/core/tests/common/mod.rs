#![allow(dead_code)]

pub mod ops;
pub mod composed;
pub mod oracles;
pub mod tiny;
