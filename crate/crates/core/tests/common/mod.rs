#![allow(dead_code)]

pub mod cli;
pub mod fd;
pub mod physics;
