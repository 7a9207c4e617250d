#![allow(dead_code)]
pub mod criteria;
pub mod grad_suite;
pub mod pipeline;
pub mod tiny;
