//! Desk-scale adversarial-training laboratory.
//!
//! Implements PGD adversarial training, two mixup/adversarial baselines
//! (mix-then-attack, attack-then-mix), and adversarially optimized
//! mixup with geometric label assignment and a learned mixing ratio,
//! on top of a minimal reverse-mode autodiff tape.

pub mod adversary;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod mixup;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod rngutil;
pub mod tensor;
pub mod train;
