//! Step-level trajectory calibration over a deterministic text world.
//!
//! The crate is `no_std` (with `alloc`) so the algorithmic core stays free of
//! IO; file formats, the CLI, and the external-agent wire protocol live in the
//! companion `steca` crate.
//!
//! Pipeline, in dependency order:
//! 1. [`env`] — a seedable partially observable pick-and-place world with an
//!    exact scripted planner and prefix replay.
//! 2. [`policy`] — expert / noisy-expert / feature-softmax policies over the
//!    enumerated action grammar, with analytic log-prob gradients.
//! 3. [`stepreward`] — Monte Carlo estimation of step-level rewards.
//! 4. [`ndtw`] — normalized dynamic time warping between action sequences.
//! 5. [`calibrate`] — deviation detection and calibrated-trajectory records.
//! 6. [`dataset`] — deviation-weighted training examples.
//! 7. [`training`] — supervised warm-up, reward-weighted training, and
//!    evaluation metrics.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod calibrate;
pub mod dataset;
pub mod env;
pub mod error;
pub mod ndtw;
pub mod policy;
pub mod rng;
pub mod stepreward;
pub mod training;
pub mod trajectory;

pub use error::CoreError;
