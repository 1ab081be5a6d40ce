//! Desk-scale toolkit for studying adversarial attacks on small speaker
//! recognition stacks.
//!
//! The crate builds a fully synthetic playground: a seeded corpus of harmonic
//! "speakers", a differentiable log-mel embedder, the enrollment/decision
//! machinery for the three classic recognition tasks (open-set identification,
//! closed-set identification, verification), a family of attack losses keyed
//! by source/target configuration, white-box and black-box optimizers, and an
//! over-the-air simulation layer (room impulse responses, additive noise) for
//! crafting perturbations that survive playback.
//!
//! Everything is deterministic under a master seed: corpora, model weights,
//! attack randomness, and report bytes reproduce exactly across runs.

pub mod attack;
pub mod audio;
pub mod harness;
pub mod losses;
pub mod ota;
pub mod rng;
pub mod srs;
