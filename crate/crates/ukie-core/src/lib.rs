//! Simulation toolkit for knowledge-aided semantic communication.
//!
//! A transmitter splits each source image into an *invariant* representation
//! `z_K` (class-level knowledge, kept in a receiver-side semantic memory and
//! synchronized between users over a sparse semantic channel) and a *variant*
//! representation `z_V` (sample detail, sent over a simulated noisy physical
//! channel through a learned codec). The receiver looks up the knowledge
//! prototype for the transmitted label index and decodes the image from the
//! prototype plus the recovered variant part.
//!
//! Crate layout:
//!
//! | module | contents |
//! |--------|----------|
//! | [`graph`] | reverse-mode autodiff tape over `ndarray` tensors |
//! | [`nn`] | layers, parameter groups, seeded init, SGD/Adam |
//! | [`data`] | dataset ingestion, synthetic generators, batching |
//! | [`models`] | encoder/extractor/decoder/classifier networks, AE/VAE baselines, checkpoints |
//! | [`losses`] | invariance, variance-hinge, classification, adversarial and reconstruction losses |
//! | [`channel`] | complex symbol mapping, AWGN/Rayleigh fading, equalization |
//! | [`memory`] | per-user prototype store and the threshold-gated broadcast protocol |
//! | [`training`] | two-phase alternating optimization loop |
//! | [`eval`] | PSNR/accuracy/variance/MI metrics, link evaluation, ablation sweeps |
//! | [`config`] | TOML experiment configuration |

pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod memory;
pub mod models;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod training;

pub use error::{Result, UkieError};

/// Raises the glibc mmap threshold so the tape's large tensor buffers are
/// recycled through the heap instead of being unmapped on every free. Call
/// once at process start; safe to call repeatedly.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
    }
}
