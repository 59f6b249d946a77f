//! Physical-channel simulation: complex symbol frames, AWGN and Rayleigh
//! block fading at a configured transmit SNR, and perfect-CSI equalization.
//!
//! The deployable pipeline works on concrete [`ChannelFrame`]s. Training
//! needs the same corruption inside the autodiff graph; after perfect-CSI
//! equalization the whole channel collapses to `y = s + n/h` (or an erasure),
//! which [`TrainChannelDraw`] expresses as a per-row affine op. A test pins
//! the two paths to each other.

use crate::error::{Result, UkieError};
use crate::rng::{next_gaussian, stream};
use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;

/// Fading model of the physical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

/// Link configuration. `compression_ratio` is complex channel uses per real
/// source dimension; the frame length follows as M = round(ratio * d_x).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub seed: u64,
    pub compression_ratio: f64,
}

impl ChannelConfig {
    pub fn num_symbols(&self, d_x: usize) -> Result<usize> {
        if !(self.compression_ratio > 0.0) {
            return Err(UkieError::Config(format!(
                "compression_ratio must be > 0 (got {})",
                self.compression_ratio
            )));
        }
        Ok(((self.compression_ratio * d_x as f64).round() as usize).max(1))
    }

    pub fn noise_variance(&self) -> f64 {
        snr_to_noise_variance(self.snr_db, 1.0)
    }
}

/// sigma_n^2 = signal_power / 10^(snr_db / 10)
pub fn snr_to_noise_variance(snr_db: f64, signal_power: f64) -> f64 {
    signal_power / 10f64.powf(snr_db / 10.0)
}

/// Threshold below which a fade is treated as an erasure instead of being
/// equalized with unbounded gain.
pub const DEEP_FADE_THRESHOLD: f64 = 1e-8;

/// One transmitted frame: M complex symbols, the error-free label-index
/// sideband, and the fading state it experienced.
#[derive(Debug, Clone)]
pub struct ChannelFrame {
    pub symbols: Vec<Complex64>,
    pub label_index: usize,
    pub h: Complex64,
    pub erased: bool,
}

impl ChannelFrame {
    pub fn new(symbols: Vec<Complex64>, label_index: usize) -> Self {
        ChannelFrame { symbols, label_index, h: Complex64::new(1.0, 0.0), erased: false }
    }

    /// Mean complex symbol power.
    pub fn mean_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }

    /// Paired-real view (re0, im0, re1, im1, ...).
    pub fn to_reals(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.symbols.len());
        for s in &self.symbols {
            out.push(s.re);
            out.push(s.im);
        }
        out
    }

    pub fn from_reals(reals: &[f64], label_index: usize) -> Result<Self> {
        if reals.len() % 2 != 0 {
            return Err(UkieError::Shape("paired-real frame needs an even length".into()));
        }
        let symbols = reals
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Ok(ChannelFrame::new(symbols, label_index))
    }
}

/// Splits a power-normalized (N, 2M) symbol matrix into per-sample frames.
pub fn frames_from_symbols(symbols: &Array2<f64>, labels: &[usize]) -> Result<Vec<ChannelFrame>> {
    if symbols.nrows() != labels.len() {
        return Err(UkieError::Shape(format!(
            "{} symbol rows vs {} labels",
            symbols.nrows(),
            labels.len()
        )));
    }
    symbols
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| ChannelFrame::from_reals(row.as_slice().unwrap(), y))
        .collect()
}

fn complex_gaussian<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let scale = (variance / 2.0).sqrt();
    let re = next_gaussian(rng) * scale;
    let im = next_gaussian(rng) * scale;
    Complex64::new(re, im)
}

/// Applies block fading and additive noise: s_hat = h*s + n. The label-index
/// sideband passes through uncorrupted.
pub fn transmit<R: Rng>(frame: &ChannelFrame, cfg: &ChannelConfig, rng: &mut R) -> ChannelFrame {
    let h = match cfg.kind {
        ChannelKind::Awgn => Complex64::new(1.0, 0.0),
        ChannelKind::Rayleigh => complex_gaussian(rng, 1.0),
    };
    let sigma2 = cfg.noise_variance();
    let symbols = frame
        .symbols
        .iter()
        .map(|&s| {
            let n = if sigma2 > 0.0 {
                complex_gaussian(rng, sigma2)
            } else {
                Complex64::new(0.0, 0.0)
            };
            h * s + n
        })
        .collect();
    ChannelFrame { symbols, label_index: frame.label_index, h, erased: false }
}

/// Per-frame generator stream derived from (config seed, frame index), so
/// independent frames can be processed in any order.
pub fn transmit_indexed(frame: &ChannelFrame, cfg: &ChannelConfig, frame_index: u64) -> ChannelFrame {
    let mut rng = stream(cfg.seed, "frame", frame_index);
    transmit(frame, cfg, &mut rng)
}

/// Perfect-CSI equalization: s_hat / h. Fades below [`DEEP_FADE_THRESHOLD`]
/// zero the frame and raise the erasure flag instead.
pub fn equalize(received: &ChannelFrame) -> ChannelFrame {
    if received.h.norm() < DEEP_FADE_THRESHOLD {
        return ChannelFrame {
            symbols: vec![Complex64::new(0.0, 0.0); received.symbols.len()],
            label_index: received.label_index,
            h: received.h,
            erased: true,
        };
    }
    let symbols = received.symbols.iter().map(|&s| s / received.h).collect();
    ChannelFrame {
        symbols,
        label_index: received.label_index,
        h: received.h,
        erased: false,
    }
}

/// Per-row channel realization for the in-graph training path: after perfect
/// equalization a frame becomes `scale * s + offset` with scale 0 on erasure
/// and offset the equalized noise.
#[derive(Debug, Clone)]
pub struct TrainChannelDraw {
    pub scale: Vec<f64>,
    pub offset: Array2<f64>,
    /// |h| per frame, for logging.
    pub fade_magnitude: Vec<f64>,
}

impl TrainChannelDraw {
    /// Draws fading and noise for `n_frames` frames of `m` symbols. Frame i
    /// uses the (seed, base_index + i) stream, identical to
    /// [`transmit_indexed`] followed by [`equalize`].
    pub fn generate(cfg: &ChannelConfig, m: usize, n_frames: usize, base_index: u64) -> Self {
        let sigma2 = cfg.noise_variance();
        let mut scale = Vec::with_capacity(n_frames);
        let mut fade = Vec::with_capacity(n_frames);
        let mut offset = Array2::<f64>::zeros((n_frames, 2 * m));
        for i in 0..n_frames {
            let mut rng = stream(cfg.seed, "frame", base_index + i as u64);
            let h = match cfg.kind {
                ChannelKind::Awgn => Complex64::new(1.0, 0.0),
                ChannelKind::Rayleigh => complex_gaussian(&mut rng, 1.0),
            };
            fade.push(h.norm());
            if h.norm() < DEEP_FADE_THRESHOLD {
                scale.push(0.0);
                // offsets stay zero: the decoder sees an erased frame
                for _ in 0..m {
                    let _ = complex_gaussian(&mut rng, sigma2.max(f64::MIN_POSITIVE));
                }
                continue;
            }
            scale.push(1.0);
            for j in 0..m {
                let n = if sigma2 > 0.0 {
                    complex_gaussian(&mut rng, sigma2)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                let eq = n / h;
                offset[[i, 2 * j]] = eq.re;
                offset[[i, 2 * j + 1]] = eq.im;
            }
        }
        TrainChannelDraw { scale, offset, fade_magnitude: fade }
    }
}
