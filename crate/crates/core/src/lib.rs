//! Numerical core for a frequency-aware variational autoencoder.
//!
//! The crate is `no_std` (it only needs `alloc`). Everything that touches the
//! filesystem, the clock or the command line lives in the `favae` crate.
//!
//! Layout:
//! * [`wavelet`]: level-1 orthonormal Haar analysis/synthesis, subband
//!   normalization, detail packing and the low/high frequency losses.
//! * [`spectrum`]: residual power spectra, radial profiles and band energy.
//! * [`nn`]: a small reverse-mode autodiff engine, layers, Gaussian latents
//!   and Adam.
//! * [`favae`]: the two-branch autoencoder, its losses and its training loop.
//! * [`fusion`] and [`diffusion`]: fused latents and a toy DDPM over them.
//! * [`audit`]: dataset metrics, feature Fréchet distance and per-class NMSE.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod audit;
pub mod diffusion;
pub mod error;
pub mod favae;
pub mod features;
pub mod fft;
pub mod fusion;
pub mod image;
pub mod linalg;
pub mod nn;
pub mod real;
pub mod rng;
pub mod spectrum;
pub mod synth;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::{ImageTensor, ValueRange};
pub use tensor::Tensor;
