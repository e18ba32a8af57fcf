//! Low-light image enhancement through hyperspectral reconstruction.
//!
//! A dark RGB image is spanned to 31 pseudo-bands, mapped to a
//! hyperspectral estimate by a cycle-trained U-Net, and the estimate plus a
//! 12-band color stack is fed to a second U-Net that produces the enhanced
//! RGB image. Training regularizes the hyperspectral estimate with a Fourier
//! power-spectrum profile loss.

pub mod autograd;
pub mod colorspace;
pub mod error;
pub mod fsutil;
pub mod image;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod pipeline;
pub mod spectral;

pub use error::{Error, ErrorCategory, Result};
pub use image::{ImagePair, MultiBandImage};
