pub mod audio;
pub mod beamformer;
pub mod cone;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hermitian;
pub mod scene;
pub mod stft;
