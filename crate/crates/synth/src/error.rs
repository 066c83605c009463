use udcvr_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("invalid PSF: {0}")]
    Psf(String),
    #[error("{0}")]
    Invalid(String),
    #[error("clip {clip}: {source}")]
    Clip {
        clip: String,
        #[source]
        source: Box<SynthError>,
    },
}

impl SynthError {
    pub(crate) fn in_clip(self, clip: &str) -> SynthError {
        SynthError::Clip {
            clip: clip.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, SynthError>;
