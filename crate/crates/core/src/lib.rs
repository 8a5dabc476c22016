//! Few-shot object detection by feature reweighting, with dataset
//! augmentations aimed at the gap between benchmark and field imagery.

pub mod augment;
pub mod config;
pub mod detector;
pub mod episodic;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod trainer;
pub mod voc;

use thiserror::Error;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Detector32 = detector::Detector<f32>;
pub type Detector64 = detector::Detector<f64>;
pub type GridPrediction32 = detector::GridPrediction<f32>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Voc(#[from] voc::VocError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Episodic(#[from] episodic::EpisodicError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Detector(#[from] detector::DetectorError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn voc_invalid(e: &voc::VocError) -> bool {
    !matches!(e, voc::VocError::Io(_) | voc::VocError::Image(_))
}

fn train_invalid(e: &trainer::TrainError) -> bool {
    use trainer::TrainError as T;
    match e {
        T::InvalidConfig(_) | T::Checkpoint(_) | T::Mismatch { .. } | T::Episodic(_) | T::Eval(_) => true,
        T::Detector(d) => matches!(d, detector::DetectorError::InvalidConfig(_)),
        T::NonFinite { .. } | T::Nn(_) => false,
    }
}

fn experiment_invalid(e: &experiment::ExperimentError) -> bool {
    use experiment::ExperimentError as X;
    match e {
        X::Invalid(_) | X::Augment(_) | X::Episodic(_) => true,
        X::Cell { source, .. } => experiment_invalid(source),
        X::Train(t) => train_invalid(t),
        X::Voc(v) => voc_invalid(v),
        X::Io { .. } => false,
    }
}

impl Error {
    /// Whether the failure comes from bad input (configuration, data or
    /// files) rather than from a fault while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(config::ConfigError::Data(v)) | Error::Voc(v) => voc_invalid(v),
            Error::Config(_) | Error::Augment(_) | Error::Episodic(_) | Error::Eval(_) => true,
            Error::Detector(d) => matches!(d, detector::DetectorError::InvalidConfig(_)),
            Error::Train(t) => train_invalid(t),
            Error::Experiment(x) => experiment_invalid(x),
            Error::Nn(_) => false,
        }
    }
}
