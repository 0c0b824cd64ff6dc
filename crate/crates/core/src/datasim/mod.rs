//! Synthetic speakers, utterances, training samples, verification pairs,
//! and simulated meetings. Everything is a pure function of its seed.

mod meeting;
mod samples;
mod speaker;

pub use meeting::{measured_overlap_fraction, simulate_meeting, Meeting};
pub use samples::{
    draw_sample_plan, make_pretrain_sample, make_trial_batch, make_verification_pair,
    mix_placements, realize_plan, Placement, SamplePlan, TrainingSample, UtteranceBank,
    VerificationPair, NO_SPEAKER,
};
pub use speaker::{gen_utterance, speaker_pool, PhoneInventory, SyntheticSpeaker};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasimError {
    #[error("phone script is empty")]
    EmptyScript,
    #[error("utterance duration {0} s is below the 0.5 s minimum")]
    UtteranceTooShort(f64),
    #[error("speaker pool of {got} is too small, need at least {need}")]
    PoolTooSmall { got: usize, need: usize },
    #[error("meeting speaker count {0} outside [2, 8]")]
    BadSpeakerCount(usize),
    #[error("meeting duration {0} s is below the 60 s minimum")]
    MeetingTooShort(f64),
    #[error("overlap ratio {0} outside [0, 0.2]")]
    BadOverlapRatio(f64),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}
