//! Synthetic activity clips: a handful of colored shapes whose relational
//! motion defines the class. Single frames are deliberately ambiguous; the
//! initial scene is drawn identically for every class, so only how entities
//! move over time carries label information.

mod disk;
mod motion;
mod render;
mod sequence;

pub use disk::{
    read_manifest, recompute_channel_stats, write_dataset, DiskDataset, Manifest, Split,
};
pub use motion::entity_tracks;
pub use render::render_frame;
pub use sequence::{
    eval_window_starts, generate_sequence, sample_subsequences, Sequence, SubseqMode,
    WindowSample, SUBSEQ_LEN,
};

use saccade::{Error, Result};

pub const CLASS_NAMES: [&str; 5] = ["approach", "avoid", "orbit", "follow", "independent"];

/// Bumped whenever generated bytes would change for the same inputs.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per full sequence.
    pub frames: usize,
    /// Moving entities; the first two carry the class signal.
    pub entities: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 64,
            width: 64,
            frames: 16,
            entities: 2,
            train: 2000,
            val: 500,
            test: 500,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::data("frames must be at least 8x8 pixels"));
        }
        if self.frames < SUBSEQ_LEN {
            return Err(Error::data(format!(
                "need at least {} frames per sequence, got {}",
                SUBSEQ_LEN, self.frames
            )));
        }
        if !(2..=4).contains(&self.entities) {
            return Err(Error::data(format!(
                "entity count must be 2..=4, got {}",
                self.entities
            )));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::data("every split needs at least one sequence"));
        }
        Ok(())
    }

    pub fn frame_values(&self) -> usize {
        self.height * self.width * 3
    }
}
