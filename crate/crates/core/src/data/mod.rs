//! Dataset synthesis, on-disk formats, batching, checkpoints, and the run
//! configuration.
//!
//! Dataset directory layout:
//!
//! ```text
//! <root>/clips/<id>/frames/00000.png ...   RGB frames at 25 fps
//! <root>/clips/<id>/audio.wav             mono 16 kHz PCM
//! <root>/clips/<id>/truth.json            landmarks, blinks, EAR, fps
//! <root>/clips/<id>/flow/00000.bin        optional block-matching flow
//! ```

mod checkpoint;
mod config;
mod io;
mod synth;

pub use checkpoint::{
    checkpoint_hash, load_checkpoint, save_checkpoint, CheckpointData, CHECKPOINT_VERSION,
};
pub use config::{AblationAxis, RunConfig};
pub use io::{
    frame_from_png, frame_to_png, list_clip_ids, read_clip_dir, read_flow_file, write_clip_dir,
    write_flow_file, ClipTruth,
};
pub use synth::{
    build_dataset, make_training_batch, synthesize_audio, synthesize_clip, ClipData,
    SyntheticScene, TrainingSample, VideoClip, SYNTH_LANDMARKS,
};
