//! On-disk artifacts: WAV ingestion, dataset manifests, synthetic corpora and
//! checkpoints. Every write goes to a temporary sibling and is renamed into
//! place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{io_err, Result};

pub mod checkpoint;
pub mod manifest;
pub mod synth;
pub mod wav;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointHeader,
    RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use manifest::{Label, Manifest, ManifestRow};
pub use synth::{synth_clip, synth_corpus, synth_in_memory, tone_hz, SynthKind, SynthSpec};
pub use wav::{load_wav, write_wav};

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to `path` via write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}
