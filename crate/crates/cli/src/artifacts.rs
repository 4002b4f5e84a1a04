//! Atomic artifact writes, manifests and PNG previews.

use std::io::Write;
use std::path::{Path, PathBuf};

use dpdistill_core::config::digest_hex;
use dpdistill_core::data::LabeledImages;
use dpdistill_core::{Error, Result};

pub const STORE_FILE: &str = "signals.dsss";
pub const LEDGER_FILE: &str = "ledger.txt";
pub const SYNTHETIC_IMAGES: &str = "synthetic.dsrt";
pub const SYNTHETIC_LABELS: &str = "synthetic.labels";
pub const LOSS_FILE: &str = "loss.csv";
pub const PREVIEW_FILE: &str = "preview.png";

/// Writes through a temp file in the target directory and renames it into
/// place, so a partial file is never visible under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn labeled_bytes(set: &LabeledImages) -> Result<(Vec<u8>, Vec<u8>)> {
    Ok((set.to_tensor()?.to_bytes(), set.labels().to_vec()))
}

pub fn png_bytes(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let color = match channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Validation(format!("cannot encode {channels} channels as PNG"))),
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(pixels, width as u32, height as u32, color)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(out)
}

/// A `key = value` record of what a stage produced, with a digest per file.
pub struct Manifest {
    lines: Vec<(String, String)>,
    dir: PathBuf,
}

impl Manifest {
    pub fn new(dir: &Path, stage: &str, config_hash: &str, sampling_hash: &str, seed: u64) -> Self {
        let lines = vec![
            ("stage".to_string(), stage.to_string()),
            ("config_hash".to_string(), config_hash.to_string()),
            ("sampling_hash".to_string(), sampling_hash.to_string()),
            ("seed".to_string(), seed.to_string()),
        ];
        Self {
            lines,
            dir: dir.to_path_buf(),
        }
    }

    pub fn entry(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    /// Writes `bytes` to `name` inside the output directory and records its digest.
    pub fn write_file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.lines.push((format!("file.{name}"), digest_hex(bytes)));
        Ok(())
    }

    pub fn finish(self, name: &str) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.lines {
            text.push_str(&format!("{k} = {v}\n"));
        }
        write_atomic(&self.dir.join(name), text.as_bytes())
    }
}
