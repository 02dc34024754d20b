//! Dataset directories: `manifest.json` plus one folder of binary PGM frames
//! per sequence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassLabel, FrameSequence, Silhouette, SwayProfile, FRAME_HEIGHT, FRAME_WIDTH};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: String,
    pub frame_count: usize,
    /// Relative to the dataset directory.
    pub frames_dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sway_profile: Option<SwayProfile>,
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.pgm")
}

/// Writes a binary (P5) PGM with foreground 255.
pub fn write_pgm(path: &Path, frame: &Silhouette) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    bytes.extend(frame.pixels().iter().map(|&p| if p != 0 { 255u8 } else { 0 }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM; pixels at or above half of maxval become foreground.
pub fn read_pgm(path: &Path) -> Result<Silhouette> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg);

    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PGM header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (expected magic P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed PGM header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("PGM maxval must be in 1..=255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != width * height {
        return Err(bad(&format!(
            "expected {} pixel bytes for {width}x{height}, found {}",
            width * height,
            raster.len()
        )));
    }
    let cut = maxval.div_ceil(2);
    let pixels = raster.iter().map(|&v| u8::from(v as usize >= cut)).collect();
    Ok(Silhouette::from_pixels(height, width, pixels).expect("length checked"))
}

pub fn save_dataset(ds: &[FrameSequence], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(ds.len());
    for (i, seq) in ds.iter().enumerate() {
        let frames_dir = format!("seq_{i:05}");
        let sub = dir.join(&frames_dir);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (t, frame) in seq.frames.iter().enumerate() {
            write_pgm(&sub.join(frame_name(t)), frame)?;
        }
        manifest.push(ManifestEntry {
            subject_id: seq.subject_id.clone(),
            label: seq.label.to_string(),
            frame_count: seq.frames.len(),
            frames_dir,
            sway_profile: seq.profile.clone(),
        });
    }
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<FrameSequence>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest
        .into_iter()
        .map(|entry| {
            let label: ClassLabel = entry
                .label
                .parse()
                .map_err(|e: String| Error::format(&path, format!("subject {}: {e}", entry.subject_id)))?;
            if entry.frame_count == 0 {
                return Err(Error::format(&path, format!("subject {} has no frames", entry.subject_id)));
            }
            let sub = dir.join(&entry.frames_dir);
            let frames = (0..entry.frame_count)
                .map(|t| {
                    let fp = sub.join(frame_name(t));
                    if !fp.is_file() {
                        return Err(Error::format(&fp, "frame file listed in manifest is missing"));
                    }
                    let frame = read_pgm(&fp)?;
                    if (frame.height(), frame.width()) != (FRAME_HEIGHT, FRAME_WIDTH) {
                        return Err(Error::format(
                            &fp,
                            format!(
                                "frame is {}x{}, expected {FRAME_HEIGHT}x{FRAME_WIDTH}",
                                frame.height(),
                                frame.width()
                            ),
                        ));
                    }
                    Ok(frame)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FrameSequence { subject_id: entry.subject_id, label, frames, profile: entry.sway_profile })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthConfig};

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(1, 1, 1, &SynthConfig::default(), 9).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(0, 0, 1, &SynthConfig::default(), 9).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let victim = dir.path().join("seq_00000").join("frame_00003.pgm");
        fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame_00003.pgm"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hand_written_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("walker");
        fs::create_dir(&sub).unwrap();
        for t in 0..8 {
            let mut raster = vec![0u8; FRAME_HEIGHT * FRAME_WIDTH];
            raster[t * FRAME_WIDTH + 40] = 200;
            let mut bytes = b"P5\n# hand made\n88 128\n255\n".to_vec();
            bytes.extend(raster);
            fs::write(sub.join(format!("frame_{t:05}.pgm")), bytes).unwrap();
        }
        fs::write(
            dir.path().join(MANIFEST),
            r#"[{"subject_id": "p1", "label": "neutral", "frame_count": 8, "frames_dir": "walker"}]"#,
        )
        .unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].frames.len(), 8);
        assert_eq!(ds[0].label, ClassLabel::Neutral);
        assert_eq!(ds[0].frames[5].get(5, 40), 1);
        assert_eq!(ds[0].frames[5].foreground(), 1);
    }

    #[test]
    fn bad_label_and_size_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(0, 0, 1, &SynthConfig::default(), 9).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let manifest = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&manifest).unwrap();
        fs::write(&manifest, text.replace("\"negative\"", "\"mild\"")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("manifest.json"));

        fs::write(&manifest, text).unwrap();
        let small = Silhouette::empty(64, 44);
        let fp = dir.path().join("seq_00000").join("frame_00000.pgm");
        write_pgm(&fp, &small).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame_00000.pgm") && err.to_string().contains("64x44"));
    }

    #[test]
    fn malformed_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST), "{not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
