//! Synthetic corpus generator.
//!
//! Each sample carries an image marker (a bright square filling one
//! patch-aligned cell of a random quadrant) and a text marker (a trigger
//! token spliced into filler text). In `xor` mode the label is the XOR of
//! the two markers, so correct classification requires fusing both
//! modalities; in `easy` mode the label is the image marker alone.
//! Labels are balanced to within one, everything is deterministic per
//! seed, and images (binary PPM), OCR sidecars, a manifest, and a marker
//! metadata file are written to disk.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{save_manifest, Corpus, DataError, MemeRecord};
use crate::rng::RngStream;

/// Generated image edge length in pixels; one quadrant holds 2×2
/// marker-sized cells of 16×16.
pub const SYNTH_IMAGE_SIZE: usize = 64;
const CELL: usize = SYNTH_IMAGE_SIZE / 4;

pub const TRIGGER_TOKEN: &str = "trigger";

const FILLER_WORDS: &[&str] = &[
    "the", "a", "we", "see", "day", "sun", "tree", "cat", "dog", "run", "go", "is", "it", "red",
    "blue", "top", "low", "old", "new", "one",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticMode {
    /// label = image marker XOR text marker.
    Xor,
    /// label = image marker.
    Easy,
}

impl fmt::Display for SyntheticMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticMode::Xor => write!(f, "xor"),
            SyntheticMode::Easy => write!(f, "easy"),
        }
    }
}

impl std::str::FromStr for SyntheticMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xor" => Ok(SyntheticMode::Xor),
            "easy" => Ok(SyntheticMode::Easy),
            other => Err(format!("unknown synthetic mode '{other}' (expected xor|easy)")),
        }
    }
}

/// Per-sample marker record, written alongside the manifest so labels can
/// be re-derived and audited.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticMeta {
    pub id: String,
    pub image_marker: bool,
    pub text_marker: bool,
    pub label: u8,
}

pub fn generate_synthetic(
    n: usize,
    mode: SyntheticMode,
    seed: u64,
    out_dir: &Path,
) -> Result<Corpus, DataError> {
    if n < 4 || n % 2 != 0 {
        return Err(DataError::Invalid(format!(
            "synthetic corpus size must be even and at least 4, got {n}"
        )));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|source| DataError::Io {
        path: images_dir.clone(),
        source,
    })?;

    let root = RngStream::new(seed, 0x5A17);

    // balanced labels, order shuffled by seed
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    root.derive(1).shuffle(&mut labels);

    let mut records = Vec::with_capacity(n);
    let mut metas = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("synth-{i:04}");
        let mut rng = root.derive(100 + i as u64);

        let (image_marker, text_marker) = match mode {
            SyntheticMode::Xor => {
                let img = rng.next_f64() < 0.5;
                (img, img != (label == 1))
            }
            SyntheticMode::Easy => (label == 1, rng.next_f64() < 0.5),
        };

        let pixels = render_image(image_marker, &mut rng);
        let image_rel = format!("images/{id}.ppm");
        let image_path = out_dir.join(&image_rel);
        write_ppm(&image_path, SYNTH_IMAGE_SIZE, SYNTH_IMAGE_SIZE, &pixels)?;

        let text = render_text(text_marker, &mut rng);
        let sidecar = out_dir.join(format!("{image_rel}.txt"));
        fs::write(&sidecar, &text).map_err(|source| DataError::Io {
            path: sidecar.clone(),
            source,
        })?;

        metas.push(SyntheticMeta {
            id: id.clone(),
            image_marker,
            text_marker,
            label,
        });
        records.push(MemeRecord {
            id,
            image_path: image_rel,
            text: Some(text),
            label: Some(label),
            annotator_labels: None,
        });
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let corpus = Corpus {
        records,
        manifest_path: manifest_path.clone(),
    };
    save_manifest(&manifest_path, &corpus)?;

    let meta_path = out_dir.join("synth_meta.json");
    let body = serde_json::to_string_pretty(&metas)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    fs::write(&meta_path, body).map_err(|source| DataError::Io {
        path: meta_path,
        source,
    })?;

    Ok(corpus)
}

pub fn load_synthetic_meta(out_dir: &Path) -> Result<Vec<SyntheticMeta>, DataError> {
    let path = out_dir.join("synth_meta.json");
    let body = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&body).map_err(|e| DataError::Invalid(e.to_string()))
}

/// Dark noisy background; when the marker is set, one patch-aligned cell
/// of a random quadrant is filled bright white.
fn render_image(marker: bool, rng: &mut RngStream) -> Vec<u8> {
    let size = SYNTH_IMAGE_SIZE;
    let mut pixels = vec![0u8; size * size * 3];
    for p in pixels.chunks_mut(3) {
        let v = rng.next_below(50) as u8;
        p[0] = v;
        p[1] = v;
        p[2] = v;
    }
    // quadrant and cell draw from the stream even when unused, so the
    // background noise does not encode the marker
    let quadrant = rng.next_below(4) as usize;
    let cell = rng.next_below(4) as usize;
    if marker {
        let qy = (quadrant / 2) * (size / 2);
        let qx = (quadrant % 2) * (size / 2);
        let cy = qy + (cell / 2) * CELL;
        let cx = qx + (cell % 2) * CELL;
        for y in cy..cy + CELL {
            for x in cx..cx + CELL {
                let at = (y * size + x) * 3;
                pixels[at] = 255;
                pixels[at + 1] = 255;
                pixels[at + 2] = 255;
            }
        }
    }
    pixels
}

/// Filler words with the trigger token spliced in when the marker is set.
fn render_text(marker: bool, rng: &mut RngStream) -> String {
    let len = 4 + rng.next_below(4) as usize;
    let mut words: Vec<&str> = (0..len)
        .map(|_| FILLER_WORDS[rng.next_below(FILLER_WORDS.len() as u64) as usize])
        .collect();
    let slot = rng.next_below(len as u64 + 1) as usize;
    if marker {
        words.insert(slot, TRIGGER_TOKEN);
    }
    words.join(" ")
}

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let mut file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header = format!("P6\n{width} {height}\n255\n");
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(rgb))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn xor_corpus_is_balanced_and_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(100, SyntheticMode::Xor, 7, dir.path()).unwrap();
        assert_eq!(corpus.len(), 100);
        let ones: usize = corpus
            .records
            .iter()
            .filter(|r| r.label == Some(1))
            .count();
        assert!((49..=51).contains(&ones), "label count {ones}");

        let metas = load_synthetic_meta(dir.path()).unwrap();
        for (record, meta) in corpus.records.iter().zip(&metas) {
            assert_eq!(record.id, meta.id);
            let expected = u8::from(meta.image_marker != meta.text_marker);
            assert_eq!(record.label, Some(expected));
            // text marker is observable in the caption itself
            let has_trigger = record
                .text
                .as_deref()
                .unwrap()
                .split_whitespace()
                .any(|w| w == TRIGGER_TOKEN);
            assert_eq!(has_trigger, meta.text_marker);
        }
    }

    #[test]
    fn easy_mode_labels_follow_the_image_marker() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(20, SyntheticMode::Easy, 3, dir.path()).unwrap();
        let metas = load_synthetic_meta(dir.path()).unwrap();
        for (record, meta) in corpus.records.iter().zip(&metas) {
            assert_eq!(record.label, Some(u8::from(meta.image_marker)));
        }
    }

    #[test]
    fn same_seed_writes_byte_identical_trees() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        generate_synthetic(12, SyntheticMode::Xor, 42, da.path()).unwrap();
        generate_synthetic(12, SyntheticMode::Xor, 42, db.path()).unwrap();

        let mut names: Vec<PathBuf> = Vec::new();
        collect_files(da.path(), da.path(), &mut names);
        assert!(!names.is_empty());
        for rel in names {
            let a = fs::read(da.path().join(&rel)).unwrap();
            let b = fs::read(db.path().join(&rel)).unwrap();
            assert_eq!(a, b, "{rel:?} differs");
        }
    }

    fn collect_files(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) {
        for entry in fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                collect_files(root, &path, acc);
            } else {
                acc.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }

    #[test]
    fn odd_or_tiny_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(2, SyntheticMode::Xor, 1, dir.path()).is_err());
        assert!(generate_synthetic(7, SyntheticMode::Xor, 1, dir.path()).is_err());
    }

    #[test]
    fn generated_images_decode_and_contain_the_marker() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic(8, SyntheticMode::Easy, 11, dir.path()).unwrap();
        let metas = load_synthetic_meta(dir.path()).unwrap();
        for (record, meta) in corpus.records.iter().zip(&metas) {
            let path = dir.path().join(&record.image_path);
            let img = crate::data::imageproc::load_image(&path).unwrap();
            let bright = img.pixels().filter(|p| p[0] == 255).count();
            if meta.image_marker {
                assert_eq!(bright, CELL * CELL, "{}", record.id);
            } else {
                assert_eq!(bright, 0, "{}", record.id);
            }
        }
    }
}
