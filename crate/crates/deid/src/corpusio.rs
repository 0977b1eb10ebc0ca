//! On-disk corpus format: one 8-bit binary PGM per sample plus a JSONL index
//! holding the generative factors and split assignment.
//!
//! The PGM is a quantized view for inspection; loading re-renders the f64
//! image from the stored factors and cross-checks the quantization, so a
//! save/load round trip is exact.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DeidError, Result};
use crate::synthgen::{render, Corpus, PatientIdentity, SemanticContent, Split, IMG_SIZE};

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    sample_id: usize,
    file: String,
    split: Split,
    identity: PatientIdentity,
    semantics: SemanticContent,
    acquisition_noise_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CorpusMeta {
    n_patients: usize,
    images_per_patient: usize,
    train_patients: Vec<usize>,
    val_patients: Vec<usize>,
    test_patients: Vec<usize>,
}

pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, image: &[f64]) -> Result<()> {
    if image.len() != IMG_SIZE * IMG_SIZE {
        return Err(DeidError::InvalidParameter(format!(
            "image has {} pixels, expected {}",
            image.len(),
            IMG_SIZE * IMG_SIZE
        )));
    }
    let mut buf = Vec::with_capacity(IMG_SIZE * IMG_SIZE + 32);
    write!(buf, "P5\n{IMG_SIZE} {IMG_SIZE}\n255\n")?;
    buf.extend(image.iter().map(|&v| quantize_u8(v)));
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| DeidError::Corrupt(format!("{}: {msg}", path.display()));
    // Header is exactly three whitespace-terminated fields after the magic.
    let mut pos = 0usize;
    let mut field = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DeidError::Corrupt("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if field(&bytes)? != "P5" {
        return Err(corrupt("not a binary PGM"));
    }
    let w: usize = field(&bytes)?.parse().map_err(|_| corrupt("bad width"))?;
    let h: usize = field(&bytes)?.parse().map_err(|_| corrupt("bad height"))?;
    let maxval: usize = field(&bytes)?.parse().map_err(|_| corrupt("bad maxval"))?;
    if w != IMG_SIZE || h != IMG_SIZE || maxval != 255 {
        return Err(corrupt(&format!("unexpected geometry {w}x{h} maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    if bytes.len() != pos + w * h {
        return Err(corrupt("pixel payload size mismatch"));
    }
    Ok(bytes[pos..].to_vec())
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::new();
    for s in &corpus.samples {
        let file = format!("sample_{:05}.pgm", s.sample_id);
        write_pgm(&dir.join(&file), &s.image)?;
        let rec = IndexRecord {
            sample_id: s.sample_id,
            file,
            split: s.split,
            identity: s.identity.clone(),
            semantics: s.semantics.clone(),
            acquisition_noise_seed: s.acquisition_noise_seed,
        };
        index.push(serde_json::to_string(&rec)?);
    }
    fs::write(dir.join("index.jsonl"), index.join("\n") + "\n")?;
    let meta = CorpusMeta {
        n_patients: corpus.n_patients,
        images_per_patient: corpus.images_per_patient,
        train_patients: corpus.train_patients.clone(),
        val_patients: corpus.val_patients.clone(),
        test_patients: corpus.test_patients.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let index = fs::read_to_string(dir.join("index.jsonl"))?;
    let mut samples = Vec::new();
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let rec: IndexRecord = serde_json::from_str(line)?;
        // Full-precision image comes from the factors; the PGM only verifies.
        let mut sample = render(&rec.identity, &rec.semantics, rec.acquisition_noise_seed)?;
        sample.sample_id = rec.sample_id;
        sample.split = rec.split;
        let stored = read_pgm(&dir.join(&rec.file))?;
        let rendered: Vec<u8> = sample.image.iter().map(|&v| quantize_u8(v)).collect();
        if stored != rendered {
            return Err(DeidError::Corrupt(format!(
                "{}: pixels disagree with stored generative factors",
                rec.file
            )));
        }
        samples.push(sample);
    }
    samples.sort_by_key(|s| s.sample_id);
    Ok(Corpus {
        samples,
        n_patients: meta.n_patients,
        images_per_patient: meta.images_per_patient,
        train_patients: meta.train_patients,
        val_patients: meta.val_patients,
        test_patients: meta.test_patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_corpus;
    use numcore::Rng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(6, 3, 0.5, &Rng::new(5)).unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.samples.len(), corpus.samples.len());
        assert_eq!(loaded.train_patients, corpus.train_patients);
        for (a, b) in corpus.samples.iter().zip(&loaded.samples) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupted_pixels_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(4, 2, 0.5, &Rng::new(6)).unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let victim = dir.path().join("sample_00003.pgm");
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] = bytes[last].wrapping_add(17);
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(DeidError::Corrupt(_))));
    }

    #[test]
    fn rejects_malformed_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P2\n64 64\n255\n").unwrap();
        assert!(read_pgm(&p).is_err());
        fs::write(&p, b"P5\n64 64\n255\n\x00\x01").unwrap();
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn quantization_boundaries() {
        assert_eq!(quantize_u8(-0.5), 0);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(2.0), 255);
        assert_eq!(quantize_u8(0.5), 128);
    }
}
