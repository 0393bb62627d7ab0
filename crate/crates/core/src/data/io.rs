use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{EhrDataset, PatientRecord, Vocabulary};
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.json";
pub const PATIENTS_FILE: &str = "patients.jsonl";
pub const PATIENTS_GZ_FILE: &str = "patients.jsonl.gz";

/// Loads a dataset directory holding `vocab.json` and `patients.jsonl`
/// (or `patients.jsonl.gz`).
pub fn load_dataset(dir: &Path) -> Result<EhrDataset> {
    let vocab_path = dir.join(VOCAB_FILE);
    if !vocab_path.is_file() {
        return Err(Error::Dataset(format!(
            "missing vocabulary file {}",
            vocab_path.display()
        )));
    }
    let vocab = read_vocab(&vocab_path)?;
    let plain = dir.join(PATIENTS_FILE);
    let gz = dir.join(PATIENTS_GZ_FILE);
    let path = if plain.is_file() {
        plain
    } else if gz.is_file() {
        gz
    } else {
        return Err(Error::Dataset(format!(
            "no {PATIENTS_FILE} or {PATIENTS_GZ_FILE} in {}",
            dir.display()
        )));
    };
    let patients = load_patients_file(&path, vocab.len())?;
    EhrDataset::new(vocab, patients)
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: HashMap<String, usize> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut codes = vec![None; map.len()];
    for (code, idx) in map {
        match codes.get_mut(idx) {
            Some(slot @ None) => *slot = Some(code),
            Some(Some(other)) => {
                return Err(Error::Dataset(format!(
                    "{}: codes {other:?} and {code:?} share index {idx}",
                    path.display()
                )))
            }
            None => {
                return Err(Error::Dataset(format!(
                    "{}: index {idx} of code {code:?} is not dense in 0..{}",
                    path.display(),
                    codes.len()
                )))
            }
        }
    }
    Vocabulary::new(codes.into_iter().map(|c| c.expect("dense")).collect())
}

/// Reads a patients file (gzip when the name ends in `.gz`), checking each
/// line against a vocabulary of `d` codes. Visits are sorted and
/// de-duplicated.
pub fn load_patients_file(path: &Path, d: usize) -> Result<Vec<PatientRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.visits.is_empty() {
            return Err(parse_err(
                lineno,
                format!("patient {:?} has an empty visit list", rec.patient_id),
            ));
        }
        if let Some(bad) = rec.visits.iter().flatten().find(|i| **i >= d) {
            return Err(parse_err(
                lineno,
                format!("disease index {bad} out of range for {d} codes"),
            ));
        }
        out.push(PatientRecord::new(rec.patient_id, rec.visits));
    }
    Ok(out)
}

/// Writes `vocab.json` and the patients file into `dir`, creating it.
pub fn save_dataset(ds: &EhrDataset, dir: &Path, gzip: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    let mut vocab = serde_json::Map::new();
    for (i, c) in ds.vocab().codes().iter().enumerate() {
        vocab.insert(c.clone(), i.into());
    }
    let mut text = serde_json::to_string(&vocab).expect("vocab serializes");
    text.push('\n');
    fs::write(&vocab_path, text).map_err(|e| Error::io(&vocab_path, e))?;

    let (path, stale) = if gzip {
        (dir.join(PATIENTS_GZ_FILE), dir.join(PATIENTS_FILE))
    } else {
        (dir.join(PATIENTS_FILE), dir.join(PATIENTS_GZ_FILE))
    };
    // the loader prefers the plain file; drop a leftover of the other kind
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        for rec in ds.patients() {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    };
    if gzip {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        write(&mut enc).map_err(|e| Error::io(&path, e))?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| Error::io(&path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        write(&mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(dir.to_path_buf())
}
