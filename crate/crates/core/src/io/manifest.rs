//! Dataset manifests and patient-level stratified splitting.
//!
//! A manifest is a CSV file. Leading `# key = value` comment lines carry the
//! generation and split settings; the table has the columns
//! `patient_id,grade,split,image,mask` with paths relative to the manifest.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::phantom::{generate_phantom, grade_name, parse_grade, CaseRecord, PhantomSpec};
use super::{read_volume, write_volume};
use crate::config::KvConfig;
use crate::error::{Error, FormatError, Result};
use crate::models::{HGG, LGG};
use crate::preprocess::{brain_mask, zscore_normalize};
use crate::seed::derive_seed;

pub const MANIFEST_HEADER: &str = "patient_id,grade,split,image,mask";
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub grade: usize,
    pub split: Option<Split>,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    /// Generation and split settings.
    pub echo: KvConfig,
    pub entries: Vec<ManifestEntry>,
}

fn text_err(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Text {
        line,
        message: message.into(),
    }
}

impl DatasetManifest {
    /// Rejects duplicate patients and partially assigned splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.patient_id.as_str()) {
                return Err(Error::Data(format!("patient `{}` appears twice", e.patient_id)));
            }
        }
        let assigned = self.entries.iter().filter(|e| e.split.is_some()).count();
        if assigned != 0 && assigned != self.entries.len() {
            return Err(Error::Data(format!(
                "{assigned} of {} patients have a split assignment",
                self.entries.len()
            )));
        }
        Ok(())
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(which))
    }

    pub fn count(&self, which: Option<Split>, grade: usize) -> usize {
        self.entries
            .iter()
            .filter(|e| e.grade == grade && (which.is_none() || e.split == which))
            .count()
    }

    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        for line in self.echo.to_text().lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let image = e.image.to_string_lossy();
            let mask = e.mask.to_string_lossy();
            for field in [e.patient_id.as_str(), &image, &mask] {
                if field.is_empty() || field.contains([',', '\n', '\r', '#']) {
                    return Err(Error::Data(format!("manifest field `{field}` is empty or contains , # or a newline")));
                }
            }
            let split = e.split.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{split},{image},{mask}\n", e.patient_id, grade_name(e.grade)));
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, FormatError> {
        let mut echo_text = String::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((_, line)) = lines.next_if(|(_, l)| l.starts_with('#')) {
            echo_text.push_str(line[1..].trim_start());
            echo_text.push('\n');
        }
        let echo = KvConfig::parse(&echo_text)?;
        match lines.next() {
            Some((_, MANIFEST_HEADER)) => {}
            Some((i, other)) => return Err(text_err(i + 1, format!("expected header `{MANIFEST_HEADER}`, found `{other}`"))),
            None => return Err(text_err(1, "missing header")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(text_err(line_no, format!("expected 5 fields, found {}", f.len())));
            }
            if f[0].is_empty() || f[3].is_empty() || f[4].is_empty() {
                return Err(text_err(line_no, "empty patient id or path"));
            }
            let grade = parse_grade(f[1]).map_err(|e| text_err(line_no, e.to_string()))?;
            let split = match f[2] {
                "train" => Some(Split::Train),
                "val" => Some(Split::Val),
                "" => None,
                other => return Err(text_err(line_no, format!("unknown split `{other}`"))),
            };
            entries.push(ManifestEntry {
                patient_id: f[0].to_string(),
                grade,
                split,
                image: PathBuf::from(f[3]),
                mask: PathBuf::from(f[4]),
            });
        }
        let manifest = DatasetManifest { echo, entries };
        manifest.validate().map_err(|e| text_err(0, e.to_string()))?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_csv(&text)?)
    }
}

/// Assigns every patient to train or validation, class by class: within a
/// class, patients are ordered by id, shuffled with `seed` and the first
/// `round(n * train_fraction)` go to training. Each class keeps at least one
/// patient on each side.
pub fn stratified_split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    manifest.validate()?;
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut out = manifest.clone();
    for grade in [HGG, LGG] {
        let mut members: Vec<usize> = (0..out.entries.len()).filter(|&i| out.entries[i].grade == grade).collect();
        let n = members.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "stratified split needs at least 2 {} patients, found {n}",
                grade_name(grade)
            )));
        }
        members.sort_by(|&a, &b| out.entries[a].patient_id.cmp(&out.entries[b].patient_id));
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, grade as u64])));
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        for (k, &i) in members.iter().enumerate() {
            out.entries[i].split = Some(if k < n_train { Split::Train } else { Split::Val });
        }
    }
    out.echo.set("split.train_fraction", train_fraction);
    out.echo.set("split.seed", seed);
    Ok(out)
}

/// Generates `n_hgg + n_lgg` phantoms into `dir/cases/` and writes
/// `dir/manifest.csv` (without split assignment).
pub fn write_phantom_dataset(dir: impl AsRef<Path>, spec: &PhantomSpec, n_hgg: usize, n_lgg: usize) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let cases = dir.join("cases");
    std::fs::create_dir_all(&cases).map_err(|e| Error::io(&cases, e))?;
    let mut manifest = DatasetManifest::default();
    crate::models::nest(&mut manifest.echo, "phantom", &spec.to_kv());
    manifest.echo.set("phantom.n_hgg", n_hgg);
    manifest.echo.set("phantom.n_lgg", n_lgg);
    let grades = std::iter::repeat_n(HGG, n_hgg).chain(std::iter::repeat_n(LGG, n_lgg));
    for (index, grade) in grades.enumerate() {
        let case = generate_phantom(spec, grade, index as u64)?;
        let image = PathBuf::from("cases").join(format!("{}_image.vvol", case.patient_id));
        let mask = PathBuf::from("cases").join(format!("{}_mask.vvol", case.patient_id));
        write_volume(dir.join(&image), &case.image)?;
        write_volume(dir.join(&mask), &case.mask)?;
        manifest.entries.push(ManifestEntry {
            patient_id: case.patient_id,
            grade,
            split: None,
            image,
            mask,
        });
    }
    manifest.save(dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Reads one case relative to `base` (the manifest's directory), with the
/// image z-score normalized inside its brain mask when `normalize` is set.
pub fn load_case(base: impl AsRef<Path>, entry: &ManifestEntry, normalize: bool) -> Result<CaseRecord> {
    let base = base.as_ref();
    let mut image = read_volume(base.join(&entry.image))?;
    let mask = read_volume(base.join(&entry.mask))?;
    if image.dims() != mask.dims() || mask.channels() != 1 {
        return Err(Error::Data(format!(
            "{}: image {:?} and mask {:?} do not match",
            entry.patient_id,
            image.shape(),
            mask.shape()
        )));
    }
    if normalize {
        image = zscore_normalize(&image, &brain_mask(&image))?.volume;
    }
    Ok(CaseRecord {
        patient_id: entry.patient_id.clone(),
        image,
        mask,
        grade: entry.grade,
    })
}
