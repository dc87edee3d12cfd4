use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;

const REQUIRED: [&str; 5] = ["image_path", "caption", "category", "avg_rating", "num_ratings"];

/// One screenshot with its metadata and rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenSample {
    pub image_path: String,
    pub caption: String,
    pub category: String,
    pub avg_rating: f64,
    pub num_ratings: u64,
}

impl ScreenSample {
    /// Caption and category joined by the literal separator token.
    pub fn text(&self) -> String {
        format!("{} {} {}", self.caption, crate::text::SEP_TOKEN, self.category)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// 80/10/10 split from a hash of the sample key and the seed. Each sample's
/// split depends on nothing but its own key.
pub fn assign_split(key: &str, seed: u64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    match bucket {
        0..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestSchema {
    Csv,
    Jsonl,
}

impl ManifestSchema {
    /// Guess from the file extension (`.jsonl`/`.json` vs anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => ManifestSchema::Jsonl,
            _ => ManifestSchema::Csv,
        }
    }
}

/// Row accounting for one manifest load.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub input_rows: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub reasons: BTreeMap<String, usize>,
}

impl LoadReport {
    fn reject(&mut self, reason: &str) {
        self.rejected += 1;
        *self.reasons.entry(reason.to_string()).or_default() += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub samples: Vec<ScreenSample>,
    pub splits: Vec<Split>,
    /// Directory that relative image paths resolve against.
    pub base_dir: PathBuf,
    pub source: Option<PathBuf>,
    pub seed: u64,
}

impl Manifest {
    pub fn new(samples: Vec<ScreenSample>, base_dir: PathBuf, seed: u64) -> Self {
        let splits = samples.iter().map(|s| assign_split(&s.image_path, seed)).collect();
        Self {
            samples,
            splits,
            base_dir,
            source: None,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolve(&self, sample: &ScreenSample) -> PathBuf {
        let p = Path::new(&sample.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Indices of the samples in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Put every sample in one split (used when a tiny corpus is trained on in full).
    pub fn with_all_in(mut self, split: Split) -> Self {
        self.splits = vec![split; self.samples.len()];
        self
    }
}

struct RawRow {
    image_path: Option<String>,
    caption: Option<String>,
    category: Option<String>,
    avg_rating: Option<String>,
    num_ratings: Option<String>,
}

fn validate(raw: RawRow, base: &Path, report: &mut LoadReport) -> Option<ScreenSample> {
    let (Some(image_path), Some(caption), Some(category), Some(rating), Some(count)) =
        (raw.image_path, raw.caption, raw.category, raw.avg_rating, raw.num_ratings)
    else {
        report.reject("malformed_row");
        return None;
    };
    let Ok(avg_rating) = rating.trim().parse::<f64>() else {
        report.reject("unparsable_rating");
        return None;
    };
    if !(MIN_RATING..=MAX_RATING).contains(&avg_rating) {
        report.reject("rating_out_of_range");
        return None;
    }
    let count = count.trim();
    let num_ratings = match count.parse::<u64>() {
        Ok(v) => v,
        Err(_) => match count.parse::<f64>() {
            Ok(f) if f >= 0.0 && f.fract() == 0.0 => f as u64,
            _ => {
                report.reject("unparsable_num_ratings");
                return None;
            }
        },
    };
    let resolved = if Path::new(&image_path).is_absolute() {
        PathBuf::from(&image_path)
    } else {
        base.join(&image_path)
    };
    if !resolved.is_file() {
        report.reject("missing_image");
        return None;
    }
    Some(ScreenSample {
        image_path,
        caption,
        category,
        avg_rating,
        num_ratings,
    })
}

fn json_field(obj: &serde_json::Map<String, serde_json::Value>, key: &str) -> Option<String> {
    match obj.get(key)? {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Null => None,
        other => Some(other.to_string()),
    }
}

/// Load and validate a manifest. Invalid rows are rejected and tallied in
/// the report, never silently dropped; a missing required column aborts.
pub fn load_manifest(path: &Path, schema: ManifestSchema, seed: u64) -> Result<(Manifest, LoadReport)> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    let mut samples = Vec::new();

    match schema {
        ManifestSchema::Csv => {
            let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
            let headers = rdr.headers()?.clone();
            let mut col = BTreeMap::new();
            for name in REQUIRED {
                let idx = headers
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| Error::Schema { column: name.into() })?;
                col.insert(name, idx);
            }
            for rec in rdr.records() {
                report.input_rows += 1;
                let rec = match rec {
                    Ok(r) => r,
                    Err(_) => {
                        report.reject("malformed_row");
                        continue;
                    }
                };
                let get = |name: &str| rec.get(col[name]).map(str::to_string);
                let raw = RawRow {
                    image_path: get("image_path"),
                    caption: get("caption"),
                    category: get("category"),
                    avg_rating: get("avg_rating"),
                    num_ratings: get("num_ratings"),
                };
                if let Some(s) = validate(raw, &base, &mut report) {
                    samples.push(s);
                }
            }
        }
        ManifestSchema::Jsonl => {
            let mut checked_keys = false;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                report.input_rows += 1;
                let obj = match serde_json::from_str::<serde_json::Value>(&line) {
                    Ok(serde_json::Value::Object(o)) => o,
                    _ => {
                        report.reject("malformed_row");
                        continue;
                    }
                };
                if !checked_keys {
                    if let Some(missing) = REQUIRED.iter().find(|k| !obj.contains_key(**k)) {
                        return Err(Error::Schema {
                            column: missing.to_string(),
                        });
                    }
                    checked_keys = true;
                }
                let raw = RawRow {
                    image_path: json_field(&obj, "image_path"),
                    caption: json_field(&obj, "caption"),
                    category: json_field(&obj, "category"),
                    avg_rating: json_field(&obj, "avg_rating"),
                    num_ratings: json_field(&obj, "num_ratings"),
                };
                if let Some(s) = validate(raw, &base, &mut report) {
                    samples.push(s);
                }
            }
        }
    }
    report.accepted = samples.len();
    let mut m = Manifest::new(samples, base, seed);
    m.source = Some(path.to_path_buf());
    Ok((m, report))
}

/// Write samples as a CSV manifest with the canonical header.
pub(crate) fn write_csv(samples: &[ScreenSample], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn well_formed_csv() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a.png", "b.png", "c.png"] {
            touch(dir.path(), n);
        }
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "image_path,caption,category,avg_rating,num_ratings\n\
             a.png,login screen,social,4.5,10\n\
             b.png,\"cart, checkout\",shopping,3.0,2\n\
             c.png,,tools,1,0\n",
        )
        .unwrap();
        let (m, r) = load_manifest(&path, ManifestSchema::Csv, 0).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!((r.accepted, r.rejected, r.input_rows), (3, 0, 3));
        assert_eq!(m.samples[1].caption, "cart, checkout");
        assert_eq!(m.samples[2].caption, "");
    }

    #[test]
    fn out_of_range_rating_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "image_path,caption,category,avg_rating,num_ratings\na.png,x,y,7.2,3\na.png,x,y,abc,3\na.png,x,y,4,3\n",
        )
        .unwrap();
        let (m, r) = load_manifest(&path, ManifestSchema::Csv, 0).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(r.reasons.get("rating_out_of_range"), Some(&1));
        assert_eq!(r.reasons.get("unparsable_rating"), Some(&1));
        assert_eq!(r.accepted + r.rejected, r.input_rows);
    }

    #[test]
    fn missing_column_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "image_path,caption,avg_rating,num_ratings\n").unwrap();
        match load_manifest(&path, ManifestSchema::Csv, 0) {
            Err(Error::Schema { column }) => assert_eq!(column, "category"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn csv_and_jsonl_agree() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "b.png");
        let csv_path = dir.path().join("m.csv");
        fs::write(
            &csv_path,
            "image_path,caption,category,avg_rating,num_ratings\na.png,hello world,social,4.25,12\nb.png,settings,tools,2,1\n",
        )
        .unwrap();
        let jsonl_path = dir.path().join("m.jsonl");
        fs::write(
            &jsonl_path,
            "{\"image_path\":\"a.png\",\"caption\":\"hello world\",\"category\":\"social\",\"avg_rating\":4.25,\"num_ratings\":12}\n\
             {\"image_path\":\"b.png\",\"caption\":\"settings\",\"category\":\"tools\",\"avg_rating\":\"2\",\"num_ratings\":1}\n",
        )
        .unwrap();
        let (a, _) = load_manifest(&csv_path, ManifestSchema::Csv, 9).unwrap();
        let (b, _) = load_manifest(&jsonl_path, ManifestSchema::Jsonl, 9).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn missing_image_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "image_path,caption,category,avg_rating,num_ratings\nnope.png,x,y,3,1\n").unwrap();
        let (m, r) = load_manifest(&path, ManifestSchema::Csv, 0).unwrap();
        assert!(m.is_empty());
        assert_eq!(r.reasons.get("missing_image"), Some(&1));
    }

    #[test]
    fn split_is_per_key_and_seeded() {
        let keys: Vec<String> = (0..200).map(|i| format!("img_{i}.png")).collect();
        let a: Vec<Split> = keys.iter().map(|k| assign_split(k, 1)).collect();
        let b: Vec<Split> = keys.iter().map(|k| assign_split(k, 1)).collect();
        assert_eq!(a, b);
        let train = a.iter().filter(|s| **s == Split::Train).count();
        assert!((130..=185).contains(&train), "{train}");
        let mut changed = keys.clone();
        changed[17] = "renamed.png".into();
        let c: Vec<Split> = changed.iter().map(|k| assign_split(k, 1)).collect();
        for i in 0..200 {
            if i != 17 {
                assert_eq!(a[i], c[i]);
            }
        }
    }
}
