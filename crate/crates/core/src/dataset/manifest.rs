use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// One dataset: its records plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub organ: String,
    pub role: Role,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.samples.iter().position(|s| s.prompt.trim().is_empty()) {
            return Err(Error::Record(format!(
                "{}: record {i} has an empty prompt",
                self.name
            )));
        }
        if self.role == Role::Unseen {
            if let Some(s) = self
                .samples
                .iter()
                .find(|s| matches!(s.split, Some(Split::Train | Split::Val)))
            {
                return Err(Error::State(format!(
                    "{}: unseen dataset has a {} record ({})",
                    self.name,
                    s.split.unwrap(),
                    s.image.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn is_split(&self) -> bool {
        self.samples.iter().any(|s| s.split.is_some())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = |s| self.records(s).count();
        (n(Split::Train), n(Split::Val), n(Split::Test))
    }
}

/// Target sizes for `n` records: round-half-up on train and val, remainder to test.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = ((fractions.0 * n as f64) + 0.5).floor() as usize;
    let train = train.min(n);
    let val = (((fractions.1 * n as f64) + 0.5).floor() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Assigns split labels with a seeded shuffle. Unseen datasets go entirely to test.
///
/// Re-splitting an already-labelled manifest requires `allow_resplit`.
pub fn split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
    allow_resplit: bool,
) -> Result<DatasetManifest> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({a}, {b}, {c}) must be in [0, 1] and sum to 1"
        )));
    }
    if manifest.is_split() && !allow_resplit {
        return Err(Error::State(format!(
            "{} is already split; pass the re-split override to reassign",
            manifest.name
        )));
    }
    let mut out = manifest.clone();
    let n = out.samples.len();
    if out.role == Role::Unseen {
        for s in &mut out.samples {
            s.split = Some(Split::Test);
        }
        return Ok(out);
    }
    let (train, val, _) = split_sizes(n, fractions);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &idx) in order.iter().enumerate() {
        out.samples[idx].split = Some(if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(out)
}
