use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Labeled/unlabeled partition of a training set.
///
/// Text form:
///
/// ```text
/// seed=<int> ratio=<float>
/// [labeled]
/// <id>
/// [unlabeled]
/// <id>
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

/// Number of labeled ids for `ratio` of `n`, rounding halves up.
pub fn labeled_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 0.5).floor() as usize
}

/// Shuffle `ids` with a seed-keyed stream and label the first `round(ratio * N)`.
///
/// Input order does not matter: ids are sorted before shuffling, and each
/// section of the manifest is listed in sorted order.
pub fn make_ssl_split(ids: &[String], ratio: f64, seed: u64) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("split ratio must be in (0, 1], got {ratio}")));
    }
    if ids.is_empty() {
        return Err(Error::Data("cannot split an empty id list".into()));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Data(format!("duplicate id {dup:?} in split input")));
    }

    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let k = labeled_count(ratio, order.len()).min(order.len());
    let mut labeled_ids = order[..k].to_vec();
    let mut unlabeled_ids = order[k..].to_vec();
    labeled_ids.sort();
    unlabeled_ids.sort();
    Ok(SplitManifest {
        labeled_ids,
        unlabeled_ids,
        seed,
        ratio,
    })
}

impl SplitManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!("seed={} ratio={}\n[labeled]\n", self.seed, self.ratio);
        for id in &self.labeled_ids {
            out.push_str(id);
            out.push('\n');
        }
        out.push_str("[unlabeled]\n");
        for id in &self.unlabeled_ids {
            out.push_str(id);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty split manifest".into()))?;
        let mut seed = None;
        let mut ratio = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("seed", v)) => seed = v.parse::<u64>().ok(),
                Some(("ratio", v)) => ratio = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        let (seed, ratio) = match (seed, ratio) {
            (Some(s), Some(r)) => (s, r),
            _ => return Err(Error::Data(format!("bad manifest header {header:?}"))),
        };

        enum Section {
            None,
            Labeled,
            Unlabeled,
        }
        let mut section = Section::None;
        let mut labeled_ids = Vec::new();
        let mut unlabeled_ids = Vec::new();
        for line in lines {
            let line = line.trim();
            match line {
                "" => continue,
                "[labeled]" => section = Section::Labeled,
                "[unlabeled]" => section = Section::Unlabeled,
                id => match section {
                    Section::Labeled => labeled_ids.push(id.to_string()),
                    Section::Unlabeled => unlabeled_ids.push(id.to_string()),
                    Section::None => {
                        return Err(Error::Data(format!("id {id:?} outside any manifest section")))
                    }
                },
            }
        }
        let labeled: HashSet<_> = labeled_ids.iter().collect();
        if let Some(id) = unlabeled_ids.iter().find(|id| labeled.contains(id)) {
            return Err(Error::Data(format!("id {id:?} is both labeled and unlabeled")));
        }
        Ok(Self {
            labeled_ids,
            unlabeled_ids,
            seed,
            ratio,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
