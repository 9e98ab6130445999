//! Two-stage epoch sampling: stratified file draw, then a local shuffle of the
//! sample start indices inside each file.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::dayfile::DayFileReader;
use super::manifest::{CorpusEntry, CorpusManifest};
use crate::error::{Error, Result};
use crate::models::{HISTORY, HORIZON};

/// Frames per sample: 12 inputs followed by 6 targets.
pub const WINDOW: usize = HISTORY + HORIZON;
pub const DEFAULT_INDICES_PER_FILE: usize = 240;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanConfig {
    /// Start indices `0..indices_per_file`, clipped to the windows the file admits.
    pub indices_per_file: usize,
    /// Files drawn per epoch; `None` draws every file.
    pub files_per_epoch: Option<usize>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            indices_per_file: DEFAULT_INDICES_PER_FILE,
            files_per_epoch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlannedFile {
    /// Position in the manifest.
    pub file: usize,
    pub entry: CorpusEntry,
    pub indices: Vec<u16>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpochPlan {
    pub files: Vec<PlannedFile>,
}

impl EpochPlan {
    pub fn samples(&self) -> usize {
        self.files.iter().map(|f| f.indices.len()).sum()
    }

    /// `(manifest position, start index)` in consumption order.
    pub fn sequence(&self) -> Vec<(usize, u16)> {
        self.files
            .iter()
            .flat_map(|f| f.indices.iter().map(move |&i| (f.file, i)))
            .collect()
    }
}

/// Valid start indices of one file.
pub fn valid_indices(timesteps: usize, indices_per_file: usize) -> Vec<u16> {
    let windows = (timesteps + 1).saturating_sub(WINDOW);
    (0..windows.min(indices_per_file) as u16).collect()
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Group<'a> {
    City(&'a str),
    Year(u16),
    Weekday(u8),
}

fn groups(e: &CorpusEntry) -> [Group<'_>; 3] {
    [Group::City(&e.city), Group::Year(e.year), Group::Weekday(e.weekday)]
}

impl Group<'_> {
    fn error(self) -> Error {
        let (attribute, value) = match self {
            Group::City(c) => ("city", c.to_owned()),
            Group::Year(y) => ("year", y.to_string()),
            Group::Weekday(d) => ("weekday", d.to_string()),
        };
        Error::MissingGroup { attribute, value }
    }
}

/// Stage 1 picks files without replacement so the picked set covers every city,
/// year and weekday present in the manifest; stage 2 permutes each file's
/// start indices independently.
pub fn plan_epoch(manifest: &CorpusManifest, seed: u64, config: PlanConfig) -> Result<EpochPlan> {
    if manifest.is_empty() {
        return Ok(EpochPlan::default());
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut rng);
    let k = config.files_per_epoch.unwrap_or(manifest.len()).min(manifest.len());
    let (mut picked, mut rest) = (order[..k].to_vec(), order[k..].to_vec());

    let entries = &manifest.entries;
    let mut count: BTreeMap<Group, usize> = BTreeMap::new();
    for e in entries {
        for g in groups(e) {
            count.entry(g).or_insert(0);
        }
    }
    for &i in &picked {
        for g in groups(&entries[i]) {
            *count.get_mut(&g).unwrap() += 1;
        }
    }
    let required: Vec<Group> = count.keys().copied().collect();
    for g in required {
        if count[&g] > 0 {
            continue;
        }
        // Swap in the first unpicked file of the missing group that can replace
        // a picked file whose groups all stay covered without it.
        let (incoming, outgoing) = rest
            .iter()
            .enumerate()
            .filter(|(_, &i)| groups(&entries[i]).contains(&g))
            .find_map(|(r, &i)| {
                let gain = groups(&entries[i]);
                picked
                    .iter()
                    .rposition(|&p| groups(&entries[p]).iter().all(|h| count[h] > 1 || gain.contains(h)))
                    .map(|p| (r, p))
            })
            .ok_or_else(|| g.error())?;
        let gain = groups(&entries[rest[incoming]]);
        for h in groups(&entries[picked[outgoing]]) {
            *count.get_mut(&h).unwrap() -= 1;
        }
        for h in gain {
            *count.get_mut(&h).unwrap() += 1;
        }
        std::mem::swap(&mut picked[outgoing], &mut rest[incoming]);
    }

    let mut files = Vec::with_capacity(picked.len());
    for i in picked {
        let entry = entries[i].clone();
        let t = DayFileReader::open(&entry.path)?.header().timesteps as usize;
        let mut indices = valid_indices(t, config.indices_per_file);
        if indices.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "{} has {t} frames, fewer than one {WINDOW}-frame window",
                entry.path.display()
            )));
        }
        indices.shuffle(&mut rng);
        files.push(PlannedFile {
            file: i,
            entry,
            indices,
        });
    }
    Ok(EpochPlan { files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_index_counts() {
        assert_eq!(valid_indices(288, 240).len(), 240);
        assert_eq!(valid_indices(288, 1000).len(), 271);
        assert_eq!(valid_indices(18, 240), vec![0]);
        assert!(valid_indices(17, 240).is_empty());
    }
}
