//! Corpus manifest: one `path<TAB>city<TAB>year<TAB>weekday` line per day file.
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::dayfile::{write_day_file, DayFileReader};
use super::generator::{build_layout, day_calendar, generate_day, GeneratorConfig};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub path: PathBuf,
    pub city: String,
    pub year: u16,
    pub weekday: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn new(entries: Vec<CorpusEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cities(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.city.as_str()).collect()
    }

    pub fn years(&self) -> BTreeSet<u16> {
        self.entries.iter().map(|e| e.year).collect()
    }

    pub fn weekdays(&self) -> BTreeSet<u8> {
        self.entries.iter().map(|e| e.weekday).collect()
    }

    /// Entries of one city, in manifest order.
    pub fn city(&self, name: &str) -> CorpusManifest {
        Self::new(self.entries.iter().filter(|e| e.city == name).cloned().collect())
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            if !line.trim().is_empty() && !line.starts_with('#') {
                let err = |msg: String| Error::Parse {
                    what: "manifest",
                    offset,
                    msg,
                };
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 4 {
                    return Err(err(format!("expected 4 tab-separated fields, got {}", f.len())));
                }
                let path = Path::new(f[0]);
                entries.push(CorpusEntry {
                    path: if path.is_absolute() {
                        path.to_owned()
                    } else {
                        base.join(path)
                    },
                    city: f[1].to_owned(),
                    year: f[2].parse().map_err(|e| err(format!("year {:?}: {e}", f[2])))?,
                    weekday: f[3]
                        .parse()
                        .ok()
                        .filter(|d| *d < 7)
                        .ok_or_else(|| err(format!("weekday {:?} is not in 0..=6", f[3])))?,
                });
            }
            offset += line.len() as u64 + 1;
        }
        Ok(Self { entries })
    }

    /// Reads a manifest and checks that every file exists, parses, and agrees
    /// with its line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, base)?;
        m.verify()?;
        Ok(m)
    }

    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            let r = DayFileReader::open(&e.path)?;
            let h = r.header();
            if h.year != e.year || h.day_of_week != e.weekday {
                return Err(Error::InvalidConfig(format!(
                    "{}: header says year {} weekday {}, manifest says {} {}",
                    e.path.display(),
                    h.year,
                    h.day_of_week,
                    e.year,
                    e.weekday
                )));
            }
        }
        Ok(())
    }

    /// Writes the manifest with paths relative to `path`'s directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut text = String::new();
        for e in &self.entries {
            let p = e.path.strip_prefix(base).unwrap_or(&e.path);
            writeln!(text, "{}\t{}\t{}\t{}", p.display(), e.city, e.year, e.weekday).unwrap();
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Generates `days` files per city under `out/corpus/<city>/<year>/<weekday>_<n>.t4cd`,
/// static maps under `out/static/<city>.t4cs`, and `out/manifest.tsv`.
pub fn write_corpus(config: &GeneratorConfig, days: usize, out: &Path) -> Result<CorpusManifest> {
    let mut entries = Vec::new();
    for (ci, city) in config.cities.iter().enumerate() {
        let layout = build_layout(city, config.height, config.width);
        layout
            .map
            .write(&out.join("static").join(format!("{}.t4cs", city.name)))?;
        for d in 0..days {
            let (year, weekday) = day_calendar(d);
            let path = out
                .join("corpus")
                .join(&city.name)
                .join(year.to_string())
                .join(format!("{weekday}_{d}.t4cd"));
            let (header, payload) = generate_day(config, ci, &layout, d)?;
            write_day_file(&path, &header, &payload)?;
            entries.push(CorpusEntry {
                path,
                city: city.name.clone(),
                year,
                weekday,
            });
        }
    }
    let manifest = CorpusManifest::new(entries);
    manifest.save(&out.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_resolves_relative_paths_and_rejects_bad_lines() {
        let m = CorpusManifest::parse("a/b.t4cd\tMEL\t2019\t3\n/x.t4cd\tMOS\t2020\t6\n", Path::new("/base")).unwrap();
        assert_eq!(m.entries[0].path, PathBuf::from("/base/a/b.t4cd"));
        assert_eq!(m.entries[1].path, PathBuf::from("/x.t4cd"));
        assert_eq!(m.cities().into_iter().collect::<Vec<_>>(), ["MEL", "MOS"]);
        assert!(matches!(
            CorpusManifest::parse("a\tMEL\t2019\t3\nb\tMEL\t2019\t7\n", Path::new(".")),
            Err(Error::Parse { offset: 13, .. })
        ));
        assert!(CorpusManifest::parse("a\tMEL\t2019\n", Path::new(".")).is_err());
    }
}
