//! CSV output with a trailing metadata comment.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

/// Header, rows, then `# seed=<seed>, mode=<mode>[, key=value…]`.
pub fn csv_text(
    header: &[&str],
    rows: &[Vec<String>],
    seed: u64,
    mode: &str,
    extra: &[(&str, String)],
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let mut text = String::from_utf8(w.into_inner()?)?;
    text.push_str(&trailer(seed, mode, extra));
    Ok(text)
}

pub fn trailer(seed: u64, mode: &str, extra: &[(&str, String)]) -> String {
    let mut s = format!("# seed={seed}, mode={mode}");
    for (k, v) in extra {
        s.push_str(&format!(", {k}={v}"));
    }
    s.push('\n');
    s
}

/// Writes to `path`, creating parent directories, or to stdout.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailer_follows_rows() {
        let rows = vec![vec!["a".to_owned(), "1.5".to_owned()]];
        let text = csv_text(&["k", "v"], &rows, 7, "cold", &[("workers", "2".into())]).unwrap();
        assert_eq!(text, "k,v\na,1.5\n# seed=7, mode=cold, workers=2\n");
    }
}
