//! Datasets as `path[,class]` manifests or plain image directories.

use crate::pnm;
use anyhow::{bail, Context};
use favae_core::{ImageTensor, ValueRange};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: PathBuf,
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Entry paths are relative to this directory.
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm"))
}

impl DatasetManifest {
    /// Parse manifest text. Blank lines and `#` comments are skipped.
    pub fn parse(root: &Path, text: &str) -> anyhow::Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, class) = match line.rsplit_once(',') {
                Some((p, c)) => {
                    let c = c.trim().parse::<usize>().with_context(|| format!("line {}: class id {:?} is not a non-negative integer", i + 1, c.trim()))?;
                    (p.trim(), Some(c))
                }
                None => (line, None),
            };
            entries.push(Entry { path: PathBuf::from(path), class });
        }
        let m = DatasetManifest { root: root.to_path_buf(), entries };
        m.check_classes()?;
        Ok(m)
    }

    /// A manifest file, or a directory whose `.ppm`/`.pgm` files are taken
    /// in name order without classes.
    pub fn open(path: &Path) -> anyhow::Result<Self> {
        if path.is_dir() {
            let mut names: Vec<PathBuf> = std::fs::read_dir(path)
                .with_context(|| format!("cannot list {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .filter_map(|p| p.file_name().map(PathBuf::from))
                .collect();
            names.sort();
            if names.is_empty() {
                bail!("{} contains no .ppm or .pgm files", path.display());
            }
            return Ok(DatasetManifest { root: path.to_path_buf(), entries: names.into_iter().map(|path| Entry { path, class: None }).collect() });
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&root, &text).with_context(|| format!("invalid manifest {}", path.display()))
    }

    /// Class ids must be all present or all absent, and cover `0..K`.
    fn check_classes(&self) -> anyhow::Result<()> {
        let labeled = self.entries.iter().filter(|e| e.class.is_some()).count();
        if labeled == 0 {
            return Ok(());
        }
        if labeled != self.entries.len() {
            bail!("either every entry has a class id or none does ({labeled} of {} labeled)", self.entries.len());
        }
        let k = self.entries.iter().filter_map(|e| e.class).max().unwrap() + 1;
        let mut seen = vec![false; k];
        self.entries.iter().for_each(|e| seen[e.class.unwrap()] = true);
        if let Some(missing) = seen.iter().position(|s| !s) {
            bail!("class ids must be dense; {missing} is unused but {} appears", k - 1);
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.entries.iter().map(|e| e.class).collect()
    }

    pub fn full_path(&self, e: &Entry) -> PathBuf {
        self.root.join(&e.path)
    }

    /// Decode every entry into `range`.
    pub fn load(&self, range: ValueRange) -> anyhow::Result<Vec<ImageTensor>> {
        crate::fsutil::parallel_map(&self.entries, |e| {
            let p = self.full_path(e);
            let img = pnm::read(&p).with_context(|| format!("cannot load image {}", p.display()))?;
            img.into_image(range).with_context(|| format!("unusable image {}", p.display()))
        })
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_classes_and_comments() {
        let m = DatasetManifest::parse(Path::new("/d"), "# x\na.ppm,1\n\nb c.ppm, 0\n").unwrap();
        assert_eq!(m.labels(), vec![Some(1), Some(0)]);
        assert_eq!(m.full_path(&m.entries[1]), PathBuf::from("/d/b c.ppm"));
        assert!(DatasetManifest::parse(Path::new("."), "a.ppm,0\nb.ppm,2\n").is_err());
        assert!(DatasetManifest::parse(Path::new("."), "a.ppm,0\nb.ppm\n").is_err());
        assert!(DatasetManifest::parse(Path::new("."), "a.ppm,-1\n").is_err());
    }

    #[test]
    fn directory_listing_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.pgm", "a.ppm", "notes.txt"] {
            std::fs::write(dir.path().join(n), b"P5\n2 2\n255\n\x00\x01\x02\x03").unwrap();
        }
        let m = DatasetManifest::open(dir.path()).unwrap();
        let names: Vec<_> = m.entries.iter().map(|e| e.path.to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["a.ppm", "b.pgm"]);
        assert!(m.load(ValueRange::Unit).is_ok());
    }
}
