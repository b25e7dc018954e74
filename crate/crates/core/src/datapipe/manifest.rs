use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::write_atomic;
use crate::config::Task;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Source and target files share stems and correspond one to one.
    #[serde(rename = "PAIRED_AB")]
    PairedAb,
    /// The two folders are unrelated collections.
    #[serde(rename = "UNPAIRED_AB")]
    UnpairedAb,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::PairedAb => "PAIRED_AB",
            Layout::UnpairedAb => "UNPAIRED_AB",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Folder of the source (`A`) or target (`B`) side.
    pub fn dir(self, root: &Path, target: bool) -> PathBuf {
        root.join(format!("{}{}", self.as_str(), if target { "B" } else { "A" }))
    }
}

/// File names, relative to their split folder.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub a: Vec<String>,
    pub b: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task: Task,
    pub layout: Layout,
    pub resolution: usize,
    /// Where the images came from; informational.
    pub source_dir: String,
    pub train: SplitFiles,
    pub test: SplitFiles,
}

pub fn stem(file: &str) -> &str {
    Path::new(file).file_stem().and_then(|s| s.to_str()).unwrap_or(file)
}

impl DatasetManifest {
    pub fn files(&self, split: Split) -> &SplitFiles {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// `(train, test)` image counts of the target side.
    pub fn split_sizes(&self) -> (usize, usize) {
        (self.train.b.len(), self.test.b.len())
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        write_atomic(&root.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// Checks the listing against the folders under `root`.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            let files = self.files(split);
            for (target, listed) in [(false, &files.a), (true, &files.b)] {
                let dir = split.dir(root, target);
                let on_disk = image_files(&dir)?;
                let listed_set: BTreeSet<&str> = listed.iter().map(String::as_str).collect();
                if listed_set.len() != listed.len() {
                    return Err(Error::Parse(format!("{}: duplicate entries in manifest", dir.display())));
                }
                if on_disk.iter().map(String::as_str).collect::<BTreeSet<_>>() != listed_set {
                    return Err(Error::Parse(format!(
                        "{}: {} files on disk, manifest lists {}",
                        dir.display(),
                        on_disk.len(),
                        listed.len()
                    )));
                }
            }
            if self.layout == Layout::PairedAb {
                let sa: Vec<&str> = files.a.iter().map(|f| stem(f)).collect();
                let sb: Vec<&str> = files.b.iter().map(|f| stem(f)).collect();
                if sa != sb {
                    return Err(Error::Parse(format!("{} split: source and target stems differ", split.as_str())));
                }
            }
        }
        Ok(())
    }
}

/// Sorted image file names in `dir`, ignoring masks and other files.
pub fn image_files(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg" | "bmp")) {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(root: &Path) -> DatasetManifest {
        let names = |n: usize| (0..n).map(|i| format!("s{i}.png")).collect::<Vec<_>>();
        for (split, n) in [(Split::Train, 3), (Split::Test, 1)] {
            for target in [false, true] {
                let d = split.dir(root, target);
                fs::create_dir_all(&d).unwrap();
                for f in names(n) {
                    fs::write(d.join(f), b"x").unwrap();
                }
            }
        }
        DatasetManifest {
            name: "toy".into(),
            task: Task::Sketch2Photo,
            layout: Layout::PairedAb,
            resolution: 8,
            source_dir: String::new(),
            train: SplitFiles { a: names(3), b: names(3) },
            test: SplitFiles { a: names(1), b: names(1) },
        }
    }

    #[test]
    fn round_trip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path());
        m.save(dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        assert_eq!(back.split_sizes(), (3, 1));
        assert!(fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap().contains("PAIRED_AB"));
    }

    #[test]
    fn extra_file_fails_verification() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy(dir.path());
        fs::write(Split::Train.dir(dir.path(), true).join("extra.png"), b"x").unwrap();
        assert!(m.verify(dir.path()).is_err());
        // masks are not images
        fs::remove_file(Split::Train.dir(dir.path(), true).join("extra.png")).unwrap();
        fs::write(Split::Train.dir(dir.path(), true).join("s0.mask"), b"x").unwrap();
        m.verify(dir.path()).unwrap();
    }

    #[test]
    fn paired_layout_requires_matching_stems() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = toy(dir.path());
        let d = Split::Test.dir(dir.path(), false);
        fs::rename(d.join("s0.png"), d.join("other.png")).unwrap();
        m.test.a = vec!["other.png".into()];
        assert!(m.verify(dir.path()).is_err());
        m.layout = Layout::UnpairedAb;
        m.verify(dir.path()).unwrap();
    }
}
