use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Whether cases of this split carry dense ground truth.
    pub fn has_ground_truth(self) -> bool {
        !matches!(self, Split::Train)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown split '{s}' (train, val, test)")))
    }
}

/// Case ids per split, stored as `train.txt`, `val.txt`, `test.txt` with one
/// id per line (`#` starts a comment).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn new(train: Vec<String>, val: Vec<String>, test: Vec<String>) -> Result<Self> {
        let m = Self { train, val, test };
        m.validate()?;
        Ok(m)
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Dataset(format!("case '{id}' listed more than once in the manifest")));
                }
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |split: Split| -> Result<Vec<String>> {
            let path = dir.join(format!("{}.txt", split.name()));
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
            Ok(text
                .lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect())
        };
        Self::new(read(Split::Train)?, read(Split::Val)?, read(Split::Test)?)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            let mut text = self.ids(split).join("\n");
            text.push('\n');
            fs::write(dir.join(format!("{}.txt", split.name())), text)?;
        }
        Ok(())
    }
}
