use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::InputShape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        })
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Parse(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub class: usize,
    pub split: SplitTag,
}

/// Dataset index: one `path<TAB>class_index<TAB>split_tag` line per sample.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, class, split] = fields[..] else {
                return Err(Error::Parse(format!("manifest line {}: expected 3 tab-separated fields", n + 1)));
            };
            let class = class
                .parse()
                .map_err(|_| Error::Parse(format!("manifest line {}: bad class index {class:?}", n + 1)))?;
            records.push(ManifestRecord { path: path.to_owned(), class, split: split.parse()? });
        }
        Ok(Self { records })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{}\t{}\t{}\n", r.path, r.class, r.split)).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.records.iter().map(|r| r.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Turns manifest records into input arrays.
pub trait Loader: Send + Sync {
    fn shape(&self) -> InputShape;
    fn load(&self, record: &ManifestRecord) -> Result<Vec<f64>>;
}

/// Reads images relative to a root directory as channel-major RGB in `[0, 1]`.
#[cfg(feature = "images")]
#[derive(Debug, Clone)]
pub struct ImageDirLoader {
    pub root: std::path::PathBuf,
    pub height: usize,
    pub width: usize,
}

#[cfg(feature = "images")]
impl Loader for ImageDirLoader {
    fn shape(&self) -> InputShape {
        InputShape::Image { channels: 3, height: self.height, width: self.width }
    }

    fn load(&self, record: &ManifestRecord) -> Result<Vec<f64>> {
        let path = self.root.join(&record.path);
        let img = image::open(&path)
            .map_err(|e| Error::data(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
            }
        }
        if (h, w) == (self.height, self.width) {
            Ok(out)
        } else {
            Ok(super::bilinear_resize(&out, 3, h, w, self.height, self.width))
        }
    }
}
