use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mgt::{load_mgt, save_mgt, DType, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField};

/// Integer segmentation labels on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "label map needs {} labels, got {}",
                grid.len(),
                labels.len()
            )));
        }
        Ok(LabelMap { grid, labels })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label_set(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.grid.dims().to_vec(), TensorData::U8(self.labels.clone())).expect("grid shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.data() {
            TensorData::U8(v) => LabelMap::new(Grid::new(t.shape())?, v.clone()),
            _ => Err(Error::Input(format!("label maps are stored as u8, found {}", t.dtype().name()))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Original,
    Augmented { component: usize, template: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ScalarField,
    pub class: usize,
    pub seg: Option<LabelMap>,
    pub split: Split,
    pub origin: Origin,
}

/// Images with class labels, optional label maps, split tags and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    grid: Grid,
    num_classes: usize,
    samples: Vec<Sample>,
}

impl LabeledImageSet {
    pub fn new(grid: Grid, num_classes: usize) -> Self {
        LabeledImageSet {
            grid,
            num_classes,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        self.grid.check_same(sample.image.grid(), "sample image")?;
        if let Some(seg) = &sample.seg {
            self.grid.check_same(seg.grid(), "sample label map")?;
        }
        if sample.class >= self.num_classes {
            return Err(Error::Input(format!(
                "class {} outside 0..{}",
                sample.class, self.num_classes
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Copy holding only the samples of one split.
    pub fn subset(&self, split: Split) -> LabeledImageSet {
        self.filtered(|s| s.split == split)
    }

    pub fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> LabeledImageSet {
        LabeledImageSet {
            grid: self.grid.clone(),
            num_classes: self.num_classes,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for s in &self.samples {
            h[s.class] += 1;
        }
        h
    }

    pub fn has_segmentations(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.seg.is_some())
    }

    /// Writes `manifest.csv` plus one MGT1 file per image and label map.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["file", "class", "split", "origin", "component", "template", "seg_file"])
            .map_err(|e| csv_err(&path, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            let file = format!("img_{i:05}.mgt");
            save_mgt(dir.join(&file), &Tensor::from_scalar_field(&s.image, DType::F64))?;
            let seg_file = match &s.seg {
                Some(seg) => {
                    let f = format!("seg_{i:05}.mgt");
                    save_mgt(dir.join(&f), &seg.to_tensor())?;
                    f
                }
                None => String::new(),
            };
            let (origin, comp, tmpl) = match s.origin {
                Origin::Original => ("original", String::new(), String::new()),
                Origin::Augmented { component, template } => {
                    ("augmented", component.to_string(), template.to_string())
                }
            };
            w.write_record([
                file,
                s.class.to_string(),
                s.split.name().to_string(),
                origin.to_string(),
                comp,
                tmpl,
                seg_file,
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.csv");
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(&path, e))?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let parse = |i: usize| -> Result<usize> {
                field(i)
                    .parse()
                    .map_err(|_| Error::Input(format!("{}: bad integer {:?} in column {i}", path.display(), field(i))))
            };
            let image = load_mgt(dir.join(field(0)))?.to_scalar_field()?;
            let seg = match field(6).as_str() {
                "" => None,
                f => Some(LabelMap::from_tensor(&load_mgt(dir.join(f))?)?),
            };
            let origin = match field(3).as_str() {
                "original" => Origin::Original,
                "augmented" => Origin::Augmented {
                    component: parse(4)?,
                    template: parse(5)?,
                },
                o => return Err(Error::Input(format!("unknown origin {o:?}"))),
            };
            samples.push(Sample {
                image,
                class: parse(1)?,
                seg,
                split: Split::parse(&field(2))?,
                origin,
            });
        }
        let first = samples
            .first()
            .ok_or_else(|| Error::Input(format!("{} lists no images", path.display())))?;
        let grid = first.image.grid().clone();
        let num_classes = samples.iter().map(|s| s.class).max().unwrap_or(0) + 1;
        let mut set = LabeledImageSet::new(grid, num_classes);
        for s in samples {
            set.push(s)?;
        }
        Ok(set)
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Per-class template images (index = class id) and optional label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub images: Vec<ScalarField>,
    pub labels: Option<Vec<LabelMap>>,
}

impl Templates {
    pub fn num_classes(&self) -> usize {
        self.images.len()
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, img) in self.images.iter().enumerate() {
            save_mgt(dir.join(format!("class_{k}.mgt")), &Tensor::from_scalar_field(img, DType::F64))?;
        }
        if let Some(labels) = &self.labels {
            for (k, l) in labels.iter().enumerate() {
                save_mgt(dir.join(format!("class_{k}_labels.mgt")), &l.to_tensor())?;
            }
        }
        Ok(())
    }

    /// Reads `class_0.mgt`, `class_1.mgt`, ... until the first gap.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        loop {
            let k = images.len();
            let p = dir.join(format!("class_{k}.mgt"));
            if !p.exists() {
                break;
            }
            images.push(load_mgt(&p)?.to_scalar_field()?);
            let lp = dir.join(format!("class_{k}_labels.mgt"));
            if lp.exists() {
                labels.push(LabelMap::from_tensor(&load_mgt(&lp)?)?);
            }
        }
        if images.is_empty() {
            return Err(Error::io(
                dir.join("class_0.mgt"),
                std::io::Error::from(std::io::ErrorKind::NotFound),
            ));
        }
        let labels = (labels.len() == images.len()).then_some(labels);
        Ok(Templates { images, labels })
    }
}

/// Stratified 70/15/15 split: within each class the samples are shuffled by
/// a generator seeded from `(seed, class)`. Depends only on the seed and
/// the class column, so the tag of an index never changes between runs.
pub fn assign_splits(classes: &[usize], seed: u64) -> Vec<Split> {
    let mut out = vec![Split::Train; classes.len()];
    let num_classes = classes.iter().copied().max().map_or(0, |m| m + 1);
    for k in 0..num_classes {
        let mut idx: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = (0.15 * n as f64).round() as usize;
        let n_test = (0.15 * n as f64).round() as usize;
        let n_train = n.saturating_sub(n_val + n_test);
        for (r, &i) in idx.iter().enumerate() {
            out[i] = if r < n_train {
                Split::Train
            } else if r < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

/// Split of one index for a fixed class column.
pub fn split_of(classes: &[usize], seed: u64, index: usize) -> Split {
    assign_splits(classes, seed)[index]
}
