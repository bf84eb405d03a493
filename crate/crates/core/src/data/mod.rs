//! Dataset ingestion and the synthetic scribble dataset.
//!
//! On-disk layout:
//!
//! ```text
//! root/
//!   splits/{train,val,test}.txt
//!   <case_id>/image.nii.gz
//!   <case_id>/scribble.nii.gz
//!   <case_id>/gt.nii.gz        (required for val/test cases)
//! ```

mod manifest;
mod preprocess;
mod synth;
mod volume;

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rayon::prelude::*;

pub use manifest::{Split, SplitManifest};
pub use preprocess::{preprocess, resize_bilinear, resize_nearest, standardize};
pub use synth::{synth_case, synth_generate, SynthCase, SynthOptions};
pub use volume::{read_label_volume, read_volume, write_label_volume, write_volume};

use crate::error::{Error, Result};
use crate::types::{HardLabelMap, Image, ScribbleMask};

#[derive(Debug, Clone)]
pub struct CaseSlice {
    pub image: Image,
    pub scribble: ScribbleMask,
    pub ground_truth: Option<HardLabelMap>,
}

#[derive(Debug, Clone)]
pub struct Case {
    pub case_id: String,
    /// Cardiac phase tag (`ED`/`ES`) when the id carries one.
    pub phase: Option<String>,
    pub slices: Vec<CaseSlice>,
}

impl Case {
    pub fn has_ground_truth(&self) -> bool {
        self.slices.iter().all(|s| s.ground_truth.is_some())
    }

    /// Ground truth stacked as `slices x H x W`.
    pub fn ground_truth_volume(&self) -> Result<Array3<i32>> {
        let views = self
            .slices
            .iter()
            .map(|s| s.ground_truth.as_ref().map(|g| g.labels().view()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Dataset(format!("case '{}' has no ground truth", self.case_id)))?;
        ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

fn phase_of(case_id: &str) -> Option<String> {
    case_id
        .split(['_', '-'])
        .find(|t| t.eq_ignore_ascii_case("ed") || t.eq_ignore_ascii_case("es"))
        .map(|t| t.to_ascii_uppercase())
}

fn check_labels(path: &Path, labels: &Array3<i32>, allowed: impl Fn(i32) -> bool) -> Result<()> {
    let bad: Vec<i64> = labels.iter().filter(|&&v| !allowed(v)).map(|&v| v as i64).collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::UnknownLabels { path: path.to_path_buf(), values: volume::dedup(bad) })
    }
}

/// Loads one case and splits it into `z` slices. Scribble values must lie in
/// `0..num_classes` or equal `ignore_label`; ground-truth values in
/// `0..num_classes`.
pub fn load_case(
    case_id: &str,
    volume_path: &Path,
    scribble_path: &Path,
    gt_path: Option<&Path>,
    num_classes: usize,
    ignore_label: i32,
) -> Result<Case> {
    let image = read_volume(volume_path)?;
    let scribble = read_label_volume(scribble_path)?;
    let k = num_classes as i32;
    if scribble.dim() != image.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} has shape {:?} but {} has shape {:?}",
            scribble_path.display(),
            scribble.dim(),
            volume_path.display(),
            image.dim()
        )));
    }
    check_labels(scribble_path, &scribble, |v| (0..k).contains(&v) || v == ignore_label)?;
    let gt = match gt_path {
        Some(p) => {
            let g = read_label_volume(p)?;
            if g.dim() != image.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "{} has shape {:?} but {} has shape {:?}",
                    p.display(),
                    g.dim(),
                    volume_path.display(),
                    image.dim()
                )));
            }
            check_labels(p, &g, |v| (0..k).contains(&v))?;
            Some(g)
        }
        None => None,
    };
    let mut slices = Vec::with_capacity(image.dim().2);
    for z in 0..image.dim().2 {
        let img = Image::new(image.index_axis(Axis(2), z).to_owned()).map_err(|e| Error::Nifti {
            path: volume_path.to_path_buf(),
            message: format!("slice {z}: {e}"),
        })?;
        let scr = ScribbleMask::new(scribble.index_axis(Axis(2), z).to_owned(), num_classes, ignore_label)?;
        let ground_truth = gt
            .as_ref()
            .map(|g| HardLabelMap::new(g.index_axis(Axis(2), z).to_owned(), num_classes))
            .transpose()?;
        slices.push(CaseSlice { image: img, scribble: scr, ground_truth });
    }
    Ok(Case { case_id: case_id.to_owned(), phase: phase_of(case_id), slices })
}

/// A dataset root with its split manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: SplitManifest,
    num_classes: usize,
    ignore_label: i32,
}

impl Dataset {
    /// Opens `root`, reading the manifest from `root/splits` unless
    /// `manifest_dir` is given.
    pub fn open(root: &Path, manifest_dir: Option<&Path>, num_classes: usize, ignore_label: i32) -> Result<Self> {
        let dir = manifest_dir.map(Path::to_path_buf).unwrap_or_else(|| root.join("splits"));
        let manifest = SplitManifest::read_dir(&dir)?;
        Ok(Self { root: root.to_path_buf(), manifest, num_classes, ignore_label })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &SplitManifest {
        &self.manifest
    }

    pub fn case_dir(&self, case_id: &str) -> PathBuf {
        self.root.join(case_id)
    }

    /// Loads every case of `split` in manifest order. Ground truth is
    /// attached only for validation and test cases.
    pub fn load_split(&self, split: Split) -> Result<Vec<Case>> {
        self.manifest
            .ids(split)
            .par_iter()
            .map(|id| {
                let dir = self.case_dir(id);
                let gt = dir.join("gt.nii.gz");
                if split.has_ground_truth() && !gt.exists() {
                    return Err(Error::Dataset(format!(
                        "{split} case '{id}' has no ground truth at {}",
                        gt.display()
                    )));
                }
                load_case(
                    id,
                    &dir.join("image.nii.gz"),
                    &dir.join("scribble.nii.gz"),
                    split.has_ground_truth().then_some(gt.as_path()),
                    self.num_classes,
                    self.ignore_label,
                )
            })
            .collect()
    }
}

/// A slice resized to the network input size.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub case_id: String,
    pub image: Image,
    pub scribble: ScribbleMask,
}

/// Standardizes and resizes every slice; scribbles use nearest resizing.
pub fn prepare_samples(cases: &[Case], size: usize) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for case in cases {
        for s in &case.slices {
            let labels = resize_nearest(s.scribble.labels().view(), size, size);
            out.push(TrainSample {
                case_id: case.case_id.clone(),
                image: preprocess(&s.image, size),
                scribble: ScribbleMask::new(labels, s.scribble.num_classes(), s.scribble.ignore_label())?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn write_case(dir: &Path, img: &Array3<f32>, scr: &Array3<i32>, gt: Option<&Array3<i32>>) {
        std::fs::create_dir_all(dir).unwrap();
        write_volume(&dir.join("image.nii.gz"), img).unwrap();
        write_label_volume(&dir.join("scribble.nii.gz"), scr).unwrap();
        if let Some(g) = gt {
            write_label_volume(&dir.join("gt.nii.gz"), g).unwrap();
        }
    }

    #[test]
    fn three_slice_volume_loads() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::from_shape_fn((6, 5, 3), |(x, y, z)| (x + 2 * y + 3 * z) as f32);
        let mut scr = Array3::from_elem((6, 5, 3), 4);
        scr[[1, 1, 0]] = 3;
        scr[[2, 2, 2]] = 0;
        let gt = Array3::from_shape_fn((6, 5, 3), |(x, _, _)| (x % 4) as i32);
        write_case(dir.path(), &img, &scr, Some(&gt));
        let case = load_case(
            "p1_ED",
            &dir.path().join("image.nii.gz"),
            &dir.path().join("scribble.nii.gz"),
            Some(&dir.path().join("gt.nii.gz")),
            4,
            4,
        )
        .unwrap();
        assert_eq!(case.slices.len(), 3);
        assert_eq!(case.phase.as_deref(), Some("ED"));
        assert_eq!(case.slices[2].image.pixels()[[5, 4]], (5 + 8 + 6) as f32);
        assert_eq!(case.slices[0].scribble.labels()[[1, 1]], 3);
        assert_eq!(case.slices[1].ground_truth.as_ref().unwrap().labels()[[3, 0]], 3);
        assert_eq!(case.ground_truth_volume().unwrap().dim(), (3, 6, 5));
    }

    #[test]
    fn unknown_scribble_value_named() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::zeros((4, 4, 1));
        let mut scr = Array3::from_elem((4, 4, 1), 4);
        scr[[0, 0, 0]] = 7;
        write_case(dir.path(), &img, &scr, None);
        let err = load_case("c", &dir.path().join("image.nii.gz"), &dir.path().join("scribble.nii.gz"), None, 4, 4)
            .unwrap_err();
        assert!(matches!(&err, Error::UnknownLabels { values, .. } if values == &vec![7]));
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), &Array3::zeros((4, 4, 2)), &Array3::from_elem((4, 5, 2), 4), None);
        let err = load_case("c", &dir.path().join("image.nii.gz"), &dir.path().join("scribble.nii.gz"), None, 4, 4)
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn train_split_drops_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let opts = SynthOptions { n_train: 2, n_val: 1, n_test: 0, slices_per_case: 2, size: 32 };
        synth_generate(dir.path(), &opts, 3).unwrap();
        let ds = Dataset::open(dir.path(), None, 4, 4).unwrap();
        let train = ds.load_split(Split::Train).unwrap();
        assert!(train.iter().all(|c| c.slices.iter().all(|s| s.ground_truth.is_none())));
        let val = ds.load_split(Split::Val).unwrap();
        assert!(val.iter().all(Case::has_ground_truth));
        let samples = prepare_samples(&train, 16).unwrap();
        assert_eq!(samples.len(), 4);
        assert_eq!(samples[0].image.dims(), (16, 16));
    }
}
