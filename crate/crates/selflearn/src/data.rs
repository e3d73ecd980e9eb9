//! Desk-scale dataset provisioning: synthetic generators, IDX image
//! ingestion, and the labeled/unlabeled/test split.

use std::fs;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{DataPools, LabeledExample, Origin, TestExample, UnlabeledExample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianBlobs,
    TwoMoons,
    ConcentricRings,
    IdxImages,
}

/// Declarative dataset description; generation is a pure function of this
/// struct. `rotation_degrees` rotates synthetic 2-D features about the
/// origin, which is how related source/target domain pairs are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub rotation_degrees: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub images_path: Option<PathBuf>,
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
}

fn default_classes() -> usize {
    2
}

fn default_samples_per_class() -> usize {
    100
}

/// A fully labeled dataset, before any split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == DatasetKind::IdxImages {
            if self.images_path.is_none() || self.labels_path.is_none() {
                return Err(Error::InvalidConfig {
                    field: "dataset.images_path",
                    message: "idx_images requires images_path and labels_path".into(),
                });
            }
            return Ok(());
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig {
                field: "dataset.classes",
                message: "at least 2 classes required".into(),
            });
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidConfig {
                field: "dataset.samples_per_class",
                message: "at least 1 sample per class required".into(),
            });
        }
        if self.kind == DatasetKind::TwoMoons && self.classes != 2 {
            return Err(Error::InvalidConfig {
                field: "dataset.classes",
                message: "two_moons is a 2-class dataset".into(),
            });
        }
        Ok(())
    }
}

fn rotate(point: &mut [f64], radians: f64) {
    let (s, c) = radians.sin_cos();
    let (x, y) = (point[0], point[1]);
    point[0] = c * x - s * y;
    point[1] = s * x + c * y;
}

/// Produce the full labeled dataset described by `spec`. Deterministic in
/// the spec (including its seed); labels are exactly balanced.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.kind == DatasetKind::IdxImages {
        return load_idx(
            spec.images_path.as_ref().expect("validated"),
            spec.labels_path.as_ref().expect("validated"),
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let radians = spec.rotation_degrees.to_radians();
    let c = spec.classes;
    let spc = spec.samples_per_class;
    let mut features = Vec::with_capacity(c * spc);
    let mut labels = Vec::with_capacity(c * spc);

    for class in 0..c {
        for sample in 0..spc {
            let mut point = match spec.kind {
                DatasetKind::GaussianBlobs => {
                    let angle = 2.0 * std::f64::consts::PI * class as f64 / c as f64;
                    vec![4.0 * angle.cos(), 4.0 * angle.sin()]
                }
                DatasetKind::TwoMoons => {
                    let t = if spc == 1 {
                        0.0
                    } else {
                        std::f64::consts::PI * sample as f64 / (spc - 1) as f64
                    };
                    if class == 0 {
                        vec![t.cos(), t.sin()]
                    } else {
                        vec![1.0 - t.cos(), 0.5 - t.sin()]
                    }
                }
                DatasetKind::ConcentricRings => {
                    let radius = 1.5 * (class + 1) as f64;
                    let angle = 2.0 * std::f64::consts::PI * sample as f64 / spc as f64;
                    vec![radius * angle.cos(), radius * angle.sin()]
                }
                DatasetKind::IdxImages => unreachable!(),
            };
            for v in point.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += spec.noise * n;
            }
            rotate(&mut point, radians);
            features.push(point);
            labels.push(class);
        }
    }

    Ok(Dataset {
        features,
        labels,
        feature_dim: 2,
        classes: c,
    })
}

fn read_u32_be(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or(Error::Parse {
            field,
            message: "file truncated inside header".into(),
        })?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair. Pixels are scaled to [0, 1].
pub fn load_idx(images_path: &PathBuf, labels_path: &PathBuf) -> Result<Dataset> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::Parse {
        field: "image file",
        message: format!("{}: {e}", images_path.display()),
    })?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::Parse {
        field: "label file",
        message: format!("{}: {e}", labels_path.display()),
    })?;

    let magic = read_u32_be(&image_bytes, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Parse {
            field: "image magic",
            message: format!("expected 0x{IDX_IMAGE_MAGIC:08x}, got 0x{magic:08x}"),
        });
    }
    let image_count = read_u32_be(&image_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(&image_bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(&image_bytes, 12, "image cols")? as usize;
    let pixel_count = image_count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(Error::Parse {
            field: "image header",
            message: "image dimensions overflow".into(),
        })?;
    let pixels = image_bytes.get(16..16 + pixel_count).ok_or(Error::Parse {
        field: "image data",
        message: format!(
            "expected {pixel_count} pixel bytes, found {}",
            image_bytes.len().saturating_sub(16)
        ),
    })?;

    let magic = read_u32_be(&label_bytes, 0, "label magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Parse {
            field: "label magic",
            message: format!("expected 0x{IDX_LABEL_MAGIC:08x}, got 0x{magic:08x}"),
        });
    }
    let label_count = read_u32_be(&label_bytes, 4, "label count")? as usize;
    let labels_raw = label_bytes.get(8..8 + label_count).ok_or(Error::Parse {
        field: "label data",
        message: format!(
            "expected {label_count} label bytes, found {}",
            label_bytes.len().saturating_sub(8)
        ),
    })?;

    if image_count != label_count {
        return Err(Error::Parse {
            field: "example count",
            message: format!("{image_count} images but {label_count} labels"),
        });
    }

    let dim = rows * cols;
    let features: Vec<Vec<f64>> = (0..image_count)
        .map(|i| {
            pixels[i * dim..(i + 1) * dim]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = labels_raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);

    Ok(Dataset {
        features,
        labels,
        feature_dim: dim,
        classes,
    })
}

/// Split parameters for semi-supervised runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labels_per_class: usize,
    pub test_fraction: f64,
}

/// Partition a dataset into exactly `labels_per_class` seed labels per
/// class, a label-stratified test set, and the remaining examples as
/// unlabeled with ground truth withheld to the audit store.
pub fn split_ssl(dataset: &Dataset, split: &SplitSpec, seed: u64) -> Result<DataPools> {
    if split.labels_per_class == 0 {
        return Err(Error::InvalidConfig {
            field: "split.labels_per_class",
            message: "must be at least 1".into(),
        });
    }
    if !(0.0..1.0).contains(&split.test_fraction) {
        return Err(Error::InvalidConfig {
            field: "split.test_fraction",
            message: "must be in [0, 1)".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test = Vec::new();

    for class in 0..dataset.classes {
        let mut indices: Vec<usize> = dataset
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let test_count = (split.test_fraction * indices.len() as f64).round() as usize;
        let required = split.labels_per_class + test_count;
        if indices.len() < required {
            return Err(Error::InsufficientClassPopulation {
                class,
                available: indices.len(),
                required,
            });
        }
        // Fisher-Yates via the seeded stream, class by class.
        for i in (1..indices.len()).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        for (pos, &idx) in indices.iter().enumerate() {
            if pos < split.labels_per_class {
                labeled.push(LabeledExample {
                    features: dataset.features[idx].clone(),
                    label: class,
                    origin: Origin::Seed,
                });
            } else if pos < required {
                test.push(TestExample {
                    features: dataset.features[idx].clone(),
                    label: class,
                });
            } else {
                unlabeled.push(UnlabeledExample {
                    features: dataset.features[idx].clone(),
                    audit_label: Some(class),
                });
            }
        }
    }

    Ok(DataPools {
        labeled,
        unlabeled,
        test,
        classes: dataset.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn blob_spec(noise: f64, seed: u64) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 2,
            samples_per_class: 50,
            noise,
            rotation_degrees: 0.0,
            seed,
            images_path: None,
            labels_path: None,
        }
    }

    #[test]
    fn zero_noise_blobs_sit_on_their_center() {
        let ds = generate(&blob_spec(0.0, 3)).unwrap();
        let class0: Vec<&Vec<f64>> = ds
            .features
            .iter()
            .zip(&ds.labels)
            .filter(|(_, &l)| l == 0)
            .map(|(f, _)| f)
            .collect();
        assert_eq!(class0.len(), 50);
        for f in &class0 {
            assert!((f[0] - 4.0).abs() < 1e-12);
            assert!(f[1].abs() < 1e-12);
        }
    }

    #[test]
    fn two_moons_count_contract() {
        let spec = DatasetSpec {
            kind: DatasetKind::TwoMoons,
            classes: 2,
            samples_per_class: 100,
            noise: 0.1,
            rotation_degrees: 0.0,
            seed: 5,
            images_path: None,
            labels_path: None,
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.features.len(), 200);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 100);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 100);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&blob_spec(0.3, 11)).unwrap();
        let b = generate(&blob_spec(0.3, 11)).unwrap();
        assert_eq!(a.features, b.features);
        let c = generate(&blob_spec(0.3, 12)).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn rotation_moves_points() {
        let mut spec = blob_spec(0.0, 0);
        spec.rotation_degrees = 90.0;
        let ds = generate(&spec).unwrap();
        // Class 0 center (4, 0) rotates to (0, 4).
        assert!(ds.features[0][0].abs() < 1e-12);
        assert!((ds.features[0][1] - 4.0).abs() < 1e-12);
    }

    fn write_idx_fixture(
        dir: &std::path::Path,
        image_magic: u32,
        label_magic: u32,
        image_count: u32,
        label_count: u32,
        truncate_pixels: bool,
    ) -> (PathBuf, PathBuf) {
        let images = dir.join("images.idx");
        let labels = dir.join("labels.idx");
        let mut f = std::fs::File::create(&images).unwrap();
        f.write_all(&image_magic.to_be_bytes()).unwrap();
        f.write_all(&image_count.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        let mut pixels: Vec<u8> = (0..image_count * 4).map(|i| (i * 17 % 256) as u8).collect();
        if truncate_pixels {
            pixels.pop();
        }
        f.write_all(&pixels).unwrap();

        let mut f = std::fs::File::create(&labels).unwrap();
        f.write_all(&label_magic.to_be_bytes()).unwrap();
        f.write_all(&label_count.to_be_bytes()).unwrap();
        let label_data: Vec<u8> = (0..label_count).map(|i| (i % 3) as u8).collect();
        f.write_all(&label_data).unwrap();
        (images, labels)
    }

    #[test]
    fn idx_fixture_loads_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) =
            write_idx_fixture(dir.path(), IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, 4, 4, false);
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.features.len(), 4);
        assert_eq!(ds.feature_dim, 4);
        assert!(ds
            .features
            .iter()
            .flatten()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.labels, vec![0, 1, 2, 0]);
    }

    #[test]
    fn idx_wrong_image_magic_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) =
            write_idx_fixture(dir.path(), 0xdeadbeef, IDX_LABEL_MAGIC, 4, 4, false);
        match load_idx(&images, &labels) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "image magic"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_wrong_label_magic_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_fixture(dir.path(), IDX_IMAGE_MAGIC, 7, 4, 4, false);
        match load_idx(&images, &labels) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "label magic"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) =
            write_idx_fixture(dir.path(), IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, 4, 3, false);
        match load_idx(&images, &labels) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "example count"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_pixels_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) =
            write_idx_fixture(dir.path(), IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, 4, 4, true);
        match load_idx(&images, &labels) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "image data"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_an_exact_partition() {
        let spec = DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 3,
            samples_per_class: 40,
            noise: 0.5,
            rotation_degrees: 0.0,
            seed: 2,
            images_path: None,
            labels_path: None,
        };
        let ds = generate(&spec).unwrap();
        let pools = split_ssl(
            &ds,
            &SplitSpec {
                labels_per_class: 5,
                test_fraction: 0.25,
            },
            9,
        )
        .unwrap();
        assert_eq!(pools.labeled.len(), 15);
        assert_eq!(pools.test.len(), 30); // round(0.25 * 40) = 10 per class
        assert_eq!(
            pools.labeled.len() + pools.unlabeled.len() + pools.test.len(),
            120
        );
        for class in 0..3 {
            assert_eq!(
                pools.labeled.iter().filter(|e| e.label == class).count(),
                5
            );
        }
        assert!(pools.labeled.iter().all(|e| e.origin == Origin::Seed));
        assert!(pools.unlabeled.iter().all(|e| e.audit_label.is_some()));

        // Every pooled feature vector appears in the source dataset.
        let mut counts = std::collections::HashMap::new();
        for f in &ds.features {
            *counts.entry(format!("{f:?}")).or_insert(0usize) += 1;
        }
        let all: Vec<&Vec<f64>> = pools
            .labeled
            .iter()
            .map(|e| &e.features)
            .chain(pools.unlabeled.iter().map(|e| &e.features))
            .chain(pools.test.iter().map(|e| &e.features))
            .collect();
        for f in all {
            let c = counts.get_mut(&format!("{f:?}")).expect("feature from dataset");
            assert!(*c > 0, "feature drawn more times than it exists");
            *c -= 1;
        }
    }

    #[test]
    fn split_mirrors_published_label_budgets() {
        // 10 classes x 100 labels = 1000 seed labels.
        let spec = DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 10,
            samples_per_class: 150,
            noise: 0.3,
            rotation_degrees: 0.0,
            seed: 0,
            images_path: None,
            labels_path: None,
        };
        let ds = generate(&spec).unwrap();
        let pools = split_ssl(
            &ds,
            &SplitSpec {
                labels_per_class: 100,
                test_fraction: 0.1,
            },
            1,
        )
        .unwrap();
        assert_eq!(pools.labeled.len(), 1000);

        // 38 classes x 10 labels = 380 seed labels.
        let spec = DatasetSpec {
            kind: DatasetKind::ConcentricRings,
            classes: 38,
            samples_per_class: 20,
            noise: 0.05,
            rotation_degrees: 0.0,
            seed: 0,
            images_path: None,
            labels_path: None,
        };
        let ds = generate(&spec).unwrap();
        let pools = split_ssl(
            &ds,
            &SplitSpec {
                labels_per_class: 10,
                test_fraction: 0.2,
            },
            1,
        )
        .unwrap();
        assert_eq!(pools.labeled.len(), 380);
    }

    #[test]
    fn split_rejects_insufficient_population() {
        let ds = generate(&blob_spec(0.1, 0)).unwrap(); // 50 per class
        let err = split_ssl(
            &ds,
            &SplitSpec {
                labels_per_class: 45,
                test_fraction: 0.2,
            },
            0,
        );
        assert!(matches!(
            err,
            Err(Error::InsufficientClassPopulation { .. })
        ));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = generate(&blob_spec(0.4, 6)).unwrap();
        let split = SplitSpec {
            labels_per_class: 3,
            test_fraction: 0.2,
        };
        let a = split_ssl(&ds, &split, 42).unwrap();
        let b = split_ssl(&ds, &split, 42).unwrap();
        assert_eq!(a.labeled.len(), b.labeled.len());
        for (x, y) in a.labeled.iter().zip(b.labeled.iter()) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        for (x, y) in a.unlabeled.iter().zip(b.unlabeled.iter()) {
            assert_eq!(x.features, y.features);
        }
    }
}
