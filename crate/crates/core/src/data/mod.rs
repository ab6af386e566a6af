//! Datasets, batching and the preprocessing pipeline.
//!
//! Images are stored as `[3, H, W]` arrays with values in `[0, 1]`; the
//! pipeline normalizes them (and optionally flips them) when batches are built.

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::{DataSpec, DatasetSpec, TransformOp};
use crate::error::{Error, Result};
use crate::nn::InputBounds;
use crate::repro::Rng;

pub use synth::{hsv_to_rgb, synth_shapes};

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub label: usize,
    /// Ground-truth object mask `[H, W]`, when the dataset has one.
    pub mask: Option<Array2<bool>>,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Sorted by `image_id`.
    pub items: Vec<Item>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.items.first().map(|i| (i.image.dim().1, i.image.dim().2))
    }

    pub fn find(&self, image_id: &str) -> Option<&Item> {
        self.items
            .binary_search_by(|i| i.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.items[i])
    }

    /// Keep only the first `n` items.
    pub fn truncated(mut self, n: usize) -> Self {
        self.items.truncate(n);
        self
    }
}

/// A normalized batch ready for the model.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `[N, 3, H, W]`
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Load a dataset from its spec; `resize` comes from the transform pipeline.
pub fn load_dataset(spec: &DatasetSpec, resize: Option<usize>) -> Result<Dataset> {
    let ds = match spec {
        DatasetSpec::SyntheticShapes(p) => synth_shapes(p.n, p.num_classes, p.image_size, p.seed),
        DatasetSpec::ImageFolder(p) => {
            let mut root = PathBuf::from(&p.root);
            if let Some(split) = &p.split {
                root.push(split);
            }
            load_image_folder(&root)?
        }
        DatasetSpec::Other { name, .. } => return Err(Error::UnknownDataset(name.clone())),
    };
    match resize {
        Some(size) => Ok(resize_dataset(ds, size)),
        None => Ok(ds),
    }
}

/// Train and (optional) test set of a data spec.
pub fn load_splits(spec: &DataSpec) -> Result<(Dataset, Option<Dataset>)> {
    let train = load_dataset(&spec.train_set, spec.resize())?;
    if train.num_classes() != spec.num_classes {
        return Err(Error::schema(
            "num_classes",
            format!("train set has {} classes", train.num_classes()),
        ));
    }
    let test = spec
        .test_set
        .as_ref()
        .map(|t| load_dataset(t, spec.resize()))
        .transpose()?;
    Ok((train, test))
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Load `root/<class>/<file>` images; classes are the sorted subdirectory
/// names (except `masks`). Masks are read from `root/masks/<image_id>.png`
/// when present; nonzero pixels are foreground.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let mut classes: Vec<String> = read_dir_sorted(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .filter(|n| n != "masks")
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::corrupt(root, "no class directories"));
    }
    let mut items = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        for file in read_dir_sorted(&root.join(class))? {
            let ext = file
                .extension()
                .map(|e| e.to_string_lossy().to_lowercase())
                .unwrap_or_default();
            if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                continue;
            }
            let stem = file.file_stem().unwrap().to_string_lossy().into_owned();
            let image_id = format!("{class}/{stem}");
            let image = read_image(&file)?;
            let mask_path = root.join("masks").join(class).join(format!("{stem}.png"));
            let mask = if mask_path.exists() {
                let m = read_mask(&mask_path)?;
                if m.dim() != (image.dim().1, image.dim().2) {
                    return Err(Error::ShapeMismatch(format!(
                        "mask {} does not match its image size",
                        mask_path.display()
                    )));
                }
                Some(m)
            } else {
                None
            };
            items.push(Item {
                image,
                label,
                mask,
                image_id,
            });
        }
    }
    items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    Ok(Dataset {
        items,
        class_names: classes,
    })
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 0
    }))
}

/// Write a `[3, H, W]` image in `[0, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn resize_dataset(mut ds: Dataset, size: usize) -> Dataset {
    for item in &mut ds.items {
        item.image = resize_bilinear(&item.image, size, size);
        item.mask = item.mask.as_ref().map(|m| resize_nearest(m, size, size));
    }
    ds
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(image: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = |o: usize, n_out: usize, n_in: usize| {
        let v = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = v.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), v - i0 as f64)
    };
    let mut out = Array3::zeros((c, out_h, out_w));
    for y in 0..out_h {
        let (y0, y1, fy) = src(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = src(x, out_w, w);
            for ch in 0..c {
                let top = image[[ch, y0, x0]] * (1.0 - fx) + image[[ch, y0, x1]] * fx;
                let bottom = image[[ch, y1, x0]] * (1.0 - fx) + image[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn resize_nearest(mask: &Array2<bool>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        mask[[(y * h / out_h).min(h - 1), (x * w / out_w).min(w - 1)]]
    })
}

/// Partition `0..n` into batches; the last batch may be smaller.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: Option<&mut Rng>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// The configured per-image transforms applied at batch time.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub hflip: Option<f64>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Pipeline {
    pub fn from_spec(spec: &DataSpec) -> Self {
        let hflip = spec.transform.iter().find_map(|op| match op {
            TransformOp::Hflip { p } => Some(*p),
            _ => None,
        });
        let (mean, std) = spec.normalization();
        Pipeline { hflip, mean, std }
    }

    /// Normalize an image in `[0, 1]`.
    pub fn normalize(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut out = image.clone();
        for c in 0..3 {
            out.slice_mut(s![c, .., ..])
                .mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }

    /// Inverse of [`Pipeline::normalize`].
    pub fn denormalize(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut out = image.clone();
        for c in 0..3 {
            out.slice_mut(s![c, .., ..])
                .mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        out
    }

    /// Range of normalized pixel values per channel.
    pub fn bounds(&self) -> InputBounds {
        let mut low = [0.0; 3];
        let mut high = [0.0; 3];
        for c in 0..3 {
            low[c] = -self.mean[c] / self.std[c];
            high[c] = (1.0 - self.mean[c]) / self.std[c];
        }
        InputBounds { low, high }
    }

    /// Build a normalized batch. Augmentation runs only when `augment` is
    /// given; it draws exactly one value per image.
    pub fn batch(&self, ds: &Dataset, indices: &[usize], mut augment: Option<&mut Rng>) -> Result<ImageBatch> {
        let first = indices
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let (_, h, w) = ds.items[*first].image.dim();
        let mut images = Array4::zeros((indices.len(), 3, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            let item = &ds.items[i];
            if item.image.dim() != (3, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "{} has size {:?}, batch expects {h}x{w}",
                    item.image_id,
                    item.image.dim()
                )));
            }
            let mut img = self.normalize(&item.image);
            if let Some(rng) = augment.as_deref_mut() {
                let u: f64 = rng.gen();
                if self.hflip.is_some_and(|p| u < p) {
                    img.invert_axis(ndarray::Axis(2));
                }
            }
            images.slice_mut(s![slot, .., .., ..]).assign(&img);
            labels.push(item.label);
        }
        Ok(ImageBatch {
            images,
            labels,
            indices: indices.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repro;

    fn pipeline() -> Pipeline {
        Pipeline::from_spec(&DataSpec::default())
    }

    #[test]
    fn normalize_round_trip() {
        let ds = synth_shapes(3, 3, 16, 1);
        let p = pipeline();
        let back = p.denormalize(&p.normalize(&ds.items[0].image));
        for (a, b) in back.iter().zip(ds.items[0].image.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bounds_cover_normalized_pixels() {
        let ds = synth_shapes(6, 3, 16, 2);
        let p = pipeline();
        let b = p.bounds();
        for item in &ds.items {
            let x = p.normalize(&item.image);
            for ((c, _, _), v) in x.indexed_iter() {
                assert!(*v >= b.low[c] - 1e-12 && *v <= b.high[c] + 1e-12);
            }
        }
    }

    #[test]
    fn batches_partition_and_keep_partial() {
        let mut rng = repro::substream(0, repro::SHUFFLE);
        let b = batch_indices(10, 4, Some(&mut rng));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn flip_always_or_never() {
        let ds = synth_shapes(2, 2, 16, 3);
        let mut p = pipeline();
        let mut rng = repro::substream(0, repro::AUGMENT);
        p.hflip = Some(1.0);
        let flipped = p.batch(&ds, &[0], Some(&mut rng)).unwrap();
        p.hflip = Some(0.0);
        let plain = p.batch(&ds, &[0], Some(&mut rng)).unwrap();
        assert_eq!(flipped.images[[0, 0, 3, 0]], plain.images[[0, 0, 3, 15]]);
    }

    #[test]
    fn folder_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_shapes(4, 2, 16, 4);
        for item in &ds.items {
            let class = &ds.class_names[item.label];
            fs::create_dir_all(dir.path().join(class)).unwrap();
            write_png(&dir.path().join(class).join(format!("{}.png", item.image_id)), &item.image).unwrap();
        }
        let loaded = load_image_folder(dir.path()).unwrap();
        assert_eq!(loaded.class_names, vec!["circle", "square"]);
        assert_eq!(loaded.len(), 4);
        assert!(loaded.find("square/shape_00001").is_some());
        let a = &loaded.find("circle/shape_00000").unwrap().image;
        for (x, y) in a.iter().zip(ds.items[0].image.iter()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn unknown_dataset_rejected() {
        let spec = DatasetSpec::Other {
            name: "imagenet".into(),
            params: Default::default(),
        };
        assert!(matches!(load_dataset(&spec, None), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn resize_keeps_constant_images() {
        let img = Array3::from_elem((3, 7, 5), 0.25);
        let out = resize_bilinear(&img, 16, 16);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
