use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassImages {
    pub name: String,
    /// Flat `C*H*W` images in `[0,1]`.
    pub images: Vec<Vec<f64>>,
}

/// Class-partitioned image collection. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub split: Split,
    image_shape: [usize; 3],
    classes: Vec<ClassImages>,
}

impl DatasetHandle {
    pub fn new(name: impl Into<String>, split: Split, image_shape: [usize; 3], classes: Vec<ClassImages>) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 {
            return Err(Error::shape(format!("bad image shape {image_shape:?}")));
        }
        for c in &classes {
            if let Some(img) = c.images.iter().find(|img| img.len() != per) {
                return Err(Error::shape(format!(
                    "class `{}` holds an image of {} values, expected {per}",
                    c.name,
                    img.len()
                )));
            }
        }
        Ok(DatasetHandle {
            name: name.into(),
            split,
            image_shape,
            classes,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn classes(&self) -> &[ClassImages] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn min_class_size(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).min().unwrap_or(0)
    }

    /// Every image with its class index, in class order.
    pub fn labeled_images(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(c, class)| class.images.iter().map(move |img| (c, img.as_slice())))
    }

    /// Stacks images into an `[N,C,H,W]` tensor.
    pub fn stack(&self, images: &[&[f64]]) -> Result<Tensor> {
        let [c, h, w] = self.image_shape;
        let data = images.iter().flat_map(|img| img.iter().copied()).collect();
        Tensor::new(vec![images.len(), c, h, w], data)
    }
}

/// Samples a `way`-way `shot`-shot episode with `queries_per_class` queries
/// per class. The class-to-label permutation is derived from `seed`.
pub fn sample_episode(data: &DatasetHandle, way: usize, shot: usize, queries_per_class: usize, seed: u64) -> Result<Task> {
    sample_episode_relabeled(data, way, shot, queries_per_class, seed, seed::derive(seed, seed::REMAP, 0))
}

/// Like [`sample_episode`] but with an explicit relabeling seed: the same
/// `seed` always selects the same images, `remap_seed` only changes which
/// episode label each selected class receives.
pub fn sample_episode_relabeled(
    data: &DatasetHandle,
    way: usize,
    shot: usize,
    queries_per_class: usize,
    seed: u64,
    remap_seed: u64,
) -> Result<Task> {
    if way == 0 || shot == 0 || queries_per_class == 0 {
        return Err(Error::invalid("way, shot and queries per class must be positive"));
    }
    if data.class_count() < way {
        return Err(Error::Insufficient(format!(
            "{} classes available, {way}-way episode requested",
            data.class_count()
        )));
    }
    let mut rng = seed::rng(seed);
    let chosen = index::sample(&mut rng, data.class_count(), way).into_vec();
    let per_class = shot + queries_per_class;
    let mut picks = Vec::with_capacity(way);
    for &c in &chosen {
        let class = &data.classes[c];
        if class.images.len() < per_class {
            return Err(Error::Insufficient(format!(
                "class `{}` has {} images, episode needs {per_class}",
                class.name,
                class.images.len()
            )));
        }
        picks.push(index::sample(&mut rng, class.images.len(), per_class).into_vec());
    }
    let mut labels: Vec<usize> = (0..way).collect();
    labels.shuffle(&mut seed::rng(remap_seed));
    // slot[label] = position in `chosen`
    let mut slot = vec![0; way];
    for (pos, &label) in labels.iter().enumerate() {
        slot[label] = pos;
    }
    let mut support = Vec::with_capacity(way * shot);
    let mut support_y = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries_per_class);
    let mut query_y = Vec::with_capacity(way * queries_per_class);
    for (label, &pos) in slot.iter().enumerate() {
        let class = &data.classes[chosen[pos]];
        for &i in &picks[pos][..shot] {
            support.push(class.images[i].as_slice());
            support_y.push(label);
        }
    }
    for q in 0..queries_per_class {
        for (label, &pos) in slot.iter().enumerate() {
            let class = &data.classes[chosen[pos]];
            query.push(class.images[picks[pos][shot + q]].as_slice());
            query_y.push(label);
        }
    }
    Task::new(data.stack(&support)?, support_y, data.stack(&query)?, query_y, way, shot)
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

/// Loads `root/<class>/<image>` into a handle. Classes and files are sorted
/// by name; images are resized to `image_size²` RGB and scaled to `[0,1]`.
pub fn load_image_folder(path: impl AsRef<Path>, image_size: usize) -> Result<DatasetHandle> {
    let root = path.as_ref();
    if image_size == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let mut class_dirs: Vec<PathBuf> = read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()).collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data {
            path: root.to_path_buf(),
            message: "no class directories".into(),
        });
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    for dir in class_dirs {
        let files: Vec<PathBuf> = read_dir_sorted(&dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::Data {
                path: dir,
                message: "class directory holds no images".into(),
            });
        }
        let mut images = Vec::with_capacity(files.len());
        for file in files {
            let known = file
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if !known {
                return Err(Error::Data {
                    path: file,
                    message: "not a supported image file".into(),
                });
            }
            images.push(decode_image(&file, image_size)?);
        }
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        classes.push(ClassImages { name, images });
    }
    let name = root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    DatasetHandle::new(name, Split::Train, [3, image_size, image_size], classes)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn decode_image(path: &Path, size: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = image::imageops::resize(&img.to_rgb8(), size as u32, size as u32, image::imageops::FilterType::Triangle);
    let mut out = vec![0.0; 3 * size * size];
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(c * size + y as usize) * size + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(classes: usize, per_class: usize) -> DatasetHandle {
        let classes = (0..classes)
            .map(|c| ClassImages {
                name: format!("class{c}"),
                images: (0..per_class).map(|i| vec![(c * 1000 + i) as f64; 12]).collect(),
            })
            .collect();
        DatasetHandle::new("toy", Split::Train, [3, 2, 2], classes).unwrap()
    }

    #[test]
    fn five_way_one_shot_sixteen_queries() {
        let task = sample_episode(&dataset(8, 20), 5, 1, 16, 3).unwrap();
        assert_eq!(task.support_y.len(), 5);
        assert_eq!(task.query_y.len(), 80);
        assert_eq!(task.query_x.shape(), &[80, 3, 2, 2]);
    }

    #[test]
    fn one_way_episode() {
        let task = sample_episode(&dataset(3, 5), 1, 2, 2, 0).unwrap();
        assert!(task.labels().iter().all(|&y| y == 0));
    }

    #[test]
    fn same_seed_same_task() {
        let d = dataset(10, 30);
        assert_eq!(sample_episode(&d, 5, 2, 4, 99).unwrap(), sample_episode(&d, 5, 2, 4, 99).unwrap());
        assert_ne!(sample_episode(&d, 5, 2, 4, 99).unwrap(), sample_episode(&d, 5, 2, 4, 100).unwrap());
    }

    #[test]
    fn sampling_without_replacement() {
        let d = dataset(5, 6);
        let task = sample_episode(&d, 5, 2, 4, 1).unwrap();
        let mut seen: Vec<i64> = task.images().data().chunks(12).map(|c| c[0] as i64).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 30);
        // every label maps to exactly one real class
        for label in 0..5 {
            let classes: Vec<i64> = task
                .images()
                .data()
                .chunks(12)
                .zip(task.labels())
                .filter(|(_, y)| *y == label)
                .map(|(c, _)| c[0] as i64 / 1000)
                .collect();
            assert!(classes.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn relabeling_keeps_the_image_multiset() {
        let d = dataset(10, 10);
        let a = sample_episode_relabeled(&d, 5, 1, 3, 4, 1).unwrap();
        let b = sample_episode_relabeled(&d, 5, 1, 3, 4, 2).unwrap();
        let sorted = |t: &Task| {
            let mut v: Vec<i64> = t.images().data().chunks(12).map(|c| c[0] as i64).collect();
            v.sort();
            v
        };
        assert_eq!(sorted(&a), sorted(&b));
    }

    #[test]
    fn insufficient_data_rejected() {
        assert!(matches!(sample_episode(&dataset(4, 20), 5, 1, 1, 0), Err(Error::Insufficient(_))));
        assert!(matches!(sample_episode(&dataset(6, 5), 5, 1, 5, 0), Err(Error::Insufficient(_))));
    }
}
