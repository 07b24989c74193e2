//! Few-shot tasks, episode sampling and synthetic domains.

mod dataset;
mod synthetic;

pub use dataset::{load_image_folder, sample_episode, sample_episode_relabeled, ClassImages, DatasetHandle, Split};
pub use synthetic::{generate_domain, DomainSpec, RenderParams, ShapeKind, ShiftParams, TextureKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One C-way K-shot episode. Support samples are `way * shot` images, query
/// samples `query_y.len()` images; every image shares `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub way: usize,
    pub shot: usize,
}

/// Dimensions that fix the size of a [`TaskVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLayout {
    pub way: usize,
    pub shot: usize,
    pub query_count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TaskLayout {
    pub fn support_count(&self) -> usize {
        self.way * self.shot
    }

    pub fn sample_count(&self) -> usize {
        self.support_count() + self.query_count
    }

    pub fn pixels_per_sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Pixels for every sample plus one label slot per sample.
    pub fn vector_len(&self) -> usize {
        self.sample_count() * (self.pixels_per_sample() + 1)
    }
}

impl Task {
    pub fn new(
        support_x: Tensor,
        support_y: Vec<usize>,
        query_x: Tensor,
        query_y: Vec<usize>,
        way: usize,
        shot: usize,
    ) -> Result<Self> {
        let task = Task {
            support_x,
            support_y,
            query_x,
            query_y,
            way,
            shot,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 {
            return Err(Error::invalid("way and shot must be positive"));
        }
        let (ss, qs) = (self.support_x.shape(), self.query_x.shape());
        if ss.len() != 4 || qs.len() != 4 || ss[1..] != qs[1..] {
            return Err(Error::shape(format!("support {ss:?} and query {qs:?} images disagree")));
        }
        if ss[0] != self.support_y.len() || qs[0] != self.query_y.len() {
            return Err(Error::shape("image and label counts differ"));
        }
        if self.support_y.len() != self.way * self.shot {
            return Err(Error::shape(format!(
                "{}-way {}-shot needs {} support samples, got {}",
                self.way,
                self.shot,
                self.way * self.shot,
                self.support_y.len()
            )));
        }
        let mut counts = vec![0usize; self.way];
        for &y in &self.support_y {
            *counts.get_mut(y).ok_or_else(|| Error::invalid(format!("support label {y} >= way {}", self.way)))? += 1;
        }
        if counts.iter().any(|&c| c != self.shot) {
            return Err(Error::invalid(format!("support does not hold {} samples per class", self.shot)));
        }
        if let Some(&y) = self.query_y.iter().find(|&&y| y >= self.way) {
            return Err(Error::invalid(format!("query label {y} >= way {}", self.way)));
        }
        if self.query_y.len() % self.way != 0 {
            return Err(Error::invalid(format!(
                "{} query samples do not split evenly over {} classes",
                self.query_y.len(),
                self.way
            )));
        }
        Ok(())
    }

    pub fn query_count(&self) -> usize {
        self.query_y.len()
    }

    pub fn sample_count(&self) -> usize {
        self.support_y.len() + self.query_y.len()
    }

    /// `[channels, height, width]` of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.support_x.shape();
        [s[1], s[2], s[3]]
    }

    pub fn layout(&self) -> TaskLayout {
        let [channels, height, width] = self.image_shape();
        TaskLayout {
            way: self.way,
            shot: self.shot,
            query_count: self.query_count(),
            channels,
            height,
            width,
        }
    }

    /// All samples, support first then query, as one `[N,C,H,W]` tensor.
    pub fn images(&self) -> Tensor {
        Tensor::concat_rows(&[&self.support_x, &self.query_x]).expect("validated task")
    }

    /// Labels in the same order as [`Task::images`].
    pub fn labels(&self) -> Vec<usize> {
        self.support_y.iter().chain(&self.query_y).copied().collect()
    }

    /// Replaces every sample's pixels with `images` (support first), keeping labels.
    pub fn with_images(&self, images: &Tensor) -> Result<Task> {
        let n_support = self.support_y.len();
        let mut expect = self.support_x.shape().to_vec();
        expect[0] = self.sample_count();
        if images.shape() != expect.as_slice() {
            return Err(Error::shape(format!("expected images {expect:?}, got {:?}", images.shape())));
        }
        let support: Vec<usize> = (0..n_support).collect();
        let query: Vec<usize> = (n_support..self.sample_count()).collect();
        Ok(Task {
            support_x: images.select_rows(&support)?,
            support_y: self.support_y.clone(),
            query_x: images.select_rows(&query)?,
            query_y: self.query_y.clone(),
            way: self.way,
            shot: self.shot,
        })
    }

    pub fn to_vector(&self) -> TaskVector {
        task_to_vector(self)
    }
}

/// A task flattened as `[x_1, y_1, x_2, y_2, ...]`, support samples first.
/// Labels occupy one slot each and are stored as integral values.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub data: Vec<f64>,
    pub layout: TaskLayout,
}

pub fn task_to_vector(task: &Task) -> TaskVector {
    let layout = task.layout();
    let per = layout.pixels_per_sample();
    let mut data = Vec::with_capacity(layout.vector_len());
    let samples = task
        .support_x
        .data()
        .chunks(per)
        .zip(&task.support_y)
        .chain(task.query_x.data().chunks(per).zip(&task.query_y));
    for (pixels, &label) in samples {
        data.extend_from_slice(pixels);
        data.push(label as f64);
    }
    TaskVector { data, layout }
}

pub fn vector_to_task(v: &TaskVector) -> Result<Task> {
    let l = v.layout;
    if v.data.len() != l.vector_len() || l.sample_count() == 0 || l.pixels_per_sample() == 0 {
        return Err(Error::shape(format!(
            "task vector has {} values, layout {l:?} needs {}",
            v.data.len(),
            l.vector_len()
        )));
    }
    let per = l.pixels_per_sample();
    let mut pixels = Vec::with_capacity(l.sample_count() * per);
    let mut labels = Vec::with_capacity(l.sample_count());
    for chunk in v.data.chunks(per + 1) {
        pixels.extend_from_slice(&chunk[..per]);
        let y = chunk[per];
        if y < 0.0 || y.fract() != 0.0 || y as usize >= l.way {
            return Err(Error::invalid(format!("label slot holds {y}, not a class index below {}", l.way)));
        }
        labels.push(y as usize);
    }
    let split = l.support_count() * per;
    let query_pixels = pixels.split_off(split);
    let query_labels = labels.split_off(l.support_count());
    Task::new(
        Tensor::new(vec![l.support_count(), l.channels, l.height, l.width], pixels)?,
        labels,
        Tensor::new(vec![l.query_count, l.channels, l.height, l.width], query_pixels)?,
        query_labels,
        l.way,
        l.shot,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_task(way: usize, shot: usize, queries: usize, fill: impl Fn(usize) -> f64) -> Task {
        let per = 3 * 4 * 4;
        let ns = way * shot;
        let nq = way * queries;
        let sx = Tensor::new(vec![ns, 3, 4, 4], (0..ns * per).map(&fill).collect()).unwrap();
        let qx = Tensor::new(vec![nq, 3, 4, 4], (0..nq * per).map(|i| fill(i + 7777)).collect()).unwrap();
        let sy = (0..ns).map(|i| i / shot).collect();
        let qy = (0..nq).map(|i| i % way).collect();
        Task::new(sx, sy, qx, qy, way, shot).unwrap()
    }

    #[test]
    fn vector_round_trip() {
        let task = toy_task(3, 2, 2, |i| (i as f64 * 0.61).sin());
        let v = task_to_vector(&task);
        assert_eq!(v.data.len(), (6 + 6) * (48 + 1));
        assert_eq!(vector_to_task(&v).unwrap(), task);
    }

    #[test]
    fn vector_interleaves_labels() {
        let task = toy_task(2, 1, 1, |_| 0.0);
        let v = task_to_vector(&task);
        // first sample's label sits right after its 48 pixels
        assert_eq!(v.data[48], 0.0);
        assert_eq!(v.data[2 * 49 - 1], 1.0);
        assert!(v.data.iter().enumerate().filter(|(i, _)| i % 49 != 48).all(|(_, x)| *x == 0.0));
    }

    #[test]
    fn paper_layout_length() {
        let layout = TaskLayout { way: 5, shot: 1, query_count: 80, channels: 3, height: 8, width: 8 };
        assert_eq!(layout.vector_len(), 85 * 192 + 85);
        assert_eq!(layout.vector_len(), 16_405);
    }

    #[test]
    fn vector_length_mismatch_rejected() {
        let task = toy_task(2, 1, 1, |_| 0.5);
        let mut v = task_to_vector(&task);
        v.data.pop();
        assert!(vector_to_task(&v).is_err());
        let mut v = task_to_vector(&task);
        v.data[48] = 0.5;
        assert!(vector_to_task(&v).is_err());
    }

    #[test]
    fn validation_catches_unbalanced_support() {
        let task = toy_task(2, 2, 1, |_| 0.0);
        let mut bad = task.clone();
        bad.support_y = vec![0, 0, 0, 1];
        assert!(bad.validate().is_err());
        let mut bad = task;
        bad.query_y[0] = 2;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn with_images_keeps_labels() {
        let task = toy_task(2, 1, 2, |i| i as f64);
        let x = task.images();
        let moved = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 1.0).collect()).unwrap();
        let t2 = task.with_images(&moved).unwrap();
        assert_eq!(t2.labels(), task.labels());
        assert_eq!(t2.support_x.data()[0], task.support_x.data()[0] + 1.0);
    }
}

