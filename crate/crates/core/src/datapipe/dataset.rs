use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numcore::{checkpoint, ParamVector, Scalar, Tensor};

/// Images in `[0, 1]` with integer labels.
///
/// Pixels are stored contiguously, one `(H, W, C)` row-major block per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    image_shape: [usize; 3],
    pixels: Vec<Scalar>,
    labels: Vec<usize>,
    provenance: String,
}

impl LabeledDataset {
    pub fn new(
        image_shape: [usize; 3],
        pixels: Vec<Scalar>,
        labels: Vec<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if image_shape.contains(&0) {
            return Err(invalid(format!("image shape must be positive, got {image_shape:?}")));
        }
        let per = image_shape.iter().product::<usize>();
        if pixels.len() != per * labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: vec![labels.len(), per],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn empty(image_shape: [usize; 3], provenance: impl Into<String>) -> Self {
        Self {
            image_shape,
            pixels: Vec::new(),
            labels: Vec::new(),
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[Scalar] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [Scalar] {
        let n = self.image_len();
        &mut self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.image_shape.to_vec(), self.image(i).to_vec())
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub(crate) fn labels_mut(&mut self) -> &mut [usize] {
        &mut self.labels
    }

    pub fn pixels(&self) -> &[Scalar] {
        &self.pixels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: impl Into<String>) {
        self.provenance = provenance.into();
    }

    pub fn push(&mut self, image: &[Scalar], label: usize) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::ShapeMismatch {
                op: "dataset push",
                lhs: self.image_shape.to_vec(),
                rhs: vec![image.len()],
            });
        }
        if let Some(p) = image.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("pixel value {p} outside [0, 1]")));
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    /// Stacks the selected images into an `[n, H, W, C]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [h, w, c] = self.image_shape;
        (Tensor::from_parts(vec![indices.len(), h, w, c], data), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            image_shape: self.image_shape,
            pixels,
            labels,
            provenance: self.provenance.clone(),
        }
    }

    /// Indices of samples whose label differs from `label`.
    pub fn indices_without_label(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] != label).collect()
    }

    /// Per-class sample counts for labels `0..classes`; larger labels are ignored.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                counts[y] += 1;
            }
        }
        counts
    }

    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().copied().max()
    }

    /// Writes the dataset as an `images`/`labels` checkpoint container.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("cannot cache an empty dataset".into()));
        }
        let [h, w, c] = self.image_shape;
        let params = ParamVector::new()
            .with("images", Tensor::new(vec![self.len(), h, w, c], self.pixels.clone())?)?
            .with(
                "labels",
                Tensor::new(vec![self.len()], self.labels.iter().map(|&y| y as Scalar).collect())?,
            )?;
        checkpoint::save(path, &params)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let params = checkpoint::load(path)?;
        let images = params
            .get("images")
            .ok_or_else(|| Error::Format("dataset cache lacks an images segment".into()))?;
        let labels = params
            .get("labels")
            .ok_or_else(|| Error::Format("dataset cache lacks a labels segment".into()))?;
        let s = images.shape();
        if s.len() != 4 || labels.len() != s[0] {
            return Err(Error::Format(format!("inconsistent dataset cache shapes {s:?}")));
        }
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            [s[1], s[2], s[3]],
            images.data().to_vec(),
            labels,
            format!("cache:{}", path.display()),
        )
    }
}
