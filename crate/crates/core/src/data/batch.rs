use crate::error::{DemoError, Result};
use crate::modality::Modality;

/// `count x channels x height x width` image stack, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageStack {
    pub fn zeros(count: usize, channels: usize, height: usize, width: usize) -> Self {
        ImageStack {
            count,
            channels,
            height,
            width,
            data: vec![0.0; count * channels * height * width],
        }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.image_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn from_images(channels: usize, height: usize, width: usize, images: &[&[f64]]) -> Self {
        let mut data = Vec::with_capacity(images.len() * channels * height * width);
        for img in images {
            assert_eq!(img.len(), channels * height * width);
            data.extend_from_slice(img);
        }
        ImageStack {
            count: images.len(),
            channels,
            height,
            width,
            data,
        }
    }
}

/// A batch of aligned R/N/T triples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalBatch {
    /// Stacks in canonical R, N, T order.
    pub images: [ImageStack; 3],
    pub ids: Vec<usize>,
    pub cams: Vec<usize>,
    pub present: Vec<[bool; 3]>,
}

impl ModalBatch {
    pub fn new(images: [ImageStack; 3], ids: Vec<usize>, cams: Vec<usize>) -> Result<Self> {
        let n = images[0].count;
        let dims = (images[0].channels, images[0].height, images[0].width);
        for s in &images {
            if s.count != n || (s.channels, s.height, s.width) != dims {
                return Err(DemoError::Input(
                    "modality stacks differ in batch size or image dims".into(),
                ));
            }
        }
        if ids.len() != n || cams.len() != n {
            return Err(DemoError::Input(format!(
                "{} images but {} ids and {} cameras",
                n,
                ids.len(),
                cams.len()
            )));
        }
        Ok(ModalBatch {
            images,
            ids,
            cams,
            present: vec![[true; 3]; n],
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn stack(&self, m: Modality) -> &ImageStack {
        &self.images[m.index()]
    }
}

/// Replace the stacks of every modality in `missing` by zero images and
/// clear their presence bits. At least one modality must remain.
pub fn mask_modalities(batch: &ModalBatch, missing: &[Modality]) -> Result<ModalBatch> {
    let mut out = batch.clone();
    let mut removed = [false; 3];
    for m in missing {
        removed[m.index()] = true;
    }
    if removed.iter().all(|&r| r) {
        return Err(DemoError::Input(
            "cannot mask all three modalities".into(),
        ));
    }
    for m in Modality::ALL {
        if removed[m.index()] {
            out.images[m.index()].data.iter_mut().for_each(|x| *x = 0.0);
            for p in &mut out.present {
                p[m.index()] = false;
            }
        }
    }
    Ok(out)
}
