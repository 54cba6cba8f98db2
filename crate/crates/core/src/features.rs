use crate::grad::Tensor;

/// One utterance worth of frame features: `frames × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Self {
        assert!(frames > 0 && dim > 0, "empty feature matrix");
        assert_eq!(data.len(), frames * dim, "feature data length");
        FeatureMatrix { frames, dim, data }
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        FeatureMatrix::new(frames, dim, vec![0.0; frames * dim])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Contiguous frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> FeatureMatrix {
        assert!(len > 0 && start + len <= self.frames);
        FeatureMatrix::new(
            len,
            self.dim,
            self.data[start * self.dim..(start + len) * self.dim].to_vec(),
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.frames, self.dim, self.data.clone()).expect("feature shape")
    }

    /// Per-dimension mean over frames.
    pub fn time_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for t in 0..self.frames {
            for (a, b) in m.iter_mut().zip(self.frame(t)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }
}

/// Several feature matrices stacked frame-wise, with the row range of each.
#[derive(Clone, Debug)]
pub struct FrameBatch {
    pub frames: Tensor,
    pub segments: Vec<(usize, usize)>,
}

impl FrameBatch {
    pub fn stack<'a>(items: impl IntoIterator<Item = &'a FeatureMatrix>) -> Option<Self> {
        let mut data = Vec::new();
        let mut segments = Vec::new();
        let mut rows = 0;
        let mut dim = None;
        for m in items {
            if *dim.get_or_insert(m.dim()) != m.dim() {
                return None;
            }
            segments.push((rows, m.frames()));
            rows += m.frames();
            data.extend_from_slice(m.data());
        }
        let dim = dim?;
        Some(FrameBatch {
            frames: Tensor::matrix(rows, dim, data).ok()?,
            segments,
        })
    }

    pub fn dim(&self) -> usize {
        self.frames.dims2().1
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}
