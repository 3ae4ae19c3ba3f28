use rand::Rng;

use crate::error::{Error, Result};
use crate::media::frame::{FrameImage, Planes};
use crate::nn::{Conv2d, Graph, ParamStore, Var};
use crate::scalar::Scalar;
use crate::subject::map::{MapSource, SubjectMap};

/// Six-layer convolutional subject-map generator.
///
/// Three stride-2 convs (16/32/64 channels), two stride-1 convs, a 1x1
/// projection to one channel, bilinear upsampling back to the input size and a
/// sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentGenerator {
    pub prefix: String,
    convs: Vec<Conv2d>,
}

impl StudentGenerator {
    pub fn new(prefix: impl Into<String>) -> Self {
        let prefix = prefix.into();
        let layer = |i: usize, cin, cout, k, s| Conv2d::new(format!("{prefix}.conv{i}"), cin, cout, k, s);
        let convs = vec![
            layer(1, 3, 16, 3, 2),
            layer(2, 16, 32, 3, 2),
            layer(3, 32, 64, 3, 2),
            layer(4, 64, 32, 3, 1),
            layer(5, 32, 32, 3, 1),
            layer(6, 32, 1, 1, 1),
        ];
        Self { prefix, convs }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in &self.convs {
            c.init(store, rng);
        }
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv2d::num_params).sum()
    }

    /// `[B, 3, H, W] -> [B, 1, H, W]` in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, frames: Var) -> Result<Var> {
        let s = g.shape(frames).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dims("[B, 3, H, W]", &s));
        }
        let half = g.input(crate::tensor::Tensor::full(&s, T::lit(-0.5)));
        let mut x = g.add(frames, half)?;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(g, store, x)?;
            if i + 1 < self.convs.len() {
                x = g.relu(x);
            }
        }
        let x = g.upsample_bilinear(x, s[2], s[3])?;
        Ok(g.sigmoid(x))
    }

    /// Maps for a batch of frames. Pure given the parameters.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, frames: &[FrameImage]) -> Result<Vec<SubjectMap>> {
        let mut g = Graph::new();
        let x = g.input(Planes::batch(frames.iter().map(|f| f.planes()))?);
        let y = self.forward(&mut g, store, x)?;
        SubjectMap::unbatch(g.value(y), MapSource::Student)
    }

    /// Floating-point operations (multiply and add counted separately) for one frame.
    pub fn flops_per_frame(&self, height: usize, width: usize) -> u64 {
        let mut store = ParamStore::<f32>::new();
        self.init(&mut store, &mut rand::rng());
        let mut g = Graph::new();
        let x = g.input(crate::tensor::Tensor::zeros(&[1, 3, height, width]));
        self.forward(&mut g, &store, x).map(|_| g.flops()).unwrap_or(0)
    }
}

/// One map per frame from the student.
pub fn student_forward<T: Scalar>(
    gen: &StudentGenerator,
    store: &ParamStore<T>,
    frame: &FrameImage,
) -> Result<SubjectMap> {
    Ok(gen.predict(store, std::slice::from_ref(frame))?.remove(0))
}

/// Real/fake critic over a subject map concatenated with its frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub prefix: String,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(prefix: impl Into<String>) -> Self {
        let prefix = prefix.into();
        let layer = |i: usize, cin, cout| Conv2d::new(format!("{prefix}.conv{i}"), cin, cout, 3, 2);
        let convs = vec![layer(1, 4, 16), layer(2, 16, 32), layer(3, 32, 32), layer(4, 32, 1)];
        Self { prefix, convs }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for c in &self.convs {
            c.init(store, rng);
        }
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv2d::num_params).sum()
    }

    /// Maps `[B, 1, H, W]` and frames `[B, 3, H, W]` to one score each, `[B, 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, maps: Var, frames: Var) -> Result<Var> {
        let mut x = g.concat(&[maps, frames])?;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(g, store, x)?;
            if i + 1 < self.convs.len() {
                x = g.leaky_relu(x, T::lit(0.2));
            }
        }
        g.global_avg_pool(x)
    }
}
