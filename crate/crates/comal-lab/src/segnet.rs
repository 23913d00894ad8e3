//! Toy all-convolutional segmenter: image (h,w,3) -> per-pixel class
//! distribution (h,w,C). Three 3x3 tanh blocks, then a 1x1 projection to
//! logits and a per-pixel normalized exponential. No pooling or striding,
//! so input and output resolutions match.

use crate::ndgrad::io;
use crate::rng::DetRng;
use crate::synthworld::NUM_CLASSES;
use crate::{Error, Real, Result, Tensor};

pub const WIDTHS: [usize; 3] = [16, 32, 32];

#[derive(Clone)]
pub struct SegNet {
    pub classes: usize,
    pub k1: Tensor,
    pub b1: Tensor,
    pub k2: Tensor,
    pub b2: Tensor,
    pub k3: Tensor,
    pub b3: Tensor,
    pub k4: Tensor,
    pub b4: Tensor,
}

pub struct SegOutput {
    /// (h, w, C), rows on the simplex.
    pub probs: Tensor,
    /// Pre-normalization logits, kept for gradient analyses.
    pub logits: Tensor,
}

fn uniform_fan_in(rng: &mut DetRng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as Real).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::param(data, shape).unwrap()
}

impl SegNet {
    /// Fan-in-scaled uniform initialization, deterministic from the seed.
    pub fn init(seed: u64, classes: usize) -> SegNet {
        let mut rng = DetRng::new(seed).derive_str("segnet");
        let (w1, w2, w3) = (WIDTHS[0], WIDTHS[1], WIDTHS[2]);
        SegNet {
            classes,
            k1: uniform_fan_in(&mut rng, &[3, 3, 3, w1], 3 * 3 * 3),
            b1: Tensor::param(vec![0.0; w1], &[w1]).unwrap(),
            k2: uniform_fan_in(&mut rng, &[3, 3, w1, w2], 3 * 3 * w1),
            b2: Tensor::param(vec![0.0; w2], &[w2]).unwrap(),
            k3: uniform_fan_in(&mut rng, &[3, 3, w2, w3], 3 * 3 * w2),
            b3: Tensor::param(vec![0.0; w3], &[w3]).unwrap(),
            k4: uniform_fan_in(&mut rng, &[1, 1, w3, classes], w3),
            b4: Tensor::param(vec![0.0; classes], &[classes]).unwrap(),
        }
    }

    pub fn zeros(classes: usize) -> SegNet {
        let (w1, w2, w3) = (WIDTHS[0], WIDTHS[1], WIDTHS[2]);
        let z = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::param(vec![0.0; n], shape).unwrap()
        };
        SegNet {
            classes,
            k1: z(&[3, 3, 3, w1]),
            b1: z(&[w1]),
            k2: z(&[3, 3, w1, w2]),
            b2: z(&[w2]),
            k3: z(&[3, 3, w2, w3]),
            b3: z(&[w3]),
            k4: z(&[1, 1, w3, classes]),
            b4: z(&[classes]),
        }
    }

    pub fn forward(&self, image: &Tensor) -> Result<SegOutput> {
        let check = |t: Tensor, layer: &str| -> Result<Tensor> {
            if t.all_finite() {
                Ok(t)
            } else {
                Err(Error::NonFinite {
                    context: format!("segnet {layer}"),
                })
            }
        };
        let h1 = check(image.conv2d(&self.k1, 1)?.add_bias(&self.b1)?.tanh(), "conv1")?;
        let h2 = check(h1.conv2d(&self.k2, 1)?.add_bias(&self.b2)?.tanh(), "conv2")?;
        let h3 = check(h2.conv2d(&self.k3, 1)?.add_bias(&self.b3)?.tanh(), "conv3")?;
        let logits = check(h3.conv2d(&self.k4, 0)?.add_bias(&self.b4)?, "proj")?;
        let probs = logits.softmax(2)?;
        Ok(SegOutput { probs, logits })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.k1, &self.b1, &self.k2, &self.b2, &self.k3, &self.b3, &self.k4, &self.b4,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.k1,
            &mut self.b1,
            &mut self.k2,
            &mut self.b2,
            &mut self.k3,
            &mut self.b3,
            &mut self.k4,
            &mut self.b4,
        ]
    }

    pub fn param_names() -> [&'static str; 8] {
        ["k1", "b1", "k2", "b2", "k3", "b3", "k4", "b4"]
    }

    /// Detached copy (no gradients tracked through it).
    pub fn frozen(&self) -> SegNet {
        let mut net = self.clone();
        for p in net.params_mut() {
            *p = p.detach();
        }
        net
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let items: Vec<(String, Tensor)> = Self::param_names()
            .iter()
            .zip(self.params())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        io::save_container(path, &items)
    }

    pub fn load(path: &std::path::Path) -> Result<SegNet> {
        let items = io::load_container(path)?;
        let find = |name: &str| -> Result<Tensor> {
            items
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.to_param())
                .ok_or_else(|| Error::Parse(format!("segnet checkpoint missing {name}")))
        };
        let k4 = find("k4")?;
        let classes = k4.shape()[3];
        Ok(SegNet {
            classes,
            k1: find("k1")?,
            b1: find("b1")?,
            k2: find("k2")?,
            b2: find("b2")?,
            k3: find("k3")?,
            k4,
            b3: find("b3")?,
            b4: find("b4")?,
        })
    }
}

impl Default for SegNet {
    fn default() -> Self {
        SegNet::init(0, NUM_CLASSES)
    }
}
