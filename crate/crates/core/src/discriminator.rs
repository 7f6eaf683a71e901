//! Patch discriminator scoring (image, mask) pairs slice by slice.
//!
//! All kernels have depth 1, so the network is a 2D convolution stack
//! applied to every depth slice independently; depth rides on the batch
//! axis like in the generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Bound, ParamStore};
use crate::tensor::{ConvSpec, Padding, Tensor};
use crate::volume::MultiModalVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub dropout: f64,
    pub in_channels: usize,
    /// Turning this off replaces every InstanceNorm by the identity.
    pub instance_norm: bool,
    pub norm_eps: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            filters: vec![16, 32, 64, 128],
            kernel: 3,
            dropout: 0.2,
            in_channels: 7,
            instance_norm: true,
            norm_eps: 1e-5,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(Error::Config(format!("bad discriminator filters {:?}", self.filters)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Spatial size after the strided blocks.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let step = |n: usize| (n.max(k) - k) / k + 1;
        self.filters.iter().fold((h, w), |(h, w), _| (step(h), step(w)))
    }
}

/// Strided, unpadded convolution; inputs smaller than the kernel are
/// zero-padded at the bottom and right up to the kernel size.
fn strided_spec(k: usize, h: usize, w: usize) -> ConvSpec {
    ConvSpec {
        stride: (k, k),
        padding: Padding {
            top: 0,
            bottom: k.saturating_sub(h),
            left: 0,
            right: k.saturating_sub(w),
        },
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    blocks: Vec<Conv2d>,
    out: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = config.kernel;
        let mut c_in = config.in_channels;
        let mut blocks = Vec::new();
        for (i, &f) in config.filters.iter().enumerate() {
            // the padding is chosen per call; see `strided_spec`
            let spec = strided_spec(k, k, k);
            blocks.push(Conv2d::new(&mut params, &format!("disc.block{i}.conv"), c_in, f, k, spec, &mut rng));
            c_in = f;
        }
        let out = Conv2d::new(&mut params, "disc.out", c_in, 1, k, ConvSpec::same(k), &mut rng);
        Ok(Discriminator {
            config,
            params,
            blocks,
            out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scores `x: [D, in_channels, H, W]`; returns `[D, 1, h, w]` in (0, 1).
    /// Dropout is applied when `dropout_rng` is given.
    pub fn forward_graph(
        &self,
        g: &Graph,
        p: &Bound,
        x: &Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != self.config.in_channels {
            return Err(Error::shape(format!("[D, {}, H, W]", self.config.in_channels), x.shape()));
        }
        let k = self.config.kernel;
        let mut cur = x.clone();
        for block in &self.blocks {
            let (_, _, h, w) = cur.value().dims4();
            let y = g.conv2d(&cur, p.var(block.weight), Some(p.var(block.bias)), strided_spec(k, h, w))?;
            let y = if self.config.instance_norm {
                g.instance_norm(&y, self.config.norm_eps)
            } else {
                y
            };
            let y = g.tanh(&y);
            cur = match dropout_rng.as_deref_mut() {
                Some(rng) if self.config.dropout > 0.0 => {
                    let mask = channel_dropout_mask(y.shape(), self.config.dropout, rng);
                    g.mul_const(&y, mask)?
                }
                _ => y,
            };
        }
        let logits = self.out.forward(g, p, &cur)?;
        Ok(g.sigmoid(&logits))
    }

    /// Inference-mode score of an image with a 3-channel mask, both given
    /// as `[D, C, H, W]` tensors.
    pub fn discriminate(&self, image: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (d, _, h, w) = image.dims4();
        let (md, _, mh, mw) = mask.dims4();
        if (d, h, w) != (md, mh, mw) {
            return Err(Error::shape(image.shape(), mask.shape()));
        }
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let x = g.concat(&[&g.constant(image.clone()), &g.constant(mask.clone())])?;
        Ok(self.forward_graph(&g, &p, &x, None)?.value().clone())
    }

    pub fn discriminate_volume(&self, vol: &MultiModalVolume, mask: &Tensor) -> Result<Tensor> {
        self.discriminate(&vol.to_tensor(), mask)
    }
}

/// Inverted dropout over whole `(slice, channel)` planes.
fn channel_dropout_mask(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let keep = 1.0 / (1.0 - rate);
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n * c {
        let v = if rng.gen::<f64>() < rate { 0.0 } else { keep };
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

/// Constant all-real and all-fake score maps of `shape`.
pub fn real_fake_targets(shape: &[usize]) -> (Tensor, Tensor) {
    (Tensor::full(shape, 1.0), Tensor::zeros(shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn parameter_count() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
        let expected = (7 * 16 + 16 * 32 + 32 * 64 + 64 * 128 + 128) * 9 + 16 + 32 + 64 + 128 + 1;
        assert_eq!(d.num_params(), expected);
        assert_eq!(expected, 99_169);
    }

    #[test]
    fn full_resolution_gives_three_by_three_per_slice() {
        let cfg = DiscriminatorConfig::default();
        // (256 - 3) / 3 + 1 = 85 -> 28 -> 9 -> 3
        let mut n = 256;
        let mut trace = vec![n];
        for _ in 0..4 {
            n = (n - 3) / 3 + 1;
            trace.push(n);
        }
        assert_eq!(trace, [256, 85, 28, 9, 3]);
        assert_eq!(cfg.output_hw(256, 256), (3, 3));
        let d = Discriminator::new(cfg, 1).unwrap();
        let s = d.discriminate(&random(&[2, 4, 256, 256], 2), &random(&[2, 3, 256, 256], 3)).unwrap();
        assert_eq!(s.shape(), &[2, 1, 3, 3]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn small_inputs_still_score() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 1).unwrap();
        assert_eq!(d.config.output_hw(32, 32), (1, 1));
        let s = d.discriminate(&random(&[3, 4, 32, 32], 4), &random(&[3, 3, 32, 32], 5)).unwrap();
        assert_eq!(s.shape(), &[3, 1, 1, 1]);
        // different inputs give different scores
        let t = d.discriminate(&random(&[3, 4, 32, 32], 6), &random(&[3, 3, 32, 32], 5)).unwrap();
        assert_ne!(s, t);
    }

    #[test]
    fn inference_is_deterministic_and_dropout_is_not() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 1).unwrap();
        let (img, mask) = (random(&[1, 4, 81, 81], 7), random(&[1, 3, 81, 81], 8));
        assert_eq!(d.discriminate(&img, &mask).unwrap(), d.discriminate(&img, &mask).unwrap());
        let g = Graph::inference();
        let p = d.params.bind(&g);
        let x = g.concat(&[&g.constant(img), &g.constant(mask)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = d.forward_graph(&g, &p, &x, Some(&mut rng)).unwrap();
        let b = d.forward_graph(&g, &p, &x, Some(&mut rng)).unwrap();
        assert_ne!(a.value(), b.value());
    }

    #[test]
    fn depth_permutation_commutes() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 2).unwrap();
        let img = random(&[3, 4, 27, 27], 9);
        let mask = random(&[3, 3, 27, 27], 10);
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| {
            let per = t.numel() / 3;
            let data: Vec<f64> = perm.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].to_vec()).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        let s = d.discriminate(&img, &mask).unwrap();
        let sp = d.discriminate(&permute(&img), &permute(&mask)).unwrap();
        assert_eq!(permute(&s), sp);
    }

    #[test]
    fn output_cell_sees_only_its_receptive_field() {
        let cfg = DiscriminatorConfig {
            instance_norm: false,
            ..Default::default()
        };
        let d = Discriminator::new(cfg, 3).unwrap();
        // a block-4 cell covers 81x81 input pixels; the same-padded output
        // conv widens cell (0, 0) to the block-4 cells (0..2, 0..2)
        let reach = 162;
        let img = random(&[1, 4, 256, 256], 11);
        let mask = random(&[1, 3, 256, 256], 12);
        let blank_outside = |t: &Tensor| {
            let mut t = t.clone();
            let c = t.shape()[1];
            for ch in 0..c {
                for y in 0..256 {
                    for x in 0..256 {
                        if y >= reach || x >= reach {
                            t.data_mut()[(ch * 256 + y) * 256 + x] = 0.0;
                        }
                    }
                }
            }
            t
        };
        let full = d.discriminate(&img, &mask).unwrap();
        let cut = d.discriminate(&blank_outside(&img), &blank_outside(&mask)).unwrap();
        assert_eq!(full.data()[0], cut.data()[0]);
        assert_ne!(full.data()[8], cut.data()[8]);
    }

    #[test]
    fn targets_match_requested_shape() {
        let (ones, zeros) = real_fake_targets(&[2, 1, 3, 3]);
        assert_eq!(ones.shape(), &[2, 1, 3, 3]);
        assert!(ones.data().iter().all(|&v| v == 1.0));
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }
}
