//! Recurrent U-Net generator.
//!
//! Volumes travel through the network as `[D, C, H, W]` tensors: the depth
//! axis doubles as the batch axis of every per-slice convolution and as the
//! time axis of every ConvLSTM.
//!
//! Encoder level `l` runs a ConvLSTM, a same-padded 3x3 convolution and a
//! 2x2 max pool. Its skip is the full hidden sequence from the LSTM plus the
//! final cell map. Decoder level `l`, deepest first, upsamples its input
//! with a transposed convolution (to `decoder_up_channels`), applies
//! InstanceNorm and LeakyReLU, then runs a ConvLSTM back to the encoder
//! width `F_l`, seeded with the skipped cell map. The LSTM output is
//! concatenated with the skipped hidden sequence and becomes the input of
//! the next level up. A 3x3 convolution and a sigmoid produce the class
//! probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::convlstm::{ConvLstm, GraphState};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvTranspose2};
use crate::params::{Bound, ParamStore};
use crate::tensor::{ConvSpec, Tensor};
use crate::volume::{MultiModalVolume, ProbabilityMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub encoder_filters: Vec<usize>,
    pub in_channels: usize,
    pub out_classes: usize,
    pub kernel: usize,
    pub pool: usize,
    pub leaky_slope: f64,
    /// Channel count produced by each decoder transposed convolution.
    pub decoder_up_channels: usize,
    pub norm_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            encoder_filters: vec![16, 32, 48, 64, 128],
            in_channels: 4,
            out_classes: 3,
            kernel: 3,
            pool: 2,
            leaky_slope: 0.01,
            decoder_up_channels: 8,
            norm_eps: 1e-5,
        }
    }
}

impl GeneratorConfig {
    pub fn levels(&self) -> usize {
        self.encoder_filters.len()
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.pool.pow(self.levels() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.encoder_filters;
        if f.len() != 5 {
            return Err(Error::Config(format!("expected 5 encoder levels, got {}", f.len())));
        }
        if f.windows(2).any(|w| w[0] >= w[1]) || f[0] == 0 {
            return Err(Error::Config(format!("encoder filters {f:?} must be strictly increasing")));
        }
        if self.pool != 2 {
            return Err(Error::Config("only 2x2 pooling is supported".into()));
        }
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.in_channels == 0 || self.out_classes == 0 || self.decoder_up_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Checks a `(C, D, H, W)` input against the configuration.
    pub fn check_input(&self, dims: (usize, usize, usize, usize)) -> Result<()> {
        let (c, d, h, w) = dims;
        let m = self.spatial_multiple();
        if c != self.in_channels || d == 0 {
            return Err(Error::shape(format!("({}, D>=1, H, W)", self.in_channels), dims));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidInput(format!(
                "spatial size {h}x{w} is not a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    /// `(C, D, H, W)` of every skip hidden sequence and of the bottleneck
    /// for an input of depth `d` and size `h x w`.
    pub fn encoder_dims(&self, d: usize, h: usize, w: usize) -> (Vec<[usize; 4]>, [usize; 4]) {
        let skips = self
            .encoder_filters
            .iter()
            .enumerate()
            .map(|(l, &f)| [f, d, h >> l, w >> l])
            .collect();
        let last = *self.encoder_filters.last().unwrap_or(&0);
        (skips, [last, d, h >> self.levels(), w >> self.levels()])
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    lstm: ConvLstm,
    conv: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    up: ConvTranspose2,
    lstm: ConvLstm,
}

/// Skips of one encoder level, graph side.
#[derive(Clone, Debug)]
pub struct Skip {
    /// `[D, F, h, w]`.
    pub h_seq: Var,
    /// `[1, F, h, w]` cell map after the last depth step.
    pub c_last: Var,
}

/// Skips of one encoder level, value side.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipLevel {
    pub h_seq: Tensor,
    pub c_last: Tensor,
}

pub type SkipBundle = Vec<SkipLevel>;

/// One row of [`Generator::describe`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = config.kernel;
        let f = &config.encoder_filters;
        let mut encoder = Vec::new();
        let mut c_in = config.in_channels;
        for (l, &fl) in f.iter().enumerate() {
            let lstm = ConvLstm::new(&mut params, &format!("gen.enc{l}.lstm"), c_in, fl, k, &mut rng);
            let conv = Conv2d::new(&mut params, &format!("gen.enc{l}.conv"), fl, fl, k, ConvSpec::same(k), &mut rng);
            encoder.push(EncoderBlock { lstm, conv });
            c_in = fl;
        }
        let u = config.decoder_up_channels;
        let mut decoder = Vec::new();
        for l in (0..f.len()).rev() {
            let up_in = if l + 1 == f.len() { f[l] } else { 2 * f[l + 1] };
            let up = ConvTranspose2::new(&mut params, &format!("gen.dec{l}.up"), up_in, u, &mut rng);
            let lstm = ConvLstm::new(&mut params, &format!("gen.dec{l}.lstm"), u, f[l], k, &mut rng);
            decoder.push(DecoderBlock { up, lstm });
        }
        let head = Conv2d::new(&mut params, "gen.head", 2 * f[0], config.out_classes, k, ConvSpec::same(k), &mut rng);
        Ok(Generator {
            config,
            params,
            encoder,
            decoder,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Closed-form parameter count of a configuration.
    pub fn count_params(config: &GeneratorConfig) -> usize {
        let k = config.kernel;
        let f = &config.encoder_filters;
        let u = config.decoder_up_channels;
        let mut total = 0;
        let mut c_in = config.in_channels;
        for (l, &fl) in f.iter().enumerate() {
            total += ConvLstm::param_count(c_in, fl, k) + Conv2d::param_count(fl, fl, k);
            let up_in = if l + 1 == f.len() { fl } else { 2 * f[l + 1] };
            total += ConvTranspose2::param_count(up_in, u) + ConvLstm::param_count(u, fl, k);
            c_in = fl;
        }
        total + Conv2d::param_count(2 * f[0], config.out_classes, k)
    }

    pub fn describe(&self) -> Vec<LayerInfo> {
        self.params
            .iter()
            .map(|(name, t)| LayerInfo {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                count: t.numel(),
            })
            .collect()
    }

    /// Encoder on `x: [D, C, H, W]`: returns the pooled bottleneck and one
    /// skip per level.
    pub fn encode_graph(&self, g: &Graph, p: &Bound, x: &Var) -> Result<(Var, Vec<Skip>)> {
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (_, _, h, w) = cur.value().dims4();
            let init = GraphState::zeros(g, block.lstm.filters, h, w);
            let (h_seq, last) = block.lstm.unroll(g, p, &cur, init)?;
            let y = block.conv.forward(g, p, &h_seq)?;
            cur = g.max_pool2(&y);
            skips.push(Skip { h_seq, c_last: last.c });
        }
        Ok((cur, skips))
    }

    /// Decoder; returns probabilities `[D, classes, H, W]`.
    pub fn decode_graph(&self, g: &Graph, p: &Bound, bottleneck: &Var, skips: &[Skip]) -> Result<Var> {
        if skips.len() != self.encoder.len() {
            return Err(Error::shape(self.encoder.len(), skips.len()));
        }
        let mut cur = bottleneck.clone();
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = block.up.forward(g, p, &cur)?;
            if up.shape()[2..] != skip.h_seq.shape()[2..] || up.shape()[0] != skip.h_seq.shape()[0] {
                return Err(Error::shape(skip.h_seq.shape(), up.shape()));
            }
            let up = g.leaky_relu(&g.instance_norm(&up, self.config.norm_eps), self.config.leaky_slope);
            let (_, _, h, w) = up.value().dims4();
            let init = GraphState {
                h: g.constant(Tensor::zeros(&[1, block.lstm.filters, h, w])),
                c: skip.c_last.clone(),
            };
            let (h_seq, _) = block.lstm.unroll(g, p, &up, init)?;
            cur = g.concat(&[&skip.h_seq, &h_seq])?;
        }
        let logits = self.head.forward(g, p, &cur)?;
        Ok(g.sigmoid(&logits))
    }

    pub fn forward_graph(&self, g: &Graph, p: &Bound, x: &Var) -> Result<Var> {
        let (_, c, h, w) = x.value().dims4();
        self.config.check_input((c, x.shape()[0], h, w))?;
        let (bottleneck, skips) = self.encode_graph(g, p, x)?;
        self.decode_graph(g, p, &bottleneck, &skips)
    }

    /// Inference-mode encoder on a volume; the bottleneck is `(F, D, h, w)`
    /// ordered as `[D, F, h, w]`.
    pub fn encode(&self, vol: &MultiModalVolume) -> Result<(Tensor, SkipBundle)> {
        self.config.check_input(vol.dim())?;
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let x = g.constant(vol.to_tensor());
        let (b, skips) = self.encode_graph(&g, &p, &x)?;
        let skips = skips
            .into_iter()
            .map(|s| SkipLevel {
                h_seq: s.h_seq.value().clone(),
                c_last: s.c_last.value().clone(),
            })
            .collect();
        Ok((b.value().clone(), skips))
    }

    pub fn decode(&self, bottleneck: &Tensor, skips: &SkipBundle) -> Result<ProbabilityMask> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let skips: Vec<Skip> = skips
            .iter()
            .map(|s| Skip {
                h_seq: g.constant(s.h_seq.clone()),
                c_last: g.constant(s.c_last.clone()),
            })
            .collect();
        let out = self.decode_graph(&g, &p, &g.constant(bottleneck.clone()), &skips)?;
        ProbabilityMask::from_tensor(out.value())
    }

    /// Deterministic inference-mode forward pass.
    pub fn forward(&self, vol: &MultiModalVolume) -> Result<ProbabilityMask> {
        let g = Graph::inference();
        let p = self.params.bind(&g);
        let out = self.forward_graph(&g, &p, &g.constant(vol.to_tensor()))?;
        ProbabilityMask::from_tensor(out.value())
    }
}
