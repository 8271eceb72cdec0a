use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{images_to_tensor, tensor_to_logits, Segment};
use crate::error::{Error, Result};
use crate::nn::{fit_spatial, leaky_relu, BatchNorm2d, Builder, Conv2d, ConvTranspose2d, Padding, ParamStore};
use crate::types::{check_spatial, Image, LogitMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterPreset {
    /// FCN-8s over a VGG-16 (batch-normalized) backbone.
    Full,
    /// Four-stage strided encoder with an additive skip decoder, leaky ReLUs.
    Desk,
}

impl std::str::FromStr for SegmenterPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SegmenterPreset::Full),
            "desk" => Ok(SegmenterPreset::Desk),
            other => Err(Error::Config(format!("unknown segmenter preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterCfg {
    pub num_classes: usize,
    pub preset: SegmenterPreset,
    /// Width of the first desk stage; ignored by the full preset.
    pub base_width: usize,
}

impl SegmenterCfg {
    pub fn desk(num_classes: usize) -> Self {
        SegmenterCfg {
            num_classes,
            preset: SegmenterPreset::Desk,
            base_width: 16,
        }
    }

    pub fn full(num_classes: usize) -> Self {
        SegmenterCfg {
            num_classes,
            preset: SegmenterPreset::Full,
            base_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("segmenter needs at least 2 classes".into()));
        }
        if self.base_width < 2 {
            return Err(Error::Config("segmenter base width must be >= 2".into()));
        }
        Ok(())
    }
}

/// Channel multipliers of the desk encoder stages (stage 0 is full resolution).
const DESK_SLOPE: f64 = 0.2;

pub(crate) const DESK_MULTIPLIERS: [usize; 5] = [1, 2, 4, 6, 6];

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
    /// Negative slope of the activation; 0 is a plain ReLU.
    slope: f64,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let mut b = b.push(name);
        Ok(ConvBn {
            conv: Conv2d::new(&mut b, "conv", c_in, c_out, kernel, stride, padding, Padding::Zero, true)?,
            bn: BatchNorm2d::new(&mut b, "bn", c_out)?,
            slope: 0.0,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let t = self.bn.forward(&self.conv.forward(x)?, train)?;
        if self.slope == 0.0 {
            Ok(t.relu()?)
        } else {
            leaky_relu(&t, self.slope)
        }
    }

    fn leaky(self) -> Self {
        // narrow desk layers lose whole classes to dead ReLU units
        ConvBn { slope: DESK_SLOPE, ..self }
    }
}

#[derive(Debug, Clone)]
struct DeskNet {
    stem: ConvBn,
    encoder: Vec<[ConvBn; 2]>,
    decoder: Vec<(ConvTranspose2d, ConvBn)>,
    head: Conv2d,
}

impl DeskNet {
    fn new<R: Rng>(b: &mut Builder<'_, R>, width: usize, k: usize) -> Result<Self> {
        let ch: Vec<usize> = DESK_MULTIPLIERS.iter().map(|m| m * width).collect();
        let stem = ConvBn::new(b, "stem", 3, ch[0], 3, 1, 1)?.leaky();
        let encoder = (1..ch.len())
            .map(|i| {
                let mut eb = b.push(&format!("enc{i}"));
                Ok([
                    ConvBn::new(&mut eb, "down", ch[i - 1], ch[i], 3, 2, 1)?.leaky(),
                    ConvBn::new(&mut eb, "conv", ch[i], ch[i], 3, 1, 1)?.leaky(),
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (1..ch.len())
            .rev()
            .map(|i| {
                let mut db = b.push(&format!("dec{i}"));
                Ok((
                    ConvTranspose2d::new(&mut db, "up", ch[i], ch[i - 1], 2, 2, 0, 0, true)?,
                    ConvBn::new(&mut db, "fuse", ch[i - 1], ch[i - 1], 3, 1, 1)?.leaky(),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(b, "head", ch[0], k, 1, 1, 0, Padding::Zero, true)?;
        Ok(DeskNet {
            stem,
            encoder,
            decoder,
            head,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut skips = vec![self.stem.forward(x, train)?];
        for [down, conv] in &self.encoder {
            let t = down.forward(skips.last().expect("non-empty"), train)?;
            skips.push(conv.forward(&t, train)?);
        }
        let mut t = skips.pop().expect("non-empty");
        for (up, fuse) in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let (_, _, h, w) = skip.dims4()?;
            let u = fit_spatial(&up.forward(&t)?, h, w)?;
            t = fuse.forward(&(u + skip)?, train)?;
        }
        self.head.forward(&t)
    }
}

/// VGG-16 stage widths and conv counts.
const VGG_STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
const FC_WIDTH: usize = 4096;

#[derive(Debug, Clone)]
struct Fcn8s {
    stages: Vec<Vec<ConvBn>>,
    fc6: Conv2d,
    fc7: Conv2d,
    score_fr: Conv2d,
    score_pool4: Conv2d,
    score_pool3: Conv2d,
    up2: ConvTranspose2d,
    up_pool4: ConvTranspose2d,
    up8: ConvTranspose2d,
}

impl Fcn8s {
    fn new<R: Rng>(b: &mut Builder<'_, R>, k: usize) -> Result<Self> {
        let mut c_in = 3;
        let mut stages = Vec::new();
        for (s, &(width, n)) in VGG_STAGES.iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..n {
                convs.push(ConvBn::new(b, &format!("features.{s}.{j}"), c_in, width, 3, 1, 1)?);
                c_in = width;
            }
            stages.push(convs);
        }
        Ok(Fcn8s {
            stages,
            fc6: Conv2d::new(b, "fc6", 512, FC_WIDTH, 7, 1, 3, Padding::Zero, true)?,
            fc7: Conv2d::new(b, "fc7", FC_WIDTH, FC_WIDTH, 1, 1, 0, Padding::Zero, true)?,
            score_fr: Conv2d::new(b, "score_fr", FC_WIDTH, k, 1, 1, 0, Padding::Zero, true)?,
            score_pool4: Conv2d::new(b, "score_pool4", 512, k, 1, 1, 0, Padding::Zero, true)?,
            score_pool3: Conv2d::new(b, "score_pool3", 256, k, 1, 1, 0, Padding::Zero, true)?,
            up2: ConvTranspose2d::new(b, "upscore2", k, k, 4, 2, 1, 0, false)?,
            up_pool4: ConvTranspose2d::new(b, "upscore_pool4", k, k, 4, 2, 1, 0, false)?,
            up8: ConvTranspose2d::new(b, "upscore8", k, k, 16, 8, 4, 0, false)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut t = x.clone();
        let mut pools = Vec::new();
        for convs in &self.stages {
            for c in convs {
                t = c.forward(&t, train)?;
            }
            t = t.max_pool2d(2)?;
            pools.push(t.clone());
        }
        let t = self.fc6.forward(&t)?.relu()?;
        let t = self.fc7.forward(&t)?.relu()?;
        let score = self.score_fr.forward(&t)?;
        let pool4 = &pools[3];
        let pool3 = &pools[2];
        let (_, _, h4, w4) = pool4.dims4()?;
        let fused = (fit_spatial(&self.up2.forward(&score)?, h4, w4)?
            + self.score_pool4.forward(pool4)?)?;
        let (_, _, h3, w3) = pool3.dims4()?;
        let fused = (fit_spatial(&self.up_pool4.forward(&fused)?, h3, w3)?
            + self.score_pool3.forward(pool3)?)?;
        fit_spatial(&self.up8.forward(&fused)?, h, w)
    }
}

#[derive(Debug, Clone)]
enum Net {
    Desk(DeskNet),
    Full(Box<Fcn8s>),
}

/// Fully convolutional segmenter producing logits at input resolution.
#[derive(Debug, Clone)]
pub struct Segmenter {
    cfg: SegmenterCfg,
    params: ParamStore,
    net: Net,
}

impl Segmenter {
    pub fn new<R: Rng>(cfg: SegmenterCfg, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::default();
        let mut b = Builder::new(&mut params, rng);
        let net = match cfg.preset {
            SegmenterPreset::Desk => Net::Desk(DeskNet::new(&mut b, cfg.base_width, cfg.num_classes)?),
            SegmenterPreset::Full => Net::Full(Box::new(Fcn8s::new(&mut b, cfg.num_classes)?)),
        };
        Ok(Segmenter { cfg, params, net })
    }

    pub fn cfg(&self) -> SegmenterCfg {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `[N, 3, H, W]` in, `[N, K, H, W]` logits out. `train` selects batch
    /// statistics (and updates the running estimates).
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::invalid(format!("segmenter expects 3 channels, got {c}")));
        }
        check_spatial(h, w)?;
        match &self.net {
            Net::Desk(n) => n.forward(x, train),
            Net::Full(n) => {
                if h < 32 || w < 32 {
                    return Err(Error::invalid(format!(
                        "full segmenter needs inputs of at least 32x32, got {h}x{w}"
                    )));
                }
                n.forward(x, train)
            }
        }
    }
}

impl Segment for Segmenter {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn segment(&self, x: &Image) -> Result<LogitMap> {
        let out = self.forward(&images_to_tensor(&[x])?, false)?;
        Ok(tensor_to_logits(&out)?.remove(0))
    }
}
