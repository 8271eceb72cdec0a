use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{images_to_tensor, tensor_to_images, Translate};
use crate::error::{Error, Result};
use crate::nn::{instance_norm, Builder, Conv2d, ConvTranspose2d, Padding, ParamStore};
use crate::types::{check_spatial, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorCfg {
    pub n_res_blocks: usize,
    pub base_width: usize,
}

impl Default for GeneratorCfg {
    fn default() -> Self {
        GeneratorCfg {
            n_res_blocks: 9,
            base_width: 64,
        }
    }
}

impl GeneratorCfg {
    pub fn desk() -> Self {
        GeneratorCfg {
            n_res_blocks: 9,
            base_width: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_res_blocks < 1 {
            return Err(Error::Config("generator needs at least one residual block".into()));
        }
        if self.base_width < 4 {
            return Err(Error::Config("generator base width must be >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = instance_norm(&self.conv1.forward(x)?)?.relu()?;
        let h = instance_norm(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }
}

/// ResNet translator: 7x7 stem, two stride-2 downsamplings, residual blocks,
/// two transposed-conv upsamplings, 7x7 head with tanh.
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorCfg,
    params: ParamStore,
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<ResBlock>,
    up: [ConvTranspose2d; 2],
    head: Conv2d,
}

impl Generator {
    pub fn new<R: Rng>(cfg: GeneratorCfg, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let mut params = ParamStore::default();
        let mut b = Builder::new(&mut params, rng);
        let stem = Conv2d::new(&mut b, "stem", 3, w, 7, 1, 3, Padding::Reflect, true)?;
        let down = [
            Conv2d::new(&mut b, "down1", w, 2 * w, 3, 2, 1, Padding::Zero, true)?,
            Conv2d::new(&mut b, "down2", 2 * w, 4 * w, 3, 2, 1, Padding::Zero, true)?,
        ];
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| {
                let mut rb = b.push(&format!("res{i}"));
                Ok(ResBlock {
                    conv1: Conv2d::new(&mut rb, "conv1", 4 * w, 4 * w, 3, 1, 1, Padding::Reflect, true)?,
                    conv2: Conv2d::new(&mut rb, "conv2", 4 * w, 4 * w, 3, 1, 1, Padding::Reflect, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up = [
            ConvTranspose2d::new(&mut b, "up1", 4 * w, 2 * w, 3, 2, 1, 1, true)?,
            ConvTranspose2d::new(&mut b, "up2", 2 * w, w, 3, 2, 1, 1, true)?,
        ];
        let head = Conv2d::new(&mut b, "head", w, 3, 7, 1, 3, Padding::Reflect, true)?;
        Ok(Generator {
            cfg,
            params,
            stem,
            down,
            blocks,
            up,
            head,
        })
    }

    pub fn cfg(&self) -> GeneratorCfg {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `[N, 3, H, W]` in, same shape out, bounded by tanh.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::invalid(format!("generator expects 3 channels, got {c}")));
        }
        check_spatial(h, w)?;
        let mut t = instance_norm(&self.stem.forward(x)?)?.relu()?;
        for conv in &self.down {
            t = instance_norm(&conv.forward(&t)?)?.relu()?;
        }
        for block in &self.blocks {
            t = block.forward(&t)?;
        }
        for conv in &self.up {
            t = instance_norm(&conv.forward(&t)?)?.relu()?;
        }
        Ok(self.head.forward(&t)?.tanh()?)
    }
}

impl Translate for Generator {
    fn translate(&self, x: &Image) -> Result<Image> {
        let out = self.forward(&images_to_tensor(&[x])?)?;
        Ok(tensor_to_images(&out)?.remove(0))
    }
}
