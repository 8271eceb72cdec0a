use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::AdvMode;
use crate::nn::{instance_norm, leaky_relu, Builder, Conv2d, Padding, ParamStore};

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorCfg {
    /// Number of stride-2 stages of the patch discriminator.
    pub n_layers: usize,
    pub base_width: usize,
    /// When non-zero, use a residual discriminator with this many blocks
    /// instead of the patch stack.
    pub residual_blocks: usize,
}

impl Default for DiscriminatorCfg {
    fn default() -> Self {
        DiscriminatorCfg {
            n_layers: 3,
            base_width: 64,
            residual_blocks: 0,
        }
    }
}

impl DiscriminatorCfg {
    pub fn desk() -> Self {
        DiscriminatorCfg {
            base_width: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 {
            return Err(Error::Config("discriminator needs n_layers >= 1".into()));
        }
        if self.base_width < 1 {
            return Err(Error::Config("discriminator base width must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial size of the score map for an `h x w` input, or `None` when the
    /// input is too small to produce any score.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let side = |mut n: usize| -> Option<usize> {
            if self.residual_blocks > 0 {
                // two 4x4 stride-2 convs (pad 1), then a 3x3 stride-1 head (pad 1)
                for _ in 0..2 {
                    n = (n + 2).checked_sub(4)? / 2 + 1;
                }
                return (n > 0).then_some(n);
            }
            for _ in 0..self.n_layers {
                n = (n + 2).checked_sub(4)? / 2 + 1;
            }
            for _ in 0..2 {
                n = (n + 2).checked_sub(4)? + 1;
            }
            (n > 0).then_some(n)
        };
        Some((side(h)?, side(w)?))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv2d,
    norm: bool,
}

#[derive(Debug, Clone)]
enum Body {
    Patch(Vec<Stage>),
    Residual {
        stem: [Stage; 2],
        blocks: Vec<(Conv2d, Conv2d)>,
    },
}

/// Scores overlapping image patches as real or generated.
#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorCfg,
    sigmoid: bool,
    params: ParamStore,
    body: Body,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<R: Rng>(cfg: DiscriminatorCfg, mode: AdvMode, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let mut params = ParamStore::default();
        let mut b = Builder::new(&mut params, rng);
        let (body, head) = if cfg.residual_blocks == 0 {
            let mut stages = vec![Stage {
                conv: Conv2d::new(&mut b, "conv0", 3, w, 4, 2, 1, Padding::Zero, true)?,
                norm: false,
            }];
            let mut width = w;
            for n in 1..cfg.n_layers {
                let next = w * (1 << n.min(3));
                stages.push(Stage {
                    conv: Conv2d::new(&mut b, &format!("conv{n}"), width, next, 4, 2, 1, Padding::Zero, true)?,
                    norm: true,
                });
                width = next;
            }
            let next = w * (1 << cfg.n_layers.min(3));
            stages.push(Stage {
                conv: Conv2d::new(&mut b, &format!("conv{}", cfg.n_layers), width, next, 4, 1, 1, Padding::Zero, true)?,
                norm: true,
            });
            let head = Conv2d::new(&mut b, "head", next, 1, 4, 1, 1, Padding::Zero, true)?;
            (Body::Patch(stages), head)
        } else {
            let stem = [
                Stage {
                    conv: Conv2d::new(&mut b, "conv0", 3, w, 4, 2, 1, Padding::Zero, true)?,
                    norm: false,
                },
                Stage {
                    conv: Conv2d::new(&mut b, "conv1", w, 2 * w, 4, 2, 1, Padding::Zero, true)?,
                    norm: true,
                },
            ];
            let blocks = (0..cfg.residual_blocks)
                .map(|i| {
                    let mut rb = b.push(&format!("res{i}"));
                    Ok((
                        Conv2d::new(&mut rb, "conv1", 2 * w, 2 * w, 3, 1, 1, Padding::Reflect, true)?,
                        Conv2d::new(&mut rb, "conv2", 2 * w, 2 * w, 3, 1, 1, Padding::Reflect, true)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let head = Conv2d::new(&mut b, "head", 2 * w, 1, 3, 1, 1, Padding::Zero, true)?;
            (Body::Residual { stem, blocks }, head)
        };
        Ok(Discriminator {
            cfg,
            sigmoid: mode == AdvMode::Bce,
            params,
            body,
            head,
        })
    }

    pub fn cfg(&self) -> DiscriminatorCfg {
        self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `[N, 3, H, W]` in, `[N, 1, H', W']` patch scores out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if self.cfg.output_size(h, w).is_none() {
            return Err(Error::invalid(format!(
                "input {h}x{w} is too small for the discriminator"
            )));
        }
        let stage = |s: &Stage, t: &Tensor| -> Result<Tensor> {
            let y = s.conv.forward(t)?;
            let y = if s.norm { instance_norm(&y)? } else { y };
            leaky_relu(&y, SLOPE)
        };
        let mut t = x.clone();
        match &self.body {
            Body::Patch(stages) => {
                for s in stages {
                    t = stage(s, &t)?;
                }
            }
            Body::Residual { stem, blocks } => {
                for s in stem {
                    t = stage(s, &t)?;
                }
                for (c1, c2) in blocks {
                    let h = leaky_relu(&instance_norm(&c1.forward(&t)?)?, SLOPE)?;
                    let h = instance_norm(&c2.forward(&h)?)?;
                    t = (t + h)?;
                }
            }
        }
        let scores = self.head.forward(&t)?;
        if self.sigmoid {
            Ok((scores.neg()?.exp()? + 1.0)?.recip()?)
        } else {
            Ok(scores)
        }
    }
}
