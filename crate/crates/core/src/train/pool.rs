use candle_core::Tensor;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::Result;

/// History of generated images replayed to the discriminator.
#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            images: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `fakes` is `[N, 3, H, W]`; returns a batch of the same shape. While the
    /// pool fills, each image is stored and returned as is; afterwards each
    /// image is, with probability 1/2, swapped for a random stored one.
    pub fn query<R: Rng + ?Sized>(&mut self, fakes: &Tensor, rng: &mut R) -> Result<Tensor> {
        let fakes = fakes.detach();
        if self.capacity == 0 {
            return Ok(fakes);
        }
        let n = fakes.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let img = fakes.get(i)?;
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.random_bool(0.5) {
                let j = rng.random_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[j], img));
            } else {
                out.push(img);
            }
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (i, t) in self.images.iter().enumerate() {
            ck.insert(format!("{prefix}.{i:05}"), t)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let head = format!("{prefix}.");
        self.images = ck
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&head))
            .map(|(_, t)| t.to_tensor())
            .collect::<Result<_>>()?;
        self.images.truncate(self.capacity);
        Ok(())
    }
}
