//! Layer building blocks shared by the encoders, connector and decoder.

use detr3d_autograd::{BatchStats, BnMode, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Whether batchnorm uses batch statistics (and reports them) or the stored
/// running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Self::build(store, rng, name, inputs, outputs, true)
    }

    pub fn no_bias<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Self::build(store, rng, name, inputs, outputs, false)
    }

    fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[inputs, outputs], Init::UniformFanIn, rng)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), &[outputs], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias, inputs, outputs })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: store.add(&format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.buffer(&format!("{name}.running_var"), Tensor::ones(&[channels]))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: store.add(&format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
        })
    }
}

/// `linear → batchnorm → gelu`, the unit used throughout the encoders.
#[derive(Clone, Debug)]
pub struct LinearBnGelu {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl LinearBnGelu {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(LinearBnGelu {
            linear: Linear::new(store, rng, name, inputs, outputs)?,
            bn: BatchNorm::new(store, rng, &format!("{name}.bn"), outputs)?,
        })
    }
}

/// Batch statistics observed by one training-mode batchnorm call.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<T>,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Folds observed batch statistics into the running estimates, in order.
pub fn apply_bn_observations<T: Real>(store: &mut ParamStore<T>, obs: &[BnObservation<T>]) {
    let m = T::from_f64(BN_MOMENTUM);
    for o in obs {
        for (id, batch) in [(o.running_mean, &o.stats.mean), (o.running_var, &o.stats.var)] {
            let buf = store.get_mut(id).value.data_mut();
            for (r, &b) in buf.iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * b;
            }
        }
    }
}

/// A forward pass: the tape, the parameters it reads and the batchnorm
/// statistics it observed.
pub struct Ctx<'s, T: Real> {
    pub g: Graph<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    pub bn_obs: Vec<BnObservation<T>>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            mode,
            bn_obs: Vec::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn constant_rows(&mut self, rows: &[Vec<f64>]) -> Result<Var> {
        let cols = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::from_f64_slice(&[rows.len(), cols], &flat)?;
        Ok(self.g.constant(t))
    }

    pub fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        let w = self.p(l.weight);
        let b = l.bias.map(|b| self.p(b));
        Ok(self.g.linear(x, w, b)?)
    }

    pub fn batchnorm(&mut self, bn: &BatchNorm, x: Var) -> Result<Var> {
        let gamma = self.p(bn.gamma);
        let beta = self.p(bn.beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batchnorm(x, gamma, beta, BnMode::Train)?;
                if let Some(stats) = stats {
                    self.bn_obs.push(BnObservation {
                        running_mean: bn.running_mean,
                        running_var: bn.running_var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = self.store;
                let mean = store.value(bn.running_mean).data();
                let var = store.value(bn.running_var).data();
                let (y, _) = self.g.batchnorm(x, gamma, beta, BnMode::Eval { mean, var })?;
                Ok(y)
            }
        }
    }

    pub fn layernorm(&mut self, ln: &LayerNorm, x: Var) -> Result<Var> {
        let gamma = self.p(ln.gamma);
        let beta = self.p(ln.beta);
        Ok(self.g.layernorm(x, gamma, beta)?)
    }

    pub fn linear_bn_gelu(&mut self, block: &LinearBnGelu, x: Var) -> Result<Var> {
        let y = self.linear(&block.linear, x)?;
        let y = self.batchnorm(&block.bn, y)?;
        Ok(self.g.gelu(y))
    }

    /// Applies `block` to several row blocks at once, so a training-mode
    /// batchnorm sees the statistics of all of them together.
    pub fn linear_bn_gelu_parts(&mut self, block: &LinearBnGelu, parts: &[Var]) -> Result<Vec<Var>> {
        if parts.len() == 1 {
            return Ok(vec![self.linear_bn_gelu(block, parts[0])?]);
        }
        let rows: Vec<usize> = parts.iter().map(|&p| self.g.shape(p)[0]).collect();
        let x = self.g.concat_rows(parts)?;
        let y = self.linear_bn_gelu(block, x)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(parts.len());
        for r in rows {
            out.push(self.g.slice_rows(y, start, r)?);
            start += r;
        }
        Ok(out)
    }

    /// `linear → gelu → linear`.
    pub fn mlp2(&mut self, a: &Linear, b: &Linear, x: Var) -> Result<Var> {
        let h = self.linear(a, x)?;
        let h = self.g.gelu(h);
        self.linear(b, h)
    }

    pub fn value_rows(&self, v: Var) -> Vec<Vec<f64>> {
        let t = self.g.value(v);
        (0..t.rows()).map(|i| t.row(i).iter().map(|x| x.as_f64()).collect()).collect()
    }
}
