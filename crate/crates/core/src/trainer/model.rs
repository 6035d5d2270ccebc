//! A small rectifier network whose dense layers are frozen bases with
//! optional low-rank adapters.

use std::borrow::Cow;

use crate::checkpoint::{quantized_checksum, Checkpoint, Section};
use crate::error::{Error, Result};
use crate::lora::{AdapterGradients, LowRankUpdate};
use crate::numerics::{matmul, Matrix, SeededRng};
use crate::prune::{apply_mask, PruneMask};
use crate::quant::{dequantize, quantize, QuantizedTensor};

/// Frozen weights, full precision or quantized (expanded on every use).
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenBase {
    Full(Matrix),
    Quantized(QuantizedTensor),
}

impl FrozenBase {
    pub fn weight(&self) -> Result<Cow<'_, Matrix>> {
        match self {
            FrozenBase::Full(m) => Ok(Cow::Borrowed(m)),
            FrozenBase::Quantized(q) => Ok(Cow::Owned(dequantize(q)?)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            FrozenBase::Full(m) => m.shape(),
            FrozenBase::Quantized(q) => q.shape(),
        }
    }

    /// Checksum of the stored representation.
    pub fn checksum(&self) -> u64 {
        match self {
            FrozenBase::Full(m) => m.checksum(),
            FrozenBase::Quantized(q) => quantized_checksum(q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub base: FrozenBase,
    pub adapter: Option<LowRankUpdate>,
    /// When present, the effective weight `(W0 + ΔW) ⊙ M` is used.
    pub mask: Option<PruneMask>,
}

impl Layer {
    pub fn frozen(base: Matrix) -> Self {
        Layer {
            base: FrozenBase::Full(base),
            adapter: None,
            mask: None,
        }
    }

    /// `W0 + (α/r)·B·A`, masked when a mask is attached.
    pub fn effective_weight(&self) -> Result<Matrix> {
        let base = self.base.weight()?;
        let merged = match &self.adapter {
            Some(u) => base.add(&u.delta_weight()?)?,
            None => base.into_owned(),
        };
        match &self.mask {
            Some(m) => apply_mask(&merged, m),
            None => Ok(merged),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if self.mask.is_some() {
            return matmul(&self.effective_weight()?, x);
        }
        let out = matmul(&*self.base.weight()?, x)?;
        match &self.adapter {
            Some(u) => out.add(&u.apply(x)?),
            None => Ok(out),
        }
    }

    /// Adapter gradients and `∂L/∂x` for this layer.
    fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<(Option<AdapterGradients>, Matrix)> {
        match (&self.mask, &self.adapter) {
            (None, adapter) => {
                let base_t = self.base.weight()?.transpose();
                let mut dx = matmul(&base_t, upstream)?;
                let grads = match adapter {
                    Some(u) => {
                        dx = dx.add(&u.input_gradient(upstream)?)?;
                        Some(u.gradients(x, upstream)?)
                    }
                    None => None,
                };
                Ok((grads, dx))
            }
            (Some(mask), adapter) => {
                // ∂L/∂W_eff = (G·xᵀ) ⊙ M; chain through W_eff = W0 + s·B·A.
                let dx = matmul(&self.effective_weight()?.transpose(), upstream)?;
                let grads = match adapter {
                    Some(u) => {
                        let gw = apply_mask(&matmul(upstream, &x.transpose())?, mask)?;
                        let s = u.scaling();
                        Some(AdapterGradients {
                            grad_a: matmul(&u.b().transpose(), &gw)?.scale(s)?,
                            grad_b: matmul(&gw, &u.a().transpose())?.scale(s)?,
                        })
                    }
                    None => None,
                };
                Ok((grads, dx))
            }
        }
    }
}

/// Per-layer adapter gradients (`None` for layers without an adapter).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub layers: Vec<Option<AdapterGradients>>,
}

impl ModelGradients {
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(AdapterGradients::norm_sq)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        Ok(ModelGradients {
            layers: self
                .layers
                .iter()
                .map(|g| g.as_ref().map(|g| g.scale(factor)).transpose())
                .collect::<Result<_>>()?,
        })
    }

    pub fn add(&self, other: &ModelGradients) -> Result<Self> {
        Ok(ModelGradients {
            layers: self
                .layers
                .iter()
                .zip(&other.layers)
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => a.add(b).map(Some),
                    (None, None) => Ok(None),
                    _ => Err(Error::consistency("gradient layouts differ")),
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Layers applied in order with a rectifier between consecutive layers
/// (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<Layer>,
}

struct Trace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

fn relu(m: &Matrix) -> Result<Matrix> {
    m.map(|v| v.max(0.0))
}

impl ToyModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("model needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            let (d, _) = pair[0].base.shape();
            let (_, k) = pair[1].base.shape();
            if d != k {
                return Err(Error::shape(
                    "model layer chain",
                    pair[0].base.shape(),
                    pair[1].base.shape(),
                ))
                .map_err(|e| Error::param(format!("layers {i} and {}: {e}", i + 1)));
            }
        }
        Ok(ToyModel { layers })
    }

    pub fn from_bases(bases: Vec<Matrix>) -> Result<Self> {
        Self::new(bases.into_iter().map(Layer::frozen).collect())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].base.shape().1
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].base.shape().0
    }

    /// Attaches fresh adapters (Gaussian `A`, zero `B`) to the given layer
    /// indices, or to every layer when `which` is empty.
    pub fn attach_adapters(
        &mut self,
        rng: &mut SeededRng,
        rank: usize,
        alpha: f64,
        init_stddev: f64,
        which: &[usize],
    ) -> Result<()> {
        if let Some(&bad) = which.iter().find(|&&i| i >= self.layers.len()) {
            return Err(Error::param(format!("adapter layer index {bad} out of range")));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if which.is_empty() || which.contains(&i) {
                let (d, k) = layer.base.shape();
                layer.adapter = Some(LowRankUpdate::init(rng, d, k, rank, alpha, init_stddev)?);
            }
        }
        Ok(())
    }

    /// Replaces every full-precision base with its absmax quantization.
    pub fn quantize_bases(&mut self, bits: u8) -> Result<()> {
        for layer in &mut self.layers {
            if let FrozenBase::Full(m) = &layer.base {
                layer.base = FrozenBase::Quantized(quantize(m, bits)?);
            }
        }
        Ok(())
    }

    pub fn base_checksums(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.base.checksum()).collect()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LowRankUpdate> {
        self.layers.iter().filter_map(|l| l.adapter.as_ref())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.0)
    }

    fn forward_trace(&self, x: &Matrix) -> Result<(Matrix, Trace)> {
        if x.rows() != self.input_dim() {
            return Err(Error::shape("model forward", self.layers[0].base.shape(), x.shape()));
        }
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            trace.inputs.push(h);
            h = if i + 1 < self.layers.len() {
                relu(&z)?
            } else {
                z.clone()
            };
            trace.pre_activations.push(z);
        }
        Ok((h, trace))
    }

    /// Mean squared error over all output entries.
    pub fn loss(&self, x: &Matrix, targets: &Matrix) -> Result<f64> {
        let y = self.forward(x)?;
        mse(&y, targets)
    }

    /// Loss and adapter gradients for one batch (samples are columns).
    pub fn loss_and_gradients(&self, x: &Matrix, targets: &Matrix) -> Result<(f64, ModelGradients)> {
        let (y, trace) = self.forward_trace(x)?;
        let loss = mse(&y, targets)?;
        let n = y.len() as f64;
        let mut upstream = y.sub(targets)?.scale(2.0 / n)?;
        let mut grads = vec![None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let (g, dx) = self.layers[i].backward(&trace.inputs[i], &upstream)?;
            grads[i] = g;
            if i > 0 {
                let z = &trace.pre_activations[i - 1];
                let gate = z.map(|v| if v > 0.0 { 1.0 } else { 0.0 })?;
                upstream = dx.hadamard(&gate)?;
            }
        }
        Ok((loss, ModelGradients { layers: grads }))
    }

    /// Frozen bases, adapters and masks as checkpoint sections
    /// (`layer{i}.base`, `layer{i}.lora`, `layer{i}.mask`).
    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let base = match &layer.base {
                FrozenBase::Full(m) => Section::Matrix(m.clone()),
                FrozenBase::Quantized(q) => Section::Quantized(q.clone()),
            };
            ckpt.push(format!("layer{i}.base"), base)?;
            if let Some(u) = &layer.adapter {
                ckpt.push(
                    format!("layer{i}.lora"),
                    Section::Adapter {
                        update: u.clone(),
                        base_checksum: layer.base.checksum(),
                    },
                )?;
            }
            if let Some(m) = &layer.mask {
                ckpt.push(format!("layer{i}.mask"), Section::Mask(m.clone()))?;
            }
        }
        Ok(())
    }

    /// Inverse of [`ToyModel::to_checkpoint`]; adapter base checksums are
    /// verified.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let base = match ckpt.get(&format!("layer{i}.base")) {
                Some(Section::Matrix(m)) => FrozenBase::Full(m.clone()),
                Some(Section::Quantized(q)) => FrozenBase::Quantized(q.clone()),
                Some(_) => return Err(Error::format(format!("layer{i}.base has the wrong section kind"))),
                None => break,
            };
            let adapter = match ckpt.get(&format!("layer{i}.lora")) {
                Some(Section::Adapter { update, base_checksum }) => {
                    if *base_checksum != base.checksum() {
                        return Err(Error::consistency(format!(
                            "layer{i}: adapter was trained against base {base_checksum:016x}, found {:016x}",
                            base.checksum()
                        )));
                    }
                    Some(update.clone())
                }
                Some(_) => return Err(Error::format(format!("layer{i}.lora has the wrong section kind"))),
                None => None,
            };
            let mask = match ckpt.get(&format!("layer{i}.mask")) {
                Some(Section::Mask(m)) => Some(m.clone()),
                Some(_) => return Err(Error::format(format!("layer{i}.mask has the wrong section kind"))),
                None => None,
            };
            layers.push(Layer { base, adapter, mask });
        }
        if layers.is_empty() {
            return Err(Error::format("checkpoint has no layer0.base section"));
        }
        ToyModel::new(layers)
    }
}

pub fn mse(y: &Matrix, targets: &Matrix) -> Result<f64> {
    let diff = y.sub(targets)?;
    let loss = diff.frobenius_sq() / diff.len() as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    Ok(loss)
}
