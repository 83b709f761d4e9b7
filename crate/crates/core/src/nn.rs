//! Parameter store and the handful of layers the branch networks need.
//!
//! Initialization is drawn from a seeded ChaCha stream (candle's own CPU
//! random source is not seedable), matching the usual uniform
//! `±1/sqrt(fan_in)` scheme for weights and biases.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Constant(f64),
}

/// Named, ordered collection of trainable variables.
#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.params.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        ParamStore { dtype, device: Device::Cpu, params: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} created twice")));
        }
        let len: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..len).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; len],
            Init::Constant(v) => vec![v; len],
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.params.values() {
            let flat = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if flat.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Copies every value from `other`, which must hold the same names and shapes.
    pub fn load_from(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Contract("parameter sets differ in size".into()));
        }
        for (name, var) in &self.params {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Contract(format!("shape mismatch for {name}")));
            }
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy with detached storage.
    pub fn snapshot(&self) -> Result<ParamStore> {
        let mut params = BTreeMap::new();
        for (name, var) in &self.params {
            params.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(ParamStore { dtype: self.dtype, device: self.device.clone(), params })
    }

    pub fn insert(&mut self, name: String, tensor: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&tensor.to_dtype(self.dtype)?)?;
        self.params.insert(name, var);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, zero: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::Uniform { fan_in: inputs } };
        let weight = store.create(&format!("{name}.weight"), &[outputs, inputs], init, rng)?;
        let bias = store.create(&format!("{name}.bias"), &[outputs], init, rng)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let init = Init::Uniform { fan_in };
        let weight = store.create(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], init, rng)?;
        let bias = store.create(&format!("{name}.bias"), &[out_channels], init, rng)?;
        Ok(Conv2d { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        let bias = self.bias.as_tensor().reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&bias)?)
    }
}

/// Stack of linear layers with SiLU between them (not after the last one).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`. With `zero_last`, the output layer
    /// starts at zero.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], zero_last: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs input and output widths")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], zero_last && i + 1 == n, rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

/// Feature extractor shared by the classifier and the latent encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Backbone {
    /// Fully connected layers over the flattened input.
    Mlp { hidden: Vec<usize> },
    /// 3x3 stride-2 convolutions (one per entry of `channels`) followed by a
    /// dense layer of width `hidden`.
    Conv { channels: Vec<usize>, hidden: usize },
}

impl Backbone {
    pub fn output_dim(&self) -> usize {
        match self {
            Backbone::Mlp { hidden } => *hidden.last().unwrap_or(&0),
            Backbone::Conv { hidden, .. } => *hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Backbone::Mlp { hidden } => !hidden.is_empty() && hidden.iter().all(|&h| h > 0),
            Backbone::Conv { channels, hidden } => {
                (1..=4).contains(&channels.len()) && channels.iter().all(|&c| c > 0) && *hidden > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid backbone {self:?} (conv trunks take 1-4 blocks)")))
        }
    }
}

#[derive(Debug, Clone)]
pub enum Trunk {
    Mlp(Mlp),
    Conv { convs: Vec<Conv2d>, dense: Linear },
}

impl Trunk {
    pub fn new(store: &mut ParamStore, name: &str, backbone: &Backbone, input: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self> {
        backbone.validate()?;
        match backbone {
            Backbone::Mlp { hidden } => {
                let mut widths = vec![input.iter().product()];
                widths.extend(hidden);
                // every layer of a trunk is followed by an activation, see `forward`
                Ok(Trunk::Mlp(Mlp::new(store, name, &widths, false, rng)?))
            }
            Backbone::Conv { channels, hidden } => {
                let [mut c, mut h, mut w] = input;
                let mut convs = Vec::with_capacity(channels.len());
                for (i, &out) in channels.iter().enumerate() {
                    convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c, out, 3, 2, 1, rng)?);
                    c = out;
                    h = (h - 1) / 2 + 1;
                    w = (w - 1) / 2 + 1;
                }
                let dense = Linear::new(store, &format!("{name}.dense"), c * h * w, *hidden, false, rng)?;
                Ok(Trunk::Conv { convs, dense })
            }
        }
    }

    /// `x` has shape `(batch, channels, height, width)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Trunk::Mlp(mlp) => Ok(mlp.forward(&x.flatten_from(1)?)?.silu()?),
            Trunk::Conv { convs, dense } => {
                let mut h = x.clone();
                for conv in convs {
                    h = conv.forward(&h)?.silu()?;
                }
                Ok(dense.forward(&h.flatten_from(1)?)?.silu()?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_trunk_output_shape() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = Backbone::Conv { channels: vec![4, 8], hidden: 16 };
        let trunk = Trunk::new(&mut store, "t", &backbone, [1, 28, 28], &mut rng).unwrap();
        let x = Tensor::zeros((3, 1, 28, 28), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(trunk.forward(&x).unwrap().dims(), &[3, 16]);
        assert_eq!(backbone.output_dim(), 16);
        assert!(store.get("t.conv1.weight").is_some());
    }

    #[test]
    fn zero_last_layer_outputs_bias_free_zeros() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], true, &mut rng).unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0, 0.5]], &Device::Cpu).unwrap();
        assert_eq!(mlp.forward(&x).unwrap().to_vec2::<f64>().unwrap(), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn snapshot_is_independent() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.create("w", &[2], Init::Constant(1.0), &mut rng).unwrap();
        let snap = store.snapshot().unwrap();
        store.get("w").unwrap().set(&Tensor::new(&[5f32, 5.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(snap.get("w").unwrap().as_tensor().to_vec1::<f32>().unwrap(), vec![1.0, 1.0]);
        snap.load_from(&store).unwrap();
        assert_eq!(snap.get("w").unwrap().as_tensor().to_vec1::<f32>().unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn bad_backbones_are_rejected() {
        assert!(Backbone::Mlp { hidden: vec![] }.validate().is_err());
        assert!(Backbone::Conv { channels: vec![1; 5], hidden: 3 }.validate().is_err());
    }
}
