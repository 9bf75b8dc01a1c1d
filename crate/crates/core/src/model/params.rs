use std::collections::BTreeMap;

use rand::Rng;

use super::{ModelConfig, ModelError};
use crate::ndcore::{Scalar, Tensor};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Expected shape of every named parameter for `cfg`.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = cfg.embed_dim;
    let h = cfg.hidden_dim;
    let c = cfg.classes;
    let mut shapes = vec![
        ("feature_encoder.weight".to_string(), vec![1, e]),
        ("feature_encoder.bias".to_string(), vec![e]),
        ("target_encoder.weight".to_string(), vec![1, e]),
        ("target_encoder.bias".to_string(), vec![e]),
        ("target_encoder.placeholder".to_string(), vec![e]),
    ];
    for l in 0..cfg.layers {
        for attn in ["feature_attn", "row_attn"] {
            for proj in ["q", "k", "v", "o"] {
                shapes.push((format!("layers.{l}.{attn}.w{proj}"), vec![e, e]));
                shapes.push((format!("layers.{l}.{attn}.b{proj}"), vec![e]));
            }
        }
        for norm in ["norm1", "norm2", "norm3"] {
            shapes.push((format!("layers.{l}.{norm}.gain"), vec![e]));
            shapes.push((format!("layers.{l}.{norm}.bias"), vec![e]));
        }
        shapes.push((format!("layers.{l}.ffn.w1"), vec![e, h]));
        shapes.push((format!("layers.{l}.ffn.b1"), vec![h]));
        shapes.push((format!("layers.{l}.ffn.w2"), vec![h, e]));
        shapes.push((format!("layers.{l}.ffn.b2"), vec![e]));
    }
    for dec in ["base_decoder", "shap_decoder"] {
        shapes.push((format!("{dec}.w1"), vec![e, h]));
        shapes.push((format!("{dec}.b1"), vec![h]));
        shapes.push((format!("{dec}.w2"), vec![h, c]));
        shapes.push((format!("{dec}.b2"), vec![c]));
    }
    shapes
}

impl<T: Scalar> Params<T> {
    /// Xavier-uniform weights, zero biases, unit norm gains.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_shapes(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gain") {
                vec![T::one(); n]
            } else if name.ends_with("placeholder") {
                (0..n).map(|_| T::of(rng.gen_range(-0.1..0.1))).collect()
            } else if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
            } else {
                vec![T::zero(); n]
            };
            tensors.insert(name, Tensor::new(shape, data).expect("init shape"));
        }
        Self { tensors }
    }

    /// Wraps named tensors, checking names and shapes against `cfg`.
    pub fn from_tensors(
        cfg: &ModelConfig,
        tensors: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, ModelError> {
        let expected = param_shapes(cfg);
        if expected.len() != tensors.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                None => return Err(ModelError::Params(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Params(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(t) if !t.all_finite() => {
                    return Err(ModelError::Params(format!("tensor `{name}` is not finite")))
                }
                Some(_) => {}
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Parameter count implied by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}
