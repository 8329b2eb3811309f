//! The data-driven student: two sigmoid MLP towers (one per side) mapping
//! `[visual; contextual]` into a shared latent space, inner-product
//! compatibility, the BPR loss and hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Side, Triplet};
use crate::error::{Error, Result};
use crate::numerics::{dot, matvec, matvec_transposed, sigmoid, softplus, Matrix, Vector};
use crate::params::{Parameters, TensorMut, TensorRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    /// Width of each hidden layer; the last one is the latent dimension.
    pub hidden_sizes: Vec<usize>,
    /// L2 coefficient on weight matrices (biases are not penalized).
    pub lambda_reg: f64,
}

impl StudentConfig {
    pub fn new(hidden_sizes: Vec<usize>, lambda_reg: f64) -> Result<Self> {
        let cfg = StudentConfig {
            hidden_sizes,
            lambda_reg,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One hidden layer of 1024 units.
    pub fn wide() -> Self {
        StudentConfig {
            hidden_sizes: vec![1024],
            lambda_reg: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::RejectedInput(
                "student needs at least one hidden layer and every width must be >= 1".into(),
            ));
        }
        if self.lambda_reg.is_nan() || self.lambda_reg < 0.0 {
            return Err(Error::RejectedInput("lambda_reg must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_sizes.len()
    }

    pub fn latent_dim(&self) -> usize {
        *self.hidden_sizes.last().unwrap_or(&0)
    }
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            hidden_sizes: vec![32],
            lambda_reg: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Layer {
            weight: Matrix::zeros(output, input),
            bias: Vector::zeros(output),
        }
    }

    fn forward(&self, x: &[f64]) -> Result<Vector> {
        let mut z = matvec(&self.weight, x)?;
        for (v, b) in z.iter_mut().zip(self.bias.iter()) {
            *v = sigmoid(*v + b);
        }
        Ok(z)
    }
}

/// Weights of both towers. The top and bottom towers never share parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub top: Vec<Layer>,
    pub bottom: Vec<Layer>,
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden_sizes: &[usize]) -> Self {
        let tower = || {
            let mut width = input_dim;
            hidden_sizes
                .iter()
                .map(|&h| {
                    let l = Layer::zeros(width, h);
                    width = h;
                    l
                })
                .collect::<Vec<_>>()
        };
        EncoderParams {
            top: tower(),
            bottom: tower(),
        }
    }

    /// Glorot-uniform weights in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init(input_dim: usize, cfg: &StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::RejectedInput("feature dimension must be >= 1".into()));
        }
        let mut params = EncoderParams::zeros(input_dim, &cfg.hidden_sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in params.top.iter_mut().chain(params.bottom.iter_mut()) {
            let (out, inp) = layer.weight.shape();
            let r = (6.0 / (inp + out) as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.random_range(-r..=r);
            }
        }
        Ok(params)
    }

    pub fn tower(&self, side: Side) -> &[Layer] {
        match side {
            Side::Top => &self.top,
            Side::Bottom => &self.bottom,
        }
    }

    fn tower_mut(&mut self, side: Side) -> &mut [Layer] {
        match side {
            Side::Top => &mut self.top,
            Side::Bottom => &mut self.bottom,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.top.first().map_or(0, |l| l.weight.cols())
    }

    pub fn latent_dim(&self) -> usize {
        self.top.last().map_or(0, |l| l.weight.rows())
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.top.iter().map(|l| l.weight.rows()).collect()
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (side, tower) in [("top", &self.top), ("bottom", &self.bottom)] {
            for (k, layer) in tower.iter().enumerate() {
                out.push(TensorRef {
                    name: format!("student.{side}.{k}.weight"),
                    shape: vec![layer.weight.rows(), layer.weight.cols()],
                    data: layer.weight.as_slice(),
                    decay: true,
                });
                out.push(TensorRef {
                    name: format!("student.{side}.{k}.bias"),
                    shape: vec![layer.bias.len()],
                    data: layer.bias.as_slice(),
                    decay: false,
                });
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        for (side, tower) in [("top", &mut self.top), ("bottom", &mut self.bottom)] {
            for (k, layer) in tower.iter_mut().enumerate() {
                out.push(TensorMut {
                    name: format!("student.{side}.{k}.weight"),
                    data: layer.weight.as_mut_slice(),
                    decay: true,
                });
                out.push(TensorMut {
                    name: format!("student.{side}.{k}.bias"),
                    data: &mut layer.bias,
                    decay: false,
                });
            }
        }
        out
    }
}

/// Latent representation of one item: the output of the last layer.
pub fn encode(params: &EncoderParams, side: Side, visual: &[f64], contextual: &[f64]) -> Result<Vector> {
    let acts = encode_with_activations(params, side, &Vector::concat(visual, contextual))?;
    Ok(acts.into_iter().last().unwrap_or_default())
}

/// All layer activations, input first, latent last.
pub fn encode_with_activations(params: &EncoderParams, side: Side, input: &[f64]) -> Result<Vec<Vector>> {
    let tower = params.tower(side);
    if tower.is_empty() {
        return Err(Error::RejectedInput("encoder has no layers".into()));
    }
    let mut acts = Vec::with_capacity(tower.len() + 1);
    acts.push(Vector::from(input.to_vec()));
    for layer in tower {
        let next = layer.forward(acts.last().unwrap())?;
        acts.push(next);
    }
    Ok(acts)
}

pub fn encode_item(params: &EncoderParams, item: &crate::catalog::Item) -> Result<Vector> {
    encode(params, item.side, &item.visual, &item.contextual)
}

/// Inner product of the two latent vectors.
pub fn compatibility(z_top: &[f64], z_bottom: &[f64]) -> Result<f64> {
    if z_top.len() != z_bottom.len() {
        return Err(Error::RejectedInput(format!(
            "latent lengths differ: {} vs {}",
            z_top.len(),
            z_bottom.len()
        )));
    }
    Ok(dot(z_top, z_bottom))
}

/// `-ln σ(m_ij - m_ik)`
pub fn bpr_loss(m_ij: f64, m_ik: f64) -> f64 {
    softplus(m_ik - m_ij)
}

/// Activations kept from a forward pass over one triplet.
#[derive(Debug, Clone)]
pub struct StudentCache {
    pub triplet: Triplet,
    top: Vec<Vector>,
    positive: Vec<Vector>,
    negative: Vec<Vector>,
}

impl StudentCache {
    pub fn top_latent(&self) -> &[f64] {
        self.top.last().unwrap()
    }

    pub fn positive_latent(&self) -> &[f64] {
        self.positive.last().unwrap()
    }

    pub fn negative_latent(&self) -> &[f64] {
        self.negative.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct StudentForward {
    pub m_ij: f64,
    pub m_ik: f64,
    pub cache: StudentCache,
}

/// Scores `(m_ij, m_ik)` for one triplet, encoding the top once.
pub fn student_forward(params: &EncoderParams, catalog: &Catalog, t: Triplet) -> Result<StudentForward> {
    if t.top >= catalog.num_tops() || t.positive >= catalog.num_bottoms() || t.negative >= catalog.num_bottoms() {
        return Err(Error::RejectedInput(format!("triplet {t:?} out of catalog range")));
    }
    let top = encode_with_activations(params, Side::Top, &catalog.top(t.top).features())?;
    let positive = encode_with_activations(params, Side::Bottom, &catalog.bottom(t.positive).features())?;
    let negative = encode_with_activations(params, Side::Bottom, &catalog.bottom(t.negative).features())?;
    let zt = top.last().unwrap();
    let m_ij = compatibility(zt, positive.last().unwrap())?;
    let m_ik = compatibility(zt, negative.last().unwrap())?;
    Ok(StudentForward {
        m_ij,
        m_ik,
        cache: StudentCache {
            triplet: t,
            top,
            positive,
            negative,
        },
    })
}

/// Gradient of `d_m_ij * m_ij + d_m_ik * m_ik` with respect to every parameter.
pub fn student_backward(params: &EncoderParams, cache: &StudentCache, d_m_ij: f64, d_m_ik: f64) -> Result<EncoderParams> {
    let mut grads = params.zeros_like();
    accumulate_student_backward(params, cache, d_m_ij, d_m_ik, &mut grads)?;
    Ok(grads)
}

/// Adds the gradient of [`student_backward`] into `grads`.
pub fn accumulate_student_backward(
    params: &EncoderParams,
    cache: &StudentCache,
    d_m_ij: f64,
    d_m_ik: f64,
    grads: &mut EncoderParams,
) -> Result<()> {
    check_cache(params, cache)?;
    if !grads.same_layout(params) {
        return Err(Error::Internal("gradient buffer layout differs from parameters".into()));
    }
    let zt = cache.top_latent();
    let zj = cache.positive_latent();
    let zk = cache.negative_latent();
    // The top tower sees both pairs.
    let d_top: Vec<f64> = zj.iter().zip(zk).map(|(a, b)| d_m_ij * a + d_m_ik * b).collect();
    let d_pos: Vec<f64> = zt.iter().map(|a| d_m_ij * a).collect();
    let d_neg: Vec<f64> = zt.iter().map(|a| d_m_ik * a).collect();
    backprop_tower(params, Side::Top, &cache.top, d_top, grads)?;
    backprop_tower(params, Side::Bottom, &cache.positive, d_pos, grads)?;
    backprop_tower(params, Side::Bottom, &cache.negative, d_neg, grads)?;
    Ok(())
}

fn check_cache(params: &EncoderParams, cache: &StudentCache) -> Result<()> {
    for (side, acts) in [(Side::Top, &cache.top), (Side::Bottom, &cache.positive), (Side::Bottom, &cache.negative)] {
        let tower = params.tower(side);
        let ok = acts.len() == tower.len() + 1
            && acts[0].len() == params.input_dim()
            && tower.iter().zip(&acts[1..]).all(|(l, a)| l.weight.rows() == a.len());
        if !ok {
            return Err(Error::Internal("activation cache does not match the parameter shapes".into()));
        }
    }
    Ok(())
}

fn backprop_tower(
    params: &EncoderParams,
    side: Side,
    acts: &[Vector],
    mut upstream: Vec<f64>,
    grads: &mut EncoderParams,
) -> Result<()> {
    let tower = params.tower(side);
    let gtower = grads.tower_mut(side);
    for k in (0..tower.len()).rev() {
        let out = &acts[k + 1];
        let input = &acts[k];
        let delta: Vec<f64> = upstream
            .iter()
            .zip(out.iter())
            .map(|(g, a)| g * a * (1.0 - a))
            .collect();
        gtower[k].weight.add_outer(1.0, &delta, input);
        for (b, d) in gtower[k].bias.iter_mut().zip(&delta) {
            *b += d;
        }
        if k > 0 {
            upstream = matvec_transposed(&tower[k].weight, &delta)?.into_inner();
        }
    }
    Ok(())
}
