use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::ModelConfig;
use crate::numerics::{Real, Tensor};
use crate::pmsa::PoolingMode;

/// Positions of one block's tensors in the parameter list.
#[derive(Clone, Copy, Debug)]
pub struct BlockIndex {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub w_pool: Option<usize>,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
}

/// Positions of every tensor in the parameter list.
#[derive(Clone, Debug)]
pub struct ParamIndex {
    pub embed_w1: usize,
    pub embed_b1: usize,
    pub embed_w2: usize,
    pub embed_b2: usize,
    pub blocks: Vec<BlockIndex>,
    pub head_ln_gain: usize,
    pub head_ln_bias: usize,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn specs(cfg: &ModelConfig) -> (Vec<Spec>, ParamIndex) {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        out.push(Spec { name, shape, init });
        out.len() - 1
    };
    let (f, h) = (cfg.width, cfg.width * cfg.ffn_expansion);
    let embed_w1 = add("embed.w1".into(), vec![cfg.in_dim, f], Init::Xavier);
    let embed_b1 = add("embed.b1".into(), vec![f], Init::Zeros);
    let embed_w2 = add("embed.w2".into(), vec![f, f], Init::Xavier);
    let embed_b2 = add("embed.b2".into(), vec![f], Init::Zeros);
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let p = |s: &str| format!("block{b}.{s}");
        let ln1_gain = add(p("ln1.gain"), vec![f], Init::Ones);
        let ln1_bias = add(p("ln1.bias"), vec![f], Init::Zeros);
        let w_q = add(p("attn.w_q"), vec![f, f], Init::Xavier);
        let w_k = add(p("attn.w_k"), vec![f, f], Init::Xavier);
        let w_v = add(p("attn.w_v"), vec![f, f], Init::Xavier);
        let w_o = add(p("attn.w_o"), vec![f, f], Init::Xavier);
        let w_pool = match (cfg.pooling, cfg.patch_size) {
            (PoolingMode::Linear, Some(l)) if cfg.supernodes > 0 => {
                Some(add(p("attn.w_pool"), vec![l, cfg.supernodes], Init::Xavier))
            }
            _ => None,
        };
        let ln2_gain = add(p("ln2.gain"), vec![f], Init::Ones);
        let ln2_bias = add(p("ln2.bias"), vec![f], Init::Zeros);
        let ffn_w1 = add(p("ffn.w1"), vec![f, h], Init::Xavier);
        let ffn_b1 = add(p("ffn.b1"), vec![h], Init::Zeros);
        let ffn_w2 = add(p("ffn.w2"), vec![h, f], Init::Xavier);
        let ffn_b2 = add(p("ffn.b2"), vec![f], Init::Zeros);
        blocks.push(BlockIndex {
            ln1_gain,
            ln1_bias,
            w_q,
            w_k,
            w_v,
            w_o,
            w_pool,
            ln2_gain,
            ln2_bias,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
        });
    }
    let head_ln_gain = add("head.ln.gain".into(), vec![f], Init::Ones);
    let head_ln_bias = add("head.ln.bias".into(), vec![f], Init::Zeros);
    let head_w = add("head.w".into(), vec![f, cfg.out_dim], Init::Xavier);
    let head_b = add("head.b".into(), vec![cfg.out_dim], Init::Zeros);
    let index = ParamIndex {
        embed_w1,
        embed_b1,
        embed_w2,
        embed_b2,
        blocks,
        head_ln_gain,
        head_ln_bias,
        head_w,
        head_b,
    };
    (out, index)
}

/// Named learnable tensors of a model, in a fixed order.
#[derive(Clone, Debug)]
pub struct MsptParams<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: ParamIndex,
}

impl<T: Real> MsptParams<T> {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let (specs, index) = specs(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::full(&s.shape, T::ONE),
                Init::Xavier => {
                    let a = (6.0 / (s.shape[0] + s.shape[1]) as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::from_f64(rng.gen_range(-a..=a)))
                }
            })
            .collect();
        Self {
            names: specs.into_iter().map(|s| s.name).collect(),
            tensors,
            index,
        }
    }

    /// Rebuilds a store from tensors listed in canonical order.
    pub(crate) fn from_tensors(cfg: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> crate::Result<Self> {
        let (specs, index) = specs(cfg);
        if specs.len() != tensors.len() {
            return Err(crate::Error::Format(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, (name, t)) in specs.iter().zip(&tensors) {
            if &s.name != name || s.shape != t.shape() {
                return Err(crate::Error::Format(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        let (names, tensors) = tensors.into_iter().unzip();
        Ok(Self {
            names,
            tensors,
            index,
        })
    }

    pub fn index(&self) -> &ParamIndex {
        &self.index
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> MsptParams<U> {
        MsptParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}
