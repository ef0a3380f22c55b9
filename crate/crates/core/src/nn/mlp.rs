use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::tape::{Activation, Tape, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
    fan_in: usize,
    fan_out: usize,
}

/// Fully connected network. Weights are stored `[fan_in, fan_out]` and
/// applied as `x·W + b`; the activation follows every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// Registers `widths.len() - 1` layers under `prefix` with weights drawn
    /// from U(−1/√fan_in, 1/√fan_in) and zero biases.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Contract(format!("invalid layer widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<S> = (0..fan_in * fan_out)
                .map(|_| S::lit(rng.random_range(-bound..bound)))
                .collect();
            let w = store.add(format!("{prefix}.{i}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
            let b = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[1, fan_out]))?;
            layers.push(Linear {
                w,
                b,
                fan_in,
                fan_out,
            });
        }
        Ok(Self { layers, activation })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(weight, bias)` ids of layer `i`.
    pub fn layer_params(&self, i: usize) -> (ParamId, ParamId) {
        (self.layers[i].w, self.layers[i].b)
    }

    pub fn forward_tape<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let width = tape.value(h).cols();
            if width != layer.fan_in {
                return Err(Error::LayerDimension {
                    layer: i,
                    expected: layer.fan_in,
                    actual: width,
                });
            }
            let w = tape.param(store, layer.w);
            let b = tape.param(store, layer.b);
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = tape.activate(h, self.activation)?;
            }
        }
        Ok(h)
    }
}

/// Evaluates `net` on the row-wise concatenation `[x | t_embed | c_embed]`.
pub fn mlp_forward<S: Scalar>(
    net: &Mlp,
    params: &ParamStore<S>,
    x: &Tensor<S>,
    t_embed: &Tensor<S>,
    c_embed: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::no_grad();
    let parts = [
        tape.input(x.clone()),
        tape.input(t_embed.clone()),
        tape.input(c_embed.clone()),
    ];
    let input = tape.concat(&parts)?;
    let out = net.forward_tape(&mut tape, params, input)?;
    Ok(tape.take_value(out))
}

/// Sinusoidal features of `c = ln(t)/4`: `[c, sin(2^k c), cos(2^k c)]` for
/// `k < freqs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub freqs: usize,
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        2 * self.freqs + 1
    }

    pub fn features<S: Scalar>(&self, t: S) -> impl Iterator<Item = S> + '_ {
        let c = t.ln() / S::lit(4.0);
        std::iter::once(c).chain((0..self.freqs).flat_map(move |k| {
            let a = c * S::lit((1u64 << k) as f64);
            [a.sin(), a.cos()]
        }))
    }

    pub fn embed<S: Scalar>(&self, times: &[S]) -> Tensor<S> {
        let data: Vec<S> = times.iter().flat_map(|&t| self.features(t)).collect();
        Tensor::raw(vec![times.len(), self.width()], data)
    }
}

/// Architecture of the conditional network shared by consistency and score
/// models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_freqs: usize,
    pub context_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            time_freqs: 4,
            context_dim: 8,
        }
    }
}

/// `F(x, t, c)`: an [`Mlp`] over `[x | time features | context embedding]`
/// where the context embedding is a learned table over a finite vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalNet {
    mlp: Mlp,
    table: ParamId,
    time: TimeEmbedding,
    data_dim: usize,
    contexts: usize,
    config: NetConfig,
}

impl ConditionalNet {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        config: &NetConfig,
        data_dim: usize,
        contexts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 || contexts == 0 || config.context_dim == 0 {
            return Err(Error::Contract("network dimensions must be positive".into()));
        }
        let time = TimeEmbedding {
            freqs: config.time_freqs,
        };
        let emb: Vec<S> = (0..contexts * config.context_dim)
            .map(|_| S::lit(rng.random_range(-1.0..1.0)))
            .collect();
        let table = store.add("context.embedding", Tensor::new(vec![contexts, config.context_dim], emb)?)?;
        let mut widths = vec![data_dim + time.width() + config.context_dim];
        widths.extend_from_slice(&config.hidden);
        widths.push(data_dim);
        let mlp = Mlp::new(store, "mlp", &widths, config.activation, rng)?;
        Ok(Self {
            mlp,
            table,
            time,
            data_dim,
            contexts,
            config: config.clone(),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Records `F(x_in, t, c)` for a batch; `x_in` is already input-scaled.
    pub fn forward_tape<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x_in: Tensor<S>,
        times: &[S],
        contexts: &[usize],
    ) -> Result<Var> {
        let n = x_in.rows();
        if times.len() != n || contexts.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} rows with {} times and {} contexts",
                times.len(),
                contexts.len()
            )));
        }
        if x_in.cols() != self.data_dim {
            return Err(Error::Shape(format!(
                "sample width {} but model dimension {}",
                x_in.cols(),
                self.data_dim
            )));
        }
        if let Some(&c) = contexts.iter().find(|&&c| c >= self.contexts) {
            return Err(Error::Contract(format!(
                "context {c} outside vocabulary of {}",
                self.contexts
            )));
        }
        let x = tape.input(x_in);
        let t = tape.input(self.time.embed(times));
        let table = tape.param(store, self.table);
        let c = tape.gather(table, contexts.to_vec())?;
        let input = tape.concat(&[x, t, c])?;
        self.mlp.forward_tape(tape, store, input)
    }
}
