//! Feature extractor: a small relu MLP trunk whose normalized output is the
//! feature space used for classification and memory, plus a projection head
//! used only inside the training loss. The head reads the raw trunk output,
//! before normalization, and its own output is normalized in turn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::{rng_stream, STREAM_INIT};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    /// Trunk hidden widths; relu after each hidden layer, none after the last.
    pub hidden: Vec<usize>,
    /// Feature dimension e: trunk output width, the space memory and the
    /// classifier live in.
    pub feature_dim: usize,
    pub head_hidden: usize,
    /// Embedding dimension: head output width, the space the loss lives in.
    pub head_out: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    /// Defaults sized for the synthetic benchmark: a narrow feature space
    /// keeps ten classes crowded enough that the estimator quality and the
    /// entropy bonus are actually exercised, while the 16-dim embedding gives
    /// the pair losses room to order things.
    fn default() -> Self {
        ExtractorConfig {
            input_dim: 16,
            hidden: vec![64, 64],
            feature_dim: 8,
            head_hidden: 8,
            head_out: 16,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feature_dim, self.head_hidden, self.head_out];
        if dims.iter().any(|&d| d == 0) || self.hidden.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(
                "extractor dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// [fan_in, fan_out]; applied as x W + b.
    pub w: Tensor,
    /// [1, fan_out]
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    cfg: ExtractorConfig,
    trunk: Vec<Layer>,
    head: Vec<Layer>,
}

/// Tape handles for one forward pass over the extractor's parameters.
pub struct BoundExtractor {
    trunk: Vec<(Var, Var)>,
    head: Vec<(Var, Var)>,
}

impl Extractor {
    /// Fan-in scaled uniform init U(+-sqrt(3/fan_in)), zero biases, drawn
    /// from the config seed: weight variance 1/fan_in keeps pre-activation
    /// scales moderate at every depth.
    ///
    /// The head output bias alone is drawn U(+-1e-3) instead of zeroed. At a
    /// narrow head width the relu can kill every hidden unit for an unlucky
    /// input row, and with a zero output bias that row's embedding would be
    /// exactly zero, which has no direction to normalize. The tiny bias gives
    /// such rows a well defined (if arbitrary) direction until training moves
    /// the bias anyway.
    pub fn new(cfg: ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_stream(cfg.seed, STREAM_INIT);
        let mut dims = vec![cfg.input_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.feature_dim);
        let trunk = init_layers(&dims, &mut rng);
        let mut head = init_layers(
            &[cfg.feature_dim, cfg.head_hidden, cfg.head_out],
            &mut rng,
        );
        for b in head[1].b.data_mut() {
            *b = rng.gen_range(-1e-3..1e-3);
        }
        Ok(Extractor { cfg, trunk, head })
    }

    pub fn from_parts(cfg: ExtractorConfig, trunk: Vec<Layer>, head: Vec<Layer>) -> Result<Self> {
        cfg.validate()?;
        let expected_trunk = cfg.hidden.len() + 1;
        if trunk.len() != expected_trunk || head.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "layer counts {}/{} do not match config",
                trunk.len(),
                head.len()
            )));
        }
        Ok(Extractor { cfg, trunk, head })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn trunk_layers(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn head_layers(&self) -> &[Layer] {
        &self.head
    }

    /// Flat parameter walk in serialization order: trunk then head, each
    /// layer's weight then bias.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(self.head.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk.iter_mut().chain(self.head.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.w.numel() + l.b.numel()).sum()
    }

    /// Registers every parameter on the tape; `trainable` decides whether
    /// they are differentiable leaves or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundExtractor {
        let reg = |l: &Layer| {
            if trainable {
                (tape.leaf(l.w.clone()), tape.leaf(l.b.clone()))
            } else {
                (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
            }
        };
        BoundExtractor {
            trunk: self.trunk.iter().map(reg).collect(),
            head: self.head.iter().map(reg).collect(),
        }
    }

    /// Binds the forward graph to caller-supplied parameter handles, in
    /// [`Extractor::layers`] order with each layer contributing its weight
    /// then its bias. This is what lets a gradient checker drive the exact
    /// training graph with its own probe tensors.
    pub fn bind_with(&self, vars: &[Var]) -> Result<BoundExtractor> {
        let need = 2 * (self.trunk.len() + self.head.len());
        if vars.len() != need {
            return Err(Error::InvalidConfig(format!(
                "expected {need} parameter handles, got {}",
                vars.len()
            )));
        }
        let pairs: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
        let (trunk, head) = pairs.split_at(self.trunk.len());
        Ok(BoundExtractor {
            trunk: trunk.to_vec(),
            head: head.to_vec(),
        })
    }

    /// One SGD step: w -= lr * grad for every bound parameter. Parameters
    /// without an adjoint (unreached by the loss) stay put.
    pub fn sgd_step(
        &mut self,
        tape: &Tape,
        bound: &BoundExtractor,
        grads: &crate::ndgrad::Gradients,
        lr: f64,
    ) {
        let vars: Vec<(Var, Var)> = bound.trunk.iter().chain(bound.head.iter()).copied().collect();
        for (layer, (wv, bv)) in self.trunk.iter_mut().chain(self.head.iter_mut()).zip(vars) {
            if let Some(gw) = grads.get(tape, wv) {
                for (p, g) in layer.w.data_mut().iter_mut().zip(gw.data()) {
                    *p -= lr * g;
                }
            }
            if let Some(gb) = grads.get(tape, bv) {
                for (p, g) in layer.b.data_mut().iter_mut().zip(gb.data()) {
                    *p -= lr * g;
                }
            }
        }
    }

    /// Raw trunk output (pre-normalization), [B, feature_dim].
    pub fn trunk_raw(&self, tape: &Tape, bound: &BoundExtractor, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in bound.trunk.iter().enumerate() {
            h = tape.add_bias(tape.matmul(h, w)?, b)?;
            if i + 1 < bound.trunk.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Unit-norm features f_e(x), [B, feature_dim].
    pub fn features(&self, tape: &Tape, bound: &BoundExtractor, x: Var) -> Result<Var> {
        let raw = self.trunk_raw(tape, bound, x)?;
        tape.normalize_rows(raw)
    }

    /// Unit-norm training embeddings: head over the raw trunk output,
    /// [B, head_out].
    pub fn embeddings(&self, tape: &Tape, bound: &BoundExtractor, x: Var) -> Result<Var> {
        let raw = self.trunk_raw(tape, bound, x)?;
        let (w1, b1) = bound.head[0];
        let (w2, b2) = bound.head[1];
        let h = tape.relu(tape.add_bias(tape.matmul(raw, w1)?, b1)?)?;
        let out = tape.add_bias(tape.matmul(h, w2)?, b2)?;
        tape.normalize_rows(out)
    }

    /// Inference-path features with no gradient bookkeeping. Same arithmetic
    /// as the training path: it runs through the identical tape ops.
    pub fn features_value(&self, xs: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(xs.clone());
        let f = self.features(&tape, &bound, x)?;
        Ok(tape.value(f))
    }

    pub fn embeddings_value(&self, xs: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(xs.clone());
        let e = self.embeddings(&tape, &bound, x)?;
        Ok(tape.value(e))
    }

    /// Pre-activation values of every linear layer (trunk then head) for a
    /// given input batch; diagnostic surface for the init scaling checks.
    pub fn preactivations(&self, xs: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let mut out = Vec::new();
        let mut h = tape.constant(xs.clone());
        for (i, &(w, b)) in bound.trunk.iter().enumerate() {
            let pre = tape.add_bias(tape.matmul(h, w)?, b)?;
            out.push(tape.value(pre));
            h = if i + 1 < bound.trunk.len() {
                tape.relu(pre)?
            } else {
                pre
            };
        }
        let (w1, b1) = bound.head[0];
        let pre1 = tape.add_bias(tape.matmul(h, w1)?, b1)?;
        out.push(tape.value(pre1));
        let h1 = tape.relu(pre1)?;
        let (w2, b2) = bound.head[1];
        let pre2 = tape.add_bias(tape.matmul(h1, w2)?, b2)?;
        out.push(tape.value(pre2));
        Ok(out)
    }
}

fn init_layers(dims: &[usize], rng: &mut impl Rng) -> Vec<Layer> {
    dims.windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (3.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Layer {
                w: Tensor::new(fan_in, fan_out, data).expect("init shape"),
                b: Tensor::zeros(1, fan_out),
            }
        })
        .collect()
}
