//! Convolutional classifier with a designated saliency feature layer.
//!
//! The layer stack is `[conv → relu (→ maxpool)]* → global-avg-pool →
//! dense(hidden) → relu → dropout → dense(K) → softmax`. The feature layer is
//! the ReLU output of one conv block; GradCAM reads activations there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, NamedTensor};
use crate::error::{Result, XblError};
use crate::graph::{Graph, Var};
use crate::io::sha256_hex;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
    /// Output channels of each conv block.
    pub conv_widths: Vec<usize>,
    /// Odd square kernel; convs use same padding.
    pub kernel_size: usize,
    /// Blocks `0..pooled_blocks` end with a 2×2 max-pool.
    pub pooled_blocks: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Conv block whose ReLU output feeds GradCAM. `None` means the last block.
    pub feature_block: Option<usize>,
    /// Number of leading layer records excluded from updates.
    pub frozen_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            input_height: 32,
            input_width: 32,
            num_classes: 4,
            conv_widths: vec![8, 16, 32],
            kernel_size: 3,
            pooled_blocks: 2,
            hidden: 64,
            dropout: 0.5,
            feature_block: None,
            frozen_layers: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv { weight: Param, bias: Param, padding: usize },
    Relu,
    MaxPool { size: usize },
    GlobalAvgPool,
    Dense { weight: Param, bias: Param },
    Dropout { p: f64 },
    Softmax,
}

impl Layer {
    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ModelConfig,
    layers: Vec<Layer>,
    feature_layer_index: usize,
    feature_shape: [usize; 3],
    frozen_prefix_count: usize,
}

/// Graph handles produced by [`Classifier::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    /// Activations of the feature layer, (n, k, h, w).
    pub features: Var,
    /// Parameter leaves in [`Classifier::params`] order.
    pub params: Vec<Var>,
    /// Present when the feature layer is followed directly by the
    /// pool → dense → relu → dense head, which makes the class-score
    /// gradient at the feature layer available in closed form.
    pub head: Option<HeadVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// Hidden dense weight, (hidden, k).
    pub hidden_weight: Var,
    /// Hidden pre-activation, (n, hidden).
    pub hidden_pre: Var,
    /// Output dense weight, (K, hidden).
    pub out_weight: Var,
    pub out_bias: Var,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Track gradients at the feature layer even if nothing upstream is differentiable.
    pub track_features: bool,
    /// Make frozen parameters differentiable too (gradient checks).
    pub grad_all_params: bool,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

pub fn build_classifier(cfg: &ModelConfig) -> Result<Classifier> {
    let cerr = |m: String| Err(XblError::Config(m));
    if cfg.num_classes < 2 {
        return cerr(format!("num_classes must be at least 2, got {}", cfg.num_classes));
    }
    if cfg.conv_widths.is_empty() || cfg.conv_widths.contains(&0) {
        return cerr("conv_widths must be nonempty and positive".into());
    }
    if cfg.kernel_size == 0 || cfg.kernel_size % 2 == 0 {
        return cerr(format!("kernel_size must be odd, got {}", cfg.kernel_size));
    }
    if cfg.hidden == 0 || cfg.input_channels == 0 {
        return cerr("hidden width and input channels must be positive".into());
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return cerr(format!("dropout must be in [0, 1), got {}", cfg.dropout));
    }
    if cfg.pooled_blocks > cfg.conv_widths.len() {
        return cerr("pooled_blocks exceeds the number of conv blocks".into());
    }
    let feature_block = cfg.feature_block.unwrap_or(cfg.conv_widths.len() - 1);
    if feature_block >= cfg.conv_widths.len() {
        return cerr(format!("feature_block {feature_block} has no conv block"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.kernel_size;
    let (mut c, mut h, mut w) = (cfg.input_channels, cfg.input_height, cfg.input_width);
    if h < k || w < k {
        return cerr(format!("input {h}x{w} is smaller than the {k}x{k} receptive field"));
    }
    let mut layers = Vec::new();
    let mut feature_layer_index = 0;
    let mut feature_shape = [0; 3];
    for (i, &o) in cfg.conv_widths.iter().enumerate() {
        layers.push(Layer::Conv {
            weight: Param {
                name: format!("conv{i}.weight"),
                value: he_uniform(&mut rng, &[o, c, k, k], c * k * k),
            },
            bias: Param {
                name: format!("conv{i}.bias"),
                value: Tensor::zeros([o]),
            },
            padding: k / 2,
        });
        layers.push(Layer::Relu);
        c = o;
        if i == feature_block {
            feature_layer_index = layers.len() - 1;
            feature_shape = [c, h, w];
        }
        if i < cfg.pooled_blocks {
            if h < 2 || w < 2 {
                return cerr(format!("block {i} cannot pool a {h}x{w} map"));
            }
            layers.push(Layer::MaxPool { size: 2 });
            h /= 2;
            w /= 2;
        }
    }
    if feature_shape[1] < 2 || feature_shape[2] < 2 {
        return cerr(format!(
            "feature layer is {}x{}, needs at least 2x2",
            feature_shape[1], feature_shape[2]
        ));
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dense {
        weight: Param {
            name: "dense0.weight".into(),
            value: he_uniform(&mut rng, &[cfg.hidden, c], c),
        },
        bias: Param {
            name: "dense0.bias".into(),
            value: Tensor::zeros([cfg.hidden]),
        },
    });
    layers.push(Layer::Relu);
    layers.push(Layer::Dropout { p: cfg.dropout });
    layers.push(Layer::Dense {
        weight: Param {
            name: "dense1.weight".into(),
            value: he_uniform(&mut rng, &[cfg.num_classes, cfg.hidden], cfg.hidden),
        },
        bias: Param {
            name: "dense1.bias".into(),
            value: Tensor::zeros([cfg.num_classes]),
        },
    });
    layers.push(Layer::Softmax);

    let model = Classifier {
        config: cfg.clone(),
        layers,
        feature_layer_index,
        feature_shape,
        frozen_prefix_count: 0,
    };
    model.freeze_layers(cfg.frozen_layers)
}

impl Classifier {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_layer_index(&self) -> usize {
        self.feature_layer_index
    }

    /// (channels, height, width) of the feature layer.
    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [
            self.config.input_channels,
            self.config.input_height,
            self.config.input_width,
        ]
    }

    pub fn frozen_prefix_count(&self) -> usize {
        self.frozen_prefix_count
    }

    /// Excludes the first `n` layer records from optimizer updates.
    pub fn freeze_layers(mut self, n: usize) -> Result<Self> {
        self.set_frozen_layers(n)?;
        Ok(self)
    }

    pub fn set_frozen_layers(&mut self, n: usize) -> Result<()> {
        if n > self.layers.len() {
            return Err(XblError::range(
                "frozen layer count",
                n,
                format!("0..={}", self.layers.len()),
            ));
        }
        self.frozen_prefix_count = n;
        self.config.frozen_layers = n;
        Ok(())
    }

    /// All parameters in layer order.
    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Trainability of each parameter, aligned with [`Classifier::params`].
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let t = i >= self.frozen_prefix_count;
                l.params().into_iter().map(move |_| t)
            })
            .collect()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Records the network on `g`. `x` must be (n, c, h, w).
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, opts: ForwardOptions) -> Result<Forward> {
        let xs = g.shape(x);
        let [c, h, w] = self.input_shape();
        if xs.len() != 4 || xs[1..] != [c, h, w] {
            return Err(XblError::dim(
                "classifier input",
                format!("{xs:?} vs [n, {c}, {h}, {w}]"),
            ));
        }
        let trainable = self.trainable_mask();
        let mut params = Vec::new();
        let mut bind = |g: &mut Graph<F>, p: &Param| {
            let t = p.value.cast::<F>();
            let on = opts.grad_all_params || trainable[params.len()];
            let v = if on { g.variable(t) } else { g.constant(t) };
            params.push(v);
            v
        };
        let mut cur = x;
        let mut features = None;
        let mut dense_seen = 0;
        let mut hidden_weight = None;
        let mut hidden_pre = None;
        let mut out_weight = None;
        let mut out_bias = None;
        let mut logits = None;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    padding,
                } => {
                    let wv = bind(g, weight);
                    let bv = bind(g, bias);
                    g.conv2d(cur, wv, bv, 1, *padding)?
                }
                Layer::Relu => g.relu(cur)?,
                Layer::MaxPool { size } => g.max_pool2d(cur, *size)?,
                Layer::GlobalAvgPool => g.global_avg_pool(cur)?,
                Layer::Dense { weight, bias } => {
                    let wv = bind(g, weight);
                    let bv = bind(g, bias);
                    let y = g.dense(cur, wv, bv)?;
                    if dense_seen == 0 {
                        hidden_weight = Some(wv);
                        hidden_pre = Some(y);
                    } else {
                        out_weight = Some(wv);
                        out_bias = Some(bv);
                    }
                    dense_seen += 1;
                    y
                }
                Layer::Dropout { p } => g.dropout(cur, *p)?,
                Layer::Softmax => {
                    logits = Some(cur);
                    g.softmax(cur)?
                }
            };
            if i == self.feature_layer_index {
                if opts.track_features {
                    g.require_grad(cur)?;
                }
                features = Some(cur);
            }
        }
        let last_block = matches!(
            self.layers.get(self.feature_layer_index + 1),
            Some(Layer::GlobalAvgPool)
        );
        let head = match (hidden_weight, hidden_pre, out_weight, out_bias) {
            (Some(hw), Some(hp), Some(ow), Some(ob)) if last_block => Some(HeadVars {
                hidden_weight: hw,
                hidden_pre: hp,
                out_weight: ow,
                out_bias: ob,
            }),
            _ => None,
        };
        Ok(Forward {
            logits: logits.expect("softmax layer present"),
            probs: cur,
            features: features.expect("feature layer present"),
            params,
            head,
        })
    }

    fn check_batch(&self, batch: &Tensor<f32>) -> Result<()> {
        let [c, h, w] = self.input_shape();
        let s = batch.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(XblError::dim(
                "predict",
                format!("{s:?} vs [n, {c}, {h}, {w}]"),
            ));
        }
        Ok(())
    }

    /// Class probabilities (n, K) in evaluation mode.
    pub fn predict(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_batch(batch)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, x, ForwardOptions::default())?;
        Ok(g.value(f.probs).clone())
    }

    /// Pre-softmax class scores (n, K) in evaluation mode.
    pub fn logits(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_batch(batch)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(batch.clone());
        let f = self.forward(&mut g, x, ForwardOptions::default())?;
        Ok(g.value(f.logits).clone())
    }

    /// Predicted class of every instance in the batch.
    pub fn predict_classes(&self, batch: &Tensor<f32>) -> Result<Vec<usize>> {
        let p = self.predict(batch)?;
        Ok(p.data().chunks(self.num_classes()).map(argmax).collect())
    }

    /// Feature-layer activations and the gradient of each instance's chosen
    /// pre-softmax class score with respect to them. `x` is (n, c, h, w) and
    /// `classes` has one entry per instance.
    pub fn feature_maps_and_grads_batch(
        &self,
        x: &Tensor<f32>,
        classes: &[usize],
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_batch(x)?;
        let n = x.shape()[0];
        if classes.len() != n {
            return Err(XblError::Contract(format!(
                "{} class indices for a batch of {n}",
                classes.len()
            )));
        }
        let k = self.num_classes();
        if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
            return Err(XblError::range("class index", bad, format!("0..{k}")));
        }
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let f = self.forward(
            &mut g,
            xv,
            ForwardOptions {
                track_features: true,
                grad_all_params: false,
            },
        )?;
        let mut onehot = vec![0.0f32; n * k];
        for (i, &c) in classes.iter().enumerate() {
            onehot[i * k + c] = 1.0;
        }
        let sel = g.constant(Tensor::new([n, k], onehot)?);
        let picked = g.mul(f.logits, sel)?;
        let score = g.sum(picked)?;
        g.backward(score)?;
        let a = g.value(f.features).clone();
        let da = g
            .grad(f.features)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; a.numel()]);
        let mut a = a;
        a.set_requires_grad(false);
        a.set_grad(None);
        let da = Tensor::new(a.shape(), da)?;
        Ok((a, da))
    }

    /// Single-instance form: `x` is (c, h, w) or (1, c, h, w); returns
    /// (k, h, w) activations and gradients.
    pub fn feature_maps_and_grads(
        &self,
        x: &Tensor<f32>,
        class_index: usize,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let [c, h, w] = self.input_shape();
        let batch = match x.shape() {
            [_, _, _] => x.reshaped([1, c, h, w])?,
            [1, _, _, _] => x.clone(),
            s => {
                return Err(XblError::dim(
                    "feature_maps_and_grads",
                    format!("{s:?} is not a single instance"),
                ))
            }
        };
        let (a, da) = self.feature_maps_and_grads_batch(&batch, &[class_index])?;
        Ok((a.reshaped(self.feature_shape)?, da.reshaped(self.feature_shape)?))
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.params()
            .into_iter()
            .map(|p| NamedTensor::new(p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Replaces every parameter by the same-named tensor in `tensors`.
    pub fn load_named_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let count = self.params().len();
        if tensors.len() != count {
            return Err(XblError::Contract(format!(
                "checkpoint holds {} tensors, model has {count}",
                tensors.len()
            )));
        }
        for p in self.params_mut() {
            let t = tensors.iter().find(|t| t.name == p.name).ok_or_else(|| {
                XblError::Contract(format!("checkpoint lacks tensor {}", p.name))
            })?;
            if t.tensor.shape() != p.value.shape() {
                return Err(XblError::dim(
                    "checkpoint",
                    format!("{}: {:?} vs {:?}", p.name, t.tensor.shape(), p.value.shape()),
                ));
            }
            p.value = t.tensor.clone();
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_named_tensors())
    }

    /// SHA-256 of the encoded checkpoint.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.checkpoint_bytes())
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
