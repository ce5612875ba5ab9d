//! Densely connected convolutional regressor.
//!
//! Topology: 3×3 stem convolution with `2k` filters, then dense blocks
//! separated by 2×2 average pooling, a final normalization and rectifier,
//! global average pooling and a linear head with `nc` raw outputs. Each dense
//! layer is normalization → rectifier → 3×3 convolution (`k` filters) →
//! dropout, and consumes the concatenation of the block input and every
//! earlier layer output of its block.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Backend, Eager};
use super::{NnError, Scalar, Tensor};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetConfig {
    /// Depth in the original dense-network counting: `blocks * layers + blocks + 1`.
    pub depth: usize,
    pub num_blocks: usize,
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub stem_channels: usize,
    pub dropout_rate: f64,
    pub nc_outputs: usize,
    pub input_channels: usize,
    pub input_size: usize,
}

impl Default for DenseNetConfig {
    /// Depth 40, three blocks, growth rate 12, 15 outputs on 64×64×3 patches.
    fn default() -> Self {
        Self::with_depth(40, 12).expect("default config is consistent")
    }
}

impl DenseNetConfig {
    /// Three-block network of the given depth and growth rate.
    pub fn with_depth(depth: usize, growth_rate: usize) -> Result<Self, NnError> {
        let num_blocks = 3;
        if depth < num_blocks + 1 + num_blocks || (depth - num_blocks - 1) % num_blocks != 0 {
            return Err(NnError::Config(format!(
                "depth {depth} is not of the form 3L + 4"
            )));
        }
        let cfg = Self {
            depth,
            num_blocks,
            growth_rate,
            layers_per_block: (depth - num_blocks - 1) / num_blocks,
            stem_channels: 2 * growth_rate,
            dropout_rate: 0.2,
            nc_outputs: crate::jpeg::DEFAULT_NC,
            input_channels: 3,
            input_size: 64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Depth 16, growth rate 8: four layers per block.
    pub fn small() -> Self {
        Self::with_depth(16, 8).expect("small config is consistent")
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let err = |m: String| Err(NnError::Config(m));
        if self.num_blocks == 0 || self.layers_per_block == 0 || self.growth_rate == 0 {
            return err("blocks, layers and growth rate must be positive".into());
        }
        if self.depth != self.num_blocks * self.layers_per_block + self.num_blocks + 1 {
            return err(format!(
                "depth {} inconsistent with {} blocks of {} layers",
                self.depth, self.num_blocks, self.layers_per_block
            ));
        }
        if self.stem_channels == 0 || self.input_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.nc_outputs == 0 || self.nc_outputs > 64 {
            return err(format!("nc = {} outside [1, 64]", self.nc_outputs));
        }
        let factor = 1usize << (self.num_blocks - 1);
        if self.input_size == 0 || self.input_size % factor != 0 {
            return err(format!(
                "input size {} not divisible by {factor}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Channels entering block `b` (zero-based).
    pub fn block_input_width(&self, b: usize) -> usize {
        self.stem_channels + b * self.layers_per_block * self.growth_rate
    }

    /// Input channels of layer `l` (one-based) in block `b` (zero-based).
    pub fn layer_input_width(&self, b: usize, l: usize) -> usize {
        self.block_input_width(b) + self.growth_rate * (l - 1)
    }

    /// Width of the pooled feature vector fed to the head.
    pub fn feature_width(&self) -> usize {
        self.block_input_width(self.num_blocks)
    }

    /// Pairwise layer-to-layer links inside one block.
    pub fn connections_per_block(&self) -> usize {
        self.layers_per_block * (self.layers_per_block - 1) / 2
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Running statistics of one normalization layer, used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch statistics observed in one training forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    scale: usize,
    shift: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    norm: NormIdx,
    kernel: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: usize,
    blocks: Vec<Vec<LayerIdx>>,
    final_norm: NormIdx,
    head_weight: usize,
    head_bias: usize,
}

/// Whether dropout and batch statistics are active.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Values produced by one forward pass.
pub struct ForwardOutput<V> {
    /// `[N, nc]` raw regression outputs.
    pub output: V,
    /// `[N, feature_width]` pooled features.
    pub features: V,
    /// Backend handles of all parameters, in declaration order.
    pub params: Vec<V>,
    /// Per normalization layer, present in train mode.
    pub batch_stats: Vec<Option<BatchStats>>,
}

/// Parameters and running statistics of the dense regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T: Scalar = f32> {
    config: DenseNetConfig,
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
}

struct Builder<T> {
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> Builder<T> {
    fn param(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> NormIdx {
        let scale = self.param(format!("{prefix}.scale"), Tensor::filled(&[channels], T::one()));
        let shift = self.param(format!("{prefix}.shift"), Tensor::zeros(&[channels]));
        self.stats.push(RunningStats {
            name: prefix.to_string(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        NormIdx {
            scale,
            shift,
            stats: self.stats.len() - 1,
        }
    }
}

fn gaussian<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn layout_of(config: &DenseNetConfig) -> Layout {
    // mirrors the declaration order in `DenseNet::new`
    struct Counter {
        params: usize,
        stats: usize,
    }
    impl Counter {
        fn param(&mut self) -> usize {
            self.params += 1;
            self.params - 1
        }
        fn norm(&mut self) -> NormIdx {
            let idx = NormIdx {
                scale: self.param(),
                shift: self.param(),
                stats: self.stats,
            };
            self.stats += 1;
            idx
        }
    }
    let mut next = Counter { params: 0, stats: 0 };
    let stem = next.param();
    let blocks = (0..config.num_blocks)
        .map(|_| {
            (0..config.layers_per_block)
                .map(|_| {
                    let norm = next.norm();
                    LayerIdx {
                        norm,
                        kernel: next.param(),
                    }
                })
                .collect()
        })
        .collect();
    let final_norm = next.norm();
    Layout {
        stem,
        blocks,
        final_norm,
        head_weight: next.param(),
        head_bias: next.param(),
    }
}

impl<T: Scalar> DenseNet<T> {
    /// Fresh network: fan-in scaled Gaussian kernels, unit scales, zero
    /// shifts and biases.
    pub fn new(config: DenseNetConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
        };
        let k = config.growth_rate;
        let stem_fan_in = config.input_channels * 9;
        b.param(
            "stem.kernel".into(),
            gaussian(
                &[config.stem_channels, config.input_channels, 3, 3],
                (2.0 / stem_fan_in as f64).sqrt(),
                &mut rng,
            ),
        );
        for blk in 0..config.num_blocks {
            for l in 1..=config.layers_per_block {
                let cin = config.layer_input_width(blk, l);
                let prefix = format!("block{}.layer{}", blk + 1, l);
                b.norm(&format!("{prefix}.norm"), cin);
                b.param(
                    format!("{prefix}.conv.kernel"),
                    gaussian(&[k, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt(), &mut rng),
                );
            }
        }
        let f = config.feature_width();
        b.norm("final.norm", f);
        b.param(
            "head.weight".into(),
            gaussian(&[config.nc_outputs, f], (1.0 / f as f64).sqrt(), &mut rng),
        );
        b.param("head.bias".into(), Tensor::zeros(&[config.nc_outputs]));
        Ok(Self {
            config,
            params: b.params,
            stats: b.stats,
        })
    }

    /// Reassembles a network from stored tensors, checking every shape
    /// against the configuration.
    pub fn from_parts(
        config: DenseNetConfig,
        params: Vec<Param<T>>,
        stats: Vec<RunningStats<T>>,
    ) -> Result<Self, NnError> {
        let template = Self::new(config.clone(), 0)?;
        template.check_compatible(&params, &stats)?;
        Ok(Self {
            config,
            params,
            stats,
        })
    }

    fn check_compatible(&self, params: &[Param<T>], stats: &[RunningStats<T>]) -> Result<(), NnError> {
        if params.len() != self.params.len() || stats.len() != self.stats.len() {
            return Err(NnError::Config(format!(
                "expected {} parameters and {} statistics, got {} and {}",
                self.params.len(),
                self.stats.len(),
                params.len(),
                stats.len()
            )));
        }
        for (want, got) in self.params.iter().zip(params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(NnError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        for (want, got) in self.stats.iter().zip(stats) {
            if want.name != got.name
                || want.mean.len() != got.mean.len()
                || want.var.len() != got.var.len()
            {
                return Err(NnError::Config(format!(
                    "running statistics {} do not match {}",
                    got.name, want.name
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Blends batch statistics into the running averages:
    /// `running = (1 - momentum) running + momentum batch`, with the batch
    /// variance made unbiased.
    pub fn update_running_stats(&mut self, batch: &[Option<BatchStats>], momentum: f64) {
        for (run, b) in self.stats.iter_mut().zip(batch) {
            let Some(b) = b else { continue };
            let correction = if b.count > 1 {
                b.count as f64 / (b.count - 1) as f64
            } else {
                1.0
            };
            for (r, &m) in run.mean.iter_mut().zip(&b.mean) {
                *r = T::lit((1.0 - momentum) * r.to_f64().unwrap_or(0.0) + momentum * m);
            }
            for (r, &v) in run.var.iter_mut().zip(&b.var) {
                *r = T::lit(
                    (1.0 - momentum) * r.to_f64().unwrap_or(0.0) + momentum * v * correction,
                );
            }
        }
    }

    fn norm<B: Backend<T>>(
        &self,
        backend: &mut B,
        x: &B::Value,
        idx: NormIdx,
        params: &[B::Value],
        train: bool,
        batch_stats: &mut [Option<BatchStats>],
    ) -> Result<B::Value, NnError> {
        if train {
            let count = {
                let s = backend.tensor(x).shape();
                s[0] * s[2] * s[3]
            };
            let (y, mean, var) =
                backend.batch_norm_train(x, &params[idx.scale], &params[idx.shift])?;
            batch_stats[idx.stats] = Some(BatchStats { mean, var, count });
            Ok(y)
        } else {
            let st = &self.stats[idx.stats];
            backend.batch_norm_eval(x, &params[idx.scale], &params[idx.shift], &st.mean, &st.var)
        }
    }

    /// Runs the network on a `[N, C, S, S]` batch with samples in `[0, 1]`.
    pub fn forward<B: Backend<T>>(
        &self,
        backend: &mut B,
        input: Tensor<T>,
        mode: Mode<'_>,
    ) -> Result<ForwardOutput<B::Value>, NnError> {
        let cfg = &self.config;
        let (_, c, h, w) = input.dims4()?;
        if c != cfg.input_channels || h != cfg.input_size || w != cfg.input_size {
            return Err(NnError::Shape(format!(
                "network expects [N, {}, {}, {}], got {:?}",
                cfg.input_channels,
                cfg.input_size,
                cfg.input_size,
                input.shape()
            )));
        }
        let layout = layout_of(cfg);
        let (train, mut rng) = match mode {
            Mode::Eval => (false, None),
            Mode::Train(rng) => (true, Some(rng)),
        };
        let params: Vec<B::Value> = self.params.iter().map(|p| backend.parameter(&p.value)).collect();
        let mut batch_stats: Vec<Option<BatchStats>> = vec![None; self.stats.len()];

        let x = backend.constant(input);
        let mut state = backend.conv3x3(&x, &params[layout.stem])?;
        for (bi, block) in layout.blocks.iter().enumerate() {
            if bi > 0 {
                state = backend.avg_pool2(&state)?;
            }
            for layer in block {
                let h = self.norm(backend, &state, layer.norm, &params, train, &mut batch_stats)?;
                let h = backend.relu(&h);
                let mut h = backend.conv3x3(&h, &params[layer.kernel])?;
                if let Some(rng) = rng.as_deref_mut() {
                    if cfg.dropout_rate > 0.0 {
                        let keep = 1.0 - cfg.dropout_rate;
                        let scale = T::lit(1.0 / keep);
                        let n = backend.tensor(&h).len();
                        let mask = (0..n)
                            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                            .collect();
                        h = backend.dropout(&h, mask)?;
                    }
                }
                state = backend.concat(&[&state, &h])?;
            }
        }
        let h = self.norm(backend, &state, layout.final_norm, &params, train, &mut batch_stats)?;
        let h = backend.relu(&h);
        let features = backend.global_avg_pool(&h)?;
        let output = backend.linear(
            &features,
            &params[layout.head_weight],
            &params[layout.head_bias],
        )?;
        Ok(ForwardOutput {
            output,
            features,
            params,
            batch_stats,
        })
    }

    /// Eval-mode outputs `[N, nc]` without recording a tape.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut eager = Eager;
        Ok(self.forward(&mut eager, input, Mode::Eval)?.output)
    }

    /// Converts the network to another element type.
    pub fn cast<U: Scalar>(&self) -> DenseNet<U> {
        DenseNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    mean: s.mean.iter().map(|v| U::lit(v.to_f64().unwrap_or(0.0))).collect(),
                    var: s.var.iter().map(|v| U::lit(v.to_f64().unwrap_or(0.0))).collect(),
                })
                .collect(),
        }
    }
}
