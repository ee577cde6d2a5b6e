//! MatchboxNet-BxRxC: a separable-convolution prologue, `B` residual blocks
//! of `R` time-channel separable sub-blocks with `C` channels, three
//! epilogue layers and global average pooling to per-class logits.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMap;
use crate::nn::{BatchNorm1d, Mode, NnError, Param, ParamKind, Scalar, Tape, Tensor, Var};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl ModelError {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelError::InvalidConfig(_) => "InvalidConfig",
            ModelError::Nn(e) => e.kind(),
        }
    }
}

/// First block kernel; each later block widens by two taps.
pub const FIRST_BLOCK_KERNEL: usize = 13;

/// `13, 15, 17, ...` for `blocks` residual blocks.
pub fn kernel_schedule(blocks: usize) -> Vec<usize> {
    (0..blocks).map(|b| FIRST_BLOCK_KERNEL + 2 * b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub blocks: usize,
    pub sub_blocks: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub n_feat: usize,
    pub prologue_channels: usize,
    pub prologue_kernel: usize,
    pub block_kernels: Vec<usize>,
    pub epilogue_channels: usize,
    pub epilogue_kernel: usize,
    pub epilogue_dilation: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn new(blocks: usize, sub_blocks: usize, channels: usize, n_classes: usize) -> Self {
        Self {
            blocks,
            sub_blocks,
            channels,
            n_classes,
            n_feat: 64,
            prologue_channels: 128,
            prologue_kernel: 11,
            block_kernels: kernel_schedule(blocks),
            epilogue_channels: 128,
            epilogue_kernel: 29,
            epilogue_dilation: 2,
            dropout_p: 0.1,
        }
    }

    /// Parses the `BxRxC` naming, e.g. `3x2x64`.
    pub fn from_name(name: &str, n_classes: usize) -> Result<Self, ModelError> {
        let size: ModelSize = name.parse()?;
        Ok(Self::new(size.blocks, size.sub_blocks, size.channels, n_classes))
    }

    pub fn name(&self) -> String {
        format!("{}x{}x{}", self.blocks, self.sub_blocks, self.channels)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.blocks == 0 || self.sub_blocks == 0 || self.channels == 0 {
            return bad("B, R and C must all be at least 1".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.n_feat == 0 || self.prologue_channels == 0 || self.epilogue_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.block_kernels.len() != self.blocks {
            return bad(format!("{} block kernels for {} blocks", self.block_kernels.len(), self.blocks));
        }
        if self.block_kernels.iter().any(|k| k % 2 == 0) {
            return bad("block kernels must be odd".into());
        }
        if self.block_kernels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("block kernels must be strictly increasing".into());
        }
        for (what, k) in [("prologue", self.prologue_kernel), ("epilogue", self.epilogue_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{what} kernel must be odd"));
            }
        }
        if self.epilogue_dilation == 0 {
            return bad("dilation must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSize {
    pub blocks: usize,
    pub sub_blocks: usize,
    pub channels: usize,
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.blocks, self.sub_blocks, self.channels)
    }
}

impl Serialize for ModelSize {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> Result<Ser::Ok, Ser::Error> {
        s.collect_str(self)
    }
}

impl FromStr for ModelSize {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(['x', 'X', '×'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| ModelError::InvalidConfig(format!("model name {s:?} is not BxRxC")))?;
        match parts[..] {
            [blocks, sub_blocks, channels] => Ok(Self { blocks, sub_blocks, channels }),
            _ => Err(ModelError::InvalidConfig(format!("model name {s:?} is not BxRxC"))),
        }
    }
}

/// Trainable scalars: convolution weights, biases where present and
/// batch-norm scale/shift. Running statistics are not counted.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let bn = |c: usize| 2 * c;
    let separable = |cin: usize, k: usize, cout: usize| cin * k + cin * cout;

    let mut total = separable(cfg.n_feat, cfg.prologue_kernel, cfg.prologue_channels) + bn(cfg.prologue_channels);
    let mut cin = cfg.prologue_channels;
    for &k in &cfg.block_kernels {
        let mut c = cin;
        for _ in 0..cfg.sub_blocks {
            total += separable(c, k, cfg.channels) + bn(cfg.channels);
            c = cfg.channels;
        }
        total += cin * cfg.channels + bn(cfg.channels);
        cin = cfg.channels;
    }
    total += separable(cin, cfg.epilogue_kernel, cfg.epilogue_channels) + bn(cfg.epilogue_channels);
    total += cfg.epilogue_channels * cfg.epilogue_channels + bn(cfg.epilogue_channels);
    total += cfg.epilogue_channels * cfg.n_classes + cfg.n_classes;
    total
}

/// One row of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSummary {
    pub name: String,
    pub sub_blocks: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl fmt::Display for LayerSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<6} {:>2} {:>5} {:>4}", self.name, self.sub_blocks, self.out_channels, self.kernel)?;
        if self.dilation > 1 {
            write!(f, ", dilation={}", self.dilation)?;
        }
        Ok(())
    }
}

fn uniform_tensor<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut seed::Rng) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| S::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Optional depthwise conv over time followed by a 1x1 conv.
#[derive(Debug, Clone)]
pub struct SeparableConv<S> {
    pub depthwise: Option<Param<S>>,
    pub dilation: usize,
    pub pointwise: Param<S>,
    pub bias: Option<Param<S>>,
}

impl<S: Scalar> SeparableConv<S> {
    fn new(prefix: &str, cin: usize, kernel: usize, dilation: usize, cout: usize, rng: &mut seed::Rng) -> Self {
        let depthwise = (kernel > 1).then(|| {
            Param::new(format!("{prefix}.depthwise.weight"), uniform_tensor(&[cin, kernel], kernel, rng), ParamKind::Weight)
        });
        let pointwise =
            Param::new(format!("{prefix}.pointwise.weight"), uniform_tensor(&[cout, cin], cin, rng), ParamKind::Weight);
        Self { depthwise, dilation, pointwise, bias: None }
    }

    fn with_bias(mut self, prefix: &str) -> Self {
        let cout = self.pointwise.value.shape()[0];
        self.bias = Some(Param::new(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Bias));
        self
    }

    fn forward(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        if let Some(dw) = &mut self.depthwise {
            let w = dw.bind(tape);
            h = tape.depthwise_conv1d(h, w, None, self.dilation)?;
        }
        let w = self.pointwise.bind(tape);
        let b = self.bias.as_mut().map(|b| b.bind(tape));
        tape.pointwise_conv1d(h, w, b)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<S>>) {
        out.extend(self.depthwise.iter());
        out.push(&self.pointwise);
        out.extend(self.bias.iter());
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<S>>) {
        out.extend(self.depthwise.iter_mut());
        out.push(&mut self.pointwise);
        out.extend(self.bias.iter_mut());
    }
}

/// Separable conv followed by batch norm.
#[derive(Debug, Clone)]
pub struct SubBlock<S> {
    pub conv: SeparableConv<S>,
    pub bn: BatchNorm1d<S>,
    pub name: String,
}

impl<S: Scalar> SubBlock<S> {
    fn new(prefix: &str, cin: usize, kernel: usize, dilation: usize, cout: usize, rng: &mut seed::Rng) -> Self {
        Self {
            conv: SeparableConv::new(prefix, cin, kernel, dilation, cout, rng),
            bn: BatchNorm1d::new(&format!("{prefix}.bn"), cout),
            name: prefix.to_string(),
        }
    }

    fn forward_bn(&mut self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<Var, NnError> {
        let h = self.conv.forward(tape, x)?;
        tape.batch_norm1d(h, &mut self.bn, mode)
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<S>>) {
        self.conv.params(out);
        out.push(&self.bn.gamma);
        out.push(&self.bn.beta);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<S>>) {
        self.conv.params_mut(out);
        out.push(&mut self.bn.gamma);
        out.push(&mut self.bn.beta);
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<S> {
    pub subs: Vec<SubBlock<S>>,
    /// 1x1 projection + BN of the block input, added before the last activation.
    pub residual: SubBlock<S>,
}

#[derive(Debug, Clone)]
pub struct Network<S> {
    config: ModelConfig,
    pub prologue: SubBlock<S>,
    pub blocks: Vec<ResidualBlock<S>>,
    pub conv2: SubBlock<S>,
    pub conv3: SubBlock<S>,
    pub head: SeparableConv<S>,
}

impl<S: Scalar> Network<S> {
    pub fn build(cfg: &ModelConfig, seed_value: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = seed::rng_for(seed_value, &[seed::stream::INIT]);
        let prologue = SubBlock::new("conv1", cfg.n_feat, cfg.prologue_kernel, 1, cfg.prologue_channels, &mut rng);

        let mut cin = cfg.prologue_channels;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for (b, &k) in cfg.block_kernels.iter().enumerate() {
            let subs = (0..cfg.sub_blocks)
                .map(|r| {
                    let c = if r == 0 { cin } else { cfg.channels };
                    SubBlock::new(&format!("blocks.{b}.sub.{r}"), c, k, 1, cfg.channels, &mut rng)
                })
                .collect();
            let residual = SubBlock::new(&format!("blocks.{b}.residual"), cin, 1, 1, cfg.channels, &mut rng);
            blocks.push(ResidualBlock { subs, residual });
            cin = cfg.channels;
        }

        let conv2 = SubBlock::new(
            "conv2",
            cin,
            cfg.epilogue_kernel,
            cfg.epilogue_dilation,
            cfg.epilogue_channels,
            &mut rng,
        );
        let conv3 = SubBlock::new("conv3", cfg.epilogue_channels, 1, 1, cfg.epilogue_channels, &mut rng);
        let head = SeparableConv::new("conv4", cfg.epilogue_channels, 1, 1, cfg.n_classes, &mut rng).with_bias("conv4");
        Ok(Self { config: cfg.clone(), prologue, blocks, conv2, conv3, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Records the forward pass on `tape` and returns `N x n_classes` logits.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<S>,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, NnError> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.config.n_feat {
            return Err(NnError::ShapeMismatch(format!(
                "network input {shape:?}, expected N x {} x T",
                self.config.n_feat
            )));
        }
        let p = self.config.dropout_p;
        let act = |tape: &mut Tape<S>, h: Var, rng: &mut R| {
            let h = tape.relu(h);
            tape.dropout(h, p, mode, rng)
        };

        let h = self.prologue.forward_bn(tape, input, mode)?;
        let mut x = act(tape, h, rng);
        for block in &mut self.blocks {
            let mut h = x;
            let last = block.subs.len() - 1;
            for (r, sub) in block.subs.iter_mut().enumerate() {
                h = sub.forward_bn(tape, h, mode)?;
                if r < last {
                    h = act(tape, h, rng);
                }
            }
            let res = block.residual.forward_bn(tape, x, mode)?;
            let sum = tape.add(h, res)?;
            x = act(tape, sum, rng);
        }
        let h = self.conv2.forward_bn(tape, x, mode)?;
        let h = act(tape, h, rng);
        let h = self.conv3.forward_bn(tape, h, mode)?;
        let h = act(tape, h, rng);
        let per_frame = self.head.forward(tape, h)?;
        tape.global_avg_pool(per_frame)
    }

    /// Eval-mode logits for a batch of feature maps.
    pub fn predict(&mut self, features: &[&FeatureMap]) -> Result<Vec<Vec<S>>, NnError> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let x = tape.leaf(features_to_tensor(features)?);
        // dropout is inactive in eval mode, the rng is never drawn from
        let mut rng = seed::rng(0);
        let logits = self.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        let k = self.config.n_classes;
        Ok(tape.value(logits).data().chunks(k).map(<[S]>::to_vec).collect())
    }

    /// Parameters in a fixed canonical order.
    pub fn params(&self) -> Vec<&Param<S>> {
        let mut out = Vec::new();
        self.prologue.params(&mut out);
        for b in &self.blocks {
            for s in &b.subs {
                s.params(&mut out);
            }
            b.residual.params(&mut out);
        }
        self.conv2.params(&mut out);
        self.conv3.params(&mut out);
        self.head.params(&mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = Vec::new();
        self.prologue.params_mut(&mut out);
        for b in &mut self.blocks {
            for s in &mut b.subs {
                s.params_mut(&mut out);
            }
            b.residual.params_mut(&mut out);
        }
        self.conv2.params_mut(&mut out);
        self.conv3.params_mut(&mut out);
        self.head.params_mut(&mut out);
        out
    }

    fn sub_blocks(&self) -> Vec<&SubBlock<S>> {
        let mut out = vec![&self.prologue];
        for b in &self.blocks {
            out.extend(b.subs.iter());
            out.push(&b.residual);
        }
        out.push(&self.conv2);
        out.push(&self.conv3);
        out
    }

    fn sub_blocks_mut(&mut self) -> Vec<&mut SubBlock<S>> {
        let mut out = vec![&mut self.prologue];
        for b in &mut self.blocks {
            out.extend(b.subs.iter_mut());
            out.push(&mut b.residual);
        }
        out.push(&mut self.conv2);
        out.push(&mut self.conv3);
        out
    }

    /// `(prefix, batch norm)` pairs in canonical order.
    pub fn batch_norms(&self) -> Vec<(String, &BatchNorm1d<S>)> {
        self.sub_blocks().into_iter().map(|s| (format!("{}.bn", s.name), &s.bn)).collect()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<(String, &mut BatchNorm1d<S>)> {
        self.sub_blocks_mut()
            .into_iter()
            .map(|s| (format!("{}.bn", s.name), &mut s.bn))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Copies parameter gradients out of `tape` after [`Tape::backward`].
    pub fn pull_grads(&mut self, tape: &Tape<S>) {
        for p in self.params_mut() {
            p.pull_grad(tape);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.value.zero_grad();
        }
    }

    /// Rows of the architecture table, top to bottom.
    pub fn layers(&self) -> Vec<LayerSummary> {
        let c = &self.config;
        let mut rows = vec![LayerSummary {
            name: "Conv1".into(),
            sub_blocks: 1,
            out_channels: c.prologue_channels,
            kernel: c.prologue_kernel,
            dilation: 1,
        }];
        for (b, &k) in c.block_kernels.iter().enumerate() {
            rows.push(LayerSummary {
                name: format!("B{}", b + 1),
                sub_blocks: c.sub_blocks,
                out_channels: c.channels,
                kernel: k,
                dilation: 1,
            });
        }
        rows.push(LayerSummary {
            name: "Conv2".into(),
            sub_blocks: 1,
            out_channels: c.epilogue_channels,
            kernel: c.epilogue_kernel,
            dilation: c.epilogue_dilation,
        });
        rows.push(LayerSummary { name: "Conv3".into(), sub_blocks: 1, out_channels: c.epilogue_channels, kernel: 1, dilation: 1 });
        rows.push(LayerSummary { name: "Conv4".into(), sub_blocks: 1, out_channels: c.n_classes, kernel: 1, dilation: 1 });
        rows
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        fn p<S: Scalar, T: Scalar>(x: &Param<S>) -> Param<T> {
            Param::new(x.name.clone(), x.value.cast(), x.kind)
        }
        fn conv<S: Scalar, T: Scalar>(c: &SeparableConv<S>) -> SeparableConv<T> {
            SeparableConv {
                depthwise: c.depthwise.as_ref().map(p),
                dilation: c.dilation,
                pointwise: p(&c.pointwise),
                bias: c.bias.as_ref().map(p),
            }
        }
        fn sub<S: Scalar, T: Scalar>(s: &SubBlock<S>) -> SubBlock<T> {
            SubBlock {
                conv: conv(&s.conv),
                bn: BatchNorm1d {
                    gamma: p(&s.bn.gamma),
                    beta: p(&s.bn.beta),
                    running_mean: s.bn.running_mean.iter().map(|v| T::lit(v.as_f64())).collect(),
                    running_var: s.bn.running_var.iter().map(|v| T::lit(v.as_f64())).collect(),
                    momentum: s.bn.momentum,
                    eps: s.bn.eps,
                },
                name: s.name.clone(),
            }
        }
        Network {
            config: self.config.clone(),
            prologue: sub(&self.prologue),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock { subs: b.subs.iter().map(sub).collect(), residual: sub(&b.residual) })
                .collect(),
            conv2: sub(&self.conv2),
            conv3: sub(&self.conv3),
            head: conv(&self.head),
        }
    }
}

/// Stacks feature maps into an `N x n_coeffs x n_frames` tensor.
pub fn features_to_tensor<S: Scalar>(features: &[&FeatureMap]) -> Result<Tensor<S>, NnError> {
    let (c, t) = features
        .first()
        .map(|f| (f.n_coeffs, f.n_frames))
        .ok_or_else(|| NnError::ShapeMismatch("empty batch".into()))?;
    let mut data = Vec::with_capacity(features.len() * c * t);
    for f in features {
        if (f.n_coeffs, f.n_frames) != (c, t) {
            return Err(NnError::ShapeMismatch(format!(
                "feature map {}x{} in a batch of {c}x{t}",
                f.n_coeffs, f.n_frames
            )));
        }
        data.extend(f.values.iter().map(|&v| S::lit(v as f64)));
    }
    Tensor::new(&[features.len(), c, t], data)
}
