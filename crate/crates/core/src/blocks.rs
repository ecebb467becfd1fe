//! Residual building blocks: bottleneck, basic and simple, in pre-activation
//! order (batch norm and ReLU on block inputs), with optional input
//! downsampling, output upsampling, dropout on the residual path, and an
//! identity-style short skip.
//!
//! Shortcuts carry no learned transform unless the block changes width
//! (1x1 convolution) or resolution (parameter-free decimation/repetition);
//! composition order on the shortcut is resample first, then 1x1.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormState, Conv2dParams, Phase};
use crate::rng::{param_rng, standard_normal};
use crate::tensor::{real, Parameter, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    None,
    Down,
    Up,
}

#[derive(Debug, Clone)]
pub struct BlockOpts {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resample: Resample,
    pub use_batch_norm: bool,
    pub dropout_rate: f64,
    pub use_short_skip: bool,
}

/// Forward-pass mode for a whole network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train,
    Eval,
    /// Dropout sampled at the given rate, every other layer in eval mode;
    /// used for test-time model averaging.
    McSample { rate: f64 },
}

/// Per-forward state threaded through the network: the mode plus the RNG
/// feeding stochastic layers.
pub struct ForwardCtx {
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn new(mode: Mode, rng: ChaCha8Rng) -> Self {
        ForwardCtx { mode, rng }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            rng,
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            rng: crate::rng::derive_rng(0, "eval-unused", 0),
        }
    }

    fn bn_phase(&self) -> Phase {
        match self.mode {
            Mode::Train => Phase::Train,
            _ => Phase::Eval,
        }
    }

    fn effective_dropout(&self, configured: f64) -> f64 {
        match self.mode {
            Mode::Train => configured,
            Mode::Eval => 0.0,
            Mode::McSample { rate } => rate,
        }
    }
}

/// Convolution layer owning named weight and bias parameters.
/// Weights get He fan-in normal init, biases start at zero; each parameter
/// draws from its own name-keyed stream so ablation variants agree on every
/// parameter they share.
pub struct ConvLayer<F: Real> {
    pub weight: Parameter<F>,
    pub bias: Parameter<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Real> ConvLayer<F> {
    pub fn new(
        seed: u64,
        prefix: &str,
        depth: usize,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let pad = k / 2;
        let wname = format!("{prefix}.weight");
        let mut rng = param_rng(seed, &wname);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight: Vec<F> = (0..cout * cin * k * k)
            .map(|_| real(standard_normal(&mut rng) * std))
            .collect();
        ConvLayer {
            weight: Parameter::new(
                Tensor::from_vec(weight, &[cout, cin, k, k]).unwrap(),
                wname,
                depth,
            ),
            bias: Parameter::new(Tensor::zeros(&[cout]), format!("{prefix}.bias"), depth),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        ops::conv2d(
            x,
            &Conv2dParams {
                weight: self.weight.tensor.clone(),
                bias: self.bias.tensor.clone(),
                stride: self.stride,
                padding: self.pad,
            },
        )
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    fn collect_params(&self, out: &mut Vec<Parameter<F>>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

pub struct BatchNormLayer<F: Real> {
    pub gamma: Parameter<F>,
    pub beta: Parameter<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    name: String,
    momentum: f64,
    eps: f64,
}

impl<F: Real> BatchNormLayer<F> {
    pub fn new(prefix: &str, depth: usize, channels: usize) -> Self {
        BatchNormLayer {
            gamma: Parameter::new(
                Tensor::full(&[channels], F::one()),
                format!("{prefix}.gamma"),
                depth,
            ),
            beta: Parameter::new(Tensor::zeros(&[channels]), format!("{prefix}.beta"), depth),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::one()),
            name: prefix.to_string(),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<F>, phase: Phase) -> Result<Tensor<F>> {
        ops::batch_norm(
            x,
            &BatchNormState {
                gamma: self.gamma.tensor.clone(),
                beta: self.beta.tensor.clone(),
                running_mean: self.running_mean.clone(),
                running_var: self.running_var.clone(),
                momentum: self.momentum,
                eps: self.eps,
            },
            phase,
        )
    }

    fn collect_params(&self, out: &mut Vec<Parameter<F>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }

    fn collect_buffers(&self, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{}.running_mean", self.name), self.running_mean.clone()));
        out.push((format!("{}.running_var", self.name), self.running_var.clone()));
    }
}

/// Identity-like adaptation along a shortcut: parameter-free decimation or
/// repetition for resolution, a 1x1 convolution only when the width changes.
pub struct ShortcutAdapt<F: Real> {
    resample: Resample,
    proj: Option<ConvLayer<F>>,
}

impl<F: Real> ShortcutAdapt<F> {
    pub fn new(seed: u64, prefix: &str, depth: usize, opts: &BlockOpts) -> Self {
        let proj = (opts.in_channels != opts.out_channels).then(|| {
            ConvLayer::new(
                seed,
                &format!("{prefix}.shortcut"),
                depth,
                opts.in_channels,
                opts.out_channels,
                1,
                1,
            )
        });
        ShortcutAdapt {
            resample: opts.resample,
            proj,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let resampled = match self.resample {
            Resample::None => x.clone(),
            Resample::Down => ops::decimate_downsample(x, 2)?,
            Resample::Up => ops::repeat_upsample(x, 2)?,
        };
        match &self.proj {
            Some(conv) => conv.forward(&resampled),
            None => Ok(resampled),
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.as_ref().map_or(0, |c| c.param_count())
    }

    fn collect_params(&self, out: &mut Vec<Parameter<F>>) {
        if let Some(c) = &self.proj {
            c.collect_params(out);
        }
    }
}

pub fn shortcut_adapt<F: Real>(x: &Tensor<F>, adapt: &ShortcutAdapt<F>) -> Result<Tensor<F>> {
    adapt.forward(x)
}

fn residual_join<F: Real>(residual: Tensor<F>, shortcut: Option<Tensor<F>>) -> Result<Tensor<F>> {
    match shortcut {
        Some(sc) => residual.add(&sc).map_err(|e| {
            Error::Internal(format!("residual/shortcut shape mismatch inside a block: {e}"))
        }),
        None => Ok(residual),
    }
}

/// Single-convolution residual block:
/// `[BN] -> ReLU -> [down: stride-2] conv3x3 -> [dropout] -> [up: repeat]`,
/// summed with the adapted shortcut.
pub struct SimpleBlock<F: Real> {
    pub opts: BlockOpts,
    bn: Option<BatchNormLayer<F>>,
    conv: ConvLayer<F>,
    shortcut: Option<ShortcutAdapt<F>>,
}

impl<F: Real> SimpleBlock<F> {
    pub fn new(seed: u64, prefix: &str, depth: usize, opts: BlockOpts) -> Result<Self> {
        let stride = if opts.resample == Resample::Down { 2 } else { 1 };
        Ok(SimpleBlock {
            bn: opts
                .use_batch_norm
                .then(|| BatchNormLayer::new(&format!("{prefix}.bn"), depth, opts.in_channels)),
            conv: ConvLayer::new(
                seed,
                &format!("{prefix}.conv"),
                depth,
                opts.in_channels,
                opts.out_channels,
                3,
                stride,
            ),
            shortcut: opts
                .use_short_skip
                .then(|| ShortcutAdapt::new(seed, prefix, depth, &opts)),
            opts,
        })
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        let mut r = x.clone();
        if let Some(bn) = &self.bn {
            r = bn.forward(&r, ctx.bn_phase())?;
        }
        r = ops::relu(&r);
        r = self.conv.forward(&r)?;
        let rate = ctx.effective_dropout(self.opts.dropout_rate);
        if rate > 0.0 {
            r = ops::dropout(&r, rate, Phase::Train, &mut ctx.rng)?;
        }
        if self.opts.resample == Resample::Up {
            r = ops::repeat_upsample(&r, 2)?;
        }
        let sc = self
            .shortcut
            .as_ref()
            .map(|s| s.forward(x))
            .transpose()?;
        residual_join(r, sc)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
            + self.bn.as_ref().map_or(0, |b| 2 * b.gamma.numel())
            + self.shortcut.as_ref().map_or(0, |s| s.param_count())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter<F>>) {
        if let Some(bn) = &self.bn {
            bn.collect_params(out);
        }
        self.conv.collect_params(out);
        if let Some(sc) = &self.shortcut {
            sc.collect_params(out);
        }
    }

    pub fn collect_buffers(&self, out: &mut Vec<(String, Tensor<F>)>) {
        if let Some(bn) = &self.bn {
            bn.collect_buffers(out);
        }
    }
}

/// Two-convolution residual block, pre-activation before each stage,
/// dropout between the stages; downsampling strides the first convolution,
/// upsampling repeats after the second.
pub struct BasicBlock<F: Real> {
    pub opts: BlockOpts,
    bn1: Option<BatchNormLayer<F>>,
    conv1: ConvLayer<F>,
    bn2: Option<BatchNormLayer<F>>,
    conv2: ConvLayer<F>,
    shortcut: Option<ShortcutAdapt<F>>,
}

impl<F: Real> BasicBlock<F> {
    pub fn new(seed: u64, prefix: &str, depth: usize, opts: BlockOpts) -> Result<Self> {
        let stride = if opts.resample == Resample::Down { 2 } else { 1 };
        Ok(BasicBlock {
            bn1: opts
                .use_batch_norm
                .then(|| BatchNormLayer::new(&format!("{prefix}.bn1"), depth, opts.in_channels)),
            conv1: ConvLayer::new(
                seed,
                &format!("{prefix}.conv1"),
                depth,
                opts.in_channels,
                opts.out_channels,
                3,
                stride,
            ),
            bn2: opts
                .use_batch_norm
                .then(|| BatchNormLayer::new(&format!("{prefix}.bn2"), depth, opts.out_channels)),
            conv2: ConvLayer::new(
                seed,
                &format!("{prefix}.conv2"),
                depth,
                opts.out_channels,
                opts.out_channels,
                3,
                1,
            ),
            shortcut: opts
                .use_short_skip
                .then(|| ShortcutAdapt::new(seed, prefix, depth, &opts)),
            opts,
        })
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        let mut r = x.clone();
        if let Some(bn) = &self.bn1 {
            r = bn.forward(&r, ctx.bn_phase())?;
        }
        r = ops::relu(&r);
        r = self.conv1.forward(&r)?;
        let rate = ctx.effective_dropout(self.opts.dropout_rate);
        if rate > 0.0 {
            r = ops::dropout(&r, rate, Phase::Train, &mut ctx.rng)?;
        }
        if let Some(bn) = &self.bn2 {
            r = bn.forward(&r, ctx.bn_phase())?;
        }
        r = ops::relu(&r);
        r = self.conv2.forward(&r)?;
        if self.opts.resample == Resample::Up {
            r = ops::repeat_upsample(&r, 2)?;
        }
        let sc = self
            .shortcut
            .as_ref()
            .map(|s| s.forward(x))
            .transpose()?;
        residual_join(r, sc)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.bn1.as_ref().map_or(0, |b| 2 * b.gamma.numel())
            + self.bn2.as_ref().map_or(0, |b| 2 * b.gamma.numel())
            + self.shortcut.as_ref().map_or(0, |s| s.param_count())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter<F>>) {
        if let Some(bn) = &self.bn1 {
            bn.collect_params(out);
        }
        self.conv1.collect_params(out);
        if let Some(bn) = &self.bn2 {
            bn.collect_params(out);
        }
        self.conv2.collect_params(out);
        if let Some(sc) = &self.shortcut {
            sc.collect_params(out);
        }
    }

    pub fn collect_buffers(&self, out: &mut Vec<(String, Tensor<F>)>) {
        for bn in [&self.bn1, &self.bn2].into_iter().flatten() {
            bn.collect_buffers(out);
        }
    }
}

/// Three-stage 1x1 -> 3x3 -> 1x1 residual block with internal width
/// `out_channels / 4`, pre-activation before each stage, dropout after the
/// middle convolution.
pub struct BottleneckBlock<F: Real> {
    pub opts: BlockOpts,
    bn1: Option<BatchNormLayer<F>>,
    conv1: ConvLayer<F>,
    bn2: Option<BatchNormLayer<F>>,
    conv2: ConvLayer<F>,
    bn3: Option<BatchNormLayer<F>>,
    conv3: ConvLayer<F>,
    shortcut: Option<ShortcutAdapt<F>>,
}

impl<F: Real> BottleneckBlock<F> {
    pub fn new(seed: u64, prefix: &str, depth: usize, opts: BlockOpts) -> Result<Self> {
        if !opts.out_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "bottleneck {prefix}: out_channels {} not divisible by 4",
                opts.out_channels
            )));
        }
        let mid = opts.out_channels / 4;
        let stride = if opts.resample == Resample::Down { 2 } else { 1 };
        Ok(BottleneckBlock {
            bn1: opts
                .use_batch_norm
                .then(|| BatchNormLayer::new(&format!("{prefix}.bn1"), depth, opts.in_channels)),
            conv1: ConvLayer::new(
                seed,
                &format!("{prefix}.conv1"),
                depth,
                opts.in_channels,
                mid,
                1,
                stride,
            ),
            bn2: opts
                .use_batch_norm
                .then(|| BatchNormLayer::new(&format!("{prefix}.bn2"), depth, mid)),
            conv2: ConvLayer::new(seed, &format!("{prefix}.conv2"), depth, mid, mid, 3, 1),
            bn3: opts
                .use_batch_norm
                .then(|| BatchNormLayer::new(&format!("{prefix}.bn3"), depth, mid)),
            conv3: ConvLayer::new(
                seed,
                &format!("{prefix}.conv3"),
                depth,
                mid,
                opts.out_channels,
                1,
                1,
            ),
            shortcut: opts
                .use_short_skip
                .then(|| ShortcutAdapt::new(seed, prefix, depth, &opts)),
            opts,
        })
    }

    pub fn internal_width(&self) -> usize {
        self.opts.out_channels / 4
    }

    pub fn forward(&self, x: &Tensor<F>, ctx: &mut ForwardCtx) -> Result<Tensor<F>> {
        let mut r = x.clone();
        if let Some(bn) = &self.bn1 {
            r = bn.forward(&r, ctx.bn_phase())?;
        }
        r = ops::relu(&r);
        r = self.conv1.forward(&r)?;
        if let Some(bn) = &self.bn2 {
            r = bn.forward(&r, ctx.bn_phase())?;
        }
        r = ops::relu(&r);
        r = self.conv2.forward(&r)?;
        let rate = ctx.effective_dropout(self.opts.dropout_rate);
        if rate > 0.0 {
            r = ops::dropout(&r, rate, Phase::Train, &mut ctx.rng)?;
        }
        if let Some(bn) = &self.bn3 {
            r = bn.forward(&r, ctx.bn_phase())?;
        }
        r = ops::relu(&r);
        r = self.conv3.forward(&r)?;
        if self.opts.resample == Resample::Up {
            r = ops::repeat_upsample(&r, 2)?;
        }
        let sc = self
            .shortcut
            .as_ref()
            .map(|s| s.forward(x))
            .transpose()?;
        residual_join(r, sc)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.conv3.param_count()
            + [&self.bn1, &self.bn2, &self.bn3]
                .into_iter()
                .flatten()
                .map(|b| 2 * b.gamma.numel())
                .sum::<usize>()
            + self.shortcut.as_ref().map_or(0, |s| s.param_count())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter<F>>) {
        if let Some(bn) = &self.bn1 {
            bn.collect_params(out);
        }
        self.conv1.collect_params(out);
        if let Some(bn) = &self.bn2 {
            bn.collect_params(out);
        }
        self.conv2.collect_params(out);
        if let Some(bn) = &self.bn3 {
            bn.collect_params(out);
        }
        self.conv3.collect_params(out);
        if let Some(sc) = &self.shortcut {
            sc.collect_params(out);
        }
    }

    pub fn collect_buffers(&self, out: &mut Vec<(String, Tensor<F>)>) {
        for bn in [&self.bn1, &self.bn2, &self.bn3].into_iter().flatten() {
            bn.collect_buffers(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn opts(cin: usize, cout: usize, resample: Resample, bn: bool, skip: bool) -> BlockOpts {
        BlockOpts {
            in_channels: cin,
            out_channels: cout,
            resample,
            use_batch_norm: bn,
            dropout_rate: 0.0,
            use_short_skip: skip,
        }
    }

    fn rand_input(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = derive_rng(seed, "block-input", 0);
        let n = shape.iter().product();
        Tensor::from_vec(
            (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
            shape,
        )
        .unwrap()
    }

    fn zero_params(params: &[Parameter<f64>]) {
        for p in params {
            p.tensor.apply_data(|d| d.fill(0.0));
        }
    }

    #[allow(clippy::large_enum_variant)]
    enum AnyBlock {
        Simple(SimpleBlock<f64>),
        Basic(BasicBlock<f64>),
        Bottleneck(BottleneckBlock<f64>),
    }

    impl AnyBlock {
        fn build(kind: usize, o: BlockOpts) -> Self {
            match kind {
                0 => AnyBlock::Simple(SimpleBlock::new(7, "t", 0, o).unwrap()),
                1 => AnyBlock::Basic(BasicBlock::new(7, "t", 0, o).unwrap()),
                _ => AnyBlock::Bottleneck(BottleneckBlock::new(7, "t", 0, o).unwrap()),
            }
        }
        fn forward(&self, x: &Tensor<f64>, ctx: &mut ForwardCtx) -> Result<Tensor<f64>> {
            match self {
                AnyBlock::Simple(b) => b.forward(x, ctx),
                AnyBlock::Basic(b) => b.forward(x, ctx),
                AnyBlock::Bottleneck(b) => b.forward(x, ctx),
            }
        }
        fn params(&self) -> Vec<Parameter<f64>> {
            let mut v = Vec::new();
            match self {
                AnyBlock::Simple(b) => b.collect_params(&mut v),
                AnyBlock::Basic(b) => b.collect_params(&mut v),
                AnyBlock::Bottleneck(b) => b.collect_params(&mut v),
            }
            v
        }
    }

    #[test]
    fn zero_residual_with_skip_is_identity() {
        let x = rand_input(1, &[1, 4, 6, 6]);
        for kind in 0..3 {
            let block = AnyBlock::build(kind, opts(4, 4, Resample::None, true, true));
            zero_params(
                &block
                    .params()
                    .into_iter()
                    .filter(|p| p.name.contains("conv") || p.name.contains("shortcut"))
                    .collect::<Vec<_>>(),
            );
            let y = block.forward(&x, &mut ForwardCtx::train(derive_rng(0, "t", 0))).unwrap();
            assert_eq!(y.data_vec(), x.data_vec(), "kind {kind}");
        }
    }

    #[test]
    fn zero_residual_without_skip_is_zero() {
        let x = rand_input(2, &[1, 4, 6, 6]);
        for kind in 0..3 {
            let block = AnyBlock::build(kind, opts(4, 4, Resample::None, true, false));
            zero_params(&block.params());
            let y = block.forward(&x, &mut ForwardCtx::train(derive_rng(0, "t", 0))).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0), "kind {kind}");
        }
    }

    #[test]
    fn gradient_passes_through_skip_unchanged_at_zero_weights() {
        let x = rand_input(3, &[1, 4, 6, 6]);
        x.set_requires_grad(true);
        let block = AnyBlock::build(0, opts(4, 4, Resample::None, false, true));
        zero_params(&block.params());
        let y = block
            .forward(&x, &mut ForwardCtx::train(derive_rng(0, "t", 0)))
            .unwrap();
        y.sum().backward().unwrap();
        assert!(x.grad_vec().unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn shape_contract_all_types_resamples_and_skips() {
        let x = rand_input(4, &[2, 4, 8, 8]);
        for kind in 0..3 {
            for (resample, oh) in [(Resample::None, 8), (Resample::Down, 4), (Resample::Up, 16)] {
                for skip in [false, true] {
                    let block = AnyBlock::build(kind, opts(4, 8, resample, true, skip));
                    let y = block
                        .forward(&x, &mut ForwardCtx::train(derive_rng(0, "t", 0)))
                        .unwrap();
                    assert_eq!(
                        y.shape(),
                        vec![2, 8, oh, oh],
                        "kind {kind} resample {resample:?} skip {skip}"
                    );
                }
            }
        }
    }

    #[test]
    fn shortcut_identity_returns_input_tensor() {
        let o = opts(8, 8, Resample::None, false, true);
        let sc = ShortcutAdapt::<f64>::new(0, "t", 0, &o);
        let x = rand_input(5, &[1, 8, 4, 4]);
        let y = shortcut_adapt(&x, &sc).unwrap();
        assert_eq!(y.id(), x.id());
        assert_eq!(sc.param_count(), 0);
    }

    #[test]
    fn shortcut_channel_projection_parameter_count() {
        let o = opts(32, 128, Resample::None, false, true);
        let sc = ShortcutAdapt::<f64>::new(0, "t", 0, &o);
        assert_eq!(sc.param_count(), 32 * 128 + 128);
    }

    #[test]
    fn shortcut_decimation_adds_no_parameters() {
        let o = opts(4, 4, Resample::Down, false, true);
        let sc = ShortcutAdapt::<f64>::new(0, "t", 0, &o);
        assert_eq!(sc.param_count(), 0);
        let data: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let grid: Vec<f64> = std::iter::repeat_n(data.iter().copied(), 4)
            .flatten()
            .collect();
        let x = Tensor::from_vec(grid, &[1, 4, 4, 4]).unwrap();
        let y = sc.forward(&x).unwrap();
        assert_eq!(y.data_vec()[..4], [0.0, 2.0, 20.0, 22.0]);
    }

    #[test]
    fn basic_block_parameter_count_formula() {
        let c = 16;
        let b = BasicBlock::<f64>::new(0, "t", 0, opts(c, c, Resample::None, true, true)).unwrap();
        assert_eq!(b.param_count(), 2 * (c * c * 9 + c) + 2 * 2 * c);
    }

    #[test]
    fn bottleneck_internal_width_is_quarter() {
        let b =
            BottleneckBlock::<f64>::new(0, "t", 0, opts(64, 128, Resample::None, true, true))
                .unwrap();
        assert_eq!(b.internal_width(), 32);
    }

    #[test]
    fn bottleneck_rejects_width_not_divisible_by_four() {
        let err = BottleneckBlock::<f64>::new(0, "t", 0, opts(8, 6, Resample::None, true, true));
        assert!(err.is_err());
    }

    #[test]
    fn simple_block_gradcheck_all_options() {
        let x = rand_input(6, &[1, 4, 4, 4]);
        let block = SimpleBlock::<f64>::new(
            3,
            "g",
            0,
            BlockOpts {
                in_channels: 4,
                out_channels: 8,
                resample: Resample::Down,
                use_batch_norm: true,
                dropout_rate: 0.25,
                use_short_skip: true,
            },
        )
        .unwrap();
        let rel = crate::tensor::finite_diff_check(
            &mut |t: &Tensor<f64>| {
                let mut ctx = ForwardCtx::train(derive_rng(17, "fixed-mask", 0));
                Ok(block.forward(t, &mut ctx)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "rel err {rel}");
    }
}
