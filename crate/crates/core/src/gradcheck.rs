//! Finite-difference verification suite covering every differentiable
//! operator, all residual block variants, both losses, and a three-level
//! toy network. Everything runs in f64 with central differences.
//!
//! ReLU makes gradients piecewise: a draw whose pre-activations sit within
//! the finite-difference step of the kink would measure the subgradient
//! mismatch rather than a bug, so composite checks redraw inputs until all
//! ReLU inputs are at least `KINK_MARGIN` away from zero.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    BasicBlock, BlockOpts, BottleneckBlock, ForwardCtx, Resample, SimpleBlock,
};
use crate::error::{Error, Result};
use crate::net::{build_network, ArchRow, BlockKind, Network, NetworkConfig};
use crate::ops::{self, BatchNormState, Conv2dParams, Phase};
use crate::rng::derive_rng;
use crate::tensor::{finite_diff_check, Parameter, Tensor};
use crate::train::{bce_loss, dice_loss};

pub const FD_EPS: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed())
    }

    pub fn worst(&self) -> f64 {
        self.outcomes
            .iter()
            .map(|o| o.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Central-difference check against a parameter that lives inside a model:
/// perturbs `target`'s storage in place around `f`, which must rebuild the
/// graph on every call.
pub fn finite_diff_check_inplace(
    f: &mut dyn FnMut() -> Result<Tensor<f64>>,
    target: &Tensor<f64>,
    eps: f64,
) -> Result<f64> {
    let a = f()?.item()?;
    let b = f()?.item()?;
    if a != b {
        return Err(Error::NonDeterministic(format!(
            "f() evaluated twice gave {a} and {b}"
        )));
    }
    target.zero_grad();
    let loss = f()?;
    loss.backward()?;
    let analytic = target.grad_vec().ok_or_else(|| Error::Contract {
        op: "finite_diff_check_inplace",
        msg: "loss does not depend on the target tensor".into(),
    })?;
    target.zero_grad();

    let n = target.numel();
    let mut max_rel = 0.0f64;
    for i in 0..n {
        let orig = target.data()[i];
        target.apply_data(|d| d[i] = orig + eps);
        let fp = f()?.item()?;
        target.apply_data(|d| d[i] = orig - eps);
        let fm = f()?.item()?;
        target.apply_data(|d| d[i] = orig);
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / 1.0f64.max(analytic[i].abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Values bounded away from zero (for ReLU-adjacent inputs).
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = 0.1 + 0.9 * rng.random::<f64>();
            if rng.random::<f64>() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect()
}

/// Moves freshly built parameters to a generic point: gammas off 1, betas
/// and biases off 0. At the init point a dropout-killed batch-norm channel
/// feeds ReLU exactly its beta (= 0), which sits on the kink and makes the
/// central difference against that beta measure the subgradient mismatch
/// instead of the implementation.
fn randomize_affine(params: &[Parameter<f64>], rng: &mut ChaCha8Rng) {
    for p in params {
        if p.name.ends_with(".gamma") {
            p.tensor
                .apply_data(|d| d.iter_mut().for_each(|v| *v = 0.7 + 0.7 * rng.random::<f64>()));
        } else if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            p.tensor.apply_data(|d| {
                d.iter_mut().for_each(|v| {
                    let mag = 0.1 + 0.3 * rng.random::<f64>();
                    *v = if rng.random::<f64>() < 0.5 { -mag } else { mag };
                })
            });
        }
    }
}

struct Suite {
    seeds: usize,
    outcomes: Vec<CheckOutcome>,
}

impl Suite {
    fn run(
        &mut self,
        name: &str,
        threshold: f64,
        f: &mut dyn FnMut(u64) -> Result<f64>,
    ) -> Result<()> {
        let mut worst = 0.0f64;
        for s in 0..self.seeds {
            worst = worst.max(f(s as u64)?);
        }
        self.outcomes.push(CheckOutcome {
            name: name.to_string(),
            max_rel_err: worst,
            threshold,
        });
        Ok(())
    }
}

fn elementwise_checks(suite: &mut Suite) -> Result<()> {
    suite.run("op-add", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-add", 0);
        let b = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        let c = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        let x = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        finite_diff_check(&mut |t| Ok(t.add(&b)?.mul(&c)?.sum()), &x, FD_EPS)
    })?;
    suite.run("op-mul", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-mul", 0);
        let b = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        let x = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        finite_diff_check(&mut |t| Ok(t.mul(&b)?.mul(t)?.sum()), &x, FD_EPS)
    })?;
    suite.run("op-div", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-div", 0);
        let b = Tensor::from_vec(away_from_zero(&mut rng, 6), &[6])?;
        let x = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        finite_diff_check(&mut |t| Ok(t.div(&b)?.mul(t)?.sum()), &x, FD_EPS)
    })?;
    suite.run("op-scale-offset-neg", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-sso", 0);
        let x = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        finite_diff_check(
            &mut |t| Ok(t.scale(1.7).offset(-0.3).neg().mul(t)?.sum()),
            &x,
            FD_EPS,
        )
    })?;
    suite.run("op-relu", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-relu", 0);
        let c = Tensor::from_vec(uniform(&mut rng, 8, -1.0, 1.0), &[8])?;
        let x = Tensor::from_vec(away_from_zero(&mut rng, 8), &[8])?;
        finite_diff_check(&mut |t| Ok(ops::relu(t).mul(&c)?.sum()), &x, FD_EPS)
    })?;
    suite.run("op-sigmoid", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-sigmoid", 0);
        let c = Tensor::from_vec(uniform(&mut rng, 8, -1.0, 1.0), &[8])?;
        let x = Tensor::from_vec(uniform(&mut rng, 8, -3.0, 3.0), &[8])?;
        finite_diff_check(&mut |t| Ok(ops::sigmoid(t).mul(&c)?.sum()), &x, FD_EPS)
    })?;
    Ok(())
}

fn conv_checks(suite: &mut Suite) -> Result<()> {
    suite.run("op-conv2d", 1e-5, &mut |s| {
        let mut rng = derive_rng(s, "gc-conv", 0);
        let stride = 1 + (s % 2) as usize;
        let pad = ((s / 2) % 2) as usize;
        let (n, cin, h, w, cout, k) = (1, 2, 5, 5, 3, 3);
        if h + 2 * pad < k {
            return Ok(0.0);
        }
        let x = Tensor::from_vec(uniform(&mut rng, n * cin * h * w, -1.0, 1.0), &[n, cin, h, w])?;
        let wt = Tensor::from_vec(
            uniform(&mut rng, cout * cin * k * k, -0.6, 0.6),
            &[cout, cin, k, k],
        )?;
        let bias = Tensor::from_vec(uniform(&mut rng, cout, -0.3, 0.3), &[cout])?;
        let oh = (h + 2 * pad - k) / stride + 1;
        let cot = Tensor::from_vec(
            uniform(&mut rng, n * cout * oh * oh, -1.0, 1.0),
            &[n, cout, oh, oh],
        )?;
        let conv = |x: &Tensor<f64>, wt: &Tensor<f64>, bias: &Tensor<f64>| {
            ops::conv2d(
                x,
                &Conv2dParams {
                    weight: wt.clone(),
                    bias: bias.clone(),
                    stride,
                    padding: pad,
                },
            )
        };
        let ex = finite_diff_check(&mut |t| Ok(conv(t, &wt, &bias)?.mul(&cot)?.sum()), &x, FD_EPS)?;
        let ew = finite_diff_check(&mut |t| Ok(conv(&x, t, &bias)?.mul(&cot)?.sum()), &wt, FD_EPS)?;
        let eb =
            finite_diff_check(&mut |t| Ok(conv(&x, &wt, t)?.mul(&cot)?.sum()), &bias, FD_EPS)?;
        Ok(ex.max(ew).max(eb))
    })
}

fn bn_checks(suite: &mut Suite) -> Result<()> {
    for phase in [Phase::Train, Phase::Eval] {
        let label = if phase == Phase::Train {
            "op-batchnorm-train"
        } else {
            "op-batchnorm-eval"
        };
        suite.run(label, 1e-5, &mut |s| {
            let mut rng = derive_rng(s, "gc-bn", 0);
            let (n, c, h, w) = (2, 2, 3, 3);
            let x = Tensor::from_vec(uniform(&mut rng, n * c * h * w, -2.0, 2.0), &[n, c, h, w])?;
            let gamma = Tensor::from_vec(uniform(&mut rng, c, 0.5, 1.5), &[c])?;
            let beta = Tensor::from_vec(uniform(&mut rng, c, -0.5, 0.5), &[c])?;
            let rm = uniform(&mut rng, c, -0.3, 0.3);
            let rv = uniform(&mut rng, c, 0.5, 1.5);
            let cot = Tensor::from_vec(uniform(&mut rng, n * c * h * w, -1.0, 1.0), &[n, c, h, w])?;
            let bn = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
                ops::batch_norm(
                    x,
                    &BatchNormState {
                        gamma: gamma.clone(),
                        beta: beta.clone(),
                        running_mean: Tensor::from_vec(rm.clone(), &[c]).unwrap(),
                        running_var: Tensor::from_vec(rv.clone(), &[c]).unwrap(),
                        momentum: 0.1,
                        eps: 1e-5,
                    },
                    phase,
                )
            };
            let ex =
                finite_diff_check(&mut |t| Ok(bn(t, &gamma, &beta)?.mul(&cot)?.sum()), &x, FD_EPS)?;
            let eg = finite_diff_check(
                &mut |t| Ok(bn(&x, t, &beta)?.mul(&cot)?.sum()),
                &gamma,
                FD_EPS,
            )?;
            let eb = finite_diff_check(
                &mut |t| Ok(bn(&x, &gamma, t)?.mul(&cot)?.sum()),
                &beta,
                FD_EPS,
            )?;
            Ok(ex.max(eg).max(eb))
        })?;
    }
    Ok(())
}

fn stochastic_and_resample_checks(suite: &mut Suite) -> Result<()> {
    suite.run("op-dropout", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-dropout", 0);
        let x = Tensor::from_vec(uniform(&mut rng, 32, -1.0, 1.0), &[32])?;
        finite_diff_check(
            &mut |t| {
                let mut mask_rng = derive_rng(s, "gc-dropout-mask", 1);
                ops::dropout(t, 0.35, Phase::Train, &mut mask_rng).map(|y| y.sum())
            },
            &x,
            FD_EPS,
        )
    })?;
    suite.run("op-decimate", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-decimate", 0);
        let x = Tensor::from_vec(uniform(&mut rng, 16, -1.0, 1.0), &[1, 1, 4, 4])?;
        let cot = Tensor::from_vec(uniform(&mut rng, 4, -1.0, 1.0), &[1, 1, 2, 2])?;
        finite_diff_check(
            &mut |t| Ok(ops::decimate_downsample(t, 2)?.mul(&cot)?.sum()),
            &x,
            FD_EPS,
        )
    })?;
    suite.run("op-repeat", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-repeat", 0);
        let x = Tensor::from_vec(uniform(&mut rng, 16, -1.0, 1.0), &[1, 1, 4, 4])?;
        let cot = Tensor::from_vec(uniform(&mut rng, 64, -1.0, 1.0), &[1, 1, 8, 8])?;
        finite_diff_check(
            &mut |t| Ok(ops::repeat_upsample(t, 2)?.mul(&cot)?.sum()),
            &x,
            FD_EPS,
        )
    })?;
    Ok(())
}

fn loss_checks(suite: &mut Suite) -> Result<()> {
    suite.run("loss-bce", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-bce", 0);
        let n = 24;
        let x = Tensor::from_vec(uniform(&mut rng, n, -3.0, 3.0), &[n])?;
        let y = Tensor::from_vec(
            (0..n).map(|_| f64::from(rng.random::<bool>())).collect(),
            &[n],
        )?;
        finite_diff_check(&mut |t| bce_loss(t, &y), &x, FD_EPS)
    })?;
    suite.run("loss-dice", 1e-6, &mut |s| {
        let mut rng = derive_rng(s, "gc-dice", 0);
        let n = 24;
        let x = Tensor::from_vec(uniform(&mut rng, n, -3.0, 3.0), &[n])?;
        let y = Tensor::from_vec(
            (0..n).map(|_| f64::from(rng.random::<bool>())).collect(),
            &[n],
        )?;
        finite_diff_check(&mut |t| dice_loss(t, &y, 1.0), &x, FD_EPS)
    })?;
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum AnyBlock {
    Simple(SimpleBlock<f64>),
    Basic(BasicBlock<f64>),
    Bottleneck(BottleneckBlock<f64>),
}

impl AnyBlock {
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

/// Draws an input whose ReLU pre-activations stay clear of the kink under
/// the given forward function.
fn kink_free_input(
    shape: &[usize],
    tag: &str,
    seed: u64,
    forward: &mut dyn FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let n: usize = shape.iter().product();
    for attempt in 0..64u64 {
        let mut rng = derive_rng(seed, tag, attempt);
        let x = Tensor::from_vec(uniform(&mut rng, n, -1.0, 1.0), shape)?;
        ops::kink_watch_reset();
        forward(&x)?;
        if ops::kink_watch_min() >= KINK_MARGIN {
            return Ok(x);
        }
    }
    Err(Error::Internal(format!(
        "no kink-free draw found for {tag} seed {seed}"
    )))
}

fn block_checks(suite: &mut Suite) -> Result<()> {
    let kinds: [(&str, usize); 3] = [("simple", 0), ("basic", 1), ("bottleneck", 2)];
    let resamples = [
        ("none", Resample::None),
        ("down", Resample::Down),
        ("up", Resample::Up),
    ];
    for (kname, kind) in kinds {
        for (rname, resample) in resamples {
            for skip in [true, false] {
                let name = format!(
                    "block-{kname}-{rname}-{}",
                    if skip { "skip" } else { "noskip" }
                );
                suite.run(&name, 1e-5, &mut |s| {
                    let opts = BlockOpts {
                        in_channels: 4,
                        out_channels: 8,
                        resample,
                        use_batch_norm: true,
                        dropout_rate: 0.25,
                        use_short_skip: skip,
                    };
                    let block = match kind {
                        0 => AnyBlock::Simple(SimpleBlock::new(s, "gc", 0, opts)?),
                        1 => AnyBlock::Basic(BasicBlock::new(s, "gc", 0, opts)?),
                        _ => AnyBlock::Bottleneck(BottleneckBlock::new(s, "gc", 0, opts)?),
                    };
                    randomize_affine(&block.params(), &mut derive_rng(s, "gc-block-affine", 0));
                    let ctx_seed = s.wrapping_mul(31).wrapping_add(7);
                    let mut fwd = |t: &Tensor<f64>| {
                        let mut ctx = ForwardCtx::train(derive_rng(ctx_seed, "gc-block-ctx", 0));
                        block.forward(t, &mut ctx)
                    };
                    let x = kink_free_input(&[1, 4, 4, 4], "gc-block-x", s, &mut fwd)?;
                    let ex = finite_diff_check(&mut |t| Ok(fwd(t)?.sum()), &x, FD_EPS)?;
                    // rotate through the block's parameter tensors
                    let params = block.params();
                    let target = &params[s as usize % params.len()];
                    let xd = x.detach();
                    let ep = finite_diff_check_inplace(
                        &mut || {
                            let mut ctx =
                                ForwardCtx::train(derive_rng(ctx_seed, "gc-block-ctx", 0));
                            Ok(block.forward(&xd, &mut ctx)?.sum())
                        },
                        &target.tensor,
                        FD_EPS,
                    )?;
                    Ok(ex.max(ep))
                })?;
            }
        }
    }
    Ok(())
}

fn toy_net_config() -> NetworkConfig {
    let row = |name: &str, block, res: usize, width, repeat| ArchRow {
        name: name.into(),
        block,
        resolution: (res, res),
        width,
        repeat,
    };
    NetworkConfig {
        input_resolution: (16, 16),
        input_channels: 1,
        long_skips: true,
        short_skips: true,
        batch_norm: true,
        dropout_rate: 0.2,
        rows: vec![
            row("down1", BlockKind::Simple, 8, 4, 1),
            row("down2", BlockKind::Basic, 4, 8, 1),
            row("across", BlockKind::Bottleneck, 4, 8, 1),
            row("up1", BlockKind::Basic, 8, 8, 1),
            row("up2", BlockKind::Simple, 16, 4, 1),
            row("classifier", BlockKind::Conv1x1, 16, 1, 1),
        ],
    }
}

fn net_check(suite: &mut Suite) -> Result<()> {
    suite.run("net-3level", 1e-5, &mut |s| {
        let net: Network<f64> = build_network(&toy_net_config(), s)?;
        randomize_affine(net.parameters(), &mut derive_rng(s, "gc-net-affine", 0));
        let ctx_seed = s.wrapping_mul(131).wrapping_add(3);
        let mut fwd = |t: &Tensor<f64>| {
            let mut ctx = ForwardCtx::train(derive_rng(ctx_seed, "gc-net-ctx", 0));
            net.forward(t, &mut ctx)
        };
        let x = kink_free_input(&[1, 1, 16, 16], "gc-net-x", s, &mut fwd)?;
        let ex = finite_diff_check(&mut |t| Ok(fwd(t)?.sum()), &x, FD_EPS)?;
        let params = net.parameters();
        let target = &params[s as usize % params.len()];
        let xd = x.detach();
        let ep = finite_diff_check_inplace(
            &mut || {
                let mut ctx = ForwardCtx::train(derive_rng(ctx_seed, "gc-net-ctx", 0));
                Ok(net.forward(&xd, &mut ctx)?.sum())
            },
            &target.tensor,
            FD_EPS,
        )?;
        Ok(ex.max(ep))
    })
}

/// Runs the whole suite, `seeds` random draws per check.
pub fn run_suite(seeds: usize) -> Result<SuiteReport> {
    let mut suite = Suite {
        seeds: seeds.max(1),
        outcomes: Vec::new(),
    };
    elementwise_checks(&mut suite)?;
    conv_checks(&mut suite)?;
    bn_checks(&mut suite)?;
    stochastic_and_resample_checks(&mut suite)?;
    loss_checks(&mut suite)?;
    block_checks(&mut suite)?;
    net_check(&mut suite)?;
    Ok(SuiteReport {
        outcomes: suite.outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_suite(2).unwrap();
        for o in &report.outcomes {
            assert!(
                o.passed(),
                "{}: {} > {}",
                o.name,
                o.max_rel_err,
                o.threshold
            );
        }
        // every advertised family is present
        let names: Vec<&str> = report.outcomes.iter().map(|o| o.name.as_str()).collect();
        for want in [
            "op-conv2d",
            "op-batchnorm-train",
            "op-dropout",
            "op-decimate",
            "op-repeat",
            "loss-bce",
            "loss-dice",
            "net-3level",
        ] {
            assert!(names.contains(&want), "missing {want}");
        }
        assert_eq!(
            report.outcomes.iter().filter(|o| o.name.starts_with("block-")).count(),
            18
        );
    }

    #[test]
    fn inplace_checker_matches_leaf_checker() {
        let x = Tensor::from_vec(vec![0.7f64, -1.2, 2.0], &[3]).unwrap();
        x.set_requires_grad(true);
        let rel = finite_diff_check_inplace(&mut || Ok(x.mul(&x)?.sum()), &x, FD_EPS).unwrap();
        assert!(rel < 1e-8, "{rel}");
    }
}
