//! Differentiable neural operators: convolution, activations, batch
//! normalization, dropout, and the parameter-free resampling pair used on
//! shortcuts (decimation / repetition of rows and columns).

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{real, Op, Real, Tensor};

/// Train/eval switch for the stateful operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Convolution parameters; weight is `[C_out, C_in, k, k]`, bias `[C_out]`.
/// Output spatial size is `floor((H + 2 pad - k) / stride) + 1`.
pub struct Conv2dParams<F: Real> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
}

/// Per-channel affine and running statistics for batch normalization.
/// Running statistics move only in train phase; eval is a pure function of
/// the stored statistics.
pub struct BatchNormState<F: Real> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
    pub eps: f64,
}

fn expect_nchw<F: Real>(x: &Tensor<F>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension {
            op,
            msg: format!("expected NCHW tensor, got shape {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Cross-correlation plus bias, differentiable in input, weight and bias.
pub fn conv2d<F: Real>(x: &Tensor<F>, p: &Conv2dParams<F>) -> Result<Tensor<F>> {
    let (n, cin, h, w) = expect_nchw(x, "conv2d")?;
    let ws = p.weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("weight must be [C_out, C_in, k, k], got {ws:?}"),
        });
    }
    let (cout, k) = (ws[0], ws[2]);
    if ws[1] != cin {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("channel mismatch: input {cin} channels, weight expects {}", ws[1]),
        });
    }
    if p.bias.shape() != vec![cout] {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("bias must be [{cout}], got {:?}", p.bias.shape()),
        });
    }
    if p.stride == 0 {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: "stride must be positive".into(),
        });
    }
    if h + 2 * p.padding < k || w + 2 * p.padding < k {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!(
                "spatial dims {h}x{w} with padding {} smaller than kernel {k}",
                p.padding
            ),
        });
    }
    let (data, oh, ow) = kernels::conv2d_fwd(
        &x.data(),
        n,
        cin,
        h,
        w,
        &p.weight.data(),
        cout,
        k,
        &p.bias.data(),
        p.stride,
        p.padding,
    );
    let track = x.tracks() || p.weight.tracks() || p.bias.tracks();
    Ok(Tensor::from_op(
        data,
        vec![n, cout, oh, ow],
        Op::Conv2d {
            x: x.clone(),
            weight: p.weight.clone(),
            bias: p.bias.clone(),
            stride: p.stride,
            pad: p.padding,
        },
        track,
    ))
}

pub fn activation<F: Real>(x: &Tensor<F>, kind: Activation) -> Tensor<F> {
    match kind {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

thread_local! {
    static KINK_WATCH: Cell<bool> = const { Cell::new(false) };
    static KINK_MIN: Cell<f64> = const { Cell::new(f64::INFINITY) };
}

/// Arms the ReLU kink monitor; `kink_watch_min` then reports the smallest
/// |pre-activation| seen. The gradient-check harness uses this to reject
/// draws where a central difference would straddle the ReLU kink.
pub fn kink_watch_reset() {
    KINK_WATCH.with(|w| w.set(true));
    KINK_MIN.with(|m| m.set(f64::INFINITY));
}

pub fn kink_watch_min() -> f64 {
    KINK_WATCH.with(|w| w.set(false));
    KINK_MIN.with(|m| m.get())
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let shape = x.shape();
    let data: Vec<F> = {
        let xd = x.data();
        if KINK_WATCH.with(|w| w.get()) {
            // Exact zeros are skipped: they come from structurally dead
            // paths (e.g. a dropout mask that killed a whole batch-norm
            // channel), which stay exactly zero under perturbation and so
            // never cross the kink.
            let mut lo = KINK_MIN.with(|m| m.get());
            for v in xd.iter() {
                let a = v.to_f64().unwrap().abs();
                if a > 0.0 {
                    lo = lo.min(a);
                }
            }
            KINK_MIN.with(|m| m.set(lo));
        }
        xd.iter().map(|&v| v.max(F::zero())).collect()
    };
    Tensor::from_op(data, shape, Op::Relu(x.clone()), x.tracks())
}

pub fn sigmoid<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let shape = x.shape();
    let data: Vec<F> = x
        .data()
        .iter()
        .map(|&v| F::one() / (F::one() + (-v).exp()))
        .collect();
    Tensor::from_op(data, shape, Op::Sigmoid(x.clone()), x.tracks())
}

/// Batch normalization over N, H, W per channel.
///
/// Train: normalize by batch statistics, update running statistics with
/// `momentum` (running variance stores the unbiased estimate). Eval:
/// normalize by the stored statistics; stateless and deterministic.
pub fn batch_norm<F: Real>(x: &Tensor<F>, s: &BatchNormState<F>, phase: Phase) -> Result<Tensor<F>> {
    let (n, c, h, w) = expect_nchw(x, "batch_norm")?;
    if s.gamma.numel() != c || s.beta.numel() != c {
        return Err(Error::Dimension {
            op: "batch_norm",
            msg: format!("state has {} channels, input has {c}", s.gamma.numel()),
        });
    }
    let track = x.tracks() || s.gamma.tracks() || s.beta.tracks();
    match phase {
        Phase::Train => {
            let m = n * h * w;
            if m < 2 {
                return Err(Error::Contract {
                    op: "batch_norm",
                    msg: format!("degenerate batch: {m} element(s) per channel in train mode"),
                });
            }
            let (y, xhat, inv_std, mean, var_biased) =
                kernels::bn_train_fwd(&x.data(), &s.gamma.data(), &s.beta.data(), n, c, h, w, s.eps);
            // Unbiased variance feeds the running estimate; biased feeds the
            // normalization itself.
            let mom = s.momentum;
            let bessel = m as f64 / (m as f64 - 1.0);
            s.running_mean.apply_data(|rm| {
                for (r, &mu) in rm.iter_mut().zip(mean.iter()) {
                    let r64 = r.to_f64().unwrap();
                    *r = real((1.0 - mom) * r64 + mom * mu);
                }
            });
            s.running_var.apply_data(|rv| {
                for (r, &v) in rv.iter_mut().zip(var_biased.iter()) {
                    let r64 = r.to_f64().unwrap();
                    *r = real((1.0 - mom) * r64 + mom * v * bessel);
                }
            });
            Ok(Tensor::from_op(
                y,
                vec![n, c, h, w],
                Op::BatchNormTrain {
                    x: x.clone(),
                    gamma: s.gamma.clone(),
                    beta: s.beta.clone(),
                    xhat,
                    inv_std,
                },
                track,
            ))
        }
        Phase::Eval => {
            let (y, rm, inv_std) = kernels::bn_eval_fwd(
                &x.data(),
                &s.gamma.data(),
                &s.beta.data(),
                &s.running_mean.data(),
                &s.running_var.data(),
                n,
                c,
                h,
                w,
                s.eps,
            );
            Ok(Tensor::from_op(
                y,
                vec![n, c, h, w],
                Op::BatchNormEval {
                    x: x.clone(),
                    gamma: s.gamma.clone(),
                    beta: s.beta.clone(),
                    running_mean: rm,
                    inv_std,
                },
                track,
            ))
        }
    }
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1/(1-rate)` so eval is the identity.
pub fn dropout<F: Real>(
    x: &Tensor<F>,
    rate: f64,
    phase: Phase,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if phase == Phase::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let shape = x.shape();
    let keep_scale = real::<F>(1.0 / (1.0 - rate));
    let mask: Vec<F> = (0..x.numel())
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let data: Vec<F> = x
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&v, &m)| v * m)
        .collect();
    Ok(Tensor::from_op(
        data,
        shape,
        Op::Dropout {
            x: x.clone(),
            mask,
        },
        x.tracks(),
    ))
}

/// Keep every `factor`-th row and column; gradient scatters upstream values
/// back to the kept positions.
pub fn decimate_downsample<F: Real>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = expect_nchw(x, "decimate_downsample")?;
    if factor == 0 {
        return Err(Error::Dimension {
            op: "decimate_downsample",
            msg: "factor must be positive".into(),
        });
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension {
            op: "decimate_downsample",
            msg: format!("spatial dims {h}x{w} not divisible by factor {factor}"),
        });
    }
    let data = kernels::decimate_fwd(&x.data(), n, c, h, w, factor);
    Ok(Tensor::from_op(
        data,
        vec![n, c, h / factor, w / factor],
        Op::Decimate {
            x: x.clone(),
            factor,
        },
        x.tracks(),
    ))
}

/// Replicate every pixel into a `factor x factor` tile; gradient sums each
/// tile back.
pub fn repeat_upsample<F: Real>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (n, c, h, w) = expect_nchw(x, "repeat_upsample")?;
    if factor == 0 {
        return Err(Error::Dimension {
            op: "repeat_upsample",
            msg: "factor must be positive".into(),
        });
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let data = kernels::repeat_fwd(&x.data(), n, c, h, w, factor);
    Ok(Tensor::from_op(
        data,
        vec![n, c, h * factor, w * factor],
        Op::Repeat {
            x: x.clone(),
            factor,
        },
        x.tracks(),
    ))
}

/// Raw numeric kernels shared between forward wrappers and the backward
/// sweep in `tensor`. All buffers are row-major NCHW.
pub(crate) mod kernels {
    use super::Real;
    use crate::tensor::real;

    fn pad_sample<F: Real>(x: &[F], cin: usize, h: usize, w: usize, pad: usize, xp: &mut [F]) {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if pad == 0 {
            xp.copy_from_slice(x);
            return;
        }
        xp.fill(F::zero());
        for ci in 0..cin {
            for hh in 0..h {
                let src = (ci * h + hh) * w;
                let dst = (ci * hp + hh + pad) * wp + pad;
                xp[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_fwd<F: Real>(
        x: &[F],
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        wgt: &[F],
        cout: usize,
        k: usize,
        bias: &[F],
        stride: usize,
        pad: usize,
    ) -> (Vec<F>, usize, usize) {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let oh = (hp - k) / stride + 1;
        let ow = (wp - k) / stride + 1;
        let mut out = vec![F::zero(); n * cout * oh * ow];
        let mut xp = vec![F::zero(); cin * hp * wp];
        for ni in 0..n {
            pad_sample(&x[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, pad, &mut xp);
            for co in 0..cout {
                let ob = (ni * cout + co) * oh * ow;
                out[ob..ob + oh * ow].fill(bias[co]);
                for ci in 0..cin {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wgt[((co * cin + ci) * k + kh) * k + kw];
                            for ohi in 0..oh {
                                let ih = ohi * stride + kh;
                                let xrow = &xp[(ci * hp + ih) * wp + kw..];
                                let orow = &mut out[ob + ohi * ow..ob + (ohi + 1) * ow];
                                if stride == 1 {
                                    for (o, &xv) in orow.iter_mut().zip(xrow[..ow].iter()) {
                                        *o = *o + wv * xv;
                                    }
                                } else {
                                    for (owi, o) in orow.iter_mut().enumerate() {
                                        *o = *o + wv * xrow[owi * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, oh, ow)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_bwd_x<F: Real>(
        gout: &[F],
        wgt: &[F],
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        oh: usize,
        ow: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<F> {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut dx = vec![F::zero(); n * cin * h * w];
        let mut dxp = vec![F::zero(); cin * hp * wp];
        for ni in 0..n {
            dxp.fill(F::zero());
            for co in 0..cout {
                let gb = (ni * cout + co) * oh * ow;
                for ci in 0..cin {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wgt[((co * cin + ci) * k + kh) * k + kw];
                            for ohi in 0..oh {
                                let ih = ohi * stride + kh;
                                let grow = &gout[gb + ohi * ow..gb + (ohi + 1) * ow];
                                let drow = &mut dxp[(ci * hp + ih) * wp + kw..];
                                if stride == 1 {
                                    for (d, &g) in drow[..ow].iter_mut().zip(grow.iter()) {
                                        *d = *d + wv * g;
                                    }
                                } else {
                                    for (owi, &g) in grow.iter().enumerate() {
                                        let d = &mut drow[owi * stride];
                                        *d = *d + wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let db = ni * cin * h * w;
            for ci in 0..cin {
                for hh in 0..h {
                    let src = (ci * hp + hh + pad) * wp + pad;
                    let dst = db + (ci * h + hh) * w;
                    dx[dst..dst + w].copy_from_slice(&dxp[src..src + w]);
                }
            }
        }
        dx
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_bwd_w<F: Real>(
        gout: &[F],
        x: &[F],
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        oh: usize,
        ow: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<F> {
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut dw = vec![F::zero(); cout * cin * k * k];
        let mut xp = vec![F::zero(); cin * hp * wp];
        for ni in 0..n {
            pad_sample(&x[ni * cin * h * w..(ni + 1) * cin * h * w], cin, h, w, pad, &mut xp);
            for co in 0..cout {
                let gb = (ni * cout + co) * oh * ow;
                for ci in 0..cin {
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = F::zero();
                            for ohi in 0..oh {
                                let ih = ohi * stride + kh;
                                let grow = &gout[gb + ohi * ow..gb + (ohi + 1) * ow];
                                let xrow = &xp[(ci * hp + ih) * wp + kw..];
                                if stride == 1 {
                                    for (&g, &xv) in grow.iter().zip(xrow[..ow].iter()) {
                                        acc = acc + g * xv;
                                    }
                                } else {
                                    for (owi, &g) in grow.iter().enumerate() {
                                        acc = acc + g * xrow[owi * stride];
                                    }
                                }
                            }
                            let idx = ((co * cin + ci) * k + kh) * k + kw;
                            dw[idx] = dw[idx] + acc;
                        }
                    }
                }
            }
        }
        dw
    }

    pub fn conv2d_bwd_b<F: Real>(gout: &[F], n: usize, cout: usize, oh: usize, ow: usize) -> Vec<F> {
        let mut db = vec![F::zero(); cout];
        for ni in 0..n {
            for (co, d) in db.iter_mut().enumerate() {
                let gb = (ni * cout + co) * oh * ow;
                let mut acc = F::zero();
                for &g in &gout[gb..gb + oh * ow] {
                    acc = acc + g;
                }
                *d = *d + acc;
            }
        }
        db
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    pub fn bn_train_fwd<F: Real>(
        x: &[F],
        gamma: &[F],
        beta: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        eps: f64,
    ) -> (Vec<F>, Vec<F>, Vec<F>, Vec<f64>, Vec<f64>) {
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &x[base..base + hw] {
                    acc += v.to_f64().unwrap();
                }
            }
            let mu = acc / m;
            let mut sq = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &x[base..base + hw] {
                    let d = v.to_f64().unwrap() - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / m;
        }
        let mut y = vec![F::zero(); x.len()];
        let mut xhat = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); c];
        for ci in 0..c {
            let istd = 1.0 / (var[ci] + eps).sqrt();
            inv_std[ci] = real(istd);
            let (g, b) = (gamma[ci], beta[ci]);
            let mu = real::<F>(mean[ci]);
            let istd_f = real::<F>(istd);
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mu) * istd_f;
                    xhat[i] = xh;
                    y[i] = g * xh + b;
                }
            }
        }
        (y, xhat, inv_std, mean, var)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bn_train_bwd<F: Real>(
        gout: &[F],
        xhat: &[F],
        inv_std: &[F],
        gamma: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> (Vec<F>, Vec<F>, Vec<F>) {
        let hw = h * w;
        let m = real::<F>((n * hw) as f64);
        let mut dx = vec![F::zero(); gout.len()];
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for ci in 0..c {
            let g = gamma[ci];
            let istd = inv_std[ci];
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            let mut sum_g = F::zero();
            let mut sum_g_xhat = F::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let dxh = gout[i] * g;
                    sum_dxhat = sum_dxhat + dxh;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[i];
                    sum_g = sum_g + gout[i];
                    sum_g_xhat = sum_g_xhat + gout[i] * xhat[i];
                }
            }
            dgamma[ci] = sum_g_xhat;
            dbeta[ci] = sum_g;
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    let dxh = gout[i] * g;
                    dx[i] = istd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    pub fn bn_eval_fwd<F: Real>(
        x: &[F],
        gamma: &[F],
        beta: &[F],
        running_mean: &[F],
        running_var: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        eps: f64,
    ) -> (Vec<F>, Vec<F>, Vec<F>) {
        let hw = h * w;
        let mut y = vec![F::zero(); x.len()];
        let mut inv_std = vec![F::zero(); c];
        for ci in 0..c {
            let istd = 1.0 / (running_var[ci].to_f64().unwrap() + eps).sqrt();
            inv_std[ci] = real(istd);
            let istd_f = inv_std[ci];
            let (g, b, rm) = (gamma[ci], beta[ci], running_mean[ci]);
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    y[i] = g * (x[i] - rm) * istd_f + b;
                }
            }
        }
        (y, running_mean.to_vec(), inv_std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn bn_eval_bwd<F: Real>(
        gout: &[F],
        x: &[F],
        running_mean: &[F],
        inv_std: &[F],
        gamma: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> (Vec<F>, Vec<F>, Vec<F>) {
        let hw = h * w;
        let mut dx = vec![F::zero(); gout.len()];
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        for ci in 0..c {
            let scale = gamma[ci] * inv_std[ci];
            let (rm, istd) = (running_mean[ci], inv_std[ci]);
            let mut dg = F::zero();
            let mut db = F::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    dx[i] = gout[i] * scale;
                    dg = dg + gout[i] * (x[i] - rm) * istd;
                    db = db + gout[i];
                }
            }
            dgamma[ci] = dg;
            dbeta[ci] = db;
        }
        (dx, dgamma, dbeta)
    }

    pub fn decimate_fwd<F: Real>(
        x: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        f: usize,
    ) -> Vec<F> {
        let (oh, ow) = (h / f, w / f);
        let mut out = vec![F::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let ob = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    out[ob + i * ow + j] = x[xb + (i * f) * w + j * f];
                }
            }
        }
        out
    }

    pub fn decimate_bwd<F: Real>(
        gout: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        f: usize,
    ) -> Vec<F> {
        let (oh, ow) = (h / f, w / f);
        let mut dx = vec![F::zero(); n * c * h * w];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let ob = nc * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    dx[xb + (i * f) * w + j * f] = gout[ob + i * ow + j];
                }
            }
        }
        dx
    }

    pub fn repeat_fwd<F: Real>(
        x: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        f: usize,
    ) -> Vec<F> {
        let (oh, ow) = (h * f, w * f);
        let mut out = vec![F::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let ob = nc * oh * ow;
            for i in 0..oh {
                let src = xb + (i / f) * w;
                for j in 0..ow {
                    out[ob + i * ow + j] = x[src + j / f];
                }
            }
        }
        out
    }

    pub fn repeat_bwd<F: Real>(
        gout: &[F],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        f: usize,
    ) -> Vec<F> {
        let (oh, ow) = (h * f, w * f);
        let mut dx = vec![F::zero(); n * c * h * w];
        for nc in 0..n * c {
            let xb = nc * h * w;
            let ob = nc * oh * ow;
            for i in 0..oh {
                let dst = xb + (i / f) * w;
                for j in 0..ow {
                    dx[dst + j / f] = dx[dst + j / f] + gout[ob + i * ow + j];
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;

    /// Naive quadruple-loop cross-correlation used as an independent oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv2d_reference(
        x: &[f64],
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        wgt: &[f64],
        cout: usize,
        k: usize,
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oi * stride + kh) as isize - pad as isize;
                                    let iw = (oj * stride + kw) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w
                                    {
                                        let xv = x[((ni * cin + ci) * h + ih as usize) * w
                                            + iw as usize];
                                        acc += xv * wgt[((co * cin + ci) * k + kh) * k + kw];
                                    }
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    fn params_from(w: Vec<f64>, ws: &[usize], b: Vec<f64>, stride: usize, pad: usize) -> Conv2dParams<f64> {
        Conv2dParams {
            weight: Tensor::from_vec(w, ws).unwrap(),
            bias: Tensor::from_vec(b, &[ws[0]]).unwrap(),
            stride,
            padding: pad,
        }
    }

    #[test]
    fn conv_of_ones_counts_overlaps() {
        let x = Tensor::from_vec(vec![1.0f64; 9], &[1, 1, 3, 3]).unwrap();
        let p = params_from(vec![1.0; 9], &[1, 1, 3, 3], vec![0.0], 1, 1);
        let out = conv2d(&x, &p).unwrap();
        assert_eq!(out.shape(), vec![1, 1, 3, 3]);
        assert_eq!(
            out.data_vec(),
            vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn unit_1x1_conv_is_identity() {
        let mut rng = derive_rng(1, "conv-identity", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 4 * 4), &[2, 1, 4, 4]).unwrap();
        let p = params_from(vec![1.0], &[1, 1, 1, 1], vec![0.0], 1, 0);
        assert_eq!(conv2d(&x, &p).unwrap().data_vec(), x.data_vec());
    }

    #[test]
    fn conv_matches_naive_reference() {
        for (seed, stride, pad) in [(0u64, 1usize, 1usize), (1, 2, 1), (2, 1, 0), (3, 2, 0)] {
            let mut rng = derive_rng(seed, "conv-ref", 0);
            let (n, cin, h, w, cout, k) = (2, 3, 8, 8, 4, 3);
            let x = rand_vec(&mut rng, n * cin * h * w);
            let wg = rand_vec(&mut rng, cout * cin * k * k);
            let b = rand_vec(&mut rng, cout);
            let xt = Tensor::from_vec(x.clone(), &[n, cin, h, w]).unwrap();
            let p = params_from(wg.clone(), &[cout, cin, k, k], b.clone(), stride, pad);
            let got = conv2d(&xt, &p).unwrap().data_vec();
            let want = conv2d_reference(&x, n, cin, h, w, &wg, cout, k, &b, stride, pad);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(want.iter()) {
                assert!((g - e).abs() < 1e-10, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = derive_rng(5, "conv-grad", 0);
        let (n, cin, h, w, cout, k) = (2, 3, 8, 8, 4, 3);
        let x = Tensor::from_vec(rand_vec(&mut rng, n * cin * h * w), &[n, cin, h, w]).unwrap();
        let wv = rand_vec(&mut rng, cout * cin * k * k);
        let bv = rand_vec(&mut rng, cout);
        // stride-2 pad-1 output on 8x8 is 4x4; fixed non-uniform cotangent so
        // the check sees more than a plain sum
        let cot = Tensor::from_vec(rand_vec(&mut rng, n * cout * 4 * 4), &[n, cout, 4, 4]).unwrap();
        let wgt = Tensor::from_vec(wv.clone(), &[cout, cin, k, k]).unwrap();
        let bias = Tensor::from_vec(bv.clone(), &[cout]).unwrap();
        let rel = finite_diff_check(
            &mut |t: &Tensor<f64>| {
                let p = Conv2dParams {
                    weight: wgt.clone(),
                    bias: bias.clone(),
                    stride: 2,
                    padding: 1,
                };
                Ok(conv2d(t, &p)?.mul(&cot)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "dx rel err {rel}");

        let w0 = Tensor::from_vec(wv, &[cout, cin, k, k]).unwrap();
        let rel = finite_diff_check(
            &mut |t: &Tensor<f64>| {
                let p = Conv2dParams {
                    weight: t.clone(),
                    bias: bias.clone(),
                    stride: 2,
                    padding: 1,
                };
                Ok(conv2d(&x, &p)?.mul(&cot)?.sum())
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-5, "dw rel err {rel}");
    }

    #[test]
    fn conv_channel_mismatch_is_reported() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let p = params_from(vec![0.0; 3 * 9], &[1, 3, 3, 3], vec![0.0], 1, 1);
        let err = conv2d(&x, &p).unwrap_err().to_string();
        assert!(err.contains("channel mismatch"), "{err}");
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::from_vec(vec![-2.0f64, 0.0, 3.0], &[3]).unwrap();
        assert_eq!(relu(&x).data_vec(), vec![0.0, 0.0, 3.0]);
        assert_eq!(
            activation(&x, Activation::Relu).data_vec(),
            relu(&x).data_vec()
        );
        let z = Tensor::from_vec(vec![0.0f64], &[1]).unwrap();
        assert_eq!(sigmoid(&z).data_vec(), vec![0.5]);
        assert_eq!(
            activation(&z, Activation::Sigmoid).data_vec(),
            vec![0.5]
        );
    }

    proptest! {
        // ranges keep strictness representable in f64: sigmoid saturates to
        // exactly 1.0 beyond |x| ~ 36
        #[test]
        fn sigmoid_bounded_and_monotone(a in -30.0f64..30.0, d in 0.01f64..5.0) {
            let x = Tensor::from_vec(vec![a, a + d], &[2]).unwrap();
            let y = sigmoid(&x).data_vec();
            prop_assert!(y[0] > 0.0 && y[0] < 1.0);
            prop_assert!(y[1] > 0.0 && y[1] < 1.0);
            prop_assert!(y[1] > y[0]);
        }
    }

    fn bn_state(c: usize) -> BatchNormState<f64> {
        BatchNormState {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    #[test]
    fn bn_constant_input_maps_to_zero() {
        let x = Tensor::full(&[2, 3, 4, 4], 7.5f64);
        let s = bn_state(3);
        let y = batch_norm(&x, &s, Phase::Train).unwrap();
        for &v in y.data().iter() {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn bn_beta_shifts_channel_mean() {
        let mut rng = derive_rng(2, "bn-beta", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 8 * 8), &[1, 2, 8, 8]).unwrap();
        let s = BatchNormState {
            beta: Tensor::full(&[2], 5.0f64),
            ..bn_state(2)
        };
        let y = batch_norm(&x, &s, Phase::Train).unwrap();
        let yd = y.data_vec();
        for ci in 0..2 {
            let ch: Vec<f64> = yd[ci * 64..(ci + 1) * 64].to_vec();
            let mean = ch.iter().sum::<f64>() / 64.0;
            assert!((mean - 5.0).abs() < 1e-9, "channel {ci} mean {mean}");
        }
    }

    #[test]
    fn bn_train_output_is_standardized() {
        // Recompute the per-channel statistics of the output independently.
        let mut rng = derive_rng(3, "bn-std", 0);
        let (n, c, h, w) = (4, 3, 8, 8);
        let data: Vec<f64> = (0..n * c * h * w)
            .map(|_| rng.random::<f64>() * 4.0 - 1.0)
            .collect();
        let x = Tensor::from_vec(data, &[n, c, h, w]).unwrap();
        let s = bn_state(c);
        let y = batch_norm(&x, &s, Phase::Train).unwrap().data_vec();
        let m = (n * h * w) as f64;
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                for i in 0..h * w {
                    let v = y[(ni * c + ci) * h * w + i];
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn bn_degenerate_batch_is_an_error() {
        let x = Tensor::zeros(&[1, 3, 1, 1]);
        let s = bn_state(3);
        let err = batch_norm(&x, &s, Phase::Train).unwrap_err().to_string();
        assert!(err.contains("degenerate batch"), "{err}");
    }

    #[test]
    fn bn_running_stats_converge_geometrically() {
        let mut rng = derive_rng(4, "bn-run", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 8 * 8), &[1, 1, 8, 8]).unwrap();
        let s = bn_state(1);
        let mut gaps = Vec::new();
        let batch_mean: f64 = x.data().iter().sum::<f64>() / 64.0;
        for _ in 0..5 {
            batch_norm(&x, &s, Phase::Train).unwrap();
            gaps.push((s.running_mean.data_vec()[0] - batch_mean).abs());
        }
        for pair in gaps.windows(2) {
            assert!(
                (pair[1] / pair[0] - 0.9).abs() < 1e-6,
                "ratio {}",
                pair[1] / pair[0]
            );
        }
    }

    #[test]
    fn bn_eval_is_pure_and_stateless() {
        let mut rng = derive_rng(5, "bn-eval", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 2 * 4 * 4), &[2, 2, 4, 4]).unwrap();
        let s = bn_state(2);
        let before = s.running_mean.data_vec();
        let a = batch_norm(&x, &s, Phase::Eval).unwrap().data_vec();
        let b = batch_norm(&x, &s, Phase::Eval).unwrap().data_vec();
        assert_eq!(a, b);
        assert_eq!(s.running_mean.data_vec(), before);
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let mut rng = derive_rng(6, "bn-grad", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 2 * 4 * 4), &[2, 2, 4, 4]).unwrap();
        let gamma = Tensor::from_vec(vec![1.3, 0.7], &[2]).unwrap();
        let beta = Tensor::from_vec(vec![0.2, -0.4], &[2]).unwrap();
        let cot = Tensor::from_vec(rand_vec(&mut rng, 2 * 2 * 4 * 4), &[2, 2, 4, 4]).unwrap();
        for phase in [Phase::Train, Phase::Eval] {
            let rel = finite_diff_check(
                &mut |t: &Tensor<f64>| {
                    let s = BatchNormState {
                        gamma: gamma.clone(),
                        beta: beta.clone(),
                        running_mean: Tensor::from_vec(vec![0.1, -0.2], &[2]).unwrap(),
                        running_var: Tensor::from_vec(vec![1.5, 0.8], &[2]).unwrap(),
                        momentum: 0.1,
                        eps: 1e-5,
                    };
                    Ok(batch_norm(t, &s, phase)?.mul(&cot)?.sum())
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(rel < 1e-5, "{phase:?} dx rel err {rel}");
        }
    }

    #[test]
    fn dropout_rate_zero_and_eval_are_identity() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0], &[3]).unwrap();
        let mut rng = derive_rng(0, "drop", 0);
        let y = dropout(&x, 0.0, Phase::Train, &mut rng).unwrap();
        assert_eq!(y.data_vec(), x.data_vec());
        let z = dropout(&x, 0.9, Phase::Eval, &mut rng).unwrap();
        assert_eq!(z.data_vec(), x.data_vec());
    }

    #[test]
    fn dropout_rate_one_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2]);
        let mut rng = derive_rng(0, "drop", 1);
        assert!(dropout(&x, 1.0, Phase::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let n = 1_000_000;
        let x = Tensor::full(&[n], 1.0f64);
        let mut rng = derive_rng(42, "drop-lln", 0);
        let y = dropout(&x, 0.5, Phase::Train, &mut rng).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / n as f64;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn dropout_gradient_uses_the_same_mask() {
        let mut rng = derive_rng(9, "drop-grad", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 64), &[64]).unwrap();
        let rel = finite_diff_check(
            &mut |t: &Tensor<f64>| {
                let mut r = derive_rng(9, "drop-grad-mask", 0);
                dropout(t, 0.4, Phase::Train, &mut r).map(|y| y.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn decimate_picks_every_factorth_pixel() {
        let data: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let x = Tensor::from_vec(data, &[1, 1, 4, 4]).unwrap();
        let y = decimate_downsample(&x, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.data_vec(), vec![0.0, 2.0, 20.0, 22.0]);
        let id = decimate_downsample(&x, 1).unwrap();
        assert_eq!(id.data_vec(), x.data_vec());
    }

    #[test]
    fn decimate_rejects_nondivisible_dims() {
        let x = Tensor::<f64>::zeros(&[1, 1, 5, 4]);
        assert!(decimate_downsample(&x, 2).is_err());
    }

    #[test]
    fn repeat_tiles_pixels() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let y = repeat_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 4, 4]);
        assert_eq!(
            y.data_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn decimate_inverts_repeat() {
        let mut rng = derive_rng(11, "roundtrip", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 2 * 4 * 4), &[1, 2, 4, 4]).unwrap();
        for k in [2usize, 4] {
            let y = decimate_downsample(&repeat_upsample(&x, k).unwrap(), k).unwrap();
            assert_eq!(y.data_vec(), x.data_vec());
        }
    }

    #[test]
    fn resampling_gradients_match_finite_differences() {
        let mut rng = derive_rng(12, "resample-grad", 0);
        let x = Tensor::from_vec(rand_vec(&mut rng, 4 * 4), &[1, 1, 4, 4]).unwrap();
        let cot_small = Tensor::from_vec(rand_vec(&mut rng, 4), &[1, 1, 2, 2]).unwrap();
        let cot_big = Tensor::from_vec(rand_vec(&mut rng, 64), &[1, 1, 8, 8]).unwrap();
        let rel = finite_diff_check(
            &mut |t: &Tensor<f64>| Ok(decimate_downsample(t, 2)?.mul(&cot_small)?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "decimate rel err {rel}");
        let rel = finite_diff_check(
            &mut |t: &Tensor<f64>| Ok(repeat_upsample(t, 2)?.mul(&cot_big)?.sum()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "repeat rel err {rel}");
    }

    #[test]
    fn resampling_adjoint_identities() {
        // For linear maps R (repeat) and D (decimate):
        //   <R x, y> = <x, R^T y> via backward, R^T R = k^2 I, D R = I.
        let mut rng = derive_rng(13, "adjoint", 0);
        let k = 2usize;
        let x = Tensor::from_vec(rand_vec(&mut rng, 16), &[1, 1, 4, 4]).unwrap();
        let y = Tensor::from_vec(rand_vec(&mut rng, 64), &[1, 1, 8, 8]).unwrap();

        let xl = x.detach();
        xl.set_requires_grad(true);
        let fwd = repeat_upsample(&xl, k).unwrap();
        let dot = fwd.mul(&y).unwrap().sum();
        dot.backward().unwrap();
        let rt_y = xl.grad_vec().unwrap();
        let lhs = dot.item().unwrap();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(rt_y.iter())
            .map(|(&a, &b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");

        // R^T (R z) = k^2 z: repeat then pull back through repeat's VJP.
        let z = x.detach();
        z.set_requires_grad(true);
        let rz = repeat_upsample(&z, k).unwrap();
        let rz_const = rz.detach();
        repeat_upsample(&z, k)
            .unwrap()
            .mul(&rz_const)
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        let pulled = z.grad_vec().unwrap();
        for (p, &orig) in pulled.iter().zip(x.data().iter()) {
            assert!((p - (k * k) as f64 * orig).abs() < 1e-10);
        }
    }
}
