//! Parameterized layers: thin structs holding [`ParamId`]s plus the
//! hyper-parameters needed to call into [`ops`].
//!
//! Each layer exposes `fwd` returning the output and an opaque cache, and
//! `bwd` consuming that cache to produce the input gradient while
//! accumulating parameter gradients.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::{init, ForwardCtx, Grads, ParamId, Params, Real};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache<T> {
    x: Array4<T>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_c * k * k;
        let w = ps.add(
            format!("{name}.w"),
            init::he_normal(&[out_c, in_c, k, k], fan_in, rng),
            true,
        );
        let b = if bias {
            Some(ps.add(format!("{name}.b"), init::zeros(&[out_c]), false))
        } else {
            None
        };
        Conv2d {
            w,
            b,
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn fwd<T: Real>(&self, ps: &Params<T>, x: &Array4<T>) -> (Array4<T>, Conv2dCache<T>) {
        let w = ps
            .get(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight rank");
        let y = match self.b {
            Some(bid) => {
                let b = ps
                    .get(bid)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("conv bias rank");
                ops::conv2d_fwd(x, &w, Some(&b), self.stride, self.pad)
            }
            None => ops::conv2d_fwd(x, &w, None, self.stride, self.pad),
        };
        (y, Conv2dCache { x: x.clone() })
    }

    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &Conv2dCache<T>,
        gy: &Array4<T>,
    ) -> Array4<T> {
        let w = ps
            .get(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight rank");
        if let Some(bid) = self.b {
            // Split borrows: weight and bias grads live in the same store.
            let (gw_arr, gb_arr) = {
                let gw = grads.get(self.w).clone();
                let gb = grads.get(bid).clone();
                (gw, gb)
            };
            let mut gw_arr = gw_arr;
            let mut gb_arr = gb_arr;
            let gx = ops::conv2d_bwd(
                &cache.x,
                &w,
                gy,
                &mut gw_arr.view_mut(),
                Some(&mut gb_arr.view_mut()),
                self.stride,
                self.pad,
            );
            *grads.get_mut(self.w) = gw_arr;
            *grads.get_mut(bid) = gb_arr;
            gx
        } else {
            let mut gw_arr = grads.get(self.w).clone();
            let gx = ops::conv2d_bwd(
                &cache.x,
                &w,
                gy,
                &mut gw_arr.view_mut(),
                None,
                self.stride,
                self.pad,
            );
            *grads.get_mut(self.w) = gw_arr;
            gx
        }
    }
}

/// Batch normalization over (batch, height, width) per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c: usize,
}

pub struct BnLayerCache<T> {
    inner: ops::BnCache<T>,
}

impl BatchNorm2d {
    pub fn new<T: Real>(ps: &mut Params<T>, name: &str, c: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), init::ones(&[c]), false);
        let beta = ps.add(format!("{name}.beta"), init::zeros(&[c]), false);
        let running_mean = ps.add_buffer(format!("{name}.running_mean"), init::zeros(&[c]));
        let running_var = ps.add_buffer(format!("{name}.running_var"), init::ones(&[c]));
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            c,
        }
    }

    pub fn fwd<T: Real>(
        &self,
        ps: &Params<T>,
        ctx: &mut ForwardCtx<'_, T>,
        x: &Array4<T>,
    ) -> (Array4<T>, BnLayerCache<T>) {
        let gamma = ps
            .get(self.gamma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma rank");
        let beta = ps
            .get(self.beta)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("beta rank");
        let rm = ps
            .get(self.running_mean)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("running mean rank");
        let rv = ps
            .get(self.running_var)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("running var rank");
        let (y, cache, updates) = ops::batchnorm_fwd(
            x,
            &gamma,
            &beta,
            &rm,
            &rv,
            BN_EPS,
            BN_MOMENTUM,
            ctx.is_train(),
        );
        if let Some((new_mean, new_var)) = updates {
            ctx.buffer_updates
                .push((self.running_mean, new_mean.into_dyn()));
            ctx.buffer_updates
                .push((self.running_var, new_var.into_dyn()));
        }
        (y, BnLayerCache { inner: cache })
    }

    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &BnLayerCache<T>,
        gy: &Array4<T>,
    ) -> Array4<T> {
        let gamma = ps
            .get(self.gamma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("gamma rank");
        let mut gg = grads.get(self.gamma).clone();
        let mut gb = grads.get(self.beta).clone();
        let gx = ops::batchnorm_bwd(
            &cache.inner,
            &gamma,
            gy,
            &mut gg.view_mut(),
            &mut gb.view_mut(),
        );
        *grads.get_mut(self.gamma) = gg;
        *grads.get_mut(self.beta) = gb;
        gx
    }
}

/// Convolution followed by batch norm (no activation).
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub struct ConvBnCache<T> {
    conv: Conv2dCache<T>,
    bn: BnLayerCache<T>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        // Batch norm's beta makes a convolution bias redundant.
        let conv = Conv2d::new(ps, rng, &format!("{name}.conv"), in_c, out_c, k, stride, false);
        let bn = BatchNorm2d::new(ps, &format!("{name}.bn"), out_c);
        ConvBn { conv, bn }
    }

    pub fn fwd<T: Real>(
        &self,
        ps: &Params<T>,
        ctx: &mut ForwardCtx<'_, T>,
        x: &Array4<T>,
    ) -> (Array4<T>, ConvBnCache<T>) {
        let (c_out, c_cache) = self.conv.fwd(ps, x);
        let (y, bn_cache) = self.bn.fwd(ps, ctx, &c_out);
        (
            y,
            ConvBnCache {
                conv: c_cache,
                bn: bn_cache,
            },
        )
    }

    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &ConvBnCache<T>,
        gy: &Array4<T>,
    ) -> Array4<T> {
        let g_conv = self.bn.bwd(ps, grads, &cache.bn, gy);
        self.conv.bwd(ps, grads, &cache.conv, &g_conv)
    }

    /// Multiply-accumulate count for one forward pass at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let oh = ops::conv_out_dim(h, self.conv.k, self.conv.stride, self.conv.pad) as u64;
        let ow = ops::conv_out_dim(w, self.conv.k, self.conv.stride, self.conv.pad) as u64;
        oh * ow
            * self.conv.out_c as u64
            * self.conv.in_c as u64
            * (self.conv.k * self.conv.k) as u64
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_f: usize,
    pub out_f: usize,
}

pub struct LinearCache<T> {
    x: Array2<T>,
}

impl Linear {
    pub fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            init::he_normal(&[out_f, in_f], in_f, rng),
            true,
        );
        let b = if bias {
            Some(ps.add(format!("{name}.b"), init::zeros(&[out_f]), false))
        } else {
            None
        };
        Linear { w, b, in_f, out_f }
    }

    pub fn fwd<T: Real>(&self, ps: &Params<T>, x: &Array2<T>) -> (Array2<T>, LinearCache<T>) {
        let w = ps
            .get(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight rank");
        let y = match self.b {
            Some(bid) => {
                let b = ps
                    .get(bid)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("linear bias rank");
                ops::linear_fwd(x, &w, Some(&b))
            }
            None => ops::linear_fwd(x, &w, None),
        };
        (y, LinearCache { x: x.clone() })
    }

    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &LinearCache<T>,
        gy: &Array2<T>,
    ) -> Array2<T> {
        let w = ps
            .get(self.w)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight rank");
        if let Some(bid) = self.b {
            let mut gw = grads.get(self.w).clone();
            let mut gb = grads.get(bid).clone();
            let gx = ops::linear_bwd(
                &cache.x,
                &w,
                gy,
                &mut gw.view_mut(),
                Some(&mut gb.view_mut()),
            );
            *grads.get_mut(self.w) = gw;
            *grads.get_mut(bid) = gb;
            gx
        } else {
            let mut gw = grads.get(self.w).clone();
            let gx = ops::linear_bwd(&cache.x, &w, gy, &mut gw.view_mut(), None);
            *grads.get_mut(self.w) = gw;
            gx
        }
    }
}
