//! Encoder-decoder backbone: four residual down-sampling stages followed
//! by three upsample+skip decoder stages, producing a feature map at half
//! the input resolution with a configurable channel count.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{ConvBn, ConvBnCache};
use crate::nn::{ops, ForwardCtx, Grads, Params, Real};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Output channel count C, shared with the reduction stack.
    pub out_channels: usize,
    pub net_h: usize,
    pub net_w: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![32, 64, 96, 96],
            out_channels: 96,
            net_h: 128,
            net_w: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 stage channel counts, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0)
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.net_h % 16 != 0 || self.net_w % 16 != 0 || self.net_h == 0 || self.net_w == 0 {
            return Err(Error::Config(format!(
                "net dims {}x{} must be positive and divisible by 16",
                self.net_h, self.net_w
            )));
        }
        Ok(())
    }
}

/// Stride-2 residual block: ConvBn(3x3, s2) + ReLU + ConvBn(3x3) on the
/// main path, ConvBn(1x1, s2) on the skip, ReLU after the sum.
struct ResDown {
    conv1: ConvBn,
    conv2: ConvBn,
    skip: ConvBn,
}

struct ResDownCache<T> {
    c1: ConvBnCache<T>,
    c2: ConvBnCache<T>,
    sk: ConvBnCache<T>,
    a: Array4<T>,
    y: Array4<T>,
}

impl ResDown {
    fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
    ) -> Self {
        ResDown {
            conv1: ConvBn::new(ps, rng, &format!("{name}.conv1"), in_c, out_c, 3, 2),
            conv2: ConvBn::new(ps, rng, &format!("{name}.conv2"), out_c, out_c, 3, 1),
            skip: ConvBn::new(ps, rng, &format!("{name}.skip"), in_c, out_c, 1, 2),
        }
    }

    fn fwd<T: Real>(
        &self,
        ps: &Params<T>,
        ctx: &mut ForwardCtx<'_, T>,
        x: &Array4<T>,
    ) -> (Array4<T>, ResDownCache<T>) {
        let (pre_a, c1) = self.conv1.fwd(ps, ctx, x);
        let a = ops::relu_fwd(&pre_a);
        let (b, c2) = self.conv2.fwd(ps, ctx, &a);
        let (s, sk) = self.skip.fwd(ps, ctx, x);
        let y = ops::relu_fwd(&(b + s));
        (y.clone(), ResDownCache { c1, c2, sk, a, y })
    }

    fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &ResDownCache<T>,
        gy: &Array4<T>,
    ) -> Array4<T> {
        let g_sum = ops::relu_bwd(&cache.y, gy);
        let g_a = self.conv2.bwd(ps, grads, &cache.c2, &g_sum);
        let g_pre_a = ops::relu_bwd(&cache.a, &g_a);
        let gx_main = self.conv1.bwd(ps, grads, &cache.c1, &g_pre_a);
        let gx_skip = self.skip.bwd(ps, grads, &cache.sk, &g_sum);
        gx_main + gx_skip
    }

    fn macs(&self, in_h: usize, in_w: usize) -> u64 {
        self.conv1.macs(in_h, in_w)
            + self.conv2.macs(in_h / 2, in_w / 2)
            + self.skip.macs(in_h, in_w)
    }
}

/// Nearest-neighbor 2x upsample, concat with the encoder skip, ConvBn+ReLU.
struct DecoderStage {
    conv: ConvBn,
    in_c: usize,
}

struct DecoderCache<T> {
    conv: ConvBnCache<T>,
    y: Array4<T>,
}

impl DecoderStage {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        skip_c: usize,
        out_c: usize,
        k: usize,
    ) -> Self {
        DecoderStage {
            conv: ConvBn::new(ps, rng, name, in_c + skip_c, out_c, k, 1),
            in_c,
        }
    }

    fn fwd<T: Real>(
        &self,
        ps: &Params<T>,
        ctx: &mut ForwardCtx<'_, T>,
        x: &Array4<T>,
        skip: &Array4<T>,
    ) -> (Array4<T>, DecoderCache<T>) {
        let up = ops::upsample2x_fwd(x);
        let cat = ops::concat_channels(&up, skip);
        let (pre, conv) = self.conv.fwd(ps, ctx, &cat);
        let y = ops::relu_fwd(&pre);
        (y.clone(), DecoderCache { conv, y })
    }

    /// Returns (grad wrt x, grad wrt skip).
    fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &DecoderCache<T>,
        gy: &Array4<T>,
    ) -> (Array4<T>, Array4<T>) {
        let g_pre = ops::relu_bwd(&cache.y, gy);
        let g_cat = self.conv.bwd(ps, grads, &cache.conv, &g_pre);
        let (g_up, g_skip) = ops::split_channels(&g_cat, self.in_c);
        (ops::upsample2x_bwd(&g_up), g_skip)
    }

    fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        self.conv.macs(out_h, out_w)
    }
}

pub struct Backbone {
    downs: Vec<ResDown>,
    decs: Vec<DecoderStage>,
    pub cfg: BackboneConfig,
}

pub struct BackboneCache<T> {
    downs: Vec<ResDownCache<T>>,
    decs: Vec<DecoderCache<T>>,
}

impl Backbone {
    pub fn new<T: Real>(
        ps: &mut Params<T>,
        rng: &mut ChaCha8Rng,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let sc = &cfg.stage_channels;
        let downs = vec![
            ResDown::new(ps, rng, "backbone.down0", cfg.in_channels, sc[0]),
            ResDown::new(ps, rng, "backbone.down1", sc[0], sc[1]),
            ResDown::new(ps, rng, "backbone.down2", sc[1], sc[2]),
            ResDown::new(ps, rng, "backbone.down3", sc[2], sc[3]),
        ];
        // The final (highest-resolution) stage uses a 1x1 kernel: at that
        // size the concat already carries fine detail and a 3x3 would
        // dominate the whole model's compute.
        let decs = vec![
            DecoderStage::new(ps, rng, "backbone.dec2", sc[3], sc[2], sc[2], 3),
            DecoderStage::new(ps, rng, "backbone.dec1", sc[2], sc[1], sc[1], 3),
            DecoderStage::new(ps, rng, "backbone.dec0", sc[1], sc[0], cfg.out_channels, 1),
        ];
        Ok(Backbone {
            downs,
            decs,
            cfg: cfg.clone(),
        })
    }

    /// image (B, in_c, h, w) -> features (B, C, h/2, w/2).
    pub fn fwd<T: Real>(
        &self,
        ps: &Params<T>,
        ctx: &mut ForwardCtx<'_, T>,
        x: &Array4<T>,
    ) -> Result<(Array4<T>, BackboneCache<T>)> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels || h != self.cfg.net_h || w != self.cfg.net_w {
            return Err(Error::Shape(format!(
                "backbone expects {}x{}x{} input, got {}x{}x{}",
                self.cfg.in_channels, self.cfg.net_h, self.cfg.net_w, c, h, w
            )));
        }
        let mut down_caches = Vec::with_capacity(4);
        let mut feats = Vec::with_capacity(4);
        let mut cur = x.clone();
        for stage in &self.downs {
            let (y, cache) = stage.fwd(ps, ctx, &cur);
            down_caches.push(cache);
            feats.push(y.clone());
            cur = y;
        }
        let mut dec_caches = Vec::with_capacity(3);
        for (i, stage) in self.decs.iter().enumerate() {
            let skip = &feats[2 - i];
            let (y, cache) = stage.fwd(ps, ctx, &cur, skip);
            dec_caches.push(cache);
            cur = y;
        }
        ctx.tap("decoder", &cur);
        Ok((
            cur,
            BackboneCache {
                downs: down_caches,
                decs: dec_caches,
            },
        ))
    }

    pub fn bwd<T: Real>(
        &self,
        ps: &Params<T>,
        grads: &mut Grads<T>,
        cache: &BackboneCache<T>,
        gy: &Array4<T>,
    ) -> Array4<T> {
        // Decoder stages in reverse; skip grads flow into the matching
        // down-stage outputs.
        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None, None, None, None];
        let mut g = gy.clone();
        for (i, stage) in self.decs.iter().enumerate().rev() {
            let (gx, g_skip) = stage.bwd(ps, grads, &cache.decs[i], &g);
            skip_grads[2 - i] = Some(g_skip);
            g = gx;
        }
        // g is now the gradient at down3's output.
        for (i, stage) in self.downs.iter().enumerate().rev() {
            if let Some(extra) = skip_grads[i].take() {
                g = g + extra;
            }
            g = stage.bwd(ps, grads, &cache.downs[i], &g);
        }
        g
    }

    /// Forward multiply-accumulate count per image.
    pub fn macs(&self) -> u64 {
        let (h, w) = (self.cfg.net_h, self.cfg.net_w);
        let mut total = 0;
        let mut cur = (h, w);
        for stage in &self.downs {
            total += stage.macs(cur.0, cur.1);
            cur = (cur.0 / 2, cur.1 / 2);
        }
        for stage in &self.decs {
            cur = (cur.0 * 2, cur.1 * 2);
            total += stage.macs(cur.0, cur.1);
        }
        total
    }
}
