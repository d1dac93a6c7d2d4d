//! The segmentation network: scale embeddings, a deep main encoder for the
//! local window, shallow sub-encoders for the context windows, cascaded
//! cross-scale fusion (CCSF), and main/auxiliary decoders, with an exact
//! hand-written backward pass.
//!
//! Fusion, for scales `i = 1..n`:
//!
//! ```text
//! tokens_0 = fdr_0(F_0)
//! tokens_i = fdr_i(mlp_i(F_i))
//! ca_i     = softmax(tokens_{i-1} · tokens_iᵀ / √dim) · tokens_i
//! fusion   = F_0 + Σ alpha_i · fde_i(ca_i)
//! ```
//!
//! The query of each attention step is the previous scale's reduced
//! features, not the previous step's output.

mod checkpoint;
pub mod gradcheck;
pub mod layers;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_bilinear, resize_bilinear_backward};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, Param, TokenSequence};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
use layers::{
    avg_pool, avg_pool_backward, conv2d_backward, conv2d_forward, cross_attention_backward,
    cross_attention_forward, flatten_tokens, relu, relu_backward, unflatten_tokens, AttentionOutput,
    ConvSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_scales: usize,
    pub in_channels: usize,
    /// Unified window size `(height, width)`.
    pub input_size: (usize, usize),
    /// Feature channels of every encoder block.
    pub width: usize,
    pub main_depth: usize,
    pub sub_depth: usize,
    /// Reduced attention dimension.
    pub dim: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 main blocks, 2 sub blocks, `dim = 32`.
    pub fn new(n_scales: usize, in_channels: usize, input_size: (usize, usize), classes: usize) -> Self {
        Self {
            n_scales,
            in_channels,
            input_size,
            width: 16,
            main_depth: 4,
            sub_depth: 2,
            dim: 32,
            classes,
        }
    }

    /// The configuration used by the finite-difference gradient check.
    pub fn tiny() -> Self {
        Self {
            n_scales: 3,
            in_channels: 3,
            input_size: (8, 8),
            width: 4,
            main_depth: 2,
            sub_depth: 1,
            dim: 4,
            classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_scales", self.n_scales),
            ("in_channels", self.in_channels),
            ("width", self.width),
            ("main_depth", self.main_depth),
            ("sub_depth", self.sub_depth),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.sub_depth >= self.main_depth {
            return Err(Error::config("sub_depth", "must be smaller than main_depth"));
        }
        if self.dim < 4 {
            return Err(Error::config("dim", "must be >= 4"));
        }
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::config("classes", "must be in 2..=255"));
        }
        let step = 1usize << self.main_depth;
        let (h, w) = self.input_size;
        if h < 8 || w < 8 || h % step != 0 || w % step != 0 {
            return Err(Error::config(
                "unified_size",
                format!("{h} x {w} must be >= 8 and divisible by 2^main_depth = {step}"),
            ));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size.0 >> self.main_depth, self.input_size.1 >> self.main_depth)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.feature_size();
        h * w
    }

    fn pool_factor(&self) -> usize {
        1 << (self.main_depth - self.sub_depth)
    }

    fn encoder_spec(&self, block: usize) -> ConvSpec {
        ConvSpec {
            in_channels: if block == 0 { self.in_channels } else { self.width },
            out_channels: self.width,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    fn decoder_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.width,
            out_channels: self.width,
            kernel: 3,
            stride: 1,
            pad: 1,
        }
    }

    /// Expected shapes of every intermediate of a forward pass.
    pub fn shape_plan(&self) -> ShapePlan {
        let (h, w) = self.input_size;
        let (fh, fw) = self.feature_size();
        ShapePlan {
            input: [self.in_channels, h, w],
            main_blocks: (1..=self.main_depth)
                .map(|k| [self.width, h >> k, w >> k])
                .collect(),
            sub_blocks: (1..=self.sub_depth)
                .map(|k| [self.width, h >> k, w >> k])
                .collect(),
            feature: [self.width, fh, fw],
            tokens: (fh * fw, self.dim),
            low_logits: [self.classes, fh, fw],
            logits: [self.classes, h, w],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: [usize; 3],
    pub main_blocks: Vec<[usize; 3]>,
    pub sub_blocks: Vec<[usize; 3]>,
    pub feature: [usize; 3],
    pub tokens: (usize, usize),
    pub low_logits: [usize; 3],
    pub logits: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Param,
}

impl ConvParams {
    fn zeros(name: &str, spec: ConvSpec) -> Self {
        let k = spec.kernel;
        Self {
            spec,
            weight: Param::zeros(
                format!("{name}.weight"),
                vec![spec.out_channels, spec.in_channels, k, k],
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![spec.out_channels]),
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        conv2d_forward(x, &self.spec, &self.weight.value, Some(&self.bias.value))
    }

    fn backward(&mut self, x: &FeatureMap, grad: &FeatureMap) -> FeatureMap {
        conv2d_backward(
            x,
            &self.spec,
            &self.weight.value,
            grad,
            &mut self.weight.grad,
            Some(&mut self.bias.grad),
        )
    }
}

/// Two-layer per-position channel MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub first: ConvParams,
    pub second: ConvParams,
}

/// All learnable tensors. Per-scale vectors for context scales are indexed
/// by `scale - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embeddings: Vec<Param>,
    pub main_encoder: Vec<ConvParams>,
    pub sub_encoders: Vec<Vec<ConvParams>>,
    pub mlp: Vec<MlpParams>,
    /// Reduction weights `[dim, width]` for every scale (empty when `n = 1`).
    pub fdr: Vec<Param>,
    /// Expansion weights `[width, dim]` for context scales.
    pub fde: Vec<Param>,
    pub alpha: Param,
    pub decoder_conv: ConvParams,
    pub decoder_head: ConvParams,
    pub aux_head: ConvParams,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_scales;
        let width = config.width;
        let enc = |prefix: String, depth: usize| -> Vec<ConvParams> {
            (0..depth)
                .map(|k| ConvParams::zeros(&format!("{prefix}.{k}"), config.encoder_spec(k)))
                .collect()
        };
        Ok(Self {
            config,
            embeddings: (0..n)
                .map(|i| Param::zeros(format!("embed.{i}"), vec![config.in_channels]))
                .collect(),
            main_encoder: enc("main".into(), config.main_depth),
            sub_encoders: (1..n).map(|i| enc(format!("sub.{i}"), config.sub_depth)).collect(),
            mlp: (1..n)
                .map(|i| MlpParams {
                    first: ConvParams::zeros(&format!("mlp.{i}.fc1"), ConvSpec::pointwise(width, width)),
                    second: ConvParams::zeros(&format!("mlp.{i}.fc2"), ConvSpec::pointwise(width, width)),
                })
                .collect(),
            fdr: if n > 1 {
                (0..n)
                    .map(|i| Param::zeros(format!("fdr.{i}"), vec![config.dim, width]))
                    .collect()
            } else {
                Vec::new()
            },
            fde: (1..n)
                .map(|i| Param::zeros(format!("fde.{i}"), vec![width, config.dim]))
                .collect(),
            alpha: Param::zeros("alpha", vec![n - 1]),
            decoder_conv: ConvParams::zeros("main_dec.conv", config.decoder_spec()),
            decoder_head: ConvParams::zeros("main_dec.head", ConvSpec::pointwise(width, config.classes)),
            aux_head: ConvParams::zeros("sub_dec.head", ConvSpec::pointwise(width, config.classes)),
        })
    }

    /// Weights uniform in `±1/√fan_in`; biases, embeddings and `alpha` zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = SeededRng::new(seed);
        for p in params.params_mut() {
            let fan_in = match p.shape.as_slice() {
                [_, ci, k1, k2] if p.name.ends_with(".weight") => ci * k1 * k2,
                [_, ci] if p.name.starts_with("fdr") || p.name.starts_with("fde") => *ci,
                _ => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in p.value.iter_mut() {
                *v = rng.range(-bound, bound);
            }
        }
        Ok(params)
    }

    /// Every parameter in canonical order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.embeddings.iter().collect();
        for c in &self.main_encoder {
            out.extend([&c.weight, &c.bias]);
        }
        for enc in &self.sub_encoders {
            for c in enc {
                out.extend([&c.weight, &c.bias]);
            }
        }
        for m in &self.mlp {
            out.extend([&m.first.weight, &m.first.bias, &m.second.weight, &m.second.bias]);
        }
        out.extend(self.fdr.iter());
        out.extend(self.fde.iter());
        out.push(&self.alpha);
        for c in [&self.decoder_conv, &self.decoder_head, &self.aux_head] {
            out.extend([&c.weight, &c.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.embeddings.iter_mut().collect();
        for c in &mut self.main_encoder {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        for enc in &mut self.sub_encoders {
            for c in enc {
                out.extend([&mut c.weight, &mut c.bias]);
            }
        }
        for m in &mut self.mlp {
            out.extend([
                &mut m.first.weight,
                &mut m.first.bias,
                &mut m.second.weight,
                &mut m.second.bias,
            ]);
        }
        out.extend(self.fdr.iter_mut());
        out.extend(self.fde.iter_mut());
        out.push(&mut self.alpha);
        for c in [&mut self.decoder_conv, &mut self.decoder_head, &mut self.aux_head] {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Copy restricted to the local branch (`n = 1`): embedding 0, main
    /// encoder and both decoders.
    pub fn local_only(&self) -> Self {
        let config = ModelConfig {
            n_scales: 1,
            ..self.config
        };
        let mut out = Self::zeros(config).expect("config already validated");
        out.embeddings = vec![self.embeddings[0].clone()];
        out.main_encoder = self.main_encoder.clone();
        out.decoder_conv = self.decoder_conv.clone();
        out.decoder_head = self.decoder_head.clone();
        out.aux_head = self.aux_head.clone();
        out
    }

    fn check_scale(&self, i: usize, context: &'static str) -> Result<()> {
        if i == 0 || i >= self.config.n_scales {
            return Err(Error::shape(context, format!("scale in 1..{}", self.config.n_scales), i));
        }
        Ok(())
    }

    fn check_patch(&self, patch: &FeatureMap, context: &'static str) -> Result<()> {
        let (h, w) = self.config.input_size;
        patch.expect_shape(context, [self.config.in_channels, h, w])
    }

    fn check_feature(&self, f: &FeatureMap, context: &'static str) -> Result<()> {
        let (fh, fw) = self.config.feature_size();
        f.expect_shape(context, [self.config.width, fh, fw])
    }

    // -----------------------------------------------------------------------
    // Per-operation entry points

    /// Adds scale embedding 0 and runs the main encoder.
    pub fn main_encode(&self, patch: &FeatureMap) -> Result<FeatureMap> {
        self.check_patch(patch, "main_encode")?;
        Ok(encode(&add_embedding(patch, &self.embeddings[0].value), &self.main_encoder, 1).output)
    }

    /// Adds scale embedding `i` and runs sub-encoder `i` plus pooling.
    pub fn sub_encode(&self, patch: &FeatureMap, i: usize) -> Result<FeatureMap> {
        self.check_scale(i, "sub_encode")?;
        self.check_patch(patch, "sub_encode")?;
        let x = add_embedding(patch, &self.embeddings[i].value);
        Ok(encode(&x, &self.sub_encoders[i - 1], self.config.pool_factor()).output)
    }

    pub fn mlp_align(&self, f: &FeatureMap, i: usize) -> Result<FeatureMap> {
        self.check_scale(i, "mlp_align")?;
        if f.channels != self.config.width {
            return Err(Error::shape("mlp_align", self.config.width, f.channels));
        }
        Ok(mlp_forward(&self.mlp[i - 1], f).output)
    }

    pub fn fdr(&self, f: &FeatureMap, i: usize) -> Result<TokenSequence> {
        if i >= self.fdr.len() {
            return Err(Error::shape("fdr", format!("scale < {}", self.fdr.len()), i));
        }
        if f.channels != self.config.width {
            return Err(Error::shape("fdr", self.config.width, f.channels));
        }
        Ok(fdr_forward(&self.fdr[i], f, self.config.dim))
    }

    /// Expands `tokens` back to a square `width × S × S` map.
    pub fn fde(&self, tokens: &TokenSequence, i: usize) -> Result<FeatureMap> {
        self.check_scale(i, "fde")?;
        if tokens.dim != self.config.dim {
            return Err(Error::shape("fde", self.config.dim, tokens.dim));
        }
        let side = square_side(tokens.len)?;
        Ok(fde_forward(&self.fde[i - 1], tokens, self.config.width, side, side))
    }

    /// Cascaded cross-scale fusion of the encoder outputs.
    pub fn ccsf_fuse(&self, sfr: &[FeatureMap]) -> Result<FeatureMap> {
        if sfr.len() != self.config.n_scales {
            return Err(Error::shape("ccsf_fuse", self.config.n_scales, sfr.len()));
        }
        for f in sfr {
            self.check_feature(f, "ccsf_fuse")?;
        }
        Ok(self.fuse(sfr).fusion)
    }

    pub fn main_decode(&self, fusion: &FeatureMap) -> Result<FeatureMap> {
        self.check_feature(fusion, "main_decode")?;
        Ok(self.decode_main(fusion).logits)
    }

    pub fn sub_decode(&self, local: &FeatureMap) -> Result<FeatureMap> {
        self.check_feature(local, "sub_decode")?;
        let (h, w) = self.config.input_size;
        Ok(resize_bilinear(&self.aux_head.forward(local), h, w))
    }

    /// Full forward pass without caching.
    pub fn forward(&self, patches: &[FeatureMap]) -> Result<ModelOutput> {
        Ok(self.forward_traced(patches)?.0)
    }

    fn forward_traced(&self, patches: &[FeatureMap]) -> Result<(ModelOutput, ForwardCache)> {
        let cfg = &self.config;
        if patches.len() != cfg.n_scales {
            return Err(Error::shape("forward", cfg.n_scales, patches.len()));
        }
        for p in patches {
            self.check_patch(p, "forward")?;
        }
        let main = encode(&add_embedding(&patches[0], &self.embeddings[0].value), &self.main_encoder, 1);
        let subs: Vec<EncoderTrace> = (1..cfg.n_scales)
            .map(|i| {
                let x = add_embedding(&patches[i], &self.embeddings[i].value);
                encode(&x, &self.sub_encoders[i - 1], cfg.pool_factor())
            })
            .collect();
        let sfr: Vec<FeatureMap> = std::iter::once(main.output.clone())
            .chain(subs.iter().map(|s| s.output.clone()))
            .collect();
        let fused = self.fuse(&sfr);
        let dec = self.decode_main(&fused.fusion);
        let aux_low = self.aux_head.forward(&sfr[0]);
        let (h, w) = cfg.input_size;
        let aux = resize_bilinear(&aux_low, h, w);
        debug_assert!(dec.logits.is_finite() && aux.is_finite());
        let output = ModelOutput {
            main: dec.logits.clone(),
            aux,
        };
        let cache = ForwardCache {
            main,
            subs,
            sfr,
            fused,
            decoder: dec,
            aux_low,
        };
        Ok((output, cache))
    }

    fn fuse(&self, sfr: &[FeatureMap]) -> FusionTrace {
        let cfg = &self.config;
        let n = cfg.n_scales;
        let mut fusion = sfr[0].clone();
        if n == 1 {
            return FusionTrace {
                mlp: Vec::new(),
                tokens: Vec::new(),
                attention: Vec::new(),
                expanded: Vec::new(),
                fusion,
            };
        }
        let mlp: Vec<MlpTrace> = (1..n).map(|i| mlp_forward(&self.mlp[i - 1], &sfr[i])).collect();
        let tokens: Vec<TokenSequence> = (0..n)
            .map(|i| {
                let src = if i == 0 { &sfr[0] } else { &mlp[i - 1].output };
                fdr_forward(&self.fdr[i], src, cfg.dim)
            })
            .collect();
        let (fh, fw) = cfg.feature_size();
        let mut attention = Vec::with_capacity(n - 1);
        let mut expanded = Vec::with_capacity(n - 1);
        for i in 1..n {
            let att = cross_attention_forward(&tokens[i - 1], &tokens[i]);
            let e = fde_forward(&self.fde[i - 1], &att.output, cfg.width, fh, fw);
            fusion.add_scaled(&e, self.alpha.value[i - 1]);
            attention.push(att);
            expanded.push(e);
        }
        debug_assert!(fusion.is_finite());
        FusionTrace {
            mlp,
            tokens,
            attention,
            expanded,
            fusion,
        }
    }

    fn decode_main(&self, fusion: &FeatureMap) -> DecoderTrace {
        let pre = self.decoder_conv.forward(fusion);
        let hidden = relu(&pre);
        let low = self.decoder_head.forward(&hidden);
        let (h, w) = self.config.input_size;
        let logits = resize_bilinear(&low, h, w);
        DecoderTrace {
            pre,
            hidden,
            low,
            logits,
        }
    }

    /// Accumulates parameter gradients for the upstream logit gradients.
    fn backward_from(&mut self, cache: &ForwardCache, grad_main: &FeatureMap, grad_aux: &FeatureMap) -> Result<()> {
        let cfg = self.config;
        let (h, w) = cfg.input_size;
        grad_main.expect_shape("backward", [cfg.classes, h, w])?;
        grad_aux.expect_shape("backward", [cfg.classes, h, w])?;
        let (fh, fw) = cfg.feature_size();
        let n = cfg.n_scales;

        // main decoder
        let g_low = resize_bilinear_backward(grad_main, fh, fw);
        let g_hidden = self.decoder_head.backward(&cache.decoder.hidden, &g_low);
        let g_pre = relu_backward(&cache.decoder.pre, &g_hidden);
        let g_fusion = self.decoder_conv.backward(&cache.fused.fusion, &g_pre);

        // auxiliary decoder
        let g_aux_low = resize_bilinear_backward(grad_aux, fh, fw);
        let mut g_sfr: Vec<FeatureMap> = (0..n).map(|_| FeatureMap::zeros(cfg.width, fh, fw)).collect();
        g_sfr[0] = self.aux_head.backward(&cache.sfr[0], &g_aux_low);
        g_sfr[0].add_assign(&g_fusion);

        if n > 1 {
            let fused = &cache.fused;
            let mut g_tokens: Vec<TokenSequence> =
                (0..n).map(|_| TokenSequence::zeros(cfg.tokens(), cfg.dim)).collect();
            for i in 1..n {
                let alpha = self.alpha.value[i - 1];
                self.alpha.grad[i - 1] += g_fusion.dot(&fused.expanded[i - 1]);
                let mut g_exp = g_fusion.clone();
                g_exp.data.iter_mut().for_each(|v| *v *= alpha);
                let g_ca = fde_backward(&mut self.fde[i - 1], &fused.attention[i - 1].output, &g_exp, fh, fw);
                let (dq, dkv) = cross_attention_backward(
                    &fused.tokens[i - 1],
                    &fused.tokens[i],
                    &fused.attention[i - 1].weights,
                    &g_ca,
                );
                add_tokens(&mut g_tokens[i - 1], &dq);
                add_tokens(&mut g_tokens[i], &dkv);
            }
            for i in 0..n {
                let src = if i == 0 { &cache.sfr[0] } else { &fused.mlp[i - 1].output };
                let g_src = fdr_backward(&mut self.fdr[i], src, &g_tokens[i], fh, fw);
                if i == 0 {
                    g_sfr[0].add_assign(&g_src);
                } else {
                    g_sfr[i] = mlp_backward(&mut self.mlp[i - 1], &fused.mlp[i - 1], &cache.sfr[i], &g_src);
                }
            }
        }

        let g_in = encode_backward(&mut self.main_encoder, &cache.main, &g_sfr[0], 1);
        accumulate_embedding(&mut self.embeddings[0], &g_in);
        for i in 1..n {
            let g_in = encode_backward(&mut self.sub_encoders[i - 1], &cache.subs[i - 1], &g_sfr[i], cfg.pool_factor());
            accumulate_embedding(&mut self.embeddings[i], &g_in);
        }
        Ok(())
    }
}

/// Main and auxiliary logits at the unified size.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub main: FeatureMap,
    pub aux: FeatureMap,
}

fn square_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::shape("fde", "a perfect-square token count", n));
    }
    Ok(side)
}

fn add_tokens(acc: &mut TokenSequence, other: &TokenSequence) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

fn add_embedding(patch: &FeatureMap, embedding: &[f64]) -> FeatureMap {
    let mut x = patch.clone();
    for (c, &e) in embedding.iter().enumerate() {
        x.plane_mut(c).iter_mut().for_each(|v| *v += e);
    }
    x
}

fn accumulate_embedding(embedding: &mut Param, grad_input: &FeatureMap) {
    for c in 0..grad_input.channels {
        embedding.grad[c] += grad_input.plane(c).iter().sum::<f64>();
    }
}

#[derive(Debug, Clone)]
struct EncoderTrace {
    /// Input of each block (the embedded patch for block 0).
    inputs: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
    output: FeatureMap,
}

fn encode(x: &FeatureMap, blocks: &[ConvParams], pool: usize) -> EncoderTrace {
    let mut inputs = Vec::with_capacity(blocks.len());
    let mut pre = Vec::with_capacity(blocks.len());
    let mut cur = x.clone();
    for block in blocks {
        let z = block.forward(&cur);
        let next = relu(&z);
        inputs.push(std::mem::replace(&mut cur, next));
        pre.push(z);
    }
    let output = avg_pool(&cur, pool);
    debug_assert!(output.is_finite());
    EncoderTrace { inputs, pre, output }
}

fn encode_backward(blocks: &mut [ConvParams], trace: &EncoderTrace, grad: &FeatureMap, pool: usize) -> FeatureMap {
    let last = trace.pre.last().expect("encoder has at least one block");
    let mut g = avg_pool_backward(grad, pool, last.height, last.width);
    for (k, block) in blocks.iter_mut().enumerate().rev() {
        let gz = relu_backward(&trace.pre[k], &g);
        g = block.backward(&trace.inputs[k], &gz);
    }
    g
}

#[derive(Debug, Clone)]
struct MlpTrace {
    hidden_pre: FeatureMap,
    hidden: FeatureMap,
    output: FeatureMap,
}

fn mlp_forward(p: &MlpParams, x: &FeatureMap) -> MlpTrace {
    let hidden_pre = p.first.forward(x);
    let hidden = relu(&hidden_pre);
    let output = p.second.forward(&hidden);
    MlpTrace {
        hidden_pre,
        hidden,
        output,
    }
}

fn mlp_backward(p: &mut MlpParams, trace: &MlpTrace, x: &FeatureMap, grad: &FeatureMap) -> FeatureMap {
    let g_hidden = p.second.backward(&trace.hidden, grad);
    let g_pre = relu_backward(&trace.hidden_pre, &g_hidden);
    p.first.backward(x, &g_pre)
}

fn fdr_forward(weight: &Param, x: &FeatureMap, dim: usize) -> TokenSequence {
    let spec = ConvSpec::pointwise(x.channels, dim);
    flatten_tokens(&conv2d_forward(x, &spec, &weight.value, None))
}

fn fdr_backward(weight: &mut Param, x: &FeatureMap, grad: &TokenSequence, h: usize, w: usize) -> FeatureMap {
    let spec = ConvSpec::pointwise(x.channels, grad.dim);
    let g = unflatten_tokens(grad, h, w);
    conv2d_backward(x, &spec, &weight.value, &g, &mut weight.grad, None)
}

fn fde_forward(weight: &Param, tokens: &TokenSequence, width: usize, h: usize, w: usize) -> FeatureMap {
    let spec = ConvSpec::pointwise(tokens.dim, width);
    conv2d_forward(&unflatten_tokens(tokens, h, w), &spec, &weight.value, None)
}

fn fde_backward(weight: &mut Param, tokens: &TokenSequence, grad: &FeatureMap, h: usize, w: usize) -> TokenSequence {
    let spec = ConvSpec::pointwise(tokens.dim, grad.channels);
    let x = unflatten_tokens(tokens, h, w);
    flatten_tokens(&conv2d_backward(&x, &spec, &weight.value, grad, &mut weight.grad, None))
}

/// `softmax(Q KVᵀ / √dim) · KV`.
pub fn cross_attention(q: &TokenSequence, kv: &TokenSequence) -> Result<TokenSequence> {
    Ok(cross_attention_weights(q, kv)?.output)
}

/// Attention output together with its row-stochastic weight matrix.
pub fn cross_attention_weights(q: &TokenSequence, kv: &TokenSequence) -> Result<AttentionOutput> {
    if q.dim != kv.dim {
        return Err(Error::shape("cross_attention", q.dim, kv.dim));
    }
    if kv.len == 0 {
        return Err(Error::shape("cross_attention", "at least one key", 0));
    }
    Ok(cross_attention_forward(q, kv))
}

#[derive(Debug, Clone)]
struct FusionTrace {
    mlp: Vec<MlpTrace>,
    tokens: Vec<TokenSequence>,
    attention: Vec<AttentionOutput>,
    expanded: Vec<FeatureMap>,
    fusion: FeatureMap,
}

#[derive(Debug, Clone)]
struct DecoderTrace {
    pre: FeatureMap,
    hidden: FeatureMap,
    low: FeatureMap,
    logits: FeatureMap,
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    main: EncoderTrace,
    subs: Vec<EncoderTrace>,
    sfr: Vec<FeatureMap>,
    fused: FusionTrace,
    decoder: DecoderTrace,
    aux_low: FeatureMap,
}

impl ForwardCache {
    /// Checks every cached intermediate against `plan`.
    pub fn audit(&self, plan: &ShapePlan) -> Result<()> {
        let check = |ctx: &'static str, got: [usize; 3], want: [usize; 3]| {
            if got != want {
                Err(Error::shape(ctx, want, got))
            } else {
                Ok(())
            }
        };
        check("audit: input", self.main.inputs[0].shape(), plan.input)?;
        for (pre, want) in self.main.pre.iter().zip(&plan.main_blocks) {
            check("audit: main block", pre.shape(), *want)?;
        }
        if self.main.pre.len() != plan.main_blocks.len() {
            return Err(Error::shape("audit: main depth", plan.main_blocks.len(), self.main.pre.len()));
        }
        for sub in &self.subs {
            check("audit: sub input", sub.inputs[0].shape(), plan.input)?;
            for (pre, want) in sub.pre.iter().zip(&plan.sub_blocks) {
                check("audit: sub block", pre.shape(), *want)?;
            }
            check("audit: sub output", sub.output.shape(), plan.feature)?;
        }
        for f in &self.sfr {
            check("audit: sfr", f.shape(), plan.feature)?;
        }
        for m in &self.fused.mlp {
            check("audit: mlp", m.output.shape(), plan.feature)?;
        }
        for t in &self.fused.tokens {
            if (t.len, t.dim) != plan.tokens {
                return Err(Error::shape("audit: tokens", plan.tokens, (t.len, t.dim)));
            }
        }
        for a in &self.fused.attention {
            if (a.output.len, a.output.dim) != plan.tokens {
                return Err(Error::shape("audit: attention", plan.tokens, (a.output.len, a.output.dim)));
            }
        }
        for e in &self.fused.expanded {
            check("audit: fde", e.shape(), plan.feature)?;
        }
        check("audit: fusion", self.fused.fusion.shape(), plan.feature)?;
        check("audit: decoder", self.decoder.hidden.shape(), plan.feature)?;
        check("audit: low logits", self.decoder.low.shape(), plan.low_logits)?;
        check("audit: aux low logits", self.aux_low.shape(), plan.low_logits)?;
        check("audit: logits", self.decoder.logits.shape(), plan.logits)
    }
}

/// Parameters plus the cache of the most recent training forward pass.
#[derive(Debug, Clone)]
pub struct SfrNet {
    pub params: ModelParams,
    cache: Option<ForwardCache>,
}

impl SfrNet {
    pub fn new(params: ModelParams) -> Self {
        Self { params, cache: None }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Forward pass that keeps activations for [`SfrNet::backward`].
    pub fn forward_train(&mut self, patches: &[FeatureMap]) -> Result<ModelOutput> {
        let (out, cache) = self.params.forward_traced(patches)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    /// Accumulates gradients into the parameter buffers and drops the cache.
    pub fn backward(&mut self, grad_main: &FeatureMap, grad_aux: &FeatureMap) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::MissingCache)?;
        self.params.backward_from(&cache, grad_main, grad_aux)
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }
}

#[cfg(test)]
mod tests;
