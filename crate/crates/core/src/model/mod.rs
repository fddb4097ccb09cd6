//! The masked contrastive ViT: patch embedding, random masking, encoder,
//! one-block decoder, projector and classifier head.
//!
//! There is no class token. The projector and the classifier both consume the
//! encoder's tokens averaged over the token axis. Positional embeddings are
//! fixed 2-D sine/cosine tables for encoder and decoder alike.
//!
//! Parameter groups and their paths:
//!
//! | group       | paths                                                               |
//! |-------------|---------------------------------------------------------------------|
//! | `encoder`   | `encoder.patch_embed_{w,b}`, `encoder.blocks.{i}.*`, `encoder.norm_{gain,bias}` |
//! | `decoder`   | `decoder.embed_{w,b}`, `decoder.mask_token`, `decoder.block.*`, `decoder.pred_{w,b}` |
//! | `projector` | `projector.fc1_{w,b}`, `projector.ln_{gain,bias}`, `projector.fc2_{w,b}` |
//! | `head`      | `head.fc_{w,b}`                                                     |

mod mask;

use std::fmt;

pub use mask::{keep_count, random_mask, MaskPlan};

use crate::data::ImageRecord;
use crate::error::{invalid, Error, Result};
use crate::nn::{self, BlockVars, LN_EPS};
use crate::params::{
    init_layer_norm, init_linear, truncated_normal, Bindings, ParamStore, INIT_STD,
};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const ENCODER: &str = "encoder.";
pub const DECODER: &str = "decoder.";
pub const PROJECTOR: &str = "projector.";
pub const HEAD: &str = "head.";

const PATCH_EMBED: &str = "encoder.patch_embed_";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub enc_dim: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub proj_dim: usize,
    pub num_classes: usize,
    pub freeze_patch_embed: bool,
}

impl Default for ModelConfig {
    /// The CIFAR setup: 32px images, 4px patches, a 12-block 4-head encoder
    /// of width 512, a width-256 single-head decoder and a 512-d projection.
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            enc_depth: 12,
            enc_heads: 4,
            enc_dim: 512,
            dec_dim: 256,
            dec_heads: 1,
            proj_dim: 512,
            num_classes: 10,
            freeze_patch_embed: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("enc_depth", self.enc_depth),
            ("enc_heads", self.enc_heads),
            ("enc_dim", self.enc_dim),
            ("dec_dim", self.dec_dim),
            ("dec_heads", self.dec_heads),
            ("proj_dim", self.proj_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        nn::check_heads(self.enc_dim, self.enc_heads)?;
        nn::check_heads(self.dec_dim, self.dec_heads)?;
        for (key, dim) in [("enc_dim", self.enc_dim), ("dec_dim", self.dec_dim)] {
            if dim % 4 != 0 {
                return Err(Error::Config(format!(
                    "{key} {dim} must be a multiple of 4 for 2-D sine/cosine positions"
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Shapes of every parameter in the given groups, keyed by path.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut store = ParamStore::<f32>::new();
        let mut rng = crate::rng::stream(0, &[]);
        init_all(self, &mut store, &mut rng);
        store
            .iter()
            .map(|(k, v)| (k.to_string(), v.shape().to_vec()))
            .collect()
    }

    /// Whether a path is held fixed regardless of stage.
    pub fn is_frozen(&self, path: &str) -> bool {
        self.freeze_patch_embed && path.starts_with(PATCH_EMBED)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}px/{}px x{} enc {}x{}d/{}h dec {}d/{}h proj {} classes {}",
            self.image_size,
            self.patch_size,
            self.channels,
            self.enc_depth,
            self.enc_dim,
            self.enc_heads,
            self.dec_dim,
            self.dec_heads,
            self.proj_dim,
            self.num_classes
        )
    }
}

/// Splits an image into non-overlapping `P x P` patches in row-major patch
/// order; each token flattens its patch as `(row, col, channel)`.
pub fn patchify<S: Scalar>(image: &ImageRecord, patch: usize) -> Result<Tensor<S>> {
    if image.height != image.width || !image.height.is_multiple_of(patch) || patch == 0 {
        return Err(invalid(
            "patchify",
            format!(
                "{}x{} image cannot be cut into {patch}px patches",
                image.height, image.width
            ),
        ));
    }
    let grid = image.height / patch;
    let c = image.channels;
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                let row = (gy * patch + py) * image.width + gx * patch;
                out.extend(
                    image.pixels[row * c..(row + patch) * c]
                        .iter()
                        .map(|&v| S::of(v as f64)),
                );
            }
        }
    }
    Ok(Tensor::new(vec![grid * grid, dim], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(
    tokens: &Tensor<S>,
    patch: usize,
    channels: usize,
) -> Result<ImageRecord> {
    let [n, dim] = *tokens.shape() else {
        return Err(invalid(
            "unpatchify",
            format!("expected [tokens, dim], got {:?}", tokens.shape()),
        ));
    };
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || dim != patch * patch * channels {
        return Err(invalid(
            "unpatchify",
            format!("{n} tokens of dim {dim} do not form a square {patch}px grid"),
        ));
    }
    let size = grid * patch;
    let mut img = ImageRecord::blank(size, size, channels);
    for (t, token) in tokens.data().chunks(dim).enumerate() {
        let (gy, gx) = (t / grid, t % grid);
        for py in 0..patch {
            let row = (gy * patch + py) * size + gx * patch;
            for (dst, &v) in img.pixels[row * channels..(row + patch) * channels]
                .iter_mut()
                .zip(&token[py * patch * channels..(py + 1) * patch * channels])
            {
                *dst = v.to_f64_lossy() as f32;
            }
        }
    }
    Ok(img)
}

/// Stacks patchified images into `[batch, tokens, patch_dim]`.
pub fn patchify_batch<S: Scalar>(images: &[ImageRecord], patch: usize) -> Result<Tensor<S>> {
    let first = images
        .first()
        .ok_or_else(|| invalid("patchify", "empty batch"))?;
    let per = patchify::<S>(first, patch)?;
    let (n, d) = (per.shape()[0], per.shape()[1]);
    let mut data = Vec::with_capacity(images.len() * n * d);
    for img in images {
        if !img.same_shape(first) {
            return Err(invalid("patchify", "images in a batch differ in shape"));
        }
        data.extend_from_slice(patchify::<S>(img, patch)?.data());
    }
    Ok(Tensor::new(vec![images.len(), n, d], data)?)
}

/// Fixed 2-D sine/cosine table `[grid * grid, dim]`. The first half of each
/// row encodes the patch row, the second half the patch column; within a
/// half, `sin(p * w_i)` precede `cos(p * w_i)` with `w_i = 10000^(-i / (dim/4))`.
pub fn sincos_pos_embed<S: Scalar>(dim: usize, grid: usize) -> Tensor<S> {
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        for c in 0..grid {
            for pos in [r, c] {
                let p = pos as f64;
                for i in 0..quarter {
                    data.push(S::of(
                        (p * 10000f64.powf(-(i as f64) / quarter as f64)).sin(),
                    ));
                }
                for i in 0..quarter {
                    data.push(S::of(
                        (p * 10000f64.powf(-(i as f64) / quarter as f64)).cos(),
                    ));
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], data).expect("table size matches")
}

fn init_all<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, rng: &mut Rng) {
    let (e, d) = (cfg.enc_dim, cfg.dec_dim);
    init_linear(store, "encoder.patch_embed", cfg.patch_dim(), e, rng);
    for i in 0..cfg.enc_depth {
        nn::init_block(store, &format!("encoder.blocks.{i}"), e, rng);
    }
    init_layer_norm(store, "encoder.norm", e);

    init_linear(store, "decoder.embed", e, d, rng);
    store.insert("decoder.mask_token", truncated_normal(&[d], INIT_STD, rng));
    nn::init_block(store, "decoder.block", d, rng);
    init_linear(store, "decoder.pred", d, cfg.patch_dim(), rng);

    init_projector(cfg, store, rng);
    init_head(cfg, store, rng);
}

fn init_projector<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, rng: &mut Rng) {
    init_linear(store, "projector.fc1", cfg.enc_dim, cfg.enc_dim, rng);
    init_layer_norm(store, "projector.ln", cfg.enc_dim);
    init_linear(store, "projector.fc2", cfg.enc_dim, cfg.proj_dim, rng);
}

/// Fresh classifier head parameters.
pub fn init_head<S: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<S>, rng: &mut Rng) {
    init_linear(store, "head.fc", cfg.enc_dim, cfg.num_classes, rng);
}

/// Encoder output: `[batch, visible tokens, enc_dim]` plus each block's
/// attention probabilities.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latent: Var,
    pub attention: Vec<Var>,
}

/// Model definition: configuration plus the fixed positional tables.
/// Parameters live in a [`ParamStore`] and are bound per graph.
#[derive(Clone, Debug)]
pub struct Macrl<S> {
    cfg: ModelConfig,
    enc_pos: Tensor<S>,
    dec_pos: Tensor<S>,
}

impl<S: Scalar> Macrl<S> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid();
        Ok(Macrl {
            enc_pos: sincos_pos_embed(cfg.enc_dim, grid),
            dec_pos: sincos_pos_embed(cfg.dec_dim, grid),
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Initial parameters for all four groups.
    pub fn init_params(&self, rng: &mut Rng) -> ParamStore<S> {
        let mut store = ParamStore::new();
        init_all(&self.cfg, &mut store, rng);
        store
    }

    pub fn patchify_batch(&self, images: &[ImageRecord]) -> Result<Tensor<S>> {
        for img in images {
            if img.height != self.cfg.image_size || img.channels != self.cfg.channels {
                return Err(invalid(
                    "encode",
                    format!(
                        "image {}x{}x{} does not match model input {}x{}x{}",
                        img.height,
                        img.width,
                        img.channels,
                        self.cfg.image_size,
                        self.cfg.image_size,
                        self.cfg.channels
                    ),
                ));
            }
        }
        patchify_batch(images, self.cfg.patch_size)
    }

    /// Patch embedding plus positions, masking, the encoder blocks and the
    /// final norm. Only the visible tokens pass through the blocks.
    pub fn encode(
        &self,
        g: &mut Graph<S>,
        b: &Bindings,
        patches: Var,
        plan: &MaskPlan,
    ) -> Result<Encoded> {
        let x = nn::linear(
            g,
            patches,
            b.get("encoder.patch_embed_w")?,
            b.get("encoder.patch_embed_b")?,
        )?;
        let pos = g.constant(self.enc_pos.clone());
        let x = g.add(x, pos)?;
        let mut x = plan.gather_visible(g, x)?;
        let mut attention = Vec::with_capacity(self.cfg.enc_depth);
        for i in 0..self.cfg.enc_depth {
            let p = BlockVars::bind(b, &format!("encoder.blocks.{i}"))?;
            let out = nn::transformer_block(g, x, &p, self.cfg.enc_heads)?;
            x = out.out;
            attention.push(out.attn_weights);
        }
        let latent = nn::layer_norm(
            g,
            x,
            b.get("encoder.norm_gain")?,
            b.get("encoder.norm_bias")?,
            LN_EPS,
        )?;
        Ok(Encoded { latent, attention })
    }

    /// Maps `[batch, keep, enc_dim]` latents back to `[batch, tokens, patch_dim]`
    /// pixel predictions, filling masked positions with the mask token.
    pub fn decode(
        &self,
        g: &mut Graph<S>,
        b: &Bindings,
        latent: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let [batch, keep, _] = *g.shape(latent) else {
            return Err(invalid(
                "decode",
                format!("expected [batch, tokens, dim], got {:?}", g.shape(latent)),
            ));
        };
        if keep != plan.keep_count {
            return Err(invalid(
                "decode",
                format!(
                    "latent has {keep} tokens but the plan keeps {}",
                    plan.keep_count
                ),
            ));
        }
        plan.check_batch(batch, plan.token_count)?;
        let (n, d) = (plan.token_count, self.cfg.dec_dim);
        let mut x = nn::linear(
            g,
            latent,
            b.get("decoder.embed_w")?,
            b.get("decoder.embed_b")?,
        )?;
        let masked = plan.masked_count();
        if masked > 0 {
            let token = g.reshape(b.get("decoder.mask_token")?, &[1, d])?;
            let fill = g.gather_rows(token, vec![0; batch * masked])?;
            let fill = g.reshape(fill, &[batch, masked, d])?;
            x = g.concat(&[x, fill], 1)?;
        }
        let flat = g.reshape(x, &[batch * n, d])?;
        let ordered = g.gather_rows(flat, plan.restore_rows())?;
        let x = g.reshape(ordered, &[batch, n, d])?;
        let pos = g.constant(self.dec_pos.clone());
        let x = g.add(x, pos)?;
        let block = BlockVars::bind(b, "decoder.block")?;
        let x = nn::transformer_block(g, x, &block, self.cfg.dec_heads)?.out;
        Ok(nn::linear(
            g,
            x,
            b.get("decoder.pred_w")?,
            b.get("decoder.pred_b")?,
        )?)
    }

    /// Mean over tokens, `fc1 -> layer norm -> gelu -> fc2`, then L2
    /// normalization: `[batch, tokens, enc_dim] -> [batch, proj_dim]`.
    pub fn project(&self, g: &mut Graph<S>, b: &Bindings, latent: Var) -> Result<Var> {
        let pooled = g.mean_axis(latent, 1)?;
        let h = nn::linear(
            g,
            pooled,
            b.get("projector.fc1_w")?,
            b.get("projector.fc1_b")?,
        )?;
        let h = nn::layer_norm(
            g,
            h,
            b.get("projector.ln_gain")?,
            b.get("projector.ln_bias")?,
            LN_EPS,
        )?;
        let h = g.gelu(h)?;
        let h = nn::linear(g, h, b.get("projector.fc2_w")?, b.get("projector.fc2_b")?)?;
        Ok(g.l2_normalize(h)?)
    }

    /// Unmasked encoding averaged over tokens: `[batch, enc_dim]`.
    pub fn features(&self, g: &mut Graph<S>, b: &Bindings, patches: Var) -> Result<Var> {
        let [batch, n, _] = *g.shape(patches) else {
            return Err(invalid(
                "classify",
                format!("expected [batch, tokens, dim], got {:?}", g.shape(patches)),
            ));
        };
        let plan = MaskPlan::unmasked(batch, n);
        let enc = self.encode(g, b, patches, &plan)?;
        Ok(g.mean_axis(enc.latent, 1)?)
    }

    /// Class logits `[batch, num_classes]` from the unmasked encoder.
    pub fn classify(&self, g: &mut Graph<S>, b: &Bindings, patches: Var) -> Result<Var> {
        let feats = self.features(g, b, patches)?;
        self.head(g, b, feats)
    }

    pub fn head(&self, g: &mut Graph<S>, b: &Bindings, features: Var) -> Result<Var> {
        Ok(nn::linear(
            g,
            features,
            b.get("head.fc_w")?,
            b.get("head.fc_b")?,
        )?)
    }
}
