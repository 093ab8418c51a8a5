//! Vision Transformer over non-overlapping patches, plus attention pooling.

use rand::{Rng, SeedableRng};

use super::{EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::layers::{self, init_block, init_layer_norm, init_linear, init_mlp};
use crate::nn::{init, Graph, ParamStore, Tensor, Var};

pub const POS_EMBED: &str = "image.pos_embed";

/// Per-patch token features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens {
    /// `[G² x D]`, raster order.
    pub features: Tensor,
    pub grid: usize,
}

/// Rearranges an image into `[G² x (p²·C)]` patch rows, raster order; each
/// row lists the patch pixels in `(y, x, channel)` order.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::config(format!(
            "{}x{} image not divisible into {patch}-pixel patches",
            image.height, image.width
        )));
    }
    let (gh, gw, c) = (image.height / patch, image.width / patch, image.channels);
    let dim = patch * patch * c;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let start = ((py * patch + y) * image.width + px * patch) * c;
                out.extend_from_slice(&image.data[start..start + patch * c]);
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, dim, out))
}

/// Inverse of [`patchify`] for a square grid.
pub fn unpatchify(patches: &Tensor, patch: usize, channels: usize) -> Result<Image> {
    let n = patches.rows();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || patches.cols() != patch * patch * channels {
        return Err(Error::config("patch rows do not form a square grid"));
    }
    let side = grid * patch;
    let mut img = Image::filled(side, side, channels, 0.0);
    for (r, row) in (0..n).map(|r| (r, patches.row(r))) {
        let (py, px) = (r / grid, r % grid);
        for y in 0..patch {
            let dst = ((py * patch + y) * side + px * patch) * channels;
            let src = y * patch * channels;
            img.data[dst..dst + patch * channels]
                .copy_from_slice(&row[src..src + patch * channels]);
        }
    }
    Ok(img)
}

pub fn init_image_encoder(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
) -> Result<()> {
    init_linear(store, rng, "image.patch", cfg.patch_dim(), cfg.width)?;
    store.insert(
        POS_EMBED,
        init::normal(rng, &[cfg.n_tokens(), cfg.width], 0.02),
    )?;
    for i in 0..cfg.depth {
        init_block(
            store,
            rng,
            &format!("image.blocks.{i}"),
            cfg.width,
            cfg.mlp_dim,
        )?;
    }
    init_layer_norm(store, "image.ln_final", cfg.width)
}

/// Encodes a batch of images into stacked token rows `[B·G² x D]`.
///
/// In train mode each image independently skips each block with probability
/// `droplayer_rate`. The final layer norm is left to the consumer
/// ([`final_norm`]), so a zero-depth encoder returns patch plus position
/// embeddings.
pub fn encode_images(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &EncoderConfig,
    images: &[&Image],
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Empty("image batch"));
    }
    let t = cfg.n_tokens();
    let mut rows = Vec::with_capacity(images.len() * t * cfg.patch_dim());
    for img in images {
        if img.height != cfg.image_size
            || img.width != cfg.image_size
            || img.channels != cfg.channels
        {
            return Err(Error::config(format!(
                "{}x{}x{} image does not match configured {}x{}x{}",
                img.height, img.width, img.channels, cfg.image_size, cfg.image_size, cfg.channels
            )));
        }
        rows.extend_from_slice(patchify(img, cfg.patch_size)?.data());
    }
    let b = images.len();
    let patches = g.constant(Tensor::matrix(b * t, cfg.patch_dim(), rows));
    let x = layers::linear(g, p, "image.patch", patches)?;
    let pos = g.param(p, POS_EMBED)?;
    if g.shape(pos) != (t, cfg.width) {
        return Err(Error::config(format!(
            "position embedding {:?} does not match {t} tokens of width {}",
            g.shape(pos),
            cfg.width
        )));
    }
    let pos = if b == 1 {
        pos
    } else {
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        g.gather_rows(pos, &idx)
    };
    let mut x = g.add(x, pos);
    for i in 0..cfg.depth {
        let skip: Vec<bool> = match mode {
            Mode::Eval => vec![false; b],
            Mode::Train => (0..b)
                .map(|_| rng.random::<f64>() < cfg.droplayer_rate)
                .collect(),
        };
        x = layers::block(g, p, &format!("image.blocks.{i}"), x, cfg.n_heads, &skip)?;
    }
    if !g.value(x).is_finite() {
        return Err(Error::Numerical("non-finite image tokens".into()));
    }
    Ok(x)
}

/// Final layer norm applied to encoder tokens before any head.
pub fn final_norm(g: &mut Graph, p: &ParamStore, tokens: Var) -> Result<Var> {
    layers::layer_norm(g, p, "image.ln_final", tokens)
}

/// Eval-mode encoding of one image.
pub fn image_tokens(p: &ParamStore, cfg: &EncoderConfig, image: &Image) -> Result<ImageTokens> {
    let mut g = Graph::new();
    // Eval mode draws no randomness; the generator only satisfies the signature.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let x = encode_images(&mut g, p, cfg, &[image], Mode::Eval, &mut rng)?;
    Ok(ImageTokens {
        features: g.value(x).clone(),
        grid: cfg.grid(),
    })
}

/// Bilinear resize of a `G_old x G_old` grid of embeddings to `G_new x G_new`,
/// aligning the corner samples so they are preserved exactly.
pub fn interpolate_pos_embed(pos: &Tensor, g_old: usize, g_new: usize) -> Result<Tensor> {
    if g_new == 0 || g_old == 0 {
        return Err(Error::config("position grid must be nonempty"));
    }
    if pos.rows() != g_old * g_old {
        return Err(Error::config(format!(
            "{} position rows do not form a {g_old}x{g_old} grid",
            pos.rows()
        )));
    }
    let d = pos.cols();
    let coord = |i: usize| -> (usize, usize, f64) {
        if g_new == 1 || g_old == 1 {
            let c = (g_old - 1) as f64 / 2.0;
            let lo = c.floor() as usize;
            return (lo, (lo + 1).min(g_old - 1), c - lo as f64);
        }
        let s = i as f64 * (g_old - 1) as f64 / (g_new - 1) as f64;
        let lo = (s.floor() as usize).min(g_old - 1);
        let hi = (lo + 1).min(g_old - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Tensor::zeros(&[g_new * g_new, d]);
    for y in 0..g_new {
        let (y0, y1, fy) = coord(y);
        for x in 0..g_new {
            let (x0, x1, fx) = coord(x);
            let row = out.row_mut(y * g_new + x);
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (cy, cx, w) in corners {
                if w == 0.0 {
                    continue;
                }
                for (o, v) in row.iter_mut().zip(pos.row(cy * g_old + cx)) {
                    *o += w * v;
                }
            }
        }
    }
    Ok(out)
}

pub fn init_map_pool(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    cfg: &EncoderConfig,
) -> Result<()> {
    store.insert("pool.probe", init::normal(rng, &[1, cfg.width], 0.02))?;
    layers::init_attention(store, rng, "pool.attn", cfg.width)?;
    init_layer_norm(store, "pool.ln", cfg.width)?;
    init_mlp(store, rng, "pool.mlp", cfg.width, cfg.mlp_dim)?;
    init_linear(store, rng, "pool.proj", cfg.width, cfg.shared_dim())
}

/// Multihead attention pooling: one learned probe attends over each image's
/// tokens, followed by a residual MLP and the projection to the shared space.
/// `tokens` holds `n_images` stacked sequences; output is `[n_images x D_shared]`.
pub fn map_pool(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &EncoderConfig,
    tokens: Var,
    n_images: usize,
) -> Result<Var> {
    let x = final_norm(g, p, tokens)?;
    let probe = g.param(p, "pool.probe")?;
    let probes = if n_images == 1 {
        probe
    } else {
        g.gather_rows(probe, &vec![0; n_images])
    };
    let y = layers::segmented_attention(g, p, "pool.attn", probes, x, cfg.n_heads, n_images)?;
    let h = layers::layer_norm(g, p, "pool.ln", y)?;
    let h = layers::mlp(g, p, "pool.mlp", h)?;
    let y = g.add(y, h);
    layers::linear(g, p, "pool.proj", y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand_chacha::ChaCha8Rng;

    fn cfg(depth: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            depth,
            width: 8,
            n_heads: 2,
            mlp_dim: 16,
            text_width: 8,
            text_heads: 2,
            text_mlp_dim: 16,
            text_vocab: 8,
            ..EncoderConfig::default()
        }
    }

    fn random_image(rng: &mut impl Rng, side: usize) -> Image {
        let data = (0..side * side * 3).map(|_| rng.random::<f64>()).collect();
        Image::new(side, side, 3, data).unwrap()
    }

    #[test]
    fn patchify_raster_order() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = patchify(&img, 1).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0]);
        let whole = patchify(&img, 2).unwrap();
        assert_eq!(whole.shape(), &[1, 4]);
        assert_eq!(whole.data(), img.data.as_slice());
    }

    #[test]
    fn unpatchify_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 12);
        let back = unpatchify(&patchify(&img, 4).unwrap(), 4, 3).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = Image::filled(5, 5, 3, 0.0);
        assert!(matches!(patchify(&img, 2), Err(Error::Config(_))));
    }

    #[test]
    fn depth_zero_is_patch_plus_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(0);
        let mut p = ParamStore::new();
        init_image_encoder(&mut p, &mut rng, &c).unwrap();
        let img = random_image(&mut rng, 8);
        let got = image_tokens(&p, &c, &img).unwrap().features;
        let mut want = patchify(&img, 4)
            .unwrap()
            .matmul(p.get("image.patch.w").unwrap());
        for r in 0..want.rows() {
            let b = p.get("image.patch.b").unwrap().row(0).to_vec();
            let pos = p.get(POS_EMBED).unwrap().row(r).to_vec();
            for ((o, b), q) in want.row_mut(r).iter_mut().zip(b).zip(pos) {
                *o += b + q;
            }
        }
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn full_droplayer_equals_depth_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = EncoderConfig {
            droplayer_rate: 1.0,
            ..cfg(3)
        };
        let mut p = ParamStore::new();
        init_image_encoder(&mut p, &mut rng, &c).unwrap();
        let img = random_image(&mut rng, 8);
        let mut g = Graph::new();
        let x = encode_images(&mut g, &p, &c, &[&img], Mode::Train, &mut rng).unwrap();
        let shallow = image_tokens(
            &p,
            &EncoderConfig {
                depth: 0,
                ..c.clone()
            },
            &img,
        )
        .unwrap();
        assert_eq!(g.value(x), &shallow.features);
        let deep = image_tokens(&p, &c, &img).unwrap();
        assert_ne!(deep.features, shallow.features);
    }

    #[test]
    fn eval_is_deterministic_and_batch_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cfg(2);
        let mut p = ParamStore::new();
        init_image_encoder(&mut p, &mut rng, &c).unwrap();
        let a = random_image(&mut rng, 8);
        let b = random_image(&mut rng, 8);
        let ta = image_tokens(&p, &c, &a).unwrap();
        assert_eq!(ta, image_tokens(&p, &c, &a).unwrap());
        let mut g = Graph::new();
        let both = encode_images(&mut g, &p, &c, &[&b, &a], Mode::Eval, &mut rng).unwrap();
        let second = &g.value(both).data()[c.n_tokens() * c.width..];
        assert!(second
            .iter()
            .zip(ta.features.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn nan_params_are_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(1);
        let mut p = ParamStore::new();
        init_image_encoder(&mut p, &mut rng, &c).unwrap();
        p.get_mut(POS_EMBED).unwrap().data_mut()[0] = f64::NAN;
        let img = random_image(&mut rng, 8);
        assert!(matches!(
            image_tokens(&p, &c, &img),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn interpolation_identity_constant_and_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = init::normal(&mut rng, &[9, 4], 1.0);
        assert_eq!(interpolate_pos_embed(&pos, 3, 3).unwrap(), pos);

        let constant = Tensor::full(&[4, 2], 0.7);
        let up = interpolate_pos_embed(&constant, 2, 5).unwrap();
        assert!(up.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        // Channel 0 ramps along x, channel 1 along y.
        let ramp = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 4.0],
            vec![2.0, 4.0],
        ]);
        let up = interpolate_pos_embed(&ramp, 2, 3).unwrap();
        assert_eq!(up.row(1), &[1.0, 0.0]);
        assert_eq!(up.row(3), &[0.0, 2.0]);
        assert_eq!(up.row(4), &[1.0, 2.0]);
    }

    #[test]
    fn interpolation_preserves_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos = init::normal(&mut rng, &[16, 3], 1.0);
        let up = interpolate_pos_embed(&pos, 4, 7).unwrap();
        for (old, new) in [(0, 0), (3, 6), (12, 42), (15, 48)] {
            assert_eq!(up.row(new), pos.row(old));
        }
        assert!(interpolate_pos_embed(&pos, 4, 0).is_err());
    }

    fn pool_params(rng: &mut ChaCha8Rng, c: &EncoderConfig) -> ParamStore {
        let mut p = ParamStore::new();
        init_layer_norm(&mut p, "image.ln_final", c.width).unwrap();
        init_map_pool(&mut p, rng, c).unwrap();
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v += 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        p
    }

    #[test]
    fn map_pool_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(0);
        let p = pool_params(&mut rng, &c);
        let x = init::normal(&mut rng, &[5, 8], 1.0);
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>());
        let pool = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let y = map_pool(&mut g, &p, &c, v, 1).unwrap();
            g.value(y).clone()
        };
        assert!(pool(x).max_abs_diff(&pool(xp)) < 1e-12);
    }

    #[test]
    fn map_pool_single_token_passes_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg(0);
        let mut p = pool_params(&mut rng, &c);
        for proj in ["q", "k", "v", "out"] {
            p.put(format!("pool.attn.{proj}.w"), Tensor::eye(8));
            p.put(format!("pool.attn.{proj}.b"), Tensor::zeros(&[1, 8]));
        }
        p.put("pool.mlp.fc2.w", Tensor::zeros(&[16, 8]));
        p.put("pool.mlp.fc2.b", Tensor::zeros(&[1, 8]));
        p.put("pool.proj.w", Tensor::eye(8));
        p.put("pool.proj.b", Tensor::zeros(&[1, 8]));
        let x = init::normal(&mut rng, &[1, 8], 1.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let normed = final_norm(&mut g, &p, v).unwrap();
        let y = map_pool(&mut g, &p, &c, v, 1).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(normed)) < 1e-12);
    }

    #[test]
    fn map_pool_gradcheck_d8() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cfg(0);
        let mut p = pool_params(&mut rng, &c);
        p.insert("x", init::normal(&mut rng, &[6, 8], 1.0)).unwrap();
        let probe = init::normal(&mut rng, &[2, 8], 1.0);
        let res = gradcheck::check_params(&p, 1e-5, |g, p| {
            let x = g.param(p, "x").unwrap();
            let y = map_pool(g, p, &c, x, 2).unwrap();
            let w = g.constant(probe.clone());
            let prod = g.mul(y, w);
            g.sum(prod)
        });
        assert!(res.max_rel_err <= 1e-4, "{res:?}");
    }
}
