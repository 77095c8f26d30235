//! Exactly invertible causal spatiotemporal patch codec.
//!
//! Pixel frames are grouped causally: latent frame 0 holds frame 0 alone
//! (replicated `r_t` times to fill the block), latent frame `j >= 1` holds
//! frames `[1 + (j-1) r_t, 1 + j r_t)`. Each `r_t x p_h x p_w x C_px`
//! block is flattened in `(frame, y, x, channel)` order and sent through an
//! orthonormal channel map, so decoding is the transpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Identity,
    /// Row-major `block x block` orthonormal matrix; `latent = P @ block`.
    Orthonormal(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub r_t: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub c_px: usize,
    pub projection: Projection,
}

/// Plain-data codec settings as they appear in run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSettings {
    pub r_t: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub c_px: usize,
    /// `None` keeps the identity map; `Some(seed)` draws a random orthonormal one.
    pub projection_seed: Option<u64>,
}

impl Default for CodecSettings {
    fn default() -> Self {
        Self { r_t: 8, p_h: 8, p_w: 8, c_px: 1, projection_seed: None }
    }
}

impl CodecSettings {
    pub fn build(&self) -> Result<CodecConfig> {
        let base = CodecConfig::new(self.r_t, self.p_h, self.p_w, self.c_px)?;
        Ok(match self.projection_seed {
            Some(seed) => base.with_random_projection(seed),
            None => base,
        })
    }
}

impl CodecConfig {
    pub fn new(r_t: usize, p_h: usize, p_w: usize, c_px: usize) -> Result<Self> {
        if r_t == 0 || p_h == 0 || p_w == 0 || c_px == 0 {
            return Err(Error::Invalid("codec factors must be >= 1".into()));
        }
        Ok(Self { r_t, p_h, p_w, c_px, projection: Projection::Identity })
    }

    /// Small grayscale default used throughout the toy pipeline.
    pub fn toy() -> Self {
        Self::new(8, 8, 8, 1).unwrap()
    }

    /// 8 frames x 32 x 32 pixels per token, RGB.
    pub fn ltx() -> Self {
        Self::new(8, 32, 32, 3).unwrap()
    }

    pub fn block_len(&self) -> usize {
        self.r_t * self.p_h * self.p_w * self.c_px
    }

    /// Latent channel count; equal to the block length (lossless).
    pub fn channels(&self) -> usize {
        self.block_len()
    }

    /// Replaces the identity with a random orthonormal map (Gram-Schmidt on
    /// a Gaussian matrix).
    pub fn with_random_projection(mut self, seed: u64) -> Self {
        let n = self.block_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for i in 0..n {
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
                    for k in 0..n {
                        m[i * n + k] -= dot * m[j * n + k];
                    }
                }
            }
            let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
            for k in 0..n {
                m[i * n + k] /= norm;
            }
        }
        self.projection = Projection::Orthonormal(m);
        self
    }

    /// Largest entry of `|P^T P - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        match &self.projection {
            Projection::Identity => 0.0,
            Projection::Orthonormal(m) => {
                let n = self.block_len();
                let mut worst = 0.0f64;
                for i in 0..n {
                    for j in 0..n {
                        let dot: f64 = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
                        let want = if i == j { 1.0 } else { 0.0 };
                        worst = worst.max((dot - want).abs());
                    }
                }
                worst
            }
        }
    }

    /// Latent frame count for `t` pixel frames: `1 + ceil((t-1)/r_t)`.
    pub fn latent_frames(&self, t: usize) -> usize {
        1 + (t.saturating_sub(1)).div_ceil(self.r_t)
    }

    /// Pixel frame index held by slot `ft` of latent frame `j`.
    pub fn source_frame(&self, j: usize, ft: usize) -> usize {
        if j == 0 {
            0
        } else {
            1 + (j - 1) * self.r_t + ft
        }
    }

    fn project(&self, block: &[f32], out: &mut [f32]) {
        match &self.projection {
            Projection::Identity => out.copy_from_slice(block),
            Projection::Orthonormal(m) => {
                let n = block.len();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..n).map(|k| m[i * n + k] * block[k] as f64).sum::<f64>() as f32;
                }
            }
        }
    }

    fn unproject(&self, latent: &[f32], out: &mut [f32]) {
        match &self.projection {
            Projection::Identity => out.copy_from_slice(latent),
            Projection::Orthonormal(m) => {
                let n = latent.len();
                for (k, o) in out.iter_mut().enumerate() {
                    *o = (0..n).map(|i| m[i * n + k] * latent[i] as f64).sum::<f64>() as f32;
                }
            }
        }
    }
}

/// Dense clip, `T x H x W x C_px`, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub pixels: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub fps: f32,
}

impl VideoClip {
    pub fn new(pixels: Vec<f32>, t: usize, h: usize, w: usize, c: usize, fps: f32) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Dimension("clip dims must be >= 1".into()));
        }
        if pixels.len() != t * h * w * c {
            return Err(Error::Shape(format!("clip {t}x{h}x{w}x{c} needs {} values, got {}", t * h * w * c, pixels.len())));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clip pixels".into()));
        }
        Ok(Self { pixels, t, h, w, c, fps })
    }

    pub fn zeros(t: usize, h: usize, w: usize, c: usize, fps: f32) -> Self {
        Self { pixels: vec![0.0; t * h * w * c], t, h, w, c, fps }
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.pixels[i * n..(i + 1) * n]
    }

    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[((t * self.h + y) * self.w + x) * self.c + c]
    }

    /// Frames `[start, end)` as a new clip.
    pub fn slice_frames(&self, start: usize, end: usize) -> VideoClip {
        let n = self.frame_len();
        VideoClip {
            pixels: self.pixels[start * n..end * n].to_vec(),
            t: end - start,
            h: self.h,
            w: self.w,
            c: self.c,
            fps: self.fps,
        }
    }

    /// Maps every pixel through `f`.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> VideoClip {
        VideoClip { pixels: self.pixels.iter().map(|v| f(*v)).collect(), ..self.clone() }
    }
}

/// Compressed representation, `T~ x H~ x W~ x C`, stored row-major so that
/// the flat layout equals the token layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub values: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub source_dims: (usize, usize, usize),
}

impl LatentGrid {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { values: vec![0.0; t * h * w * c], t, h, w, c, source_dims: (t, h, w) }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.h * self.w
    }

    pub fn token_count(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        (self.t, self.h, self.w, self.c) == (other.t, other.h, other.w, other.c)
    }

    pub fn frame_values(&self, j: usize) -> &[f32] {
        let n = self.h * self.w * self.c;
        &self.values[j * n..(j + 1) * n]
    }

    pub fn frame_values_mut(&mut self, j: usize) -> &mut [f32] {
        let n = self.h * self.w * self.c;
        &mut self.values[j * n..(j + 1) * n]
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f32 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }
}

/// Repeats the final frame until `T' = 1 (mod r_t)`.
pub fn pad_causal(video: &VideoClip, cfg: &CodecConfig) -> VideoClip {
    let target = 1 + (video.t - 1).div_ceil(cfg.r_t) * cfg.r_t;
    let mut out = video.clone();
    let last = video.frame(video.t - 1).to_vec();
    for _ in video.t..target {
        out.pixels.extend_from_slice(&last);
    }
    out.t = target;
    out
}

fn check_video(video: &VideoClip, cfg: &CodecConfig) -> Result<()> {
    if (video.t - 1) % cfg.r_t != 0 {
        return Err(Error::Dimension(format!("T={} is not 1 mod r_t={}", video.t, cfg.r_t)));
    }
    if video.h % cfg.p_h != 0 || video.w % cfg.p_w != 0 {
        return Err(Error::Dimension(format!(
            "{}x{} not divisible by patch {}x{}",
            video.h, video.w, cfg.p_h, cfg.p_w
        )));
    }
    if video.c != cfg.c_px {
        return Err(Error::Dimension(format!("clip has {} channels, codec expects {}", video.c, cfg.c_px)));
    }
    Ok(())
}

pub fn encode(video: &VideoClip, cfg: &CodecConfig) -> Result<LatentGrid> {
    check_video(video, cfg)?;
    let (tl, hl, wl) = (cfg.latent_frames(video.t), video.h / cfg.p_h, video.w / cfg.p_w);
    let c = cfg.channels();
    let mut values = vec![0.0f32; tl * hl * wl * c];
    let mut block = vec![0.0f32; c];
    for j in 0..tl {
        for by in 0..hl {
            for bx in 0..wl {
                let mut k = 0;
                for ft in 0..cfg.r_t {
                    let f = cfg.source_frame(j, ft);
                    for py in 0..cfg.p_h {
                        for px in 0..cfg.p_w {
                            let base = ((f * video.h + by * cfg.p_h + py) * video.w + bx * cfg.p_w + px) * video.c;
                            block[k..k + video.c].copy_from_slice(&video.pixels[base..base + video.c]);
                            k += video.c;
                        }
                    }
                }
                let off = ((j * hl + by) * wl + bx) * c;
                cfg.project(&block, &mut values[off..off + c]);
            }
        }
    }
    Ok(LatentGrid { values, t: tl, h: hl, w: wl, c, source_dims: (video.t, video.h, video.w) })
}

/// Inverse of [`encode`]. Latent frame 0 decodes to the mean of its `r_t`
/// replica slots (identical for encoded clips).
pub fn decode(latent: &LatentGrid, cfg: &CodecConfig, fps: f32) -> Result<VideoClip> {
    if latent.c != cfg.channels() {
        return Err(Error::Shape(format!("latent has {} channels, codec expects {}", latent.c, cfg.channels())));
    }
    if latent.values.len() != latent.t * latent.h * latent.w * latent.c || latent.t == 0 {
        return Err(Error::Shape("latent value count does not match its dims".into()));
    }
    let t = 1 + (latent.t - 1) * cfg.r_t;
    let (h, w, cpx) = (latent.h * cfg.p_h, latent.w * cfg.p_w, cfg.c_px);
    let mut pixels = vec![0.0f32; t * h * w * cpx];
    let mut block = vec![0.0f32; latent.c];
    let inv_r = 1.0 / cfg.r_t as f32;
    for j in 0..latent.t {
        for by in 0..latent.h {
            for bx in 0..latent.w {
                let off = ((j * latent.h + by) * latent.w + bx) * latent.c;
                cfg.unproject(&latent.values[off..off + latent.c], &mut block);
                let mut k = 0;
                for ft in 0..cfg.r_t {
                    let f = cfg.source_frame(j, ft);
                    for py in 0..cfg.p_h {
                        for px in 0..cfg.p_w {
                            let base = ((f * h + by * cfg.p_h + py) * w + bx * cfg.p_w + px) * cpx;
                            for ch in 0..cpx {
                                if j == 0 {
                                    pixels[base + ch] += block[k + ch] * inv_r;
                                } else {
                                    pixels[base + ch] = block[k + ch];
                                }
                            }
                            k += cpx;
                        }
                    }
                }
            }
        }
    }
    VideoClip::new(pixels, t, h, w, cpx, fps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Noisy,
    Reference,
    MotionAnchor,
}

/// Flattened latent tokens in `(t, h, w)` row-major order with RoPE
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq {
    pub tokens: Vec<f32>,
    pub channels: usize,
    pub coords: Vec<[i64; 3]>,
    pub roles: Vec<Role>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.channels..(i + 1) * self.channels]
    }
}

pub fn grid_coords(t: usize, h: usize, w: usize, t_offset: i64) -> Vec<[i64; 3]> {
    let mut coords = Vec::with_capacity(t * h * w);
    for tt in 0..t {
        for hh in 0..h {
            for ww in 0..w {
                coords.push([tt as i64 + t_offset, hh as i64, ww as i64]);
            }
        }
    }
    coords
}

pub fn tokenize(latent: &LatentGrid, role: Role, t_offset: i64) -> Result<TokenSeq> {
    if t_offset < 0 {
        return Err(Error::Invalid("t_offset must be >= 0".into()));
    }
    let coords = grid_coords(latent.t, latent.h, latent.w, t_offset);
    Ok(TokenSeq { tokens: latent.values.clone(), channels: latent.c, roles: vec![role; coords.len()], coords })
}

/// Binary pixel mask, `T x H x W`, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub values: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Mask {
    pub fn new(values: Vec<f32>, t: usize, h: usize, w: usize) -> Result<Self> {
        if values.len() != t * h * w {
            return Err(Error::Shape(format!("mask {t}x{h}x{w} needs {} values", t * h * w)));
        }
        Ok(Self { values, t, h, w })
    }

    pub fn filled(t: usize, h: usize, w: usize, v: f32) -> Self {
        Self { values: vec![v; t * h * w], t, h, w }
    }

    pub fn at(&self, t: usize, y: usize, x: usize) -> f32 {
        self.values[(t * self.h + y) * self.w + x]
    }
}

/// Latent-resolution mask, `T~ x H~ x W~`, one value per token.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask {
    pub values: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentMask {
    pub fn filled(t: usize, h: usize, w: usize, v: f32) -> Self {
        Self { values: vec![v; t * h * w], t, h, w }
    }
}

/// Max-pools a pixel mask over each token's causal block.
pub fn downsample_mask(mask: &Mask, cfg: &CodecConfig) -> Result<LatentMask> {
    if (mask.t - 1) % cfg.r_t != 0 || mask.h % cfg.p_h != 0 || mask.w % cfg.p_w != 0 {
        return Err(Error::Dimension(format!("mask {}x{}x{} incompatible with codec", mask.t, mask.h, mask.w)));
    }
    let (tl, hl, wl) = (cfg.latent_frames(mask.t), mask.h / cfg.p_h, mask.w / cfg.p_w);
    let mut values = vec![0.0f32; tl * hl * wl];
    for j in 0..tl {
        for by in 0..hl {
            for bx in 0..wl {
                let mut m = 0.0f32;
                for ft in 0..cfg.r_t {
                    let f = cfg.source_frame(j, ft);
                    for py in 0..cfg.p_h {
                        for px in 0..cfg.p_w {
                            m = m.max(mask.at(f, by * cfg.p_h + py, bx * cfg.p_w + px));
                        }
                    }
                }
                values[(j * hl + by) * wl + bx] = m;
            }
        }
    }
    Ok(LatentMask { values, t: tl, h: hl, w: wl })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub t_latent: usize,
    pub h_latent: usize,
    pub w_latent: usize,
    pub tokens: usize,
    pub pixels_per_token_block: usize,
    pub effective_ratio: f64,
}

pub fn compression_stats(t: usize, h: usize, w: usize, cfg: &CodecConfig) -> Result<CompressionReport> {
    if t == 0 || h % cfg.p_h != 0 || w % cfg.p_w != 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!("{t}x{h}x{w} incompatible with codec")));
    }
    let (tl, hl, wl) = (cfg.latent_frames(t), h / cfg.p_h, w / cfg.p_w);
    let tokens = tl * hl * wl;
    Ok(CompressionReport {
        t_latent: tl,
        h_latent: hl,
        w_latent: wl,
        tokens,
        pixels_per_token_block: cfg.r_t * cfg.p_h * cfg.p_w,
        effective_ratio: (t * h * w) as f64 / tokens as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, c: usize) -> VideoClip {
        let px = (0..t * h * w * c).map(|_| rng.gen::<f32>()).collect();
        VideoClip::new(px, t, h, w, c, 25.0).unwrap()
    }

    #[test]
    fn pad_causal_examples() {
        let cfg = CodecConfig::toy();
        let v = VideoClip::zeros(10, 8, 8, 1, 25.0);
        let p = pad_causal(&v, &cfg);
        assert_eq!(p.t, 17);
        assert_eq!(pad_causal(&VideoClip::zeros(1, 8, 8, 1, 25.0), &cfg).t, 1);
        assert_eq!(pad_causal(&VideoClip::zeros(121, 8, 8, 1, 25.0), &cfg).t, 121);
        // appended frames repeat the last one
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = random_clip(&mut rng, 10, 8, 8, 1);
        let p = pad_causal(&v, &cfg);
        for f in 10..17 {
            assert_eq!(p.frame(f), v.frame(9));
        }
        // brute-force enumeration of the smallest 1 + 8k >= T
        for t in 1..60usize {
            let want = (0..).map(|k| 1 + 8 * k).find(|&x| x >= t).unwrap();
            assert_eq!(pad_causal(&VideoClip::zeros(t, 8, 8, 1, 25.0), &cfg).t, want);
        }
    }

    #[test]
    fn single_frame_replicates() {
        let cfg = CodecConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_clip(&mut rng, 1, 8, 8, 1);
        let z = encode(&v, &cfg).unwrap();
        assert_eq!((z.t, z.h, z.w, z.c), (1, 1, 1, 512));
        for ft in 0..8 {
            assert_eq!(&z.values[ft * 64..(ft + 1) * 64], v.frame(0));
        }
    }

    #[test]
    fn zero_video_zero_latent_and_back() {
        let cfg = CodecConfig::toy().with_random_projection(3);
        let v = VideoClip::zeros(9, 16, 8, 1, 25.0);
        let z = encode(&v, &cfg).unwrap();
        assert!(z.values.iter().all(|x| *x == 0.0));
        let back = decode(&z, &cfg, 25.0).unwrap();
        assert!(back.pixels.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn ltx_preset_dims() {
        let cfg = CodecConfig::new(8, 32, 32, 1).unwrap();
        let v = VideoClip::zeros(121, 512, 768, 1, 24.0);
        let z = encode(&v, &cfg).unwrap();
        assert_eq!((z.t, z.h, z.w), (16, 16, 24));
        let back = decode(&z, &cfg, 24.0).unwrap();
        assert_eq!((back.t, back.h, back.w), (121, 512, 768));
    }

    #[test]
    fn encode_rejects_bad_dims() {
        let cfg = CodecConfig::toy();
        assert!(encode(&VideoClip::zeros(10, 8, 8, 1, 25.0), &cfg).is_err());
        assert!(encode(&VideoClip::zeros(9, 12, 8, 1, 25.0), &cfg).is_err());
        assert!(encode(&VideoClip::zeros(9, 8, 8, 3, 25.0), &cfg).is_err());
    }

    #[test]
    fn orthonormal_projection_is_orthonormal() {
        let cfg = CodecConfig::new(2, 2, 2, 1).unwrap().with_random_projection(7);
        assert!(cfg.orthonormality_error() < 1e-6);
    }

    #[test]
    fn tokenize_examples() {
        let g = LatentGrid::zeros(16, 16, 24, 4);
        let s = tokenize(&g, Role::Noisy, 0).unwrap();
        assert_eq!(s.len(), 6144);
        assert_eq!(s.coords.first().unwrap()[0], 0);
        assert_eq!(s.coords.last().unwrap()[0], 15);
        let r = tokenize(&LatentGrid::zeros(1, 16, 24, 4), Role::Reference, 32).unwrap();
        assert_eq!(r.len(), 384);
        assert!(r.coords.iter().all(|c| c[0] == 32));
        let one = tokenize(&LatentGrid::zeros(1, 1, 1, 4), Role::Noisy, 5).unwrap();
        assert_eq!(one.coords, vec![[5, 0, 0]]);
        // row-major (t, h, w)
        assert_eq!(s.coords[1], [0, 0, 1]);
        assert_eq!(s.coords[24], [0, 1, 0]);
        assert!(tokenize(&g, Role::Noisy, -1).is_err());
    }

    #[test]
    fn mask_downsampling() {
        let cfg = CodecConfig::toy();
        let ones = Mask::filled(9, 16, 16, 1.0);
        assert!(downsample_mask(&ones, &cfg).unwrap().values.iter().all(|v| *v == 1.0));
        let zeros = Mask::filled(9, 16, 16, 0.0);
        assert!(downsample_mask(&zeros, &cfg).unwrap().values.iter().all(|v| *v == 0.0));
        // single face pixel at frame 5, (y=10, x=3) → latent (1, 1, 0) only
        let mut m = Mask::filled(9, 16, 16, 0.0);
        m.values[(5 * 16 + 10) * 16 + 3] = 1.0;
        let d = downsample_mask(&m, &cfg).unwrap();
        // brute force: latent cell is 1 iff its block contains the pixel
        for j in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    let hit = (0..8).any(|ft| cfg.source_frame(j, ft) == 5) && by == 1 && bx == 0;
                    assert_eq!(d.values[(j * 2 + by) * 2 + bx], if hit { 1.0 } else { 0.0 });
                }
            }
        }
        assert_eq!(d.values.iter().filter(|v| **v == 1.0).count(), 1);
    }

    #[test]
    fn compression_examples() {
        let cfg = CodecConfig::new(8, 32, 32, 1).unwrap();
        let r = compression_stats(121, 512, 768, &cfg).unwrap();
        assert_eq!((r.t_latent, r.h_latent, r.w_latent, r.tokens), (16, 16, 24, 6144));
        assert_eq!(r.pixels_per_token_block, 8192);
        assert_eq!(r.effective_ratio, 7744.0);
        assert_eq!(compression_stats(1, 32, 32, &cfg).unwrap().tokens, 1);
    }

    #[test]
    fn grouping_is_causal() {
        let cfg = CodecConfig::new(4, 4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = random_clip(&mut rng, 13, 8, 8, 1);
        let z = encode(&v, &cfg).unwrap();
        for i in 0..13 {
            let mut p = v.clone();
            for x in p.frame_mut(i) {
                *x += 1.0;
            }
            let zp = encode(&p, &cfg).unwrap();
            for j in 0..z.t {
                let changed = z.frame_values(j) != zp.frame_values(j);
                if j < i.div_ceil(4) {
                    assert!(!changed, "frame {i} leaked into latent {j}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip(seed in 0u64..1000, tk in 0usize..3, hb in 1usize..3, wb in 1usize..3, ortho in any::<bool>()) {
            let mut cfg = CodecConfig::new(4, 4, 4, 1).unwrap();
            if ortho { cfg = cfg.with_random_projection(seed); }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_clip(&mut rng, 1 + 4 * tk, 4 * hb, 4 * wb, 1);
            let z = encode(&v, &cfg).unwrap();
            prop_assert_eq!(z.token_count(), (1 + tk) * hb * wb);
            let back = decode(&z, &cfg, 25.0).unwrap();
            let err = back.pixels.iter().zip(&v.pixels).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            prop_assert!(err < 1e-5);
        }

        #[test]
        fn mask_downsampling_is_monotone(seed in 0u64..1000) {
            let cfg = CodecConfig::new(4, 4, 4, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<f32> = (0..5 * 8 * 8).map(|_| if rng.gen::<f32>() < 0.05 { 1.0 } else { 0.0 }).collect();
            let more: Vec<f32> = base.iter().map(|v| if rng.gen::<f32>() < 0.05 { 1.0 } else { *v }).collect();
            let a = downsample_mask(&Mask::new(base, 5, 8, 8).unwrap(), &cfg).unwrap();
            let b = downsample_mask(&Mask::new(more, 5, 8, 8).unwrap(), &cfg).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!(y >= x);
            }
        }
    }
}
