//! Token counts and relative attention cost for frame-level versus
//! spatiotemporally compressed video pipelines.

use serde::{Deserialize, Serialize};

use crate::codec::{compression_stats, CodecConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    /// Every frame encoded on its own; attention runs within each frame.
    FrameLevel,
    /// Causal 3D compression; one joint attention over all tokens.
    Compressed3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub kind: PipelineKind,
    pub r_t: usize,
    /// Spatial latent factor.
    pub p: usize,
    /// Extra spatial patching before attention (attention tokens are
    /// `(H / (p * attn_patch)) * (W / (p * attn_patch))` per frame).
    pub attn_patch: usize,
    pub steps: usize,
    pub blocks: usize,
}

impl PipelineSpec {
    /// 8x temporal, 32x spatial compression, joint attention.
    pub fn ltx(steps: usize, blocks: usize) -> Self {
        Self { kind: PipelineKind::Compressed3d, r_t: 8, p: 32, attn_patch: 1, steps, blocks }
    }

    /// Image VAE at 8x per frame with 2x2 patching before attention.
    pub fn frame_level(steps: usize, blocks: usize) -> Self {
        Self { kind: PipelineKind::FrameLevel, r_t: 1, p: 8, attn_patch: 2, steps, blocks }
    }

    fn validate(&self) -> Result<()> {
        if self.r_t == 0 || self.p == 0 || self.attn_patch == 0 || self.steps == 0 || self.blocks == 0 {
            return Err(Error::Invalid("pipeline factors, steps, and blocks must be >= 1".into()));
        }
        Ok(())
    }
}

fn divide(n: usize, d: usize, what: &str) -> Result<usize> {
    if n == 0 || n % d != 0 {
        return Err(Error::Dimension(format!("{what} {n} is not a positive multiple of {d}")));
    }
    Ok(n / d)
}

/// Latent token count for a `T x H x W` clip.
pub fn token_count(t: usize, h: usize, w: usize, spec: &PipelineSpec) -> Result<usize> {
    spec.validate()?;
    let spatial = divide(h, spec.p, "height")? * divide(w, spec.p, "width")?;
    match spec.kind {
        PipelineKind::Compressed3d => {
            if t == 0 || (t - 1) % spec.r_t != 0 {
                return Err(Error::Dimension(format!("T = {t} must be 1 + {}k", spec.r_t)));
            }
            Ok((1 + (t - 1) / spec.r_t) * spatial)
        }
        PipelineKind::FrameLevel => {
            if t == 0 {
                return Err(Error::Dimension("T must be >= 1".into()));
            }
            Ok(t * spatial)
        }
    }
}

/// `steps * blocks * tokens^2`.
pub fn attention_cost(tokens: usize, blocks: usize, steps: usize) -> f64 {
    steps as f64 * blocks as f64 * (tokens as f64).powi(2)
}

/// Relative attention cost of one clip under `spec`.
pub fn pipeline_cost(t: usize, h: usize, w: usize, spec: &PipelineSpec) -> Result<f64> {
    token_count(t, h, w, spec)?;
    let f = spec.p * spec.attn_patch;
    let spatial = divide(h, f, "height")? * divide(w, f, "width")?;
    Ok(match spec.kind {
        PipelineKind::Compressed3d => {
            let frames = 1 + (t - 1) / spec.r_t;
            attention_cost(frames * spatial, spec.blocks, spec.steps)
        }
        PipelineKind::FrameLevel => t as f64 * attention_cost(spatial, spec.blocks, spec.steps),
    })
}

/// Observed end-to-end throughput ratio the comparison is checked against.
pub const OBSERVED_FPS_RATIO: f64 = 24.33 / 3.20;

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub dims: (usize, usize, usize),
    pub compressed_tokens: usize,
    pub frame_level_tokens: usize,
    pub compressed_cost: f64,
    pub frame_level_cost: f64,
    pub ratio: f64,
    pub pixels_per_token: usize,
    pub steps: usize,
    pub blocks: usize,
}

pub fn cost_report(t: usize, h: usize, w: usize, steps: usize, blocks: usize) -> Result<CostReport> {
    let comp = PipelineSpec::ltx(steps, blocks);
    let frame = PipelineSpec::frame_level(steps, blocks);
    let compressed_tokens = token_count(t, h, w, &comp)?;
    let stats = compression_stats(t, h, w, &CodecConfig::ltx())?;
    if stats.tokens != compressed_tokens {
        return Err(Error::Invalid(format!("codec reports {} tokens, cost model {}", stats.tokens, compressed_tokens)));
    }
    let compressed_cost = pipeline_cost(t, h, w, &comp)?;
    let frame_level_cost = pipeline_cost(t, h, w, &frame)?;
    Ok(CostReport {
        dims: (t, h, w),
        compressed_tokens,
        frame_level_tokens: token_count(t, h, w, &frame)?,
        compressed_cost,
        frame_level_cost,
        ratio: frame_level_cost / compressed_cost,
        pixels_per_token: stats.pixels_per_token_block,
        steps,
        blocks,
    })
}

impl CostReport {
    /// Header, aligned table, then `key=value` lines.
    pub fn render(&self) -> String {
        let (t, h, w) = self.dims;
        let mut s = String::new();
        s += &format!("# attention cost for a {t}x{h}x{w} clip, {} steps, {} blocks\n", self.steps, self.blocks);
        s += "# compressed-3d: r_t=8, p=32, one joint attention over all latent tokens\n";
        s += "# frame-level:   p=8 image latent per frame, 2x2 patch before attention,\n";
        s += "#                attention within each frame; temporal layers not counted\n";
        s += &format!("{:<15} {:>12} {:>18} {:>10}\n", "pipeline", "tokens", "relative_cost", "vs_3d");
        s += &format!("{:<15} {:>12} {:>18.6e} {:>10.3}\n", "compressed-3d", self.compressed_tokens, self.compressed_cost, 1.0);
        s += &format!("{:<15} {:>12} {:>18.6e} {:>10.3}\n", "frame-level", self.frame_level_tokens, self.frame_level_cost, self.ratio);
        s += &format!("tokens={}\n", self.compressed_tokens);
        s += &format!("pixels_per_token={}\n", self.pixels_per_token);
        s += &format!("frame_level_tokens={}\n", self.frame_level_tokens);
        s += &format!("compressed_cost={:e}\n", self.compressed_cost);
        s += &format!("frame_level_cost={:e}\n", self.frame_level_cost);
        s += &format!("cost_ratio={:.4}\n", self.ratio);
        s += &format!("observed_fps_ratio={:.4}\n", OBSERVED_FPS_RATIO);
        s
    }
}

/// Parses `TxHxW`.
pub fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("bad dims {s:?}, expected TxHxW"))))
        .collect::<Result<_>>()?;
    match parts[..] {
        [t, h, w] => Ok((t, h, w)),
        _ => Err(Error::Invalid(format!("bad dims {s:?}, expected TxHxW"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn token_examples() {
        assert_eq!(token_count(121, 512, 768, &PipelineSpec::ltx(15, 28)).unwrap(), 6144);
        assert_eq!(token_count(1, 32, 32, &PipelineSpec::ltx(15, 28)).unwrap(), 1);
        assert_eq!(token_count(121, 512, 768, &PipelineSpec::frame_level(15, 28)).unwrap(), 743_424);
        assert!(token_count(120, 512, 768, &PipelineSpec::ltx(1, 1)).is_err());
        assert!(token_count(121, 500, 768, &PipelineSpec::ltx(1, 1)).is_err());
    }

    #[test]
    fn cost_laws() {
        assert_eq!(attention_cost(200, 4, 15), 4.0 * attention_cost(100, 4, 15));
        assert_eq!(attention_cost(100, 4, 15), 0.5 * attention_cost(100, 4, 30));
    }

    #[test]
    fn ltx_preset_ratio() {
        let r = cost_report(121, 512, 768, 15, 28).unwrap();
        assert_eq!(r.compressed_tokens, 6144);
        assert_eq!(r.pixels_per_token, 8192);
        // 121 frames of (512/16)(768/16) tokens vs 16*16*24 joint tokens
        assert!((r.ratio - 121.0 / 16.0).abs() < 1e-12);
        assert!((4.0..=16.0).contains(&r.ratio));
        let text = r.render();
        assert!(text.contains("tokens=6144\n"));
        assert!(text.contains("cost_ratio=7.5625\n"));
    }

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims("121x512x768").unwrap(), (121, 512, 768));
        assert!(parse_dims("121x512").is_err());
        assert!(parse_dims("ax1x1").is_err());
    }

    proptest! {
        #[test]
        fn cost_is_monotone(n in 1usize..10_000, l in 1usize..50, s in 1usize..100) {
            let c = attention_cost(n, l, s);
            prop_assert!(attention_cost(n + 1, l, s) > c);
            prop_assert!(attention_cost(n, l + 1, s) > c);
            prop_assert!(attention_cost(n, l, s + 1) > c);
        }
    }
}
