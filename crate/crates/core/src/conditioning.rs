//! Conditioning state for one training or sampling call: reference tokens,
//! audio, hand-pose heatmaps, the latent face mask, and per-signal dropout.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatures;
use crate::autograd::{Graph, Var};
use crate::codec::{encode, tokenize, CodecConfig, LatentMask, Mask, Role, TokenSeq, VideoClip};
use crate::error::{Error, Result};
use crate::params::{init_linear, init_normal, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub conf: f32,
}

/// Keypoints per video frame.
pub type KeypointTrack = Vec<Vec<Keypoint>>;

/// Encodes a single-frame image as reference tokens at temporal coordinate
/// `delta`. `delta` must lie outside the noisy range `[0, t_latent)`.
pub fn encode_reference(image: &VideoClip, codec: &CodecConfig, delta: i64, t_latent: usize) -> Result<TokenSeq> {
    if image.t != 1 {
        return Err(Error::Dimension(format!("reference must be one frame, got {}", image.t)));
    }
    if delta < t_latent as i64 {
        return Err(Error::Invalid(format!(
            "reference offset {delta} collides with noisy temporal range 0..{t_latent}"
        )));
    }
    let z = encode(image, codec)?;
    tokenize(&z, Role::Reference, delta)
}

/// Default reference offset: twice the noisy latent length.
pub fn default_reference_offset(t_latent: usize) -> i64 {
    2 * t_latent as i64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEncoderConfig {
    pub conv1: usize,
    pub conv2: usize,
    /// Gaussian width of each rasterised keypoint, pixels.
    pub sigma: f32,
}

impl Default for PoseEncoderConfig {
    fn default() -> Self {
        Self { conv1: 4, conv2: 2, sigma: 2.0 }
    }
}

/// Rasterised keypoint heatmaps, `T x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseHeatmaps {
    pub values: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Keypoints that fell outside the frame and were clamped.
    pub clamped: usize,
}

/// One truncated (3 sigma) Gaussian per keypoint, scaled by confidence.
pub fn rasterize_keypoints(kps: &KeypointTrack, t: usize, h: usize, w: usize, sigma: f32) -> PoseHeatmaps {
    let mut values = vec![0.0f32; t * h * w];
    let mut clamped = 0;
    let r = (3.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (f, points) in kps.iter().enumerate().take(t) {
        for kp in points {
            let mut x = kp.x;
            let mut y = kp.y;
            if !(0.0..=(w - 1) as f32).contains(&x) || !(0.0..=(h - 1) as f32).contains(&y) {
                clamped += 1;
                x = x.clamp(0.0, (w - 1) as f32);
                y = y.clamp(0.0, (h - 1) as f32);
            }
            let (cx, cy) = (x.round() as isize, y.round() as isize);
            for py in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
                for px in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                    let d2 = (px as f32 - x).powi(2) + (py as f32 - y).powi(2);
                    if d2 > (3.0 * sigma).powi(2) {
                        continue;
                    }
                    values[(f * h + py as usize) * w + px as usize] += kp.conf * (-d2 * inv).exp();
                }
            }
        }
    }
    PoseHeatmaps { values, t, h, w, clamped }
}

pub fn init_pose_params<F: Scalar>(
    ps: &mut ParamStore<F>,
    cfg: &PoseEncoderConfig,
    codec: &CodecConfig,
    width: usize,
    rng: &mut impl Rng,
) {
    ps.insert("pose.conv0.w", init_normal(rng, &[cfg.conv1, 1, 3, 3], 1.0 / 3.0));
    ps.insert("pose.conv0.b", Tensor::zeros(&[cfg.conv1]));
    ps.insert("pose.conv1.w", init_normal(rng, &[cfg.conv2, cfg.conv1, 3, 3], 1.0 / (9.0 * cfg.conv1 as f64).sqrt()));
    ps.insert("pose.conv1.b", Tensor::zeros(&[cfg.conv2]));
    let patch = codec.r_t * codec.p_h * codec.p_w * cfg.conv2;
    ps.insert("pose.proj.w", init_linear(rng, patch, width));
    ps.insert("pose.proj.b", Tensor::zeros(&[width]));
}

/// Flat-index map from a `[T, H, W, C]` map to `[tokens, r_t*p_h*p_w*C]`
/// patches using the codec's causal grouping.
pub fn patchify_index(t: usize, h: usize, w: usize, c: usize, codec: &CodecConfig) -> Vec<usize> {
    let (tl, hl, wl) = (codec.latent_frames(t), h / codec.p_h, w / codec.p_w);
    let mut idx = Vec::with_capacity(tl * hl * wl * codec.r_t * codec.p_h * codec.p_w * c);
    for j in 0..tl {
        for by in 0..hl {
            for bx in 0..wl {
                for ft in 0..codec.r_t {
                    let f = codec.source_frame(j, ft);
                    for py in 0..codec.p_h {
                        for px in 0..codec.p_w {
                            let base = ((f * h + by * codec.p_h + py) * w + bx * codec.p_w + px) * c;
                            idx.extend(base..base + c);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Heatmaps → two 3x3 convolutions → causal patchify → linear to width.
/// Returns `[T~ * H~ * W~, width]`.
pub fn encode_pose<F: Scalar>(g: &mut Graph<F>, p: &Bound, heat: &PoseHeatmaps, codec: &CodecConfig) -> Result<Var> {
    if (heat.t - 1) % codec.r_t != 0 || heat.h % codec.p_h != 0 || heat.w % codec.p_w != 0 {
        return Err(Error::Dimension("pose heatmaps incompatible with codec".into()));
    }
    let x = Tensor::new(heat.values.iter().map(|v| F::of(*v as f64)).collect(), &[heat.t, heat.h, heat.w, 1])?;
    let x = g.constant(x);
    let y = g.conv2d_same(x, p.get("pose.conv0.w"), p.get("pose.conv0.b"));
    let y = g.gelu(y);
    let y = g.conv2d_same(y, p.get("pose.conv1.w"), p.get("pose.conv1.b"));
    let c = g.value(y).shape()[3];
    let idx = patchify_index(heat.t, heat.h, heat.w, c, codec);
    let tokens = codec.latent_frames(heat.t) * (heat.h / codec.p_h) * (heat.w / codec.p_w);
    let patch = idx.len() / tokens;
    let patches = g.gather(y, Rc::new(idx), &[tokens, patch]);
    Ok(g.linear(patches, p.get("pose.proj.w"), Some(p.get("pose.proj.b"))))
}

#[derive(Clone, Debug, PartialEq)]
pub enum AudioCond {
    /// Per-frame features `[T, C_in]`, encoded inside the model.
    Frames(Tensor<f32>),
    /// Already-encoded features (used to inject explicit values).
    Features(AudioFeatures),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropFlags {
    pub reference: bool,
    pub audio: bool,
    pub pose: bool,
}

impl DropFlags {
    pub fn all() -> Self {
        Self { reference: true, audio: true, pose: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub reference: TokenSeq,
    pub audio: AudioCond,
    pub pose: Option<PoseHeatmaps>,
    /// One value per noisy token.
    pub face_mask: LatentMask,
    pub drop: DropFlags,
}

impl ConditionSet {
    /// The unconditional counterpart used for guidance: every signal zeroed.
    pub fn unconditional(&self) -> ConditionSet {
        let mut c = self.clone();
        zero_components(&mut c, DropFlags::all());
        c
    }
}

fn zero_components(c: &mut ConditionSet, flags: DropFlags) {
    if flags.reference {
        c.reference.tokens.iter_mut().for_each(|v| *v = 0.0);
        c.drop.reference = true;
    }
    if flags.audio {
        match &mut c.audio {
            AudioCond::Frames(t) => t.data_mut().iter_mut().for_each(|v| *v = 0.0),
            AudioCond::Features(f) => {
                f.a_glo.data_mut().iter_mut().for_each(|v| *v = 0.0);
                f.a_loc.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        c.drop.audio = true;
    }
    if flags.pose {
        if let Some(p) = &mut c.pose {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        c.drop.pose = true;
    }
}

/// Independently drops reference, audio, and pose with probability `prob`.
/// Draw order is fixed (reference, audio, pose).
pub fn apply_dropout(conds: &ConditionSet, prob: f64, rng: &mut impl Rng) -> Result<ConditionSet> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Invalid(format!("dropout probability {prob} outside [0, 1]")));
    }
    let flags = DropFlags {
        reference: rng.gen::<f64>() < prob,
        audio: rng.gen::<f64>() < prob,
        pose: rng.gen::<f64>() < prob,
    };
    let mut out = conds.clone();
    zero_components(&mut out, flags);
    Ok(out)
}

/// Static inference mask: per-pixel max over time, then dilation with a
/// `(2r+1) x (2r+1)` square structuring element, broadcast to every frame.
pub fn build_inference_mask(train_mask: &Mask, dilation_px: usize) -> Mask {
    let (h, w) = (train_mask.h, train_mask.w);
    let mut stat = vec![0.0f32; h * w];
    for t in 0..train_mask.t {
        for (s, v) in stat.iter_mut().zip(&train_mask.values[t * h * w..(t + 1) * h * w]) {
            *s = s.max(*v);
        }
    }
    let r = dilation_px as isize;
    let mut dil = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut m = 0.0f32;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    m = m.max(stat[(yy * w as isize + xx) as usize]);
                }
            }
            dil[(y * w as isize + x) as usize] = m;
        }
    }
    let mut values = Vec::with_capacity(train_mask.values.len());
    for _ in 0..train_mask.t {
        values.extend_from_slice(&dil);
    }
    Mask { values, t: train_mask.t, h, w }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sample_conds() -> ConditionSet {
        let reference = tokenize(&LatentGrid { values: vec![1.0; 4 * 3], ..LatentGrid::zeros(1, 2, 2, 3) }, Role::Reference, 4)
            .unwrap();
        ConditionSet {
            reference,
            audio: AudioCond::Frames(Tensor::full(&[9, 4], 0.5)),
            pose: Some(PoseHeatmaps { values: vec![0.25; 9 * 16 * 16], t: 9, h: 16, w: 16, clamped: 0 }),
            face_mask: LatentMask::filled(2, 2, 2, 1.0),
            drop: DropFlags::default(),
        }
    }

    #[test]
    fn reference_tokens() {
        let codec = CodecConfig::toy();
        let img = VideoClip::zeros(1, 64, 64, 1, 25.0);
        let r = encode_reference(&img, &codec, 10, 5).unwrap();
        assert_eq!(r.len(), 64);
        assert!(r.coords.iter().all(|c| c[0] == 10));
        assert!(r.roles.iter().all(|x| *x == Role::Reference));
        assert!(r.tokens.iter().all(|v| *v == 0.0));
        assert_eq!(r.coords[9], [10, 1, 1]);
        assert!(encode_reference(&img, &codec, 0, 5).is_err());
        assert!(encode_reference(&img, &codec, 4, 5).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let c = sample_conds();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = apply_dropout(&c, 0.0, &mut rng).unwrap();
        assert_eq!(same, c);
        let all = apply_dropout(&c, 1.0, &mut rng).unwrap();
        assert_eq!(all.drop, DropFlags::all());
        assert!(all.reference.tokens.iter().all(|v| *v == 0.0));
        assert!(all.pose.unwrap().values.iter().all(|v| *v == 0.0));
        match all.audio {
            AudioCond::Frames(t) => assert!(t.data().iter().all(|v| *v == 0.0)),
            _ => unreachable!(),
        }
        assert!(apply_dropout(&c, 1.5, &mut rng).is_err());
    }

    #[test]
    fn dropout_rates_are_independent_and_near_target() {
        let c = sample_conds();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let d = apply_dropout(&c, 0.1, &mut rng).unwrap().drop;
            counts[0] += d.reference as usize;
            counts[1] += d.audio as usize;
            counts[2] += d.pose as usize;
        }
        for n in counts {
            let rate = n as f64 / 10_000.0;
            assert!((0.085..=0.115).contains(&rate), "rate {rate}");
        }
    }

    #[test]
    fn inference_mask_examples() {
        let mut m = Mask::filled(3, 9, 9, 0.0);
        assert!(build_inference_mask(&m, 3).values.iter().all(|v| *v == 0.0));
        m.values[(1 * 9 + 4) * 9 + 4] = 1.0;
        m.values[(2 * 9 + 0) * 9 + 8] = 1.0;
        let d0 = build_inference_mask(&m, 0);
        for t in 0..3 {
            for y in 0..9 {
                for x in 0..9 {
                    let want = (0..3).map(|tt| m.at(tt, y, x)).fold(0.0f32, f32::max);
                    assert_eq!(d0.at(t, y, x), want);
                }
            }
        }
        let mut single = Mask::filled(1, 9, 9, 0.0);
        single.values[4 * 9 + 4] = 1.0;
        let d2 = build_inference_mask(&single, 2);
        // brute force: Chebyshev distance <= 2 from (4, 4)
        for y in 0..9i32 {
            for x in 0..9i32 {
                let want = if (y - 4).abs().max((x - 4).abs()) <= 2 { 1.0 } else { 0.0 };
                assert_eq!(d2.at(0, y as usize, x as usize), want);
            }
        }
        assert_eq!(d2.values.iter().sum::<f32>(), 25.0);
        // superset of every training frame
        let d = build_inference_mask(&m, 1);
        for (a, b) in m.values.iter().zip(&d.values) {
            assert!(b >= a);
        }
    }

    #[test]
    fn keypoints_rasterize_and_clamp() {
        let kps = vec![vec![Keypoint { x: 5.0, y: 5.0, conf: 1.0 }], vec![Keypoint { x: 40.0, y: -3.0, conf: 1.0 }]];
        let hm = rasterize_keypoints(&kps, 2, 16, 16, 2.0);
        assert_eq!(hm.clamped, 1);
        assert_eq!(hm.values[5 * 16 + 5], 1.0);
        assert_eq!(hm.values[(16 + 0) * 16 + 15], 1.0);
    }

    fn pose_setup() -> (ParamStore<f64>, CodecConfig) {
        let codec = CodecConfig::toy();
        let mut ps = ParamStore::new();
        init_pose_params(&mut ps, &PoseEncoderConfig::default(), &codec, 8, &mut ChaCha8Rng::seed_from_u64(1));
        // nonzero biases so the "bias response" is non-trivial
        ps.get_mut("pose.conv0.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.1);
        ps.get_mut("pose.proj.b").unwrap().data_mut().iter_mut().for_each(|v| *v = -0.2);
        (ps, codec)
    }

    fn run_pose(ps: &ParamStore<f64>, codec: &CodecConfig, kps: &KeypointTrack) -> Tensor<f64> {
        let hm = rasterize_keypoints(kps, 17, 64, 64, 2.0);
        let mut g = Graph::new(false);
        let p = ps.bind(&mut g, &BTreeSet::new());
        let v = encode_pose(&mut g, &p, &hm, codec).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn pose_encoder_locality() {
        let (ps, codec) = pose_setup();
        let empty: KeypointTrack = vec![vec![]; 17];
        let base = run_pose(&ps, &codec, &empty);
        assert_eq!(base.shape(), &[3 * 64, 8]);
        let mut kps = empty.clone();
        kps[0].push(Keypoint { x: 32.0, y: 32.0, conf: 1.0 });
        let out = run_pose(&ps, &codec, &kps);
        // Gaussian support radius 6 px plus two 3x3 convs → x, y in [24, 40]
        // → blocks 3..=5 on each axis, latent frame 0 only.
        for tok in 0..3 * 64 {
            let (j, by, bx) = (tok / 64, (tok / 8) % 8, tok % 8);
            let changed = base.data()[tok * 8..(tok + 1) * 8] != out.data()[tok * 8..(tok + 1) * 8];
            let may = j == 0 && (3..=5).contains(&by) && (3..=5).contains(&bx);
            if !may {
                assert!(!changed, "token {tok} changed");
            }
        }
        assert!(base.data()[(3 * 8 + 3) * 8..(3 * 8 + 4) * 8] != out.data()[(3 * 8 + 3) * 8..(3 * 8 + 4) * 8]);
        assert_eq!(run_pose(&ps, &codec, &kps), out);
    }

    #[test]
    fn pose_is_causal() {
        let (ps, codec) = pose_setup();
        let mut kps: KeypointTrack = vec![vec![Keypoint { x: 20.0, y: 20.0, conf: 1.0 }]; 17];
        let base = run_pose(&ps, &codec, &kps);
        for i in [1usize, 8, 9, 16] {
            kps[i][0].x += 7.0;
            let out = run_pose(&ps, &codec, &kps);
            kps[i][0].x -= 7.0;
            for j in 0..i.div_ceil(8) {
                assert_eq!(base.data()[j * 64 * 8..(j + 1) * 64 * 8], out.data()[j * 64 * 8..(j + 1) * 64 * 8]);
            }
        }
    }
}
