//! Turns rendered clips into model inputs and sampled latents back into
//! pixels. The model works on pixels mapped from `[0, 1]` to `[-1, 1]`.

use crate::audio::{extract_frame_features, AudioTrack};
use crate::backbone::Model;
use crate::codec::{decode, downsample_mask, encode, CodecConfig, LatentGrid, LatentMask, Mask, VideoClip};
use crate::conditioning::{
    build_inference_mask, default_reference_offset, encode_reference, rasterize_keypoints, AudioCond, ConditionSet,
    DropFlags, KeypointTrack,
};
use crate::error::{Error, Result};
use crate::flow::{chain_clips, sample_clip, ChainInputs, Sample, SampleConfig, Stage};
use crate::synth::SynthClip;

pub fn to_model_space(clip: &VideoClip) -> VideoClip {
    clip.map(|v| 2.0 * v - 1.0)
}

pub fn from_model_space(clip: &VideoClip) -> VideoClip {
    clip.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Raw inputs for one clip-length generation.
pub struct ClipInputs<'a> {
    pub reference: &'a VideoClip,
    pub audio: &'a AudioTrack,
    pub keypoints: Option<&'a KeypointTrack>,
    /// Pixel face mask; `None` means every token is a face token.
    pub mask: Option<&'a Mask>,
    pub frames: usize,
    pub fps: f32,
}

pub fn build_conditions(model: &Model<f32>, inp: &ClipInputs<'_>) -> Result<ConditionSet> {
    let codec = &model.codec;
    let tl = codec.latent_frames(inp.frames);
    let (h, w) = (inp.reference.h, inp.reference.w);
    let reference = encode_reference(&to_model_space(inp.reference), codec, default_reference_offset(tl), tl)?;
    let audio = AudioCond::Frames(extract_frame_features(inp.audio, inp.fps, inp.frames)?);
    let pose = inp.keypoints.map(|k| rasterize_keypoints(k, inp.frames, h, w, model.cfg.pose.sigma));
    let face_mask = match inp.mask {
        Some(m) => downsample_mask(m, codec)?,
        None => LatentMask::filled(tl, h / codec.p_h, w / codec.p_w, 1.0),
    };
    Ok(ConditionSet { reference, audio, pose, face_mask, drop: DropFlags::default() })
}

/// Training example for `stage`: the face stage ignores hands and uses an
/// all-ones mask.
pub fn build_sample(model: &Model<f32>, clip: &SynthClip, stage: Stage) -> Result<Sample> {
    let halfbody = stage == Stage::Halfbody;
    let inp = ClipInputs {
        reference: &clip.reference,
        audio: &clip.audio,
        keypoints: halfbody.then_some(&clip.keypoints),
        mask: halfbody.then_some(&clip.mask),
        frames: clip.video.t,
        fps: clip.video.fps,
    };
    let conds = build_conditions(model, &inp)?;
    let x0 = encode(&to_model_space(&clip.video), &model.codec)?;
    Ok(Sample { x0, conds })
}

pub fn latent_shape(codec: &CodecConfig, frames: usize, h: usize, w: usize) -> LatentGrid {
    let mut g = LatentGrid::zeros(codec.latent_frames(frames), h / codec.p_h, w / codec.p_w, codec.channels());
    g.source_dims = (frames, h, w);
    g
}

/// Samples one clip and decodes it to `[0, 1]` pixels.
pub fn generate(model: &Model<f32>, inp: &ClipInputs<'_>, scfg: &SampleConfig, rng: &mut impl rand::Rng) -> Result<VideoClip> {
    let mask = inp.mask.map(|m| build_inference_mask(m, 0));
    let inp = ClipInputs { mask: mask.as_ref(), ..*inp };
    let conds = build_conditions(model, &inp)?;
    let shape = latent_shape(&model.codec, inp.frames, inp.reference.h, inp.reference.w);
    let z = sample_clip(model, &conds, &shape, scfg, None, rng)?;
    Ok(from_model_space(&decode(&z, &model.codec, inp.fps)?))
}

/// Animates the whole audio track: one clip when it fits, otherwise
/// motion-frame chained clips of `frames` each. Pose is per-clip only, so
/// chaining refuses keypoints.
pub fn animate(model: &Model<f32>, inp: &ClipInputs<'_>, scfg: &SampleConfig, rng: &mut impl rand::Rng) -> Result<VideoClip> {
    let total = inp.audio.frame_count(inp.fps);
    if total <= inp.frames {
        return generate(model, &ClipInputs { frames: total, ..*inp }, scfg, rng);
    }
    if inp.keypoints.is_some() {
        return Err(Error::Invalid(format!("keypoints need a single clip ({total} audio frames > {})", inp.frames)));
    }
    let mask = inp.mask.map(|m| build_inference_mask(m, 0));
    let conds = build_conditions(model, &ClipInputs { mask: mask.as_ref(), ..*inp })?;
    let chain = ChainInputs {
        conds: &conds,
        audio: inp.audio,
        frames_per_clip: inp.frames,
        fps: inp.fps,
        height: inp.reference.h,
        width: inp.reference.w,
    };
    Ok(from_model_space(&chain_clips(model, &chain, scfg, rng)?.video))
}
