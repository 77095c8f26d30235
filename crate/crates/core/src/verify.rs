//! Fast invariant checks: codec exactness, audio causality and alignment,
//! audio locality, rotary relativity, gradient correctness, guidance
//! degeneracies, chain anchoring, and cost arithmetic.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{self, AudioEncoderConfig};
use crate::autograd::Graph;
use crate::backbone::{rope_rotate, BackboneConfig, ForwardInput, Model, ModelConfig};
use crate::codec::{compression_stats, decode, encode, tokenize, CodecConfig, LatentGrid, LatentMask, Role, VideoClip};
use crate::conditioning::{rasterize_keypoints, AudioCond, ConditionSet, DropFlags, Keypoint, PoseEncoderConfig};
use crate::cost::cost_report;
use crate::error::Result;
use crate::flow::{chain_clips, chained_length, guided_velocity, item_gradients, item_loss, shift_timestep, ChainInputs, Noised, SampleConfig};
use crate::params::init_normal;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!("[{}] {:<24} {} ({:.2}s)", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail, self.seconds)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check { name, passed, detail, seconds: t0.elapsed().as_secs_f64() }
}

/// Tiny denoiser plus one matching input: 17 frames of 4x4 pixels
/// (3x2x2 latent tokens of 32 channels), width 8, two blocks with adapters.
pub struct Tiny<F> {
    pub model: Model<F>,
    pub x: LatentGrid,
    pub conds: ConditionSet,
    pub frames: usize,
}

pub fn tiny_model_config(codec: &CodecConfig) -> ModelConfig {
    ModelConfig {
        latent_channels: codec.channels(),
        backbone: BackboneConfig {
            width: 8,
            heads: 2,
            blocks: 2,
            adapter_every: 1,
            rope_split: [2, 0, 2],
            head_hidden: 8,
            ..Default::default()
        },
        audio: AudioEncoderConfig { hidden: 6, global_dim: 8, n_local: 2, local_dim: 4, ..Default::default() },
        pose: PoseEncoderConfig { conv1: 2, conv2: 1, sigma: 1.0 },
    }
}

/// Builds the tiny setup. Every parameter (zero-initialised gates and
/// modulation included) gets a random perturbation so all paths are live.
pub fn tiny<F: Scalar>(seed: u64) -> Result<Tiny<F>> {
    let codec = CodecConfig::new(8, 2, 2, 1)?;
    let cfg = tiny_model_config(&codec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<F>::new(cfg, codec, &mut rng)?;
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = *v + F::of(0.3 * z);
        }
    }
    let (tl, hl, wl, c) = (3, 2, 2, 32);
    let normal = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| StandardNormal.sample(rng)).collect::<Vec<f32>>();
    let x = LatentGrid { values: normal(tl * hl * wl * c, &mut rng), ..LatentGrid::zeros(tl, hl, wl, c) };
    let refz = LatentGrid { values: normal(hl * wl * c, &mut rng), ..LatentGrid::zeros(1, hl, wl, c) };
    let frames = 17;
    let mut mask = LatentMask::filled(tl, hl, wl, 1.0);
    for m in mask.values.iter_mut() {
        *m = if rng.gen::<f32>() < 0.4 { 0.0 } else { 1.0 };
    }
    mask.values[0] = 0.0;
    mask.values[1] = 1.0;
    let kps = (0..frames).map(|f| vec![Keypoint { x: 1.0 + (f % 3) as f32, y: 2.0, conf: 1.0 }]).collect::<Vec<_>>();
    let conds = ConditionSet {
        reference: tokenize(&refz, Role::Reference, 6)?,
        audio: AudioCond::Frames(Tensor::new(normal(frames * 4, &mut rng), &[frames, 4])?),
        pose: Some(rasterize_keypoints(&kps, frames, 4, 4, 1.0)),
        face_mask: mask,
        drop: DropFlags::default(),
    };
    Ok(Tiny { model, x, conds, frames })
}

pub fn check_compression() -> Check {
    timed("compression arithmetic", || {
        let r = compression_stats(121, 512, 768, &CodecConfig::ltx())?;
        let ok = (r.t_latent, r.h_latent, r.w_latent, r.tokens, r.pixels_per_token_block) == (16, 16, 24, 6144, 8192);
        Ok((ok, format!("{}x{}x{} = {} tokens, {} px/token", r.t_latent, r.h_latent, r.w_latent, r.tokens, r.pixels_per_token_block)))
    })
}

pub fn check_codec_round_trip(clips: usize, seed: u64) -> Check {
    timed("codec round trip", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f32;
        for i in 0..clips {
            // odd clips use a dense orthonormal projection; keep those small
            let projected = i % 2 == 1;
            let p = [2, 4, 8][rng.gen_range(0..if projected { 2 } else { 3 })];
            let c_px = rng.gen_range(1..=3);
            let mut codec = CodecConfig::new(8, p, p, c_px)?;
            if projected {
                codec = codec.with_random_projection(rng.gen());
            }
            let t = 1 + 8 * rng.gen_range(0..4);
            let (h, w) = (p * rng.gen_range(1..4), p * rng.gen_range(1..4));
            let px = (0..t * h * w * c_px).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let clip = VideoClip::new(px, t, h, w, c_px, 25.0)?;
            let back = decode(&encode(&clip, &codec)?, &codec, 25.0)?;
            let err = clip.pixels.iter().zip(&back.pixels).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            worst = worst.max(err);
        }
        Ok((worst < 1e-5, format!("{clips} clips, max abs error {worst:.2e}")))
    })
}

fn audio_outputs(params: &crate::params::ParamStore<f32>, cfg: &AudioEncoderConfig, feats: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
    let mut g = Graph::new(false);
    let p = params.bind(&mut g, &BTreeSet::new());
    let x = g.constant(feats.clone());
    let h = audio::causal_downsample(&mut g, &p, x);
    let (glo, loc) = audio::audio_heads(&mut g, &p, h, cfg);
    (g.value(glo).clone(), g.value(loc).clone())
}

pub fn check_audio_causality(pairs: usize, seed: u64) -> Check {
    timed("audio causality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AudioEncoderConfig::default();
        let mut params = crate::params::ParamStore::new();
        audio::init_params(&mut params, &cfg, &mut rng);
        let mut checked = 0;
        let mut ok = true;
        for _ in 0..pairs {
            let t = rng.gen_range(2..=121);
            let i = rng.gen_range(0..t);
            let feats: Tensor<f32> = init_normal(&mut rng, &[t, cfg.in_channels], 1.0);
            let mut pert = feats.clone();
            for c in 0..cfg.in_channels {
                pert.data_mut()[i * cfg.in_channels + c] += 1.0 + rng.gen::<f32>();
            }
            let (g0, l0) = audio_outputs(&params, &cfg, &feats);
            let (g1, l1) = audio_outputs(&params, &cfg, &pert);
            let per_loc = cfg.n_local * cfg.local_dim;
            for j in 0..audio::downsampled_len(t) {
                if 8 * j < i {
                    checked += 1;
                    let gw = cfg.global_dim;
                    ok &= g0.data()[j * gw..(j + 1) * gw] == g1.data()[j * gw..(j + 1) * gw];
                    ok &= l0.data()[j * per_loc..(j + 1) * per_loc] == l1.data()[j * per_loc..(j + 1) * per_loc];
                }
            }
        }
        Ok((ok, format!("{pairs} perturbations, {checked} earlier steps bitwise unchanged")))
    })
}

pub fn check_temporal_alignment() -> Check {
    timed("temporal alignment", || {
        let codec = CodecConfig::toy();
        let bad: Vec<usize> =
            (0..=15).map(|k| 1 + 8 * k).filter(|&t| audio::downsampled_len(t) != codec.latent_frames(t)).collect();
        Ok((bad.is_empty(), if bad.is_empty() { "T = 1, 9, ..., 121 all agree".into() } else { format!("mismatch at {bad:?}") }))
    })
}

fn velocity_f64(model: &Model<f64>, x: &LatentGrid, t: f64, conds: &ConditionSet) -> Result<Vec<f64>> {
    let mut g = Graph::new(false);
    let p = model.params.bind(&mut g, &BTreeSet::new());
    let out = crate::backbone::forward(&mut g, &p, &model.cfg, &model.codec, &ForwardInput { x_t: x, t, conds, anchor_frames: 0 })?;
    Ok(g.value(out.velocity).data().to_vec())
}

pub fn check_audio_locality(seed: u64) -> Check {
    timed("audio locality", || {
        let tiny = tiny::<f64>(seed)?;
        let mut other = tiny.conds.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        if let AudioCond::Frames(f) = &mut other.audio {
            f.data_mut().iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        }
        let a = velocity_f64(&tiny.model, &tiny.x, 0.6, &tiny.conds)?;
        let b = velocity_f64(&tiny.model, &tiny.x, 0.6, &other)?;
        let c = tiny.x.c;
        let (mut outside, mut inside) = (0.0f64, 0.0f64);
        for (tok, m) in tiny.conds.face_mask.values.iter().enumerate() {
            let d = (0..c).map(|k| (a[tok * c + k] - b[tok * c + k]).abs()).fold(0.0, f64::max);
            if *m == 0.0 {
                outside = outside.max(d);
            } else {
                inside = inside.max(d);
            }
        }
        Ok((outside == 0.0 && inside > 0.0, format!("max diff outside mask {outside:e}, inside {inside:.3e}")))
    })
}

pub fn check_rope_relative(seed: u64) -> Check {
    timed("rope relative", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, heads, hd) = (24, 2, 16);
        let split = [4, 6, 6];
        let q: Tensor<f64> = init_normal(&mut rng, &[n, heads * hd], 1.0);
        let k: Tensor<f64> = init_normal(&mut rng, &[n, heads * hd], 1.0);
        let coords: Vec<[i64; 3]> =
            (0..n).map(|_| [rng.gen_range(0..20), rng.gen_range(0..16), rng.gen_range(0..24)]).collect();
        let shifted: Vec<[i64; 3]> = coords.iter().map(|c| [c[0] + 5, c[1] + 3, c[2] + 2]).collect();
        let logits = |cs: &[[i64; 3]]| {
            let qr = rope_rotate(&q, cs, heads, split, 10000.0);
            let kr = rope_rotate(&k, cs, heads, split, 10000.0);
            let mut out = Vec::with_capacity(heads * n * n);
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        let (qi, kj) = (&qr.data()[i * heads * hd + h * hd..][..hd], &kr.data()[j * heads * hd + h * hd..][..hd]);
                        out.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                    }
                }
            }
            out
        };
        let worst = logits(&coords).iter().zip(logits(&shifted)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok((worst <= 1e-5, format!("max logit change {worst:.2e} under shift (+5,+3,+2)")))
    })
}

/// Central differences on `samples` random parameter entries of the tiny
/// model in f64. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(seed: u64, samples: usize, floor: f64) -> Result<(f64, usize)> {
    let mut tiny = tiny::<f64>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9d);
    let e: Vec<f32> = (0..tiny.x.values.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let t = 0.55;
    let x_t = LatentGrid { values: tiny.x.values.iter().zip(&e).map(|(a, b)| (1.0 - t as f32) * a + t as f32 * b).collect(), ..tiny.x.clone() };
    let u = LatentGrid { values: tiny.x.values.iter().zip(&e).map(|(a, b)| b - a).collect(), ..tiny.x.clone() };
    let noised = Noised { x_t, u, t, anchor_frames: 0 };
    let lambda = 0.5;
    let (_, grads) = item_gradients(&tiny.model, &BTreeSet::new(), &noised, &tiny.conds, lambda)?;
    let sizes: Vec<usize> = tiny.model.params.iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let name = tiny.model.params.names()[k].clone();
        let orig = tiny.model.params.get(&name).unwrap().data()[flat];
        let mut eval = |v: f64| -> Result<f64> {
            tiny.model.params.get_mut(&name).unwrap().data_mut()[flat] = v;
            Ok(item_loss(&tiny.model, &noised, &tiny.conds, lambda)?.total)
        };
        let num = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        eval(orig)?;
        let ana = grads[k][flat];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok((worst, samples))
}

pub fn check_gradients(seed: u64) -> Check {
    timed("gradient check", || {
        let (worst, n) = gradient_check(seed, 240, 1e-6)?;
        Ok((worst < 1e-5, format!("{n} parameters, max relative error {worst:.2e} (f64)")))
    })
}

pub fn check_cfg_degeneracies(seed: u64) -> Check {
    timed("guidance degeneracies", || {
        let tiny = tiny::<f32>(seed)?;
        let m = &tiny.model;
        let uncond = tiny.conds.unconditional();
        let vc = m.velocity(&ForwardInput { x_t: &tiny.x, t: 0.7, conds: &tiny.conds, anchor_frames: 0 })?;
        let vu = m.velocity(&ForwardInput { x_t: &tiny.x, t: 0.7, conds: &uncond, anchor_frames: 0 })?;
        let g1 = guided_velocity(m, &tiny.x, 0.7, &tiny.conds, &uncond, 1.0, 0)?;
        let g0 = guided_velocity(m, &tiny.x, 0.7, &tiny.conds, &uncond, 0.0, 0)?;
        let shift_ok = shift_timestep(0.0, 17.0) == 0.0
            && shift_timestep(1.0, 17.0) == 1.0
            && (shift_timestep(0.5, 17.0) - 8.5 / 9.0).abs() < 1e-12;
        let ok = g1.values == vc.values && g0.values == vu.values && shift_ok && vc.values != vu.values;
        Ok((ok, format!("g=1 conditional and g=0 unconditional bitwise; shift endpoints {}", if shift_ok { "ok" } else { "wrong" })))
    })
}

/// Three-clip chain on a small model: 33-frame clips of 16x16 pixels.
pub fn check_chain(seed: u64) -> Check {
    timed("chain anchoring", || {
        let codec = CodecConfig::toy();
        let cfg = tiny_model_config(&codec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::<f32>::new(cfg, codec.clone(), &mut rng)?;
        let (frames, h, w, fps) = (33, 16, 16, 25.0);
        let m = 1;
        let total = chained_length(3, frames, codec.r_t, m);
        let env: Vec<f32> = (0..total).map(|f| (f as f32 * 0.3).sin().abs()).collect();
        let audio = crate::synth::synth_audio(&env, fps, 16000.0, 250.0)?;
        let refz = encode(&VideoClip::zeros(1, h, w, 1, fps), &codec)?;
        let conds = ConditionSet {
            reference: tokenize(&refz, Role::Reference, 10)?,
            audio: AudioCond::Frames(Tensor::zeros(&[frames, 4])),
            pose: None,
            face_mask: LatentMask::filled(5, 2, 2, 1.0),
            drop: DropFlags::default(),
        };
        let inputs = ChainInputs { conds: &conds, audio: &audio, frames_per_clip: frames, fps, height: h, width: w };
        let scfg = SampleConfig { motion_frames: m, ..Default::default() };
        let chain = chain_clips(&model, &inputs, &scfg, &mut rng)?;
        let tl = chain.latents[0].t;
        let mut ok = chain.latents.len() == 3 && chain.video.t == total;
        for i in 1..chain.latents.len() {
            for j in 0..m {
                ok &= chain.latents[i].frame_values(j) == chain.latents[i - 1].frame_values(tl - m + j);
            }
        }
        Ok((ok, format!("{} clips, {} frames, anchors bitwise equal", chain.latents.len(), chain.video.t)))
    })
}

pub fn check_cost() -> Check {
    timed("cost model", || {
        let r = cost_report(121, 512, 768, 15, 28)?;
        let ok = (4.0..=16.0).contains(&r.ratio) && r.compressed_tokens == 6144;
        Ok((ok, format!("tokens {} ratio {:.3}", r.compressed_tokens, r.ratio)))
    })
}

/// Every fast check, in a fixed order.
pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check_compression(),
        check_codec_round_trip(100, seed),
        check_audio_causality(50, seed),
        check_temporal_alignment(),
        check_audio_locality(seed),
        check_rope_relative(seed),
        check_gradients(seed),
        check_cfg_degeneracies(seed),
        check_chain(seed),
        check_cost(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_checks_pass() {
        for c in [
            check_compression(),
            check_temporal_alignment(),
            check_audio_locality(1),
            check_rope_relative(1),
            check_cfg_degeneracies(1),
            check_cost(),
        ] {
            assert!(c.passed, "{}", c.line());
        }
    }
}
