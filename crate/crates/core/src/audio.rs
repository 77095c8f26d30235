//! Audio front end: a deterministic per-frame feature extractor and the
//! causal audio encoder that compresses frame features to the latent frame
//! rate and emits global and local audio features.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_linear, init_normal, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Number of per-frame statistics produced by [`extract_frame_features`].
pub const FRAME_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f32>,
    pub sample_rate: f32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f32>, sample_rate: f32) -> Result<Self> {
        if sample_rate <= 0.0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Video frames covered at `fps`: `round(S * fps / sample_rate)`.
    pub fn frame_count(&self, fps: f32) -> usize {
        (self.samples.len() as f64 * fps as f64 / self.sample_rate as f64).round() as usize
    }

    /// Sample window `[start, end)` belonging to video frame `t`.
    pub fn frame_window(&self, fps: f32, t: usize) -> (usize, usize) {
        let spf = self.sample_rate as f64 / fps as f64;
        let s = ((t as f64 * spf).round() as usize).min(self.samples.len());
        let e = (((t + 1) as f64 * spf).round() as usize).min(self.samples.len());
        (s, e)
    }

    /// Samples for frames `[start, start + frames)`, zero-padded past the end.
    pub fn slice_frames(&self, fps: f32, start: usize, frames: usize) -> AudioTrack {
        let (s, _) = self.frame_window(fps, start);
        let spf = self.sample_rate as f64 / fps as f64;
        let len = ((start + frames) as f64 * spf).round() as usize - (start as f64 * spf).round() as usize;
        let mut samples: Vec<f32> = self.samples.iter().skip(s).take(len).copied().collect();
        samples.resize(len, 0.0);
        AudioTrack { samples, sample_rate: self.sample_rate }
    }
}

/// Per-frame statistics, row `t` = `[mean |x|, delta of mean |x|, rms,
/// sign-change rate]` over the frame's sample window. The delta of frame 0
/// is taken against itself (zero).
pub fn extract_frame_features(track: &AudioTrack, fps: f32, t: usize) -> Result<Tensor<f32>> {
    if track.samples.is_empty() {
        return Err(Error::Invalid("empty waveform".into()));
    }
    if fps <= 0.0 {
        return Err(Error::Invalid("fps must be positive".into()));
    }
    let mut out = vec![0.0f32; t * FRAME_FEATURES];
    let mut prev_env = None;
    for f in 0..t {
        let (s, e) = track.frame_window(fps, f);
        let w = &track.samples[s..e];
        let (env, rms, zcr) = if w.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let n = w.len() as f64;
            let env = w.iter().map(|x| x.abs() as f64).sum::<f64>() / n;
            let rms = (w.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / n).sqrt();
            let changes = w.windows(2).filter(|p| (p[0] < 0.0) != (p[1] < 0.0) && p[0] != 0.0 && p[1] != 0.0).count();
            (env, rms, changes as f64 / n)
        };
        let delta = env - prev_env.unwrap_or(env);
        prev_env = Some(env);
        out[f * FRAME_FEATURES..(f + 1) * FRAME_FEATURES]
            .copy_from_slice(&[env as f32, delta as f32, rms as f32, zcr as f32]);
    }
    Tensor::new(out, &[t, FRAME_FEATURES])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioEncoderConfig {
    pub in_channels: usize,
    pub hidden: usize,
    /// Width of the global feature (backbone width).
    pub global_dim: usize,
    /// Number of local constituents `n`.
    pub n_local: usize,
    pub local_dim: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self { in_channels: FRAME_FEATURES, hidden: 32, global_dim: 32, n_local: 4, local_dim: 32 }
    }
}

/// Latent frame count after three `ceil(L/2)` layers.
pub fn downsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2).div_ceil(2)
}

/// Registers encoder parameters under `audio.*`.
pub fn init_params<F: Scalar>(ps: &mut ParamStore<F>, cfg: &AudioEncoderConfig, rng: &mut impl Rng) {
    let mut cin = cfg.in_channels;
    for l in 0..3 {
        let std = 1.0 / ((3 * cin) as f64).sqrt();
        ps.insert(&format!("audio.conv{l}.w"), init_normal(rng, &[cfg.hidden, cin, 3], std));
        ps.insert(&format!("audio.conv{l}.b"), Tensor::zeros(&[cfg.hidden]));
        cin = cfg.hidden;
    }
    ps.insert("audio.glo.w", init_linear(rng, cfg.hidden, cfg.global_dim));
    ps.insert("audio.glo.b", Tensor::zeros(&[cfg.global_dim]));
    // n local heads stored side by side: [hidden, n * local_dim]
    ps.insert("audio.loc.w", init_linear(rng, cfg.hidden, cfg.n_local * cfg.local_dim));
    ps.insert("audio.loc.b", Tensor::zeros(&[cfg.n_local * cfg.local_dim]));
    ps.insert("audio.pad", init_normal(rng, &[cfg.local_dim], 0.02));
}

/// Three causal stride-2 convolutions: `[T, C_in]` → `[ceil(T/8), C_h]`.
/// GELU between layers; the last layer is linear.
pub fn causal_downsample<F: Scalar>(g: &mut Graph<F>, p: &Bound, features: Var) -> Var {
    let mut x = features;
    for l in 0..3 {
        x = g.conv1d_causal(x, p.get(&format!("audio.conv{l}.w")), p.get(&format!("audio.conv{l}.b")));
        if l < 2 {
            x = g.gelu(x);
        }
    }
    x
}

/// Global `[T~, C]` and local `[T~ * n, C_a]` (frame-major) features.
pub fn audio_heads<F: Scalar>(g: &mut Graph<F>, p: &Bound, hidden: Var, cfg: &AudioEncoderConfig) -> (Var, Var) {
    let tl = g.value(hidden).rows();
    let glo = g.linear(hidden, p.get("audio.glo.w"), Some(p.get("audio.glo.b")));
    let loc = g.linear(hidden, p.get("audio.loc.w"), Some(p.get("audio.loc.b")));
    let loc = g.reshape(loc, &[tl * cfg.n_local, cfg.local_dim]);
    (glo, loc)
}

/// Appends the learned padding row to every frame:
/// `[T~ * n, C_a]` → `[T~ * (n + 1), C_a]`, frame-major.
pub fn append_padding_token<F: Scalar>(g: &mut Graph<F>, a_loc: Var, pad: Var, n: usize) -> Var {
    let rows = g.value(a_loc).rows();
    let tl = if n == 0 { 0 } else { rows / n };
    append_padding_token_frames(g, a_loc, pad, n, tl)
}

/// As [`append_padding_token`] with an explicit frame count (needed when
/// `n = 0`).
pub fn append_padding_token_frames<F: Scalar>(g: &mut Graph<F>, a_loc: Var, pad: Var, n: usize, frames: usize) -> Var {
    let ca = g.value(pad).len();
    let pad_row = g.reshape(pad, &[1, ca]);
    let stacked = g.concat_rows(&[a_loc, pad_row]);
    let pad_idx = frames * n;
    let mut idx = Vec::with_capacity(frames * (n + 1));
    for j in 0..frames {
        idx.extend((0..n).map(|i| j * n + i));
        idx.push(pad_idx);
    }
    g.gather_rows(stacked, Rc::new(idx))
}

/// Encoded audio for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    /// `[T~, C]`
    pub a_glo: Tensor<f32>,
    /// `[T~, n, C_a]`
    pub a_loc: Tensor<f32>,
}

impl AudioFeatures {
    pub fn zeros(t_latent: usize, cfg: &AudioEncoderConfig) -> Self {
        Self {
            a_glo: Tensor::zeros(&[t_latent, cfg.global_dim]),
            a_loc: Tensor::zeros(&[t_latent, cfg.n_local, cfg.local_dim]),
        }
    }

    pub fn frames(&self) -> usize {
        self.a_glo.shape()[0]
    }
}

/// Gradient-free convenience: frame features → [`AudioFeatures`].
pub fn encode_features(params: &ParamStore<f32>, cfg: &AudioEncoderConfig, features: &Tensor<f32>) -> AudioFeatures {
    let mut g = Graph::new(false);
    let p = params.bind(&mut g, &Default::default());
    let x = g.constant(features.clone());
    let h = causal_downsample(&mut g, &p, x);
    let (glo, loc) = audio_heads(&mut g, &p, h, cfg);
    let tl = g.value(h).rows();
    AudioFeatures {
        a_glo: g.value(glo).clone(),
        a_loc: g.value(loc).clone().reshape(&[tl, cfg.n_local, cfg.local_dim]).unwrap(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sine(amp: f32, freq: f32, sr: f32, n: usize) -> AudioTrack {
        let s = (0..n).map(|i| amp * (2.0 * std::f32::consts::PI * freq * i as f32 / sr).sin()).collect();
        AudioTrack::new(s, sr).unwrap()
    }

    fn params(cfg: &AudioEncoderConfig, seed: u64) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        init_params(&mut ps, cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        ps
    }

    #[test]
    fn silence_gives_zero_features() {
        let tr = AudioTrack::new(vec![0.0; 16000], 16000.0).unwrap();
        let f = extract_frame_features(&tr, 25.0, tr.frame_count(25.0)).unwrap();
        assert_eq!(f.shape(), &[25, 4]);
        assert!(f.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_waveform_is_an_error() {
        let tr = AudioTrack::new(vec![], 16000.0).unwrap();
        assert!(extract_frame_features(&tr, 25.0, 3).is_err());
    }

    #[test]
    fn sine_envelope_is_flat() {
        // 440 Hz at 16 kHz, 640-sample windows: mean |x| of a sine is 2A/pi
        // up to the partial cycle at the window edge.
        let tr = sine(0.5, 440.0, 16000.0, 16000);
        let f = extract_frame_features(&tr, 25.0, 25).unwrap();
        let want = 2.0 * 0.5 / std::f32::consts::PI;
        for t in 1..24 {
            let env = f.data()[t * 4];
            assert!((env - want).abs() / want < 0.05, "frame {t}: {env} vs {want}");
        }
    }

    #[test]
    fn doubling_amplitude_doubles_envelope() {
        let a = extract_frame_features(&sine(0.25, 300.0, 16000.0, 8000), 25.0, 12).unwrap();
        let b = extract_frame_features(&sine(0.5, 300.0, 16000.0, 8000), 25.0, 12).unwrap();
        for t in 0..12 {
            assert_eq!(b.data()[t * 4], 2.0 * a.data()[t * 4]);
        }
    }

    #[test]
    fn downsample_lengths() {
        let cfg = AudioEncoderConfig::default();
        let ps = params(&cfg, 0);
        for (t, want) in [(121, 16), (1, 1), (9, 2), (33, 5)] {
            let mut g = Graph::new(false);
            let p = ps.bind(&mut g, &BTreeSet::new());
            let x = g.constant(Tensor::zeros(&[t, 4]));
            let h = causal_downsample(&mut g, &p, x);
            assert_eq!(g.value(h).shape(), &[want, cfg.hidden]);
            assert_eq!(downsampled_len(t), want);
        }
    }

    #[test]
    fn encoder_is_causal() {
        let cfg = AudioEncoderConfig::default();
        let ps = params(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 41;
        let base: Vec<f64> = (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |x: Vec<f64>| {
            let mut g = Graph::new(false);
            let p = ps.bind(&mut g, &BTreeSet::new());
            let xv = g.constant(Tensor::new(x, &[t, 4]).unwrap());
            let h = causal_downsample(&mut g, &p, xv);
            g.value(h).clone()
        };
        let h0 = run(base.clone());
        for i in 0..t {
            let mut x = base.clone();
            x[i * 4 + 2] += 0.7;
            let h1 = run(x);
            let c = cfg.hidden;
            for j in 0..h0.rows() {
                let same = h0.data()[j * c..(j + 1) * c] == h1.data()[j * c..(j + 1) * c];
                if 8 * j < i {
                    assert!(same, "row {i} leaked into step {j}");
                }
            }
        }
    }

    #[test]
    fn heads_shapes_and_zero_response() {
        let cfg = AudioEncoderConfig { hidden: 8, global_dim: 6, n_local: 4, local_dim: 8, ..Default::default() };
        let ps = params(&cfg, 3);
        let mut g = Graph::new(false);
        let p = ps.bind(&mut g, &BTreeSet::new());
        let h = g.constant(Tensor::zeros(&[16, 8]));
        let (glo, loc) = audio_heads(&mut g, &p, h, &cfg);
        assert_eq!(g.value(glo).shape(), &[16, 6]);
        assert_eq!(g.value(loc).shape(), &[64, 8]);
        // biases start at zero
        assert!(g.value(glo).data().iter().all(|v| *v == 0.0));
        assert!(g.value(loc).data().iter().all(|v| *v == 0.0));
        // distinct hidden rows → distinct global rows
        let h2 = g.constant(Tensor::new((0..16).map(|v| v as f64).collect(), &[2, 8]).unwrap());
        let (glo2, _) = audio_heads(&mut g, &p, h2, &cfg);
        let v = g.value(glo2).data();
        assert_ne!(&v[0..6], &v[6..12]);
    }

    #[test]
    fn padding_token_rows() {
        let mut g = Graph::<f64>::new(false);
        let a_loc = g.constant(Tensor::zeros(&[3 * 4, 2]));
        let pad = g.constant(Tensor::new(vec![1.5, -2.0], &[2]).unwrap());
        let a = append_padding_token(&mut g, a_loc, pad, 4);
        let v = g.value(a);
        assert_eq!(v.shape(), &[15, 2]);
        for j in 0..3 {
            for i in 0..4 {
                assert_eq!(&v.data()[(j * 5 + i) * 2..(j * 5 + i + 1) * 2], &[0.0, 0.0]);
            }
            assert_eq!(&v.data()[(j * 5 + 4) * 2..(j * 5 + 5) * 2], &[1.5, -2.0]);
        }
    }

    #[test]
    fn padding_only_loss_has_no_gradient_to_local_features() {
        // finite differences on a loss reading only the padding rows
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..2 * 3 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pad = vec![0.3, -0.4];
        let loss = |a: &[f64], pad: &[f64], grad: bool| {
            let mut g = Graph::new(grad);
            let av = g.param(Tensor::new(a.to_vec(), &[6, 2]).unwrap());
            let pv = g.param(Tensor::new(pad.to_vec(), &[2]).unwrap());
            let h = append_padding_token(&mut g, av, pv, 3);
            let rows = g.gather_rows(h, Rc::new(vec![3, 7]));
            let l = g.weighted_sq_sum(rows, Rc::new(vec![1.0, 1.0]), 1.0);
            let val = g.value(l).data()[0];
            let grads = g.backward(l);
            (val, grads.get(av).map(|s| s.to_vec()), grads.get(pv).map(|s| s.to_vec()))
        };
        let (_, ga, gp) = loss(&a, &pad, true);
        assert!(ga.unwrap_or_default().iter().all(|v| *v == 0.0));
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += 1e-4;
            let mut am = a.clone();
            am[i] -= 1e-4;
            let fd = (loss(&ap, &pad, false).0 - loss(&am, &pad, false).0) / 2e-4;
            assert_eq!(fd, 0.0);
        }
        // and the padding vector does receive gradient: d/dp sum_{2 rows} p^2 = 4p
        let gp = gp.unwrap();
        assert!((gp[0] - 4.0 * 0.3).abs() < 1e-12);
    }
}
