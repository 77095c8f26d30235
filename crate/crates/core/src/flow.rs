//! Rectified-flow training and guided Euler sampling.

use std::collections::BTreeSet;
use std::io::Write;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{extract_frame_features, AudioTrack};
use crate::autograd::{Graph, Var};
use crate::backbone::{forward, ForwardInput, Model};
use crate::codec::{decode, LatentGrid, LatentMask, VideoClip};
use crate::conditioning::{apply_dropout, AudioCond, ConditionSet};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, Bound};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Face,
    Halfbody,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(Stage::Face),
            "halfbody" => Ok(Stage::Halfbody),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Face => "face",
            Stage::Halfbody => "halfbody",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Face-loss weight.
    pub lambda: f64,
    pub shift: f64,
    pub dropout: f64,
    pub motion_frames: usize,
    pub motion_prob: f64,
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    /// Final fraction of `steps` over which the learning rate falls
    /// linearly to zero.
    pub warmdown: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            shift: 17.0,
            dropout: 0.1,
            motion_frames: 1,
            motion_prob: 0.25,
            stage: Stage::Face,
            steps: 5000,
            batch: 2,
            warmdown: 0.3,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Learning-rate multiplier for the update after `done` steps.
    pub fn lr_scale(&self, done: u64) -> f64 {
        let tail = self.warmdown * self.steps as f64;
        let left = self.steps as f64 - done as f64;
        if tail <= 0.0 || left >= tail {
            1.0
        } else {
            (left / tail).max(0.0)
        }
    }

    pub fn validate(&self, t_latent: usize) -> Result<()> {
        if self.lambda < 0.0 || self.shift < 1.0 || !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::Config("need lambda >= 0, shift >= 1, dropout in [0, 1]".into()));
        }
        if self.motion_frames >= t_latent {
            return Err(Error::Config(format!("motion frames {} must be < {t_latent}", self.motion_frames)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmdown) {
            return Err(Error::Config("warmdown must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub guidance: f64,
    pub steps: usize,
    pub shift: f64,
    pub motion_frames: usize,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { guidance: 2.5, steps: 15, shift: 17.0, motion_frames: 1, seed: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guidance < 0.0 || self.steps == 0 || self.shift < 1.0 {
            return Err(Error::Config("need guidance >= 0, steps >= 1, shift >= 1".into()));
        }
        Ok(())
    }
}

/// `x_t = (1 - t) x0 + t e`.
pub fn noise_forward(x0: &LatentGrid, e: &LatentGrid, t: f64) -> Result<LatentGrid> {
    if !x0.same_shape(e) {
        return Err(Error::Shape("noise_forward operands differ in shape".into()));
    }
    let (a, b) = ((1.0 - t) as f32, t as f32);
    let values = x0.values.iter().zip(&e.values).map(|(x, n)| a * x + b * n).collect();
    Ok(LatentGrid { values, ..x0.clone() })
}

/// `u = e - x0`.
pub fn velocity_target(x0: &LatentGrid, e: &LatentGrid) -> Result<LatentGrid> {
    if !x0.same_shape(e) {
        return Err(Error::Shape("velocity_target operands differ in shape".into()));
    }
    let values = x0.values.iter().zip(&e.values).map(|(x, n)| n - x).collect();
    Ok(LatentGrid { values, ..x0.clone() })
}

pub fn shift_timestep(u: f64, s: f64) -> f64 {
    s * u / (1.0 + (s - 1.0) * u)
}

/// Descending sampling grid `t_0 = 1 > ... > t_steps = 0`.
pub fn time_grid(steps: usize, s: f64) -> Vec<f64> {
    (0..=steps).map(|k| shift_timestep(1.0 - k as f64 / steps as f64, s)).collect()
}

pub fn standard_normal(like: &LatentGrid, rng: &mut impl Rng) -> LatentGrid {
    let values = (0..like.values.len()).map(|_| StandardNormal.sample(rng)).collect();
    LatentGrid { values, ..like.clone() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub total: f64,
    pub mse: f64,
    pub face: f64,
}

/// Per-token weights excluding the first `anchor_frames` latent frames.
fn included(mask: &LatentMask, anchor_frames: usize) -> Vec<f64> {
    let per = mask.h * mask.w;
    (0..mask.values.len()).map(|i| if i / per < anchor_frames { 0.0 } else { 1.0 }).collect()
}

/// Both terms divide by the number of included entries.
pub fn loss_total(v: &LatentGrid, u: &LatentGrid, mask: &LatentMask, lambda: f64, anchor_frames: usize) -> Result<Losses> {
    if !v.same_shape(u) || mask.values.len() != v.token_count() {
        return Err(Error::Shape("loss operands differ in shape".into()));
    }
    let inc = included(mask, anchor_frames);
    let count = inc.iter().sum::<f64>() * v.c as f64;
    if count == 0.0 {
        return Ok(Losses::default());
    }
    let (mut mse, mut face) = (0.0, 0.0);
    for (tok, w) in inc.iter().enumerate() {
        let sq: f64 = (0..v.c).map(|k| (v.values[tok * v.c + k] as f64 - u.values[tok * v.c + k] as f64).powi(2)).sum();
        mse += w * sq;
        face += w * mask.values[tok] as f64 * sq;
    }
    let (mse, face) = (mse / count, face / count);
    Ok(Losses { total: mse + lambda * face, mse, face })
}

/// One training example: clean latent plus its conditions.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x0: LatentGrid,
    pub conds: ConditionSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: Losses,
    pub t_mean: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("{} {:.6} {:.6} {:.6} {:.4}", self.step, self.losses.total, self.losses.mse, self.losses.face, self.t_mean)
    }
}

/// Noisy input, target and anchor count for one training item.
pub struct Noised {
    pub x_t: LatentGrid,
    pub u: LatentGrid,
    pub t: f64,
    pub anchor_frames: usize,
}

pub fn noise_sample(x0: &LatentGrid, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Noised> {
    let t = shift_timestep(rng.gen::<f64>(), cfg.shift);
    let e = standard_normal(x0, rng);
    let mut x_t = noise_forward(x0, &e, t)?;
    let u = velocity_target(x0, &e)?;
    let anchor_frames = if cfg.motion_frames > 0 && rng.gen::<f64>() < cfg.motion_prob { cfg.motion_frames } else { 0 };
    for j in 0..anchor_frames {
        x_t.frame_values_mut(j).copy_from_slice(x0.frame_values(j));
    }
    Ok(Noised { x_t, u, t, anchor_frames })
}

/// Graph handles for the three loss terms.
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub face: Var,
}

/// Adds the forward pass and loss terms for one item to `g`.
pub fn loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    model: &Model<F>,
    noised: &Noised,
    conds: &ConditionSet,
    lambda: f64,
) -> Result<LossVars> {
    let inp = ForwardInput { x_t: &noised.x_t, t: noised.t, conds, anchor_frames: noised.anchor_frames };
    let out = forward(g, p, &model.cfg, &model.codec, &inp)?;
    let u = &noised.u;
    let uc = g.constant(Tensor::new(u.values.iter().map(|v| F::of(*v as f64)).collect(), &[u.token_count(), u.c])?);
    let diff = g.sub(out.velocity, uc);
    let inc = included(&conds.face_mask, noised.anchor_frames);
    let count = inc.iter().sum::<f64>() * u.c as f64;
    if count == 0.0 {
        return Err(Error::Invalid("every latent frame is an anchor".into()));
    }
    let face_w: Vec<F> = inc.iter().zip(&conds.face_mask.values).map(|(a, m)| F::of(a * *m as f64)).collect();
    let inc: Vec<F> = inc.iter().map(|v| F::of(*v)).collect();
    let mse = g.weighted_sq_sum(diff, Rc::new(inc), F::of(1.0 / count));
    let face = g.weighted_sq_sum(diff, Rc::new(face_w), F::of(1.0 / count));
    let lf = g.scale(face, F::of(lambda));
    let total = g.add(mse, lf);
    Ok(LossVars { total, mse, face })
}

/// Loss and parameter gradients (ordered like the model's parameters)
/// for one item.
pub fn item_gradients<F: Scalar>(
    model: &Model<F>,
    frozen: &BTreeSet<String>,
    noised: &Noised,
    conds: &ConditionSet,
    lambda: f64,
) -> Result<(Losses, Vec<Vec<F>>)> {
    let mut g = Graph::new(true);
    let p = model.params.bind(&mut g, frozen);
    let lv = loss_graph(&mut g, &p, model, noised, conds, lambda)?;
    let losses = Losses {
        total: g.value(lv.total).data()[0].f64(),
        mse: g.value(lv.mse).data()[0].f64(),
        face: g.value(lv.face).data()[0].f64(),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", losses.total)));
    }
    let grads = g.backward(lv.total);
    Ok((losses, model.params.collect_grads(&p, &grads)))
}

/// Loss value only, without building gradients.
pub fn item_loss<F: Scalar>(model: &Model<F>, noised: &Noised, conds: &ConditionSet, lambda: f64) -> Result<Losses> {
    let mut g = Graph::new(false);
    let p = model.params.bind(&mut g, &BTreeSet::new());
    let lv = loss_graph(&mut g, &p, model, noised, conds, lambda)?;
    Ok(Losses {
        total: g.value(lv.total).data()[0].f64(),
        mse: g.value(lv.mse).data()[0].f64(),
        face: g.value(lv.face).data()[0].f64(),
    })
}

/// One optimiser step over `batch`.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    batch: &[Sample],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let frozen = model.frozen();
    let mut sum: Option<Vec<Vec<f32>>> = None;
    let mut rec = StepRecord::default();
    for s in batch {
        let conds = apply_dropout(&s.conds, cfg.dropout, rng)?;
        let noised = noise_sample(&s.x0, cfg, rng)?;
        let (l, grads) = item_gradients(model, &frozen, &noised, &conds, cfg.lambda)?;
        rec.losses.total += l.total;
        rec.losses.mse += l.mse;
        rec.losses.face += l.face;
        rec.t_mean += noised.t;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let n = batch.len() as f32;
    let mut grads = sum.unwrap();
    grads.iter_mut().flatten().for_each(|x| *x /= n);
    let adam = AdamConfig { lr: cfg.adam.lr * cfg.lr_scale(opt.step), ..cfg.adam };
    rec.grad_norm = opt.update(&mut model.params, &grads, &adam)?;
    let nf = batch.len() as f64;
    rec.losses.total /= nf;
    rec.losses.mse /= nf;
    rec.losses.face /= nf;
    rec.t_mean /= nf;
    rec.step = opt.step;
    Ok(rec)
}

/// `v_u + g (v_c - v_u)`; `g = 1` and `g = 0` return the corresponding
/// branch unchanged.
pub fn cfg_combine(v_cond: &LatentGrid, v_uncond: &LatentGrid, g: f64) -> LatentGrid {
    if g == 1.0 {
        return v_cond.clone();
    }
    if g == 0.0 {
        return v_uncond.clone();
    }
    let gf = g as f32;
    let values = v_cond.values.iter().zip(&v_uncond.values).map(|(c, u)| u + gf * (c - u)).collect();
    LatentGrid { values, ..v_cond.clone() }
}

/// Guided velocity at one point.
pub fn guided_velocity(model: &Model<f32>, x: &LatentGrid, t: f64, conds: &ConditionSet, uncond: &ConditionSet, g: f64, anchor_frames: usize) -> Result<LatentGrid> {
    let vc = (g != 0.0).then(|| model.velocity(&ForwardInput { x_t: x, t, conds, anchor_frames })).transpose()?;
    let vu = (g != 1.0).then(|| model.velocity(&ForwardInput { x_t: x, t, conds: uncond, anchor_frames })).transpose()?;
    Ok(match (vc, vu) {
        (Some(c), Some(u)) => cfg_combine(&c, &u, g),
        (Some(c), None) => c,
        (None, Some(u)) => u,
        (None, None) => unreachable!(),
    })
}

/// Euler integration from pure noise at `t = 1` to `t = 0`. Anchors, when
/// given, replace the leading latent frames before and after every step.
pub fn sample_clip(
    model: &Model<f32>,
    conds: &ConditionSet,
    shape: &LatentGrid,
    scfg: &SampleConfig,
    anchors: Option<&[Vec<f32>]>,
    rng: &mut impl Rng,
) -> Result<LatentGrid> {
    scfg.validate()?;
    let mut x = standard_normal(shape, rng);
    let m = anchors.map_or(0, <[Vec<f32>]>::len);
    let impose = |x: &mut LatentGrid| {
        if let Some(a) = anchors {
            for (j, frame) in a.iter().enumerate() {
                x.frame_values_mut(j).copy_from_slice(frame);
            }
        }
    };
    impose(&mut x);
    let uncond = conds.unconditional();
    let grid = time_grid(scfg.steps, scfg.shift);
    for k in 0..scfg.steps {
        let (t, tn) = (grid[k], grid[k + 1]);
        let v = guided_velocity(model, &x, t, conds, &uncond, scfg.guidance, m)?;
        let dt = (tn - t) as f32;
        x.values.iter_mut().zip(&v.values).for_each(|(a, b)| *a += dt * b);
        impose(&mut x);
        if x.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample diverged at t={t}")));
        }
    }
    Ok(x)
}

/// Decoded pixel frames shared by consecutive chained clips.
pub fn chain_overlap(r_t: usize, m: usize) -> usize {
    if m == 0 {
        0
    } else {
        1 + r_t * (m - 1)
    }
}

/// Total decoded length of `clips` chained clips of `frames` each.
pub fn chained_length(clips: usize, frames: usize, r_t: usize, m: usize) -> usize {
    if clips == 0 {
        0
    } else {
        frames + (clips - 1) * (frames - chain_overlap(r_t, m))
    }
}

/// Output of [`chain_clips`].
pub struct Chain {
    pub video: VideoClip,
    pub latents: Vec<LatentGrid>,
}

/// Per-clip condition template: everything except the audio window.
pub struct ChainInputs<'a> {
    pub conds: &'a ConditionSet,
    pub audio: &'a AudioTrack,
    pub frames_per_clip: usize,
    pub fps: f32,
    pub height: usize,
    pub width: usize,
}

/// Splits the audio into clip windows and samples them in order, each clip
/// after the first anchored on the previous clip's last `m` latent frames.
pub fn chain_clips(model: &Model<f32>, inp: &ChainInputs<'_>, scfg: &SampleConfig, rng: &mut impl Rng) -> Result<Chain> {
    let codec = &model.codec;
    let t = inp.frames_per_clip;
    let total = inp.audio.frame_count(inp.fps);
    if total < t {
        return Err(Error::Invalid(format!("audio has {total} frames, one clip needs {t}")));
    }
    let m = scfg.motion_frames;
    let tl = codec.latent_frames(t);
    if m >= tl {
        return Err(Error::Config("motion frames must be fewer than latent frames".into()));
    }
    let hop = t - chain_overlap(codec.r_t, m);
    let clips = if m == 0 { total / t } else { 1 + (total - t) / hop };
    let hop = if m == 0 { t } else { hop };
    let mut shape = LatentGrid::zeros(tl, inp.height / codec.p_h, inp.width / codec.p_w, codec.channels());
    shape.source_dims = (t, inp.height, inp.width);
    let mut latents: Vec<LatentGrid> = Vec::new();
    let mut pixels = Vec::new();
    for i in 0..clips {
        let window = inp.audio.slice_frames(inp.fps, i * hop, t);
        let mut conds = inp.conds.clone();
        conds.audio = AudioCond::Frames(extract_frame_features(&window, inp.fps, t)?);
        let anchors: Option<Vec<Vec<f32>>> =
            latents.last().filter(|_| m > 0).map(|prev| (tl - m..tl).map(|j| prev.frame_values(j).to_vec()).collect());
        let z = sample_clip(model, &conds, &shape, scfg, anchors.as_deref(), rng)?;
        let clip = decode(&z, codec, inp.fps)?;
        let skip = if i == 0 { 0 } else { chain_overlap(codec.r_t, m) };
        pixels.extend_from_slice(&clip.pixels[skip * clip.frame_len()..]);
        latents.push(z);
    }
    let frames = chained_length(clips, t, codec.r_t, m);
    let c = codec.c_px;
    let video = VideoClip::new(pixels, frames, inp.height, inp.width, c, inp.fps)?;
    Ok(Chain { video, latents })
}

/// Appends records as `step L_total L_MSE L_face t_mean` lines.
pub struct LossLog<W: Write> {
    out: W,
}

impl<W: Write> LossLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", rec.log_line())?;
        Ok(())
    }
}

pub fn parse_loss_log(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format(format!("bad loss line {l:?}")))
            };
            if f.len() != 5 {
                return Err(Error::Format(format!("bad loss line {l:?}")));
            }
            Ok(StepRecord {
                step: num(0)? as u64,
                losses: Losses { total: num(1)?, mse: num(2)?, face: num(3)? },
                t_mean: num(4)?,
                grad_norm: 0.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(vals: Vec<f32>, t: usize) -> LatentGrid {
        let c = vals.len() / t;
        LatentGrid { values: vals, ..LatentGrid::zeros(t, 1, 1, c) }
    }

    #[test]
    fn noise_forward_examples() {
        let x0 = grid(vec![0.0; 4], 2);
        let e = grid(vec![2.0; 4], 2);
        assert_eq!(noise_forward(&x0, &e, 0.5).unwrap().values, vec![1.0; 4]);
        let x0 = grid(vec![0.3, -0.2, 1.5, 0.0], 2);
        let e = grid(vec![-1.0, 0.4, 0.2, 2.0], 2);
        assert_eq!(noise_forward(&x0, &e, 0.0).unwrap().values, x0.values);
        assert_eq!(noise_forward(&x0, &e, 1.0).unwrap().values, e.values);
        assert!(noise_forward(&x0, &grid(vec![0.0; 2], 1), 0.5).is_err());
    }

    #[test]
    fn warmdown_schedule() {
        let tc = TrainConfig { steps: 100, warmdown: 0.3, ..Default::default() };
        assert_eq!(tc.lr_scale(0), 1.0);
        assert_eq!(tc.lr_scale(70), 1.0);
        assert!((tc.lr_scale(85) - 0.5).abs() < 1e-12);
        assert!((tc.lr_scale(99) - 1.0 / 30.0).abs() < 1e-12);
        assert_eq!(tc.lr_scale(150), 0.0);
        let flat = TrainConfig { warmdown: 0.0, ..tc };
        assert_eq!(flat.lr_scale(99), 1.0);
    }

    #[test]
    fn velocity_target_examples() {
        let e = grid(vec![-1.0, 0.4, 0.2, 2.0], 2);
        assert_eq!(velocity_target(&grid(vec![0.0; 4], 2), &e).unwrap().values, e.values);
        assert_eq!(velocity_target(&e, &e).unwrap().values, vec![0.0; 4]);
    }

    #[test]
    fn velocity_is_path_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = standard_normal(&LatentGrid::zeros(2, 2, 2, 3), &mut rng);
        let e = standard_normal(&x0, &mut rng);
        let u = velocity_target(&x0, &e).unwrap();
        // f64 oracle of the interpolation path
        let path = |t: f64, i: usize| (1.0 - t) * x0.values[i] as f64 + t * e.values[i] as f64;
        let eps = 1e-6;
        for i in 0..u.values.len() {
            let fd = (path(0.3 + eps, i) - path(0.3, i)) / eps;
            assert!((fd - u.values[i] as f64).abs() < 1e-6 * (1.0 + fd.abs()) * 10.0);
        }
    }

    #[test]
    fn shift_examples() {
        assert_eq!(shift_timestep(0.0, 17.0), 0.0);
        assert_eq!(shift_timestep(1.0, 17.0), 1.0);
        assert!((shift_timestep(0.5, 17.0) - 8.5 / 9.0).abs() < 1e-12);
        for u in [0.1, 0.37, 0.9] {
            assert_eq!(shift_timestep(u, 1.0), u);
        }
        let g = time_grid(15, 17.0);
        assert_eq!((g[0], g[15]), (1.0, 0.0));
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    proptest! {
        #[test]
        fn shift_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, s in 1.0f64..40.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(shift_timestep(lo, s) <= shift_timestep(hi, s));
            prop_assert!(shift_timestep(a, s) >= a - 1e-15);
        }

        #[test]
        fn face_loss_bounded_by_mse(vals in proptest::collection::vec(-3.0f32..3.0, 24), bits in proptest::collection::vec(any::<bool>(), 6)) {
            let v = grid(vals[..12].to_vec(), 3);
            let u = grid(vals[12..].to_vec(), 3);
            let v = LatentGrid { h: 1, w: 2, c: 2, ..v };
            let u = LatentGrid { h: 1, w: 2, c: 2, ..u };
            let mask = LatentMask { values: bits.iter().map(|b| *b as u8 as f32).collect(), t: 3, h: 1, w: 2 };
            let l = loss_total(&v, &u, &mask, 0.0, 0).unwrap();
            prop_assert_eq!(l.total, l.mse);
            prop_assert!(l.face <= l.mse + 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let v = LatentGrid { values: vec![1.0, 2.0, 3.0, 4.0], ..LatentGrid::zeros(2, 1, 1, 2) };
        let u = LatentGrid { values: vec![0.0, 2.0, 1.0, 4.0], ..v.clone() };
        let ones = LatentMask::filled(2, 1, 1, 1.0);
        let zero = LatentMask::filled(2, 1, 1, 0.0);
        let same = loss_total(&v, &v, &ones, 0.5, 0).unwrap();
        assert_eq!(same, Losses::default());
        // squared errors 1, 0, 4, 0 over 4 entries
        let l = loss_total(&v, &u, &zero, 0.5, 0).unwrap();
        assert_eq!((l.mse, l.face, l.total), (1.25, 0.0, 1.25));
        let l = loss_total(&v, &u, &ones, 1.0, 0).unwrap();
        assert_eq!(l.total, 2.0 * l.mse);
        // anchor frame 0 removed: errors 4, 0 over 2 entries
        let l = loss_total(&v, &u, &ones, 0.0, 1).unwrap();
        assert_eq!(l.mse, 2.0);
    }

    #[test]
    fn anchor_targets_do_not_affect_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = standard_normal(&LatentGrid::zeros(3, 2, 2, 4), &mut rng);
        let u = standard_normal(&v, &mut rng);
        let mask = LatentMask::filled(3, 2, 2, 1.0);
        let base = loss_total(&v, &u, &mask, 0.5, 1).unwrap();
        for i in 0..16 {
            let mut p = u.clone();
            p.values[i] += 1e-3;
            assert_eq!(loss_total(&v, &p, &mask, 0.5, 1).unwrap(), base);
        }
    }

    #[test]
    fn cfg_degenerate_scales_are_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = standard_normal(&LatentGrid::zeros(2, 2, 2, 3), &mut rng);
        let b = standard_normal(&a, &mut rng);
        assert_eq!(cfg_combine(&a, &b, 1.0).values, a.values);
        assert_eq!(cfg_combine(&a, &b, 0.0).values, b.values);
        let mid = cfg_combine(&a, &b, 2.5);
        assert!((mid.values[0] - (b.values[0] + 2.5 * (a.values[0] - b.values[0]))).abs() < 1e-6);
    }

    #[test]
    fn overlap_rule() {
        assert_eq!(chain_overlap(8, 1), 1);
        assert_eq!(chain_overlap(8, 2), 9);
        assert_eq!(chained_length(3, 33, 8, 1), 97);
        assert_eq!(chained_length(3, 33, 8, 2), 33 + 2 * 24);
        assert_eq!(chained_length(1, 33, 8, 2), 33);
    }

    #[test]
    fn loss_log_round_trip() {
        let rec = StepRecord { step: 7, losses: Losses { total: 1.5, mse: 1.0, face: 1.0 }, t_mean: 0.9, grad_norm: 2.0 };
        let mut buf = Vec::new();
        LossLog::new(&mut buf).append(&rec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "7 1.500000 1.000000 1.000000 0.9000\n");
        let back = parse_loss_log(&text).unwrap();
        assert_eq!(back[0].step, 7);
        assert_eq!(back[0].losses, rec.losses);
        assert!(parse_loss_log("1 2 3").is_err());
    }
}
