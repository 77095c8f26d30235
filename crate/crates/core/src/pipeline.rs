//! Stage training on a synthetic corpus and held-out scoring.

use std::io::Write;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Model;
use crate::config::RunConfig;
use crate::dataset::{build_sample, generate, ClipInputs};
use crate::error::{Error, Result};
use crate::flow::{train_step, LossLog, SampleConfig, Stage, StepRecord};
use crate::params::{Adam, ParamStore};
use crate::synth::{hand_error, make_clip, mouth_openness, pearson, region_psnr, ClipSeeds, CorpusConfig, SynthClip};

/// Corpus settings for a stage: hands only in the half-body stage.
pub fn stage_corpus(cfg: &RunConfig, stage: Stage) -> CorpusConfig {
    CorpusConfig { hands: stage == Stage::Halfbody, ..cfg.corpus.clone() }
}

pub fn fresh_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Model::new(cfg.model()?, cfg.codec()?, &mut rng)
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub records: Vec<StepRecord>,
}

/// Trains from `model` (fresh or loaded) until the optimiser has taken
/// `cfg.train.steps` steps. Batches are drawn uniformly with replacement.
pub fn train(
    cfg: &RunConfig,
    stage: Stage,
    clips: &[SynthClip],
    mut model: Model<f32>,
    optimizer: Option<Adam<f32>>,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    if clips.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let tc = &cfg.train;
    let samples = clips.iter().map(|c| build_sample(&model, c, stage)).collect::<Result<Vec<_>>>()?;
    tc.validate(samples[0].x0.t)?;
    let mut opt = match optimizer {
        Some(o) if o.matches(&model.params) => o,
        Some(_) => return Err(Error::Checkpoint("optimizer state does not match the model".into())),
        None => Adam::new(&model.params),
    };
    // resuming continues the same stream of draws
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e ^ stage as u64);
    for _ in 0..opt.step {
        for _ in 0..tc.batch {
            rng.gen_range(0..samples.len());
        }
    }
    let mut records = Vec::new();
    let mut logger = log.map(LossLog::new);
    while (opt.step as usize) < tc.steps {
        let batch: Vec<_> = (0..tc.batch).map(|_| samples[rng.gen_range(0..samples.len())].clone()).collect();
        let rec = train_step(&mut model, &mut opt, &batch, tc, &mut rng)?;
        if let Some(l) = logger.as_mut() {
            l.append(&rec)?;
        }
        if rec.step % 250 == 0 {
            info!("step {} loss {:.4} grad {:.3}", rec.step, rec.losses.total, rec.grad_norm);
        }
        records.push(rec);
    }
    Ok(TrainOutcome { model, optimizer: opt, records })
}

/// Held-out clips: fresh audio (and hand) seeds on the training
/// identities.
pub fn heldout_clips(cfg: &RunConfig, stage: Stage) -> Result<Vec<SynthClip>> {
    let cc = stage_corpus(cfg, stage);
    (0..cfg.eval.tracks)
        .map(|i| {
            let mut seeds = ClipSeeds::for_index(cfg.eval.seed, i, 1);
            seeds.identity = ClipSeeds::for_index(cfg.seed, i, cc.identities).identity;
            make_clip(seeds, &cc)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceScores {
    /// Pooled Pearson r between envelope and measured mouth opening;
    /// `None` when the generated mouth never moves.
    pub lip_sync: Option<f64>,
    /// Mean per-clip PSNR outside the head box against the reference.
    pub background_psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandScores {
    pub error: f64,
    pub error_without_pose: f64,
}

fn sample_cfg(cfg: &RunConfig, i: usize) -> SampleConfig {
    SampleConfig { seed: cfg.sample.seed.wrapping_add(i as u64), ..cfg.sample.clone() }
}

fn generate_for(model: &Model<f32>, clip: &SynthClip, scfg: &SampleConfig, stage: Stage, with_pose: bool) -> Result<crate::codec::VideoClip> {
    let half = stage == Stage::Halfbody;
    let kps = clip.keypoints.clone();
    let zero_kps: crate::conditioning::KeypointTrack = vec![Vec::new(); kps.len()];
    let inp = ClipInputs {
        reference: &clip.reference,
        audio: &clip.audio,
        keypoints: half.then_some(if with_pose { &kps } else { &zero_kps }),
        mask: half.then_some(&clip.mask),
        frames: clip.video.t,
        fps: clip.video.fps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scfg.seed);
    generate(model, &inp, scfg, &mut rng)
}

pub fn score_face(model: &Model<f32>, cfg: &RunConfig, clips: &[SynthClip]) -> Result<FaceScores> {
    let (mut env, mut open, mut psnr) = (Vec::new(), Vec::new(), 0.0);
    for (i, clip) in clips.iter().enumerate() {
        let video = generate_for(model, clip, &sample_cfg(cfg, i), Stage::Face, false)?;
        env.extend(clip.envelope.iter().map(|v| *v as f64));
        open.extend(mouth_openness(&video, &clip.avatar).iter().map(|v| *v as f64));
        let a = &clip.avatar;
        psnr += region_psnr(&video, &clip.reference, |y, x| !a.in_head(y, x))?;
    }
    Ok(FaceScores { lip_sync: pearson(&env, &open).ok(), background_psnr: psnr / clips.len() as f64 })
}

/// Hand-dot error with real keypoints and with the pose input zeroed
/// (no keypoints rasterised).
pub fn score_hands(model: &Model<f32>, cfg: &RunConfig, clips: &[SynthClip]) -> Result<HandScores> {
    let (mut with, mut without) = (0.0, 0.0);
    for (i, clip) in clips.iter().enumerate() {
        let scfg = sample_cfg(cfg, i);
        let v = generate_for(model, clip, &scfg, Stage::Halfbody, true)?;
        with += hand_error(&v, &clip.reference, &clip.keypoints, &clip.avatar);
        let v0 = generate_for(model, clip, &scfg, Stage::Halfbody, false)?;
        without += hand_error(&v0, &clip.reference, &clip.keypoints, &clip.avatar);
    }
    let n = clips.len() as f64;
    Ok(HandScores { error: with / n, error_without_pose: without / n })
}

/// Initial parameters for the half-body stage: a fresh model with every
/// matching tensor copied from the face-stage weights.
pub fn halfbody_init(cfg: &RunConfig, face: &ParamStore<f32>) -> Result<Model<f32>> {
    let mut model = fresh_model(cfg)?;
    let copied = model.params.load_matching(face);
    if copied.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "face checkpoint covers {} of {} tensors",
            copied.len(),
            model.params.len()
        )));
    }
    Ok(model)
}
