use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use portrait_core::backbone::Model;
use portrait_core::codec::VideoClip;
use portrait_core::config::RunConfig;
use portrait_core::cost::{cost_report, parse_dims};
use portrait_core::dataset::{animate, ClipInputs};
use portrait_core::flow::Stage;
use portrait_core::io::{self, Checkpoint};
use portrait_core::pipeline::{fresh_model, halfbody_init, stage_corpus, train};
use portrait_core::synth::make_corpus;
use portrait_core::verify::run_all;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "portrait", version, about = "Audio-driven portrait animation toolkit")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run and sampling seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location; defaults depend on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic avatar corpus.
    SynthData {
        /// `halfbody` adds moving hands and keypoints.
        #[arg(long, default_value = "face")]
        stage: Stage,
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Train one stage and write `<out>/<stage>.ck` plus a loss log.
    Train {
        #[arg(long)]
        stage: Stage,
        /// Corpus directory; defaults to `<paths.corpus>/<stage>`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Face checkpoint to start the half-body stage from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Allow the half-body stage without face weights.
        #[arg(long)]
        from_scratch: bool,
        /// Continue from `<out>/<stage>.ck`, optimiser state included.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Animate a reference frame from an audio track.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference image as a one-frame clip file.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        keypoints: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the fast self-checks; exits 2 if any fails.
    Verify,
    /// Attention-cost comparison of frame-level and compressed pipelines.
    Cost {
        #[arg(long, default_value = "ltx")]
        preset: String,
        #[arg(long, default_value = "121x512x768")]
        dims: String,
        #[arg(long, default_value_t = 15)]
        steps: usize,
        #[arg(long, default_value_t = 28)]
        blocks: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| matches!(c.downcast_ref(), Some(portrait_core::Error::NonFinite(_))));
            ExitCode::from(if numeric { EXIT_NUMERIC } else { EXIT_USAGE })
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.sample.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::SynthData { stage, clips } => {
            let mut cc = stage_corpus(&cfg, *stage);
            if let Some(n) = clips {
                cc.clips = *n;
            }
            let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.corpus.join(stage.to_string()));
            let corpus = make_corpus(cfg.seed, &cc)?;
            io::write_corpus(&dir, &corpus, &cc)?;
            println!("wrote {} clips to {}", corpus.len(), dir.display());
        }
        Cmd::Train { stage, corpus, init, from_scratch, resume, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            cfg.train.stage = *stage;
            cfg.validate()?;
            cmd_train(&cfg, cli.out.as_deref(), corpus.as_deref(), init.as_deref(), *from_scratch, *resume)?;
        }
        Cmd::Sample { checkpoint, reference, audio, keypoints, mask, guidance, steps } => {
            if let Some(g) = guidance {
                cfg.sample.guidance = *g;
            }
            if let Some(s) = steps {
                cfg.sample.steps = *s;
            }
            cfg.validate()?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.out.join("sample"));
            let video = cmd_sample(&cfg, checkpoint, reference, audio, keypoints.as_deref(), mask.as_deref())?;
            write_outputs(&out, &video)?;
            println!("wrote {} frames to {}", video.t, out.display());
        }
        Cmd::Verify => {
            let checks = run_all(cfg.seed);
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            if failed > 0 {
                return Ok(ExitCode::from(EXIT_VERIFY));
            }
        }
        Cmd::Cost { preset, dims, steps, blocks } => {
            if preset != "ltx" {
                bail!("unknown preset {preset:?} (available: ltx)");
            }
            let (t, h, w) = parse_dims(dims)?;
            print!("{}", cost_report(t, h, w, *steps, *blocks)?.render());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(
    cfg: &RunConfig,
    out: Option<&Path>,
    corpus: Option<&Path>,
    init: Option<&Path>,
    from_scratch: bool,
    resume: bool,
) -> anyhow::Result<()> {
    let stage = cfg.train.stage;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.out.clone());
    let ck_path = out.join(format!("{stage}.ck"));
    let log_path = out.join(format!("{stage}_loss.log"));
    let hash = cfg.arch_hash();
    let corpus_dir = corpus.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.corpus.join(stage.to_string()));
    if !corpus_dir.join("manifest.txt").exists() {
        bail!("no corpus at {} (run `portrait synth-data --stage {stage}` first)", corpus_dir.display());
    }
    let clips = io::read_corpus(&corpus_dir)?;
    if stage == Stage::Halfbody && clips.iter().any(|c| c.keypoints.iter().all(|k| k.is_empty())) {
        bail!("the half-body stage needs a corpus rendered with hands");
    }
    fs::create_dir_all(&out)?;

    let (model, opt) = if resume {
        let ck = Checkpoint::load_expecting(&ck_path, &hash)?;
        info!("resuming {} at step {}", ck_path.display(), ck.step);
        let mut model = fresh_model(cfg)?;
        model.params = ck.params;
        (model, ck.optimizer)
    } else if stage == Stage::Halfbody && !from_scratch {
        let face = init.map(Path::to_path_buf).unwrap_or_else(|| out.join("face.ck"));
        if !face.exists() {
            bail!(
                "the half-body stage starts from face weights; {} not found (train --stage face first, pass --init, or use --from-scratch)",
                face.display()
            );
        }
        let ck = Checkpoint::load_expecting(&face, &hash)?;
        (halfbody_init(cfg, &ck.params)?, None)
    } else {
        (fresh_model(cfg)?, None)
    };

    let mut log = OpenOptions::new().create(true).write(true).append(resume).truncate(!resume).open(&log_path)?;
    let res = train(cfg, stage, &clips, model, opt, Some(&mut log))?;
    log.flush()?;
    let ck = Checkpoint { config_hash: hash, step: res.optimizer.step, params: res.model.params, optimizer: Some(res.optimizer) };
    ck.save(&ck_path)?;
    if let Some(last) = res.records.last() {
        println!("step {} loss {:.5}", last.step, last.losses.total);
    }
    println!("checkpoint {}", ck_path.display());
    println!("loss log {}", log_path.display());
    Ok(())
}

fn cmd_sample(
    cfg: &RunConfig,
    checkpoint: &Path,
    reference: &Path,
    audio: &Path,
    keypoints: Option<&Path>,
    mask: Option<&Path>,
) -> anyhow::Result<VideoClip> {
    let ck = Checkpoint::load_expecting(checkpoint, &cfg.arch_hash())?;
    let model = Model { cfg: cfg.model()?, codec: cfg.codec()?, params: ck.params };
    let reference = io::read_clip(reference)?;
    let audio = io::read_audio(audio)?;
    let kps = keypoints.map(io::read_keypoints).transpose()?;
    let mask = mask.map(io::read_mask).transpose()?;
    let inp = ClipInputs {
        reference: &reference,
        audio: &audio,
        keypoints: kps.as_ref(),
        mask: mask.as_ref(),
        frames: cfg.corpus.frames,
        fps: reference.fps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample.seed);
    Ok(animate(&model, &inp, &cfg.sample, &mut rng)?)
}

/// `video.vid` plus one PNG per frame.
fn write_outputs(dir: &Path, video: &VideoClip) -> anyhow::Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    io::write_clip(&dir.join("video.vid"), video)?;
    let color = match video.c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => bail!("cannot write {c}-channel frames as images"),
    };
    for t in 0..video.t {
        let buf: Vec<u8> = video.frame(t).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let path = frames.join(format!("frame_{t:04}.png"));
        image::save_buffer(&path, &buf, video.w as u32, video.h as u32, color)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
