//! Procedural talking-avatar clips and the metrics used to score them.
//!
//! Frames are grayscale in `[0, 1]`. A smooth identity-seeded background
//! surrounds a flat head box with two eyes and a mouth whose height follows
//! the audio envelope. Half-body clips add two bright hand dots moving on
//! Lissajous paths in the side strips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioTrack;
use crate::codec::{Mask, VideoClip};
use crate::conditioning::{Keypoint, KeypointTrack};
use crate::error::{Error, Result};

/// `[y0, x0, y1, x1)` in pixels.
pub type Rect = [usize; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub base: f32,
    /// `(amplitude, fy, fx, phase)` per sinusoid.
    pub waves: Vec<[f32; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandTrack {
    /// Per hand: `(cx, cy, ax, ay, wx, wy, px, py)`; position at frame `t`
    /// is `(cx + ax sin(wx t + px), cy + ay sin(wy t + py))`.
    pub hands: Vec<[f32; 8]>,
    pub radius: f32,
}

impl HandTrack {
    pub fn position(&self, hand: usize, t: usize) -> (f32, f32) {
        let [cx, cy, ax, ay, wx, wy, px, py] = self.hands[hand];
        let t = t as f32;
        (cx + ax * (wx * t + px).sin(), cy + ay * (wy * t + py).sin())
    }

    pub fn keypoints(&self, frames: usize) -> KeypointTrack {
        (0..frames)
            .map(|t| {
                (0..self.hands.len())
                    .map(|h| {
                        let (x, y) = self.position(h, t);
                        Keypoint { x, y, conf: 1.0 }
                    })
                    .collect()
            })
            .collect()
    }

    /// Random track for the default 64x64 layout.
    pub fn random(seed: u64, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a4e_d5);
        let strips = [w as f32 / 8.0, w as f32 * 7.0 / 8.0];
        let hands = strips
            .iter()
            .map(|&cx| {
                [
                    cx,
                    h as f32 * 0.55,
                    w as f32 / 16.0 * rng.gen_range(0.5..1.0),
                    h as f32 * 0.3 * rng.gen_range(0.6..1.0),
                    rng.gen_range(0.15..0.45),
                    rng.gen_range(0.1..0.35),
                    rng.gen_range(0.0..std::f32::consts::TAU),
                    rng.gen_range(0.0..std::f32::consts::TAU),
                ]
            })
            .collect();
        Self { hands, radius: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvatarSpec {
    pub seed: u64,
    pub background: Background,
    pub head: Rect,
    pub face_level: f32,
    pub eye_level: f32,
    /// Mouth rectangle at full opening; the mouth opens downward from
    /// `mouth[0]` and reaches `mouth[2]` at envelope 1.
    pub mouth: Rect,
    pub mouth_level: f32,
    /// Probe window for [`mouth_openness`]; contains `mouth`.
    pub mouth_window: Rect,
}

impl AvatarSpec {
    /// Identity-seeded avatar on the default 64x64 layout (scaled to
    /// `h x w`).
    pub fn from_seed(seed: u64, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sy = |v: usize| v * h / 64;
        let sx = |v: usize| v * w / 64;
        let waves = (0..3)
            .map(|_| {
                [
                    rng.gen_range(0.03..0.09),
                    rng.gen_range(0.02..0.12),
                    rng.gen_range(0.02..0.12),
                    rng.gen_range(0.0..std::f32::consts::TAU),
                ]
            })
            .collect();
        Self {
            seed,
            background: Background { base: rng.gen_range(0.25..0.45), waves },
            head: [sy(4), sx(16), sy(48), sx(48)],
            face_level: rng.gen_range(0.72..0.88),
            eye_level: 0.2,
            mouth: [sy(33), sx(26), sy(40), sx(38)],
            mouth_level: 0.08,
            mouth_window: [sy(32), sx(24), sy(40), sx(40)],
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let inside = |a: &Rect, b: &Rect| a[0] > b[0] && a[1] > b[1] && a[2] < b[2] && a[3] < b[3];
        let [y0, x0, y1, x1] = self.head;
        if !(y0 < y1 && x0 < x1 && y1 <= h && x1 <= w) {
            return Err(Error::Invalid("head box outside frame".into()));
        }
        if !inside(&self.mouth, &self.head) {
            return Err(Error::Invalid("mouth must lie strictly inside the head box".into()));
        }
        let m = &self.mouth;
        let win = &self.mouth_window;
        if m[0] < win[0] || m[1] < win[1] || m[2] > win[2] || m[3] > win[3] || m[2] <= m[0] {
            return Err(Error::Invalid("mouth probe window must contain the mouth".into()));
        }
        Ok(())
    }

    pub fn background_at(&self, y: usize, x: usize) -> f32 {
        let b = &self.background;
        let v = b.base + b.waves.iter().map(|[a, fy, fx, p]| a * (fy * y as f32 + fx * x as f32 + p).sin()).sum::<f32>();
        v.clamp(0.0, 1.0)
    }

    fn in_rect(r: &Rect, y: usize, x: usize) -> bool {
        y >= r[0] && y < r[2] && x >= r[1] && x < r[3]
    }

    pub fn in_head(&self, y: usize, x: usize) -> bool {
        Self::in_rect(&self.head, y, x)
    }

    fn eyes(&self) -> [(f32, f32); 2] {
        let [y0, x0, y1, x1] = self.head;
        let ey = y0 as f32 + (y1 - y0) as f32 * 0.4;
        let (wx, ww) = (x0 as f32, (x1 - x0) as f32);
        [(ey, wx + ww * 0.3), (ey, wx + ww * 0.7)]
    }

    /// Mouth height in rows at full opening.
    pub fn mouth_rows(&self) -> usize {
        self.mouth[2] - self.mouth[0]
    }

    /// Still frame with the mouth closed and no hands.
    pub fn reference_image(&self, h: usize, w: usize, fps: f32) -> VideoClip {
        render_clip(self, &[0.0], None, h, w, fps).0
    }
}

/// Renders `envelope.len()` frames. Returns the clip, the head-box face
/// mask, and per-frame hand keypoints (empty when `hands` is `None`).
pub fn render_clip(avatar: &AvatarSpec, envelope: &[f32], hands: Option<&HandTrack>, h: usize, w: usize, fps: f32) -> (VideoClip, Mask, KeypointTrack) {
    let t = envelope.len();
    let mut still = vec![0.0f32; h * w];
    let eyes = avatar.eyes();
    for y in 0..h {
        for x in 0..w {
            still[y * w + x] = if avatar.in_head(y, x) {
                let near_eye = eyes.iter().any(|(ey, ex)| (y as f32 - ey).powi(2) + (x as f32 - ex).powi(2) <= 2.0);
                if near_eye {
                    avatar.eye_level
                } else {
                    avatar.face_level
                }
            } else {
                avatar.background_at(y, x)
            };
        }
    }
    let mut clip = VideoClip::zeros(t, h, w, 1, fps);
    let [my0, mx0, _, mx1] = avatar.mouth;
    let rows = avatar.mouth_rows() as f32;
    for (f, &e) in envelope.iter().enumerate() {
        let frame = clip.frame_mut(f);
        frame.copy_from_slice(&still);
        let open = e.clamp(0.0, 1.0) * rows;
        for r in 0..avatar.mouth_rows() {
            let cover = (open - r as f32).clamp(0.0, 1.0);
            if cover == 0.0 {
                break;
            }
            for x in mx0..mx1 {
                let px = &mut frame[(my0 + r) * w + x];
                *px = *px * (1.0 - cover) + avatar.mouth_level * cover;
            }
        }
        if let Some(track) = hands {
            for hand in 0..track.hands.len() {
                let (cx, cy) = track.position(hand, f);
                draw_disc(frame, h, w, cx, cy, track.radius);
            }
        }
    }
    let mut mask = Mask::filled(t, h, w, 0.0);
    for f in 0..t {
        for y in avatar.head[0]..avatar.head[2] {
            for x in avatar.head[1]..avatar.head[3] {
                mask.values[(f * h + y) * w + x] = 1.0;
            }
        }
    }
    let kps = hands.map(|tr| tr.keypoints(t)).unwrap_or_else(|| vec![Vec::new(); t]);
    (clip, mask, kps)
}

/// Anti-aliased bright disc (2x2 supersampling).
fn draw_disc(frame: &mut [f32], h: usize, w: usize, cx: f32, cy: f32, r: f32) {
    let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + r + 1.0).ceil() as usize).min(h - 1);
    let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + r + 1.0).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let mut cover = 0.0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (py, px) = (y as f32 + dy - 0.5, x as f32 + dx - 0.5);
                if (py - cy).powi(2) + (px - cx).powi(2) <= r * r {
                    cover += 0.25;
                }
            }
            let p = &mut frame[y * w + x];
            *p = *p * (1.0 - cover) + cover;
        }
    }
}

/// Per-frame mouth opening in `[0, 1]`: total darkness inside the probe
/// window relative to a fully open mouth.
pub fn mouth_openness(video: &VideoClip, avatar: &AvatarSpec) -> Vec<f32> {
    let [y0, x0, y1, x1] = avatar.mouth_window;
    let span = avatar.face_level - avatar.mouth_level;
    let full = (avatar.mouth_rows() * (avatar.mouth[3] - avatar.mouth[1])) as f32;
    (0..video.t)
        .map(|f| {
            let mut dark = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    dark += ((avatar.face_level - video.at(f, y, x, 0)) / span).clamp(0.0, 1.0);
                }
            }
            dark / full
        })
        .collect()
}

/// Random speech-like envelope: knots every 4 frames, a quarter of them
/// silent, linearly interpolated.
pub fn random_envelope(seed: u64, frames: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4e1_09e);
    let hop = 4;
    let knots: Vec<f32> =
        (0..frames / hop + 2).map(|_| if rng.gen::<f32>() < 0.25 { 0.0 } else { rng.gen_range(0.1..1.0) }).collect();
    (0..frames)
        .map(|f| {
            let (k, r) = (f / hop, (f % hop) as f32 / hop as f32);
            knots[k] * (1.0 - r) + knots[k + 1] * r
        })
        .collect()
}

/// Envelope-modulated sine carrier, the envelope held constant within each
/// video frame. The carrier completes a whole number of cycles per frame.
pub fn synth_audio(envelope: &[f32], fps: f32, sample_rate: f32, carrier_hz: f32) -> Result<AudioTrack> {
    let per = (sample_rate / fps).round() as usize;
    let mut samples = Vec::with_capacity(per * envelope.len());
    for (f, e) in envelope.iter().enumerate() {
        for i in 0..per {
            let n = (f * per + i) as f32;
            samples.push(e * (std::f32::consts::TAU * carrier_hz * n / sample_rate).sin());
        }
    }
    AudioTrack::new(samples, sample_rate)
}

/// Peak signal-to-noise ratio for data in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape("psnr inputs differ in length".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(if mse <= 1e-10 { 99.0 } else { (10.0 * (1.0 / mse).log10()).min(99.0) })
}

/// PSNR of every frame of `video` against `image`, restricted to pixels
/// where `region` is true, pooled over frames.
pub fn region_psnr(video: &VideoClip, image: &VideoClip, region: impl Fn(usize, usize) -> bool) -> Result<f64> {
    if (video.h, video.w) != (image.h, image.w) {
        return Err(Error::Shape("region_psnr frame sizes differ".into()));
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for f in 0..video.t {
        for y in 0..video.h {
            for x in 0..video.w {
                if region(y, x) {
                    a.push(video.at(f, y, x, 0));
                    b.push(image.at(0, y, x, 0));
                }
            }
        }
    }
    psnr(&a, &b)
}

/// Mean SSIM over all 7x7 windows (uniform weights, K1 = 0.01,
/// K2 = 0.03, data range 1) of two `h x w` images.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    const WIN: usize = 7;
    if a.len() != h * w || b.len() != h * w || h < WIN || w < WIN {
        return Err(Error::Shape("ssim needs equal images of at least 7x7".into()));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - WIN {
        for x in 0..=w - WIN {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WIN {
                for dx in 0..WIN {
                    let (p, q) = (a[(y + dy) * w + x + dx] as f64, b[(y + dy) * w + x + dx] as f64);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0) * n / (n - 1.0);
            let vb = (sbb / n - mb * mb).max(0.0) * n / (n - 1.0);
            let cov = (sab / n - ma * mb) * n / (n - 1.0);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("pearson needs two equal series of length >= 2".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 1e-24 || syy <= 1e-24 {
        return Err(Error::Invalid("pearson input has zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mean distance between each hand's detected position and its keypoint.
/// Detection is a matched filter inside the hand's side strip: the pixel
/// whose radius-2 disc holds the most residual against `reference`, refined
/// to the centroid of positive residual within 3 px of it.
pub fn hand_error(video: &VideoClip, reference: &VideoClip, kps: &KeypointTrack, avatar: &AvatarSpec) -> f64 {
    let w = video.w;
    let mut total = 0.0;
    let mut n = 0;
    for (f, points) in kps.iter().enumerate().take(video.t) {
        for kp in points {
            let (x0, x1) = if kp.x < w as f32 / 2.0 { (0, avatar.head[1]) } else { (avatar.head[3], w) };
            let (cx, cy) = locate_dot(video, reference, f, x0, x1);
            total += ((cx - kp.x as f64).powi(2) + (cy - kp.y as f64).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn locate_dot(video: &VideoClip, reference: &VideoClip, f: usize, x0: usize, x1: usize) -> (f64, f64) {
    let h = video.h;
    let res = |y: usize, x: usize| (video.at(f, y, x, 0) - reference.at(0, y, x, 0)) as f64;
    let (mut best, mut by, mut bx) = (f64::NEG_INFINITY, 0, x0);
    for y in 0..h {
        for x in x0..x1 {
            let mut score = 0.0;
            for yy in y.saturating_sub(2)..(y + 3).min(h) {
                for xx in x.saturating_sub(2).max(x0)..(x + 3).min(x1) {
                    if yy.abs_diff(y).pow(2) + xx.abs_diff(x).pow(2) <= 4 {
                        score += res(yy, xx);
                    }
                }
            }
            if score > best {
                (best, by, bx) = (score, y, x);
            }
        }
    }
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in by.saturating_sub(3)..(by + 4).min(h) {
        for x in bx.saturating_sub(3).max(x0)..(bx + 4).min(x1) {
            let r = res(y, x);
            if r > 0.0 {
                s += r;
                sx += r * x as f64;
                sy += r * y as f64;
            }
        }
    }
    if s > 1e-9 {
        (sx / s, sy / s)
    } else {
        (bx as f64, by as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub clips: usize,
    pub identities: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f32,
    pub sample_rate: f32,
    pub carrier_hz: f32,
    pub hands: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clips: 256,
            identities: 8,
            frames: 33,
            height: 64,
            width: 64,
            fps: 25.0,
            sample_rate: 16000.0,
            carrier_hz: 250.0,
            hands: false,
        }
    }
}

/// Seeds that fully determine one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSeeds {
    pub identity: u64,
    pub audio: u64,
    pub hands: u64,
}

impl ClipSeeds {
    /// Seeds for clip `index` of a corpus generated with `seed`. Identity
    /// seeds cycle through `identities` values.
    pub fn for_index(seed: u64, index: usize, identities: usize) -> Self {
        let id = (index % identities.max(1)) as u64;
        let mix = |k: u64| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
        Self {
            identity: mix(1_000 + id),
            audio: mix(1_000_000 + index as u64),
            hands: mix(2_000_000 + index as u64),
        }
    }
}

/// A fully rendered clip with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub seeds: ClipSeeds,
    pub avatar: AvatarSpec,
    pub envelope: Vec<f32>,
    pub video: VideoClip,
    pub mask: Mask,
    pub audio: AudioTrack,
    pub keypoints: KeypointTrack,
    pub reference: VideoClip,
}

pub fn make_clip(seeds: ClipSeeds, cfg: &CorpusConfig) -> Result<SynthClip> {
    let avatar = AvatarSpec::from_seed(seeds.identity, cfg.height, cfg.width);
    avatar.validate(cfg.height, cfg.width)?;
    let envelope = random_envelope(seeds.audio, cfg.frames);
    let track = cfg.hands.then(|| HandTrack::random(seeds.hands, cfg.height, cfg.width));
    let (video, mask, keypoints) = render_clip(&avatar, &envelope, track.as_ref(), cfg.height, cfg.width, cfg.fps);
    let mask = if cfg.hands { mask } else { Mask::filled(cfg.frames, cfg.height, cfg.width, 1.0) };
    let audio = synth_audio(&envelope, cfg.fps, cfg.sample_rate, cfg.carrier_hz)?;
    let reference = avatar.reference_image(cfg.height, cfg.width, cfg.fps);
    Ok(SynthClip { seeds, avatar, envelope, video, mask, audio, keypoints, reference })
}

pub fn make_corpus(seed: u64, cfg: &CorpusConfig) -> Result<Vec<SynthClip>> {
    (0..cfg.clips).map(|i| make_clip(ClipSeeds::for_index(seed, i, cfg.identities), cfg)).collect()
}

/// Manifest text: one line per clip, `index identity audio hands`.
pub fn manifest(clips: &[SynthClip], cfg: &CorpusConfig) -> String {
    let mut s = format!(
        "# frames={} height={} width={} fps={} sample_rate={} hands={}\n",
        cfg.frames, cfg.height, cfg.width, cfg.fps, cfg.sample_rate, cfg.hands
    );
    for (i, c) in clips.iter().enumerate() {
        s += &format!("{i:05} {} {} {}\n", c.seeds.identity, c.seeds.audio, c.seeds.hands);
    }
    s
}
