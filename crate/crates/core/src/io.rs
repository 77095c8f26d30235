//! Binary clip, mask and audio files, keypoint text, corpus directories,
//! and checkpoints. All binary data is little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::audio::AudioTrack;
use crate::codec::{Mask, VideoClip};
use crate::conditioning::{Keypoint, KeypointTrack};
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::synth::{AvatarSpec, ClipSeeds, CorpusConfig, SynthClip};
use crate::tensor::Tensor;

const CLIP_MAGIC: &[u8; 4] = b"MFV1";
const MASK_MAGIC: &[u8; 4] = b"MFM1";
const AUDIO_MAGIC: &[u8; 4] = b"MFA1";
const CKPT_MAGIC: &[u8; 4] = b"MFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::Format(format!("{}: bad magic, expected {}", self.what, String::from_utf8_lossy(m))));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.reserve(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} does not fit in u32")))
}

pub fn clip_to_bytes(clip: &VideoClip) -> Result<Vec<u8>> {
    let mut out = CLIP_MAGIC.to_vec();
    for d in [clip.t, clip.h, clip.w, clip.c] {
        put_u32(&mut out, dim(d)?);
    }
    out.extend_from_slice(&clip.fps.to_le_bytes());
    put_f32s(&mut out, &clip.pixels);
    Ok(out)
}

pub fn clip_from_bytes(buf: &[u8]) -> Result<VideoClip> {
    let mut r = Reader::new(buf, "clip");
    r.magic(CLIP_MAGIC)?;
    let (t, h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let fps = r.f32()?;
    let pixels = r.f32s(t * h * w * c)?;
    r.finish()?;
    VideoClip::new(pixels, t, h, w, c, fps)
}

pub fn mask_to_bytes(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = MASK_MAGIC.to_vec();
    for d in [mask.t, mask.h, mask.w] {
        put_u32(&mut out, dim(d)?);
    }
    put_f32s(&mut out, &mask.values);
    Ok(out)
}

pub fn mask_from_bytes(buf: &[u8]) -> Result<Mask> {
    let mut r = Reader::new(buf, "mask");
    r.magic(MASK_MAGIC)?;
    let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let values = r.f32s(t * h * w)?;
    r.finish()?;
    Mask::new(values, t, h, w)
}

pub fn audio_to_bytes(track: &AudioTrack) -> Result<Vec<u8>> {
    let mut out = AUDIO_MAGIC.to_vec();
    put_u32(&mut out, dim(track.samples.len())?);
    out.extend_from_slice(&track.sample_rate.to_le_bytes());
    put_f32s(&mut out, &track.samples);
    Ok(out)
}

pub fn audio_from_bytes(buf: &[u8]) -> Result<AudioTrack> {
    let mut r = Reader::new(buf, "audio");
    r.magic(AUDIO_MAGIC)?;
    let n = r.u32()? as usize;
    let sr = r.f32()?;
    let samples = r.f32s(n)?;
    r.finish()?;
    AudioTrack::new(samples, sr)
}

/// One line per frame: `frame_idx x y conf [x y conf ...]`.
pub fn keypoints_to_text(kps: &KeypointTrack) -> String {
    let mut s = String::new();
    for (f, points) in kps.iter().enumerate() {
        s += &f.to_string();
        for k in points {
            s += &format!(" {} {} {}", k.x, k.y, k.conf);
        }
        s.push('\n');
    }
    s
}

pub fn keypoints_from_text(text: &str) -> Result<KeypointTrack> {
    let mut out: KeypointTrack = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Format(format!("keypoints line {}: {line:?}", ln + 1));
        let mut it = line.split_whitespace();
        let f: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let nums: Vec<f32> = it.map(|s| s.parse::<f32>().map_err(|_| bad())).collect::<Result<_>>()?;
        if nums.len() % 3 != 0 || f != out.len() {
            return Err(bad());
        }
        out.push(nums.chunks_exact(3).map(|c| Keypoint { x: c[0], y: c[1], conf: c[2] }).collect());
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    Ok(fs::write(path, clip_to_bytes(clip)?)?)
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    clip_from_bytes(&read_file(path)?)
}

pub fn read_audio(path: &Path) -> Result<AudioTrack> {
    audio_from_bytes(&read_file(path)?)
}

pub fn write_audio(path: &Path, track: &AudioTrack) -> Result<()> {
    Ok(fs::write(path, audio_to_bytes(track)?)?)
}

pub fn read_keypoints(path: &Path) -> Result<KeypointTrack> {
    keypoints_from_text(&fs::read_to_string(path)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    mask_from_bytes(&read_file(path)?)
}

/// Writes `clip_%05d.{vid,msk,aud,kpt}` and `manifest.txt`.
pub fn write_corpus(dir: &Path, clips: &[SynthClip], cfg: &CorpusConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, c) in clips.iter().enumerate() {
        let stem = dir.join(format!("clip_{i:05}"));
        fs::write(stem.with_extension("vid"), clip_to_bytes(&c.video)?)?;
        fs::write(stem.with_extension("msk"), mask_to_bytes(&c.mask)?)?;
        fs::write(stem.with_extension("aud"), audio_to_bytes(&c.audio)?)?;
        fs::write(stem.with_extension("kpt"), keypoints_to_text(&c.keypoints))?;
    }
    fs::write(dir.join("manifest.txt"), crate::synth::manifest(clips, cfg))?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`]. Avatars and reference
/// images are rebuilt from the identity seeds in the manifest.
pub fn read_corpus(dir: &Path) -> Result<Vec<SynthClip>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut out = Vec::new();
    for line in manifest.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let bad = || Error::Format(format!("manifest line {line:?}"));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let idx: usize = f[0].parse().map_err(|_| bad())?;
        let p = |s: &str| s.parse::<u64>().map_err(|_| bad());
        let seeds = ClipSeeds { identity: p(f[1])?, audio: p(f[2])?, hands: p(f[3])? };
        let stem = dir.join(format!("clip_{idx:05}"));
        let video = read_clip(&stem.with_extension("vid"))?;
        let mask = read_mask(&stem.with_extension("msk"))?;
        let audio = read_audio(&stem.with_extension("aud"))?;
        let keypoints = read_keypoints(&stem.with_extension("kpt"))?;
        let avatar = AvatarSpec::from_seed(seeds.identity, video.h, video.w);
        let reference = avatar.reference_image(video.h, video.w, video.fps);
        let envelope = crate::synth::random_envelope(seeds.audio, video.t);
        out.push(SynthClip { seeds, avatar, envelope, video, mask, audio, keypoints, reference });
    }
    Ok(out)
}

/// Saved training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CKPT_MAGIC.to_vec();
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_u32(&mut out, dim(self.params.len())?);
        for (name, t) in self.params.iter() {
            put_u32(&mut out, dim(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, dim(t.shape().len())?);
            for d in t.shape() {
                put_u32(&mut out, dim(*d)?);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                if !opt.matches(&self.params) {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint");
        r.magic(CKPT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?.to_string();
            let nd = r.u32()? as usize;
            let shape: Vec<usize> = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let data = r.f32s(shape.iter().product())?;
            if params.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            params.insert(&name, Tensor::new(data, &shape)?);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut opt = Adam::new(&params);
                opt.step = r.u64()?;
                for k in 0..opt.m.len() {
                    let len = opt.m[k].len();
                    opt.m[k] = r.f32s(len)?;
                    opt.v[k] = r.f32s(len)?;
                }
                Some(opt)
            }
            x => return Err(Error::Checkpoint(format!("bad optimizer flag {x}"))),
        };
        r.finish()?;
        Ok(Self { config_hash, step, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Loads and checks the configuration hash.
    pub fn load_expecting(path: &Path, hash: &[u8; 32]) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "{} was written under a different model configuration (hash {} vs {})",
                path.display(),
                hex(&ck.config_hash[..6]),
                hex(&hash[..6])
            )));
        }
        Ok(ck)
    }
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::make_corpus;
    use proptest::prelude::*;

    #[test]
    fn clip_mask_audio_round_trip() {
        let clip = VideoClip::new((0..2 * 3 * 4).map(|i| i as f32 * 0.5).collect(), 2, 3, 4, 1, 25.0).unwrap();
        let bytes = clip_to_bytes(&clip).unwrap();
        assert_eq!(&bytes[..4], b"MFV1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 16 + 4 + 24 * 4);
        assert_eq!(clip_from_bytes(&bytes).unwrap(), clip);
        assert!(clip_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(clip_from_bytes(&bad).is_err());

        let mask = Mask::filled(2, 2, 2, 1.0);
        assert_eq!(mask_from_bytes(&mask_to_bytes(&mask).unwrap()).unwrap(), mask);
        let a = AudioTrack::new(vec![0.1, -0.2, 0.3], 16000.0).unwrap();
        let back = audio_from_bytes(&audio_to_bytes(&a).unwrap()).unwrap();
        assert_eq!((back.samples, back.sample_rate), (a.samples, a.sample_rate));
    }

    #[test]
    fn keypoint_text() {
        let kps = vec![vec![Keypoint { x: 1.5, y: 2.0, conf: 1.0 }], vec![]];
        let text = keypoints_to_text(&kps);
        assert_eq!(text, "0 1.5 2 1\n1\n");
        assert_eq!(keypoints_from_text(&text).unwrap(), kps);
        assert!(keypoints_from_text("0 1 2\n").is_err());
        assert!(keypoints_from_text("1 1 2 3\n").is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { clips: 2, hands: true, ..Default::default() };
        let clips = make_corpus(3, &cfg).unwrap();
        write_corpus(dir.path(), &clips, &cfg).unwrap();
        assert!(dir.path().join("clip_00001.kpt").exists());
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in clips.iter().zip(&back) {
            assert_eq!(a.video, b.video);
            assert_eq!(a.reference, b.reference);
            assert_eq!(a.keypoints, b.keypoints);
            assert_eq!(a.envelope, b.envelope);
        }
    }

    fn sample_ckpt(with_opt: bool) -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(vec![1.0, -2.5, 3.25, 0.0], &[2, 2]).unwrap());
        params.insert("b", Tensor::new(vec![f32::MIN_POSITIVE], &[1]).unwrap());
        let optimizer = with_opt.then(|| {
            let mut o = Adam::new(&params);
            o.step = 9;
            o.m[0][1] = 0.5;
            o.v[1][0] = 2.0;
            o
        });
        Checkpoint { config_hash: [7; 32], step: 42, params, optimizer }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        for opt in [false, true] {
            let ck = sample_ckpt(opt);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.step, 42);
            assert_eq!(back.params.names(), ck.params.names());
        }
    }

    #[test]
    fn checkpoint_hash_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample_ckpt(true).save(&path).unwrap();
        assert!(Checkpoint::load_expecting(&path, &[7; 32]).is_ok());
        let err = Checkpoint::load_expecting(&path, &[8; 32]).unwrap_err();
        assert!(err.to_string().contains("different model configuration"));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let bytes = sample_ckpt(true).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(Checkpoint::from_bytes(&v).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn clip_bytes_round_trip(t in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u32>()) {
            let px: Vec<f32> = (0..t * h * w).map(|i| ((i as u32).wrapping_mul(seed) as f32).sin()).collect();
            let clip = VideoClip::new(px, t, h, w, 1, 30.0).unwrap();
            prop_assert_eq!(clip_from_bytes(&clip_to_bytes(&clip).unwrap()).unwrap(), clip);
        }
    }
}
