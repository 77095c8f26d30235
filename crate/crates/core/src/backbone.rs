//! Diffusion-transformer denoiser.
//!
//! Noisy latent tokens and reference tokens share one self-attention per
//! block with three-axis rotary embeddings. Timestep and global audio enter
//! through adaptive scale/shift/gate modulation; local audio enters through
//! a per-frame cross-attention adapter every `adapter_every` blocks, gated by
//! a learned scalar and by the latent face mask.
//!
//! Audio isolation: tokens outside the face mask (mask = 0) and reference
//! tokens only attend to each other, and both audio paths are multiplied by
//! the token's mask. Non-face outputs are therefore exactly independent of
//! the audio input. With an all-ones mask attention is fully bidirectional.

use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioEncoderConfig};
use crate::autograd::{Graph, RopeTable, Var};
use crate::codec::{CodecConfig, LatentGrid};
use crate::conditioning::{self, AudioCond, ConditionSet, PoseEncoderConfig};
use crate::error::{Error, Result};
use crate::params::{init_linear, Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub adapter_every: usize,
    pub mlp_ratio: usize,
    /// Channels per head given to the (t, h, w) rotary axes.
    pub rope_split: [usize; 3],
    pub rope_base: f64,
    /// Hidden width of the output head.
    pub head_hidden: usize,
    /// Velocity is formed as `(x_t - x0_hat) / max(t, t_min)`.
    pub t_min: f64,
    /// Whether the adapter gate and global-audio projection are trainable.
    pub audio_trainable: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            blocks: 8,
            adapter_every: 2,
            mlp_ratio: 4,
            rope_split: [2, 2, 4],
            rope_base: 10.0,
            head_hidden: 128,
            t_min: 0.05,
            audio_trainable: true,
        }
    }
}

/// Full model configuration: latent layout plus the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub backbone: BackboneConfig,
    pub audio: AudioEncoderConfig,
    pub pose: PoseEncoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.width == 0 || b.heads == 0 || b.width % b.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by heads {}", b.width, b.heads)));
        }
        let hd = b.width / b.heads;
        if b.rope_split.iter().any(|d| d % 2 != 0) || b.rope_split.iter().sum::<usize>() != hd {
            return Err(Error::Config(format!("rope split {:?} must be even and sum to head dim {hd}", b.rope_split)));
        }
        if b.adapter_every == 0 || b.blocks == 0 {
            return Err(Error::Config("blocks and adapter_every must be >= 1".into()));
        }
        if self.audio.global_dim != b.width {
            return Err(Error::Config("audio global_dim must equal backbone width".into()));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.backbone.width / self.backbone.heads
    }

    pub fn adapter_blocks(&self) -> Vec<usize> {
        (0..self.backbone.blocks).filter(|b| (b + 1) % self.backbone.adapter_every == 0).collect()
    }

    /// Names that stay fixed when the audio path is ablated.
    pub fn audio_gate_names(&self) -> BTreeSet<String> {
        let mut s: BTreeSet<String> = self.adapter_blocks().iter().map(|b| format!("blk{b}.ad.gamma")).collect();
        s.insert("aglo.w".into());
        s
    }
}

/// Registers every parameter of the denoiser (audio and pose encoders
/// included).
pub fn init_params<F: Scalar>(cfg: &ModelConfig, codec: &CodecConfig, rng: &mut impl Rng) -> Result<ParamStore<F>> {
    cfg.validate()?;
    let b = &cfg.backbone;
    let (c, cl) = (b.width, cfg.latent_channels);
    let mut ps = ParamStore::new();
    audio::init_params(&mut ps, &cfg.audio, rng);
    conditioning::init_pose_params(&mut ps, &cfg.pose, codec, c, rng);
    ps.insert("embed.w", init_linear(rng, cl, c));
    ps.insert("embed.b", Tensor::zeros(&[c]));
    ps.insert("temb.l1.w", init_linear(rng, c, c));
    ps.insert("temb.l1.b", Tensor::zeros(&[c]));
    ps.insert("temb.l2.w", init_linear(rng, c, c));
    ps.insert("temb.l2.b", Tensor::zeros(&[c]));
    ps.insert("aglo.w", Tensor::zeros(&[c, c]));
    let hidden = c * b.mlp_ratio;
    let adapters = cfg.adapter_blocks();
    for blk in 0..b.blocks {
        for m in 0..6 {
            ps.insert(&format!("blk{blk}.mod{m}.w"), Tensor::zeros(&[c, c]));
            ps.insert(&format!("blk{blk}.mod{m}.b"), Tensor::zeros(&[c]));
        }
        for n in ["q", "k", "v", "o"] {
            ps.insert(&format!("blk{blk}.attn.{n}.w"), init_linear(rng, c, c));
            ps.insert(&format!("blk{blk}.attn.{n}.b"), Tensor::zeros(&[c]));
        }
        ps.insert(&format!("blk{blk}.mlp.fc1.w"), init_linear(rng, c, hidden));
        ps.insert(&format!("blk{blk}.mlp.fc1.b"), Tensor::zeros(&[hidden]));
        ps.insert(&format!("blk{blk}.mlp.fc2.w"), init_linear(rng, hidden, c));
        ps.insert(&format!("blk{blk}.mlp.fc2.b"), Tensor::zeros(&[c]));
        if adapters.contains(&blk) {
            let ca = cfg.audio.local_dim;
            ps.insert(&format!("blk{blk}.ad.q.w"), init_linear(rng, c, c));
            ps.insert(&format!("blk{blk}.ad.k.w"), init_linear(rng, ca, c));
            ps.insert(&format!("blk{blk}.ad.v.w"), init_linear(rng, ca, c));
            ps.insert(&format!("blk{blk}.ad.o.w"), init_linear(rng, c, c));
            ps.insert(&format!("blk{blk}.ad.o.b"), Tensor::zeros(&[c]));
            ps.insert(&format!("blk{blk}.ad.ln.w"), Tensor::full(&[c], F::one()));
            ps.insert(&format!("blk{blk}.ad.ln.b"), Tensor::zeros(&[c]));
            ps.insert(&format!("blk{blk}.ad.gamma"), Tensor::zeros(&[1]));
        }
    }
    for m in 0..2 {
        ps.insert(&format!("final.mod{m}.w"), Tensor::zeros(&[c, c]));
        ps.insert(&format!("final.mod{m}.b"), Tensor::zeros(&[c]));
    }
    ps.insert("head.fc1.w", init_linear(rng, c, b.head_hidden));
    ps.insert("head.fc1.b", Tensor::zeros(&[b.head_hidden]));
    ps.insert("head.fc2.w", Tensor::zeros(&[b.head_hidden, cl]));
    ps.insert("head.fc2.b", Tensor::zeros(&[cl]));
    Ok(ps)
}

/// Rotation angles for one token set. Pair `p` of a head belongs to the
/// axis whose channel range contains `2p`; within an axis of `d_a`
/// channels, pair `f` turns at `base^(-2f/d_a)` radians per unit.
pub fn rope_table<F: Scalar>(coords: &[[i64; 3]], split: [usize; 3], base: f64) -> RopeTable<F> {
    let pairs = split.iter().sum::<usize>() / 2;
    let mut freqs = Vec::with_capacity(pairs);
    for (axis, &d) in split.iter().enumerate() {
        for f in 0..d / 2 {
            freqs.push((axis, base.powf(-2.0 * f as f64 / d as f64)));
        }
    }
    let mut cos = Vec::with_capacity(coords.len() * pairs);
    let mut sin = Vec::with_capacity(coords.len() * pairs);
    for c in coords {
        for &(axis, fr) in &freqs {
            let ang = c[axis] as f64 * fr;
            cos.push(F::of(ang.cos()));
            sin.push(F::of(ang.sin()));
        }
    }
    RopeTable { cos, sin, pairs }
}

/// Applies the rotary embedding to `x [N, heads * d]` outside any graph.
pub fn rope_rotate<F: Scalar>(x: &Tensor<F>, coords: &[[i64; 3]], heads: usize, split: [usize; 3], base: f64) -> Tensor<F> {
    let mut g = Graph::new(false);
    let v = g.constant(x.clone());
    let r = g.rope(v, heads, Rc::new(rope_table(coords, split, base)));
    g.value(r).clone()
}

/// Sinusoidal embedding of `t` scaled to `[0, 1000]`.
pub fn timestep_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t * 1000.0 * freq;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    out
}

/// Inputs of one denoiser evaluation.
pub struct ForwardInput<'a> {
    pub x_t: &'a LatentGrid,
    pub t: f64,
    pub conds: &'a ConditionSet,
    /// Leading latent frames that hold clean motion anchors.
    pub anchor_frames: usize,
}

/// Graph handles produced by [`forward`].
pub struct ForwardOutput {
    /// Velocity `[N, C_latent]` in grid order.
    pub velocity: Var,
    /// Clean-latent estimate `[N, C_latent]`.
    pub x0_hat: Var,
}

fn check_shapes(cfg: &ModelConfig, inp: &ForwardInput<'_>) -> Result<()> {
    let x = inp.x_t;
    if x.c != cfg.latent_channels {
        return Err(Error::Shape(format!("latent has {} channels, model expects {}", x.c, cfg.latent_channels)));
    }
    let m = &inp.conds.face_mask;
    if (m.t, m.h, m.w) != (x.t, x.h, x.w) {
        return Err(Error::Shape(format!("face mask {}x{}x{} vs latent {}x{}x{}", m.t, m.h, m.w, x.t, x.h, x.w)));
    }
    if !inp.conds.drop.reference {
        let r = &inp.conds.reference;
        if r.channels != x.c || r.len() != x.h * x.w {
            return Err(Error::Shape("reference tokens do not match the latent grid".into()));
        }
    }
    match &inp.conds.audio {
        AudioCond::Frames(f) => {
            if audio::downsampled_len(f.rows()) != x.t {
                return Err(Error::Shape(format!("audio covers {} frames, latent has {}", f.rows(), x.t)));
            }
            if f.cols() != cfg.audio.in_channels {
                return Err(Error::Shape("audio feature width".into()));
            }
        }
        AudioCond::Features(a) => {
            if a.frames() != x.t {
                return Err(Error::Shape("audio features do not match latent frames".into()));
            }
        }
    }
    if !(0.0..=1.0).contains(&inp.t) {
        return Err(Error::Invalid(format!("timestep {} outside [0, 1]", inp.t)));
    }
    if inp.anchor_frames >= x.t && inp.anchor_frames > 0 {
        return Err(Error::Invalid("anchor frames must be fewer than latent frames".into()));
    }
    Ok(())
}

fn to_f<F: Scalar>(v: &[f32], shape: &[usize]) -> Tensor<F> {
    Tensor::new(v.iter().map(|x| F::of(*x as f64)).collect(), shape).unwrap()
}

/// Noisy token bookkeeping for one evaluation.
struct Layout {
    /// Sequence position → index into `concat(noisy, reference)`.
    perm: Vec<usize>,
    /// Number of leading sequence positions that are audio-isolated.
    n_iso: usize,
    /// Sequence position of every noisy token (grid order).
    noisy_pos: Vec<usize>,
    coords: Vec<[i64; 3]>,
    /// Modulation key per sequence position.
    keys: Vec<usize>,
    /// Distinct keys: (timestep row, audio frame, audio weight).
    key_defs: Vec<(usize, usize, f32)>,
}

fn layout(inp: &ForwardInput<'_>) -> Layout {
    let x = inp.x_t;
    let n = x.token_count();
    let per = x.h * x.w;
    let with_ref = !inp.conds.drop.reference;
    let m = if with_ref { inp.conds.reference.len() } else { 0 };
    let mask = &inp.conds.face_mask.values;
    let mut iso = Vec::new();
    let mut face = Vec::new();
    for i in 0..n {
        if mask[i] > 0.0 {
            face.push(i);
        } else {
            iso.push(i);
        }
    }
    let mut perm = iso.clone();
    perm.extend((0..m).map(|r| n + r));
    let n_iso = perm.len();
    perm.extend(face.iter().copied());

    let mut key_map: HashMap<(usize, usize, u32), usize> = HashMap::new();
    let mut key_defs = Vec::new();
    let mut keys = Vec::with_capacity(perm.len());
    let mut coords = Vec::with_capacity(perm.len());
    let mut noisy_pos = vec![0usize; n];
    for (s, &src) in perm.iter().enumerate() {
        let def = if src < n {
            noisy_pos[src] = s;
            let j = src / per;
            coords.push([j as i64, ((src % per) / x.w) as i64, (src % x.w) as i64]);
            let trow = usize::from(j < inp.anchor_frames);
            (trow, j, mask[src])
        } else {
            coords.push(inp.conds.reference.coords[src - n]);
            (0, 0, 0.0)
        };
        let k = *key_map.entry((def.0, def.1, def.2.to_bits())).or_insert_with(|| {
            key_defs.push(def);
            key_defs.len() - 1
        });
        keys.push(k);
    }
    Layout { perm, n_iso, noisy_pos, coords, keys, key_defs }
}

/// Builds the denoiser graph for one sample.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    cfg: &ModelConfig,
    codec: &CodecConfig,
    inp: &ForwardInput<'_>,
) -> Result<ForwardOutput> {
    check_shapes(cfg, inp)?;
    let b = &cfg.backbone;
    let c = b.width;
    let x = inp.x_t;
    let n = x.token_count();
    let conds = inp.conds;
    let lay = layout(inp);

    // token embeddings
    let xt = g.constant(to_f::<F>(&x.values, &[n, x.c]));
    let mut h = g.linear(xt, p.get("embed.w"), Some(p.get("embed.b")));
    if let (Some(heat), false) = (&conds.pose, conds.drop.pose) {
        let pose = conditioning::encode_pose(g, p, heat, codec)?;
        h = g.add(h, pose);
    }
    let tokens = if conds.drop.reference {
        h
    } else {
        let r = &conds.reference;
        let rt = g.constant(to_f::<F>(&r.tokens, &[r.len(), r.channels]));
        let re = g.linear(rt, p.get("embed.w"), Some(p.get("embed.b")));
        g.concat_rows(&[h, re])
    };
    let mut hs = g.gather_rows(tokens, Rc::new(lay.perm.clone()));

    // conditioning rows: timestep embedding (+ masked global audio)
    let mut tf = timestep_features(inp.t, c);
    tf.extend(timestep_features(0.0, c));
    let tf = g.constant(Tensor::new(tf.into_iter().map(F::of).collect(), &[2, c]).unwrap());
    let te = g.linear(tf, p.get("temb.l1.w"), Some(p.get("temb.l1.b")));
    let te = g.silu(te);
    let te = g.linear(te, p.get("temb.l2.w"), Some(p.get("temb.l2.b")));

    let (a_glo, a_loc) = audio_features(g, p, cfg, x.t, conds);
    let ag = g.matmul(a_glo, p.get("aglo.w"));
    let trows = g.gather_rows(te, Rc::new(lay.key_defs.iter().map(|d| d.0).collect()));
    let arows = g.gather_rows(ag, Rc::new(lay.key_defs.iter().map(|d| d.1).collect()));
    let arows = g.mul_rows_const(arows, Rc::new(lay.key_defs.iter().map(|d| F::of(d.2 as f64)).collect()));
    let cond = g.add(trows, arows);
    let cond_act = g.silu(cond);

    let s_len = lay.perm.len();
    let ranges: Rc<Vec<(usize, usize)>> =
        Rc::new((0..s_len).map(|s| if s < lay.n_iso { (0, lay.n_iso) } else { (0, s_len) }).collect());
    let rope = Rc::new(rope_table::<F>(&lay.coords, b.rope_split, b.rope_base));
    let keys = Rc::new(lay.keys.clone());

    // adapter plumbing: face tokens occupy [n_iso, s_len)
    let ad_ranges: Rc<Vec<(usize, usize)>> = Rc::new(
        (lay.n_iso..s_len)
            .map(|s| {
                let j = lay.coords[s][0] as usize;
                let k = cfg.audio.n_local + 1;
                (j * k, (j + 1) * k)
            })
            .collect(),
    );
    let face_w: Rc<Vec<F>> =
        Rc::new((lay.n_iso..s_len).map(|s| F::of(conds.face_mask.values[lay.perm[s]] as f64)).collect());
    let a_hat = if s_len > lay.n_iso {
        let pad = p.get("audio.pad");
        Some(audio::append_padding_token_frames(g, a_loc, pad, cfg.audio.n_local, x.t))
    } else {
        None
    };

    for blk in 0..b.blocks {
        let modv: Vec<Var> = (0..6)
            .map(|m| {
                let r = g.linear(cond_act, p.get(&format!("blk{blk}.mod{m}.w")), Some(p.get(&format!("blk{blk}.mod{m}.b"))));
                g.gather_rows(r, keys.clone())
            })
            .collect();
        // attention
        let xn = g.layer_norm(hs, 1e-6);
        let xm = modulate(g, xn, modv[0], modv[1]);
        let q = g.linear(xm, p.get(&format!("blk{blk}.attn.q.w")), Some(p.get(&format!("blk{blk}.attn.q.b"))));
        let k = g.linear(xm, p.get(&format!("blk{blk}.attn.k.w")), Some(p.get(&format!("blk{blk}.attn.k.b"))));
        let v = g.linear(xm, p.get(&format!("blk{blk}.attn.v.w")), Some(p.get(&format!("blk{blk}.attn.v.b"))));
        let q = g.rope(q, b.heads, rope.clone());
        let k = g.rope(k, b.heads, rope.clone());
        let a = g.attention(q, k, v, b.heads, ranges.clone());
        let o = g.linear(a, p.get(&format!("blk{blk}.attn.o.w")), Some(p.get(&format!("blk{blk}.attn.o.b"))));
        let o = g.mul(o, modv[2]);
        hs = g.add(hs, o);
        // mlp
        let xn = g.layer_norm(hs, 1e-6);
        let xm = modulate(g, xn, modv[3], modv[4]);
        let f = g.linear(xm, p.get(&format!("blk{blk}.mlp.fc1.w")), Some(p.get(&format!("blk{blk}.mlp.fc1.b"))));
        let f = g.gelu(f);
        let f = g.linear(f, p.get(&format!("blk{blk}.mlp.fc2.w")), Some(p.get(&format!("blk{blk}.mlp.fc2.b"))));
        let f = g.mul(f, modv[5]);
        hs = g.add(hs, f);

        if (blk + 1) % b.adapter_every == 0 {
            if let Some(a_hat) = a_hat {
                let iso = g.slice_rows(hs, 0, lay.n_iso);
                let face = g.slice_rows(hs, lay.n_iso, s_len);
                let r = audio_cross_attention(g, p, blk, b.heads, face, a_hat, ad_ranges.clone(), face_w.clone());
                let face = g.add(face, r);
                hs = g.concat_rows(&[iso, face]);
            }
        }
    }

    // output head on noisy tokens, grid order
    let out = g.gather_rows(hs, Rc::new(lay.noisy_pos.clone()));
    let noisy_keys: Vec<usize> = lay.noisy_pos.iter().map(|&s| lay.keys[s]).collect();
    let fm: Vec<Var> = (0..2)
        .map(|m| {
            let r = g.linear(cond_act, p.get(&format!("final.mod{m}.w")), Some(p.get(&format!("final.mod{m}.b"))));
            g.gather_rows(r, Rc::new(noisy_keys.clone()))
        })
        .collect();
    let on = g.layer_norm(out, 1e-6);
    let om = modulate(g, on, fm[0], fm[1]);
    let y = g.linear(om, p.get("head.fc1.w"), Some(p.get("head.fc1.b")));
    let y = g.gelu(y);
    let x0_hat = g.linear(y, p.get("head.fc2.w"), Some(p.get("head.fc2.b")));
    let diff = g.sub(xt, x0_hat);
    let velocity = g.scale(diff, F::of(1.0 / inp.t.max(b.t_min)));
    Ok(ForwardOutput { velocity, x0_hat })
}

fn modulate<F: Scalar>(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Var {
    let s1 = g.add_scalar(scale, F::one());
    let y = g.mul(x, s1);
    g.add(y, shift)
}

/// Global `[T~, C]` and local `[T~ * n, C_a]` audio features; zero tensors
/// when audio is dropped.
fn audio_features<F: Scalar>(g: &mut Graph<F>, p: &Bound, cfg: &ModelConfig, t_latent: usize, conds: &ConditionSet) -> (Var, Var) {
    let a = &cfg.audio;
    if conds.drop.audio {
        let glo = g.constant(Tensor::zeros(&[t_latent, a.global_dim]));
        let loc = g.constant(Tensor::zeros(&[t_latent * a.n_local, a.local_dim]));
        return (glo, loc);
    }
    match &conds.audio {
        AudioCond::Frames(f) => {
            let fv = g.constant(f.cast());
            let hdn = audio::causal_downsample(g, p, fv);
            audio::audio_heads(g, p, hdn, a)
        }
        AudioCond::Features(af) => {
            let glo = g.constant(af.a_glo.cast());
            let loc = g.constant(af.a_loc.cast().reshape(&[t_latent * a.n_local, a.local_dim]).unwrap());
            (glo, loc)
        }
    }
}

/// Per-frame cross-attention from face tokens to that frame's augmented
/// local audio rows; returns the gated, masked residual
/// `mask * gamma * LayerNorm(CrossAttn)`.
#[allow(clippy::too_many_arguments)]
pub fn audio_cross_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound,
    blk: usize,
    heads: usize,
    x: Var,
    a_hat: Var,
    ranges: Rc<Vec<(usize, usize)>>,
    mask: Rc<Vec<F>>,
) -> Var {
    let q = g.matmul(x, p.get(&format!("blk{blk}.ad.q.w")));
    let k = g.matmul(a_hat, p.get(&format!("blk{blk}.ad.k.w")));
    let v = g.matmul(a_hat, p.get(&format!("blk{blk}.ad.v.w")));
    let a = g.attention(q, k, v, heads, ranges);
    let o = g.linear(a, p.get(&format!("blk{blk}.ad.o.w")), Some(p.get(&format!("blk{blk}.ad.o.b"))));
    let o = g.layer_norm(o, 1e-5);
    let o = g.mul_row(o, p.get(&format!("blk{blk}.ad.ln.w")));
    let o = g.add_row(o, p.get(&format!("blk{blk}.ad.ln.b")));
    let o = g.mul_scalar_var(o, p.get(&format!("blk{blk}.ad.gamma")));
    g.mul_rows_const(o, mask)
}

/// A trainable denoiser: configuration, codec, and parameters.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub codec: CodecConfig,
    pub params: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, codec: CodecConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = init_params(&cfg, &codec, rng)?;
        Ok(Self { cfg, codec, params })
    }

    /// Parameters held fixed during training.
    pub fn frozen(&self) -> BTreeSet<String> {
        if self.cfg.backbone.audio_trainable {
            BTreeSet::new()
        } else {
            self.cfg.audio_gate_names()
        }
    }

    /// Gradient-free velocity prediction.
    pub fn velocity(&self, inp: &ForwardInput<'_>) -> Result<LatentGrid> {
        let mut g = Graph::new(false);
        let p = self.params.bind(&mut g, &BTreeSet::new());
        let out = forward(&mut g, &p, &self.cfg, &self.codec, inp)?;
        let v = g.value(out.velocity);
        Ok(LatentGrid {
            values: v.data().iter().map(|x| x.f64() as f32).collect(),
            ..inp.x_t.clone()
        })
    }
}
