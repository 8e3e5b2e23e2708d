//! Feature extractor, segmentation head and generative head.
//!
//! Segmentation flow: spectral adapter -> patch embedding (+ positional table)
//! -> frozen core -> encoder adapters -> decoder adapters -> upsampler ->
//! 1x1 segmentation conv -> softmax.
//!
//! Reconstruction flow: both images through their spectral adapters and patch
//! embeddings, masked target tokens dropped, source and visible target tokens
//! concatenated -> frozen core -> encoder adapters -> recovery window (+ target
//! positional table) -> decoder adapters -> upsampler -> 1x1 generative conv.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{cst, Mat, Scalar};
use crate::net::config::ModelConfig;
use crate::net::params::{ParamStore, Role};
use crate::net::tape::{BatchStats, Tape, Var};
use crate::patchseq::{self, Domain, MaskPlan, PatchGrid, PatchSequence, ZERO_SLOT};
use crate::raster::ImageTensor;

/// Channels, spatial size and class count of one domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

/// Which flow a batch-norm call belongs to; running statistics are tracked
/// separately for each because the upsampler is shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flow {
    Seg,
    Gen,
}

impl Flow {
    pub fn name(self) -> &'static str {
        match self {
            Flow::Seg => "seg",
            Flow::Gen => "gen",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Per-forward batch statistics, reported back for running averages.
    Train,
    /// Stored running statistics.
    Eval,
}

/// Batch statistics observed during a training forward, keyed by the
/// running-statistics buffer prefix (`upsampler.{b}.bn.{flow}`).
pub type ObservedStats<T> = Vec<(String, BatchStats<T>)>;

/// Output of a tape-level forward.
pub struct FlowOut<T> {
    pub out: Var,
    pub height: usize,
    pub width: usize,
    pub stats: ObservedStats<T>,
}

struct GridMaps {
    grid: PatchGrid,
    patch: Arc<[u32]>,
    shuffle: Vec<Arc<[u32]>>,
    conv: Vec<Arc<[u32]>>,
}

pub const FROZEN_PREFIX: &str = "core.";

/// Architecture bound to a source/target pair and a training masking ratio.
pub struct Network {
    pub cfg: ModelConfig,
    pub source: DomainShape,
    pub target: DomainShape,
    pub mask_ratio: f64,
    pub seg_classes: usize,
    /// Concatenated sequence length at the training masking ratio.
    pub len_concat: usize,
    pub recovery_kernel: usize,
    maps: [GridMaps; 2],
}

impl Network {
    pub fn new(cfg: ModelConfig, source: DomainShape, target: DomainShape, mask_ratio: f64) -> Result<Self> {
        cfg.validate()?;
        if !(0.0..=1.0).contains(&mask_ratio) {
            return Err(Error::Config(format!("mask ratio {mask_ratio} outside [0, 1]")));
        }
        for d in [&source, &target] {
            if d.channels == 0 || d.classes == 0 {
                return Err(Error::Config("domain channels and classes must be positive".into()));
            }
        }
        let seg_classes = source.classes.max(target.classes);
        if seg_classes < 2 {
            return Err(Error::TooFewClasses(seg_classes));
        }
        let p = cfg.core.patch_size;
        let src_grid = PatchGrid::new(source.height, source.width, p)?;
        let tgt_grid = PatchGrid::new(target.height, target.width, p)?;
        let n_tgt = tgt_grid.n_patches();
        let visible = n_tgt - patchseq::masked_count(n_tgt, mask_ratio);
        let len_concat = src_grid.n_patches() + visible;
        let (kernel, _) = patchseq::recovery_geometry(len_concat, n_tgt)?;
        let maps = [
            Self::grid_maps(&cfg, src_grid, source.width),
            Self::grid_maps(&cfg, tgt_grid, target.width),
        ];
        Ok(Network {
            cfg,
            source,
            target,
            mask_ratio,
            seg_classes,
            len_concat,
            recovery_kernel: kernel,
            maps,
        })
    }

    fn grid_maps(cfg: &ModelConfig, grid: PatchGrid, width: usize) -> GridMaps {
        let patch = grid.patch_gather(grid.crop_width().min(width), cfg.core.core_channels).into();
        let (mut h, mut w) = (grid.grid_h, grid.grid_w);
        let mut shuffle = Vec::new();
        let mut conv = Vec::new();
        for b in 0..cfg.head.upsampler_blocks {
            let c = cfg.upsampler_channels(b);
            shuffle.push(pixel_shuffle_map(h, w, c).into());
            h *= 2;
            w *= 2;
            conv.push(im2col3_map(h, w, c).into());
        }
        GridMaps {
            grid,
            patch,
            shuffle,
            conv,
        }
    }

    pub fn grid(&self, domain: Domain) -> &PatchGrid {
        &self.maps[domain_index(domain)].grid
    }

    pub fn shape(&self, domain: Domain) -> &DomainShape {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn gen_channels(&self) -> usize {
        self.target.channels
    }

    // -----------------------------------------------------------------------
    // parameters

    /// Every parameter name the architecture declares, with its role.
    pub fn declared(&self) -> Vec<(String, usize, usize, Role)> {
        let c = &self.cfg.core;
        let d = c.embed_dim;
        let mut out = Vec::new();
        let mut push = |name: String, r: usize, k: usize| {
            let role = if name.starts_with(FROZEN_PREFIX) {
                Role::Frozen
            } else {
                Role::Trainable
            };
            out.push((name, r, k, role));
        };
        for dom in [Domain::Source, Domain::Target] {
            let ch = self.shape(dom).channels;
            push(format!("spectral.{}.weight", dom.name()), ch, c.core_channels);
            push(format!("spectral.{}.bias", dom.name()), 1, c.core_channels);
            push(format!("pos.{}", dom.name()), self.grid(dom).n_patches(), d);
        }
        push("core.patch_embed.weight".into(), c.patch_size * c.patch_size * c.core_channels, d);
        push("core.patch_embed.bias".into(), 1, d);
        let mut blocks: Vec<String> = (0..c.depth).map(|i| format!("core.blocks.{i}")).collect();
        blocks.extend((0..self.cfg.adapters.encoder_adapters).map(|i| format!("adapters.encoder.{i}")));
        blocks.extend((0..self.cfg.adapters.decoder_adapters).map(|i| format!("adapters.decoder.{i}")));
        let hidden = d * c.mlp_ratio;
        for b in blocks {
            for (suffix, r, k) in [
                ("ln1.gamma", 1, d),
                ("ln1.beta", 1, d),
                ("attn.qkv.weight", d, 3 * d),
                ("attn.qkv.bias", 1, 3 * d),
                ("attn.proj.weight", d, d),
                ("attn.proj.bias", 1, d),
                ("ln2.gamma", 1, d),
                ("ln2.beta", 1, d),
                ("mlp.fc1.weight", d, hidden),
                ("mlp.fc1.bias", 1, hidden),
                ("mlp.fc2.weight", hidden, d),
                ("mlp.fc2.bias", 1, d),
            ] {
                push(format!("{b}.{suffix}"), r, k);
            }
        }
        push("recovery.weight".into(), self.recovery_kernel * d, d);
        push("recovery.bias".into(), 1, d);
        let mut cin = d;
        for b in 0..self.cfg.head.upsampler_blocks {
            let co = self.cfg.upsampler_channels(b);
            push(format!("upsampler.{b}.deconv.weight"), cin, 4 * co);
            push(format!("upsampler.{b}.deconv.bias"), 1, co);
            push(format!("upsampler.{b}.conv.weight"), 9 * co, co);
            push(format!("upsampler.{b}.conv.bias"), 1, co);
            push(format!("upsampler.{b}.bn.gamma"), 1, co);
            push(format!("upsampler.{b}.bn.beta"), 1, co);
            cin = co;
        }
        push("heads.seg.weight".into(), cin, self.seg_classes);
        push("heads.seg.bias".into(), 1, self.seg_classes);
        push("heads.gen.weight".into(), cin, self.gen_channels());
        push("heads.gen.bias".into(), 1, self.gen_channels());
        out
    }

    /// Running-statistics buffer names with their widths.
    pub fn declared_buffers(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for b in 0..self.cfg.head.upsampler_blocks {
            let co = self.cfg.upsampler_channels(b);
            for flow in [Flow::Seg, Flow::Gen] {
                out.push((format!("upsampler.{b}.bn.{}.running_mean", flow.name()), co));
                out.push((format!("upsampler.{b}.bn.{}.running_var", flow.name()), co));
            }
        }
        out
    }

    /// Fresh parameters: truncated normal (std 0.02) projections, zero biases,
    /// unit norm scales, identity spectral adapters when widths agree and an
    /// identity centre tap in the recovery window.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = self.cfg.core.embed_dim;
        for (name, r, k, role) in self.declared() {
            let m = if name.ends_with(".bias") || name.ends_with(".beta") {
                Mat::zeros(r, k)
            } else if name.ends_with(".gamma") {
                Mat::filled(r, k, T::one())
            } else if name.starts_with("spectral.") && r == k {
                Mat::identity(r)
            } else if name == "recovery.weight" {
                let mut m = trunc_normal(&mut rng, r, k, 0.02);
                let centre = (self.recovery_kernel - 1) / 2;
                for i in 0..d {
                    for j in 0..d {
                        m.set(centre * d + i, j, if i == j { T::one() } else { T::zero() });
                    }
                }
                m
            } else {
                trunc_normal(&mut rng, r, k, 0.02)
            };
            store.insert(name, m, role);
        }
        for (name, w) in self.declared_buffers() {
            let v = if name.ends_with("running_var") { T::one() } else { T::zero() };
            store.insert_buffer(name, Mat::filled(1, w, v));
        }
        store
    }

    /// Confirms `store` carries every declared tensor with the declared shape
    /// and role.
    pub fn check_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        for (name, r, k, role) in self.declared() {
            let p = store.get(&name)?;
            if p.value.rows != r || p.value.cols != k {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {}x{}, architecture declares {r}x{k}",
                    p.value.rows, p.value.cols
                )));
            }
            if p.role != role {
                return Err(Error::Config(format!("parameter `{name}` has role {:?}, expected {role:?}", p.role)));
            }
        }
        for (name, w) in self.declared_buffers() {
            match store.buffer(&name) {
                Some(b) if b.len() == w => {}
                _ => return Err(Error::MissingParameter(name)),
            }
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // tape-level pieces

    /// Crops `img` to the domain's patch grid and lays it out channel-last.
    pub fn prepare<T: Scalar>(&self, img: &ImageTensor, domain: Domain) -> Result<Mat<T>> {
        let shape = self.shape(domain);
        if img.channels != shape.channels {
            return Err(Error::Shape(format!(
                "{} image has {} channels, adapter expects {}",
                domain.name(),
                img.channels,
                shape.channels
            )));
        }
        let grid = self.grid(domain);
        if img.height < grid.crop_height() || img.width < grid.crop_width() {
            return Err(Error::ImageTooSmall {
                height: img.height,
                width: img.width,
                patch: grid.patch,
            });
        }
        Ok(img.to_channel_last(grid.crop_height(), grid.crop_width()))
    }

    pub fn spectral_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, img: Mat<T>, domain: Domain) -> Result<Var> {
        let x = tape.constant(img);
        let w = tape.param(store, &format!("spectral.{}.weight", domain.name()))?;
        let b = tape.param(store, &format!("spectral.{}.bias", domain.name()))?;
        tape.linear(x, w, b)
    }

    /// Patch embedding plus the domain's positional table.
    pub fn tokens_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, adapted: Var, domain: Domain) -> Result<Var> {
        let maps = &self.maps[domain_index(domain)];
        let p = self.cfg.core.patch_size;
        let blocks = tape.gather(
            adapted,
            maps.patch.clone(),
            maps.grid.n_patches(),
            p * p * self.cfg.core.core_channels,
        )?;
        let w = tape.param(store, "core.patch_embed.weight")?;
        let b = tape.param(store, "core.patch_embed.bias")?;
        let e = tape.linear(blocks, w, b)?;
        let pos = tape.param(store, &format!("pos.{}", domain.name()))?;
        tape.add(e, pos)
    }

    /// One pre-norm transformer block.
    pub fn block_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let p = |s: &str| format!("{prefix}.{s}");
        let g1 = tape.param(store, &p("ln1.gamma"))?;
        let b1 = tape.param(store, &p("ln1.beta"))?;
        let h = tape.layer_norm(x, g1, b1)?;
        let wq = tape.param(store, &p("attn.qkv.weight"))?;
        let bq = tape.param(store, &p("attn.qkv.bias"))?;
        let qkv = tape.linear(h, wq, bq)?;
        let a = tape.attention(qkv, self.cfg.core.heads)?;
        let wp = tape.param(store, &p("attn.proj.weight"))?;
        let bp = tape.param(store, &p("attn.proj.bias"))?;
        let a = tape.linear(a, wp, bp)?;
        let x = tape.add(x, a)?;
        let g2 = tape.param(store, &p("ln2.gamma"))?;
        let b2 = tape.param(store, &p("ln2.beta"))?;
        let h = tape.layer_norm(x, g2, b2)?;
        let w1 = tape.param(store, &p("mlp.fc1.weight"))?;
        let c1 = tape.param(store, &p("mlp.fc1.bias"))?;
        let h = tape.linear(h, w1, c1)?;
        let h = tape.gelu(h);
        let w2 = tape.param(store, &p("mlp.fc2.weight"))?;
        let c2 = tape.param(store, &p("mlp.fc2.bias"))?;
        let h = tape.linear(h, w2, c2)?;
        tape.add(x, h)
    }

    /// Frozen core followed by the encoder adapters.
    pub fn encode_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        if tape.value(x).cols != self.cfg.core.embed_dim {
            return Err(Error::Shape(format!(
                "sequence width {} != embed_dim {}",
                tape.value(x).cols,
                self.cfg.core.embed_dim
            )));
        }
        for i in 0..self.cfg.core.depth {
            x = self.block_var(tape, store, &format!("core.blocks.{i}"), x)?;
        }
        for i in 0..self.cfg.adapters.encoder_adapters {
            x = self.block_var(tape, store, &format!("adapters.encoder.{i}"), x)?;
        }
        Ok(x)
    }

    pub fn decode_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for i in 0..self.cfg.adapters.decoder_adapters {
            x = self.block_var(tape, store, &format!("adapters.decoder.{i}"), x)?;
        }
        Ok(x)
    }

    /// Blends the encoded concatenated sequence down to one element per
    /// target patch and re-adds the target positional table. Sequences shorter
    /// than the trained length are zero-padded at the end.
    pub fn recover_var<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, enc: Var) -> Result<Var> {
        let len = tape.value(enc).rows;
        if len > self.len_concat {
            return Err(Error::GeometryMismatch {
                expected: self.len_concat,
                found: len,
            });
        }
        let d = self.cfg.core.embed_dim;
        let n_tgt = self.grid(Domain::Target).n_patches();
        let k = self.recovery_kernel;
        let idx = patchseq::window_gather(n_tgt, k, d, len);
        let windows = tape.gather(enc, idx.into(), n_tgt, k * d)?;
        let w = tape.param(store, "recovery.weight")?;
        let b = tape.param(store, "recovery.bias")?;
        let r = tape.linear(windows, w, b)?;
        let pos = tape.param(store, "pos.target")?;
        tape.add(r, pos)
    }

    /// Decoder tokens (raster grid order) to a full-resolution feature map.
    pub fn upsample_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mut x: Var,
        domain: Domain,
        flow: Flow,
        mode: BnMode,
        stats: &mut ObservedStats<T>,
    ) -> Result<(Var, usize, usize)> {
        let maps = &self.maps[domain_index(domain)];
        let (mut h, mut w) = (maps.grid.grid_h, maps.grid.grid_w);
        for b in 0..self.cfg.head.upsampler_blocks {
            let co = self.cfg.upsampler_channels(b);
            let pre = format!("upsampler.{b}");
            let dw = tape.param(store, &format!("{pre}.deconv.weight"))?;
            let y = tape.matmul(x, dw)?;
            h *= 2;
            w *= 2;
            let y = tape.gather(y, maps.shuffle[b].clone(), h * w, co)?;
            let db = tape.param(store, &format!("{pre}.deconv.bias"))?;
            let y = tape.add_row(y, db)?;
            let cols = tape.gather(y, maps.conv[b].clone(), h * w, 9 * co)?;
            let cw = tape.param(store, &format!("{pre}.conv.weight"))?;
            let cb = tape.param(store, &format!("{pre}.conv.bias"))?;
            let y = tape.linear(cols, cw, cb)?;
            let g = tape.param(store, &format!("{pre}.bn.gamma"))?;
            let be = tape.param(store, &format!("{pre}.bn.beta"))?;
            let key = format!("{pre}.bn.{}", flow.name());
            let y = match mode {
                BnMode::Train => {
                    let (y, s) = tape.batch_norm(y, g, be)?;
                    stats.push((key, s));
                    y
                }
                BnMode::Eval => {
                    let mean = store
                        .buffer(&format!("{key}.running_mean"))
                        .ok_or_else(|| Error::MissingParameter(format!("{key}.running_mean")))?
                        .data
                        .clone();
                    let var = store
                        .buffer(&format!("{key}.running_var"))
                        .ok_or_else(|| Error::MissingParameter(format!("{key}.running_var")))?
                        .data
                        .clone();
                    tape.batch_norm_eval(y, g, be, &mean, &var)?
                }
            };
            x = tape.gelu(y);
        }
        Ok((x, h, w))
    }

    /// Per-pixel class distribution (`pixels x seg_classes`) for one image.
    pub fn segment_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        img: &ImageTensor,
        domain: Domain,
        mode: BnMode,
    ) -> Result<FlowOut<T>> {
        let x = self.prepare(img, domain)?;
        let a = self.spectral_var(tape, store, x, domain)?;
        let t = self.tokens_var(tape, store, a, domain)?;
        let e = self.encode_var(tape, store, t)?;
        let dd = self.decode_var(tape, store, e)?;
        let mut stats = Vec::new();
        let (u, h, w) = self.upsample_var(tape, store, dd, domain, Flow::Seg, mode, &mut stats)?;
        let hw = tape.param(store, "heads.seg.weight")?;
        let hb = tape.param(store, "heads.seg.bias")?;
        let logits = tape.linear(u, hw, hb)?;
        let probs = tape.softmax_rows(logits);
        Ok(FlowOut {
            out: probs,
            height: h,
            width: w,
            stats,
        })
    }

    /// Target reconstruction (`pixels x C_T`) from the full source image and
    /// the visible target patches. Masked target content never enters.
    pub fn reconstruct_var<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        src: &ImageTensor,
        tgt: &ImageTensor,
        plan: &MaskPlan,
        mode: BnMode,
    ) -> Result<FlowOut<T>> {
        let n_tgt = self.grid(Domain::Target).n_patches();
        if plan.masked_ids.len() + plan.unmasked_ids.len() != n_tgt
            || plan.unmasked_ids.iter().any(|&i| i >= n_tgt)
        {
            return Err(Error::Shape("mask plan does not match the target grid".into()));
        }
        let xs = self.prepare(src, Domain::Source)?;
        let xt = self.prepare(tgt, Domain::Target)?;
        let a_s = self.spectral_var(tape, store, xs, Domain::Source)?;
        let t_s = self.tokens_var(tape, store, a_s, Domain::Source)?;
        let a_t = self.spectral_var(tape, store, xt, Domain::Target)?;
        let t_t = self.tokens_var(tape, store, a_t, Domain::Target)?;
        let visible = tape.select_rows(t_t, &plan.unmasked_ids)?;
        let cat = tape.concat_rows(t_s, visible)?;
        let e = self.encode_var(tape, store, cat)?;
        let r = self.recover_var(tape, store, e)?;
        let dd = self.decode_var(tape, store, r)?;
        let mut stats = Vec::new();
        let (u, h, w) = self.upsample_var(tape, store, dd, Domain::Target, Flow::Gen, mode, &mut stats)?;
        let gw = tape.param(store, "heads.gen.weight")?;
        let gb = tape.param(store, "heads.gen.bias")?;
        let out = tape.linear(u, gw, gb)?;
        Ok(FlowOut {
            out,
            height: h,
            width: w,
            stats,
        })
    }

    // -----------------------------------------------------------------------
    // inference-only conveniences

    /// 1x1 spectral convolution to the core's channel count.
    pub fn spectral_adapt<T: Scalar>(&self, store: &ParamStore<T>, img: &ImageTensor, domain: Domain) -> Result<ImageTensor> {
        let shape = self.shape(domain);
        if img.channels != shape.channels {
            return Err(Error::Shape(format!(
                "{} channels for an adapter of width {}",
                img.channels, shape.channels
            )));
        }
        let mut tape = Tape::new();
        let x = self.spectral_var(&mut tape, store, img.to_channel_last(img.height, img.width), domain)?;
        Ok(ImageTensor::from_channel_last(tape.value(x), img.height, img.width))
    }

    /// Patch-embeds an image of `domain` (spectral adapter included).
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, img: &ImageTensor, domain: Domain) -> Result<PatchSequence<T>> {
        let mut tape = Tape::new();
        let x = self.prepare(img, domain)?;
        let a = self.spectral_var(&mut tape, store, x, domain)?;
        let t = self.tokens_var(&mut tape, store, a, domain)?;
        let grid = self.grid(domain);
        Ok(PatchSequence {
            embeddings: tape.value(t).clone(),
            positions: (0..grid.n_patches()).map(|i| grid.position(i)).collect(),
            domains: vec![domain; grid.n_patches()],
        })
    }

    /// Frozen core then encoder adapters; length preserved.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, seq: &PatchSequence<T>) -> Result<PatchSequence<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(seq.embeddings.clone());
        let e = self.encode_var(&mut tape, store, x)?;
        Ok(PatchSequence {
            embeddings: tape.value(e).clone(),
            positions: seq.positions.clone(),
            domains: seq.domains.clone(),
        })
    }

    /// Recovery window over an encoded concatenated sequence.
    pub fn recover_target_sequence<T: Scalar>(&self, store: &ParamStore<T>, enc: &PatchSequence<T>) -> Result<PatchSequence<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(enc.embeddings.clone());
        let r = self.recover_var(&mut tape, store, x)?;
        let grid = self.grid(Domain::Target);
        Ok(PatchSequence {
            embeddings: tape.value(r).clone(),
            positions: (0..grid.n_patches()).map(|i| grid.position(i)).collect(),
            domains: vec![Domain::Target; grid.n_patches()],
        })
    }

    /// Per-pixel class probabilities `(crop_h*crop_w) x seg_classes`.
    pub fn segment<T: Scalar>(&self, store: &ParamStore<T>, img: &ImageTensor, domain: Domain, mode: BnMode) -> Result<SegmentMap<T>> {
        let mut tape = Tape::new();
        let f = self.segment_var(&mut tape, store, img, domain, mode)?;
        Ok(SegmentMap {
            probs: tape.value(f.out).clone(),
            height: f.height,
            width: f.width,
        })
    }

    /// Full-resolution target reconstruction.
    pub fn reconstruct<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        src: &ImageTensor,
        tgt: &ImageTensor,
        plan: &MaskPlan,
        mode: BnMode,
    ) -> Result<ImageTensor> {
        let mut tape = Tape::new();
        let f = self.reconstruct_var(&mut tape, store, src, tgt, plan, mode)?;
        Ok(ImageTensor::from_channel_last(tape.value(f.out), f.height, f.width))
    }
}

/// Softmax output of the segmentation flow.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMap<T> {
    pub probs: Mat<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> SegmentMap<T> {
    /// Arg-max class per pixel over the first `classes` outputs.
    pub fn argmax(&self, classes: usize) -> Vec<i32> {
        let classes = classes.min(self.probs.cols).max(1);
        (0..self.probs.rows)
            .map(|r| {
                let row = &self.probs.row(r)[..classes];
                let mut best = 0;
                for c in 1..classes {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as i32
            })
            .collect()
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn update_running_stats<T: Scalar>(store: &mut ParamStore<T>, stats: &ObservedStats<T>, momentum: f64) -> Result<()> {
    let m = cst::<T>(momentum);
    let keep = T::one() - m;
    for (key, s) in stats {
        for (suffix, vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let name = format!("{key}.{suffix}");
            let buf = store
                .buffer_mut(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            for (b, &v) in buf.data.iter_mut().zip(vals.iter()) {
                *b = keep * *b + m * v;
            }
        }
    }
    Ok(())
}

fn domain_index(d: Domain) -> usize {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

/// Truncated normal (resampled beyond two standard deviations).
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break cst::<T>(z * std);
            }
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Gather map turning `(h*w) x 4c` stride-2 transposed-conv taps, ordered
/// `(dy, dx, c)`, into the `(2h*2w) x c` upsampled raster.
pub fn pixel_shuffle_map(h: usize, w: usize, c: usize) -> Vec<u32> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(h2 * w2 * c);
    for yy in 0..h2 {
        for xx in 0..w2 {
            let (y, dy, x, dx) = (yy / 2, yy % 2, xx / 2, xx % 2);
            for ch in 0..c {
                idx.push(((y * w + x) * 4 * c + (dy * 2 + dx) * c + ch) as u32);
            }
        }
    }
    idx
}

/// `3x3`, padding 1 im2col map over an `h x w x c` channel-last raster;
/// columns ordered `(ky, kx, c)`.
pub fn im2col3_map(h: usize, w: usize, c: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h {
        for x in 0..w {
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    for ch in 0..c {
                        idx.push(if inside {
                            ((sy as usize * w + sx as usize) * c + ch) as u32
                        } else {
                            ZERO_SLOT
                        });
                    }
                }
            }
        }
    }
    idx
}
