//! Paired synthetic domains: Voronoi land-cover scenes, per-class spectral
//! signatures and a parametric source-to-target shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::raster::{ImageTensor, LabelMask};
use crate::tensorstore::{BudgetLabel, DomainData, DomainDatasetDescriptor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub seed: u64,
    /// Expected blob diameter in pixels (spacing of the Voronoi sites).
    pub region_scale: usize,
    pub channel_count: usize,
}

impl SceneSpec {
    pub fn validate(&self, patch: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("degenerate scene (zero area)".into()));
        }
        if self.height < patch || self.width < patch {
            return Err(Error::InvalidSpec(format!(
                "scene {}x{} smaller than patch {patch}",
                self.height, self.width
            )));
        }
        if self.class_count < 2 {
            return Err(Error::InvalidSpec("class_count must be >= 2".into()));
        }
        if self.region_scale == 0 || self.channel_count == 0 {
            return Err(Error::InvalidSpec("region_scale and channel_count must be positive".into()));
        }
        Ok(())
    }
}

/// Source-to-target spectral shift:
/// `pixel = mix · (gain ⊙ signature + offset) + N(0, noise_sigma²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShiftSpec {
    pub channel_gain: Vec<f64>,
    pub channel_offset: Vec<f64>,
    /// Row-major `C_out x C_in` mixing matrix (square when channel counts agree).
    pub spectral_mix: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub extra_classes: usize,
}

impl DomainShiftSpec {
    /// No shift, no noise, no extra classes.
    pub fn identity(channels: usize) -> Self {
        Self::uniform(channels, 1.0, 0.0, 0.0)
    }

    /// Same gain and offset on every channel, identity mix.
    pub fn uniform(channels: usize, gain: f64, offset: f64, noise_sigma: f64) -> Self {
        DomainShiftSpec {
            channel_gain: vec![gain; channels],
            channel_offset: vec![offset; channels],
            spectral_mix: (0..channels)
                .map(|i| (0..channels).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            noise_sigma,
            extra_classes: 0,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.channel_gain.len()
    }

    pub fn output_channels(&self) -> usize {
        self.spectral_mix.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channel_gain.len();
        if c == 0 || self.channel_offset.len() != c {
            return Err(Error::InvalidSpec("gain and offset must have one entry per channel".into()));
        }
        if self.spectral_mix.is_empty() || self.spectral_mix.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidSpec(format!("spectral_mix must have {c} columns")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidSpec("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Seeded Voronoi partition: one site per `region_scale` cell (jittered
/// inside it), each site labeled; the first sites cycle through every class
/// so all classes appear whenever there are enough sites.
pub fn generate_scene(spec: &SceneSpec) -> Result<LabelMask> {
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::InvalidSpec("degenerate scene (zero area)".into()));
    }
    if spec.class_count == 0 || spec.region_scale == 0 {
        return Err(Error::InvalidSpec("class_count and region_scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.region_scale;
    let (ny, nx) = (spec.height.div_ceil(s), spec.width.div_ceil(s));
    let mut sites = Vec::with_capacity(ny * nx);
    for cy in 0..ny {
        for cx in 0..nx {
            let y0 = cy * s;
            let x0 = cx * s;
            let y1 = (y0 + s).min(spec.height);
            let x1 = (x0 + s).min(spec.width);
            sites.push((rng.gen_range(y0..y1), rng.gen_range(x0..x1)));
        }
    }
    let mut labels: Vec<usize> = (0..sites.len())
        .map(|i| if i < spec.class_count { i } else { rng.gen_range(0..spec.class_count) })
        .collect();
    // shuffle so the guaranteed classes are not always in the top-left cells
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut data = Vec::with_capacity(spec.height * spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let mut best = 0;
            let mut best_d = usize::MAX;
            for (k, &(sy, sx)) in sites.iter().enumerate() {
                let d = sy.abs_diff(y).pow(2) + sx.abs_diff(x).pow(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            data.push(labels[best] as i32);
        }
    }
    LabelMask::new(spec.height, spec.width, data)
}

/// Per-class mean spectra drawn from the seeded unit cube.
pub fn draw_signatures(classes: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5167_5eed);
    (0..classes)
        .map(|_| (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect()
}

/// Renders a mask into an image through `shift`.
pub fn render_image(mask: &LabelMask, signatures: &[Vec<f64>], shift: &DomainShiftSpec, seed: u64) -> Result<ImageTensor> {
    shift.validate()?;
    let cin = shift.input_channels();
    let cout = shift.output_channels();
    // shifted class means, computed once
    let mut means: Vec<Option<Vec<f64>>> = vec![None; signatures.len()];
    for (k, sig) in signatures.iter().enumerate() {
        if sig.len() != cin {
            return Err(Error::InvalidSpec(format!("signature {k} has {} channels, shift expects {cin}", sig.len())));
        }
        let pre: Vec<f64> = (0..cin)
            .map(|c| shift.channel_gain[c] * sig[c] + shift.channel_offset[c])
            .collect();
        means[k] = Some(
            shift
                .spectral_mix
                .iter()
                .map(|row| row.iter().zip(&pre).map(|(a, b)| a * b).sum())
                .collect(),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, shift.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let mut img = ImageTensor::zeros(cout, mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let cls = mask.at(y, x);
            if cls < 0 {
                continue;
            }
            let mean = means
                .get(cls as usize)
                .and_then(|m| m.as_ref())
                .ok_or(Error::MissingSignature(cls as usize))?;
            for (c, &m) in mean.iter().enumerate() {
                let n = if shift.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                img.set(c, y, x, (m + n) as f32);
            }
        }
    }
    Ok(img)
}

/// Uniform per-class sampling of `min(budget, available)` labeled pixels
/// without replacement across all images. Absent classes get nothing.
pub fn select_target_labels(masks: &[LabelMask], class_count: usize, budget_per_class: usize, seed: u64) -> Vec<BudgetLabel> {
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); class_count];
    for (i, m) in masks.iter().enumerate() {
        for (p, &v) in m.data.iter().enumerate() {
            if v >= 0 && (v as usize) < class_count {
                by_class[v as usize].push((i, p));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0d6_e7);
    let mut out = Vec::new();
    for (cls, pool) in by_class.iter().enumerate() {
        let k = budget_per_class.min(pool.len());
        let mut picked: Vec<(usize, usize)> = rand::seq::index::sample(&mut rng, pool.len(), k)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|(i, p)| (i, p, cls)));
    }
    out.sort_unstable();
    out
}

/// Everything needed to synthesise a source/target pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub source: SceneSpec,
    /// `class_count` is ignored: the target carries the source classes plus
    /// `shift.extra_classes`.
    pub target: SceneSpec,
    pub shift: DomainShiftSpec,
    pub images_per_domain: usize,
    pub budget_per_class: usize,
    /// Noise added to source renders.
    #[serde(default)]
    pub source_noise: f64,
}

fn image_seed(base: u64, domain: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ domain.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ (index as u64).wrapping_mul(0x94d0_49bb_1331_11eb)
}

fn domain_descriptor(classes: usize, channels: usize, h: usize, w: usize, n: usize) -> DomainDatasetDescriptor {
    DomainDatasetDescriptor {
        class_count: classes,
        channel_count: channels,
        height: h,
        width: w,
        image_paths: (0..n).map(|i| format!("images/{i:03}.gt")).collect(),
        mask_paths: (0..n).map(|i| format!("masks/{i:03}.gt")).collect(),
        labeled_budget: Vec::new(),
    }
}

/// Builds a fully labeled source domain and a target domain with a label
/// budget. Class signatures are shared for common classes; the target's
/// extra classes get their own.
pub fn make_domain_pair(spec: &PairSpec) -> Result<(DomainData, DomainData)> {
    let src = &spec.source;
    src.validate(1)?;
    spec.shift.validate()?;
    if spec.images_per_domain == 0 {
        return Err(Error::InvalidSpec("images_per_domain must be >= 1".into()));
    }
    if spec.shift.input_channels() != src.channel_count {
        return Err(Error::InvalidSpec(format!(
            "shift expects {} source channels, source has {}",
            spec.shift.input_channels(),
            src.channel_count
        )));
    }
    if spec.source_noise < 0.0 || !spec.source_noise.is_finite() {
        return Err(Error::InvalidSpec("source_noise must be finite and >= 0".into()));
    }
    let tgt_classes = src.class_count + spec.shift.extra_classes;
    let tgt = SceneSpec {
        class_count: tgt_classes,
        channel_count: spec.shift.output_channels(),
        ..spec.target.clone()
    };
    tgt.validate(1)?;
    let signatures = draw_signatures(tgt_classes, src.channel_count, src.seed);
    let src_shift = DomainShiftSpec::uniform(src.channel_count, 1.0, 0.0, spec.source_noise);
    let n = spec.images_per_domain;

    let build = |scene: &SceneSpec, shift: &DomainShiftSpec, dom: u64| -> Result<Vec<(ImageTensor, LabelMask)>> {
        par::map_indexed(n, |i| {
            let s = SceneSpec {
                seed: image_seed(scene.seed, dom, i),
                ..scene.clone()
            };
            let mask = generate_scene(&s)?;
            let img = render_image(&mask, &signatures, shift, image_seed(scene.seed, dom + 2, i))?;
            Ok((img, mask))
        })
        .into_iter()
        .collect()
    };
    let (src_imgs, src_masks): (Vec<_>, Vec<_>) = build(src, &src_shift, 0)?.into_iter().unzip();
    let (tgt_imgs, tgt_masks): (Vec<_>, Vec<_>) = build(&tgt, &spec.shift, 1)?.into_iter().unzip();

    if spec.budget_per_class > 0 {
        let mut present = vec![false; tgt_classes];
        for m in &tgt_masks {
            for (c, &k) in m.histogram(tgt_classes).iter().enumerate() {
                present[c] |= k > 0;
            }
        }
        if let Some(c) = present.iter().position(|&p| !p) {
            return Err(Error::AbsentClass(c));
        }
    }
    let mut tgt_desc = domain_descriptor(tgt_classes, tgt.channel_count, tgt.height, tgt.width, n);
    tgt_desc.labeled_budget = select_target_labels(&tgt_masks, tgt_classes, spec.budget_per_class, tgt.seed);
    let source = DomainData {
        descriptor: domain_descriptor(src.class_count, src.channel_count, src.height, src.width, n),
        images: src_imgs,
        masks: src_masks,
    };
    let target = DomainData {
        descriptor: tgt_desc,
        images: tgt_imgs,
        masks: tgt_masks,
    };
    source.validate()?;
    target.validate()?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(h: usize, w: usize, classes: usize, seed: u64, scale: usize) -> SceneSpec {
        SceneSpec {
            height: h,
            width: w,
            class_count: classes,
            seed,
            region_scale: scale,
            channel_count: 3,
        }
    }

    #[test]
    fn all_classes_present() {
        let m = generate_scene(&scene(64, 64, 4, 7, 16)).unwrap();
        assert!(m.histogram(4).iter().all(|&c| c > 0));
    }

    #[test]
    fn coarse_scale_bounds_regions() {
        let m = generate_scene(&scene(16, 16, 2, 3, 32)).unwrap();
        let distinct: std::collections::BTreeSet<_> = m.data.iter().collect();
        assert!(distinct.len() <= 2);
    }

    #[test]
    fn deterministic() {
        let s = scene(40, 24, 5, 11, 8);
        assert_eq!(generate_scene(&s).unwrap(), generate_scene(&s).unwrap());
        assert!(generate_scene(&scene(0, 8, 2, 1, 4)).is_err());
    }

    #[test]
    fn identity_render_is_signature() {
        let m = generate_scene(&scene(8, 8, 2, 1, 4)).unwrap();
        let sigs = vec![vec![0.1, 0.2, 0.3], vec![0.7, 0.8, 0.9]];
        let img = render_image(&m, &sigs, &DomainShiftSpec::identity(3), 5).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let k = m.at(y, x) as usize;
                for c in 0..3 {
                    assert_eq!(img.at(c, y, x), sigs[k][c] as f32);
                }
            }
        }
    }

    #[test]
    fn gain_two() {
        let m = LabelMask::filled(2, 2, 0);
        let shift = DomainShiftSpec::uniform(2, 2.0, 0.0, 0.0);
        let img = render_image(&m, &[vec![1.0, 1.0]], &shift, 0).unwrap();
        assert!(img.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn missing_signature() {
        let m = LabelMask::filled(2, 2, 3);
        assert!(matches!(
            render_image(&m, &[vec![1.0, 1.0]], &DomainShiftSpec::identity(2), 0),
            Err(Error::MissingSignature(3))
        ));
    }

    #[test]
    fn noise_statistics() {
        let m = generate_scene(&scene(64, 64, 3, 2, 16)).unwrap();
        let sigs = draw_signatures(3, 3, 1);
        let shift = DomainShiftSpec::uniform(3, 1.0, 0.0, 0.1);
        let img = render_image(&m, &sigs, &shift, 9).unwrap();
        for k in 0..3 {
            for c in 0..3 {
                let vals: Vec<f64> = (0..64 * 64)
                    .filter(|&p| m.data[p] == k)
                    .map(|p| img.data[c * 4096 + p] as f64)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                let std = var.sqrt();
                assert!((std - 0.1).abs() < 0.01, "class {k} channel {c}: std {std}");
            }
        }
    }

    fn pair(budget: usize, extra: usize) -> PairSpec {
        let mut shift = DomainShiftSpec::uniform(3, 1.3, 0.1, 0.05);
        shift.extra_classes = extra;
        PairSpec {
            source: scene(32, 32, 4, 1, 8),
            target: scene(32, 32, 4, 2, 8),
            shift,
            images_per_domain: 2,
            budget_per_class: budget,
            source_noise: 0.0,
        }
    }

    #[test]
    fn budget_rules() {
        let (_, t) = make_domain_pair(&pair(0, 0)).unwrap();
        assert!(t.descriptor.labeled_budget.is_empty());
        let (_, t) = make_domain_pair(&pair(600, 0)).unwrap();
        let hist: Vec<usize> = (0..4)
            .map(|c| t.masks.iter().map(|m| m.histogram(4)[c]).sum())
            .collect();
        for c in 0..4 {
            let n = t.descriptor.labeled_budget.iter().filter(|l| l.2 == c).count();
            assert_eq!(n, hist[c].min(600));
        }
        let (_, t) = make_domain_pair(&pair(5, 0)).unwrap();
        for c in 0..4 {
            assert_eq!(t.descriptor.labeled_budget.iter().filter(|l| l.2 == c).count(), 5);
        }
    }

    #[test]
    fn open_set_target() {
        let (s, t) = make_domain_pair(&pair(3, 2)).unwrap();
        assert_eq!(s.descriptor.class_count, 4);
        assert_eq!(t.descriptor.class_count, 6);
    }

    #[test]
    fn absent_class_is_an_error_with_budget() {
        let mut p = pair(3, 0);
        p.target.region_scale = 64;
        p.images_per_domain = 1;
        assert!(matches!(make_domain_pair(&p), Err(Error::AbsentClass(_))));
        p.budget_per_class = 0;
        make_domain_pair(&p).unwrap();
    }

    #[test]
    fn selection_is_reproducible_and_bounded() {
        let masks = vec![generate_scene(&scene(16, 16, 3, 4, 8)).unwrap()];
        let a = select_target_labels(&masks, 4, 10, 1);
        assert_eq!(a, select_target_labels(&masks, 4, 10, 1));
        assert!(a.iter().all(|&(_, _, c)| c < 3));
        for &(i, p, c) in &a {
            assert_eq!(masks[i].data[p], c as i32);
        }
    }
}
