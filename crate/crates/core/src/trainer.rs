//! Joint training loop, AdamW, target label splits, model selection, the
//! four-configuration ablation and single-domain core pretraining.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmetrics::{self, ConfusionMatrix, MetricsReport};
use crate::mat::{cst, Mat, Scalar};
use crate::net::model::ObservedStats;
use crate::net::{update_running_stats, BnMode, DomainShape, ModelConfig, Network, ParamStore, Role, Tape, Var};
use crate::objectives::{masked_pixel_flags, LossBreakdown, LossParts, LossWeights};
use crate::par;
use crate::patchseq::{plan_mask, Domain, MaskPlan, PatchGrid};
use crate::raster::{ImageTensor, LabelMask, IGNORE};
use crate::synthgeo::select_target_labels;
use crate::tensorstore::{manifest_for, save_checkpoint, BudgetLabel, DomainData, OptimizerMoments};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    /// Validation cadence in steps; the final step is always evaluated.
    pub eval_every: usize,
    pub mask_ratio: f64,
    pub weights: LossWeights,
    pub seeds: Vec<u64>,
    /// Labeled target pixels per class, drawn per seed. `None` keeps the
    /// budget stored with the target dataset.
    pub budget_per_class: Option<usize>,
    /// Fraction of the non-budget target pixels held out for validation.
    pub val_fraction: f64,
    /// Image pairs whose gradients are averaged per optimizer step.
    pub grad_accum: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            optimizer: AdamWConfig::default(),
            steps: 2000,
            eval_every: 100,
            mask_ratio: 0.5,
            weights: LossWeights::default(),
            seeds: vec![0],
            budget_per_class: None,
            val_fraction: 0.1,
            grad_accum: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if self.grad_accum == 0 {
            return Err(Error::Config("grad_accum must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        self.weights.validate()
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_digest(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

// ---------------------------------------------------------------------------
// optimizer

/// Decoupled-weight-decay Adam over the trainable tensors of a store.
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub lr: f64,
    pub moments: OptimizerMoments,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, lr: f64, store: &ParamStore<f32>) -> Self {
        let mut moments = OptimizerMoments::default();
        for (name, p) in store.iter() {
            if p.role == Role::Trainable {
                moments.first.insert(name.clone(), Mat::zeros(p.value.rows, p.value.cols));
                moments.second.insert(name.clone(), Mat::zeros(p.value.rows, p.value.cols));
            }
        }
        AdamW { cfg, lr, moments }
    }

    /// One update. Tensors without a gradient still decay and advance their
    /// moments with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Mat<f32>>) -> Result<()> {
        self.moments.step += 1;
        let t = self.moments.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (lr, eps, wd) = (self.lr, self.cfg.eps, self.cfg.weight_decay);
        for (name, p) in store.iter_mut() {
            if p.role != Role::Trainable {
                continue;
            }
            let m = self
                .moments
                .first
                .get_mut(name)
                .ok_or_else(|| Error::MissingParameter(format!("adamw.m/{name}")))?;
            let v = self
                .moments
                .second
                .get_mut(name)
                .ok_or_else(|| Error::MissingParameter(format!("adamw.v/{name}")))?;
            let g = grads.get(name);
            for i in 0..p.value.data.len() {
                let gi = g.map_or(0.0, |g| g.data[i] as f64);
                let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
                m.data[i] = mi as f32;
                v.data[i] = vi as f32;
                let w = p.value.data[i] as f64;
                let upd = (mi / c1) / ((vi / c2).sqrt() + eps) + wd * w;
                p.value.data[i] = (w - lr * upd) as f32;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// one step's graph

/// Per-pixel labels over the cropped grid area.
pub fn crop_labels(mask: &LabelMask, grid: &PatchGrid) -> Vec<i32> {
    let (h, w) = (grid.crop_height(), grid.crop_width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(mask.at(y, x));
        }
    }
    out
}

/// Inputs of one training pair. Label vectors cover the cropped grid area.
pub struct StepInputs<'a> {
    pub source_image: &'a ImageTensor,
    pub source_labels: &'a [i32],
    pub target_image: &'a ImageTensor,
    /// IGNORE everywhere except budget pixels.
    pub target_labels: Option<&'a [i32]>,
    pub plan: &'a MaskPlan,
}

/// The recorded graph of one step's objective.
pub struct StepGraph<T> {
    pub tape: Tape<T>,
    pub seg: Var,
    pub da: Option<Var>,
    pub mae: Option<Var>,
    pub total: Var,
    pub parts: LossParts,
    pub stats: ObservedStats<T>,
}

fn has_labels(l: Option<&[i32]>) -> bool {
    l.is_some_and(|l| l.iter().any(|&v| v != IGNORE))
}

/// Builds the joint objective on a fresh tape. The target segmentation flow
/// runs when it carries budget labels or the alignment term is weighted;
/// the reconstruction flow runs when its weight is positive or
/// `force_all` is set.
pub fn build_step<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    inputs: &StepInputs,
    weights: &LossWeights,
    mode: BnMode,
    force_all: bool,
) -> Result<StepGraph<T>> {
    let mut tape = Tape::new();
    let mut stats = Vec::new();
    let mut parts = LossParts::default();

    let fs = net.segment_var(&mut tape, store, inputs.source_image, Domain::Source, mode)?;
    stats.extend(fs.stats);
    let (ce_s, n_s) = tape.cross_entropy(fs.out, inputs.source_labels.to_vec().into())?;
    let mut seg = ce_s;
    parts.seg_pixels = n_s;

    let tgt_labeled = has_labels(inputs.target_labels);
    let mut da = None;
    if tgt_labeled || weights.lambda_da > 0.0 || force_all {
        let ft = net.segment_var(&mut tape, store, inputs.target_image, Domain::Target, mode)?;
        stats.extend(ft.stats);
        if let (true, Some(l)) = (tgt_labeled, inputs.target_labels) {
            let (ce_t, n_t) = tape.cross_entropy(ft.out, l.to_vec().into())?;
            // mean over the labeled images of each image's pixel-mean CE
            let both = tape.add(seg, ce_t)?;
            seg = tape.scale(both, cst(0.5));
            parts.seg_pixels += n_t;
        }
        let e = tape.entropy(ft.out)?;
        parts.da_pixels = tape.value(ft.out).rows;
        da = Some(e);
    }
    parts.seg = tape.scalar(seg).to_f64().unwrap_or(f64::NAN);

    let mut mae = None;
    if weights.lambda_mae > 0.0 || force_all {
        let fr = net.reconstruct_var(&mut tape, store, inputs.source_image, inputs.target_image, inputs.plan, mode)?;
        stats.extend(fr.stats);
        let target: Mat<T> = net.prepare(inputs.target_image, Domain::Target)?;
        let flags = masked_pixel_flags(inputs.plan, net.grid(Domain::Target));
        let (m, n) = tape.masked_mse(fr.out, Rc::new(target), flags.into())?;
        parts.mae_pixels = n;
        mae = Some(m);
    }

    let mut total = seg;
    if let Some(d) = da {
        parts.da = tape.scalar(d).to_f64().unwrap_or(f64::NAN);
        total = tape.axpy(total, d, cst(weights.lambda_da))?;
    }
    if let Some(m) = mae {
        parts.mae = tape.scalar(m).to_f64().unwrap_or(f64::NAN);
        total = tape.axpy(total, m, cst(weights.lambda_mae))?;
    }
    Ok(StepGraph {
        tape,
        seg,
        da,
        mae,
        total,
        parts,
        stats,
    })
}

// ---------------------------------------------------------------------------
// target splits

/// Target supervision and evaluation pixels. Pixel ids index the cropped
/// grid area (`y * crop_w + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSplits {
    pub budget: Vec<BudgetLabel>,
    /// Per image: IGNORE except budget pixels.
    pub train_labels: Vec<Vec<i32>>,
    pub val: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

/// Budget labels as configured, then a seeded `val_fraction` of the
/// remaining labeled pixels for validation; everything else is test.
pub fn split_target(target: &DomainData, grid: &PatchGrid, cfg: &TrainConfig, seed: u64) -> Result<TargetSplits> {
    let classes = target.descriptor.class_count;
    let budget = match cfg.budget_per_class {
        Some(n) => select_target_labels(&target.masks, classes, n, seed),
        None => target.descriptor.labeled_budget.clone(),
    };
    let (ch, cw) = (grid.crop_height(), grid.crop_width());
    let n_img = target.masks.len();
    let mut train_labels = vec![vec![IGNORE; ch * cw]; n_img];
    let mut in_budget = vec![vec![false; ch * cw]; n_img];
    for &(i, p, c) in &budget {
        let w = target.masks[i].width;
        let (y, x) = (p / w, p % w);
        if target.masks[i].data[p] != c as i32 {
            return Err(Error::InvalidDataset(format!("budget label ({i}, {p}) disagrees with the mask")));
        }
        if y < ch && x < cw {
            train_labels[i][y * cw + x] = c as i32;
            in_budget[i][y * cw + x] = true;
        }
    }
    let mut pool = Vec::new();
    for (i, m) in target.masks.iter().enumerate() {
        for y in 0..ch {
            for x in 0..cw {
                if m.at(y, x) != IGNORE && !in_budget[i][y * cw + x] {
                    pool.push((i, y * cw + x));
                }
            }
        }
    }
    let n_val = (pool.len() as f64 * cfg.val_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1d_a7e5);
    let mut is_val = vec![false; pool.len()];
    for j in rand::seq::index::sample(&mut rng, pool.len(), n_val) {
        is_val[j] = true;
    }
    let mut val = vec![Vec::new(); n_img];
    let mut test = vec![Vec::new(); n_img];
    for (j, &(i, p)) in pool.iter().enumerate() {
        if is_val[j] {
            val[i].push(p);
        } else {
            test[i].push(p);
        }
    }
    Ok(TargetSplits {
        budget,
        train_labels,
        val,
        test,
    })
}

/// Target confusion matrix over the selected pixels of each image, with
/// predictions restricted to the target classes.
pub fn evaluate_target(net: &Network, store: &ParamStore<f32>, target: &DomainData, pixels: &[Vec<usize>]) -> Result<ConfusionMatrix> {
    let classes = net.target.classes;
    let grid = *net.grid(Domain::Target);
    let per_image: Vec<Result<ConfusionMatrix>> = par::map_indexed(target.images.len(), |i| {
        let mut cm = ConfusionMatrix::new(classes);
        if pixels.get(i).is_none_or(|p| p.is_empty()) {
            return Ok(cm);
        }
        let map = net.segment(store, &target.images[i], Domain::Target, BnMode::Eval)?;
        let pred = map.argmax(classes);
        let truth = crop_labels(&target.masks[i], &grid);
        cm.accumulate(&pred, &truth, Some(&pixels[i]))?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(classes);
    for cm in per_image {
        total.add(&cm?)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// training

pub fn domain_shape(d: &DomainData) -> DomainShape {
    DomainShape {
        channels: d.descriptor.channel_count,
        height: d.descriptor.height,
        width: d.descriptor.width,
        classes: d.descriptor.class_count,
    }
}

pub fn build_network(source: &DomainData, target: &DomainData, model: &ModelConfig, mask_ratio: f64) -> Result<Network> {
    Network::new(model.clone(), domain_shape(source), domain_shape(target), mask_ratio)
}

/// Everything one seeded run needs.
pub struct TrainJob<'a> {
    pub source: &'a DomainData,
    pub target: &'a DomainData,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
    /// Values copied over the `core.` tensors after initialization.
    pub core_init: Option<&'a ParamStore<f32>>,
    /// When set, receives `log.jsonl`, `best.ckpt`, `final.ckpt` and
    /// `report.json`.
    pub out_dir: Option<&'a Path>,
    pub config_digest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_miou: f64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

/// Serialized summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_miou: f64,
    pub evals: Vec<EvalPoint>,
    pub test: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub seed: u64,
    pub log: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_val_miou: f64,
    pub best_checkpoint: Option<PathBuf>,
    /// Test-split metrics of the selected model.
    pub test: MetricsReport,
    pub best_params: ParamStore<f32>,
    pub final_params: ParamStore<f32>,
    pub moments: OptimizerMoments,
}

impl RunRecord {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            seed: self.seed,
            steps: self.log.len(),
            best_step: self.best_step,
            best_val_miou: self.best_val_miou,
            evals: self.evals.clone(),
            test: self.test.clone(),
        }
    }
}

fn first_non_finite(p: &LossParts) -> Option<&'static str> {
    [("seg", p.seg), ("da", p.da), ("mae", p.mae)]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
}

/// Parameters for a job: fresh initialization plus optional core values.
pub fn initial_params(net: &Network, seed: u64, core_init: Option<&ParamStore<f32>>) -> Result<ParamStore<f32>> {
    let mut store = net.init_params::<f32>(seed);
    if let Some(core) = core_init {
        store.copy_values_from(core, crate::net::FROZEN_PREFIX)?;
    }
    Ok(store)
}

/// One seeded training run.
pub fn train(job: &TrainJob) -> Result<RunRecord> {
    let cfg = job.train;
    cfg.validate()?;
    job.source.validate()?;
    job.target.validate()?;
    let net = build_network(job.source, job.target, job.model, cfg.mask_ratio)?;
    let mut store = initial_params(&net, job.seed, job.core_init)?;
    let src_grid = *net.grid(Domain::Source);
    let tgt_grid = *net.grid(Domain::Target);
    let splits = split_target(job.target, &tgt_grid, cfg, job.seed)?;
    let src_labels: Vec<Vec<i32>> = job.source.masks.iter().map(|m| crop_labels(m, &src_grid)).collect();
    let mut opt = AdamW::new(cfg.optimizer.clone(), cfg.learning_rate, &store);
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed ^ 0x57e9_5eed);

    let mut log_file = match job.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("log.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };

    let (ns, nt) = (job.source.images.len(), job.target.images.len());
    let epoch_len = ns.max(nt);
    let mut perm_s: Vec<usize> = (0..ns).collect();
    let mut perm_t: Vec<usize> = (0..nt).collect();
    let mut cursor = 0usize;

    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let best_path = job.out_dir.map(|d| d.join("best.ckpt"));

    let mut evaluate = |step: usize, store: &ParamStore<f32>, evals: &mut Vec<EvalPoint>| -> Result<()> {
        let cm = evaluate_target(&net, store, job.target, &splits.val)?;
        let v = evalmetrics::miou(&cm);
        evals.push(EvalPoint { step, val_miou: v });
        log::debug!("seed {} step {step}: val mIoU {v:.4}", job.seed);
        if best.as_ref().is_none_or(|b| v > b.1) {
            if let Some(p) = &best_path {
                let manifest = manifest_for(store, step as u64, &job.config_digest, job.seed);
                save_checkpoint(store, None, &manifest, p)?;
            }
            best = Some((step, v, store.clone()));
        }
        Ok(())
    };

    for step in 0..cfg.steps {
        let mut grads: BTreeMap<String, Mat<f32>> = BTreeMap::new();
        let mut breakdown = LossBreakdown::default();
        for _ in 0..cfg.grad_accum {
            if cursor % epoch_len == 0 {
                perm_s.shuffle(&mut rng);
                perm_t.shuffle(&mut rng);
            }
            let (si, ti) = (perm_s[cursor % epoch_len % ns], perm_t[cursor % epoch_len % nt]);
            cursor += 1;
            let plan = plan_mask(&tgt_grid, cfg.mask_ratio, rng.next_u64())?;
            let tl = &splits.train_labels[ti];
            let inputs = StepInputs {
                source_image: &job.source.images[si],
                source_labels: &src_labels[si],
                target_image: &job.target.images[ti],
                target_labels: Some(tl),
                plan: &plan,
            };
            let g = build_step::<f32>(&net, &store, &inputs, &cfg.weights, BnMode::Train, false)?;
            if let Some(term) = first_non_finite(&g.parts) {
                return Err(Error::Divergence {
                    step,
                    term: term.to_string(),
                });
            }
            let b = crate::objectives::total_loss(&g.parts, &cfg.weights)?;
            for (name, gm) in g.tape.backward(g.total) {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&gm),
                    None => {
                        grads.insert(name, gm);
                    }
                }
            }
            update_running_stats(&mut store, &g.stats, job.model.head.bn_momentum)?;
            accumulate_breakdown(&mut breakdown, &b);
        }
        if cfg.grad_accum > 1 {
            let inv = 1.0 / cfg.grad_accum as f32;
            grads.values_mut().for_each(|m| m.data.iter_mut().for_each(|v| *v *= inv));
            scale_breakdown(&mut breakdown, 1.0 / cfg.grad_accum as f64);
        }
        if grads.values().any(|m| !m.all_finite()) {
            return Err(Error::Divergence {
                step,
                term: "gradient".into(),
            });
        }
        opt.step(&mut store, &grads)?;
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&LogLine { step, loss: &breakdown })?;
            writeln!(f, "{line}").map_err(|e| Error::io("log.jsonl", e))?;
        }
        log.push(breakdown);
        let done = step + 1;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps {
            evaluate(done, &store, &mut evals)?;
        }
    }
    if cfg.steps == 0 {
        evaluate(0, &store, &mut evals)?;
    }
    if let Some(mut f) = log_file {
        f.flush().map_err(|e| Error::io("log.jsonl", e))?;
    }
    let (best_step, best_val_miou, best_params) = best.expect("at least one evaluation");
    let test = MetricsReport::from_confusion(&evaluate_target(&net, &best_params, job.target, &splits.test)?);
    if let Some(dir) = job.out_dir {
        let mut manifest = manifest_for(&store, cfg.steps as u64, &job.config_digest, job.seed);
        manifest.optimizer_step = Some(opt.moments.step);
        save_checkpoint(&store, Some(&opt.moments), &manifest, dir.join("final.ckpt"))?;
    }
    let record = RunRecord {
        seed: job.seed,
        log,
        evals,
        best_step,
        best_val_miou,
        best_checkpoint: best_path,
        test,
        best_params,
        final_params: store,
        moments: opt.moments,
    };
    if let Some(dir) = job.out_dir {
        evalmetrics::write_report_json(dir.join("report.json"), &record.summary())?;
    }
    Ok(record)
}

fn accumulate_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.seg += b.seg;
    acc.da += b.da;
    acc.mae += b.mae;
    acc.total += b.total;
    acc.seg_pixels += b.seg_pixels;
    acc.da_pixels += b.da_pixels;
    acc.mae_pixels += b.mae_pixels;
}

fn scale_breakdown(b: &mut LossBreakdown, s: f64) {
    b.seg *= s;
    b.da *= s;
    b.mae *= s;
    b.total *= s;
}

/// Aggregate of a multi-seed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub aggregate: MetricsReport,
    pub runs: Vec<RunSummary>,
}

/// Runs every seed of `cfg` (in parallel when enabled), each in
/// `out_dir/seed_{s}`, and writes the aggregate `report.json`.
pub fn run_seeds(
    source: &DomainData,
    target: &DomainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    core_init: Option<&ParamStore<f32>>,
    out_dir: Option<&Path>,
    config_digest: &str,
) -> Result<(Vec<RunRecord>, SeedReport)> {
    cfg.validate()?;
    let dirs: Vec<Option<PathBuf>> = cfg
        .seeds
        .iter()
        .map(|s| out_dir.map(|d| d.join(format!("seed_{s}"))))
        .collect();
    let records: Vec<Result<RunRecord>> = par::map_indexed(cfg.seeds.len(), |i| {
        train(&TrainJob {
            source,
            target,
            model,
            train: cfg,
            seed: cfg.seeds[i],
            core_init,
            out_dir: dirs[i].as_deref(),
            config_digest: config_digest.to_string(),
        })
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = evalmetrics::aggregate_seeds(&records.iter().map(|r| r.test.clone()).collect::<Vec<_>>())?;
    let report = SeedReport {
        aggregate,
        runs: records.iter().map(|r| r.summary()).collect(),
    };
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        evalmetrics::write_report_json(d.join("report.json"), &report)?;
        evalmetrics::write_report_csv(d.join("report.csv"), &[("run".to_string(), report.aggregate.clone())])?;
    }
    Ok((records, report))
}

// ---------------------------------------------------------------------------
// ablation

pub const ABLATION_NAMES: [&str; 4] = ["L_Seg", "L_Seg+L_DA", "L_Seg+L_MAE", "L_Seg+L_DA+L_MAE"];

/// The four weight settings: none, alignment only, reconstruction only, both.
pub fn ablation_weights(w: &LossWeights) -> [LossWeights; 4] {
    [
        LossWeights {
            lambda_da: 0.0,
            lambda_mae: 0.0,
        },
        LossWeights {
            lambda_da: w.lambda_da,
            lambda_mae: 0.0,
        },
        LossWeights {
            lambda_da: 0.0,
            lambda_mae: w.lambda_mae,
        },
        *w,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub columns: Vec<(String, MetricsReport)>,
    pub runs: Vec<Vec<RunSummary>>,
}

/// Trains the four configurations over the same seeds and writes
/// `report.json` / `report.csv` with one column each.
pub fn ablate(
    source: &DomainData,
    target: &DomainData,
    model: &ModelConfig,
    cfg: &TrainConfig,
    core_init: Option<&ParamStore<f32>>,
    out_dir: Option<&Path>,
    config_digest: &str,
) -> Result<AblationReport> {
    let settings = ablation_weights(&cfg.weights);
    let results: Vec<Result<SeedReport>> = par::map_indexed(4, |k| {
        let c = TrainConfig {
            weights: settings[k],
            ..cfg.clone()
        };
        let dir = out_dir.map(|d| d.join(ABLATION_NAMES[k].replace('+', "_")));
        run_seeds(source, target, model, &c, core_init, dir.as_deref(), config_digest).map(|r| r.1)
    });
    let mut columns = Vec::new();
    let mut runs = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        let r = r?;
        columns.push((ABLATION_NAMES[k].to_string(), r.aggregate));
        runs.push(r.runs);
    }
    let report = AblationReport {
        seeds: cfg.seeds.clone(),
        columns,
        runs,
    };
    if let Some(d) = out_dir {
        evalmetrics::write_report_json(d.join("report.json"), &report)?;
        evalmetrics::write_report_csv(d.join("report.csv"), &report.columns)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// core pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub mask_ratio: f64,
    pub seed: u64,
    /// When false the core stays at its random initialization and only the
    /// embedding-side tensors and the temporary decoder learn.
    pub train_core: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            learning_rate: 1e-3,
            mask_ratio: 0.75,
            seed: 0,
            train_core: true,
        }
    }
}

const PRETRAIN_PREFIX: &str = "pretrain.";

/// Plain masked autoencoder over one domain: visible patches through the
/// core, a learned mask token at hidden positions and a linear pixel
/// decoder.
pub struct PlainMae {
    pub net: Network,
    patch_raw: Arc<[u32]>,
    channels: usize,
}

impl PlainMae {
    pub fn new(model: &ModelConfig, shape: DomainShape, mask_ratio: f64) -> Result<Self> {
        let shape = DomainShape {
            classes: shape.classes.max(2),
            ..shape
        };
        let net = Network::new(model.clone(), shape, shape, mask_ratio)?;
        let grid = *net.grid(Domain::Source);
        let patch_raw = grid.patch_gather(grid.crop_width(), shape.channels).into();
        Ok(PlainMae {
            net,
            patch_raw,
            channels: shape.channels,
        })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        let mut store = self.net.init_params::<f32>(seed);
        let d = self.net.cfg.core.embed_dim;
        let p = self.net.cfg.core.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0de);
        store.insert(
            format!("{PRETRAIN_PREFIX}mask_token"),
            crate::net::model::trunc_normal(&mut rng, 1, d, 0.02),
            Role::Trainable,
        );
        store.insert(
            format!("{PRETRAIN_PREFIX}head.weight"),
            crate::net::model::trunc_normal(&mut rng, d, p * p * self.channels, 0.02),
            Role::Trainable,
        );
        store.insert(format!("{PRETRAIN_PREFIX}head.bias"), Mat::zeros(1, p * p * self.channels), Role::Trainable);
        store
    }

    /// Masked-patch MSE on a tape.
    pub fn loss_var(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, img: &ImageTensor, plan: &MaskPlan) -> Result<(Var, usize)> {
        let net = &self.net;
        let grid = *net.grid(Domain::Source);
        let n = grid.n_patches();
        let d = net.cfg.core.embed_dim;
        let raw = net.prepare::<f32>(img, Domain::Source)?;
        let p2c = self.patch_raw.len() / n;
        let target = {
            let mut t = Mat::zeros(n, p2c);
            for (k, &j) in self.patch_raw.iter().enumerate() {
                t.data[k] = raw.data[j as usize];
            }
            t
        };
        let a = net.spectral_var(tape, store, raw, Domain::Source)?;
        let tok = net.tokens_var(tape, store, a, Domain::Source)?;
        let mut x = tape.select_rows(tok, &plan.unmasked_ids)?;
        for i in 0..net.cfg.core.depth {
            x = net.block_var(tape, store, &format!("core.blocks.{i}"), x)?;
        }
        let mt = tape.param(store, &format!("{PRETRAIN_PREFIX}mask_token"))?;
        // raster order: visible rows come from the encoder, hidden rows from
        // the mask token appended after them
        let vis = plan.unmasked_ids.len();
        let tokens = tape.concat_rows(x, mt)?;
        let mut slot = vec![vis; n];
        for (r, &id) in plan.unmasked_ids.iter().enumerate() {
            slot[id] = r;
        }
        let idx: Vec<u32> = (0..n)
            .flat_map(|i| (0..d).map(move |c| (i, c)))
            .map(|(i, c)| (slot[i] * d + c) as u32)
            .collect();
        let full = tape.gather(tokens, idx.into(), n, d)?;
        let pos = tape.param(store, "pos.source")?;
        let full = tape.add(full, pos)?;
        let hw = tape.param(store, &format!("{PRETRAIN_PREFIX}head.weight"))?;
        let hb = tape.param(store, &format!("{PRETRAIN_PREFIX}head.bias"))?;
        let out = tape.linear(full, hw, hb)?;
        let mut flags = vec![false; n];
        for &id in &plan.masked_ids {
            flags[id] = true;
        }
        tape.masked_mse(out, Rc::new(target), flags.into())
    }

    /// Mean masked-patch MSE over `images` with seeded masks.
    pub fn heldout_mse(&self, store: &ParamStore<f32>, images: &[ImageTensor], seed: u64) -> Result<f64> {
        let grid = *self.net.grid(Domain::Source);
        let vals: Vec<Result<f64>> = par::map_indexed(images.len(), |i| {
            let plan = plan_mask(&grid, self.net.mask_ratio, seed.wrapping_add(i as u64))?;
            let mut tape = Tape::new();
            let (v, _) = self.loss_var(&mut tape, store, &images[i], &plan)?;
            Ok(tape.scalar(v) as f64)
        });
        let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
    }
}

/// Pretraining result: the full pretraining store (core marked frozen) and
/// the model used, for held-out evaluation.
pub struct Pretrained {
    pub params: ParamStore<f32>,
    pub mae: PlainMae,
    pub losses: Vec<f64>,
}

/// Single-domain MAE on `dataset`, after which `core.*` is marked frozen.
pub fn pretrain_core(dataset: &DomainData, model: &ModelConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    dataset.validate()?;
    if dataset.images.is_empty() {
        return Err(Error::InvalidDataset("pretraining needs at least one image".into()));
    }
    if !(cfg.learning_rate > 0.0) || !(0.0..=1.0).contains(&cfg.mask_ratio) {
        return Err(Error::Config("invalid pretraining config".into()));
    }
    let mae = PlainMae::new(model, domain_shape(dataset), cfg.mask_ratio)?;
    let mut store = mae.init_params(cfg.seed);
    let core_role = if cfg.train_core { Role::Trainable } else { Role::Frozen };
    store.set_role_prefix(crate::net::FROZEN_PREFIX, core_role);
    let keep: Vec<String> = store
        .names()
        .into_iter()
        .filter(|n| {
            n.starts_with(crate::net::FROZEN_PREFIX)
                || n.starts_with(PRETRAIN_PREFIX)
                || n.starts_with("spectral.source")
                || n == "pos.source"
        })
        .collect();
    for name in store.names() {
        if !keep.contains(&name) {
            store.get_mut(&name)?.role = Role::Frozen;
        }
    }
    let mut opt = AdamW::new(AdamWConfig::default(), cfg.learning_rate, &store);
    let grid = *mae.net.grid(Domain::Source);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e7a_1a);
    let mut order: Vec<usize> = (0..dataset.images.len()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step % order.len() == 0 {
            order.shuffle(&mut rng);
        }
        let img = &dataset.images[order[step % order.len()]];
        let plan = plan_mask(&grid, cfg.mask_ratio, rng.next_u64())?;
        let mut tape = Tape::new();
        let (loss, _) = mae.loss_var(&mut tape, &store, img, &plan)?;
        let v = tape.scalar(loss) as f64;
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                term: "mae".into(),
            });
        }
        losses.push(v);
        let grads = tape.backward(loss);
        opt.step(&mut store, &grads)?;
    }
    // partition contract: exactly the core (incl. patch embedding) frozen
    for name in store.names() {
        let role = if name.starts_with(crate::net::FROZEN_PREFIX) {
            Role::Frozen
        } else {
            Role::Trainable
        };
        store.get_mut(&name)?.role = role;
    }
    Ok(Pretrained {
        params: store,
        mae,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{CoreConfig, HeadConfig};
    use crate::synthgeo::{make_domain_pair, DomainShiftSpec, PairSpec, SceneSpec};

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            core: CoreConfig {
                depth: 1,
                heads: 2,
                embed_dim: 16,
                mlp_ratio: 2,
                core_channels: 3,
                patch_size: 8,
            },
            head: HeadConfig {
                upsampler_blocks: 3,
                bn_momentum: 0.1,
            },
            ..Default::default()
        }
    }

    fn tiny_pair(budget: usize) -> (DomainData, DomainData) {
        let scene = |seed| SceneSpec {
            height: 32,
            width: 32,
            class_count: 3,
            seed,
            region_scale: 12,
            channel_count: 3,
        };
        make_domain_pair(&PairSpec {
            source: scene(1),
            target: scene(2),
            shift: DomainShiftSpec::uniform(3, 1.2, 0.05, 0.02),
            images_per_domain: 3,
            budget_per_class: budget,
            source_noise: 0.02,
        })
        .unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            steps,
            eval_every: 2,
            budget_per_class: Some(5),
            ..Default::default()
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::from_vec(1, 2, vec![1.0f32, -1.0]), Role::Trainable);
        store.insert("f", Mat::from_vec(1, 1, vec![3.0f32]), Role::Frozen);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 0.1, &store);
        assert!(!opt.moments.first.contains_key("f"));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Mat::from_vec(1, 2, vec![0.5f32, -2.0]));
        g.insert("f".to_string(), Mat::from_vec(1, 1, vec![1.0f32]));
        opt.step(&mut store, &g).unwrap();
        // bias-corrected first step is lr * sign(g) (up to eps)
        let w = &store.value("w").unwrap().data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.value("f").unwrap().data[0], 3.0);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let (_, t) = tiny_pair(0);
        let grid = PatchGrid::new(32, 32, 8).unwrap();
        let s = split_target(&t, &grid, &cfg(1), 3).unwrap();
        for i in 0..t.images.len() {
            let mut seen = vec![0u8; 32 * 32];
            for &p in s.val[i].iter().chain(&s.test[i]) {
                seen[p] += 1;
            }
            for (p, &l) in s.train_labels[i].iter().enumerate() {
                if l != IGNORE {
                    assert_eq!(l, t.masks[i].data[p]);
                    seen[p] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
        let n_val: usize = s.val.iter().map(Vec::len).sum();
        let n_budget = s.budget.len();
        assert_eq!(n_val, ((3 * 1024 - n_budget) as f64 * 0.1).round() as usize);
        assert_eq!(s, split_target(&t, &grid, &cfg(1), 3).unwrap());
    }

    #[test]
    fn short_run_is_deterministic_and_respects_frozen() {
        let (s, t) = tiny_pair(0);
        let model = tiny_model();
        let c = cfg(3);
        let job = |seed| TrainJob {
            source: &s,
            target: &t,
            model: &model,
            train: &c,
            seed,
            core_init: None,
            out_dir: None,
            config_digest: "x".into(),
        };
        let a = train(&job(4)).unwrap();
        let b = train(&job(4)).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.evals.len(), 2);
        assert_eq!(a.best_val_miou, a.evals.iter().map(|e| e.val_miou).fold(f64::MIN, f64::max));
        let net = build_network(&s, &t, &model, 0.5).unwrap();
        let init = net.init_params::<f32>(4);
        for name in init.names_with_role(Role::Frozen) {
            assert_eq!(init.value(&name).unwrap(), a.final_params.value(&name).unwrap());
        }
        assert!(a.moments.first.keys().all(|k| !k.starts_with("core.")));
    }

    #[test]
    fn zero_weights_skip_reconstruction() {
        let (s, t) = tiny_pair(0);
        let mut c = cfg(1);
        c.weights = LossWeights::new(0.0, 0.0).unwrap();
        c.budget_per_class = Some(0);
        let model = tiny_model();
        let r = train(&TrainJob {
            source: &s,
            target: &t,
            model: &model,
            train: &c,
            seed: 0,
            core_init: None,
            out_dir: None,
            config_digest: String::new(),
        })
        .unwrap();
        assert_eq!(r.log[0].mae_pixels, 0);
        assert_eq!(r.log[0].da_pixels, 0);
        assert_eq!(r.log[0].total, r.log[0].seg);
    }

    #[test]
    fn pretrain_partition() {
        let (s, _) = tiny_pair(0);
        let p = pretrain_core(
            &s,
            &tiny_model(),
            &PretrainConfig {
                steps: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let frozen = p.params.names_with_role(Role::Frozen);
        assert!(!frozen.is_empty());
        assert!(frozen.iter().all(|n| n.starts_with("core.")));
        assert!(p.params.names().iter().filter(|n| n.starts_with("core.")).all(|n| frozen.contains(n)));
        assert!(frozen.contains(&"core.patch_embed.weight".to_string()));
    }

    #[test]
    fn digest_is_stable() {
        let a = config_digest(&TrainConfig::default()).unwrap();
        assert_eq!(a, config_digest(&TrainConfig::default()).unwrap());
        assert_eq!(a.len(), 64);
        assert_ne!(a, config_digest(&cfg(1)).unwrap());
    }
}
