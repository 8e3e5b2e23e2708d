use std::path::Path;

use serde::Serialize;

use geoadapt::evalmetrics::{self, MetricsReport, SweepInputs};
use geoadapt::insight;
use geoadapt::net::ParamStore;
use geoadapt::tensorstore::{load_checkpoint, manifest_for, save_checkpoint, write_domain, Checkpoint};
use geoadapt::trainer;

use crate::config::{Overrides, RunConfig};
use crate::{Common, Failure};

fn resolve(c: &Common, extra: Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    let mut o = c.overrides();
    o.mask_ratios = extra.mask_ratios;
    cfg.apply(&o)?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), Failure> {
    evalmetrics::write_report_json(path, v).map_err(|e| Failure::runtime("output", e))
}

fn load_ckpt(path: &Path, cfg: &RunConfig, strict: bool) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(Failure::config(format!("checkpoint {} does not exist", path.display())));
    }
    let digest = if strict { Some(cfg.digest()?) } else { None };
    load_checkpoint(path, digest.as_deref()).map_err(|e| Failure::runtime("checkpoint loading", e))
}

fn core_init(path: Option<&Path>, cfg: &RunConfig) -> Result<Option<ParamStore<f32>>, Failure> {
    path.map(|p| load_ckpt(p, cfg, false).map(|c| c.params)).transpose()
}

pub fn gen_data(c: &Common) -> Result<(), Failure> {
    let cfg = resolve(c, Overrides::default())?;
    if cfg.data.synthetic.is_none() {
        return Err(Failure::config("gen-data needs a `data.synthetic` section"));
    }
    let (src, tgt) = cfg.load_data()?;
    let dir = cfg.out_dir.clone();
    write_domain(dir.join("source"), &src).map_err(|e| Failure::runtime("data writing", e))?;
    write_domain(dir.join("target"), &tgt).map_err(|e| Failure::runtime("data writing", e))?;
    cfg.write_resolved(&dir)?;
    log::info!("wrote {} and {}", dir.join("source").display(), dir.join("target").display());
    Ok(())
}

pub fn train(c: &Common, core: Option<&Path>) -> Result<(), Failure> {
    let cfg = resolve(c, Overrides::default())?;
    let init = core_init(core, &cfg)?;
    let (src, tgt) = cfg.load_data()?;
    cfg.write_resolved(&cfg.out_dir)?;
    let digest = cfg.digest()?;
    let (_, report) = trainer::run_seeds(&src, &tgt, &cfg.model, &cfg.train, init.as_ref(), Some(&cfg.out_dir), &digest)
        .map_err(|e| Failure::runtime("training", e))?;
    let a = &report.aggregate;
    println!(
        "mIoU {:.4} ± {:.4}  MA {:.4} ± {:.4}  mF1 {:.4} ± {:.4}  ({} seeds)",
        a.miou, a.miou_std, a.ma, a.ma_std, a.mf1, a.mf1_std, a.runs
    );
    Ok(())
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: usize,
    final_loss: Option<f64>,
    heldout_mse: f64,
}

pub fn pretrain_core(c: &Common) -> Result<(), Failure> {
    let cfg = resolve(c, Overrides::default())?;
    let (src, tgt) = cfg.load_data()?;
    let p = trainer::pretrain_core(&src, &cfg.model, &cfg.pretrain).map_err(|e| Failure::runtime("pretraining", e))?;
    cfg.write_resolved(&cfg.out_dir)?;
    let digest = cfg.digest()?;
    let manifest = manifest_for(&p.params, cfg.pretrain.steps as u64, &digest, cfg.pretrain.seed);
    save_checkpoint(&p.params, None, &manifest, cfg.out_dir.join("core.ckpt"))
        .map_err(|e| Failure::runtime("checkpoint writing", e))?;
    // held-out images: the target domain when it shares the source's shape
    let heldout = if tgt.descriptor.channel_count == src.descriptor.channel_count
        && tgt.descriptor.height == src.descriptor.height
        && tgt.descriptor.width == src.descriptor.width
    {
        &tgt.images
    } else {
        &src.images
    };
    let mse = p
        .mae
        .heldout_mse(&p.params, heldout, cfg.pretrain.seed ^ 0xe7a1)
        .map_err(|e| Failure::runtime("pretraining evaluation", e))?;
    write_json(
        &cfg.out_dir.join("pretrain.json"),
        &PretrainSummary {
            steps: p.losses.len(),
            final_loss: p.losses.last().copied(),
            heldout_mse: mse,
        },
    )?;
    println!("held-out masked MSE {mse:.6}");
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: String,
    seed: u64,
    step: u64,
    test: MetricsReport,
}

pub fn eval(c: &Common, ckpt: &Path, strict: bool) -> Result<(), Failure> {
    let cfg = resolve(c, Overrides::default())?;
    let ck = load_ckpt(ckpt, &cfg, strict)?;
    let (src, tgt) = cfg.load_data()?;
    let net = trainer::build_network(&src, &tgt, &cfg.model, cfg.train.mask_ratio).map_err(Failure::config_err)?;
    net.check_params(&ck.params).map_err(|e| Failure::runtime("checkpoint validation", e))?;
    let grid = *net.grid(geoadapt::patchseq::Domain::Target);
    let splits = trainer::split_target(&tgt, &grid, &cfg.train, ck.manifest.seed).map_err(|e| Failure::runtime("evaluation", e))?;
    let cm = trainer::evaluate_target(&net, &ck.params, &tgt, &splits.test).map_err(|e| Failure::runtime("evaluation", e))?;
    let report = MetricsReport::from_confusion(&cm);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure::runtime("output", e))?;
    write_json(
        &cfg.out_dir.join("report.json"),
        &EvalSummary {
            checkpoint: ckpt.display().to_string(),
            seed: ck.manifest.seed,
            step: ck.manifest.step,
            test: report.clone(),
        },
    )?;
    evalmetrics::write_report_csv(cfg.out_dir.join("report.csv"), &[("checkpoint".into(), report.clone())])
        .map_err(|e| Failure::runtime("output", e))?;
    println!("mIoU {:.4}  MA {:.4}  mF1 {:.4}", report.miou, report.ma, report.mf1);
    Ok(())
}

pub fn reconstruct(c: &Common, ckpt: &Path, ratios: Option<Vec<f64>>, strict: bool) -> Result<(), Failure> {
    let cfg = resolve(
        c,
        Overrides {
            mask_ratios: ratios,
            ..Default::default()
        },
    )?;
    let ck = load_ckpt(ckpt, &cfg, strict)?;
    let (src, tgt) = cfg.load_data()?;
    let net = trainer::build_network(&src, &tgt, &cfg.model, cfg.train.mask_ratio).map_err(Failure::config_err)?;
    net.check_params(&ck.params).map_err(|e| Failure::runtime("checkpoint validation", e))?;
    let dump = cfg.out_dir.join("reconstructions");
    std::fs::create_dir_all(&dump).map_err(|e| Failure::runtime("output", e))?;
    let inputs = SweepInputs {
        sources: &src.images,
        targets: &tgt.images,
        target_masks: &tgt.masks,
        seed: cfg.eval.sweep_seed,
        dump_dir: cfg.eval.dump_tensors.then_some(dump.as_path()),
    };
    let records = evalmetrics::reconstruction_sweep(&net, &ck.params, &inputs, &cfg.eval.ratios)
        .map_err(|e| Failure::runtime("reconstruction sweep", e))?;
    write_json(&cfg.out_dir.join("sweep.json"), &records)?;
    for r in &records {
        match r.mse {
            Some(m) => println!("ratio {:.2}: masked MSE {m:.6}", r.ratio),
            None => println!("ratio {:.2}: no masked pixels", r.ratio),
        }
    }
    Ok(())
}

pub fn ablate(c: &Common, core: Option<&Path>) -> Result<(), Failure> {
    let cfg = resolve(c, Overrides::default())?;
    let init = core_init(core, &cfg)?;
    let (src, tgt) = cfg.load_data()?;
    cfg.write_resolved(&cfg.out_dir)?;
    let digest = cfg.digest()?;
    let report = trainer::ablate(&src, &tgt, &cfg.model, &cfg.train, init.as_ref(), Some(&cfg.out_dir), &digest)
        .map_err(|e| Failure::runtime("ablation", e))?;
    print!("{}", evalmetrics::report_csv(&report.columns, None));
    Ok(())
}

pub fn verify_math(seed: u64, models: usize, out: Option<&Path>) -> Result<(), Failure> {
    if models == 0 {
        return Err(Failure::config("--models must be >= 1"));
    }
    let report = insight::run_all(seed, models).map_err(|e| Failure::runtime("verification", e))?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::runtime("output", e))?;
    println!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::runtime("output", e))?;
        write_json(&dir.join("verify_math.json"), &report)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::runtime("verification", format!("identities failed: {}", failed.join(", "))))
    }
}
