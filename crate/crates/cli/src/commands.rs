use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use baris_core::ParamStore;
use baris_harness::dataset::{read_dataset, split, write_dataset};
use baris_harness::model::{describe_backbone, AdapterSettings, BackboneConfig, FreezeMode, Pipeline};
use baris_harness::train::validate;
use baris_harness::LossKind;
use baris_models::audit::{render_json, render_tsv, swin_b_reference, AuditRow};
use baris_models::{count_params, run_suite, Pool, Scheme, SuiteModule};
use serde_json::json;

use crate::config::{EraSection, RunConfig, SceneSection};
use crate::{CliError, EvalArgs, GenDataArgs, GradCheckArgs, ParamAuditArgs, TrainArgs};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(format!("stdout: {e}")))
}

/// `v` or `lo,hi`.
fn parse_range(flag: &str, s: &str) -> Result<[f32; 2], CliError> {
    let bad = || CliError::Usage(format!("--{flag} expects `v` or `lo,hi`, got `{s}`"));
    let parts: Vec<f32> = s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    match parts[..] {
        [v] => Ok([v, v]),
        [lo, hi] => Ok([lo, hi]),
        _ => Err(bad()),
    }
}

fn parse_enum<T: serde::de::DeserializeOwned>(flag: &str, s: &str) -> Result<T, CliError> {
    serde_json::from_value(json!(s)).map_err(|_| CliError::Usage(format!("--{flag}: unknown value `{s}`")))
}

pub fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut scene: SceneSection = match &a.config {
        Some(p) => RunConfig::load(p)?.scene,
        None => SceneSection::default(),
    };
    if let Some(v) = a.size {
        scene.size = v;
    }
    if let Some(v) = a.max_instances {
        scene.max_instances = v;
    }
    let ranges = [
        ("red", &a.red, &mut scene.red),
        ("green", &a.green, &mut scene.green),
        ("blue", &a.blue, &mut scene.blue),
        ("blur-sigma", &a.blur_sigma, &mut scene.blur_sigma),
        ("haze", &a.haze, &mut scene.haze),
        ("noise-sigma", &a.noise_sigma, &mut scene.noise_sigma),
    ];
    for (flag, given, slot) in ranges {
        if let Some(s) = given {
            *slot = parse_range(flag, s)?;
        }
    }
    let cfg = scene.to_scene_config()?;
    write_dataset(&a.out, a.seed, a.count, &cfg)?;
    emit(out, &format!("wrote {} scenes to {}\n", a.count, a.out.display()))
}

/// Config file (if any) with the command-line overrides applied.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.data {
        cfg.data.dir = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if a.max_steps.is_some() {
        cfg.train.max_steps = a.max_steps;
    }
    if let Some(v) = &a.loss {
        cfg.loss.kind = parse_enum::<LossKind>("loss", v)?;
    }
    if let Some(v) = a.bace_scale {
        cfg.loss.bace_scale = v;
    }
    if let Some(v) = a.bace_lambda {
        cfg.loss.bace_lambda = v;
    }
    if let Some(v) = &a.bace_pool {
        cfg.loss.bace_pool = Pool::from_str(v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = &a.freeze {
        cfg.model.freeze = parse_enum::<FreezeMode>("freeze", v)?;
    }
    if a.era || a.gamma.is_some() || a.num_envs.is_some() {
        let era = cfg.era.get_or_insert_with(EraSection::default);
        if let Some(g) = a.gamma {
            era.gamma = g;
        }
        if let Some(n) = a.num_envs {
            era.num_envs = n;
        }
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_train_config(a)?;
    let train_cfg = cfg.train_config()?;
    fs::create_dir_all(&a.out).map_err(io(&a.out))?;
    let resolved = a.out.join("resolved.json");
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Failed(e.to_string()))?;
    fs::write(&resolved, text + "\n").map_err(io(&resolved))?;

    let samples = read_dataset(&cfg.data.dir)?;
    let (train_set, val_set) = split(samples, cfg.data.train_fraction);
    log::info!("{} training and {} validation scenes from {}", train_set.len(), val_set.len(), cfg.data.dir.display());
    let outcome = baris_harness::train(&train_cfg, &train_set, &val_set, Some(&a.out), &mut |_| {})?;
    if let Some(last) = outcome.records.last() {
        let line = serde_json::to_string(last).map_err(|e| CliError::Failed(e.to_string()))?;
        emit(out, &format!("{line}\n"))?;
    }
    Ok(())
}

fn latest_epoch(run: &Path) -> Result<usize, CliError> {
    let dir = run.join("checkpoints");
    fs::read_dir(&dir)
        .map_err(io(&dir))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_prefix("epoch_")?.parse().ok())
        .max()
        .ok_or_else(|| CliError::Failed(format!("{}: no checkpoints", dir.display())))
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = RunConfig::load(&a.run.join("resolved.json"))?;
    let epoch = match a.epoch {
        Some(e) => e,
        None => latest_epoch(&a.run)?,
    };
    let mut store = ParamStore::<f32>::new();
    let pipeline = Pipeline::new(&mut store, cfg.seed, cfg.pipeline())?;
    store.load(&a.run.join("checkpoints").join(format!("epoch_{epoch:03}")))?;
    let data = a.data.clone().unwrap_or(cfg.data.dir.clone());
    let (_, val_set) = split(read_dataset(&data)?, cfg.data.train_fraction);
    let scores = validate(&pipeline, &store, &val_set, 25)?;
    let report = json!({
        "epoch": epoch,
        "scenes": val_set.len(),
        "mask_iou": scores.mask_iou,
        "boundary_f": scores.boundary_f,
    });
    emit(out, &format!("{report}\n"))
}

pub fn grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let module = SuiteModule::from_str(&a.module).map_err(|e| CliError::Usage(e.to_string()))?;
    let checks = run_suite(module, a.seed)?;
    let mut text = String::from("check\tmax_rel_error\ttolerance\tdraws\tstatus\n");
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        text.push_str(&format!("{}\t{:.3e}\t{:.0e}\t{}\t{status}\n", c.name, c.max_rel_error, c.tolerance, c.draws));
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    text.push_str(&format!("{} checks, {failed} failed\n", checks.len()));
    emit(out, &text)?;
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}

pub fn param_audit(a: &ParamAuditArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let schemes: Vec<Scheme> = if a.scheme == "all" {
        Scheme::ALL.to_vec()
    } else {
        vec![Scheme::from_str(&a.scheme).map_err(|e| CliError::Usage(e.to_string()))?]
    };
    let rows: Vec<AuditRow> = match a.backbone.as_str() {
        "toy" => {
            let settings = AdapterSettings {
                gamma: a.gamma,
                num_envs: a.num_envs,
            };
            let (backbone, adapters) = describe_backbone(BackboneConfig::AUDIT, settings)?;
            schemes
                .iter()
                .map(|&scheme| AuditRow {
                    scheme,
                    budget: count_params(scheme, &backbone, &adapters),
                })
                .collect()
        }
        "swin-b-ref" => schemes
            .iter()
            .map(|&scheme| AuditRow {
                scheme,
                budget: swin_b_reference(scheme),
            })
            .collect(),
        other => return Err(CliError::Usage(format!("unknown backbone `{other}` (expected toy or swin-b-ref)"))),
    };
    match a.format.as_str() {
        "tsv" => emit(out, &render_tsv(&rows)),
        "json" => emit(out, &format!("{:#}\n", render_json(&rows))),
        other => Err(CliError::Usage(format!("unknown format `{other}` (expected tsv or json)"))),
    }
}
