//! Command implementations shared by the binary and tests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::hsi_io::{emit_class_map, read_pair, synth_scene, HsiCube, LabelMap, Palette};
use crate::model::Model;
use crate::peft::{param_report, set_trainable, ParamReport, TrainMode};
use crate::preprocess::{apply_pca_whiten, extract_patches, fit_pca, stratified_split, PatchSet, PcaModel};
use crate::train::{evaluate, loss_trace_csv, predict_map, train, Checkpoint, MetricsReport};

use super::config::{load_config, RunConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const PCA_FILE: &str = "pca.hsip";
pub const CHECKPOINT_FILE: &str = "checkpoint.hsck";
pub const LOSS_FILE: &str = "loss_trace.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.txt";

pub fn load_scene(cfg: &RunConfig) -> Result<(HsiCube, LabelMap)> {
    match (&cfg.data.cube, &cfg.data.labels, &cfg.data.synth) {
        (Some(c), Some(l), _) => read_pair(c, l),
        (_, _, Some(s)) => {
            let scene = synth_scene(&s.spec())?;
            Ok((scene.cube, scene.labels))
        }
        _ => Err(Error::config("data: no cube/labels pair and no synth section")),
    }
}

/// Patches of the whitened scene with a stratified split over patch labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub patches: PatchSet,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub classes: usize,
}

pub fn prepare(cfg: &RunConfig, cube: &HsiCube, labels: &LabelMap, pca: &PcaModel) -> Result<Prepared> {
    let white = apply_pca_whiten(cube, pca)?;
    let patches = extract_patches(&white, labels, cfg.patches.p, cfg.patches.mode)?;
    if patches.is_empty() {
        return Err(Error::config("no labeled patches"));
    }
    // Split indices are patch indices, whatever the patch mode.
    let flat = LabelMap::new(1, patches.len(), patches.labels().to_vec())?;
    let split = stratified_split(&flat, cfg.split.fraction, cfg.split.seed)?;
    Ok(Prepared {
        train: split.train_indices(),
        test: split.test_indices(),
        classes: labels.num_classes(),
        patches,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates `<root>/run-YYYYmmdd-HHMMSS`, suffixed on collision.
pub fn create_run_dir(root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

#[derive(Debug)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub metrics: MetricsReport,
    pub loss_trace: Vec<(u64, f64)>,
    pub warnings: Vec<String>,
}

/// Full pipeline into a fresh run directory under `cfg.out.dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let (cube, labels) = load_scene(cfg)?;
    let pca = fit_pca(&cube, cfg.pca.k)?;
    let data = prepare(cfg, &cube, &labels, &pca)?;
    let mut model = Model::<f32>::new(cfg.model_config(data.classes), cfg.train.seed)?;

    let dir = create_run_dir(&cfg.out.dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    pca.write(dir.join(PCA_FILE))?;
    log::info!(
        "run {}: {} train / {} test patches, {} classes",
        dir.display(),
        data.train.len(),
        data.test.len(),
        data.classes
    );

    let ck_path = dir.join(CHECKPOINT_FILE);
    let outcome = train(
        &mut model,
        &data.patches,
        &data.train,
        &cfg.train_config(),
        &cfg.clr,
        None,
        |r| r.checkpoint.write(&ck_path),
    )?;
    outcome.checkpoint.write(&ck_path)?;
    write_text(&dir.join(LOSS_FILE), &loss_trace_csv(&outcome.loss_trace))?;

    let metrics = evaluate(&mut model, &data.patches, &data.test)?;
    metrics.write_csv(dir.join(METRICS_FILE))?;
    let mut report = param_report(&model).to_text();
    report.push_str(&format!("oa={}\naa={}\nkappa={}\n", metrics.oa, metrics.aa, metrics.kappa));
    write_text(&dir.join(REPORT_FILE), &report)?;

    let mut warnings = model.warnings.clone();
    warnings.extend(outcome.warnings);
    Ok(TrainRun {
        dir,
        metrics,
        loss_trace: outcome.loss_trace,
        warnings,
    })
}

/// A trained run reloaded from its directory.
pub struct LoadedRun {
    pub config: RunConfig,
    pub cube: HsiCube,
    pub labels: LabelMap,
    pub pca: PcaModel,
    pub model: Model<f32>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = load_config(dir.join(CONFIG_FILE))?;
    let (cube, labels) = load_scene(&config)?;
    let pca = PcaModel::read(dir.join(PCA_FILE))?;
    let mut model = Model::<f32>::new(config.model_config(labels.num_classes()), config.train.seed)?;
    Checkpoint::read(dir.join(CHECKPOINT_FILE))?.load_params(&mut model)?;
    model.set_mode(crate::numerics::Mode::Eval);
    Ok(LoadedRun {
        config,
        cube,
        labels,
        pca,
        model,
    })
}

/// Test-split metrics of a trained run.
pub fn run_eval(dir: &Path) -> Result<MetricsReport> {
    let mut run = load_run(dir)?;
    let data = prepare(&run.config, &run.cube, &run.labels, &run.pca)?;
    evaluate(&mut run.model, &data.patches, &data.test)
}

/// Classifies every pixel of the run's scene and writes a PPM image.
pub fn run_map(dir: &Path, output: &Path) -> Result<LabelMap> {
    let mut run = load_run(dir)?;
    let map = predict_map(&mut run.model, &run.cube, &run.pca, run.config.patches.p)?;
    emit_class_map(&map, &Palette::new(run.labels.num_classes(), 0), output)?;
    Ok(map)
}

/// Writes `scene.hsic` and `scene.hsil` from the synthetic data section.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let spec = cfg
        .data
        .synth
        .as_ref()
        .ok_or_else(|| Error::config("data.synth: required by the synth command"))?;
    let scene = synth_scene(&spec.spec())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (c, l) = (out.join("scene.hsic"), out.join("scene.hsil"));
    scene.cube.write(&c)?;
    scene.labels.write(&l)?;
    Ok((c, l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interleave {
    /// Pixel-major: all bands of a pixel are contiguous.
    Bip,
    /// Band-major: one full image per band.
    Bsq,
}

/// Raw little-endian f32 stream to an HSIC cube.
pub fn run_convert(
    raw: &Path,
    dims: (usize, usize, usize),
    interleave: Interleave,
    output: &Path,
) -> Result<HsiCube> {
    let bytes = fs::read(raw).map_err(|e| Error::io(raw, e))?;
    let (h, w, c) = dims;
    let expected = h * w * c * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("raw stream has {} bytes, {h}x{w}x{c} floats need {expected}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let cube = match interleave {
        Interleave::Bip => HsiCube::new(h, w, c, values)?,
        Interleave::Bsq => HsiCube::from_band_sequential(h, w, c, &values)?,
    };
    cube.write(output)?;
    Ok(cube)
}

/// Fits PCA on the configured cube and writes `pca.hsip` and `whitened.hsic`.
pub fn run_preprocess(cfg: &RunConfig, out: &Path) -> Result<PcaModel> {
    let (cube, _) = load_scene(cfg)?;
    let pca = fit_pca(&cube, cfg.pca.k)?;
    let white = apply_pca_whiten(&cube, &pca)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    pca.write(out.join(PCA_FILE))?;
    white.write(out.join("whitened.hsic"))?;
    Ok(pca)
}

/// Parameter report of the configured model; the class count comes from
/// the synthetic scene settings or the label file. Trainable counts are those of
/// LoRA-only training.
pub fn run_report(cfg: &RunConfig) -> Result<ParamReport> {
    let classes = match (&cfg.data.labels, &cfg.data.synth) {
        (Some(l), _) => LabelMap::read(l)?.num_classes(),
        (None, Some(s)) => s.classes,
        _ => return Err(Error::config("data: cannot determine the class count")),
    };
    let mut model = Model::<f32>::new(cfg.model_config(classes), cfg.train.seed)?;
    set_trainable(&mut model, TrainMode::Peft);
    Ok(param_report(&model))
}
