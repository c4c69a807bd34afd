//! End-to-end drivers behind the CLI: batch inference to map files,
//! dataset evaluation against a directory of saved maps, and the two
//! ablation tables (fusion variants and loss terms).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{unpack, Checkpoint};
use crate::config::Config;
use crate::data::{load_examples, resize_image, resize_plane, DatasetManifest};
use crate::error::PipelineError;
use crate::fusion::FusionVariant;
use crate::image;
use crate::metrics::{evaluate_dataset, EvalReport, DEFAULT_LAMBDA};
use crate::model::{stack_batch, Model};
use crate::objective::LossMode;
use crate::reflect::{separate, SepParams};
use crate::tensor::{Tape, Tensor};
use crate::train::{train, TrainOptions};

/// Saliency map for one [3, H, W] image, at the image's own resolution.
/// The image is resampled to the model's input size, separated against the
/// checkpointed mean (or fed twice raw), pushed through in eval mode, and
/// the map resampled back.
pub fn predict_map(
    model: &mut Model,
    sep: &SepParams,
    reflect: bool,
    image: &Tensor,
) -> Result<Vec<f64>, PipelineError> {
    let size = model.config.input_size;
    let resized = resize_image(image, size)?;
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let (x_t, x_r) = if reflect {
        let pair = separate(&resized, sep)?;
        (pair.transmitted, pair.reflected)
    } else {
        (resized.clone(), resized)
    };
    let mut tape = Tape::new();
    let (bound, _) = model.register(&mut tape);
    let t = tape.constant(stack_batch(&[x_t])?);
    let r = tape.constant(stack_batch(&[x_r])?);
    let sal = model.forward(&mut tape, &bound, t, r, false)?;
    Ok(resize_plane(tape.value(sal).values(), size, size, h, w))
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "map".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Writes one grayscale P5 map per input image into `out_dir`, named by the
/// input's stem. Reruns are byte-identical: eval mode uses only frozen
/// statistics and the quantization is deterministic.
pub fn infer(
    ckpt_path: &Path,
    images: &[PathBuf],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let mut state = unpack(&Checkpoint::load(ckpt_path)?)?;
    let sep = SepParams::new(state.model.config.k, state.mean);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::io(out_dir.display().to_string(), e))?;
    let mut written = Vec::with_capacity(images.len());
    for path in images {
        let img = image::load(path)?;
        let (h, w) = (img.height, img.width);
        let map = predict_map(&mut state.model, &sep, true, &image::to_tensor(&img)?)?;
        let out_path = out_dir.join(format!("{}.pgm", stem_of(path)));
        image::save(&out_path, &image::from_map(&map, h, w)?)?;
        written.push(out_path);
    }
    Ok(written)
}

/// Scores every manifest entry against the map saved under its image stem
/// in `maps_dir`.
pub fn eval_maps(
    manifest: &DatasetManifest,
    maps_dir: &Path,
    eta2: f64,
    lambda: f64,
) -> Result<EvalReport, PipelineError> {
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let stem = stem_of(Path::new(&entry.image));
        let map_path = maps_dir.join(format!("{stem}.pgm"));
        if !map_path.exists() {
            return Err(PipelineError::invalid(format!(
                "no saliency map for entry {} (expected {})",
                entry.image,
                map_path.display()
            )));
        }
        let map = image::to_map(&image::load(&map_path)?)?;
        let gt = image::to_mask(&image::load(&manifest.mask_path(entry))?)?;
        pairs.push((stem, map, gt));
    }
    Ok(evaluate_dataset(&pairs, eta2, lambda)?)
}

/// One ablation table row: the dataset means for a trained variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub f_eta: f64,
    pub f_max: f64,
    pub mae: f64,
    pub s_lambda: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    /// Five fusion variants plus the raw-RGB-duplicate contrast.
    pub fusion: Vec<AblationRow>,
    /// Four loss modes plus the full objective repeated as its own row.
    pub losses: Vec<AblationRow>,
}

pub const FUSION_TABLE: &str = "fusion.csv";
pub const LOSS_TABLE: &str = "loss.csv";

/// Fusion rows: every variant with pair separation, then the best variant
/// fed the raw image twice.
const FUSION_RUNS: &[(&str, FusionVariant, bool)] = &[
    ("input", FusionVariant::Input, true),
    ("early", FusionVariant::Early, true),
    ("late", FusionVariant::Late, true),
    ("adhoc", FusionVariant::Adhoc, true),
    ("hyper", FusionVariant::Hyper, true),
    ("hyper_rgb", FusionVariant::Hyper, false),
];

/// Loss rows on the config's own variant. "full" repeats the complete
/// objective under the identical seed and budget; since every run is a
/// pure function of (config, manifest), its row must equal "wbce_sp"
/// exactly, which doubles as an end-to-end determinism check.
const LOSS_RUNS: &[(&str, LossMode)] = &[
    ("bce", LossMode::Bce),
    ("wbce", LossMode::Wbce),
    ("bce_sp", LossMode::BceSp),
    ("wbce_sp", LossMode::WbceSp),
    ("full", LossMode::WbceSp),
];

fn table_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("model,f_eta,f_max,mae,s_lambda\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.name, r.f_eta, r.f_max, r.mae, r.s_lambda);
    }
    out
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|e| PipelineError::io(path.display().to_string(), e))
}

/// Trains every ablation variant under the config's seed and step budget,
/// saves each run's maps under `out_dir/maps/<run>/`, and writes the two
/// tables. Table cells are the dataset means computed from the saved maps
/// after reloading them, so re-scoring the artifacts reproduces every cell.
pub fn ablate(
    config: &Config,
    manifest: &DatasetManifest,
    out_dir: &Path,
    on_progress: &mut dyn FnMut(&str),
) -> Result<AblationReport, PipelineError> {
    let examples = load_examples(manifest)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::io(out_dir.display().to_string(), e))?;

    let mut run = |name: &str,
                   variant: FusionVariant,
                   mode: LossMode,
                   reflect: bool|
     -> Result<AblationRow, PipelineError> {
        let cfg = Config { fusion_variant: variant, ..config.clone() };
        on_progress(&format!("training {name}"));
        let outcome = train(&cfg, &examples, TrainOptions { mode, reflect }, None, &mut |_| {})?;
        let mut state = outcome.state;
        let sep = SepParams::new(cfg.k, state.mean);
        let dir = out_dir.join("maps").join(name);
        std::fs::create_dir_all(&dir)
            .map_err(|e| PipelineError::io(dir.display().to_string(), e))?;
        for ex in &examples {
            let map = predict_map(&mut state.model, &sep, reflect, &ex.image)?;
            let img = image::from_map(&map, ex.height, ex.width)?;
            image::save(&dir.join(format!("{}.pgm", ex.name)), &img)?;
        }
        let mean = eval_maps(manifest, &dir, cfg.eta2, DEFAULT_LAMBDA)?.mean;
        Ok(AblationRow {
            name: name.to_string(),
            f_eta: mean.f_eta,
            f_max: mean.f_max,
            mae: mean.mae,
            s_lambda: mean.s_lambda,
        })
    };

    let mut fusion = Vec::with_capacity(FUSION_RUNS.len());
    for &(name, variant, reflect) in FUSION_RUNS {
        fusion.push(run(name, variant, LossMode::WbceSp, reflect)?);
    }
    let mut losses = Vec::with_capacity(LOSS_RUNS.len());
    for &(name, mode) in LOSS_RUNS {
        losses.push(run(name, config.fusion_variant, mode, true)?);
    }

    write_file(&out_dir.join(FUSION_TABLE), &table_csv(&fusion))?;
    write_file(&out_dir.join(LOSS_TABLE), &table_csv(&losses))?;
    Ok(AblationReport { fusion, losses })
}
