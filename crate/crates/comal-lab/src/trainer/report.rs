//! Consolidated reports over a run directory: summary CSV plus rendered
//! sample grids (input / ground truth / per-regime predictions).

use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{history_from_csv, Checkpoint};
use super::config::TrainConfig;
use super::{generate_datasets, RunManifest};
use crate::eval;
use crate::synthworld::CLASS_NAMES;
use crate::{Error, Result};

/// Samples rendered into the qualitative grid.
const RENDER_COUNT: usize = 4;

/// Build `<dir>/report` from the artifacts in `dir`. Re-running is
/// idempotent (byte-identical outputs). Missing inputs are reported
/// together.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest_path = dir.join("manifest.json");
    let config_path = dir.join("config.txt");
    let mut missing = Vec::new();
    for p in [&manifest_path, &config_path] {
        if !p.exists() {
            missing.push(p.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let cfg = TrainConfig::parse(&fs::read_to_string(&config_path)?)?;

    // locate per-regime artifacts
    let regime_dir = |name: &str| -> PathBuf {
        if manifest.kind == "ablation" {
            dir.join("regimes").join(name)
        } else {
            dir.to_path_buf()
        }
    };
    let mut required = Vec::new();
    if manifest.kind == "ablation" {
        required.push(dir.join("ablation.csv"));
    }
    for name in &manifest.regimes {
        required.push(regime_dir(name).join("metrics.csv"));
        required.push(regime_dir(name).join("checkpoint.ndgc"));
    }
    let missing: Vec<String> = required
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }

    let out = dir.join("report");
    fs::create_dir_all(&out)?;
    let mut written = Vec::new();

    // summary over final evaluated epochs
    let mut summary = String::from("regime,epoch,miou,tail_iou");
    for name in CLASS_NAMES {
        summary.push_str(",iou_");
        summary.push_str(name);
    }
    summary.push('\n');
    for name in &manifest.regimes {
        let history = history_from_csv(&fs::read_to_string(regime_dir(name).join("metrics.csv"))?)?;
        let last = history
            .iter()
            .rev()
            .find(|m| m.miou >= 0.0)
            .ok_or_else(|| Error::Parse(format!("{name}: no evaluated epoch in metrics.csv")))?;
        summary.push_str(&format!(
            "{name},{},{:.6},{:.6}",
            last.epoch, last.miou, last.tail_iou
        ));
        for v in &last.per_class {
            summary.push_str(&format!(",{v:.6}"));
        }
        summary.push('\n');
    }
    let summary_path = out.join("summary.csv");
    fs::write(&summary_path, summary)?;
    written.push(summary_path);

    if manifest.kind == "ablation" {
        let echo = out.join("ablation.csv");
        fs::write(&echo, fs::read_to_string(dir.join("ablation.csv"))?)?;
        written.push(echo);
    }

    // qualitative grid on the first eval samples
    let data = generate_datasets(&cfg)?;
    let palette = eval::default_palette();
    let shown = data.eval.iter().take(RENDER_COUNT).collect::<Vec<_>>();
    for (i, sample) in shown.iter().enumerate() {
        let input_path = out.join(format!("sample{i}_input.ppm"));
        fs::write(&input_path, eval::render_image(&sample.image)?)?;
        written.push(input_path);
        let gt_path = out.join(format!("sample{i}_gt.ppm"));
        fs::write(&gt_path, eval::render(&sample.labels, &palette)?)?;
        written.push(gt_path);
    }
    for name in &manifest.regimes {
        let ckpt = Checkpoint::load(&regime_dir(name).join("checkpoint.ndgc"))?;
        let net = ckpt.net.frozen();
        for (i, sample) in shown.iter().enumerate() {
            let pred = eval::argmax_labels(&net.forward(&sample.image)?.probs)?;
            let path = out.join(format!("sample{i}_{name}.ppm"));
            fs::write(&path, eval::render(&pred, &palette)?)?;
            written.push(path);
        }
    }
    Ok(written)
}
