//! Command implementations behind the `mts` binary. Each command is a plain
//! function over paths so integration tests can drive them without spawning
//! a process.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{self, Dataset, Domain};
use crate::error::{MtsError, Result};
use crate::eval::{self, EvalReport, InferenceRule};
use crate::nn::NetworkBundle;
use crate::trainer::{self, Ablation};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::write(dir.join("config.resolved"), cfg.to_resolved_string())?;
    Ok(())
}

fn load_pair(data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let source = data::load_csv(&data_dir.join("source.csv"))?;
    let target = data::load_csv(&data_dir.join("target.csv"))?;
    if source.dim != target.dim {
        return Err(MtsError::Data(format!(
            "feature dimension mismatch: source {} vs target {}",
            source.dim, target.dim
        )));
    }
    Ok((source, target))
}

/// Generates the synthetic source/target pair and writes it as CSV.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (source, target) = data::generate(&cfg.shift)?;
    data::save_csv(&source, &out.join("source.csv"))?;
    data::save_csv(&target, &out.join("target.csv"))?;
    write_resolved_config(cfg, out)?;
    println!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        out.display()
    );
    Ok(())
}

/// Trains on a generated dataset directory; emits checkpoint and history.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_resolved_config(cfg, out)?;
    let (source, target) = load_pair(data_dir)?;
    let history_path = out.join("history.csv");
    let (bundle, history) =
        trainer::train(&source, &target, &cfg.hp, cfg.ablation, Some(&history_path))?;
    std::fs::write(&history_path, history.to_csv())?;
    bundle.save_checkpoint(&out.join("checkpoint.txt"))?;
    if let Some(last) = history.records.last() {
        println!(
            "trained {} epochs ({}): OS={:.4} OS*={:.4} Unk={:.4}",
            cfg.hp.epochs,
            cfg.ablation.name(),
            last.os,
            last.os_star,
            last.unk
        );
    }
    Ok(())
}

/// Scores a checkpoint on the target split and prints the metric table.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    out: Option<&Path>,
    rule: InferenceRule,
) -> Result<EvalReport> {
    let bundle = NetworkBundle::load_checkpoint(checkpoint)?;
    let target = data::load_csv(&data_dir.join("target.csv"))?;
    let report = eval::evaluate_target(&bundle, &target, rule)?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
    }
    print!("{}", report.to_table());
    Ok(report)
}

/// Runs the ablation sweep on one shared dataset; each variant gets its own
/// subdirectory and the sweep ends with a comparison table.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_resolved_config(cfg, out)?;
    let (source, target) = data::generate(&cfg.shift)?;
    data::save_csv(&source, &out.join("source.csv"))?;
    data::save_csv(&target, &out.join("target.csv"))?;

    let mut rows: Vec<(Ablation, EvalReport)> = Vec::new();
    for variant in Ablation::SWEEP {
        let dir = out.join(variant.name());
        ensure_dir(&dir)?;
        let mut vcfg = cfg.clone();
        vcfg.ablation = variant;
        write_resolved_config(&vcfg, &dir)?;
        let history_path = dir.join("history.csv");
        let (bundle, history) =
            trainer::train(&source, &target, &cfg.hp, variant, Some(&history_path))?;
        std::fs::write(&history_path, history.to_csv())?;
        bundle.save_checkpoint(&dir.join("checkpoint.txt"))?;
        let rule = match variant {
            Ablation::SourceOnly => InferenceRule::MaxProbThreshold(cfg.hp.tau),
            _ => InferenceRule::Cy2Argmax,
        };
        let report = eval::evaluate_target(&bundle, &target, rule)?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        println!(
            "{:<12} OS={:.4} OS*={:.4} Unk={:.4}",
            variant.name(),
            report.os,
            report.os_star,
            report.unk
        );
        rows.push((variant, report));
    }

    let mut comparison = String::from("variant,os,os_star,unk\n");
    for (variant, report) in &rows {
        let _ = writeln!(
            comparison,
            "{},{},{},{}",
            variant.name(),
            report.os,
            report.os_star,
            report.unk
        );
    }
    std::fs::write(out.join("comparison.csv"), &comparison)?;

    println!("\n{:<12} {:>8} {:>8} {:>8}", "variant", "OS", "OS*", "Unk");
    for (variant, report) in &rows {
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4}",
            variant.name(),
            report.os,
            report.os_star,
            report.unk
        );
    }
    Ok(())
}

// SVG palette: pink source, blue target-known, grey target-unknown.
const COLOR_SOURCE: &str = "#e377c2";
const COLOR_TARGET_KNOWN: &str = "#1f77b4";
const COLOR_TARGET_UNKNOWN: &str = "#7f7f7f";

/// Renders the first two G_f2 feature dimensions of both domains as an SVG
/// scatter plot. Fully deterministic text output.
pub fn cmd_plot(checkpoint: &Path, data_dir: &Path, out_svg: &Path) -> Result<()> {
    let bundle = NetworkBundle::load_checkpoint(checkpoint)?;
    if bundle.dims.feat < 2 {
        return Err(MtsError::Config(format!(
            "plot needs a feature dimension of at least 2, checkpoint has {}",
            bundle.dims.feat
        )));
    }
    let (source, target) = load_pair(data_dir)?;
    let k = source.k;

    let mut points: Vec<(f64, f64, &'static str)> = Vec::new();
    for ds in [&source, &target] {
        let feats = bundle.features(crate::nn::GroupId::F2, &ds.all_features())?;
        for (i, s) in ds.samples.iter().enumerate() {
            let color = match (s.domain, s.y > k) {
                (Domain::Source, _) => COLOR_SOURCE,
                (Domain::Target, false) => COLOR_TARGET_KNOWN,
                (Domain::Target, true) => COLOR_TARGET_UNKNOWN,
            };
            points.push((feats.get(i, 0), feats.get(i, 1), color));
        }
    }
    if points.is_empty() {
        return Err(MtsError::Data("plot: no samples".into()));
    }

    let (width, height, margin) = (640.0, 480.0, 40.0);
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for &(x, y, _) in &points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let xspan = (xmax - xmin).max(1e-9);
    let yspan = (ymax - ymin).max(1e-9);
    let sx = |x: f64| margin + (x - xmin) / xspan * (width - 2.0 * margin);
    // SVG y grows downward; flip so larger feature values plot higher.
    let sy = |y: f64| height - margin - (y - ymin) / yspan * (height - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    for &(x, y, color) in &points {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            sx(x),
            sy(y),
            color
        );
    }
    let legend = [
        (COLOR_SOURCE, "source"),
        (COLOR_TARGET_KNOWN, "target known"),
        (COLOR_TARGET_UNKNOWN, "target unknown"),
    ];
    for (i, (color, label)) in legend.iter().enumerate() {
        let y = 20.0 + 16.0 * i as f64;
        let _ = writeln!(svg, "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/>", width - 140.0, y, color);
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>",
            width - 130.0,
            y + 4.0,
            label
        );
    }
    svg.push_str("</svg>\n");

    if let Some(parent) = out_svg.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_svg, &svg)?;
    println!("wrote {} ({} points)", out_svg.display(), points.len());
    Ok(())
}
