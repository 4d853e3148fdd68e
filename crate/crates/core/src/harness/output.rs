use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ImageFormat, RunConfig};
use crate::attention::Mask;
use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::schedule::TimestepField;

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

/// Interleaved 8-bit pixels of a 1- or 3-channel latent.
fn interleave(image: &LatentState) -> Result<Vec<u8>> {
    let (c, _, _) = image.shape();
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot write a {c}-channel image"
        )));
    }
    let plane = image.pixels();
    Ok((0..plane)
        .flat_map(|p| (0..c).map(move |ch| (ch, p)))
        .map(|(ch, p)| to_byte(image.data()[ch * plane + p]))
        .collect())
}

/// Binary PPM (3 channels) or PGM (1 channel), mapping `[-1, 1]` to `[0, 255]`.
pub fn write_pnm(path: &Path, image: &LatentState) -> Result<()> {
    let bytes = interleave(image)?;
    let magic = if image.channels() == 3 { "P6" } else { "P5" };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{magic}\n{} {}\n255\n", image.width(), image.height())?;
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn write_png(path: &Path, image: &LatentState) -> Result<()> {
    let bytes = interleave(image)?;
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, image.width() as u32, image.height() as u32);
    encoder.set_color(if image.channels() == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Writes `stem.ppm`/`stem.pgm` or `stem.png`; returns the file name.
pub fn write_image(dir: &Path, stem: &str, image: &LatentState, format: ImageFormat) -> Result<String> {
    let name = match (format, image.channels()) {
        (ImageFormat::Png, _) => format!("{stem}.png"),
        (ImageFormat::Ppm, 3) => format!("{stem}.ppm"),
        (ImageFormat::Ppm, _) => format!("{stem}.pgm"),
    };
    match format {
        ImageFormat::Png => write_png(&dir.join(&name), image)?,
        ImageFormat::Ppm => write_pnm(&dir.join(&name), image)?,
    }
    Ok(name)
}

pub fn mask_image(mask: &Mask) -> LatentState {
    let data = mask
        .values()
        .iter()
        .map(|&m| if m { 1.0 } else { -1.0 })
        .collect();
    LatentState::from_vec(1, mask.height(), mask.width(), data).expect("mask dims")
}

/// `step,pixel_row,pixel_col,timestep,masked`, one row per pixel per step.
/// The final field has no driving mask and is written with `masked = 0`.
pub fn write_trace_csv(path: &Path, fields: &[TimestepField], masks: &[Mask]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "step,pixel_row,pixel_col,timestep,masked")?;
    for (step, field) in fields.iter().enumerate() {
        for r in 0..field.height() {
            for c in 0..field.width() {
                let masked = masks.get(step).is_some_and(|m| m.get(r, c));
                writeln!(out, "{step},{r},{c},{},{}", field.get(r, c), u8::from(masked))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes the resolved config plus the command so the run can be repeated.
pub fn write_run_manifest(dir: &Path, command: &str, config: &RunConfig, outputs: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = format!(
        "# asyndiff {} run manifest\n# command: {command}\n# config_fingerprint: {}\n",
        env!("CARGO_PKG_VERSION"),
        config.fingerprint()
    );
    for o in outputs {
        text.push_str(&format!("# output: {o}\n"));
    }
    text.push_str(&config.to_toml());
    fs::write(dir.join("run.toml"), text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: String,
    pub value: f64,
    pub sample_count: usize,
    pub tolerance: f64,
    /// Whether the metric counts toward the report's pass/fail.
    pub gated: bool,
    pub passed: bool,
}

impl MetricResult {
    /// Passes when `value <= tolerance`.
    pub fn at_most(metric: &str, value: f64, tolerance: f64, sample_count: usize) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            sample_count,
            tolerance,
            gated: true,
            passed: value <= tolerance,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(metric: &str, value: f64, threshold: f64, sample_count: usize) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            sample_count,
            tolerance: threshold,
            gated: true,
            passed: value >= threshold,
        }
    }

    pub fn info(metric: &str, value: f64, sample_count: usize) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            sample_count,
            tolerance: f64::NAN,
            gated: false,
            passed: true,
        }
    }
}

/// Self-describing evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub command: String,
    pub config_fingerprint: String,
    pub metrics: Vec<MetricResult>,
    pub passed: bool,
}

impl EvalReport {
    pub fn new(command: &str, config: &RunConfig, metrics: Vec<MetricResult>) -> Self {
        let passed = metrics.iter().filter(|m| m.gated).all(|m| m.passed);
        Self {
            command: command.to_string(),
            config_fingerprint: config.fingerprint(),
            metrics,
            passed,
        }
    }

    pub fn metric(&self, name: &str) -> Option<&MetricResult> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {}\n",
            self.command,
            if self.passed { "PASS" } else { "FAIL" }
        );
        for m in &self.metrics {
            let status = match (m.gated, m.passed) {
                (false, _) => "info",
                (true, true) => "pass",
                (true, false) => "FAIL",
            };
            s.push_str(&format!(
                "  [{status}] {} = {:.6} (tolerance {}, n = {})\n",
                m.metric, m.value, m.tolerance, m.sample_count
            ));
        }
        s
    }
}
