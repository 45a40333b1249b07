//! Full-reference quality metrics, external scorers and the evaluation
//! loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::data::{load_pair, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::{crop, reflect_pad, save_image, ImageTensor, LoadOptions};
use crate::losses::{self, SsimMode};
use crate::model::Model;
use crate::unet::SIZE_MULTIPLE;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn check_same(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

pub fn mse(pred: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    check_same(pred, reference, "mse")?;
    let (p, r) = (pred.tensor().data(), reference.tensor().data());
    let sum: f64 = p.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / p.len() as f64)
}

/// `10 log10(max_val^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &ImageTensor, reference: &ImageTensor, max_val: f64) -> Result<f64> {
    let m = mse(pred, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP))
}

pub fn mae(pred: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    check_same(pred, reference, "mae")?;
    let (p, r) = (pred.tensor().data(), reference.tensor().data());
    let sum: f64 = p.iter().zip(r).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(sum / p.len() as f64)
}

pub fn ssim(pred: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    losses::ssim(pred, reference, SsimMode::Windowed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerMode {
    FullReference,
    NoReference,
}

/// A metric computed by an external program.
///
/// The program is run as `command... <output.png> [<reference.png>]` and must
/// print one decimal number on a single line. A nonzero exit status or
/// anything unparsable is a scorer failure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalScorer {
    pub name: String,
    pub mode: ScorerMode,
    pub command: Vec<String>,
}

impl ExternalScorer {
    /// Parse `name=mode:program arg...`, where mode is `fr` or `nr`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |msg: &str| Error::config("scorer", format!("`{spec}`: {msg}"));
        let (name, rest) = spec.split_once('=').ok_or_else(|| bad("expected name=mode:command"))?;
        let (mode, cmd) = rest.split_once(':').ok_or_else(|| bad("expected name=mode:command"))?;
        let mode = match mode {
            "fr" => ScorerMode::FullReference,
            "nr" => ScorerMode::NoReference,
            _ => return Err(bad("mode must be `fr` or `nr`")),
        };
        let command: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
        if name.is_empty() || command.is_empty() {
            return Err(bad("name and command must be nonempty"));
        }
        Ok(ExternalScorer {
            name: name.to_string(),
            mode,
            command,
        })
    }

    pub fn score(&self, output: &Path, reference: Option<&Path>) -> Result<f64> {
        let fail = |msg: String| Error::ScorerFailure {
            name: self.name.clone(),
            msg,
        };
        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..]).arg(output);
        match (self.mode, reference) {
            (ScorerMode::FullReference, Some(r)) => {
                cmd.arg(r);
            }
            (ScorerMode::FullReference, None) => {
                return Err(Error::MissingReference(format!("scorer `{}` needs a reference", self.name)))
            }
            (ScorerMode::NoReference, _) => {}
        }
        let out = cmd.output().map_err(|e| fail(format!("could not run {}: {e}", self.command[0])))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exit status {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let lines: Vec<&str> = stdout.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        match lines[..] {
            [line] => line
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("output `{line}` is not a number"))),
            _ => Err(fail(format!("expected one output line, got {}", lines.len()))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    Ssim,
    Mae,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Metric::Psnr, Metric::Ssim, Metric::Mae].into_iter().find(|m| m.name() == s)
    }

    pub fn compute(self, pred: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(pred, reference, 1.0),
            Metric::Ssim => ssim(pred, reference),
            Metric::Mae => mae(pred, reference),
        }
    }
}

/// Mean of `values`, summed in sorted order so the result does not depend
/// on the order the values were collected in.
pub fn order_independent_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Column order for tables.
    pub metrics: Vec<String>,
    pub per_image: Vec<ImageScores>,
    /// Scorer failures as `id: message`; the affected cells are left out.
    pub failures: Vec<String>,
}

#[derive(Serialize)]
struct AggregateJson<'a> {
    n: usize,
    metrics: &'a [String],
    aggregate: BTreeMap<String, f64>,
    failures: &'a [String],
}

impl MetricReport {
    pub fn new(metrics: Vec<String>) -> Self {
        MetricReport {
            metrics,
            ..Default::default()
        }
    }

    pub fn n(&self) -> usize {
        self.per_image.len()
    }

    pub fn push(&mut self, scores: ImageScores) {
        self.per_image.push(scores);
    }

    /// Combine two partial reports over the same metrics.
    pub fn merge(&mut self, other: MetricReport) {
        for m in other.metrics {
            if !self.metrics.contains(&m) {
                self.metrics.push(m);
            }
        }
        self.per_image.extend(other.per_image);
        self.failures.extend(other.failures);
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.per_image
            .iter()
            .filter_map(|s| s.scores.get(metric).copied())
            .collect()
    }

    /// Mean per metric over the images that have a value for it.
    pub fn aggregate(&self) -> BTreeMap<String, f64> {
        self.metrics
            .iter()
            .map(|m| (m.clone(), order_independent_mean(&self.values(m))))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["id".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for s in &self.per_image {
            let mut row = vec![s.id.clone()];
            row.extend(
                self.metrics
                    .iter()
                    .map(|m| s.scores.get(m).map(|v| format!("{v:.6}")).unwrap_or_default()),
            );
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&AggregateJson {
            n: self.n(),
            metrics: &self.metrics,
            aggregate: self.aggregate(),
            failures: &self.failures,
        })
        .expect("plain data serialises")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Two-line text table of the aggregate values.
    pub fn table(&self) -> String {
        let agg = self.aggregate();
        let head: Vec<String> = self.metrics.iter().map(|m| format!("{m:>10}")).collect();
        let vals: Vec<String> = self.metrics.iter().map(|m| format!("{:>10.4}", agg[m])).collect();
        format!("{:>6} {}\n{:>6} {}", "n", head.join(" "), self.n(), vals.join(" "))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Io {
            path: path.into(),
            source: std::io::Error::other(format!("{other:?}")),
        },
    }
}

/// Anything that maps an input image to an enhanced image of the same size.
pub trait Enhancer {
    fn enhance_image(&self, img: &ImageTensor) -> Result<ImageTensor>;
}

/// Returns its input; evaluating it gives the input/reference baseline.
pub struct Identity;

impl Enhancer for Identity {
    fn enhance_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(img.clone())
    }
}

impl Enhancer for Model<f32> {
    fn enhance_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.enhance(img)?.output)
    }
}

/// Runs an enhancer on arbitrary sizes by reflect-padding to the next
/// multiple of 16 and cropping back.
pub struct PadCrop<'a, E: ?Sized>(pub &'a E);

impl<E: Enhancer + ?Sized> Enhancer for PadCrop<'_, E> {
    fn enhance_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (h, w) = (img.height(), img.width());
        if h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0 {
            return self.0.enhance_image(img);
        }
        let padded = reflect_pad(img, SIZE_MULTIPLE)?;
        crop(&self.0.enhance_image(&padded)?, h, w)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    /// Resize inputs and references to this size; `None` evaluates at native
    /// resolution with pad/crop.
    pub size: Option<(usize, usize)>,
    pub metrics: Vec<Metric>,
    pub scorers: Vec<ExternalScorer>,
    pub load: LoadOptions,
    /// Where scorer inputs are written; a temporary directory is used when
    /// unset.
    pub work_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            size: Some(crate::data::DEFAULT_SIZE),
            metrics: vec![Metric::Psnr, Metric::Ssim, Metric::Mae],
            scorers: Vec::new(),
            load: LoadOptions::default(),
            work_dir: None,
        }
    }
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Score `enhancer` on every entry of `manifest`.
pub fn evaluate<E: Enhancer + ?Sized>(enhancer: &E, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(Error::Layout("nothing to evaluate: the manifest is empty".into()));
    }
    let needs_ref = !opts.metrics.is_empty() || opts.scorers.iter().any(|s| s.mode == ScorerMode::FullReference);
    if needs_ref {
        if let Some(e) = manifest.entries.iter().find(|e| e.reference.is_none()) {
            let what: Vec<&str> = opts
                .metrics
                .iter()
                .map(|m| m.name())
                .chain(
                    opts.scorers
                        .iter()
                        .filter(|s| s.mode == ScorerMode::FullReference)
                        .map(|s| s.name.as_str()),
                )
                .collect();
            return Err(Error::MissingReference(format!(
                "{} need a reference image but `{}` has none; use no-reference scorers for unpaired data",
                what.join(", "),
                e.id
            )));
        }
    }
    let mut names: Vec<String> = opts.metrics.iter().map(|m| m.name().to_string()).collect();
    names.extend(opts.scorers.iter().map(|s| s.name.clone()));
    let mut report = MetricReport::new(names);

    let temp;
    let work_dir = match (&opts.work_dir, opts.scorers.is_empty()) {
        (_, true) => None,
        (Some(d), false) => Some(d.clone()),
        (None, false) => {
            temp = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            Some(temp.path().to_path_buf())
        }
    };
    if let Some(d) = &work_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    for entry in &manifest.entries {
        let sample = load_pair(entry, opts.size, opts.load)?;
        let output = PadCrop(enhancer).enhance_image(&sample.low)?;
        let mut scores = BTreeMap::new();
        if let Some(r) = &sample.reference {
            for m in &opts.metrics {
                scores.insert(m.name().to_string(), m.compute(&output, r)?);
            }
        }
        if let Some(dir) = &work_dir {
            let stem = file_safe(&entry.id);
            let out_path = dir.join(format!("{stem}_output.png"));
            save_image(&output, &out_path)?;
            let ref_path = match &sample.reference {
                Some(r) => {
                    let p = dir.join(format!("{stem}_reference.png"));
                    save_image(r, &p)?;
                    Some(p)
                }
                None => None,
            };
            for s in &opts.scorers {
                let reference = match s.mode {
                    ScorerMode::FullReference => ref_path.as_deref(),
                    ScorerMode::NoReference => None,
                };
                match s.score(&out_path, reference) {
                    Ok(v) => {
                        scores.insert(s.name.clone(), v);
                    }
                    Err(e @ Error::ScorerFailure { .. }) => {
                        log::warn!("{}: {e}", entry.id);
                        report.failures.push(format!("{}: {e}", entry.id));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        report.push(ImageScores {
            id: entry.id.clone(),
            scores,
        });
    }
    Ok(report)
}
