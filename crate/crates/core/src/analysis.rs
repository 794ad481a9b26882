//! Bandwidth sweeps, perturbation spectra and Fourier heat maps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{fourier_corrupt, pgd_with_workers, AttackConfig, FourierBasisSpec};
use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{predict, ModelSpec, Params};
use crate::rng::Streams;
use crate::scalar::Scalar;
use crate::spectral::{power_spectrum, shift_grid, FilterSpec};
use crate::tensor::Tensor;
use crate::training::{evaluate, evaluate_perturbation_filters, EvalOptions};

/// A trained model under a display name.
#[derive(Debug, Clone)]
pub struct NamedModel<T> {
    pub name: String,
    pub spec: ModelSpec,
    pub params: Params<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub label: String,
    /// Accuracy in percent, one entry per bandwidth.
    pub accuracy: Vec<f64>,
    /// Unfiltered robust accuracy, when the sweep reports it.
    pub robust: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub bandwidths: Vec<usize>,
    pub curves: Vec<SweepCurve>,
    pub dataset: String,
    pub attack: Option<AttackConfig>,
}

impl SweepResult {
    pub fn curve(&self, label: &str) -> Option<&SweepCurve> {
        self.curves.iter().find(|c| c.label == label)
    }

    /// One row per bandwidth, one column per curve. Robust accuracies are
    /// only kept in the JSON form.
    pub fn to_csv(&self) -> Result<String> {
        let err = |e: csv::Error| Error::invalid(e.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["bandwidth".to_string()];
        header.extend(self.curves.iter().map(|c| c.label.clone()));
        w.write_record(&header).map_err(err)?;
        for (i, k) in self.bandwidths.iter().enumerate() {
            let mut row = vec![k.to_string()];
            row.extend(self.curves.iter().map(|c| c.accuracy[i].to_string()));
            w.write_record(&row).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }
}

fn check_bandwidths(bandwidths: &[usize], h: usize, w: usize) -> Result<()> {
    if bandwidths.is_empty() {
        return Err(Error::invalid("no bandwidths given"));
    }
    if bandwidths.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::invalid("bandwidths must be strictly increasing"));
    }
    bandwidths.iter().try_for_each(|&k| FilterSpec::lpf(k).validate(h, w))
}

/// Clean accuracy of each model on LPF-filtered inputs, plus its unfiltered
/// robust accuracy under `attack`.
pub fn lpf_accuracy_sweep<T: Scalar>(
    models: &[NamedModel<T>],
    data: &Dataset<T>,
    dataset_name: &str,
    bandwidths: &[usize],
    attack: &AttackConfig,
    opts: &EvalOptions,
) -> Result<SweepResult> {
    let [_, h, w] = data.image_shape();
    check_bandwidths(bandwidths, h, w)?;
    let mut curves = Vec::with_capacity(models.len());
    for m in models {
        let accuracy = bandwidths
            .iter()
            .map(|&k| evaluate(&m.spec, &m.params, data, None, Some(&FilterSpec::lpf(k)), None, opts))
            .collect::<Result<Vec<_>>>()?;
        let robust = evaluate(&m.spec, &m.params, data, Some(attack), None, None, opts)?;
        curves.push(SweepCurve {
            label: m.name.clone(),
            accuracy,
            robust: Some(robust),
        });
    }
    Ok(SweepResult {
        bandwidths: bandwidths.to_vec(),
        curves,
        dataset: dataset_name.to_string(),
        attack: Some(*attack),
    })
}

/// Robust accuracy when only the LPF or HPF part of each perturbation is
/// added to the clean input. Curves are labelled `lpf` and `hpf`.
pub fn band_aggressiveness<T: Scalar>(
    model: &NamedModel<T>,
    data: &Dataset<T>,
    dataset_name: &str,
    attack: &AttackConfig,
    bandwidths: &[usize],
    opts: &EvalOptions,
) -> Result<SweepResult> {
    let [_, h, w] = data.image_shape();
    check_bandwidths(bandwidths, h, w)?;
    let filters: Vec<Option<FilterSpec>> = bandwidths
        .iter()
        .map(|&k| Some(FilterSpec::lpf(k)))
        .chain(bandwidths.iter().map(|&k| Some(FilterSpec::hpf(k))))
        .collect();
    let acc = evaluate_perturbation_filters(&model.spec, &model.params, data, Some(attack), None, &filters, opts)?;
    let (lpf, hpf) = acc.split_at(bandwidths.len());
    Ok(SweepResult {
        bandwidths: bandwidths.to_vec(),
        curves: vec![
            SweepCurve {
                label: "lpf".into(),
                accuracy: lpf.to_vec(),
                robust: None,
            },
            SweepCurve {
                label: "hpf".into(),
                accuracy: hpf.to_vec(),
                robust: None,
            },
        ],
        dataset: dataset_name.to_string(),
        attack: Some(*attack),
    })
}

/// Zero-frequency-centered H×W map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, shifted layout.
    pub values: Vec<f64>,
    pub samples: usize,
}

/// Mean `|F(δ)|` over the first `n_samples` images, δ from `attack`.
pub fn perturbation_spectrum<T: Scalar>(
    spec: &ModelSpec,
    params: &Params<T>,
    data: &Dataset<T>,
    attack: &AttackConfig,
    n_samples: usize,
    opts: &EvalOptions,
) -> Result<SpectrumMap> {
    if n_samples == 0 || n_samples > data.len() {
        return Err(Error::invalid(format!(
            "sample count {n_samples} must be in 1..={}",
            data.len()
        )));
    }
    let streams = Streams::new(opts.seed).child("spectrum");
    let idx: Vec<usize> = (0..n_samples).collect();
    let mut deltas = Vec::new();
    for (b, chunk) in idx.chunks(opts.batch_size.max(1)).enumerate() {
        let (x, y) = data.batch(chunk)?;
        let mut rng = streams.stream(&format!("batch={b}"));
        deltas.push(pgd_with_workers(spec, params, &x, &y, attack, &mut rng, opts.workers)?.delta.cast());
    }
    average_spectrum(&Tensor::concat_outer(&deltas)?)
}

/// Mean channel-averaged `|F|` over an N×C×H×W batch.
pub fn average_spectrum(batch: &Tensor<f64>) -> Result<SpectrumMap> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(Error::invalid("average_spectrum expects an N x C x H x W batch"));
    };
    if n == 0 {
        return Err(Error::invalid("average_spectrum of an empty batch"));
    }
    let mut acc = vec![0.0f64; h * w];
    for i in 0..n {
        let d = batch.slice_outer(i)?.reshape(&[c, h, w])?;
        for (a, v) in acc.iter_mut().zip(power_spectrum(&d)?.data()) {
            *a += v;
        }
    }
    Ok(SpectrumMap {
        height: h,
        width: w,
        values: acc.into_iter().map(|v| v / n as f64).collect(),
        samples: n,
    })
}

/// Mass inside the central H/2×W/2 window of a shifted map over the total.
pub fn low_frequency_ratio(map: &SpectrumMap) -> Result<f64> {
    let (h, w) = (map.height, map.width);
    let total: f64 = map.values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("spectrum has no mass"));
    }
    let (r0, c0) = (h / 4, w / 4);
    let inner: f64 = (r0..r0 + h / 2)
        .flat_map(|r| (c0..c0 + w / 2).map(move |c| (r, c)))
        .map(|(r, c)| map.values[r * w + c])
        .sum();
    Ok(inner / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMapConfig {
    /// L2 norm of the corruption per channel.
    pub v: f64,
    pub samples: usize,
    /// Only cells whose unshifted indices are multiples of `stride` are evaluated.
    pub stride: usize,
    pub seed: u64,
}

impl Default for HeatMapConfig {
    fn default() -> Self {
        Self {
            v: 0.06,
            samples: 256,
            stride: 1,
            seed: 0,
        }
    }
}

/// Error rates in percent, zero frequency centered; `None` marks cells
/// skipped by the stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<f64>>,
    pub clean_error: f64,
    pub config: HeatMapConfig,
    pub model: String,
}

impl HeatMap {
    pub fn evaluated(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().flatten().copied()
    }

    pub fn mean_error(&self) -> f64 {
        let (sum, n) = self.evaluated().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        sum / n.max(1) as f64
    }
}

fn error_rate(pred: &[usize], y: &[usize]) -> f64 {
    100.0 * pred.iter().zip(y).filter(|(p, t)| p != t).count() as f64 / y.len() as f64
}

/// Error rate under a single-frequency corruption for every frequency.
/// Each cell draws from its own stream keyed by (seed, i, j).
pub fn fourier_heatmap<T: Scalar>(model: &NamedModel<T>, data: &Dataset<T>, cfg: &HeatMapConfig) -> Result<HeatMap> {
    if !(cfg.v >= 0.0 && cfg.v.is_finite()) {
        return Err(Error::invalid(format!("corruption norm must be finite and >= 0, got {}", cfg.v)));
    }
    if cfg.samples == 0 || cfg.samples > data.len() {
        return Err(Error::invalid(format!("sample count {} must be in 1..={}", cfg.samples, data.len())));
    }
    if cfg.stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let [c, h, w] = data.image_shape();
    let idx: Vec<usize> = (0..cfg.samples).collect();
    let (x, y) = data.batch(&idx)?;
    let clean_error = error_rate(&predict(&model.spec, &model.params, &x)?, &y);
    let streams = Streams::new(cfg.seed).child("heatmap");
    let mut grid = vec![None; h * w];
    for i in (0..h).step_by(cfg.stride) {
        for j in (0..w).step_by(cfg.stride) {
            let mut rng = streams.stream(&format!("i={i}/j={j}"));
            let basis = FourierBasisSpec { i, j, v: cfg.v, sign: None };
            let corrupted = (0..cfg.samples)
                .map(|k| fourier_corrupt(&x.slice_outer(k)?.reshape(&[c, h, w])?, &basis, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = Tensor::stack(&corrupted)?;
            grid[i * w + j] = Some(error_rate(&predict(&model.spec, &model.params, &batch)?, &y));
        }
    }
    Ok(HeatMap {
        height: h,
        width: w,
        cells: shift_grid(&grid, h, w),
        clean_error,
        config: cfg.clone(),
        model: model.name.clone(),
    })
}

/// 16-bit binary PGM, row-major, big-endian samples, the map maximum at 65535.
/// Non-finite or missing values are written as 0.
pub fn encode_pgm16(values: &[f64], height: usize, width: usize) -> Result<(Vec<u8>, f64)> {
    if values.len() != height * width {
        return Err(Error::invalid(format!(
            "map has {} values, expected {height}x{width}",
            values.len()
        )));
    }
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = if v.is_finite() && max > 0.0 {
            (v.max(0.0) / max * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok((out, max))
}

/// Path of the JSON sidecar written next to a map.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// PGM bytes and JSON sidecar text for a map; `meta` keys are merged into the sidecar.
pub fn render_map(values: &[f64], height: usize, width: usize, meta: serde_json::Value) -> Result<(Vec<u8>, String)> {
    let (bytes, max) = encode_pgm16(values, height, width)?;
    let mut sidecar = serde_json::json!({
        "width": width,
        "height": height,
        "max_value": max,
        "scale": if max > 0.0 { max / 65535.0 } else { 0.0 },
        "layout": "row-major, zero frequency centered",
    });
    if let (Some(obj), serde_json::Value::Object(extra)) = (sidecar.as_object_mut(), meta) {
        obj.extend(extra);
    }
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((bytes, text))
}

/// Writes `path` as a PGM and a JSON sidecar holding `meta` plus the scale.
pub fn write_map(path: &Path, values: &[f64], height: usize, width: usize, meta: serde_json::Value) -> Result<()> {
    let (bytes, text) = render_map(values, height, width, meta)?;
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), text.as_bytes())
}

pub fn render_spectrum(map: &SpectrumMap) -> Result<(Vec<u8>, String)> {
    let lf = low_frequency_ratio(map).ok();
    let meta = serde_json::json!({
        "kind": "perturbation_spectrum",
        "samples": map.samples,
        "low_frequency_ratio": lf,
    });
    render_map(&map.values, map.height, map.width, meta)
}

pub fn render_heatmap(map: &HeatMap) -> Result<(Vec<u8>, String)> {
    let values: Vec<f64> = map.cells.iter().map(|c| c.unwrap_or(f64::NAN)).collect();
    let meta = serde_json::json!({
        "kind": "fourier_heatmap",
        "unit": "error rate in percent",
        "clean_error": map.clean_error,
        "v": map.config.v,
        "samples": map.config.samples,
        "stride": map.config.stride,
        "seed": map.config.seed,
        "model": map.model,
    });
    render_map(&values, map.height, map.width, meta)
}

pub fn write_spectrum(path: &Path, map: &SpectrumMap) -> Result<()> {
    let (bytes, text) = render_spectrum(map)?;
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), text.as_bytes())
}

pub fn write_heatmap(path: &Path, map: &HeatMap) -> Result<()> {
    let (bytes, text) = render_heatmap(map)?;
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), text.as_bytes())
}
