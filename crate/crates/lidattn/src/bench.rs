//! Wall-clock scaling harness for the three attention mechanisms:
//! single-threaded forward timings over a grid of sequence lengths,
//! log-log slope fits, and analytic working-set estimates.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_forward, pooling_matrix, AttentionConfig, AttentionParams, FeatureMap, Mechanism,
    ProjectionWeights,
};
use crate::error::{Error, Result};
use crate::numeric::{self, gaussian_matrix, BinaryMask, Matrix, SeededRng};

// The slope fits assume each forward pass runs on one core; a parallel
// numeric core would silently deflate the exponents.
const _: () = assert!(!numeric::internal_parallelism());

/// One benchmark request: a mechanism configuration, the sequence
/// lengths to sweep, and repetition counts.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub config: AttentionConfig,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

/// One measured grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: Mechanism,
    pub n: usize,
    pub median_ms: f64,
    pub mad_ms: f64,
    pub space_floats: usize,
}

/// The full sweep for one mechanism plus its fitted scaling exponent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slope: f64,
    pub r2: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Random but seed-fixed parameters sized for the configuration; the
/// depth-wise kernel is drawn nonzero so the agent path pays for its
/// residual convolution.
pub fn bench_params(config: &AttentionConfig, rng: &SeededRng) -> Result<AttentionParams> {
    config.validate()?;
    let mut wr = rng.derive("bench-weights");
    let scale = (1.0 / config.d_model as f64).sqrt();
    let mut proj = ProjectionWeights::zeros(config.d_model, config.d_attn);
    for w in [&mut proj.wq, &mut proj.wk, &mut proj.wv] {
        for v in w.data_mut() {
            *v = wr.next_normal() * scale;
        }
    }
    let dwc_kernel = match config.mechanism {
        Mechanism::Agent => {
            let mut k = Matrix::zeros(config.dwc_width, config.d_attn);
            for v in k.data_mut() {
                *v = wr.next_normal() * 0.1;
            }
            Some(k)
        }
        _ => None,
    };
    let feature_map = match config.mechanism {
        Mechanism::Performer => Some(FeatureMap::new(
            &mut rng.derive("bench-omega"),
            config.r,
            config.d_head(),
        )),
        _ => None,
    };
    Ok(AttentionParams {
        proj,
        dwc_kernel,
        feature_map,
    })
}

/// Times the multi-head forward pass at one sequence length: `warmup`
/// unmeasured runs, then `reps` measured ones. Returns the median and
/// the median absolute deviation, both in milliseconds.
pub fn time_forward(
    config: &AttentionConfig,
    params: &AttentionParams,
    n: usize,
    reps: usize,
    warmup: usize,
    rng: &SeededRng,
) -> Result<(f64, f64)> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be >= 1".into()));
    }
    let x = gaussian_matrix(&mut rng.derive(&format!("bench-input-{}", n)), n, config.d_model);
    let mask = BinaryMask::all_valid(n)?;
    for _ in 0..warmup {
        let out = multi_head_forward(&x, params, config, &mask)?;
        std::hint::black_box(out);
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = multi_head_forward(&x, params, config, &mask)?;
        std::hint::black_box(out);
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let med = median(&mut samples.clone());
    let mut deviations: Vec<f64> = samples.iter().map(|t| (t - med).abs()).collect();
    let mad = median(&mut deviations);
    Ok((med, mad))
}

/// Ordinary least squares in log-log space: returns the exponent and
/// the coefficient of determination. All inputs must be positive.
pub fn fit_slope(ns: &[f64], times: &[f64]) -> Result<(f64, f64)> {
    if ns.len() != times.len() || ns.len() < 2 {
        return Err(Error::InvalidArgument(
            "slope fit needs at least two matched points".into(),
        ));
    }
    if ns.iter().chain(times).any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "slope fit requires positive finite values".into(),
        ));
    }
    let xs: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / k;
    let mean_y = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mean_x) * (x - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all lengths are identical".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok((slope, r2))
}

/// Analytic per-head working-set size in floats at sequence length `n`:
/// the dominant intermediates each mechanism materializes.
pub fn space_estimate(config: &AttentionConfig, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let d = config.d_head();
    Ok(match config.mechanism {
        // Full attention matrix plus context and values.
        Mechanism::SelfAttn => n * n + 2 * n * d,
        // Feature-mapped queries, context, and the r x d summary.
        Mechanism::Performer => n * config.r + n * d + config.r * d,
        // Agent scores against the pooled tokens plus pooled values.
        Mechanism::Agent => {
            let pooled = pooling_matrix(n, config.p, config.n_cap)?.rows();
            n * pooled + pooled * d
        }
    })
}

/// Runs the full sweep for one mechanism and fits the exponent.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.sizes.len() < 4 {
        return Err(Error::InvalidArgument(
            "need at least four grid points for a slope fit".into(),
        ));
    }
    if spec.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "size grid must be strictly increasing".into(),
        ));
    }
    if spec.reps < 5 {
        return Err(Error::InvalidArgument("need at least five repetitions".into()));
    }
    let rng = SeededRng::new(spec.seed);
    let params = bench_params(&spec.config, &rng)?;
    let inputs: Vec<(Matrix, BinaryMask)> = spec
        .sizes
        .iter()
        .map(|&n| {
            let x = gaussian_matrix(
                &mut rng.derive(&format!("bench-input-{}", n)),
                n,
                spec.config.d_model,
            );
            Ok((x, BinaryMask::all_valid(n)?))
        })
        .collect::<Result<_>>()?;
    for (x, mask) in &inputs {
        for _ in 0..spec.warmup {
            let out = multi_head_forward(x, &params, &spec.config, mask)?;
            std::hint::black_box(out);
        }
    }
    // Repetitions are interleaved round-robin across the grid so a
    // transiently slow machine inflates every point instead of biasing
    // a single one (which would corrupt the fitted exponent).
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.reps); spec.sizes.len()];
    for _ in 0..spec.reps {
        for (slot, (x, mask)) in samples.iter_mut().zip(&inputs) {
            let start = Instant::now();
            let out = multi_head_forward(x, &params, &spec.config, mask)?;
            std::hint::black_box(out);
            slot.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let mut rows = Vec::with_capacity(spec.sizes.len());
    for (&n, sample) in spec.sizes.iter().zip(&mut samples) {
        let med = median(&mut sample.clone());
        let mut deviations: Vec<f64> = sample.iter().map(|t| (t - med).abs()).collect();
        rows.push(BenchRow {
            mechanism: spec.config.mechanism,
            n,
            median_ms: med,
            mad_ms: median(&mut deviations),
            space_floats: space_estimate(&spec.config, n)?,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.median_ms).collect();
    let (slope, r2) = fit_slope(&ns, &ts)?;
    Ok(BenchReport { rows, slope, r2 })
}

/// Writes the grid as CSV plus a JSON summary, and optionally a gnuplot
/// script for a quick log-log look at the curves.
pub fn emit_report(
    csv_path: &Path,
    json_path: &Path,
    gnuplot_path: Option<&Path>,
    reports: &[BenchReport],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(csv_path)?);
    writeln!(w, "mechanism,N,median_ms,mad_ms,slope,r2,space_floats")?;
    for report in reports {
        for row in &report.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                row.mechanism, row.n, row.median_ms, row.mad_ms, report.slope, report.r2,
                row.space_floats
            )?;
        }
    }
    w.flush()?;
    let json = File::create(json_path)?;
    serde_json::to_writer_pretty(BufWriter::new(json), reports)?;
    if let Some(path) = gnuplot_path {
        let mut g = BufWriter::new(File::create(path)?);
        writeln!(g, "set logscale xy")?;
        writeln!(g, "set datafile separator ','")?;
        writeln!(g, "set xlabel 'sequence length N'")?;
        writeln!(g, "set ylabel 'median forward time (ms)'")?;
        writeln!(g, "set key left top")?;
        let mechanisms: Vec<String> = reports
            .iter()
            .filter_map(|r| r.rows.first().map(|row| row.mechanism.to_string()))
            .collect();
        let clauses: Vec<String> = mechanisms
            .iter()
            .map(|m| {
                format!(
                    "'{}' using 2:(strcol(1) eq '{}' ? $3 : 1/0) with linespoints title '{}'",
                    csv_path.display(),
                    m,
                    m
                )
            })
            .collect();
        writeln!(g, "plot {}", clauses.join(", \\\n     "))?;
        g.flush()?;
    }
    Ok(())
}

/// Parses a CSV produced by [`emit_report`] back into rows; used to
/// verify the report round trip.
pub fn parse_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty benchmark CSV".into()))?;
    if header != "mechanism,N,median_ms,mad_ms,slope,r2,space_floats" {
        return Err(Error::InvalidArgument(format!(
            "unexpected benchmark CSV header: {}",
            header
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected 7 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::InvalidArgument(format!("line {}: bad {}", lineno + 2, what));
        rows.push(BenchRow {
            mechanism: fields[0].parse().map_err(|_| bad("mechanism"))?,
            n: fields[1].parse().map_err(|_| bad("N"))?,
            median_ms: fields[2].parse().map_err(|_| bad("median_ms"))?,
            mad_ms: fields[3].parse().map_err(|_| bad("mad_ms"))?,
            space_floats: fields[6].parse().map_err(|_| bad("space_floats"))?,
        });
    }
    Ok(rows)
}
