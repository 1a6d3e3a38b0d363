//! Lambda-distribution telemetry: fixed-bucket histograms, early/late phase
//! summaries, and CSV export for external plotting.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::LambdaRecord;
use crate::scalar::{to_f64, Scalar};

/// Fixed bucket edges. Buckets are half-open `[e_i, e_{i+1})`, the last one
/// closed at 1.
pub const BUCKET_EDGES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

pub const N_BUCKETS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LambdaHistogram {
    pub counts: [usize; N_BUCKETS],
    /// Step interval covered, when built from step records.
    pub step_range: Option<(usize, usize)>,
}

impl LambdaHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn percentages(&self) -> Option<[f64; N_BUCKETS]> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let mut out = [0.0; N_BUCKETS];
        for (o, &c) in out.iter_mut().zip(self.counts.iter()) {
            *o = 100.0 * c as f64 / total as f64;
        }
        Some(out)
    }
}

fn bucket_index(v: f64) -> Result<usize> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidInput(format!("lambda {v} outside (0, 1)")));
    }
    Ok(if v < 0.2 {
        0
    } else if v < 0.4 {
        1
    } else if v < 0.6 {
        2
    } else if v < 0.8 {
        3
    } else {
        4
    })
}

pub fn bucketize<T: Scalar>(lambdas: &[T]) -> Result<LambdaHistogram> {
    let mut counts = [0usize; N_BUCKETS];
    for &l in lambdas {
        counts[bucket_index(to_f64(l))?] += 1;
    }
    Ok(LambdaHistogram { counts, step_range: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// First 33% of steps.
    Early,
    /// Remaining 67%.
    Late,
}

/// Bucket percentages for one training phase. A phase with no recorded
/// values reports `None` rather than NaN percentages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseStats {
    pub phase: Phase,
    pub step_range: (usize, usize),
    pub n_values: usize,
    pub bucket_percentages: Option<[f64; N_BUCKETS]>,
    /// pct(0-0.2) + pct(0.8-1.0).
    pub extreme_mass: Option<f64>,
}

impl PhaseStats {
    pub fn is_empty(&self) -> bool {
        self.n_values == 0
    }

    fn from_histogram(phase: Phase, range: (usize, usize), hist: &LambdaHistogram) -> Self {
        let pct = hist.percentages();
        Self {
            phase,
            step_range: range,
            n_values: hist.total(),
            bucket_percentages: pct,
            extreme_mass: pct.map(|p| p[0] + p[4]),
        }
    }
}

/// Partition records at `floor(0.33 * total_steps)`: early phase covers
/// steps `[0, cut)`, late phase `[cut, total_steps)`.
pub fn phase_summary<T: Scalar>(
    records: &[LambdaRecord<T>],
    total_steps: usize,
) -> Result<(PhaseStats, PhaseStats)> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no lambda records".into()));
    }
    let cut = (0.33 * total_steps as f64).floor() as usize;
    let mut early = [0usize; N_BUCKETS];
    let mut late = [0usize; N_BUCKETS];
    for rec in records {
        let counts = if rec.step < cut { &mut early } else { &mut late };
        for &l in &rec.lambdas {
            counts[bucket_index(to_f64(l))?] += 1;
        }
    }
    let early_hist = LambdaHistogram { counts: early, step_range: Some((0, cut)) };
    let late_hist = LambdaHistogram { counts: late, step_range: Some((cut, total_steps)) };
    Ok((
        PhaseStats::from_histogram(Phase::Early, (0, cut), &early_hist),
        PhaseStats::from_histogram(Phase::Late, (cut, total_steps), &late_hist),
    ))
}

/// Printable two-phase bucket table.
pub fn phase_table(early: &PhaseStats, late: &PhaseStats) -> String {
    let mut out = String::new();
    out.push_str("phase   steps        ");
    for i in 0..N_BUCKETS {
        out.push_str(&format!("[{:.1},{:.1}{}  ", BUCKET_EDGES[i], BUCKET_EDGES[i + 1],
            if i == N_BUCKETS - 1 { "]" } else { ")" }));
    }
    out.push_str("extreme\n");
    for stats in [early, late] {
        let name = match stats.phase {
            Phase::Early => "early",
            Phase::Late => "late ",
        };
        out.push_str(&format!("{name}   {:>4}..{:<5}  ", stats.step_range.0, stats.step_range.1));
        match stats.bucket_percentages {
            Some(pct) => {
                for p in pct {
                    out.push_str(&format!("{p:>9.2}%  "));
                }
                out.push_str(&format!("{:>6.2}%", stats.extreme_mass.unwrap_or(0.0)));
            }
            None => out.push_str("(no recorded values)"),
        }
        out.push('\n');
    }
    out
}

/// Write records as CSV with header `step,example_index,lambda`. Values use
/// shortest round-trip formatting, so parsing recovers them exactly.
pub fn export_lambda_csv<T: Scalar>(records: &[LambdaRecord<T>], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,example_index,lambda")?;
    for rec in records {
        for (i, l) in rec.lambdas.iter().enumerate() {
            writeln!(w, "{},{},{}", rec.step, i, l)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn import_lambda_csv<T: Scalar>(path: &Path) -> Result<Vec<LambdaRecord<T>>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records: Vec<LambdaRecord<T>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != "step,example_index,lambda" {
                return Err(Error::Parse { line: 1, msg: "unexpected lambdas.csv header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse_err = |msg: &str| Error::Parse { line: i + 1, msg: msg.into() };
        let step: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing step"))?
            .parse()
            .map_err(|_| parse_err("bad step"))?;
        let _example: usize = fields
            .next()
            .ok_or_else(|| parse_err("missing example_index"))?
            .parse()
            .map_err(|_| parse_err("bad example_index"))?;
        let lambda: T = fields
            .next()
            .ok_or_else(|| parse_err("missing lambda"))?
            .parse()
            .map_err(|_| parse_err("bad lambda"))?;
        match records.last_mut() {
            Some(rec) if rec.step == step => rec.lambdas.push(lambda),
            _ => records.push(LambdaRecord { step, lambdas: vec![lambda] }),
        }
    }
    Ok(records)
}
