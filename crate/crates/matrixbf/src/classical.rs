//! Element-wise Grubbs and generalized extreme studentized deviate (GESD)
//! baselines with optional Bonferroni correction.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::core::MatrixSeries;
use crate::error::{Error, Result};
use crate::parallel;

/// Result of a single Grubbs test.
#[derive(Debug, Clone, Serialize)]
pub struct GrubbsOutcome {
    pub statistic: f64,
    pub critical_value: f64,
    /// Index (0-based) of the most extreme point when it exceeds the
    /// critical value.
    pub flagged: Option<usize>,
}

fn mean_sd(x: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Degenerate(
            "sample variance is zero or non-finite".into(),
        ));
    }
    Ok((mean, var.sqrt()))
}

/// Two-sided Grubbs critical value at significance `level` for `n` points.
fn grubbs_critical(n: usize, level: f64) -> Result<f64> {
    let nf = n as f64;
    let df = nf - 2.0;
    let tq = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::domain(e.to_string()))?
        .inverse_cdf(1.0 - level / (2.0 * nf));
    let t2 = tq * tq;
    Ok((nf - 1.0) / nf.sqrt() * (t2 / (nf - 2.0 + t2)).sqrt())
}

/// Two-sided Grubbs test for a single most-extreme outlier.
pub fn grubbs_test(x: &[f64], level: f64) -> Result<GrubbsOutcome> {
    if x.len() < 3 {
        return Err(Error::domain(format!(
            "Grubbs needs at least 3 points, got {}",
            x.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain("significance level must lie in (0, 1)"));
    }
    let (mean, sd) = mean_sd(x)?;
    let (idx, g) = x
        .iter()
        .enumerate()
        .map(|(i, v)| (i, (v - mean).abs() / sd))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite statistic"))
        .expect("nonempty sample");
    let critical = grubbs_critical(x.len(), level)?;
    Ok(GrubbsOutcome {
        statistic: g,
        critical_value: critical,
        flagged: (g > critical).then_some(idx),
    })
}

/// Rosner's generalized ESD test; returns the indices (0-based) of all
/// points declared outlying, at most `max_outliers` of them.
pub fn gesd_test(x: &[f64], max_outliers: usize, level: f64) -> Result<Vec<usize>> {
    if max_outliers == 0 {
        return Ok(Vec::new());
    }
    if x.len() < max_outliers + 2 {
        return Err(Error::domain(format!(
            "GESD with {max_outliers} candidates needs at least {} points, got {}",
            max_outliers + 2,
            x.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain("significance level must lie in (0, 1)"));
    }
    let n = x.len();
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut removed = Vec::with_capacity(max_outliers);
    let mut r_stats = Vec::with_capacity(max_outliers);
    for _ in 0..max_outliers {
        let vals: Vec<f64> = remaining.iter().map(|&i| x[i]).collect();
        let (mean, sd) = mean_sd(&vals)?;
        let (pos, r) = vals
            .iter()
            .enumerate()
            .map(|(j, v)| (j, (v - mean).abs() / sd))
            .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite statistic"))
            .expect("nonempty sample");
        r_stats.push(r);
        removed.push(remaining.remove(pos));
    }
    // lambda_i thresholds from Student-t quantiles on the shrinking sample
    let mut last_flagged = None;
    for (i, &r) in r_stats.iter().enumerate() {
        let ni = (n - i) as f64; // sample size before the i-th removal
        let df = ni - 2.0;
        if df <= 0.0 {
            break;
        }
        let pq = 1.0 - level / (2.0 * ni);
        let tq = StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::domain(e.to_string()))?
            .inverse_cdf(pq);
        let lambda = (ni - 1.0) * tq / ((df + tq * tq) * ni).sqrt();
        if r > lambda {
            last_flagged = Some(i);
        }
    }
    Ok(match last_flagged {
        Some(i) => removed[..=i].to_vec(),
        None => Vec::new(),
    })
}

/// Which element-wise test the scan runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScanTest {
    Grubbs,
    /// GESD; `None` caps candidates at one tenth of the series length.
    Gesd {
        max_outliers: Option<usize>,
    },
}

/// Per-level aggregation of element-wise flags across the series.
#[derive(Debug, Clone, Serialize)]
pub struct LevelReport {
    pub level: f64,
    /// Effective per-test level after the optional Bonferroni division.
    pub effective_level: f64,
    /// Flags indexed `[time][row][col]`.
    pub flags: Vec<Vec<Vec<bool>>>,
    /// Number of flagged entries at each time point.
    pub per_time_counts: Vec<usize>,
    /// Number of rows with at least one flagged entry at each time point.
    pub per_time_row_counts: Vec<usize>,
    /// Number of columns with at least one flagged entry at each time point.
    pub per_time_col_counts: Vec<usize>,
}

/// Element-wise scan report across significance levels.
#[derive(Debug, Clone, Serialize)]
pub struct ClassicalReport {
    pub test: ScanTest,
    pub bonferroni: bool,
    pub times: Vec<i64>,
    pub levels: Vec<LevelReport>,
    /// Entry positions whose series could not be tested (degenerate
    /// variance), recorded rather than thrown.
    pub skipped_entries: Vec<(usize, usize)>,
}

/// Run the chosen test on every `(row, col)` series at each level.
///
/// Each entry's full history is tested once; flagged sample indices are
/// mapped back to time positions and aggregated per time, per row and per
/// column. With `bonferroni` the level is divided by the number of entries.
pub fn elementwise_scan(
    series: &MatrixSeries,
    test: ScanTest,
    levels: &[f64],
    bonferroni: bool,
) -> Result<ClassicalReport> {
    let (p, n, len) = (series.p(), series.n(), series.len());
    if len < 3 {
        return Err(Error::domain(
            "element-wise scan needs at least 3 observations",
        ));
    }
    let cells: Vec<(usize, usize)> = (0..p).flat_map(|i| (0..n).map(move |j| (i, j))).collect();

    // flagged sample positions per cell and level, or None when degenerate
    let per_cell: Vec<Vec<Option<Vec<usize>>>> = parallel::map_collect(&cells, |&(i, j)| {
        let x: Vec<f64> = series.obs().iter().map(|o| o.y[(i, j)]).collect();
        levels
            .iter()
            .map(|&level| {
                let eff = if bonferroni {
                    level / (p * n) as f64
                } else {
                    level
                };
                match test {
                    ScanTest::Grubbs => grubbs_test(&x, eff)
                        .map(|out| out.flagged.into_iter().collect::<Vec<_>>())
                        .ok(),
                    ScanTest::Gesd { max_outliers } => {
                        let cap = max_outliers.unwrap_or_else(|| len.div_ceil(10));
                        gesd_test(&x, cap.min(len.saturating_sub(2)), eff).ok()
                    }
                }
            })
            .collect()
    });

    let mut skipped = Vec::new();
    for (cell_idx, per_level) in per_cell.iter().enumerate() {
        if per_level.iter().any(|o| o.is_none()) {
            skipped.push(cells[cell_idx]);
        }
    }

    let mut level_reports = Vec::with_capacity(levels.len());
    for (li, &level) in levels.iter().enumerate() {
        let mut flags = vec![vec![vec![false; n]; p]; len];
        for (cell_idx, &(i, j)) in cells.iter().enumerate() {
            if let Some(hits) = &per_cell[cell_idx][li] {
                for &t_idx in hits {
                    flags[t_idx][i][j] = true;
                }
            }
        }
        let per_time_counts: Vec<usize> = flags
            .iter()
            .map(|f| f.iter().map(|row| row.iter().filter(|&&b| b).count()).sum())
            .collect();
        let per_time_row_counts: Vec<usize> = flags
            .iter()
            .map(|f| f.iter().filter(|row| row.iter().any(|&b| b)).count())
            .collect();
        let per_time_col_counts: Vec<usize> = flags
            .iter()
            .map(|f| (0..n).filter(|&j| (0..p).any(|i| f[i][j])).count())
            .collect();
        level_reports.push(LevelReport {
            level,
            effective_level: if bonferroni {
                level / (p * n) as f64
            } else {
                level
            },
            flags,
            per_time_counts,
            per_time_row_counts,
            per_time_col_counts,
        });
    }
    Ok(ClassicalReport {
        test,
        bonferroni,
        times: series.obs().iter().map(|o| o.t).collect(),
        levels: level_reports,
        skipped_entries: skipped,
    })
}
