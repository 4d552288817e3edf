//! Results table and summary report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CSV_HEADER: [&str; 8] = [
    "attack",
    "feature",
    "adv_trained",
    "L_p",
    "lambda",
    "mean_err_m",
    "median_err_m",
    "rate_bits",
];

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub attack: String,
    pub feature: String,
    pub adv_trained: bool,
    #[serde(rename = "L_p")]
    pub l_p: usize,
    pub lambda: f64,
    pub mean_err_m: f64,
    pub median_err_m: f64,
    pub rate_bits: f64,
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(HarnessError::Schema(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| HarnessError::Schema(format!("{}: {e}", path.display()))))
        .collect()
}

/// Acceptance thresholds used by the ordering checks.
pub mod thresholds {
    /// White-box must beat random by this factor at the longest length.
    pub const WHITE_BOX_OVER_RANDOM: f64 = 1.1;
    /// Random must beat the unperturbed error by this factor.
    pub const RANDOM_OVER_CLEAN: f64 = 2.0;
    /// Relative slack for transfer and pool lying between random and
    /// white-box.
    pub const BETWEEN_SLACK: f64 = 0.1;
    /// Allowed relative drop per step of the white-box error curve.
    pub const MONOTONE_TOL: f64 = 0.05;
    /// Longest length included in the monotonicity check.
    pub const MONOTONE_MAX_LEN: usize = 8;
    /// Perturbation length of the rate-cost check.
    pub const RATE_LEN: usize = 8;
    /// Maximum relative rate loss of the random attack.
    pub const RATE_MAX_DROP: f64 = 0.15;
    /// Tolerance of the single-tap invariance check (meters).
    pub const INVARIANCE_TOL: f64 = 1e-9;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub feature: String,
    /// `None` for checks comparing training variants.
    pub adv_trained: Option<bool>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: usize,
    pub estimates_in_grid: Option<bool>,
    pub checks: Vec<Check>,
    pub all_passed: bool,
}

/// Rows of one (feature, adv_trained) group at the smallest lambda.
struct Group<'a> {
    rows: Vec<&'a ResultRow>,
}

impl<'a> Group<'a> {
    fn mean(&self, attack: &str, l_p: usize) -> Option<f64> {
        self.row(attack, l_p).map(|r| r.mean_err_m)
    }

    fn row(&self, attack: &str, l_p: usize) -> Option<&'a ResultRow> {
        self.rows.iter().copied().find(|r| r.attack == attack && r.l_p == l_p)
    }

    /// Baseline is independent of `L_p`; take any row.
    fn clean(&self) -> Option<&'a ResultRow> {
        self.rows.iter().copied().find(|r| r.attack == "none")
    }

    fn lengths(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.rows.iter().map(|r| r.l_p).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

impl Report {
    pub fn build(rows: &[ResultRow], estimates_in_grid: Option<bool>) -> Self {
        use thresholds::*;
        let mut keys: Vec<(String, bool)> = rows.iter().map(|r| (r.feature.clone(), r.adv_trained)).collect();
        keys.sort();
        keys.dedup();
        let lambda0 = rows.iter().map(|r| r.lambda).fold(f64::INFINITY, f64::min);
        let group = |f: &str, at: bool| Group {
            rows: rows
                .iter()
                .filter(|r| r.feature == f && r.adv_trained == at && r.lambda == lambda0)
                .collect(),
        };
        let mut checks = Vec::new();
        let mut push = |name: &str, f: &str, at: Option<bool>, passed: bool, detail: String| {
            checks.push(Check {
                name: name.into(),
                feature: f.into(),
                adv_trained: at,
                passed,
                detail,
            })
        };

        for (f, at) in &keys {
            let g = group(f, *at);
            let Some(clean) = g.clean() else { continue };
            let c = clean.mean_err_m;
            let lengths = g.lengths();
            let lmax = *lengths.last().expect("nonempty group");

            for attack in ["random", "white_box", "transfer", "pool"] {
                if let Some(m) = g.mean(attack, 1) {
                    let d = (m - c).abs();
                    push(
                        "single_tap_invariance",
                        f,
                        Some(*at),
                        d <= INVARIANCE_TOL,
                        format!("{attack} at L_p=1 differs from unperturbed by {d:.3e} m"),
                    );
                }
            }

            if let (Some(r), Some(w)) = (g.mean("random", lmax), g.mean("white_box", lmax)) {
                let ok = c < r && r < w && w >= WHITE_BOX_OVER_RANDOM * r && r >= RANDOM_OVER_CLEAN * c;
                push(
                    "efficacy_ordering",
                    f,
                    Some(*at),
                    ok,
                    format!(
                        "L_p={lmax}: unperturbed {c:.3} < random {r:.3} < white-box {w:.3} \
                         (white-box/random {:.2}x, random/unperturbed {:.2}x)",
                        w / r,
                        r / c
                    ),
                );
                for attack in ["transfer", "pool"] {
                    if let Some(m) = g.mean(attack, lmax) {
                        let lo = (1.0 - BETWEEN_SLACK) * r;
                        let hi = (1.0 + BETWEEN_SLACK) * w;
                        push(
                            &format!("{attack}_between_random_and_white_box"),
                            f,
                            Some(*at),
                            lo <= m && m <= hi,
                            format!("L_p={lmax}: {attack} {m:.3} in [{lo:.3}, {hi:.3}]"),
                        );
                    }
                }
            }

            let curve: Vec<(usize, f64)> = lengths
                .iter()
                .filter(|&&l| l <= MONOTONE_MAX_LEN)
                .filter_map(|&l| g.mean("white_box", l).map(|m| (l, m)))
                .collect();
            if curve.len() >= 2 {
                let ok = curve.windows(2).all(|p| p[1].1 >= (1.0 - MONOTONE_TOL) * p[0].1);
                let text: Vec<String> = curve.iter().map(|(l, m)| format!("{l}:{m:.3}")).collect();
                push("white_box_monotone", f, Some(*at), ok, text.join(" "));
            }

            if let Some(r) = g.row("random", RATE_LEN) {
                let drop = 1.0 - r.rate_bits / clean.rate_bits;
                push(
                    "random_rate_cost",
                    f,
                    Some(*at),
                    drop <= RATE_MAX_DROP,
                    format!(
                        "L_p={RATE_LEN}: rate {:.3} -> {:.3} bits ({:.1}% drop)",
                        clean.rate_bits,
                        r.rate_bits,
                        100.0 * drop
                    ),
                );
            }
        }

        let mut features: Vec<&String> = keys.iter().map(|(f, _)| f).collect();
        features.dedup();
        for f in features {
            let (std, at) = (group(f, false), group(f, true));
            let (Some(cs), Some(ca)) = (std.clean(), at.clean()) else { continue };
            let lmax = *std.lengths().last().expect("nonempty");
            if let (Some(ws), Some(wa)) = (std.mean("white_box", lmax), at.mean("white_box", lmax)) {
                push(
                    "adversarial_training_robustness",
                    f,
                    None,
                    wa < ws,
                    format!("white-box L_p={lmax}: AT {wa:.3} vs standard {ws:.3}"),
                );
            }
            push(
                "adversarial_training_clean_cost",
                f,
                None,
                ca.mean_err_m > cs.mean_err_m,
                format!("unperturbed: AT {:.3} vs standard {:.3}", ca.mean_err_m, cs.mean_err_m),
            );
        }

        if let Some(in_grid) = estimates_in_grid {
            push(
                "estimates_in_grid",
                "all",
                None,
                in_grid,
                "every decoded estimate lies in the grid hull".into(),
            );
        }
        let all_passed = checks.iter().all(|c| c.passed);
        Self {
            rows: rows.len(),
            estimates_in_grid,
            checks,
            all_passed,
        }
    }

    pub fn check(&self, name: &str, feature: &str, adv_trained: Option<bool>) -> Option<&Check> {
        self.checks
            .iter()
            .find(|c| c.name == name && c.feature == feature && c.adv_trained == adv_trained)
    }
}
