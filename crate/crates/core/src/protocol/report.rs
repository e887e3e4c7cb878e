//! Sweep results, ranking analysis and rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{mean, CellRun, ProtocolConfig, Setting, FACTORS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    /// Mean test balanced accuracy over seeds.
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub sd: f64,
    pub per_seed: Vec<f64>,
    /// Mean validation balanced accuracy at the selected checkpoints.
    pub val_mean: f64,
    /// Mean of validation minus test, percentage points.
    pub gap_mean_pp: f64,
    pub setting: Setting,
    pub selected: Vec<usize>,
}

impl ModelScore {
    pub fn from_run(run: &CellRun) -> Self {
        let per_seed = run.test_accuracies();
        let m = mean(&per_seed);
        let sd = if per_seed.len() > 1 {
            (per_seed.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (per_seed.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let vals: Vec<f64> = run.seeds.iter().map(|s| s.val_accuracy).collect();
        let gaps: Vec<f64> = run.seeds.iter().map(|s| 100.0 * (s.val_accuracy - s.test_accuracy)).collect();
        Self {
            mean: m,
            sd,
            per_seed,
            val_mean: mean(&vals),
            gap_mean_pp: mean(&gaps),
            setting: run.setting,
            selected: run.seeds.iter().map(|s| s.selected).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub id: String,
    pub config: ProtocolConfig,
    pub scores: BTreeMap<String, ModelScore>,
    /// Models that failed in this cell, with the error message.
    pub errors: BTreeMap<String, String>,
    /// Models by descending mean accuracy; ties by name.
    pub ranking: Vec<String>,
}

/// `first` beats `second` in `cell_a` and loses to it in `cell_b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reversal {
    pub cell_a: String,
    pub cell_b: String,
    pub first: String,
    pub second: String,
}

/// Effect of moving one factor off its baseline level, others at baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorDelta {
    pub factor: String,
    pub level: String,
    pub model: String,
    pub delta_pp: f64,
}

/// Deviation of a multi-factor cell from the sum of its one-factor deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub cell: String,
    pub model: String,
    pub residual_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    pub baseline: String,
    pub cells: Vec<CellReport>,
    pub reversal_pairs: Vec<Reversal>,
    /// Largest spread of one model's mean accuracy across cells, in
    /// percentage points.
    pub max_discrepancy_pp: f64,
    pub attribution: Vec<FactorDelta>,
    pub interactions: Vec<Residual>,
}

pub fn rank(scores: &BTreeMap<String, ModelScore>) -> Vec<String> {
    let mut names: Vec<&String> = scores.keys().collect();
    names.sort_by(|a, b| scores[*b].mean.total_cmp(&scores[*a].mean).then(a.cmp(b)));
    names.into_iter().cloned().collect()
}

/// Strict order flips between every pair of cells.
pub fn reversals(cells: &[CellReport]) -> Vec<Reversal> {
    let mut out = Vec::new();
    for (i, a) in cells.iter().enumerate() {
        for b in &cells[i + 1..] {
            for (m1, s1) in &a.scores {
                for (m2, s2) in &a.scores {
                    let (Some(t1), Some(t2)) = (b.scores.get(m1), b.scores.get(m2)) else {
                        continue;
                    };
                    if s1.mean > s2.mean && t1.mean < t2.mean {
                        out.push(Reversal {
                            cell_a: a.id.clone(),
                            cell_b: b.id.clone(),
                            first: m1.clone(),
                            second: m2.clone(),
                        });
                    }
                }
            }
        }
    }
    out
}

pub fn max_discrepancy_pp(cells: &[CellReport], models: &[String]) -> f64 {
    let mut best: f64 = 0.0;
    for m in models {
        let v: Vec<f64> = cells.iter().filter_map(|c| c.scores.get(m).map(|s| s.mean)).collect();
        if v.len() > 1 {
            let hi = v.iter().copied().fold(f64::MIN, f64::max);
            let lo = v.iter().copied().fold(f64::MAX, f64::min);
            best = best.max(100.0 * (hi - lo));
        }
    }
    best
}

type CellResults = BTreeMap<String, std::result::Result<CellRun, String>>;

impl SweepReport {
    pub fn build(models: Vec<String>, seeds: Vec<u64>, baseline: &ProtocolConfig, raw: Vec<(ProtocolConfig, CellResults)>) -> Self {
        let cells: Vec<CellReport> = raw
            .into_iter()
            .map(|(config, results)| {
                let mut scores = BTreeMap::new();
                let mut errors = BTreeMap::new();
                for (m, r) in results {
                    match r {
                        Ok(run) => {
                            scores.insert(m, ModelScore::from_run(&run));
                        }
                        Err(e) => {
                            errors.insert(m, e);
                        }
                    }
                }
                CellReport {
                    id: config.id(),
                    config,
                    ranking: rank(&scores),
                    scores,
                    errors,
                }
            })
            .collect();
        let reversal_pairs = reversals(&cells);
        let max_discrepancy_pp = max_discrepancy_pp(&cells, &models);
        let (attribution, interactions) = attribute(&cells, baseline, &models);
        Self {
            models,
            seeds,
            baseline: baseline.id(),
            cells,
            reversal_pairs,
            max_discrepancy_pp,
            attribution,
            interactions,
        }
    }

    pub fn cell(&self, id: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.id == id)
    }

    /// Empty report (no cells run).
    pub fn empty() -> Self {
        Self {
            models: Vec::new(),
            seeds: Vec::new(),
            baseline: String::new(),
            cells: Vec::new(),
            reversal_pairs: Vec::new(),
            max_discrepancy_pp: 0.0,
            attribution: Vec::new(),
            interactions: Vec::new(),
        }
    }

    pub fn to_markdown(&self) -> String {
        if self.cells.is_empty() {
            return "no cells\n".into();
        }
        let mut s = String::new();
        let _ = writeln!(s, "# Protocol sweep\n");
        let _ = writeln!(s, "Seeds: {:?}. Baseline cell: `{}`.\n", self.seeds, self.baseline);
        let _ = writeln!(s, "## Balanced accuracy (mean ± sd over seeds)\n");
        let mut header = "| cell |".to_string();
        let mut rule = "|---|".to_string();
        for m in &self.models {
            let _ = write!(header, " {m} |");
            rule.push_str("---|");
        }
        header.push_str(" ranking |");
        rule.push_str("---|");
        let _ = writeln!(s, "{header}\n{rule}");
        for c in &self.cells {
            let _ = write!(s, "| `{}` |", c.id);
            for m in &self.models {
                match (c.scores.get(m), c.errors.get(m)) {
                    (Some(sc), _) => {
                        let _ = write!(s, " {:.3} ± {:.3} |", sc.mean, sc.sd);
                    }
                    (None, Some(_)) => s.push_str(" failed |"),
                    _ => s.push_str(" - |"),
                }
            }
            let _ = writeln!(s, " {} |", c.ranking.join(" > "));
        }
        let _ = writeln!(s, "\nMaximum per-model discrepancy across cells: {:.1} pp.\n", self.max_discrepancy_pp);

        let _ = writeln!(s, "## Ranking reversals ({})\n", self.reversal_pairs.len());
        for r in &self.reversal_pairs {
            let _ = writeln!(
                s,
                "- {} > {} in `{}`, reversed in `{}`",
                r.first, r.second, r.cell_a, r.cell_b
            );
        }
        let _ = writeln!(s, "\n## One-factor deltas from baseline (pp)\n");
        if self.attribution.is_empty() {
            let _ = writeln!(s, "No factor varies.");
        } else {
            let _ = writeln!(s, "| factor | level | model | delta |\n|---|---|---|---|");
            for d in &self.attribution {
                let _ = writeln!(s, "| {} | {} | {} | {:+.2} |", d.factor, d.level, d.model, d.delta_pp);
            }
        }
        if !self.interactions.is_empty() {
            let _ = writeln!(s, "\n## Interaction residuals (pp)\n");
            let _ = writeln!(s, "| cell | model | residual |\n|---|---|---|");
            for r in &self.interactions {
                let _ = writeln!(s, "| `{}` | {} | {:+.2} |", r.cell, r.model, r.residual_pp);
            }
        }
        let failures: Vec<_> = self.cells.iter().flat_map(|c| c.errors.iter().map(move |e| (c, e))).collect();
        if !failures.is_empty() {
            let _ = writeln!(s, "\n## Failures\n");
            for (c, (m, e)) in failures {
                let _ = writeln!(s, "- `{}` {m}: {e}", c.id);
            }
        }
        s
    }

    /// Horizontal bar chart of the one-factor deltas, one bar per model.
    pub fn factor_delta_svg(&self) -> String {
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let groups: Vec<(String, String)> = {
            let mut g: Vec<(String, String)> = self
                .attribution
                .iter()
                .map(|d| (d.factor.clone(), d.level.clone()))
                .collect();
            g.dedup();
            g
        };
        let bar = 14.0;
        let group_h = bar * self.models.len().max(1) as f64 + 12.0;
        let (left, width, top) = (260.0, 360.0, 40.0);
        let height = top + group_h * groups.len() as f64 + 40.0;
        let max = self
            .attribution
            .iter()
            .map(|d| d.delta_pp.abs())
            .fold(1.0, f64::max);
        let x0 = left + width / 2.0;
        let sx = (width / 2.0) / max;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="11">"#,
            left + width + 140.0
        );
        let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">Change in balanced accuracy from baseline (pp)</text>"#);
        if groups.is_empty() {
            let _ = writeln!(s, r#"<text x="10" y="50">no factor varies</text>"#);
        }
        for (gi, (factor, level)) in groups.iter().enumerate() {
            let y = top + gi as f64 * group_h;
            let _ = writeln!(s, r#"<text x="10" y="{}">{factor} = {level}</text>"#, y + bar);
            for (mi, m) in self.models.iter().enumerate() {
                let Some(d) = self
                    .attribution
                    .iter()
                    .find(|d| &d.factor == factor && &d.level == level && &d.model == m)
                else {
                    continue;
                };
                let w = d.delta_pp.abs() * sx;
                let x = if d.delta_pp < 0.0 { x0 - w } else { x0 };
                let yy = y + mi as f64 * bar;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{yy:.1}" width="{w:.1}" height="{:.1}" fill="{}"/>"#,
                    bar - 2.0,
                    COLORS[mi % COLORS.len()]
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}">{:+.1}</text>"#,
                    left + width + 8.0,
                    yy + bar - 4.0,
                    d.delta_pp
                );
            }
        }
        let bottom = top + group_h * groups.len() as f64;
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{top}" x2="{x0}" y2="{bottom}" stroke="#333"/>"##);
        for (mi, m) in self.models.iter().enumerate() {
            let x = 10.0 + mi as f64 * 150.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{m}</text>"#,
                bottom + 15.0,
                COLORS[mi % COLORS.len()],
                x + 14.0,
                bottom + 24.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn attribute(cells: &[CellReport], baseline: &ProtocolConfig, models: &[String]) -> (Vec<FactorDelta>, Vec<Residual>) {
    let base_levels = baseline.levels();
    let Some(base) = cells.iter().find(|c| c.config.levels() == base_levels) else {
        return (Vec::new(), Vec::new());
    };
    let find = |levels: &[String; 6]| cells.iter().find(|c| &c.config.levels() == levels);

    let mut deltas = Vec::new();
    let mut lookup: BTreeMap<(usize, String, String), f64> = BTreeMap::new();
    for (f, factor) in FACTORS.iter().enumerate() {
        let mut levels: Vec<String> = cells.iter().map(|c| c.config.levels()[f].clone()).collect();
        levels.dedup();
        let mut seen = std::collections::BTreeSet::new();
        for level in levels {
            if level == base_levels[f] || !seen.insert(level.clone()) {
                continue;
            }
            let mut target = base_levels.clone();
            target[f] = level.clone();
            let Some(cell) = find(&target) else { continue };
            for m in models {
                if let (Some(a), Some(b)) = (cell.scores.get(m), base.scores.get(m)) {
                    let d = 100.0 * (a.mean - b.mean);
                    lookup.insert((f, level.clone(), m.clone()), d);
                    deltas.push(FactorDelta {
                        factor: factor.to_string(),
                        level: level.clone(),
                        model: m.clone(),
                        delta_pp: d,
                    });
                }
            }
        }
    }

    let mut residuals = Vec::new();
    for c in cells {
        let levels = c.config.levels();
        let moved: Vec<usize> = (0..FACTORS.len()).filter(|&f| levels[f] != base_levels[f]).collect();
        if moved.len() < 2 {
            continue;
        }
        for m in models {
            let (Some(s), Some(b)) = (c.scores.get(m), base.scores.get(m)) else {
                continue;
            };
            let parts: Option<Vec<f64>> = moved
                .iter()
                .map(|&f| lookup.get(&(f, levels[f].clone(), m.clone())).copied())
                .collect();
            if let Some(parts) = parts {
                let predicted = 100.0 * b.mean + parts.iter().sum::<f64>();
                residuals.push(Residual {
                    cell: c.id.clone(),
                    model: m.clone(),
                    residual_pp: 100.0 * s.mean - predicted,
                });
            }
        }
    }
    (deltas, residuals)
}
