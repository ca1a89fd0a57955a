//! Missing-modality and ablation sweeps.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::atmoe::{ExpertStructure, GatingMode};
use crate::data::LoadedDataset;
use crate::error::{DemoError, Result};
use crate::evaluation::{EvalOptions, RetrievalResult};
use crate::hdm::HdmVariant;
use crate::modality::Modality;
use crate::model::{Model, Preset};
use crate::parallel;
use crate::pife::PoolingMode;
use crate::trainer::{evaluate_split, split_indices, RunConfig, Trainer};

/// The six test-time missing patterns, in table order.
pub const MISSING_PATTERNS: [&[Modality]; 6] = [
    &[Modality::Rgb],
    &[Modality::Nir],
    &[Modality::Tir],
    &[Modality::Rgb, Modality::Nir],
    &[Modality::Rgb, Modality::Tir],
    &[Modality::Nir, Modality::Tir],
];

pub fn pattern_name(missing: &[Modality]) -> String {
    let m: Vec<&str> = missing.iter().map(|m| m.label()).collect();
    format!("M({})", m.join("+"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub map: f64,
    pub rank1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissingSweep {
    pub full: SweepRow,
    /// Six patterns followed by `Average`.
    pub rows: Vec<SweepRow>,
    /// Patterns whose mAP exceeds the full-modality mAP.
    pub violations: Vec<String>,
}

impl MissingSweep {
    pub fn average(&self) -> &SweepRow {
        self.rows.last().expect("average row")
    }

    /// Settings as columns, metrics as rows.
    pub fn to_table(&self) -> String {
        let mut s = String::from("metric");
        for r in &self.rows {
            let _ = write!(s, "\t{}", r.setting);
        }
        s.push('\n');
        for (name, pick) in [("mAP", 0), ("Rank-1", 1)] {
            s.push_str(name);
            for r in &self.rows {
                let v = if pick == 0 { r.map } else { r.rank1 };
                let _ = write!(s, "\t{:.2}", 100.0 * v);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }
}

fn row(setting: String, r: &RetrievalResult) -> SweepRow {
    SweepRow {
        setting,
        map: r.map,
        rank1: r.rank(1),
    }
}

/// Evaluate `model` with every missing pattern applied to both query and
/// gallery.
pub fn sweep_missing(
    model: &Model,
    data: &LoadedDataset,
    query: &[usize],
    gallery: &[usize],
    opts: &EvalOptions,
    batch: usize,
) -> Result<MissingSweep> {
    let full = row("full".into(), &evaluate_split(model, data, query, gallery, &[], opts, batch)?);
    let mut rows = Vec::with_capacity(7);
    for missing in MISSING_PATTERNS {
        let r = evaluate_split(model, data, query, gallery, missing, opts, batch)?;
        rows.push(row(pattern_name(missing), &r));
    }
    let violations = rows
        .iter()
        .filter(|r| r.map > full.map)
        .map(|r| r.setting.clone())
        .collect();
    let n = rows.len() as f64;
    rows.push(SweepRow {
        setting: "Average".into(),
        map: rows.iter().map(|r| r.map).sum::<f64>() / n,
        rank1: rows.iter().map(|r| r.rank1).sum::<f64>() / n,
    });
    Ok(MissingSweep { full, rows, violations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matrix {
    Models,
    Gating,
    Pooling,
    Experts,
    Hdm,
    Heads,
}

impl Matrix {
    pub const ALL: [Matrix; 6] = [Matrix::Models, Matrix::Gating, Matrix::Pooling, Matrix::Experts, Matrix::Hdm, Matrix::Heads];

    pub fn name(self) -> &'static str {
        match self {
            Matrix::Models => "models",
            Matrix::Gating => "gating",
            Matrix::Pooling => "pooling",
            Matrix::Experts => "experts",
            Matrix::Hdm => "hdm",
            Matrix::Heads => "heads",
        }
    }
}

impl FromStr for Matrix {
    type Err = DemoError;

    fn from_str(s: &str) -> Result<Self> {
        Matrix::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DemoError::Config(format!("unknown ablation matrix {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub config: RunConfig,
}

fn cell(name: impl Into<String>, base: &RunConfig, f: impl FnOnce(&mut RunConfig)) -> AblationCell {
    let mut config = base.clone();
    f(&mut config);
    AblationCell { name: name.into(), config }
}

/// Cells of one ablation matrix, all derived from `base`.
pub fn ablation_cells(matrix: Matrix, base: &RunConfig) -> Vec<AblationCell> {
    match matrix {
        Matrix::Models => Preset::ALL
            .iter()
            .map(|&p| cell(format!("Model {}", p.name()), base, |c| p.apply(&mut c.model)))
            .collect(),
        Matrix::Gating => {
            let mut v = vec![
                cell("simple-add", base, |c| c.model.gating = GatingMode::SimpleAdd),
                cell("simple-concat", base, |c| c.model.gating = GatingMode::SimpleConcat),
            ];
            for h in [1, 2, 4, 8] {
                v.push(cell(format!("attention H={h}"), base, |c| {
                    c.model.gating = GatingMode::Attention;
                    c.model.moe_heads = h;
                }));
            }
            for c in &mut v {
                Preset::D.apply(&mut c.config.model);
            }
            v
        }
        Matrix::Heads => [1, 2, 4, 8]
            .iter()
            .map(|&h| cell(format!("H={h}"), base, |c| c.model.moe_heads = h))
            .collect(),
        Matrix::Pooling => [("average", PoolingMode::Average), ("max", PoolingMode::Max), ("gem", PoolingMode::Gem)]
            .into_iter()
            .map(|(n, p)| cell(n, base, |c| c.model.pooling = p))
            .collect(),
        Matrix::Experts => [
            ("simple", ExpertStructure::Simple),
            ("bottleneck", ExpertStructure::Bottleneck),
            ("ffn", ExpertStructure::Ffn),
        ]
        .into_iter()
        .map(|(n, e)| cell(n, base, |c| c.model.experts = e))
        .collect(),
        Matrix::Hdm => [
            ("no-interaction", HdmVariant::NoInteraction),
            ("cross-attention-no-fused", HdmVariant::CrossAttentionNoFused),
            ("cross-attention", HdmVariant::CrossAttention),
            ("transformer-block", HdmVariant::TransformerBlock),
        ]
        .into_iter()
        .map(|(n, v)| cell(n, base, |c| c.model.hdm_variant = v))
        .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub fingerprint: String,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub params: Option<usize>,
    pub steps: usize,
    pub error: Option<String>,
}

pub const ABLATION_HEADER: &str = "setting\tfingerprint\tmAP\tRank-1\tparams\tsteps\terror";

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.name,
            r.fingerprint,
            pct(r.map),
            pct(r.rank1),
            r.params.map_or("-".to_string(), |p| p.to_string()),
            r.steps,
            r.error.as_deref().unwrap_or("")
        );
    }
    s
}

fn run_cell(c: &AblationCell, data: &LoadedDataset) -> std::result::Result<(Trainer, RetrievalResult), (Option<Trainer>, DemoError)> {
    let mut t = Trainer::new(&c.config, data).map_err(|e| (None, e))?;
    if let Err(e) = t.run(data, None) {
        return Err((Some(t), e));
    }
    let eval = (|| {
        let (train, val) = split_indices(data, c.config.train.val_per_identity)?;
        let query = if val.is_empty() { &train } else { &val };
        evaluate_split(&t.model, data, query, &train, &[], &c.config.eval, c.config.train.eval_batch)
    })();
    match eval {
        Ok(r) => Ok((t, r)),
        Err(e) => Err((Some(t), e)),
    }
}

/// Train and evaluate every cell. A failing cell becomes a row with its
/// error; the others still run. Rows come back in cell order.
pub fn run_ablation(cells: &[AblationCell], data: &LoadedDataset) -> Vec<AblationRow> {
    parallel::map_slice(cells, |c| {
        let fingerprint = c.config.model.fingerprint();
        match run_cell(c, data) {
            Ok((t, r)) => AblationRow {
                name: c.name.clone(),
                fingerprint,
                map: Some(r.map),
                rank1: Some(r.rank(1)),
                params: Some(t.model.parameter_count()),
                steps: t.step,
                error: None,
            },
            Err((t, e)) => AblationRow {
                name: c.name.clone(),
                fingerprint,
                map: None,
                rank1: None,
                params: t.as_ref().map(|t| t.model.parameter_count()),
                steps: t.map_or(0, |t| t.step),
                error: Some(e.to_string()),
            },
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_sizes() {
        let base = RunConfig::default();
        let sizes: Vec<usize> = Matrix::ALL.iter().map(|&m| ablation_cells(m, &base).len()).collect();
        assert_eq!(sizes, vec![5, 6, 3, 3, 4, 4]);
        for m in Matrix::ALL {
            assert_eq!(m.name().parse::<Matrix>().unwrap(), m);
        }
    }

    #[test]
    fn pattern_names() {
        let names: Vec<String> = MISSING_PATTERNS.iter().map(|p| pattern_name(p)).collect();
        assert_eq!(names[0], "M(RGB)");
        assert_eq!(names[5], "M(NIR+TIR)");
    }

    #[test]
    fn failing_cell_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::data::SynthSpec {
            num_identities: 2,
            instances_per_identity: 2,
            ..Default::default()
        };
        crate::data::generate_synthetic(&spec, dir.path()).unwrap();
        let data = LoadedDataset::open(dir.path()).unwrap();
        let mut bad = RunConfig::default();
        bad.model.use_hdm = false;
        let rows = run_ablation(&[AblationCell { name: "bad".into(), config: bad }], &data);
        assert!(rows[0].error.as_deref().unwrap().contains("use_hdm"));
        assert!(ablation_table(&rows).lines().count() == 2);
    }
}
