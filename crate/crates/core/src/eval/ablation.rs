use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use super::reference::{
    REFERENCE_LAMBDA_SWEEP, REFERENCE_LAMBDA_VALUES, REFERENCE_LOSS_TERMS, REFERENCE_PL_BRANCHES,
    REFERENCE_TAS_BRANCHES,
};
use super::{evaluate_cases, DiceTable, NetworkPredictor};
use crate::config::{Branch, PlFusion, TasBranch, TrainConfig};
use crate::data::{Case, TrainSample};
use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::train::{fit, FitOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    LossTerms,
    TasBranches,
    PlBranches,
    LambdaSweep,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] =
        [AblationAxis::LossTerms, AblationAxis::TasBranches, AblationAxis::PlBranches, AblationAxis::LambdaSweep];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::LossTerms => "loss_terms",
            AblationAxis::TasBranches => "tas_branches",
            AblationAxis::PlBranches => "pl_branches+fusion",
            AblationAxis::LambdaSweep => "lambda_sweep",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss_terms" => Ok(AblationAxis::LossTerms),
            "tas_branches" => Ok(AblationAxis::TasBranches),
            "pl_branches+fusion" | "pl_branches" | "pl_fusion" => Ok(AblationAxis::PlBranches),
            "lambda_sweep" => Ok(AblationAxis::LambdaSweep),
            other => Err(Error::InvalidValue(format!(
                "unknown ablation axis '{other}' (loss_terms, tas_branches, pl_branches+fusion, lambda_sweep)"
            ))),
        }
    }
}

/// One configuration of an axis.
#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub group: Option<String>,
    pub label: String,
    pub config: TrainConfig,
    pub reference: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub group: Option<String>,
    pub label: String,
    pub table: DiceTable,
    /// Published average Dice for the same setting, when there is one.
    pub reference: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

fn fmt_ref(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.axis);
        let names = self.rows.first().map(|r| r.table.class_names.clone()).unwrap_or_default();
        let _ = write!(s, "{:<10}{:<28}", "", "setting");
        for n in &names {
            let _ = write!(s, "{n:>14}");
        }
        let _ = writeln!(s, "{:>8}{:>11}", "Avg", "reference");
        for r in &self.rows {
            let _ = write!(s, "{:<10}{:<28}", r.group.as_deref().unwrap_or(""), r.label);
            for (m, sd) in r.table.mean.iter().zip(&r.table.std) {
                let _ = write!(s, "{:>14}", format!("{m:.3}±{sd:.2}"));
            }
            let _ = writeln!(s, "{:>8.3}{:>11}", r.table.avg, fmt_ref(r.reference));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let names = self.rows.first().map(|r| r.table.class_names.clone()).unwrap_or_default();
        let mut s = String::from("group,setting");
        for n in &names {
            let _ = write!(s, ",{n}_mean,{n}_std");
        }
        s.push_str(",avg,reference\n");
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.group.as_deref().unwrap_or(""), r.label);
            for (m, sd) in r.table.mean.iter().zip(&r.table.std) {
                let _ = write!(s, ",{m:.6},{sd:.6}");
            }
            let reference = r.reference.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, ",{:.6},{reference}", r.table.avg);
        }
        s
    }
}

/// The configurations of `axis` derived from `base`. `values` replaces the
/// default λ grid of the sweep and is rejected for other axes.
pub fn ablation_variants(axis: AblationAxis, base: &TrainConfig, values: Option<&[f64]>) -> Result<Vec<AblationVariant>> {
    if values.is_some() && axis != AblationAxis::LambdaSweep {
        return Err(Error::InvalidValue(format!("--values applies to lambda_sweep, not {axis}")));
    }
    let variant = |group: Option<String>, label: &str, config: TrainConfig, reference: Option<f64>| AblationVariant {
        group,
        label: label.to_owned(),
        config,
        reference,
    };
    let mut out = Vec::new();
    match axis {
        AblationAxis::LossTerms => {
            let mut none = base.clone();
            none.augment.tas_branches.clear();
            none.loss.lambda2 = 0.0;
            none.loss.lambda3 = 0.0;
            let mut tas = base.clone();
            tas.loss.lambda2 = 0.0;
            tas.loss.lambda3 = 0.0;
            let mut pl = base.clone();
            pl.loss.lambda3 = 0.0;
            let rows = [("pCE only", none), ("+TAS", tas), ("+TAS +PL", pl), ("+TAS +PL +BD", base.clone())];
            for ((label, cfg), r) in rows.into_iter().zip(REFERENCE_LOSS_TERMS) {
                out.push(variant(None, label, cfg, Some(r)));
            }
        }
        AblationAxis::TasBranches => {
            use TasBranch::{Cutout as C, Intensity as I, Jigsaw as J};
            let subsets: [&[TasBranch]; 7] = [&[C], &[J], &[I], &[C, J], &[C, I], &[J, I], &[C, J, I]];
            for (set, r) in subsets.iter().zip(REFERENCE_TAS_BRANCHES) {
                let mut cfg = base.clone();
                cfg.augment.tas_branches = set.to_vec();
                let label: Vec<String> = set.iter().map(|b| {
                    let n = b.to_string();
                    n[..1].to_uppercase() + &n[1..]
                }).collect();
                out.push(variant(None, &label.join("+"), cfg, Some(r)));
            }
        }
        AblationAxis::PlBranches => {
            use Branch::{I, J, K};
            let rows: [(&[Branch], PlFusion); 9] = [
                (&[I], PlFusion::LossWeighted),
                (&[J], PlFusion::LossWeighted),
                (&[K], PlFusion::LossWeighted),
                (&[I, J], PlFusion::LossWeighted),
                (&[I, K], PlFusion::LossWeighted),
                (&[J, K], PlFusion::LossWeighted),
                (&[I, J, K], PlFusion::LossWeighted),
                (&[J, K], PlFusion::Average),
                (&[J, K], PlFusion::Random),
            ];
            for ((branches, fusion), r) in rows.iter().zip(REFERENCE_PL_BRANCHES) {
                let mut cfg = base.clone();
                cfg.bap.pl_branches = branches.to_vec();
                cfg.bap.pl_fusion = *fusion;
                let names: Vec<String> = branches.iter().map(Branch::to_string).collect();
                out.push(variant(None, &format!("{} {fusion}", names.join(",")), cfg, Some(r)));
            }
        }
        AblationAxis::LambdaSweep => {
            let grid = values.unwrap_or(&REFERENCE_LAMBDA_VALUES);
            if grid.is_empty() || grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidValue(format!("λ values must be finite and non-negative: {grid:?}")));
            }
            for (which, refs) in REFERENCE_LAMBDA_SWEEP.iter().enumerate() {
                for &v in grid {
                    let mut cfg = base.clone();
                    match which {
                        0 => cfg.loss.lambda1 = v,
                        1 => cfg.loss.lambda2 = v,
                        _ => cfg.loss.lambda3 = v,
                    }
                    let reference = REFERENCE_LAMBDA_VALUES
                        .iter()
                        .position(|&g| (g - v).abs() < 1e-12)
                        .map(|i| refs[i]);
                    out.push(variant(Some(format!("lambda{}", which + 1)), &format!("{v}"), cfg, reference));
                }
            }
        }
    }
    Ok(out)
}

/// Trains every configuration of `axis` and scores its best checkpoint on
/// `eval_cases`. Each run lives in its own subdirectory of `out_dir`.
pub fn run_ablation(
    axis: AblationAxis,
    train: &[TrainSample],
    val: &[Case],
    eval_cases: &[Case],
    base: &TrainConfig,
    values: Option<&[f64]>,
    out_dir: &Path,
) -> Result<AblationTable> {
    let variants = ablation_variants(axis, base, values)?;
    let mut rows = Vec::with_capacity(variants.len());
    for (i, v) in variants.into_iter().enumerate() {
        let name = format!("{i:02}_{}{}", v.group.as_deref().map(|g| format!("{g}_")).unwrap_or_default(), slug(&v.label));
        log::info!("{axis} [{}] {}", i + 1, v.label);
        let report = fit(train, val, &v.config, &FitOptions { out_dir: out_dir.join(name), resume: false })?;
        let ck_path = report.best_checkpoint.unwrap_or(report.last_checkpoint);
        let net = checkpoint::load(&ck_path, None)?.network()?;
        let predictor = NetworkPredictor { net: &net, image_size: v.config.model.image_size };
        let table = evaluate_cases(&predictor, eval_cases, v.config.model.num_classes)?;
        rows.push(AblationRow { group: v.group, label: v.label, table, reference: v.reference });
    }
    let table = AblationTable { axis, rows };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(format!("{}.txt", slug(axis.name()))), table.to_text())?;
    std::fs::write(out_dir.join(format!("{}.csv", slug(axis.name()))), table.to_csv())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_counts_per_axis() {
        let base = TrainConfig::default();
        let counts: Vec<usize> =
            AblationAxis::ALL.iter().map(|&a| ablation_variants(a, &base, None).unwrap().len()).collect();
        assert_eq!(counts, vec![4, 7, 9, 15]);
        let custom = ablation_variants(AblationAxis::LambdaSweep, &base, Some(&[1.0, 0.25])).unwrap();
        assert_eq!(custom.len(), 6);
        assert_eq!(custom[1].reference, None);
        assert_eq!(custom[0].reference, Some(0.891));
        assert!(ablation_variants(AblationAxis::LossTerms, &base, Some(&[1.0])).is_err());
        assert!("bogus".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn loss_term_rows_switch_terms() {
        let v = ablation_variants(AblationAxis::LossTerms, &TrainConfig::default(), None).unwrap();
        assert!(v[0].config.augment.tas_branches.is_empty());
        assert_eq!((v[1].config.loss.lambda2, v[1].config.loss.lambda3), (0.0, 0.0));
        assert_eq!((v[2].config.loss.lambda2, v[2].config.loss.lambda3), (0.3, 0.0));
        assert_eq!((v[3].config.loss.lambda2, v[3].config.loss.lambda3), (0.3, 0.1));
    }
}
