//! Ablation presets and the average-relative-gain comparison table.

use super::{HarnessError, RunConfig};
use crate::decoder::SeFusion;
use crate::metrics::SixMetrics;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Component switches for one ablation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationPreset {
    pub name: String,
    /// CamoPrompts on; off uses the generic photo template.
    pub camo_prompts: bool,
    /// Semantic guidance on; off degrades SGA to plain self-attention.
    pub semantic_guidance: bool,
    pub depth_aux: bool,
    pub edge_aux: bool,
    pub iterations: usize,
    /// Correlation cue in the top-down guidance.
    pub correlation: bool,
    /// Pooled object representation cue in the top-down guidance.
    pub object_repr: bool,
    pub se_fusion: SeFusion,
}

impl AblationPreset {
    fn full(name: &str, iterations: usize) -> Self {
        Self {
            name: name.into(),
            camo_prompts: true,
            semantic_guidance: true,
            depth_aux: true,
            edge_aux: true,
            iterations,
            correlation: true,
            object_repr: true,
            se_fusion: SeFusion::Sea,
        }
    }

    /// Applies the switches onto a base configuration.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.run.template_set = if self.camo_prompts { "camo".into() } else { "photo".into() };
        cfg.decoder.semantic_guidance = self.semantic_guidance;
        cfg.decoder.depth_branch = self.depth_aux;
        cfg.decoder.edge_branch = self.edge_aux;
        cfg.decoder.iterations = self.iterations;
        cfg.decoder.use_correlation = self.correlation;
        cfg.decoder.use_object_repr = self.object_repr;
        cfg.decoder.se_fusion = self.se_fusion;
        cfg.run.out_dir = base.run.out_dir.join(&self.name);
        cfg
    }
}

/// The standard comparison rows: incremental components, the additive
/// SE fusion substitute, the iteration sweep, and the two guidance-cue
/// removals.
pub fn builtin_presets() -> Vec<AblationPreset> {
    let base = AblationPreset {
        name: "baseline".into(),
        camo_prompts: false,
        semantic_guidance: false,
        depth_aux: false,
        edge_aux: false,
        iterations: 1,
        correlation: true,
        object_repr: true,
        se_fusion: SeFusion::Sea,
    };
    let mut rows = vec![base.clone()];
    rows.push(AblationPreset { name: "p".into(), camo_prompts: true, ..base.clone() });
    rows.push(AblationPreset {
        name: "pc".into(),
        camo_prompts: true,
        semantic_guidance: true,
        ..base.clone()
    });
    rows.push(AblationPreset {
        name: "pcd".into(),
        camo_prompts: true,
        semantic_guidance: true,
        depth_aux: true,
        ..base.clone()
    });
    rows.push(AblationPreset {
        name: "pce".into(),
        camo_prompts: true,
        semantic_guidance: true,
        edge_aux: true,
        ..base.clone()
    });
    rows.push(AblationPreset { name: "pcde_t1".into(), ..AblationPreset::full("pcde_t1", 1) });
    rows.push(AblationPreset {
        se_fusion: SeFusion::Addition,
        ..AblationPreset::full("se_addition", 1)
    });
    rows.push(AblationPreset::full("t1", 1));
    rows.push(AblationPreset::full("t2", 2));
    rows.push(AblationPreset::full("t3", 3));
    rows.push(AblationPreset { correlation: false, ..AblationPreset::full("no_mcor", 2) });
    rows.push(AblationPreset { object_repr: false, ..AblationPreset::full("no_fobj", 2) });
    rows
}

/// Average relative gain over the six metrics, sign-flipped for MAE so
/// improvements are positive.
pub fn delta_vs_baseline(base: &SixMetrics, row: &SixMetrics) -> f64 {
    let b = base.as_row();
    let r = row.as_row();
    let mut acc = 0.0;
    for i in 0..6 {
        let rel = if i == 2 {
            (b[i] - r[i]) / b[i] // MAE: lower is better
        } else {
            (r[i] - b[i]) / b[i]
        };
        acc += rel;
    }
    acc / 6.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: SixMetrics,
    /// Average relative gain vs the baseline row, in percent.
    pub delta_percent: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "{:<14} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}\n",
            "preset", "cSm", "cFbw", "cMAE", "cFb", "cEm", "cIoU", "delta"
        );
        for r in &self.rows {
            let m = r.metrics.as_row();
            out.push_str(&format!(
                "{:<14} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.1}%\n",
                r.name, m[0], m[1], m[2], m[3], m[4], m[5], r.delta_percent
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Serde(e.to_string()))?;
        w.write_record(["preset", "cSm", "cFbw", "cMAE", "cFb", "cEm", "cIoU", "delta_percent"])
            .map_err(|e| HarnessError::Serde(e.to_string()))?;
        for r in &self.rows {
            let m = r.metrics.as_row();
            let mut rec = vec![r.name.clone()];
            rec.extend(m.iter().map(|v| format!("{v:.6}")));
            rec.push(format!("{:.3}", r.delta_percent));
            w.write_record(&rec).map_err(|e| HarnessError::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| HarnessError::Serde(e.to_string()))?;
        Ok(())
    }
}

/// Runs every preset through a caller-supplied runner (train + eval)
/// and assembles the comparison table. The preset list must contain a
/// `baseline` row and unique names.
pub fn ablate_samples(
    base: &RunConfig,
    presets: &[AblationPreset],
    mut run_one: impl FnMut(&AblationPreset, &RunConfig) -> Result<SixMetrics, HarnessError>,
) -> Result<AblationTable, HarnessError> {
    let mut names = BTreeSet::new();
    for p in presets {
        if !names.insert(p.name.clone()) {
            return Err(HarnessError::PresetCollision(p.name.clone()));
        }
    }
    if !names.contains("baseline") {
        return Err(HarnessError::MissingBaseline);
    }
    let mut results = Vec::with_capacity(presets.len());
    for p in presets {
        let cfg = p.apply(base);
        let metrics = run_one(p, &cfg)?;
        results.push((p.name.clone(), metrics));
    }
    let baseline = results
        .iter()
        .find(|(n, _)| n == "baseline")
        .map(|(_, m)| *m)
        .expect("baseline presence checked");
    let rows = results
        .into_iter()
        .map(|(name, metrics)| AblationRow {
            name,
            metrics,
            delta_percent: delta_vs_baseline(&baseline, &metrics) * 100.0,
        })
        .collect();
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_delta_is_zero() {
        let m = SixMetrics::from_row([0.5, 0.4, 0.37, 0.45, 0.55, 0.36]);
        assert_eq!(delta_vs_baseline(&m, &m), 0.0);
    }

    #[test]
    fn presets_cover_expected_rows() {
        let presets = builtin_presets();
        let names: Vec<&str> = presets.iter().map(|p| p.name.as_str()).collect();
        for want in
            ["baseline", "p", "pc", "pcd", "pce", "pcde_t1", "se_addition", "t1", "t2", "t3", "no_mcor", "no_fobj"]
        {
            assert!(names.contains(&want), "missing preset {want}");
        }
        let t_iters: Vec<usize> = presets
            .iter()
            .filter(|p| ["t1", "t2", "t3"].contains(&p.name.as_str()))
            .map(|p| p.iterations)
            .collect();
        assert_eq!(t_iters, vec![1, 2, 3]);
    }

    #[test]
    fn collision_and_missing_baseline_rejected() {
        let base = RunConfig::default();
        let mut presets = builtin_presets();
        presets.push(presets[1].clone());
        let err = ablate_samples(&base, &presets, |_, _| Ok(SixMetrics::default()));
        assert!(matches!(err, Err(HarnessError::PresetCollision(_))));

        let only_p = vec![builtin_presets().remove(1)];
        let err = ablate_samples(&base, &only_p, |_, _| Ok(SixMetrics::default()));
        assert!(matches!(err, Err(HarnessError::MissingBaseline)));
    }

    #[test]
    fn apply_switches_config() {
        let base = RunConfig::default();
        let p = builtin_presets().into_iter().find(|p| p.name == "baseline").unwrap();
        let cfg = p.apply(&base);
        assert_eq!(cfg.run.template_set, "photo");
        assert!(!cfg.decoder.semantic_guidance);
        assert!(!cfg.decoder.edge_branch);
        assert!(!cfg.decoder.depth_branch);
        assert_eq!(cfg.decoder.iterations, 1);
        let t2 = builtin_presets().into_iter().find(|p| p.name == "t2").unwrap().apply(&base);
        assert_eq!(t2.run.template_set, "camo");
        assert_eq!(t2.decoder.iterations, 2);
    }
}
