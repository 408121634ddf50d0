//! Zoo-level summaries and their CSV exports.
//!
//! | file | columns |
//! |---|---|
//! | `table1_population.csv` | label, models, with_hijacking, fraction_pct, mean_heads |
//! | `table2_drop.csv` | id, label, heads, clean_acc_before, clean_acc_after, delta_clean_pts, asr_before, asr_after, delta_asr_pts |
//! | `table3_health.csv` | label, models, healthy, mean_clean_accuracy, mean_asr, asr_pass_fraction |
//! | `table4_detector.csv` | method, accuracy, auc |
//! | `fig2_per_layer.csv` | layer, trojan_mean_heads, clean_mean_heads |
//! | `fig3_distance.csv` | id, label, layer, head, clean, poisoned, spurious |
//! | `fig4_cka.csv` | id, label, layer, before, after |
//!
//! Accuracies are fractions, `*_pts` columns are percentage points, and the
//! `id` of summary rows in `table2_drop.csv` is `mean`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    analyze_zoo, per_layer_counts, population_stats, AnalysisConfig, ModelAnalysis, PopulationStats,
};
use crate::detector::{cross_validate, scan_zoo, CrossValidation, DetectorConfig, DiscriminatorHyper};
use crate::error::Result;
use crate::io_util::write_atomic;
use crate::zoo::{ModelLabel, Zoo};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthRow {
    pub label: ModelLabel,
    pub models: usize,
    pub healthy: usize,
    pub mean_clean_accuracy: f64,
    pub mean_asr: f64,
    /// Fraction of models with ASR at or above the zoo's floor.
    pub asr_pass_fraction: f64,
}

pub fn zoo_health(zoo: &Zoo) -> Vec<HealthRow> {
    let floor = zoo.manifest.config.floors.asr;
    [ModelLabel::Trojan, ModelLabel::Clean]
        .into_iter()
        .map(|label| {
            let es: Vec<_> = zoo.manifest.entries.iter().filter(|e| e.label == label).collect();
            let n = es.len().max(1) as f64;
            HealthRow {
                label,
                models: es.len(),
                healthy: es.iter().filter(|e| e.healthy).count(),
                mean_clean_accuracy: es.iter().map(|e| e.metrics.clean_accuracy).sum::<f64>() / n,
                mean_asr: es.iter().map(|e| e.metrics.asr).sum::<f64>() / n,
                asr_pass_fraction: es.iter().filter(|e| e.metrics.asr >= floor).count() as f64 / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooReport {
    pub zoo_fingerprint: String,
    pub analysis: AnalysisConfig,
    pub detector_config: DetectorConfig,
    pub health: Vec<HealthRow>,
    pub population: PopulationStats,
    pub per_layer_trojan: Vec<f64>,
    pub per_layer_clean: Vec<f64>,
    pub models: Vec<ModelAnalysis>,
    pub detector: CrossValidation,
}

pub const CV_FOLDS: usize = 5;

impl ZooReport {
    pub fn compute(zoo: &Zoo, analysis: &AnalysisConfig, detector: &DetectorConfig) -> Result<Self> {
        let models = analyze_zoo(zoo, analysis)?;
        let pairs: Vec<_> = models.iter().map(|m| (m.label, &m.hijack)).collect();
        let population = population_stats(&pairs)?;
        let layers = |label| -> Result<Vec<f64>> {
            let rs: Vec<_> = models.iter().filter(|m| m.label == label).map(|m| &m.hijack).collect();
            if rs.is_empty() {
                Ok(vec![])
            } else {
                per_layer_counts(&rs)
            }
        };
        let scans = scan_zoo(zoo, detector, &[detector.hijack])?;
        let hyper = DiscriminatorHyper {
            seed: detector.seed,
            ..DiscriminatorHyper::default()
        };
        let cv = cross_validate(&scans, 0, CV_FOLDS, &detector.filter, &hyper, detector.seed)?;
        Ok(Self {
            zoo_fingerprint: crate::io_util::sha256_hex(zoo.manifest.to_json().as_bytes()),
            analysis: analysis.clone(),
            detector_config: detector.clone(),
            health: zoo_health(zoo),
            population,
            per_layer_trojan: layers(ModelLabel::Trojan)?,
            per_layer_clean: layers(ModelLabel::Clean)?,
            models,
            detector: cv,
        })
    }

    /// Writes the summary document and every CSV into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(&dir.join("summary.json"), json.as_bytes())?;
        for (name, bytes) in self.csv_files()? {
            write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }

    pub fn csv_files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        Ok(vec![
            ("table1_population.csv", table1(&self.population)?),
            ("table2_drop.csv", table2(&self.models)?),
            ("table3_health.csv", to_csv(&self.health)?),
            ("table4_detector.csv", table4(&self.detector)?),
            (
                "fig2_per_layer.csv",
                fig2(&self.per_layer_trojan, &self.per_layer_clean)?,
            ),
            ("fig3_distance.csv", fig3(&self.models)?),
            ("fig4_cka.csv", fig4(&self.models)?),
        ])
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
}

#[derive(Serialize)]
struct PopulationRow {
    label: ModelLabel,
    models: usize,
    with_hijacking: usize,
    fraction_pct: f64,
    mean_heads: f64,
}

pub fn table1(p: &PopulationStats) -> Result<Vec<u8>> {
    let row = |label, s: &crate::analysis::LabelStats| PopulationRow {
        label,
        models: s.models,
        with_hijacking: s.with_hijacking,
        fraction_pct: 100.0 * s.fraction,
        mean_heads: s.mean_heads,
    };
    to_csv(&[row(ModelLabel::Trojan, &p.trojan), row(ModelLabel::Clean, &p.clean)])
}

#[derive(Serialize)]
struct DropRow {
    id: String,
    label: ModelLabel,
    heads: f64,
    clean_acc_before: f64,
    clean_acc_after: f64,
    delta_clean_pts: f64,
    asr_before: f64,
    asr_after: f64,
    delta_asr_pts: f64,
}

fn table2(models: &[ModelAnalysis]) -> Result<Vec<u8>> {
    let row = |m: &ModelAnalysis| DropRow {
        id: m.id.clone(),
        label: m.label,
        heads: m.drop.deactivated.len() as f64,
        clean_acc_before: m.drop.before.clean_accuracy,
        clean_acc_after: m.drop.after.clean_accuracy,
        delta_clean_pts: 100.0 * m.drop.delta_clean_accuracy,
        asr_before: m.drop.before.asr,
        asr_after: m.drop.after.asr,
        delta_asr_pts: 100.0 * m.drop.delta_asr,
    };
    let mut rows: Vec<DropRow> = models.iter().map(row).collect();
    for label in [ModelLabel::Trojan, ModelLabel::Clean] {
        let sel: Vec<&DropRow> = rows.iter().filter(|r| r.label == label).collect();
        let n = sel.len().max(1) as f64;
        let mean = |f: fn(&DropRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        let summary = DropRow {
            id: "mean".into(),
            label,
            heads: mean(|r| r.heads),
            clean_acc_before: mean(|r| r.clean_acc_before),
            clean_acc_after: mean(|r| r.clean_acc_after),
            delta_clean_pts: mean(|r| r.delta_clean_pts),
            asr_before: mean(|r| r.asr_before),
            asr_after: mean(|r| r.asr_after),
            delta_asr_pts: mean(|r| r.delta_asr_pts),
        };
        rows.push(summary);
    }
    to_csv(&rows)
}

#[derive(Serialize)]
struct DetectorRow {
    method: &'static str,
    accuracy: f64,
    auc: f64,
}

fn table4(cv: &CrossValidation) -> Result<Vec<u8>> {
    to_csv(&[
        DetectorRow {
            method: "unsupervised",
            accuracy: cv.unsupervised.accuracy,
            auc: cv.unsupervised.auc,
        },
        DetectorRow {
            method: "supervised",
            accuracy: cv.supervised.accuracy,
            auc: cv.supervised.auc,
        },
    ])
}

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    trojan_mean_heads: f64,
    clean_mean_heads: f64,
}

fn fig2(trojan: &[f64], clean: &[f64]) -> Result<Vec<u8>> {
    let n = trojan.len().max(clean.len());
    to_csv(
        &(0..n)
            .map(|layer| LayerRow {
                layer,
                trojan_mean_heads: trojan.get(layer).copied().unwrap_or(0.0),
                clean_mean_heads: clean.get(layer).copied().unwrap_or(0.0),
            })
            .collect::<Vec<_>>(),
    )
}

#[derive(Serialize)]
struct DistanceRow<'a> {
    id: &'a str,
    label: ModelLabel,
    layer: usize,
    head: usize,
    clean: f64,
    poisoned: f64,
    spurious: f64,
}

fn fig3(models: &[ModelAnalysis]) -> Result<Vec<u8>> {
    let mut rows = vec![];
    for m in models {
        let d = &m.distance;
        for (layer, hs) in d.clean.iter().enumerate() {
            for head in 0..hs.len() {
                rows.push(DistanceRow {
                    id: &m.id,
                    label: m.label,
                    layer,
                    head,
                    clean: d.clean[layer][head],
                    poisoned: d.poisoned[layer][head],
                    spurious: d.spurious[layer][head],
                });
            }
        }
    }
    to_csv(&rows)
}

#[derive(Serialize)]
struct CkaRow<'a> {
    id: &'a str,
    label: ModelLabel,
    layer: usize,
    before: f64,
    after: f64,
}

fn fig4(models: &[ModelAnalysis]) -> Result<Vec<u8>> {
    let mut rows = vec![];
    for m in models {
        for (layer, (&before, &after)) in m.cka.before.iter().zip(&m.cka.after).enumerate() {
            rows.push(CkaRow {
                id: &m.id,
                label: m.label,
                layer,
                before,
                after,
            });
        }
    }
    to_csv(&rows)
}
