//! Attention-hijacking analyses: hijacking-head detection, population and
//! per-layer statistics, attention distance, layer CKA and the
//! deactivation experiment.

mod cka;
mod distance;
mod hijack;
mod population;

pub use cka::{cka_profile, functionality_drop, layer_cka, CkaProfile, FunctionalityDrop};
pub use distance::{
    average_attention_distance, deep_layers, deep_mean, distance_from_traces, distance_profile, relative_gap,
    DistanceProfile, LayerHeadMatrix,
};
pub use hijack::{
    detect_hijacking_heads, dev_fingerprint, hijack_fraction, report_from_traces, DevSample, HeadVerdict, HijackParams,
    HijackReport, TokenCriterion,
};
pub use population::{
    analyze_model, analyze_zoo, dev_base, dev_samples, hijack_sweep, per_layer_counts, population_stats, probe_sets,
    AnalysisConfig, LabelStats, ModelAnalysis, PopulationStats, ProbeSets,
};
