use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::transformer::{argmax, AttentionTrace, HeadId, Input, TransformerModel};

/// One development input plus the positions of the perturbation injected
/// into it (content positions, before any class token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevSample {
    pub input: Input,
    pub anchors: Vec<usize>,
}

/// Which token a sample's rows must converge on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenCriterion {
    /// Any single token, chosen per sample.
    AnyToken,
    /// One token index shared by every qualifying sample of the head.
    ConstantToken,
    /// One of the positions where the perturbation was injected.
    #[default]
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HijackParams {
    /// Row-fraction threshold.
    pub alpha: f64,
    /// A head is hijacking when more than `beta` samples qualify.
    pub beta: usize,
    #[serde(default)]
    pub criterion: TokenCriterion,
}

impl Default for HijackParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 5,
            criterion: TokenCriterion::Anchored,
        }
    }
}

impl HijackParams {
    pub fn validate(&self, dev_len: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if dev_len == 0 {
            return Err(Error::InvalidArgument("empty development set".into()));
        }
        if self.beta >= dev_len {
            return Err(Error::InvalidArgument(format!(
                "beta {} needs more than {} development samples",
                self.beta, dev_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadVerdict {
    pub head: HeadId,
    pub is_hijacking: bool,
    /// Modal hijacked token index (trace index, class token included) over
    /// qualifying samples.
    pub token: Option<usize>,
    /// Per sample: fraction of active rows whose argmax is the sample's
    /// candidate token under the criterion.
    pub row_fractions: Vec<f64>,
    pub qualifying: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HijackReport {
    pub params: HijackParams,
    pub dev_fingerprint: String,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Layer-major: `heads[layer * num_heads + head]`.
    pub heads: Vec<HeadVerdict>,
}

impl HijackReport {
    pub fn flagged(&self) -> Vec<HeadId> {
        self.heads.iter().filter(|h| h.is_hijacking).map(|h| h.head).collect()
    }

    pub fn count(&self) -> usize {
        self.heads.iter().filter(|h| h.is_hijacking).count()
    }

    pub fn per_layer(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_layers];
        for h in self.heads.iter().filter(|h| h.is_hijacking) {
            out[h.head.layer] += 1;
        }
        out
    }

    pub fn verdict(&self, head: HeadId) -> &HeadVerdict {
        &self.heads[head.layer * self.num_heads + head.head]
    }
}

/// Fraction of `active_rows` whose argmax column is `k`.
pub fn hijack_fraction(attn: &Matrix, k: usize, active_rows: Range<usize>) -> f64 {
    let n = active_rows.len();
    if n == 0 {
        return 0.0;
    }
    let hits = active_rows.filter(|&i| argmax(attn.row(i)) == k).count();
    hits as f64 / n as f64
}

/// Per-column argmax counts over the active rows.
fn argmax_counts(attn: &Matrix, rows: Range<usize>) -> Vec<usize> {
    let mut counts = vec![0; attn.cols()];
    for i in rows {
        counts[argmax(attn.row(i))] += 1;
    }
    counts
}

pub fn dev_fingerprint(dev: &[DevSample]) -> String {
    let mut h = Sha256::new();
    for s in dev {
        h.update(serde_json::to_vec(s).expect("dev sample serialises"));
    }
    hex::encode(h.finalize())
}

/// Runs the model on the development set and flags hijacking heads.
pub fn detect_hijacking_heads(
    model: &TransformerModel,
    dev: &[DevSample],
    params: &HijackParams,
) -> Result<HijackReport> {
    params.validate(dev.len())?;
    let inputs: Vec<Input> = dev.iter().map(|s| s.input.clone()).collect();
    let traces = model.forward(&inputs, true)?;
    let anchors: Vec<&[usize]> = dev.iter().map(|s| s.anchors.as_slice()).collect();
    report_from_traces(&traces, &anchors, params, dev_fingerprint(dev))
}

/// Hijacking-head detection over captured traces. `anchors[s]` lists content
/// positions of the injected perturbation in sample `s`; only the anchored
/// criterion reads it.
pub fn report_from_traces(
    traces: &[AttentionTrace],
    anchors: &[&[usize]],
    params: &HijackParams,
    dev_fingerprint: String,
) -> Result<HijackReport> {
    params.validate(traces.len())?;
    if anchors.len() != traces.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} anchor lists for {} traces",
            anchors.len(),
            traces.len()
        )));
    }
    let num_layers = traces[0].attention.len();
    if num_layers == 0 {
        return Err(Error::InvalidArgument("traces were captured without attention".into()));
    }
    let num_heads = traces[0].attention[0].len();
    let mut heads = Vec::with_capacity(num_layers * num_heads);
    for layer in 0..num_layers {
        for head in 0..num_heads {
            let counts: Vec<(Vec<usize>, Range<usize>)> = traces
                .iter()
                .map(|t| {
                    let rows = t.active_rows();
                    (argmax_counts(&t.attention[layer][head], rows.clone()), rows)
                })
                .collect();
            heads.push(judge_head(HeadId::new(layer, head), &counts, anchors, traces, params)?);
        }
    }
    Ok(HijackReport {
        params: *params,
        dev_fingerprint,
        num_layers,
        num_heads,
        heads,
    })
}

fn judge_head(
    head: HeadId,
    counts: &[(Vec<usize>, Range<usize>)],
    anchors: &[&[usize]],
    traces: &[AttentionTrace],
    params: &HijackParams,
) -> Result<HeadVerdict> {
    let frac = |c: &[usize], rows: &Range<usize>, k: usize| c[k] as f64 / rows.len().max(1) as f64;
    // per sample: (candidate token, fraction)
    let picks: Vec<(usize, f64)> = match params.criterion {
        TokenCriterion::AnyToken => counts
            .iter()
            .map(|(c, rows)| {
                let k = rows.clone().fold(rows.start, |b, k| if c[k] > c[b] { k } else { b });
                (k, frac(c, rows, k))
            })
            .collect(),
        TokenCriterion::Anchored => {
            let mut out = Vec::with_capacity(counts.len());
            for ((c, rows), (a, t)) in counts.iter().zip(anchors.iter().zip(traces)) {
                let offset = usize::from(t.class_token);
                let mut best: Option<usize> = None;
                for &p in a.iter() {
                    let k = p + offset;
                    if !rows.contains(&k) {
                        return Err(Error::IndexOutOfRange(format!("anchor {p} outside {} tokens", t.len)));
                    }
                    if best.is_none_or(|b| c[k] > c[b]) {
                        best = Some(k);
                    }
                }
                out.push(best.map_or((rows.start, 0.0), |k| (k, frac(c, rows, k))));
            }
            out
        }
        TokenCriterion::ConstantToken => {
            let max_len = counts.iter().map(|(c, _)| c.len()).max().unwrap_or(0);
            let mut best_k = None;
            let mut best_q = 0;
            for k in 0..max_len {
                let q = counts
                    .iter()
                    .filter(|(c, rows)| rows.contains(&k) && frac(c, rows, k) > params.alpha)
                    .count();
                if q > best_q {
                    best_q = q;
                    best_k = Some(k);
                }
            }
            counts
                .iter()
                .map(|(c, rows)| match best_k {
                    Some(k) if rows.contains(&k) => (k, frac(c, rows, k)),
                    _ => (rows.start, 0.0),
                })
                .collect()
        }
    };
    let mut modes: BTreeMap<usize, usize> = BTreeMap::new();
    let mut qualifying = 0;
    for &(k, f) in &picks {
        if f > params.alpha {
            qualifying += 1;
            *modes.entry(k).or_default() += 1;
        }
    }
    let token = modes
        .iter()
        .fold(None, |best: Option<(usize, usize)>, (&k, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((k, n)),
        })
        .map(|(k, _)| k);
    Ok(HeadVerdict {
        head,
        is_hijacking: qualifying > params.beta,
        token,
        row_fractions: picks.iter().map(|&(_, f)| f).collect(),
        qualifying,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stochastic(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::from_fn(n, n, |_, _| rng.gen::<f32>().powi(3));
        for i in 0..n {
            let s: f32 = m.row(i).iter().sum();
            for j in 0..n {
                m.set(i, j, m.get(i, j) / s);
            }
        }
        m
    }

    fn trace(attention: Vec<Vec<Matrix>>, class_token: bool) -> AttentionTrace {
        let len = attention[0][0].rows();
        AttentionTrace {
            logits: vec![0.0, 0.0],
            attention,
            hidden: vec![],
            len,
            class_token,
        }
    }

    #[test]
    fn fraction_column_and_diagonal() {
        let col = Matrix::from_fn(4, 4, |_, j| if j == 2 { 0.7 } else { 0.1 });
        assert_eq!(hijack_fraction(&col, 2, 0..4), 1.0);
        let diag = Matrix::from_fn(4, 4, |i, j| if i == j { 0.7 } else { 0.1 });
        for k in 0..4 {
            assert_eq!(hijack_fraction(&diag, k, 0..4), 0.25);
        }
    }

    #[test]
    fn fraction_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.gen_range(2..12);
            let m = stochastic(n, &mut rng);
            let k = rng.gen_range(0..n);
            let mut hits = 0;
            for i in 0..n {
                let row = m.row(i);
                let mut best = 0;
                for j in 1..n {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                hits += usize::from(best == k);
            }
            assert_eq!(hijack_fraction(&m, k, 0..n), hits as f64 / n as f64);
        }
    }

    #[test]
    fn single_head_fixture_flagged() {
        // head (0,1) always attends to token 3
        let traces: Vec<AttentionTrace> = (0..20)
            .map(|_| {
                let diagonal = Matrix::from_fn(6, 6, |i, j| if i == j { 0.5 } else { 0.1 });
                let focused = Matrix::from_fn(6, 6, |_, j| if j == 3 { 0.5 } else { 0.1 });
                trace(vec![vec![diagonal, focused]], false)
            })
            .collect();
        let anchors: Vec<&[usize]> = vec![&[3]; 20];
        for criterion in [
            TokenCriterion::AnyToken,
            TokenCriterion::ConstantToken,
            TokenCriterion::Anchored,
        ] {
            let params = HijackParams {
                alpha: 0.4,
                beta: 5,
                criterion,
            };
            let r = report_from_traces(&traces, &anchors, &params, String::new()).unwrap();
            assert_eq!(r.flagged(), vec![HeadId::new(0, 1)], "{criterion:?}");
            assert_eq!(r.verdict(HeadId::new(0, 1)).token, Some(3));
        }
    }

    #[test]
    fn uniform_attention_never_flagged() {
        let traces: Vec<AttentionTrace> = (0..10)
            .map(|_| trace(vec![vec![Matrix::from_fn(5, 5, |_, _| 0.2)]], true))
            .collect();
        let anchors: Vec<&[usize]> = vec![&[1]; 10];
        for alpha in [0.25, 0.5, 0.9] {
            for criterion in [
                TokenCriterion::AnyToken,
                TokenCriterion::ConstantToken,
                TokenCriterion::Anchored,
            ] {
                let params = HijackParams {
                    alpha,
                    beta: 2,
                    criterion,
                };
                // ties go to column 0, the class token, which no criterion may pick
                let r = report_from_traces(&traces, &anchors, &params, String::new()).unwrap();
                assert_eq!(r.count(), 0);
            }
        }
    }

    #[test]
    fn beta_must_be_below_dev_size() {
        let traces = vec![trace(vec![vec![Matrix::from_fn(3, 3, |_, _| 1.0 / 3.0)]], false)];
        let params = HijackParams {
            alpha: 0.3,
            beta: 1,
            criterion: TokenCriterion::AnyToken,
        };
        assert!(report_from_traces(&traces, &[&[0]], &params, String::new()).is_err());
    }

    /// Independent reimplementation of the any-token rule.
    fn brute_force_flags(traces: &[AttentionTrace], alpha: f64, beta: usize) -> Vec<HeadId> {
        let mut out = vec![];
        let (nl, nh) = (traces[0].attention.len(), traces[0].attention[0].len());
        for l in 0..nl {
            for h in 0..nh {
                let mut q = 0;
                for t in traces {
                    let a = &t.attention[l][h];
                    let rows: Vec<usize> = t.active_rows().collect();
                    let any = rows.iter().any(|&k| {
                        let hits = rows.iter().filter(|&&i| argmax(a.row(i)) == k).count();
                        hits as f64 / rows.len() as f64 > alpha
                    });
                    q += usize::from(any);
                }
                if q > beta {
                    out.push(HeadId::new(l, h));
                }
            }
        }
        out
    }

    fn random_traces(seed: u64, count: usize) -> Vec<AttentionTrace> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let n = rng.gen_range(3..9);
                let att = (0..2)
                    .map(|_| (0..2).map(|_| stochastic(n, &mut rng)).collect())
                    .collect();
                trace(att, rng.gen())
            })
            .collect()
    }

    #[test]
    fn any_token_matches_brute_force() {
        for seed in 0..30 {
            let traces = random_traces(seed, 12);
            let anchors: Vec<&[usize]> = vec![&[0]; traces.len()];
            for (alpha, beta) in [(0.3, 2), (0.4, 5), (0.6, 1)] {
                let params = HijackParams {
                    alpha,
                    beta,
                    criterion: TokenCriterion::AnyToken,
                };
                let r = report_from_traces(&traces, &anchors, &params, String::new()).unwrap();
                assert_eq!(r.flagged(), brute_force_flags(&traces, alpha, beta));
            }
        }
    }

    #[test]
    fn argmax_partitions_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let n = rng.gen_range(2..10);
            let m = stochastic(n, &mut rng);
            let total: f64 = (0..n).map(|k| hijack_fraction(&m, k, 0..n)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn monotone_in_alpha_and_beta(seed in 0u64..10_000, a1 in 0.05f64..0.9, da in 0.0f64..0.09, b1 in 0usize..5, db in 0usize..4) {
            let traces = random_traces(seed, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let anchor_vals: Vec<Vec<usize>> = traces
                .iter()
                .map(|t| vec![rng.gen_range(0..t.len - usize::from(t.class_token))])
                .collect();
            let anchors: Vec<&[usize]> = anchor_vals.iter().map(Vec::as_slice).collect();
            for criterion in [TokenCriterion::AnyToken, TokenCriterion::ConstantToken, TokenCriterion::Anchored] {
                let lo = HijackParams { alpha: a1, beta: b1, criterion };
                let hi = HijackParams { alpha: a1 + da, beta: b1 + db, criterion };
                let r_lo = report_from_traces(&traces, &anchors, &lo, String::new()).unwrap();
                let r_hi = report_from_traces(&traces, &anchors, &hi, String::new()).unwrap();
                for h in r_hi.flagged() {
                    prop_assert!(r_lo.flagged().contains(&h));
                }
            }
        }
    }
}
