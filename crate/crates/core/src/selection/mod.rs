//! Sub-category selection: probe-train each mined sub-category from the base
//! model, record validation curves for every dataset, keep the sub-categories
//! whose own curve moves against the general dataset's, and merge the kept
//! ones whose curves move together.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::imaging::CfaPattern;
use crate::mining::{PatchRef, SubCategory};
use crate::model::{adam_step, AdamState, Checkpoint};
use crate::training::{validate_mean_l1, GENERAL_DATASET};
use crate::util::{derive_seed, ordered_parallel_map, rng_from_seed};

/// Per-epoch validation losses for one dataset during a probe session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationCurve {
    pub dataset_name: String,
    pub losses: Vec<f64>,
}

impl ValidationCurve {
    pub fn validate(&self) -> Result<()> {
        if self.losses.len() < 3 {
            return Err(Error::Selection(format!(
                "curve '{}' has {} points; correlation needs >= 3",
                self.dataset_name,
                self.losses.len()
            )));
        }
        if self.losses.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Selection(format!("curve '{}' has invalid losses", self.dataset_name)));
        }
        Ok(())
    }
}

/// All validation curves recorded while probe-training on one sub-category.
/// Always contains the reserved "general" curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveSet {
    pub trained_on: String,
    pub curves: BTreeMap<String, ValidationCurve>,
}

impl CurveSet {
    pub fn validate(&self) -> Result<()> {
        let general = self
            .curves
            .get(GENERAL_DATASET)
            .ok_or_else(|| Error::Selection("curve set is missing the 'general' curve".into()))?;
        general.validate()?;
        if !self.curves.contains_key(&self.trained_on) {
            return Err(Error::Selection(format!(
                "curve set for '{}' is missing its own curve",
                self.trained_on
            )));
        }
        let len = general.losses.len();
        for c in self.curves.values() {
            c.validate()?;
            if c.losses.len() != len {
                return Err(Error::Selection("curves have unequal lengths".into()));
            }
        }
        Ok(())
    }

    pub fn own_curve(&self) -> &ValidationCurve {
        &self.curves[&self.trained_on]
    }

    pub fn general_curve(&self) -> &ValidationCurve {
        &self.curves[GENERAL_DATASET]
    }
}

/// Correlations measured during selection: step-1 own-vs-general values and
/// step-2 pairwise values (evaluated on the owner session's curves), plus the
/// raw curves for replay.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub own_vs_general: BTreeMap<String, f64>,
    pub merge_pairs: Vec<MergePairRho>,
    pub curve_sets: Vec<CurveSet>,
    pub kept: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MergePairRho {
    pub owner: String,
    pub other: String,
    pub rho: f64,
}

/// A merged group of sub-categories with combined ref splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankEntry {
    pub name: String,
    pub sources: Vec<String>,
    pub train_refs: Vec<PatchRef>,
    pub val_refs: Vec<PatchRef>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryBank {
    pub entries: Vec<BankEntry>,
}

impl CategoryBank {
    pub fn union_train_refs(&self) -> Vec<PatchRef> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            for r in &e.train_refs {
                if seen.insert(*r) {
                    out.push(*r);
                }
            }
        }
        out
    }

    pub fn union_val_refs(&self) -> Vec<PatchRef> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            for r in &e.val_refs {
                if seen.insert(*r) {
                    out.push(*r);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Keep a sub-category iff its own-vs-general rho is strictly below this.
    pub th_neg: f64,
    /// Merge kept sub-categories when pairwise rho is strictly above this.
    pub th_pos: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { th_neg: -0.2, th_pos: 0.5, probe_epochs: 8, probe_lr: 1e-4, probe_batch: 16, seed: 0 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.th_neg)
            || !(-1.0..=1.0).contains(&self.th_pos)
            || self.th_neg > self.th_pos
        {
            return Err(Error::InvalidConfig("need -1 <= th_neg <= th_pos <= 1".into()));
        }
        if self.probe_epochs < 3 {
            return Err(Error::InvalidConfig("probe_epochs must be >= 3 for correlation".into()));
        }
        if self.probe_lr < 0.0 {
            return Err(Error::InvalidConfig("probe_lr must be >= 0".into()));
        }
        if self.probe_batch < 1 {
            return Err(Error::InvalidConfig("probe_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Average ranks (ties get the mean of their positions, 1-based).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j share the same value; mean rank of (i+1)..=(j+1).
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Constant inputs
/// yield 0 by definition (no monotone evidence either way). Strictly
/// co-monotone inputs return exactly +/-1.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Selection(format!("length mismatch {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Selection(format!("need >= 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Selection("non-finite input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len();

    // Exact extremes: identical rank vectors are perfect agreement, mirrored
    // ones perfect reversal.
    if rx == ry {
        if rx.iter().all(|&r| r == rx[0]) {
            return Ok(0.0); // both constant
        }
        return Ok(1.0);
    }
    let n1 = (n + 1) as f64;
    if rx.iter().zip(&ry).all(|(a, b)| a + b == n1) {
        return Ok(-1.0);
    }

    // Rank sums are always n(n+1)/2, so the mean is exact.
    let mean = n1 / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        let u = a - mean;
        let v = b - mean;
        num += u * v;
        dx += u * u;
        dy += v * v;
    }
    if dx == 0.0 || dy == 0.0 {
        return Ok(0.0);
    }
    Ok((num / (dx * dy).sqrt()).clamp(-1.0, 1.0))
}

/// Source of probe curves. Production probing trains the model; fixtures can
/// inject prescribed curves.
pub trait ProbeSource {
    fn probe(&self, subcat: &SubCategory) -> Result<CurveSet>;
}

/// Production probe: brief training on one sub-category starting from the
/// base checkpoint (never mutated), recording per-epoch validation losses on
/// every sub-category and the general set.
pub struct TrainingProbe<'a> {
    pub base: &'a Checkpoint,
    pub all_subcats: &'a [SubCategory],
    pub general_val: &'a [PatchRef],
    pub corpus: &'a Corpus,
    pub cfg: &'a SelectionConfig,
}

impl TrainingProbe<'_> {
    fn run(&self, subcat: &SubCategory) -> Result<CurveSet> {
        if subcat.train_refs.is_empty() || subcat.val_refs.is_empty() {
            return Err(Error::Selection(format!("sub-category '{}' is empty", subcat.name)));
        }
        let pattern = CfaPattern::default();
        let spec = self.base.spec;
        let mut params = self.base.params.clone();
        let mut adam = AdamState::new(&spec);

        let mut curves: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for epoch in 0..self.cfg.probe_epochs {
            let mut rng = rng_from_seed(derive_seed(
                self.cfg.seed,
                &format!("probe/{}/epoch{epoch}", subcat.name),
            ));
            // One pass over the sub-category's train refs in shuffled order.
            use rand::seq::SliceRandom;
            let mut order: Vec<usize> = (0..subcat.train_refs.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.probe_batch) {
                let mut acc: Option<crate::model::Gradients> = None;
                for &i in chunk {
                    let r = subcat.train_refs[i];
                    let gt = r.resolve(self.corpus)?;
                    let packed =
                        crate::model::pack_bayer(&crate::imaging::mosaic(&gt, pattern)?);
                    let (_loss, grads) =
                        crate::model::loss_and_gradients(&params, &spec, &packed, &gt)?;
                    acc = Some(match acc {
                        None => grads,
                        Some(mut a) => {
                            for (t, g) in a.tensors_mut().iter_mut().zip(grads.tensors()) {
                                for (v, w) in t.data_mut().iter_mut().zip(g.data()) {
                                    *v += *w;
                                }
                            }
                            a
                        }
                    });
                }
                let mut grads = acc.expect("non-empty chunk");
                let inv = 1.0 / chunk.len() as f64;
                for t in grads.tensors_mut() {
                    for v in t.data_mut() {
                        *v *= inv;
                    }
                }
                let (p, a) = adam_step(&params, &grads, &adam, self.cfg.probe_lr)?;
                params = p;
                adam = a;
            }

            for other in self.all_subcats {
                let loss =
                    validate_mean_l1(&params, &spec, self.corpus, &other.val_refs, pattern)?;
                curves.entry(other.name.clone()).or_default().push(loss);
            }
            let general =
                validate_mean_l1(&params, &spec, self.corpus, self.general_val, pattern)?;
            curves.entry(GENERAL_DATASET.to_string()).or_default().push(general);
        }

        let curves = curves
            .into_iter()
            .map(|(name, losses)| {
                (name.clone(), ValidationCurve { dataset_name: name, losses })
            })
            .collect();
        let set = CurveSet { trained_on: subcat.name.clone(), curves };
        set.validate()?;
        Ok(set)
    }
}

impl ProbeSource for TrainingProbe<'_> {
    fn probe(&self, subcat: &SubCategory) -> Result<CurveSet> {
        self.run(subcat)
    }
}

/// Step 1: keep sub-categories whose own validation curve is negatively
/// correlated with the general dataset's (rho strictly below `th_neg`).
/// Output preserves input order.
pub fn inverse_correlation_filter<'a>(
    curve_sets: &'a [CurveSet],
    cfg: &SelectionConfig,
) -> Result<(Vec<&'a CurveSet>, BTreeMap<String, f64>)> {
    let mut kept = Vec::new();
    let mut rhos = BTreeMap::new();
    for cs in curve_sets {
        cs.validate()?;
        let rho = spearman(&cs.own_curve().losses, &cs.general_curve().losses)?;
        rhos.insert(cs.trained_on.clone(), rho);
        if rho < cfg.th_neg {
            kept.push(cs);
        }
    }
    Ok((kept, rhos))
}

/// Step 2: merge kept sub-categories whose curves co-move. An edge (a, b)
/// exists when, in a's probe session, spearman(a's own curve, b's curve)
/// exceeds `th_pos`; connected components become single bank entries.
pub fn merge_positively_correlated(
    kept: &[&CurveSet],
    subcats: &[SubCategory],
    cfg: &SelectionConfig,
) -> Result<(CategoryBank, Vec<MergePairRho>)> {
    let n = kept.len();
    let mut pair_log = Vec::new();
    // Union-find over kept indices.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for a in 0..n {
        let own = &kept[a].own_curve().losses;
        for b in 0..n {
            if a == b {
                continue;
            }
            let other_name = &kept[b].trained_on;
            let Some(other_curve) = kept[a].curves.get(other_name) else {
                continue;
            };
            let rho = spearman(own, &other_curve.losses)?;
            pair_log.push(MergePairRho {
                owner: kept[a].trained_on.clone(),
                other: other_name.clone(),
                rho,
            });
            if rho > cfg.th_pos {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[rb.max(ra)] = rb.min(ra);
                }
            }
        }
    }

    // Components in first-seen order.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let by_name: BTreeMap<&str, &SubCategory> =
        subcats.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut entries = Vec::new();
    for members in groups.values() {
        let names: Vec<String> = members.iter().map(|&i| kept[i].trained_on.clone()).collect();
        let mut train_refs: Vec<PatchRef> = Vec::new();
        let mut val_refs: Vec<PatchRef> = Vec::new();
        let mut seen_val = std::collections::BTreeSet::new();
        let mut seen_train = std::collections::BTreeSet::new();
        for name in &names {
            let sub = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Selection(format!("kept sub-category '{name}' not in input list"))
            })?;
            for r in &sub.val_refs {
                if seen_val.insert(*r) {
                    val_refs.push(*r);
                }
            }
        }
        for name in &names {
            let sub = by_name[name.as_str()];
            for r in &sub.train_refs {
                // A ref that lands in any member's validation stays
                // validation-only so the merged split remains disjoint.
                if !seen_val.contains(r) && seen_train.insert(*r) {
                    train_refs.push(*r);
                }
            }
        }
        entries.push(BankEntry { name: names.join("+"), sources: names, train_refs, val_refs });
    }
    Ok((CategoryBank { entries }, pair_log))
}

/// Full selection: probe every sub-category, filter, merge. Returns the bank
/// (possibly empty) and the correlation report artifact.
pub fn select_subcategories<P: ProbeSource + Sync>(
    probe: &P,
    subcats: &[SubCategory],
    cfg: &SelectionConfig,
) -> Result<(CategoryBank, CorrelationReport)> {
    cfg.validate()?;
    if subcats.is_empty() {
        return Err(Error::Selection("no sub-categories to select from".into()));
    }
    for s in subcats {
        if s.name == GENERAL_DATASET {
            return Err(Error::Selection("'general' is a reserved dataset name".into()));
        }
    }
    let curve_sets: Vec<CurveSet> = ordered_parallel_map(subcats, |s| probe.probe(s))
        .into_iter()
        .collect::<Result<_>>()?;
    let (kept, own_vs_general) = inverse_correlation_filter(&curve_sets, cfg)?;
    let kept_names: Vec<String> = kept.iter().map(|c| c.trained_on.clone()).collect();
    let (bank, merge_pairs) = merge_positively_correlated(&kept, subcats, cfg)?;
    let report = CorrelationReport {
        own_vs_general,
        merge_pairs,
        curve_sets,
        kept: kept_names,
    };
    Ok((bank, report))
}
