//! Similarity, InfoNCE, the dual loss with false-negative positives, and
//! MaskFN false-negative selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::batch::BatchLayout;
use crate::embedding::{cosine, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub l2_weight: f64,
    pub n_fn: usize,
    pub include_positive_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            l2_weight: 0.5,
            n_fn: 1,
            include_positive_in_denominator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "loss.temperature",
                format!("must be > 0, got {}", self.temperature),
            ));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::config(
                "loss.l2_weight",
                format!("must be >= 0, got {}", self.l2_weight),
            ));
        }
        Ok(())
    }

    /// `n_fn` must stay small relative to the batch.
    pub fn validate_for_batch(&self, batch_size: usize) -> Result<()> {
        self.validate()?;
        if self.n_fn > batch_size / 8 {
            return Err(Error::config(
                "loss.n_fn",
                format!(
                    "n_fn = {} exceeds batch_size / 8 = {}",
                    self.n_fn,
                    batch_size / 8
                ),
            ));
        }
        Ok(())
    }
}

/// Dense square similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Argument(format!(
                "similarity buffer has {} values, expected {n}x{n}",
                data.len()
            )));
        }
        Ok(SimilarityMatrix { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn cosine_similarity_matrix(e: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    let u = e.l2_normalized()?;
    let n = u.rows();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in i + 1..n {
            let v = crate::embedding::dot(u.row(i), u.row(j));
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    SimilarityMatrix::new(n, data)
}

pub fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Denominator index set of anchor `i`: every view outside `exclusions ∪ {i, j}`,
/// plus `j` when the positive is re-added.
fn denominator(
    n: usize,
    anchor: usize,
    positive: usize,
    exclusions: &BTreeSet<usize>,
    cfg: &LossConfig,
) -> Vec<usize> {
    (0..n)
        .filter(|&k| {
            (k == positive && cfg.include_positive_in_denominator)
                || (k != anchor && k != positive && !exclusions.contains(&k))
        })
        .collect()
}

/// InfoNCE for one anchor/positive pair.
pub fn info_nce(
    s: &SimilarityMatrix,
    anchor: usize,
    positive: usize,
    exclusions: &BTreeSet<usize>,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(info_nce_terms(s, anchor, positive, exclusions, cfg)?.0)
}

/// Loss and `(k, ∂loss/∂S[anchor][k])` pairs.
fn info_nce_terms(
    s: &SimilarityMatrix,
    anchor: usize,
    positive: usize,
    exclusions: &BTreeSet<usize>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let n = s.len();
    if anchor >= n || positive >= n || anchor == positive {
        return Err(Error::Loss(format!(
            "invalid anchor/positive pair ({anchor}, {positive}) for {n} views"
        )));
    }
    let den = denominator(n, anchor, positive, exclusions, cfg);
    if den.is_empty() {
        return Err(Error::Loss(format!(
            "anchor {anchor} has an empty denominator (batch too small or over-excluded)"
        )));
    }
    let tau = cfg.temperature;
    let logits = den.iter().map(|&k| s.get(anchor, k) / tau);
    let lse = logsumexp(logits.clone());
    let loss = lse - s.get(anchor, positive) / tau;
    let mut grads: Vec<(usize, f64)> = den
        .iter()
        .zip(logits)
        .map(|(&k, z)| (k, (z - lse).exp() / tau))
        .collect();
    grads.push((positive, -1.0 / tau));
    Ok((loss, grads))
}

/// False negatives chosen for one anchor group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnChoice {
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    /// Anchor, positive and hard negative of the group.
    pub excluded: Vec<usize>,
}

/// Per-group MaskFN selection, indexed like `BatchLayout::groups`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FnSelection {
    pub groups: Vec<FnChoice>,
}

impl FnSelection {
    pub fn empty(n_groups: usize) -> Self {
        FnSelection {
            groups: vec![
                FnChoice {
                    selected: Vec::new(),
                    scores: Vec::new(),
                    excluded: Vec::new(),
                };
                n_groups
            ],
        }
    }

    pub fn selected(&self, group: usize) -> &[usize] {
        self.groups.get(group).map_or(&[], |c| &c.selected)
    }

    pub fn total_selected(&self) -> usize {
        self.groups.iter().map(|c| c.selected.len()).sum()
    }
}

/// Frozen region descriptor producing `z^cat` for an (eye, mouth) crop pair.
pub trait Descriptor {
    fn describe(&self, eye: &Image, mouth: &Image) -> Result<Vec<f64>>;
}

/// MaskFN selection from crops of every view.
pub fn maskfn_select(
    crops: &[(Image, Image)],
    descriptor: &dyn Descriptor,
    layout: &BatchLayout,
    n_fn: usize,
) -> Result<FnSelection> {
    if n_fn == 0 {
        return Ok(FnSelection::empty(layout.groups().len()));
    }
    if crops.len() != layout.len() {
        return Err(Error::Selection(format!(
            "{} crop pairs for {} views",
            crops.len(),
            layout.len()
        )));
    }
    let rows = crops
        .iter()
        .map(|(e, m)| descriptor.describe(e, m))
        .collect::<Result<Vec<_>>>()?;
    maskfn_select_from_features(&EmbeddingMatrix::from_rows(&rows)?, layout, n_fn)
}

/// MaskFN selection given `z^cat` per view: top-`n_fn` cosine neighbours of
/// each anchor, excluding the anchor's own partners. Ties go to the lower index.
pub fn maskfn_select_from_features(
    zcat: &EmbeddingMatrix,
    layout: &BatchLayout,
    n_fn: usize,
) -> Result<FnSelection> {
    if zcat.rows() != layout.len() {
        return Err(Error::Selection(format!(
            "{} descriptor rows for {} views",
            zcat.rows(),
            layout.len()
        )));
    }
    if n_fn == 0 {
        return Ok(FnSelection::empty(layout.groups().len()));
    }
    zcat.norms()?;
    let mut groups = Vec::with_capacity(layout.groups().len());
    for (g, grp) in layout.groups().iter().enumerate() {
        let mut excluded = vec![grp.anchor, grp.positive];
        excluded.extend(grp.hard_negative);
        let mut cands: Vec<(usize, f64)> = (0..layout.len())
            .filter(|k| !excluded.contains(k))
            .map(|k| (k, cosine(zcat.row(grp.anchor), zcat.row(k))))
            .collect();
        if cands.len() < n_fn {
            return Err(Error::Selection(format!(
                "group {g} has {} candidates, fewer than n_fn = {n_fn}",
                cands.len()
            )));
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(n_fn);
        groups.push(FnChoice {
            selected: cands.iter().map(|c| c.0).collect(),
            scores: cands.iter().map(|c| c.1).collect(),
            excluded,
        });
    }
    Ok(FnSelection { groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
}

fn check_selection(layout: &BatchLayout, fns: &FnSelection) -> Result<()> {
    if fns.groups.len() != layout.groups().len() {
        return Err(Error::Loss(format!(
            "selection covers {} groups, batch has {}",
            fns.groups.len(),
            layout.groups().len()
        )));
    }
    for (g, (grp, c)) in layout.groups().iter().zip(&fns.groups).enumerate() {
        for &l in &c.selected {
            if l >= layout.len()
                || l == grp.anchor
                || l == grp.positive
                || Some(l) == grp.hard_negative
            {
                return Err(Error::Loss(format!(
                    "group {g}: false negative {l} is not an eligible view"
                )));
            }
        }
    }
    Ok(())
}

/// Dual loss and, optionally, `∂total/∂S` as a dense row-major matrix.
fn dual_loss_impl(
    s: &SimilarityMatrix,
    layout: &BatchLayout,
    fns: &FnSelection,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossTerms, Option<Vec<f64>>)> {
    if s.len() != layout.len() {
        return Err(Error::Loss(format!(
            "similarity is {}x{} but the batch has {} views",
            s.len(),
            s.len(),
            layout.len()
        )));
    }
    check_selection(layout, fns)?;
    let n = s.len();
    let groups = layout.groups();
    if groups.is_empty() {
        return Err(Error::Loss("batch has no anchors".into()));
    }
    let inv_a = 1.0 / groups.len() as f64;
    let mut grad = want_grad.then(|| vec![0.0; n * n]);
    let (mut l1, mut l2) = (0.0, 0.0);
    for (g, grp) in groups.iter().enumerate() {
        let i = grp.anchor;
        let ls = fns.selected(g);
        let mut ex = layout.exclusions(g).clone();
        ex.extend(ls.iter().copied());
        let wrap = |e: Error| Error::Loss(format!("anchor {i}: {e}"));
        let (v, terms) = info_nce_terms(s, i, grp.positive, &ex, cfg).map_err(wrap)?;
        l1 += v * inv_a;
        if let Some(gr) = grad.as_mut() {
            for (k, d) in terms {
                gr[i * n + k] += d * inv_a;
            }
        }
        if !ls.is_empty() {
            let w = inv_a / ls.len() as f64;
            for &l in ls {
                let (v, terms) = info_nce_terms(s, i, l, &ex, cfg).map_err(wrap)?;
                l2 += v * w;
                if let Some(gr) = grad.as_mut() {
                    for (k, d) in terms {
                        gr[i * n + k] += d * w * cfg.l2_weight;
                    }
                }
            }
        }
    }
    let total = l1 + cfg.l2_weight * l2;
    Ok((LossTerms { total, l1, l2 }, grad))
}

pub fn dual_contrastive_loss(
    s: &SimilarityMatrix,
    layout: &BatchLayout,
    fns: &FnSelection,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    Ok(dual_loss_impl(s, layout, fns, cfg, false)?.0)
}

/// Dual loss on raw embeddings (cosine similarity) with the gradient of the
/// total loss with respect to every embedding entry.
pub fn dual_contrastive_loss_grad(
    e: &EmbeddingMatrix,
    layout: &BatchLayout,
    fns: &FnSelection,
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let norms = e.norms()?;
    let u = e.l2_normalized()?;
    let s = cosine_similarity_matrix(e)?;
    let (terms, gs) = dual_loss_impl(&s, layout, fns, cfg, true)?;
    let gs = gs.expect("gradient requested");
    let (n, d) = (e.rows(), e.dim());
    // dL/du_i = Σ_k (G_ik + G_ki) u_k, then project out u_i and scale by 1/‖e_i‖.
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let gu = &mut grad[i * d..(i + 1) * d];
        for k in 0..n {
            if k == i {
                continue;
            }
            let c = gs[i * n + k] + gs[k * n + i];
            if c != 0.0 {
                for (g, x) in gu.iter_mut().zip(u.row(k)) {
                    *g += c * x;
                }
            }
        }
        let ui = u.row(i);
        let proj = crate::embedding::dot(gu, ui);
        for (g, x) in gu.iter_mut().zip(ui) {
            *g = (*g - proj * x) / norms[i];
        }
    }
    Ok((terms, grad))
}

/// Fraction of anchors whose designated positive strictly beats every
/// denominator view. MaskFN selections are excluded, never counted correct.
pub fn top1_accuracy(s: &SimilarityMatrix, layout: &BatchLayout, fns: &FnSelection) -> f64 {
    let groups = layout.groups();
    if groups.is_empty() {
        return 0.0;
    }
    let hits = groups
        .iter()
        .enumerate()
        .filter(|(g, grp)| {
            let mut ex = layout.exclusions(*g).clone();
            ex.extend(fns.selected(*g).iter().copied());
            let pos = s.get(grp.anchor, grp.positive);
            (0..s.len())
                .filter(|k| *k != grp.anchor && *k != grp.positive && !ex.contains(k))
                .all(|k| s.get(grp.anchor, k) < pos)
        })
        .count();
    hits as f64 / groups.len() as f64
}

/// Extremes of the off-diagonal similarities, for diagnostics.
pub fn similarity_extrema(s: &SimilarityMatrix) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..s.len() {
        for j in 0..s.len() {
            if i != j {
                lo = lo.min(s.get(i, j));
                hi = hi.max(s.get(i, j));
            }
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    fn cfg(tau: f64) -> LossConfig {
        LossConfig {
            temperature: tau,
            ..LossConfig::default()
        }
    }

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn cosine_examples() {
        let s = cosine_similarity_matrix(
            &EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(s.get(0, 1), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(0, 2), 0.0, epsilon = 1e-12);
        assert_eq!(s.get(1, 2), s.get(2, 1));
        let ones = cosine_similarity_matrix(
            &EmbeddingMatrix::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap(),
        )
        .unwrap();
        assert!(ones.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let err = cosine_similarity_matrix(
            &EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    fn sim(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> SimilarityMatrix {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = if i == j { 1.0 } else { f(i, j) };
            }
        }
        SimilarityMatrix::new(n, data).unwrap()
    }

    #[test]
    fn info_nce_examples() {
        for tau in [0.07, 0.5, 1.0] {
            let s = sim(4, |_, _| 0.3);
            let v = info_nce(&s, 0, 1, &set(&[]), &cfg(tau)).unwrap();
            assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-12);
        }
        let s = sim(4, |i, j| if (i, j) == (0, 1) { 0.8 } else { 0.2 });
        let v = info_nce(&s, 0, 1, &set(&[]), &cfg(1.0)).unwrap();
        assert_abs_diff_eq!(v, -(0.8 - (0.2 + 2f64.ln())), epsilon = 1e-12);

        let mut prev = f64::INFINITY;
        for p in [0.1, 0.4, 0.9] {
            let s = sim(4, |i, j| if (i, j) == (0, 1) { p } else { 0.2 });
            let v = info_nce(&s, 0, 1, &set(&[]), &cfg(0.07)).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn info_nce_empty_denominator() {
        let s = sim(3, |_, _| 0.0);
        let err = info_nce(&s, 0, 1, &set(&[2]), &cfg(1.0)).unwrap_err();
        assert!(matches!(err, Error::Loss(_)));
    }

    #[test]
    fn positive_in_denominator_flag() {
        let s = sim(3, |i, j| if (i, j) == (0, 1) { 0.8 } else { 0.2 });
        let mut c = cfg(1.0);
        c.include_positive_in_denominator = true;
        let v = info_nce(&s, 0, 1, &set(&[]), &c).unwrap();
        let want = -(0.8f64.exp() / (0.8f64.exp() + 0.2f64.exp())).ln();
        assert_abs_diff_eq!(v, want, epsilon = 1e-12);
        assert!(v > 0.0);
    }

    #[test]
    fn maskfn_hand_set_example() {
        // View 0 anchor, 1 positive, 2 hard negative, 3 candidate.
        let layout = BatchLayout::synthetic(&[true]).unwrap();
        let mut views = layout.views().to_vec();
        views.push(crate::batch::ViewMeta {
            role: crate::batch::ViewRole::Anchor,
            group: 1,
            source: 3,
            source_key: "v3".into(),
            swap_partner: None,
        });
        views.push(crate::batch::ViewMeta {
            role: crate::batch::ViewRole::Positive,
            group: 1,
            source: 4,
            source_key: "v4".into(),
            swap_partner: None,
        });
        let layout = BatchLayout::new(views).unwrap();
        let z = EmbeddingMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.8, 0.2],
            vec![-1.0, 0.1],
        ])
        .unwrap();
        let sel = maskfn_select_from_features(&z, &layout, 1).unwrap();
        assert_eq!(sel.groups[0].selected, vec![3]);
        assert_eq!(sel.groups[0].excluded, vec![0, 1, 2]);
        assert_eq!(sel.groups[1].selected, vec![1]);
        assert!(maskfn_select_from_features(&z, &layout, 0).unwrap().total_selected() == 0);
        assert!(maskfn_select_from_features(&z, &layout, 3).is_err());
    }

    /// The dual loss written out with plain loops, independent of the library path.
    fn brute_dual(s: &SimilarityMatrix, a: usize, p: usize, fns: &[usize], tau: f64, w: f64) -> f64 {
        let n = s.len();
        let term = |pos: usize| {
            let mut den = 0.0;
            for k in 0..n {
                if k != a && k != p && !fns.contains(&k) {
                    den += (s.get(a, k) / tau).exp();
                }
            }
            -((s.get(a, pos) / tau).exp() / den).ln()
        };
        let l1 = term(p);
        let l2 = if fns.is_empty() {
            0.0
        } else {
            fns.iter().map(|&l| term(l)).sum::<f64>() / fns.len() as f64
        };
        l1 + w * l2
    }

    #[test]
    fn dual_loss_toy_batch() {
        let layout = BatchLayout::synthetic(&[true, false]).unwrap();
        let s = sim(5, |i, j| 0.1 * ((i * 3 + j * 7) % 5) as f64 - 0.15);
        let fns = FnSelection {
            groups: vec![
                FnChoice { selected: vec![3], scores: vec![0.0], excluded: vec![] },
                FnChoice { selected: vec![], scores: vec![], excluded: vec![] },
            ],
        };
        let c = cfg(1.0);
        let t = dual_contrastive_loss(&s, &layout, &fns, &c).unwrap();
        let want = (brute_dual(&s, 0, 1, &[3], 1.0, 0.5) + brute_dual(&s, 3, 4, &[], 1.0, 0.5)) / 2.0;
        assert_abs_diff_eq!(t.total, want, epsilon = 1e-12);

        let none = FnSelection::empty(2);
        let t0 = dual_contrastive_loss(&s, &layout, &none, &c).unwrap();
        assert_eq!(t0.total, t0.l1);
        assert_eq!(t0.l2, 0.0);
        let mut c0 = c.clone();
        c0.l2_weight = 0.0;
        let tw = dual_contrastive_loss(&s, &layout, &fns, &c0).unwrap();
        assert_eq!(tw.total, tw.l1);
    }

    #[test]
    fn hard_negative_pressure_and_exclusion_isolation() {
        let layout = BatchLayout::synthetic(&[true, true, true]).unwrap();
        let mut r = rng(3);
        let base = sim(9, |_, _| r.gen_range(-0.5..0.5));
        let fns = FnSelection {
            groups: vec![
                FnChoice { selected: vec![4], scores: vec![], excluded: vec![] },
                FnChoice { selected: vec![0], scores: vec![], excluded: vec![] },
                FnChoice { selected: vec![1], scores: vec![], excluded: vec![] },
            ],
        };
        let c = cfg(0.07);
        let t = dual_contrastive_loss(&base, &layout, &fns, &c).unwrap().total;
        let mut up = base.clone();
        up.set(0, 2, base.get(0, 2) + 0.05);
        assert!(dual_contrastive_loss(&up, &layout, &fns, &c).unwrap().total > t);

        let mut extra = layout.clone();
        extra.exclude(0, 7).unwrap();
        let te = dual_contrastive_loss(&base, &extra, &fns, &c).unwrap().total;
        let mut pert = base.clone();
        pert.set(0, 7, 0.99);
        assert_eq!(dual_contrastive_loss(&pert, &extra, &fns, &c).unwrap().total, te);
        // Self-similarity never enters.
        pert.set(0, 0, -3.0);
        assert_eq!(dual_contrastive_loss(&pert, &extra, &fns, &c).unwrap().total, te);
    }

    #[test]
    fn temperature_preserves_candidate_ranking() {
        let layout = BatchLayout::synthetic(&[true, false, false]).unwrap();
        let mut r = rng(11);
        let s = sim(7, |_, _| r.gen_range(-1.0..1.0));
        let ex = layout.exclusions(0).clone();
        let rank = |tau: f64| {
            let mut v: Vec<(usize, f64)> = (3..7)
                .map(|l| (l, info_nce(&s, 0, l, &ex, &cfg(tau)).unwrap()))
                .collect();
            v.sort_by(|a, b| a.1.total_cmp(&b.1));
            v.into_iter().map(|x| x.0).collect::<Vec<_>>()
        };
        assert_eq!(rank(0.07), rank(0.5));
        assert_eq!(rank(0.5), rank(1.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let layout = BatchLayout::synthetic(&[true, true, false]).unwrap();
        let mut r = rng(5);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let e = EmbeddingMatrix::from_rows(&rows).unwrap();
        let fns = maskfn_select_from_features(&e, &layout, 1).unwrap();
        for tau in [0.07, 1.0] {
            let c = cfg(tau);
            let (_, g) = dual_contrastive_loss_grad(&e, &layout, &fns, &c).unwrap();
            let h = 1e-6;
            for idx in 0..e.data().len() {
                let mut plus = e.data().to_vec();
                plus[idx] += h;
                let mut minus = e.data().to_vec();
                minus[idx] -= h;
                let f = |d: Vec<f64>| {
                    let m = EmbeddingMatrix::new(8, 6, d).unwrap();
                    dual_contrastive_loss(&cosine_similarity_matrix(&m).unwrap(), &layout, &fns, &c)
                        .unwrap()
                        .total
                };
                let fd = (f(plus) - f(minus)) / (2.0 * h);
                let denom = fd.abs().max(g[idx].abs()).max(1e-8);
                assert!((fd - g[idx]).abs() / denom < 1e-4, "{idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn top1_counts_strict_wins() {
        let layout = BatchLayout::synthetic(&[false, false]).unwrap();
        let s = sim(4, |i, j| if i / 2 == j / 2 { 0.9 } else { 0.1 });
        assert_eq!(top1_accuracy(&s, &layout, &FnSelection::empty(2)), 1.0);
        let flat = sim(4, |_, _| 0.5);
        assert_eq!(top1_accuracy(&flat, &layout, &FnSelection::empty(2)), 0.0);
    }

    #[test]
    fn n_fn_limited_by_batch() {
        let c = LossConfig { n_fn: 2, ..LossConfig::default() };
        assert!(c.validate_for_batch(16).is_ok());
        assert!(c.validate_for_batch(15).is_err());
        assert!(LossConfig { temperature: 0.0, ..LossConfig::default() }.validate().is_err());
    }
}
