//! Cosine distillation of quantized tokens toward guidance vectors, and the
//! window-based alignment that maps contextual rows onto token positions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, NodeId, Tensor, COSINE_EPS};
use crate::spectral::matmul;

/// Which quantizer output is supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionDepth {
    /// First quantizer layer only.
    First,
    /// Mean of all quantizer layers.
    All,
}

/// Which guidance signals the distillation loss compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceModality {
    SemanticContextual,
    Contextual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Windows tile the sequence at multiples of `w`.
    Fixed,
    /// Each window starts right after the previous match.
    Dynamic,
}

macro_rules! name_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($variant => $name),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}` (expected {})",
                        stringify!($ty),
                        [$($name),+].join("|")
                    ))),
                }
            }
        }
    };
}

name_enum!(SupervisionDepth, SupervisionDepth::First => "first", SupervisionDepth::All => "all");
name_enum!(
    GuidanceModality,
    GuidanceModality::SemanticContextual => "semantic-contextual",
    GuidanceModality::Contextual => "contextual"
);
name_enum!(WindowMode, WindowMode::Fixed => "fixed", WindowMode::Dynamic => "dynamic");

/// The supervised token matrix: layer 1, or the mean over all layers.
pub fn supervised_tokens(g: &mut Graph, layers: &[NodeId], depth: SupervisionDepth) -> Result<NodeId> {
    let Some(&first) = layers.first() else {
        return Err(Error::Input("no quantizer layers to supervise".into()));
    };
    match depth {
        SupervisionDepth::First => Ok(first),
        SupervisionDepth::All => {
            let mut acc = first;
            for &l in &layers[1..] {
                acc = g.add(acc, l)?;
            }
            Ok(g.scale(acc, 1.0 / layers.len() as f64)?)
        }
    }
}

fn nonempty(g: &Graph, q: NodeId) -> Result<()> {
    if g.shape(q).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Input("distillation over an empty token sequence".into()));
    }
    Ok(())
}

/// `-mean_t log sigmoid(score_t)`
fn neg_mean_log_sigmoid(g: &mut Graph, score: NodeId) -> Result<NodeId> {
    let ls = g.log_sigmoid(score)?;
    let m = g.mean(ls)?;
    Ok(g.neg(m)?)
}

/// Global supervision: `-mean_t log sigmoid(score_t)` where `score_t` is the
/// mean of `cos(Q'_t, S_t)` and `cos(Q'_t, C_t)` (or only the contextual
/// cosine), with `Q' = q w`.
pub fn distill_global_node(
    g: &mut Graph,
    q: NodeId,
    w: NodeId,
    s_tilde: NodeId,
    c_tilde: NodeId,
    modality: GuidanceModality,
) -> Result<NodeId> {
    nonempty(g, q)?;
    let qp = g.matmul(q, w)?;
    let cc = g.row_cosine(qp, c_tilde)?;
    let score = match modality {
        GuidanceModality::Contextual => cc,
        GuidanceModality::SemanticContextual => {
            let cs = g.row_cosine(qp, s_tilde)?;
            let both = g.add(cs, cc)?;
            g.scale(both, 0.5)?
        }
    };
    neg_mean_log_sigmoid(g, score)
}

/// Aligned supervision against `C*`; with `semantic` given, each term also
/// averages in `cos(Q'_t, S_t)` against the frame-synchronous semantic rows.
pub fn distill_aligned_node(
    g: &mut Graph,
    q: NodeId,
    w: NodeId,
    c_star: NodeId,
    semantic: Option<NodeId>,
) -> Result<NodeId> {
    nonempty(g, q)?;
    let qp = g.matmul(q, w)?;
    let cc = g.row_cosine(qp, c_star)?;
    let score = match semantic {
        None => cc,
        Some(s) => {
            let cs = g.row_cosine(qp, s)?;
            let both = g.add(cs, cc)?;
            g.scale(both, 0.5)?
        }
    };
    neg_mean_log_sigmoid(g, score)
}

/// Value of [`distill_global_node`] on plain matrices.
pub fn distill_global(q: &Tensor, w: &Tensor, s_tilde: &Tensor, c_tilde: &Tensor, modality: GuidanceModality) -> Result<f64> {
    let mut g = Graph::new();
    let q = g.try_constant(q.clone())?;
    let w = g.try_constant(w.clone())?;
    let s = g.try_constant(s_tilde.clone())?;
    let c = g.try_constant(c_tilde.clone())?;
    let l = distill_global_node(&mut g, q, w, s, c, modality)?;
    Ok(g.value(l).item())
}

/// Value of [`distill_aligned_node`] on plain matrices.
pub fn distill_aligned(q: &Tensor, w: &Tensor, targets: &AlignedTargets, semantic: Option<&Tensor>) -> Result<f64> {
    let mut g = Graph::new();
    let qn = g.try_constant(q.clone())?;
    let wn = g.try_constant(w.clone())?;
    let cn = g.try_constant(targets.c_star.clone())?;
    let sn = semantic.map(|s| g.try_constant(s.clone())).transpose()?;
    let l = distill_aligned_node(&mut g, qn, wn, cn, sn)?;
    Ok(g.value(l).item())
}

/// `Q' = q w` outside any graph; the alignment compares against this.
pub fn project_tokens(q: &Tensor, w: &Tensor) -> Result<Tensor> {
    if q.rank() != 2 || w.rank() != 2 || q.cols() != w.rows() {
        return Err(Error::Input(format!("cannot project {:?} by {:?}", q.shape(), w.shape())));
    }
    Ok(matmul(q, w))
}

/// Cosine similarity with the denominator clamped at `COSINE_EPS`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(COSINE_EPS)
}

/// Result of aligning `n` contextual rows onto `T'` token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTargets {
    /// `[T', D']`; rows of unmatched positions are zero.
    pub c_star: Tensor,
    pub coverage: Vec<bool>,
    /// Matched positions for each contextual row; `None` when its window was empty.
    pub matches: Vec<Option<Vec<usize>>>,
    /// Last-matched index after each contextual row.
    pub last_match: Vec<usize>,
    pub window: usize,
}

impl AlignedTargets {
    pub fn coverage_fraction(&self) -> f64 {
        if self.coverage.is_empty() {
            return 0.0;
        }
        self.coverage.iter().filter(|&&c| c).count() as f64 / self.coverage.len() as f64
    }

    pub fn skipped(&self) -> Vec<usize> {
        self.matches.iter().enumerate().filter(|(_, m)| m.is_none()).map(|(i, _)| i).collect()
    }
}

/// Window-based alignment of contextual rows `c` (`[n, D']`) to projected
/// tokens `q_proj` (`[T', D']`).
///
/// Each row `i` searches a window `[s, e)` of width `w` (default `T' / n`):
/// fixed mode uses `s = i * w`; dynamic mode starts at 0 and then one past
/// the previous match. Every position in the window whose similarity equals
/// the window maximum receives row `i`.
pub fn align_windows(c: &Tensor, q_proj: &Tensor, window: Option<usize>, mode: WindowMode) -> Result<AlignedTargets> {
    if c.rank() != 2 || q_proj.rank() != 2 || c.cols() != q_proj.cols() {
        return Err(Error::Input(format!("cannot align {:?} against {:?}", c.shape(), q_proj.shape())));
    }
    let (n, frames) = (c.rows(), q_proj.rows());
    if n == 0 || frames == 0 {
        return Err(Error::Input(format!("alignment needs n >= 1 and T' >= 1, got n={n}, T'={frames}")));
    }
    let w = match window {
        Some(0) => return Err(Error::Alignment("window size must be at least 1".into())),
        Some(w) => w,
        None if frames / n == 0 => {
            return Err(Error::Alignment(format!(
                "default window floor(T'/n) = floor({frames}/{n}) is 0; pass an explicit window of at least 1"
            )))
        }
        None => frames / n,
    };
    let mut c_star = Tensor::zeros(&[frames, c.cols()]);
    let mut coverage = vec![false; frames];
    let mut matches = Vec::with_capacity(n);
    let mut last_match = Vec::with_capacity(n);
    let mut last = 0usize;
    for i in 0..n {
        let start = match mode {
            WindowMode::Dynamic if i > 0 => last + 1,
            WindowMode::Dynamic => 0,
            WindowMode::Fixed => i.saturating_mul(w),
        };
        let end = start.saturating_add(w).min(frames);
        if start >= end {
            matches.push(None);
            last_match.push(last);
            continue;
        }
        let sims: Vec<f64> = (start..end).map(|t| cosine(c.row(i), q_proj.row(t))).collect();
        let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let set: Vec<usize> = (start..end).zip(&sims).filter(|(_, &a)| a >= best).map(|(t, _)| t).collect();
        for &t in &set {
            c_star.row_mut(t).copy_from_slice(c.row(i));
            coverage[t] = true;
        }
        last = *set.last().expect("window is non-empty");
        matches.push(Some(set));
        last_match.push(last);
    }
    Ok(AlignedTargets { c_star, coverage, matches, last_match, window: w })
}

#[cfg(test)]
mod tests {
    use super::*;

    const COS_ONE: f64 = 0.313_261_687_518_222_8;
    const COS_ZERO: f64 = std::f64::consts::LN_2;

    fn unit_rows(t: usize, d: usize) -> Tensor {
        let mut m = Tensor::zeros(&[t, d]);
        for r in 0..t {
            m.row_mut(r)[r % d] = 1.0;
        }
        m
    }

    #[test]
    fn global_closed_forms() {
        let q = unit_rows(3, 3);
        let w = Tensor::identity(3);
        let l = distill_global(&q, &w, &q, &q, GuidanceModality::SemanticContextual).unwrap();
        assert!((l - COS_ONE).abs() < 1e-12);
        let neg = q.map(|v| -v);
        let l = distill_global(&q, &w, &q, &neg, GuidanceModality::SemanticContextual).unwrap();
        assert!((l - COS_ZERO).abs() < 1e-12);
        let l = distill_global(&q, &w, &neg, &q, GuidanceModality::Contextual).unwrap();
        assert!((l - COS_ONE).abs() < 1e-12);
        assert!(distill_global(&Tensor::zeros(&[0, 3]), &w, &q, &q, GuidanceModality::Contextual).is_err());
    }

    #[test]
    fn aligned_closed_forms() {
        let q = unit_rows(4, 4);
        let w = Tensor::identity(4);
        let full = align_windows(&q, &q, Some(1), WindowMode::Fixed).unwrap();
        assert_eq!(full.c_star, q);
        assert_eq!(full.coverage_fraction(), 1.0);
        assert!((distill_aligned(&q, &w, &full, None).unwrap() - COS_ONE).abs() < 1e-12);

        let mut half = full.clone();
        for t in [1, 3] {
            half.c_star.row_mut(t).fill(0.0);
            half.coverage[t] = false;
        }
        let expected = 0.5 * (COS_ONE + COS_ZERO);
        assert!((distill_aligned(&q, &w, &half, None).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.503_205).abs() < 1e-6);

        let mut none = full;
        none.c_star = Tensor::zeros(&[4, 4]);
        assert!((distill_aligned(&q, &w, &none, None).unwrap() - COS_ZERO).abs() < 1e-12);
    }

    #[test]
    fn crafted_dynamic_example() {
        // Contextual rows e0, e1; token 1 is e0, token 3 is e1.
        let c = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = Tensor::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]);
        let a = align_windows(&c, &q, None, WindowMode::Dynamic).unwrap();
        assert_eq!(a.window, 2);
        assert_eq!(a.matches, vec![Some(vec![1]), Some(vec![3])]);
        assert_eq!(a.coverage, vec![false, true, false, true]);
        assert_eq!(a.last_match, vec![1, 3]);
    }

    #[test]
    fn ties_broadcast_and_take_last() {
        let c = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let q = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![5.0, 0.0]]);
        let a = align_windows(&c, &q, Some(3), WindowMode::Fixed).unwrap();
        assert_eq!(a.matches, vec![Some(vec![0, 2])]);
        assert_eq!(a.last_match, vec![2]);
    }

    #[test]
    fn window_rule_errors_and_skips() {
        let c = unit_rows(5, 2);
        let q = unit_rows(3, 2);
        assert!(matches!(align_windows(&c, &q, None, WindowMode::Fixed), Err(Error::Alignment(_))));
        let a = align_windows(&c, &q, Some(1), WindowMode::Fixed).unwrap();
        assert_eq!(a.skipped(), vec![3, 4]);
    }

    #[test]
    fn loss_symmetric_in_guidance() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0, 0.2], vec![1.5, 0.1, -0.4]]);
        let w = Tensor::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.3], vec![0.7, -1.1]]);
        let s = Tensor::from_rows(&[vec![0.2, 0.9], vec![0.2, 0.9]]);
        let c = Tensor::from_rows(&[vec![-1.0, 0.4], vec![-1.0, 0.4]]);
        let m = GuidanceModality::SemanticContextual;
        assert_eq!(distill_global(&q, &w, &s, &c, m).unwrap(), distill_global(&q, &w, &c, &s, m).unwrap());
    }
}
