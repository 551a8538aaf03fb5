//! Hinge adversarial losses and normalized feature matching.

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, NodeId, Tensor};

/// Guard on the feature-matching normalizer.
pub const FEAT_EPS: f64 = 1e-8;

/// `(1/d) sum max(0, 1 - s)`
pub fn gen_loss(fake: &[f64]) -> f64 {
    fake.iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / fake.len().max(1) as f64
}

/// `(1/d) sum [max(0, 1 - real) + max(0, 1 + fake)]`
pub fn disc_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::Input(format!("{} real scores vs {} fake scores", real.len(), fake.len())));
    }
    let total: f64 = real.iter().zip(fake).map(|(r, f)| (1.0 - r).max(0.0) + (1.0 + f).max(0.0)).sum();
    Ok(total / real.len().max(1) as f64)
}

/// Mean over discriminators and layers of `mean|real - fake| / max(mean|real|, eps)`.
pub fn feat_match_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<f64> {
    check_congruent(real.iter().map(|r| r.iter().map(|t| t.shape().to_vec()).collect()), fake)?;
    let mut total = 0.0;
    let mut terms = 0usize;
    for (r, f) in real.iter().zip(fake) {
        for (a, b) in r.iter().zip(f) {
            let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            let norm = a.data().iter().map(|x| x.abs()).sum::<f64>() / a.len() as f64;
            total += diff / norm.max(FEAT_EPS);
            terms += 1;
        }
    }
    Ok(total / terms.max(1) as f64)
}

fn check_congruent(real: impl Iterator<Item = Vec<Vec<usize>>>, fake: &[Vec<Tensor>]) -> Result<()> {
    let real: Vec<Vec<Vec<usize>>> = real.collect();
    if real.len() != fake.len() {
        return Err(Error::Input(format!("{} real feature sets vs {} fake", real.len(), fake.len())));
    }
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.len() != f.len() {
            return Err(Error::Input(format!("discriminator {i}: {} real layers vs {} fake", r.len(), f.len())));
        }
        for (j, (a, b)) in r.iter().zip(f).enumerate() {
            if a.as_slice() != b.shape() {
                return Err(Error::Input(format!("discriminator {i} layer {j}: shapes {a:?} vs {:?}", b.shape())));
            }
        }
    }
    Ok(())
}

/// Graph form of [`gen_loss`] over scalar score nodes.
pub fn gen_loss_node(g: &mut Graph, fake: &[NodeId]) -> Result<NodeId> {
    if fake.is_empty() {
        return Err(Error::Input("no discriminator scores".into()));
    }
    let mut terms = Vec::with_capacity(fake.len());
    for &s in fake {
        let m = g.neg(s)?;
        let m = g.add_scalar(m, 1.0)?;
        terms.push(g.relu(m)?);
    }
    let stacked = g.concat(&terms, 0)?;
    Ok(g.mean(stacked)?)
}

/// Graph form of [`disc_loss`].
pub fn disc_loss_node(g: &mut Graph, real: &[NodeId], fake: &[NodeId]) -> Result<NodeId> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Input(format!("{} real scores vs {} fake scores", real.len(), fake.len())));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let a = g.neg(r)?;
        let a = g.add_scalar(a, 1.0)?;
        let a = g.relu(a)?;
        let b = g.add_scalar(f, 1.0)?;
        let b = g.relu(b)?;
        terms.push(g.add(a, b)?);
    }
    let stacked = g.concat(&terms, 0)?;
    Ok(g.mean(stacked)?)
}

/// Graph form of [`feat_match_loss`]; `real` features enter as constants.
pub fn feat_match_node(g: &mut Graph, real: &[Vec<Tensor>], fake: &[Vec<NodeId>]) -> Result<NodeId> {
    let fake_shapes: Vec<Vec<Tensor>> =
        fake.iter().map(|f| f.iter().map(|&n| Tensor::zeros(g.shape(n))).collect()).collect();
    check_congruent(real.iter().map(|r| r.iter().map(|t| t.shape().to_vec()).collect()), &fake_shapes)?;
    let mut terms = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        for (a, &b) in r.iter().zip(f) {
            let norm = a.data().iter().map(|x| x.abs()).sum::<f64>() / a.len() as f64;
            let a = g.try_constant(a.clone())?;
            let d = g.sub(a, b)?;
            let d = g.abs(d)?;
            let d = g.mean(d)?;
            terms.push(g.scale(d, 1.0 / norm.max(FEAT_EPS))?);
        }
    }
    if terms.is_empty() {
        return Err(Error::Input("no feature layers to match".into()));
    }
    let stacked = g.concat(&terms, 0)?;
    Ok(g.mean(stacked)?)
}
