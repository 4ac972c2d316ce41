use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{fit_stats, Features};

/// Ridge added to the fitted covariance.
pub const SELECTION_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub id: String,
    /// Gaussian log-density; higher means a denser region.
    pub density_score: f64,
    pub embedding_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub keep_fraction: f64,
    pub scores: Vec<SelectionScore>,
    pub keep: Vec<String>,
    pub drop: Vec<String>,
}

/// Scores each embedding row by its log-density under a Gaussian fitted to
/// all rows (covariance + `SELECTION_RIDGE`·I) and flags the lowest
/// `1 − keep_fraction` share for dropping. Ties break by id.
pub fn instance_selection_scores(
    ids: &[String],
    embeddings: &Features,
    keep_fraction: f64,
    embedding_id: &str,
) -> Result<SelectionReport> {
    if ids.len() != embeddings.n {
        return Err(Error::invalid(format!("{} ids for {} embeddings", ids.len(), embeddings.n)));
    }
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(Error::invalid(format!("keep_fraction {keep_fraction} outside [0, 1]")));
    }
    let stats = fit_stats(embeddings)?;
    let f = embeddings.dim;
    let mut cov = DMatrix::from_row_slice(f, f, &stats.cov);
    for i in 0..f {
        cov[(i, i)] += SELECTION_RIDGE;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::numeric("regularized embedding covariance is not positive definite"))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let norm = -0.5 * (f as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    let mut scores = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let x = DVector::from_iterator(f, embeddings.row(i).iter().zip(&stats.mean).map(|(v, m)| *v as f64 - m));
        let sol = chol.solve(&x);
        let s = norm - 0.5 * x.dot(&sol);
        if !s.is_finite() {
            return Err(Error::numeric(format!("non-finite density score for '{id}'")));
        }
        scores.push(SelectionScore {
            id: id.clone(),
            density_score: s,
            embedding_id: embedding_id.to_string(),
        });
    }
    let n = ids.len();
    let n_keep = ((keep_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| {
        scores[*a]
            .density_score
            .total_cmp(&scores[*b].density_score)
            .then_with(|| ids[*a].cmp(&ids[*b]))
    });
    let drop_count = n - n_keep.min(n);
    let mut drop: Vec<String> = order[..drop_count].iter().map(|i| ids[*i].clone()).collect();
    let mut keep: Vec<String> = order[drop_count..].iter().map(|i| ids[*i].clone()).collect();
    drop.sort();
    keep.sort();
    Ok(SelectionReport {
        keep_fraction,
        scores,
        keep,
        drop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    #[test]
    fn scalar_outlier_dropped() {
        let f = Features::new(4, 1, vec![0.0, 0.0, 0.0, 10.0]).unwrap();
        let r = instance_selection_scores(&ids(4), &f, 0.75, "raw").unwrap();
        assert_eq!(r.drop, vec!["e3".to_string()]);
        // by hand: mean 2.5, unbiased var 25, plus ridge
        let var: f64 = 25.0 + SELECTION_RIDGE;
        let expect = |x: f64| -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - 2.5f64).powi(2) / var);
        assert!((r.scores[0].density_score - expect(0.0)).abs() < 1e-12);
        assert!((r.scores[3].density_score - expect(10.0)).abs() < 1e-12);
        let all = instance_selection_scores(&ids(4), &f, 1.0, "raw").unwrap();
        assert!(all.drop.is_empty());
    }

    #[test]
    fn order_invariant() {
        let data: Vec<f32> = (0..30).map(|i| ((i * 37) % 11) as f32 * 0.3).collect();
        let f = Features::new(10, 3, data.clone()).unwrap();
        let a = instance_selection_scores(&ids(10), &f, 0.7, "raw").unwrap();
        let mut rev_ids = ids(10);
        rev_ids.reverse();
        let rev: Vec<f32> = data.chunks(3).rev().flatten().copied().collect();
        let b = instance_selection_scores(&rev_ids, &Features::new(10, 3, rev).unwrap(), 0.7, "raw").unwrap();
        assert_eq!(a.keep, b.keep);
        assert_eq!(a.drop, b.drop);
        for s in &a.scores {
            let t = b.scores.iter().find(|t| t.id == s.id).unwrap();
            assert!((s.density_score - t.density_score).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_inputs() {
        let f = Features::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(instance_selection_scores(&ids(3), &f, 0.5, "raw").is_err());
        assert!(instance_selection_scores(&ids(2), &f, 1.5, "raw").is_err());
    }
}
