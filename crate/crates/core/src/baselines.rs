// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-local interventions fitted in closed form, used as comparison
//! points for end-to-end training.
//!
//! The sequential affine fit is a stand-in for layerwise 1-D affine OT: per
//! coordinate it is the least-squares line through the sorted source and
//! sorted target samples, which minimizes the empirical sorted-pair W2
//! among increasing affine maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FrozenModel, TargetSet};
use crate::tensor::{ops, Tensor};
use crate::transport::{AffineMap, TransportStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    MeanShift,
    SequentialAffine,
}

/// How each coordinate's line is estimated in the sequential fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineFit {
    /// Least squares on order statistics.
    #[default]
    OrderStatistics,
    /// Match mean and standard deviation.
    Moments,
}

/// `omega = 1`, `bias = mean(target) - mean(source)` at every hook, both
/// measured on clean activations.
pub fn fit_mean_shift(
    model: &FrozenModel,
    source: &Tensor,
    target: &TargetSet,
) -> Result<TransportStack> {
    if source.rows() == 0 || target.rows() == 0 {
        return Err(Error::Usage(
            "mean shift needs nonempty source and target sets".into(),
        ));
    }
    let src = model.precompute_targets(source)?;
    let tgt = target.resolve(model)?;
    let maps = src
        .layers()
        .iter()
        .zip(tgt.layers())
        .map(|(s, t)| {
            let bias = t
                .column_means()
                .iter()
                .zip(s.column_means())
                .map(|(mt, ms)| mt - ms)
                .collect();
            AffineMap::new(vec![1.0; s.cols()], bias)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransportStack::new(maps))
}

/// Fits hooks in order; hook `l` is fitted on source activations computed
/// with the already-fitted maps of hooks `< l` in place.
pub fn fit_sequential_affine(
    model: &FrozenModel,
    source: &Tensor,
    target: &TargetSet,
    fit: AffineFit,
) -> Result<TransportStack> {
    if source.rows() < 2 {
        return Err(Error::Usage(format!(
            "sequential fit needs at least 2 samples, got {}",
            source.rows()
        )));
    }
    let tgt = target.resolve(model)?;
    if tgt.rows() != source.rows() {
        return Err(Error::Usage(format!(
            "sequential fit pairs order statistics and needs equal counts, got {} source and {} target",
            source.rows(),
            tgt.rows()
        )));
    }
    let mut stack = TransportStack::identity(&model.hook_dims());
    for hook in 0..model.hook_count() {
        let (_, trace) = model.forward_with_hooks(Some(&stack), source)?;
        let map = fit_layer(trace.layer(hook), tgt.layer(hook), fit)?;
        let mut maps = stack.maps().to_vec();
        maps[hook] = map;
        stack = TransportStack::new(maps);
    }
    Ok(stack)
}

/// Per-coordinate affine fit of `source` columns onto `target` columns.
pub fn fit_layer(source: &Tensor, target: &Tensor, fit: AffineFit) -> Result<AffineMap> {
    let (s, _) = ops::sort_columns(source);
    let (t, _) = ops::sort_columns(target);
    let n = s.rows() as f64;
    let mut omega = Vec::with_capacity(s.cols());
    let mut bias = Vec::with_capacity(s.cols());
    for j in 0..s.cols() {
        let sc: Vec<f64> = s.column(j).collect();
        let tc: Vec<f64> = t.column(j).collect();
        let ms = sc.iter().sum::<f64>() / n;
        let mt = tc.iter().sum::<f64>() / n;
        let var_s = sc.iter().map(|v| (v - ms) * (v - ms)).sum::<f64>() / n;
        if is_degenerate(var_s, ms) {
            omega.push(1.0);
            bias.push(mt - ms);
            continue;
        }
        let w = match fit {
            AffineFit::OrderStatistics => {
                let cov = sc
                    .iter()
                    .zip(&tc)
                    .map(|(a, b)| (a - ms) * (b - mt))
                    .sum::<f64>()
                    / n;
                cov / var_s
            }
            AffineFit::Moments => {
                let var_t = tc.iter().map(|v| (v - mt) * (v - mt)).sum::<f64>() / n;
                (var_t / var_s).sqrt()
            }
        };
        omega.push(w);
        bias.push(mt - w * ms);
    }
    AffineMap::new(omega, bias)
}

/// A column counts as constant when its spread is at rounding level.
fn is_degenerate(var: f64, mean: f64) -> bool {
    let scale = mean.abs().max(1.0);
    var <= (1e-12 * scale) * (1e-12 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerBlock;

    fn hooked_identity(d: usize) -> FrozenModel {
        let id = || LayerBlock::Linear {
            weight: Tensor::identity(d),
            bias: Tensor::zeros(1, d),
        };
        FrozenModel::new(vec![id(), id()], vec![0]).unwrap()
    }

    fn col(vals: &[f64]) -> Tensor {
        Tensor::from_vec(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn mean_shift_examples() {
        let m = hooked_identity(1);
        let s =
            fit_mean_shift(&m, &col(&[0.0, 2.0]), &TargetSet::Inputs(col(&[3.0, 5.0]))).unwrap();
        assert_eq!(s.map(0).bias(), &[3.0]);
        assert_eq!(s.map(0).omega(), &[1.0]);

        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, -4.0]]).unwrap();
        let m2 = hooked_identity(2);
        let same = fit_mean_shift(&m2, &x, &TargetSet::Inputs(x.clone())).unwrap();
        assert!(same.is_identity());
    }

    #[test]
    fn sequential_examples() {
        let m = hooked_identity(1);
        let s = fit_sequential_affine(
            &m,
            &col(&[1.0, 0.0]),
            &TargetSet::Inputs(col(&[3.0, 1.0])),
            AffineFit::default(),
        )
        .unwrap();
        assert!((s.map(0).omega()[0] - 2.0).abs() < 1e-15);
        assert!((s.map(0).bias()[0] - 1.0).abs() < 1e-15);

        let x = col(&[0.3, -1.0, 2.0]);
        let s = fit_sequential_affine(&m, &x, &TargetSet::Inputs(x.clone()), AffineFit::default())
            .unwrap();
        let sup = s.support(1e-12);
        assert_eq!(sup.total, 0);

        let s = fit_sequential_affine(
            &m,
            &col(&[2.0, 2.0, 2.0]),
            &TargetSet::Inputs(col(&[4.0, 5.0, 6.0])),
            AffineFit::default(),
        )
        .unwrap();
        assert_eq!(s.map(0).omega(), &[1.0]);
        assert_eq!(s.map(0).bias(), &[3.0]);
    }

    #[test]
    fn sequential_errors() {
        let m = hooked_identity(1);
        let one = col(&[1.0]);
        assert!(matches!(
            fit_sequential_affine(
                &m,
                &one,
                &TargetSet::Inputs(one.clone()),
                AffineFit::default()
            ),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            fit_sequential_affine(
                &m,
                &col(&[1.0, 2.0]),
                &TargetSet::Inputs(col(&[1.0, 2.0, 3.0])),
                AffineFit::default()
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn moment_fit_matches_std_ratio() {
        let src = col(&[0.0, 1.0, 2.0, 3.0]);
        let tgt = col(&[10.0, 12.0, 14.0, 17.0]);
        let m = fit_layer(&src, &tgt, AffineFit::Moments).unwrap();
        let var = |v: &[f64]| {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64
        };
        let expected = (var(&[10.0, 12.0, 14.0, 17.0]) / var(&[0.0, 1.0, 2.0, 3.0])).sqrt();
        assert!((m.omega()[0] - expected).abs() < 1e-14);
    }
}
