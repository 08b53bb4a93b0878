use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::lasso::{fit_weighted_lasso, lambda_max, weighted_r2};
use super::sampling::{kernel_weight, perturb, sample_masks_stream};
use super::{Explanation, Instance, LimeConfig, LimeError, Mask, SegmentationSpec};

/// A model scored on a batch of instances. A failed sample is dropped from
/// the fit rather than failing the explanation.
pub trait BlackBox: Sync {
    fn evaluate(&self, instances: &[Instance]) -> Vec<Result<f64, String>>;
}

/// Adapts a per-instance closure.
pub struct FnBlackBox<F>(pub F);

impl<F> BlackBox for FnBlackBox<F>
where
    F: Fn(&Instance) -> Result<f64, String> + Sync,
{
    fn evaluate(&self, instances: &[Instance]) -> Vec<Result<f64, String>> {
        instances.iter().map(&self.0).collect()
    }
}

/// Samples evaluated per black-box call in the inner parallel collection.
const CHUNK: usize = 64;

pub struct Explainer {
    config: LimeConfig,
    seg: SegmentationSpec,
    evaluations: AtomicU64,
}

impl Explainer {
    pub fn new(seg: SegmentationSpec, config: LimeConfig) -> Result<Self, LimeError> {
        seg.validate()?;
        config.validate()?;
        if config.num_samples < seg.segment_count() {
            tracing::warn!(
                samples = config.num_samples,
                segments = seg.segment_count(),
                "fewer samples than segments"
            );
        }
        Ok(Self {
            config,
            seg,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &LimeConfig {
        &self.config
    }

    /// Black-box evaluations issued so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// One result per instance, in input order. Instances run in parallel
    /// and each instance's samples form a second parallel collection.
    pub fn explain(
        &self,
        instances: &[Instance],
        blackbox: &dyn BlackBox,
    ) -> Vec<Result<Explanation, LimeError>> {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, instance)| self.explain_one(i as u64, instance, blackbox))
            .collect()
    }

    fn explain_one(
        &self,
        stream: u64,
        instance: &Instance,
        blackbox: &dyn BlackBox,
    ) -> Result<Explanation, LimeError> {
        let d = self.seg.segment_count();
        let masks = sample_masks_stream(d, &self.config, stream);
        let perturbed = masks
            .iter()
            .map(|m| perturb(instance, m, &self.seg))
            .collect::<Result<Vec<_>, _>>()?;
        let scores: Vec<Result<f64, String>> = perturbed
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| {
                self.evaluations
                    .fetch_add(chunk.len() as u64, Ordering::Relaxed);
                let out = blackbox.evaluate(chunk);
                assert_eq!(out.len(), chunk.len(), "black box must score every instance");
                out
            })
            .collect();
        let (kept, outputs): (Vec<Mask>, Vec<f64>) = masks
            .into_iter()
            .zip(scores)
            .filter_map(|(m, s)| match s {
                Ok(v) if v.is_finite() => Some((m, v)),
                _ => None,
            })
            .unzip();
        fit_explanation(&kept, &outputs, &self.config, self.config.num_samples)
    }
}

/// Kernel-weighted lasso from masks to outputs. `requested` is the number of
/// samples drawn before failures were dropped.
pub fn fit_explanation(
    masks: &[Mask],
    outputs: &[f64],
    config: &LimeConfig,
    requested: usize,
) -> Result<Explanation, LimeError> {
    let d = masks.first().map_or(0, Mask::len);
    if masks.len() < d + 1 || masks.is_empty() {
        return Err(LimeError::TooFewSamples {
            surviving: masks.len(),
            requested,
            needed: d + 1,
        });
    }
    let x: Vec<Vec<f64>> = masks.iter().map(Mask::to_features).collect();
    let w: Vec<f64> = masks
        .iter()
        .map(|m| kernel_weight(m, config.kernel_width))
        .collect();
    let lambda = match config.l1_penalty {
        Some(l) => l,
        None => 0.01 * lambda_max(&x, outputs, &w)?,
    };
    let fit = fit_weighted_lasso(&x, outputs, &w, lambda)?;
    let r2 = weighted_r2(&x, outputs, &w, &fit);
    Ok(Explanation {
        weights: fit.weights,
        intercept: fit.intercept,
        sample_count: masks.len(),
        weighted_r2: r2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tabular(d: usize) -> SegmentationSpec {
        SegmentationSpec::Tabular {
            neutral_values: vec![0.0; d],
        }
    }

    fn cfg(n: usize) -> LimeConfig {
        LimeConfig {
            num_samples: n,
            l1_penalty: Some(0.0),
            seed: 3,
            ..LimeConfig::default()
        }
    }

    fn features(x: &Instance) -> &[f64] {
        match x {
            Instance::Tabular(v) => v,
            Instance::Image(_) => panic!("tabular expected"),
        }
    }

    #[test]
    fn constant_black_box_has_no_signal() {
        let explainer = Explainer::new(tabular(4), cfg(200)).unwrap();
        let bb = FnBlackBox(|_: &Instance| Ok(2.5));
        let out = explainer.explain(&[Instance::Tabular(vec![1.0; 4])], &bb);
        let e = out[0].as_ref().unwrap();
        assert!(e.weights.iter().all(|w| w.abs() < 1e-9));
        assert!((e.intercept - 2.5).abs() < 1e-9);
        assert_eq!(e.sample_count, 200);
    }

    #[test]
    fn linear_black_box_recovered() {
        let coef = [1.5, -2.0, 0.25];
        let explainer = Explainer::new(tabular(3), cfg(300)).unwrap();
        let bb = FnBlackBox(move |x: &Instance| {
            Ok(0.5 + features(x).iter().zip(coef).map(|(a, b)| a * b).sum::<f64>())
        });
        let e = explainer.explain(&[Instance::Tabular(vec![1.0; 3])], &bb)[0]
            .clone()
            .unwrap();
        for (w, c) in e.weights.iter().zip(coef) {
            assert!((w - c).abs() < 1e-6, "{w} vs {c}");
        }
        assert!((e.intercept - 0.5).abs() < 1e-6);
        assert!(e.weighted_r2 > 1.0 - 1e-9);
    }

    #[test]
    fn evaluation_count_and_order() {
        let explainer = Explainer::new(tabular(2), cfg(150)).unwrap();
        let bb = FnBlackBox(|x: &Instance| Ok(features(x)[0] * 3.0));
        let instances: Vec<Instance> = (1..=5)
            .map(|i| Instance::Tabular(vec![i as f64, 0.0]))
            .collect();
        let out = explainer.explain(&instances, &bb);
        assert_eq!(explainer.evaluations(), 5 * 150);
        for (i, e) in out.iter().enumerate() {
            let w0 = e.as_ref().unwrap().weights[0];
            assert!((w0 - 3.0 * (i + 1) as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn failures_reduce_sample_count() {
        let explainer = Explainer::new(tabular(2), cfg(100)).unwrap();
        let bb = FnBlackBox(|x: &Instance| {
            if features(x)[1] == 0.0 {
                Err("boom".to_string())
            } else {
                Ok(1.0)
            }
        });
        let e = explainer.explain(&[Instance::Tabular(vec![1.0, 1.0])], &bb)[0]
            .clone()
            .unwrap();
        assert!(e.sample_count < 100 && e.sample_count > 3);
    }

    #[test]
    fn too_few_survivors_is_an_error() {
        let explainer = Explainer::new(tabular(3), cfg(50)).unwrap();
        let bb = FnBlackBox(|_: &Instance| Err::<f64, _>("down".to_string()));
        let out = explainer.explain(&[Instance::Tabular(vec![1.0; 3])], &bb);
        assert!(matches!(out[0], Err(LimeError::TooFewSamples { surviving: 0, .. })));
    }

    #[test]
    fn deterministic_under_seed() {
        let explainer = Explainer::new(tabular(3), LimeConfig { seed: 11, ..cfg(120) }).unwrap();
        let bb = FnBlackBox(|x: &Instance| Ok(features(x).iter().map(|v| v * v).sum::<f64>().sin()));
        let xs = vec![Instance::Tabular(vec![0.3, 1.2, -0.7]); 3];
        assert_eq!(explainer.explain(&xs, &bb), explainer.explain(&xs, &bb));
    }
}
