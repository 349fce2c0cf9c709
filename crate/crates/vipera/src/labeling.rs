//! Parallel labeling of (image, criterion) pairs.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use thiserror::Error;
use vipera_core::labeling::{label_request, parse_label_response, pending_pairs};
use vipera_core::model::{Criterion, CriterionId, ImageId, LabelOutcome, LabelTable};
use vipera_core::provider::{ProviderError, VisionModel, VisionRequest};

use crate::jobs::Limiter;

pub type Pair = (ImageId, CriterionId);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelingError {
    #[error("vision provider unreachable for all {pairs} pairs: {last}")]
    Unreachable { pairs: usize, last: String },
}

/// A [`VisionModel`] that holds a [`Limiter`] permit for each query.
pub struct Limited<'a, V> {
    pub inner: V,
    pub limiter: &'a Limiter,
}

impl<V: VisionModel> VisionModel for Limited<'_, V> {
    fn vision_query(&self, request: &VisionRequest) -> Result<String, ProviderError> {
        let _permit = self.limiter.acquire();
        self.inner.vision_query(request)
    }
}

/// Queries every pair with up to `parallelism` calls in flight and hands each
/// outcome to `on_result` on the calling thread.
///
/// Provider failures become [`LabelOutcome::Unknown`]. When every pair fails
/// as unreachable nothing is reported and the run fails instead, leaving the
/// pairs pending for a later retry. Pairs naming an unknown criterion are skipped.
pub fn label_pairs<V>(
    model: &V,
    criteria: &[Criterion],
    pairs: &[Pair],
    parallelism: usize,
    mut on_result: impl FnMut(&Pair, LabelOutcome),
) -> Result<usize, LabelingError>
where
    V: VisionModel + Sync,
{
    let by_id: BTreeMap<&CriterionId, &Criterion> = criteria.iter().map(|c| (&c.id, c)).collect();
    let work: Vec<(&Pair, &Criterion)> = pairs
        .iter()
        .filter_map(|p| by_id.get(&p.1).map(|c| (p, *c)))
        .collect();
    if work.is_empty() {
        return Ok(0);
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    let mut deferred: Vec<&Pair> = Vec::new();
    let mut last_unreachable = String::new();
    let mut reported = 0;
    std::thread::scope(|scope| {
        for _ in 0..parallelism.clamp(1, work.len()) {
            let tx = tx.clone();
            let (work, next) = (&work, &next);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((pair, criterion)) = work.get(i) else {
                    break;
                };
                let result = model.vision_query(&label_request(criterion, &pair.0));
                let outcome = result.map(|raw| parse_label_response(&raw, criterion));
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            let pair = work[i].0;
            match outcome {
                Ok(o) => {
                    on_result(pair, o);
                    reported += 1;
                }
                Err(ProviderError::Unreachable(e)) => {
                    last_unreachable = e;
                    deferred.push(pair);
                }
                Err(e) => {
                    log::warn!("labeling {} / {} failed: {e}", pair.0, pair.1);
                    on_result(pair, LabelOutcome::Unknown);
                    reported += 1;
                }
            }
        }
    });
    if reported == 0 && !deferred.is_empty() {
        return Err(LabelingError::Unreachable {
            pairs: deferred.len(),
            last: last_unreachable,
        });
    }
    for pair in deferred {
        on_result(pair, LabelOutcome::Unknown);
    }
    Ok(work.len())
}

/// Labels every pair of `images` × `criteria` missing from `table` and
/// returns the extended table. Settled pairs are never queried again.
pub fn run_labeling<V>(
    table: &LabelTable,
    images: &[ImageId],
    criteria: &[Criterion],
    model: &V,
    parallelism: usize,
) -> Result<LabelTable, LabelingError>
where
    V: VisionModel + Sync,
{
    let pairs = pending_pairs(table, images, criteria);
    let mut out = table.clone();
    label_pairs(model, criteria, &pairs, parallelism, |(image, criterion), outcome| {
        out.insert(image.clone(), criterion.clone(), outcome);
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::stub::{stub_png, StubVision};
    use crate::providers::{ImagePayload, VisionBackend};
    use std::sync::atomic::AtomicUsize;
    use std::time::Duration;
    use vipera_core::model::{CriterionOrigin, NodePath};
    use vipera_core::provider::VisionKind;

    /// Stub vision over synthetic doctor images, with a call counter.
    struct Backend {
        stub: StubVision,
        calls: AtomicUsize,
    }

    impl VisionModel for Backend {
        fn vision_query(&self, request: &VisionRequest) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let images: Vec<ImagePayload> = request
                .image_ids
                .iter()
                .map(|id| ImagePayload {
                    id: id.clone(),
                    bytes: stub_png("a cinematic photo of a doctor", fxhash(id.as_str())),
                })
                .collect();
            self.stub.vision_query(&images, request)
        }
    }

    fn fxhash(s: &str) -> u64 {
        vipera_core::rng::fnv1a(s.as_bytes())
    }

    fn backend(latency: Duration, salt: u64) -> Backend {
        Backend {
            stub: StubVision::default().with_latency(latency, salt),
            calls: AtomicUsize::new(0),
        }
    }

    fn criteria() -> Vec<Criterion> {
        let doctor = NodePath::root("doctor").unwrap();
        vec![
            Criterion {
                id: "c0001".into(),
                parent_path: doctor.clone(),
                name: "gender".into(),
                candidates: vec!["male".into(), "female".into()],
                origin: CriterionOrigin::User,
            },
            Criterion {
                id: "c0002".into(),
                parent_path: doctor.child("coat").unwrap(),
                name: "color".into(),
                candidates: vec!["white".into(), "blue".into(), "green".into()],
                origin: CriterionOrigin::User,
            },
        ]
    }

    fn images(n: usize) -> Vec<ImageId> {
        (1..=n).map(|i| ImageId::new(format!("img-{i:05}"))).collect()
    }

    struct Down;

    impl VisionModel for Down {
        fn vision_query(&self, _: &VisionRequest) -> Result<String, ProviderError> {
            Err(ProviderError::Unreachable("connection refused".into()))
        }
    }

    /// Unreachable for one criterion only.
    struct HalfDown(Backend);

    impl VisionModel for HalfDown {
        fn vision_query(&self, request: &VisionRequest) -> Result<String, ProviderError> {
            match &request.kind {
                VisionKind::Label { criterion, .. } if criterion == "color" => {
                    Err(ProviderError::Unreachable("flaky".into()))
                }
                _ => self.0.vision_query(request),
            }
        }
    }

    #[test]
    fn empty_inputs_make_no_calls() {
        let b = backend(Duration::ZERO, 0);
        let t = run_labeling(&LabelTable::default(), &[], &criteria(), &b, 4).unwrap();
        assert!(t.is_empty());
        assert_eq!(b.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn labels_every_pair_once() {
        let b = backend(Duration::ZERO, 0);
        let imgs = images(30);
        let t = run_labeling(&LabelTable::default(), &imgs, &criteria()[..1], &b, 4).unwrap();
        assert_eq!(t.len(), 30);
        assert_eq!(b.calls.load(Ordering::SeqCst), 30);
        for (_, o) in t.for_criterion(&"c0001".into()) {
            assert!(matches!(o, LabelOutcome::Label(0 | 1) | LabelOutcome::Absent | LabelOutcome::Unknown));
        }
        let again = run_labeling(&t, &imgs, &criteria()[..1], &b, 4).unwrap();
        assert_eq!(again, t);
        assert_eq!(b.calls.load(Ordering::SeqCst), 30);
    }

    #[test]
    fn result_is_independent_of_completion_order() {
        let imgs = images(16);
        let reference = run_labeling(&LabelTable::default(), &imgs, &criteria(), &backend(Duration::ZERO, 0), 1).unwrap();
        for salt in 1..4 {
            let b = backend(Duration::from_millis(3), salt);
            let t = run_labeling(&LabelTable::default(), &imgs, &criteria(), &b, 8).unwrap();
            assert_eq!(t, reference, "salt {salt}");
        }
    }

    #[test]
    fn unreachable_everywhere_is_a_job_error() {
        let err = run_labeling(&LabelTable::default(), &images(3), &criteria(), &Down, 2).unwrap_err();
        assert!(matches!(err, LabelingError::Unreachable { pairs: 6, .. }));
    }

    #[test]
    fn partial_outages_record_unknown() {
        let t = run_labeling(&LabelTable::default(), &images(4), &criteria(), &HalfDown(backend(Duration::ZERO, 0)), 3).unwrap();
        assert_eq!(t.len(), 8);
        assert!(t.for_criterion(&"c0002".into()).all(|(_, o)| o == LabelOutcome::Unknown));
    }

    #[test]
    fn limiter_wrapper_passes_through() {
        let limiter = Limiter::new(1);
        let model = Limited {
            inner: backend(Duration::ZERO, 0),
            limiter: &limiter,
        };
        let t = run_labeling(&LabelTable::default(), &images(5), &criteria(), &model, 4).unwrap();
        assert_eq!(t.len(), 10);
    }
}
