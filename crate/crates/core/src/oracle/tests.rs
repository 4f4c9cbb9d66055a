use std::sync::Arc;
use std::time::Duration;

use image::{Rgb, RgbImage};
use proptest::prelude::*;

use super::*;
use crate::patch::BoundingBox;

fn patch(seed: u8) -> Patch {
    let crop = RgbImage::from_fn(8, 6, |x, y| Rgb([seed, x as u8, y as u8]));
    Patch {
        patch_id: format!("P{seed}"),
        image_id: "img".into(),
        class: SemanticClass::new(6, "person"),
        bbox: BoundingBox {
            x0: 0,
            y0: 0,
            x1: 8,
            y1: 6,
        },
        region_area: 48,
        crop_sha256: image_content_hash(&crop),
        crop,
    }
}

fn person() -> SemanticClass {
    SemanticClass::new(6, "person")
}

fn bx(score: f64) -> DetectionBox {
    DetectionBox {
        x0: 1.0,
        y0: 1.0,
        x1: 5.0,
        y1: 4.0,
        score,
        label: "person".into(),
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    fixture_dir: PathBuf,
    cache_dir: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let fixture_dir = dir.path().join("fixture");
    let w = FixtureWriter::new(&fixture_dir, ModelIds::default());
    let (p1, p2, p3) = (patch(1), patch(2), patch(3));
    w.detections("P1", &p1.crop, "person", &[bx(0.81)]).unwrap();
    w.detections("P2", &p2.crop, "person", &[]).unwrap();
    w.detections("P3", &p3.crop, "person", &[bx(0.30), bx(0.5)]).unwrap();
    w.image_vector("P1", &p1.crop, &[3.0, 4.0]).unwrap();
    w.image_vector("P2", &p2.crop, &[0.0, 0.0]).unwrap();
    w.caption("P1", &p1.crop, "  a pile of snow \n").unwrap();
    w.caption("P2", &p2.crop, "   ").unwrap();
    w.text_vector("a pile of snow", &[1.0, 0.0]).unwrap();
    w.sentence_vector("eight", &[1.0; 8]).unwrap();
    w.sentence_vector("five", &[1.0; 5]).unwrap();
    w.finish(2, 8).unwrap();
    Fixture {
        cache_dir: dir.path().join("cache"),
        fixture_dir,
        _dir: dir,
    }
}

fn client_with(fx: &Fixture, cfg: OracleConfig) -> (OracleClient, Arc<FixtureOracle>) {
    let backend = Arc::new(FixtureOracle::open(&fx.fixture_dir).unwrap());
    let client = OracleClient::new(
        cfg,
        Box::new(Arc::clone(&backend)),
        Some(DiskCache::new(&fx.cache_dir)),
    );
    (client, backend)
}

fn client(fx: &Fixture) -> (OracleClient, Arc<FixtureOracle>) {
    client_with(fx, OracleConfig::fixture(&fx.fixture_dir))
}

#[test]
fn raw_vector_is_normalized_on_receipt() {
    let fx = fixture();
    let (c, _) = client(&fx);
    let v = c.embed_image(&patch(1)).unwrap();
    assert_eq!(v.space_id, SpaceId::JointImage);
    assert!(v.normalized);
    assert!((v.values[0] - 0.6).abs() < 1e-12);
    assert!((v.values[1] - 0.8).abs() < 1e-12);
}

#[test]
fn zero_vector_is_rejected() {
    let fx = fixture();
    let (c, _) = client(&fx);
    assert!(matches!(
        c.embed_image(&patch(2)),
        Err(OracleError::DegenerateVector { .. })
    ));
}

#[test]
fn detection_passthrough_and_empty() {
    let fx = fixture();
    let (c, _) = client(&fx);
    let r1 = c.detect(&patch(1), &person()).unwrap();
    assert_eq!(r1.boxes.len(), 1);
    assert_eq!(r1.boxes[0].score, 0.81);
    assert_eq!(r1.patch_id, "P1");
    assert_eq!(r1.query, "person");
    let r2 = c.detect(&patch(2), &person()).unwrap();
    assert!(r2.is_empty());
}

#[test]
fn boxes_below_threshold_are_dropped_and_sorted() {
    let fx = fixture();
    let (c, _) = client(&fx);
    let r = c.detect(&patch(3), &person()).unwrap();
    assert_eq!(r.boxes.iter().map(|b| b.score).collect::<Vec<_>>(), vec![0.5]);

    let (c, _) = client_with(&fx, OracleConfig::fixture(&fx.fixture_dir).owl_style());
    let r = c.detect(&patch(3), &person()).unwrap();
    assert_eq!(r.boxes.iter().map(|b| b.score).collect::<Vec<_>>(), vec![0.5, 0.30]);
}

#[test]
fn fixture_miss_is_an_error_not_an_empty_detection() {
    let fx = fixture();
    let (c, _) = client(&fx);
    let err = c.detect(&patch(9), &person()).unwrap_err();
    assert!(matches!(err, OracleError::FixtureMiss { kind: OracleKind::DetectProposals, .. }));
}

#[test]
fn second_identical_call_is_served_from_cache() {
    let fx = fixture();
    let (c, backend) = client(&fx);
    c.embed_image(&patch(1)).unwrap();
    c.detect(&patch(1), &person()).unwrap();
    assert_eq!(backend.accesses(), 2);
    c.embed_image(&patch(1)).unwrap();
    c.detect(&patch(1), &person()).unwrap();
    assert_eq!(backend.accesses(), 2);
    assert_eq!(
        c.stats(),
        OracleStats {
            backend_calls: 2,
            cache_hits: 2
        }
    );

    // A fresh client over the same cache directory also makes no calls.
    let (c2, backend2) = client(&fx);
    assert_eq!(c2.embed_image(&patch(1)).unwrap(), c.embed_image(&patch(1)).unwrap());
    assert_eq!(backend2.accesses(), 0);
}

#[test]
fn sentence_dimension_must_stay_consistent() {
    let fx = fixture();
    let (c, _) = client(&fx);
    assert_eq!(c.encode_sentence("eight").unwrap().dim(), 8);
    assert!(matches!(
        c.encode_sentence("five"),
        Err(OracleError::DimensionMismatch {
            space: SpaceId::Sentence,
            expected: 8,
            got: 5
        })
    ));
}

#[test]
fn joint_image_and_text_share_dimension() {
    let fx = fixture();
    let (c, _) = client(&fx);
    let img = c.embed_image(&patch(1)).unwrap();
    let txt = c.embed_text("a pile of snow").unwrap();
    assert_eq!(img.dim(), txt.dim());
    assert_eq!(txt.space_id, SpaceId::JointText);
}

#[test]
fn captions_are_trimmed_and_must_be_nonempty() {
    let fx = fixture();
    let (c, _) = client(&fx);
    assert_eq!(c.caption(&patch(1)).unwrap().text, "a pile of snow");
    assert!(matches!(c.caption(&patch(2)), Err(OracleError::Protocol(_))));
}

#[test]
fn cache_key_contract() {
    let params = canonical_params(&json!({"a": 1, "b": 2}));
    assert_eq!(cache_key("detect", "h", &params), cache_key("detect", "h", &params));
    assert_eq!(params, canonical_params(&json!({"b": 2, "a": 1})));

    let models = ModelIds::default();
    let p = patch(1);
    let req = |t: f64| OracleRequest::Detect {
        image: (&p).into(),
        query: "person",
        box_threshold: t,
        text_threshold: Some(0.25),
    };
    assert_ne!(req(0.35).cache_key(&models), req(0.4).cache_key(&models));
    assert_ne!(
        cache_key("embed_text", "h", &params),
        cache_key("encode_sentence", "h", &params)
    );
}

#[test]
fn unreachable_endpoint_is_unavailable_after_retries() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let oracle = HttpOracle::new(&format!("http://{addr}"), 1, 2).with_backoff(Duration::from_millis(1));
    let err = oracle
        .call(&OracleRequest::EmbedText("x"), &ModelIds::default())
        .unwrap_err();
    match err {
        OracleError::Unavailable(msg) => assert!(msg.contains("after 3 attempts"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn http_replay_matches_fixture_mode() {
    let fx = fixture();
    let server = ReplayServer::start(&fx.fixture_dir, "127.0.0.1:0").unwrap();
    let http = OracleClient::from_config(&OracleConfig::http(server.url()), None).unwrap();
    let (local, _) = client(&fx);
    for seed in [1, 2, 3] {
        assert_eq!(
            http.detect(&patch(seed), &person()).unwrap(),
            local.detect(&patch(seed), &person()).unwrap()
        );
    }
    assert_eq!(http.embed_image(&patch(1)).unwrap(), local.embed_image(&patch(1)).unwrap());
    assert_eq!(http.caption(&patch(1)).unwrap(), local.caption(&patch(1)).unwrap());
    assert_eq!(http.embed_text("a pile of snow").unwrap(), local.embed_text("a pile of snow").unwrap());

    // A missing entry is a permanent 400, never an empty result.
    assert!(matches!(
        http.detect(&patch(9), &person()),
        Err(OracleError::Rejected { status: 400, .. })
    ));
}

#[test]
fn http_rejects_foreign_model_ids() {
    let fx = fixture();
    let server = ReplayServer::start(&fx.fixture_dir, "127.0.0.1:0").unwrap();
    let mut cfg = OracleConfig::http(server.url());
    cfg.models.joint = "other".into();
    let http = OracleClient::from_config(&cfg, None).unwrap();
    // Key lookups use the server's own model ids; the client then refuses the answer.
    assert!(matches!(http.embed_image(&patch(1)), Err(OracleError::Protocol(_))));
}

fn probe_fixture(joint_dim_reported: usize) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let fdir = dir.path().join("fx");
    let probe = conformance::Probe::default();
    let w = FixtureWriter::new(&fdir, ModelIds::default());
    w.detections("probe", &probe.image, "person", &[bx(0.9), bx(0.1)]).unwrap();
    w.image_vector("probe", &probe.image, &[1.0, 2.0, 3.0]).unwrap();
    w.text_vector(&probe.text, &[0.5, 0.5, 0.5]).unwrap();
    w.caption("probe", &probe.image, "a colourful gradient").unwrap();
    w.sentence_vector(&probe.text, &[1.0, 0.0]).unwrap();
    w.finish(joint_dim_reported, 2).unwrap();
    (dir, fdir)
}

#[test]
fn conformance_suite_passes_on_replay_server() {
    let (_d, fdir) = probe_fixture(3);
    let server = ReplayServer::start(&fdir, "127.0.0.1:0").unwrap();
    let report = conformance::check(&server.url(), &conformance::Probe::default(), 5);
    assert!(report.passed(), "{report:#?}");
    assert_eq!(report.checks.len(), 11);
}

#[test]
fn conformance_suite_flags_dimension_lies() {
    let (_d, fdir) = probe_fixture(4);
    let server = ReplayServer::start(&fdir, "127.0.0.1:0").unwrap();
    let report = conformance::check(&server.url(), &conformance::Probe::default(), 5);
    assert!(!report.passed());
    let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, vec!["embed_image.schema", "embed_text.schema"]);
}

proptest! {
    #[test]
    fn normalization_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..64)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let once = EmbeddingVector::normalized(v, SpaceId::Sentence).unwrap();
        prop_assert!((once.norm() - 1.0).abs() < 1e-6);
        let twice = EmbeddingVector::normalized(once.values.clone(), SpaceId::Sentence).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn raising_box_threshold_only_removes_boxes(
        scores in prop::collection::vec(0.0f64..=1.0, 0..12),
        lo in 0.0f64..=1.0,
        delta in 0.0f64..=1.0,
    ) {
        let boxes: Vec<_> = scores.iter().map(|&s| bx(s)).collect();
        let hi = (lo + delta).min(1.0);
        let a = filter_boxes(boxes.clone(), lo, 8, 6).unwrap();
        let b = filter_boxes(boxes, hi, 8, 6).unwrap();
        prop_assert!(b.len() <= a.len());
        prop_assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
