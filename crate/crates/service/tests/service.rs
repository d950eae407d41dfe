use std::sync::Arc;

use sdedit_core::guide_tools::RasterImage;
use sdedit_core::score::{Activation, LearnedScore, MlpScoreNet, TimeEmbedding};
use sdedit_core::{Feedback, NoiseSchedule, NoiseStream};
use sdedit_service::presets;
use sdedit_service::{
    EditService, ErrorCode, GenerateRequest, GuideRequest, Limits, Payload, PresetRegistry,
};

fn service() -> Arc<EditService> {
    Arc::new(EditService::with_builtins())
}

fn vector(values: &[f64]) -> Payload {
    Payload::Vector { values: values.to_vec() }
}

fn toy_session(svc: &Arc<EditService>) -> uuid::Uuid {
    let id = svc.create_session("toy-2d").unwrap().id;
    svc.submit_guide(id, &GuideRequest { guide: vector(&[3.0, 3.0]), mask: None }).unwrap();
    id
}

fn quick(t0: Option<f64>, seed: u64) -> GenerateRequest {
    GenerateRequest { t0, n_steps: Some(50), seed: Some(seed), ..Default::default() }
}

fn scene(w: usize, h: usize) -> RasterImage {
    RasterImage::from_fn(w, h, 3, |x, y, c| if y < h / 2 { 0.2 + 0.3 * c as f64 } else { (x % 5) as f64 / 5.0 }).unwrap()
}

#[test]
fn create_session_contract() {
    let svc = service();
    let a = svc.create_session("toy-2d").unwrap();
    assert_eq!(a.search.probe, 0.45);
    assert_eq!((a.search.lo, a.search.hi), (0.3, 0.6));
    assert_eq!(a.id.as_bytes().len(), 16);
    let b = svc.create_session("toy-2d").unwrap();
    assert_ne!(a.id, b.id);
    assert_eq!(svc.create_session("no-such").unwrap_err().code, ErrorCode::NotFound);
}

#[test]
fn image_guide_ack_and_mask_shape() {
    let svc = service();
    let id = svc.create_session("toy-scenes-32").unwrap().id;
    let img = scene(32, 32);
    let ack = svc.submit_guide(id, &GuideRequest { guide: Payload::from_image(&img), mask: None }).unwrap();
    assert_eq!((ack.w, ack.h, ack.c), (Some(32), Some(32), Some(3)));
    assert!(!ack.masked);

    let bad_mask = RasterImage::filled(16, 16, &[1.0]).unwrap();
    let err = svc
        .submit_guide(id, &GuideRequest { guide: Payload::from_image(&img), mask: Some(Payload::from_image(&bad_mask)) })
        .unwrap_err();
    assert_eq!(err.code, ErrorCode::ShapeMismatch);

    let wrong = scene(16, 16);
    let err = svc.submit_guide(id, &GuideRequest { guide: Payload::from_image(&wrong), mask: None }).unwrap_err();
    assert_eq!(err.code, ErrorCode::ShapeMismatch);
    let err = svc.submit_guide(id, &GuideRequest { guide: vector(&[0.0; 4]), mask: None }).unwrap_err();
    assert_eq!(err.code, ErrorCode::ShapeMismatch);

    let big = scene(80, 80);
    let err = svc.submit_guide(id, &GuideRequest { guide: Payload::from_image(&big), mask: None }).unwrap_err();
    assert_eq!(err.code, ErrorCode::BadRequest);

    let err = svc
        .submit_guide(id, &GuideRequest { guide: Payload::Pnm { data: "%%%".into() }, mask: None })
        .unwrap_err();
    assert_eq!(err.code, ErrorCode::BadRequest);
}

#[test]
fn resubmission_replaces_the_guide() {
    let svc = service();
    let id = toy_session(&svc);
    let ack = svc.submit_guide(id, &GuideRequest { guide: vector(&[0.5, -0.5]), mask: Some(vector(&[0.0, 1.0])) }).unwrap();
    assert_eq!(ack.len, Some(2));
    assert!(ack.masked);
    assert_eq!(ack.editable, 1);
    let r = svc.generate(id, &quick(Some(0.0), 1)).unwrap();
    let stored = svc.result(id, r.result_id).unwrap();
    assert_eq!(stored.result.output, vec![0.5, -0.5]);
}

#[test]
fn generate_contract() {
    let svc = service();
    let id = toy_session(&svc);
    let r = svc.generate(id, &quick(Some(0.0), 1)).unwrap();
    assert_eq!(r.faithfulness.l2_squared, 0.0);
    assert_eq!(svc.result(id, r.result_id).unwrap().result.output, vec![3.0, 3.0]);

    let r = svc.generate(id, &GenerateRequest::default()).unwrap();
    assert_eq!(r.t0, 0.45);
    assert_eq!(r.n_steps, 500);
    assert!(r.faithfulness.l2_squared > 0.0);

    let ticket = svc.begin_generate(id, &quick(None, 2)).unwrap();
    assert_eq!(svc.generate(id, &quick(None, 3)).unwrap_err().code, ErrorCode::Busy);
    let err = svc.submit_guide(id, &GuideRequest { guide: vector(&[0.0, 0.0]), mask: None }).unwrap_err();
    assert_eq!(err.code, ErrorCode::Busy);
    assert_eq!(svc.feedback(id, Feedback::Accept).unwrap_err().code, ErrorCode::Busy);
    ticket.execute().unwrap();
    svc.generate(id, &quick(None, 3)).unwrap();

    // A dropped ticket releases the session.
    drop(svc.begin_generate(id, &quick(None, 4)).unwrap());
    svc.generate(id, &quick(None, 4)).unwrap();
}

#[test]
fn generate_rejections() {
    let svc = service();
    let id = svc.create_session("toy-2d").unwrap().id;
    assert_eq!(svc.generate(id, &quick(None, 1)).unwrap_err().code, ErrorCode::BadRequest);
    svc.submit_guide(id, &GuideRequest { guide: vector(&[1.0, 1.0]), mask: None }).unwrap();
    let too_many = GenerateRequest { n_steps: Some(1001), ..Default::default() };
    assert_eq!(svc.generate(id, &too_many).unwrap_err().code, ErrorCode::BadRequest);
    let bad_t0 = GenerateRequest { t0: Some(1.5), ..quick(None, 1) };
    assert_eq!(svc.generate(id, &bad_t0).unwrap_err().code, ErrorCode::BadRequest);
    let bad_label = GenerateRequest { label: Some(7), ..quick(None, 1) };
    assert_eq!(svc.generate(id, &bad_label).unwrap_err().code, ErrorCode::Internal);
    assert_eq!(svc.generate(uuid::Uuid::new_v4(), &quick(None, 1)).unwrap_err().code, ErrorCode::NotFound);
}

#[test]
fn deadline_is_enforced() {
    let limits = Limits { deadline_secs: 0.0, ..Limits::default() };
    let svc = Arc::new(EditService::new(PresetRegistry::with_builtins().unwrap(), limits));
    let id = toy_session(&svc);
    let err = svc.generate(id, &quick(None, 1)).unwrap_err();
    assert_eq!(err.code, ErrorCode::BadRequest);
    assert!(err.message.contains("limit"));
    svc.generate(id, &quick(Some(0.0), 1)).unwrap();
}

#[test]
fn feedback_follows_bisection() {
    let svc = service();
    let id = toy_session(&svc);
    assert_eq!(svc.feedback(id, Feedback::MoreRealistic).unwrap_err().code, ErrorCode::BadRequest);

    svc.generate(id, &quick(None, 1)).unwrap();
    let v = svc.feedback(id, Feedback::MoreRealistic).unwrap();
    assert_eq!((v.lo, v.hi, v.probe), (0.45, 0.6, 0.525));
    assert_eq!(svc.feedback(id, Feedback::MoreFaithful).unwrap_err().code, ErrorCode::BadRequest);

    let other = toy_session(&svc);
    svc.generate(other, &quick(None, 1)).unwrap();
    let v = svc.feedback(other, Feedback::MoreFaithful).unwrap();
    assert_eq!((v.lo, v.hi, v.probe), (0.3, 0.45, 0.375));

    assert_eq!(svc.generate(id, &quick(None, 2)).unwrap().t0, 0.525);
    let v = svc.feedback(id, Feedback::Accept).unwrap();
    assert!(v.accepted);
    for seed in 3..5 {
        assert_eq!(svc.generate(id, &quick(None, seed)).unwrap().t0, 0.525);
    }
    assert_eq!(svc.feedback(id, Feedback::MoreRealistic).unwrap_err().code, ErrorCode::BadRequest);

    // A new guide restarts the search.
    svc.submit_guide(id, &GuideRequest { guide: vector(&[0.0, 1.0]), mask: None }).unwrap();
    let info = svc.session_info(id).unwrap();
    assert_eq!(info.search.probe, 0.45);
    assert!(!info.search.accepted);
}

#[test]
fn results_are_idempotent_and_capped() {
    let svc = service();
    let id = toy_session(&svc);
    let first = svc.generate(id, &quick(None, 1)).unwrap().result_id;
    let a = svc.result_bytes(id, first).unwrap();
    assert_eq!(a, svc.result_bytes(id, first).unwrap());
    assert!(a.content_type.starts_with("text/plain"));
    for seed in 0..svc.limits().history_cap as u64 {
        svc.generate(id, &quick(None, 10 + seed)).unwrap();
    }
    assert_eq!(svc.result_bytes(id, first).unwrap_err().code, ErrorCode::NotFound);
    assert_eq!(svc.session_info(id).unwrap().results.len(), svc.limits().history_cap);
}

#[test]
fn image_results_are_pnm_and_masks_preserve() {
    let svc = service();
    let id = svc.create_session("toy-scenes-32").unwrap().id;
    let img = scene(32, 32);
    let mask = RasterImage::from_fn(32, 32, 1, |x, _, _| if x < 16 { 1.0 } else { 0.0 }).unwrap();
    let ack = svc
        .submit_guide(id, &GuideRequest { guide: Payload::from_image(&img), mask: Some(Payload::from_image(&mask)) })
        .unwrap();
    assert_eq!(ack.editable, 16 * 32 * 3);
    let r = svc.generate(id, &GenerateRequest { n_steps: Some(100), seed: Some(9), ..Default::default() }).unwrap();
    let bytes = svc.result_bytes(id, r.result_id).unwrap();
    assert_eq!(bytes.content_type, "image/x-portable-pixmap");
    let out = RasterImage::from_pnm(&bytes.bytes).unwrap();
    assert_eq!((out.width(), out.height(), out.channels()), (32, 32, 3));
    let preserved_err: f64 = (0..32)
        .flat_map(|y| (16..32).map(move |x| (x, y)))
        .map(|(x, y)| (0..3).map(|c| (out.get(x, y, c) - img.get(x, y, c)).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    assert!(preserved_err < 0.05, "{preserved_err}");
    let labelled = GenerateRequest { label: Some(2), n_steps: Some(50), seed: Some(1), ..Default::default() };
    svc.generate(id, &labelled).unwrap();
}

#[test]
fn snapshot_round_trip() {
    let svc = service();
    let id = toy_session(&svc);
    let rid = svc.generate(id, &quick(None, 5)).unwrap().result_id;
    svc.feedback(id, Feedback::MoreFaithful).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.json");
    svc.save_snapshot(&path).unwrap();

    let fresh = service();
    assert_eq!(fresh.load_snapshot(&path).unwrap(), 1);
    assert_eq!(fresh.session_info(id).unwrap(), svc.session_info(id).unwrap());
    assert_eq!(fresh.result_bytes(id, rid).unwrap(), svc.result_bytes(id, rid).unwrap());
    fresh.generate(id, &quick(None, 6)).unwrap();
    std::fs::write(&path, "not json").unwrap();
    assert_eq!(fresh.load_snapshot(&path).unwrap_err().code, ErrorCode::BadRequest);
}

#[test]
fn preset_directory_loading() {
    let dir = tempfile::tempdir().unwrap();
    let mut gmm = presets::toy_2d();
    gmm.name = "custom-gmm".into();
    std::fs::write(dir.path().join("a.toml"), toml::to_string(&gmm).unwrap()).unwrap();

    let schedule = NoiseSchedule::from_preset("vp-default").unwrap();
    let net = MlpScoreNet::new(2, &[8], TimeEmbedding::default(), Activation::Silu, &mut NoiseStream::new(1).sequential(0))
        .unwrap();
    LearnedScore::new(net, schedule).save(dir.path().join("net.bin"), "vp-default", 1).unwrap();
    std::fs::write(
        dir.path().join("b.toml"),
        "name = \"learned\"\nshape = { kind = \"flat\", len = 2 }\n[model]\nkind = \"mlp\"\nweights = \"net.bin\"\n",
    )
    .unwrap();
    std::fs::write(dir.path().join("ignored.txt"), "x").unwrap();

    let loaded = presets::load_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 2);
    let mut reg = PresetRegistry::with_builtins().unwrap();
    for p in loaded {
        reg.insert(p);
    }
    let learned = reg.get("learned").unwrap();
    assert_eq!(learned.schedule, schedule);
    assert!(learned.classifier.is_none());

    let svc = Arc::new(EditService::new(reg, Limits::default()));
    assert_eq!(svc.presets().len(), 4);
    let id = svc.create_session("learned").unwrap().id;
    svc.submit_guide(id, &GuideRequest { guide: vector(&[1.0, 1.0]), mask: None }).unwrap();
    svc.generate(id, &quick(None, 1)).unwrap();
    let labelled = GenerateRequest { label: Some(0), ..quick(None, 1) };
    assert_eq!(svc.generate(id, &labelled).unwrap_err().code, ErrorCode::BadRequest);

    std::fs::write(dir.path().join("c.toml"), "name = 3").unwrap();
    assert!(presets::load_dir(dir.path()).is_err());
}
