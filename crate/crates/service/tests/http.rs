use std::path::Path;
use std::sync::Arc;

use advtransfer::analysis::load_responses;
use advtransfer::stimuli::{
    assemble_session, write_stimulus, Condition, SessionManifest, SessionTiming, StimulusRecord,
};
use advtransfer::Tensor;
use advtransfer_service::{router, stimulus_token, Ack, AppState, ClientSession};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use sha2::{Digest, Sha256};
use tower::ServiceExt;

const CLASSES: [&str; 2] = ["cat", "dog"];

fn record(src: &str, cond: Condition, true_class: Option<&str>, target: Option<&str>) -> StimulusRecord {
    let id = match cond {
        Condition::False => format!("{src}-false-{}", target.unwrap()),
        c => format!("{src}-{c}"),
    };
    StimulusRecord {
        file: format!("{id}.png"),
        id,
        condition: cond,
        group: "pets".into(),
        true_class: true_class.map(str::to_owned),
        target: target.map(str::to_owned),
        source_id: src.into(),
        epsilon: target.map(|_| 32.0),
        perturbation: None,
        delta_file: None,
        retained: true,
    }
}

/// Pool with 4 stimuli per (condition, class) and one assembled session `pets-3`.
fn fixture(root: &Path) -> SessionManifest {
    let stim = root.join("stimuli");
    let sessions = root.join("sessions");
    std::fs::create_dir_all(&sessions).unwrap();
    let mut pool = Vec::new();
    for (ci, class) in CLASSES.iter().enumerate() {
        let other = CLASSES[1 - ci];
        for k in 0..4 {
            let src = format!("{class}{k}");
            pool.push(record(&src, Condition::Image, Some(class), None));
            pool.push(record(&src, Condition::Adv, Some(class), Some(other)));
            pool.push(record(&src, Condition::Flip, Some(class), Some(other)));
            pool.push(record(&format!("spider{ci}{k}"), Condition::False, None, Some(class)));
        }
    }
    for (i, r) in pool.iter().enumerate() {
        let data = (0..8 * 8 * 3).map(|j| ((i * 31 + j * 7) % 176 + 40) as f64).collect();
        let img = Tensor::new(vec![8, 8, 3], data).unwrap();
        write_stimulus(&stim, r, &img, None).unwrap();
    }
    let classes = CLASSES.map(str::to_owned);
    let m = assemble_session(&pool, "pets", &classes, 4, 3, &SessionTiming::default()).unwrap();
    m.write(&sessions.join(format!("{}.json", m.session_id))).unwrap();
    m
}

fn app(root: &Path) -> Router {
    let state = AppState::load(&root.join("stimuli"), &root.join("sessions")).unwrap();
    router(Arc::new(state))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_owned());
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ctype)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>, Option<String>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/response")
        .header("content-type", "application/json")
        .body(Body::from(body.to_owned()))
        .unwrap();
    let (s, b, _) = send(app, req).await;
    (s, b)
}

fn response_json(session: &str, subject: &str, trial: usize, chosen: &str) -> String {
    serde_json::json!({
        "session_id": session, "subject_id": subject, "trial_index": trial,
        "chosen": chosen, "rt_ms": 512.5
    })
    .to_string()
}

#[tokio::test]
async fn session_is_served_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let app = app(dir.path());
    let (status, body, _) = get(&app, &format!("/session/{}", m.session_id)).await;
    assert_eq!(status, StatusCode::OK);
    let client: ClientSession = serde_json::from_slice(&body).unwrap();
    assert_eq!(client.trials.len(), 16);
    assert_eq!(client.buttons, m.buttons);
    for (c, t) in client.trials.iter().zip(&m.trials) {
        assert_eq!(c.stimulus, stimulus_token(&t.stimulus_id));
        assert_eq!((c.index, c.fixation_ms, c.mask_seed), (t.index, t.fixation_ms, t.mask_seed));
    }
    // Class names appear only as the two buttons; no condition names or ids at all.
    let text = String::from_utf8(body).unwrap();
    for needle in ["cat", "dog"] {
        assert_eq!(text.matches(needle).count(), 1, "{needle} leaked: {text}");
    }
    for needle in ["adv", "flip", "false", "image", "spider", "target", "true_class"] {
        assert!(!text.contains(needle), "{needle} leaked: {text}");
    }
}

#[tokio::test]
async fn unknown_session_is_404() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let (status, _, _) = get(&app(dir.path()), "/session/nope").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stimulus_bytes_are_served_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let app = app(dir.path());
    for t in &m.trials {
        let (status, body, ctype) = get(&app, &format!("/stimulus/{}.png", stimulus_token(&t.stimulus_id))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(ctype.as_deref(), Some("image/png"));
        let disk = std::fs::read(dir.path().join("stimuli").join(format!("{}.png", t.stimulus_id))).unwrap();
        assert_eq!(Sha256::digest(&body), Sha256::digest(&disk));
    }
    assert_eq!(get(&app, "/stimulus/0123456789abcdef.png").await.0, StatusCode::NOT_FOUND);
    let raw_id = &m.trials[0].stimulus_id;
    assert_eq!(get(&app, &format!("/stimulus/{raw_id}.png")).await.0, StatusCode::NOT_FOUND);
    let token = stimulus_token(raw_id);
    assert_eq!(get(&app, &format!("/stimulus/{token}")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn first_response_per_trial_is_counted() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let app = app(dir.path());
    let sid = &m.session_id;
    let (s1, b1) = post(&app, &response_json(sid, "s01", 5, "cat")).await;
    let (s2, b2) = post(&app, &response_json(sid, "s01", 5, "dog")).await;
    let (s3, b3) = post(&app, &response_json(sid, "s02", 5, "dog")).await;
    assert_eq!((s1, s2, s3), (StatusCode::OK, StatusCode::OK, StatusCode::OK));
    let acks: Vec<Ack> = [b1, b2, b3].iter().map(|b| serde_json::from_slice(b).unwrap()).collect();
    assert_eq!(acks.iter().map(|a| a.counted).collect::<Vec<_>>(), [true, false, true]);

    let log = load_responses(&dir.path().join("sessions/responses")).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(log[0].chosen.as_deref(), Some("cat"));
    assert!(log[0].first_press && !log[1].first_press && log[2].first_press);
    let stim = &m.trials[5].stimulus_id;
    assert!(log.iter().all(|r| &r.stimulus_id == stim && r.group == "pets"));
    let expected_cond = if stim.contains("-false-") {
        Condition::False
    } else {
        stim.rsplit('-').next().unwrap().parse().unwrap()
    };
    assert_eq!(log[0].condition, expected_cond);
}

#[tokio::test]
async fn timeout_response_has_no_choice() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let app = app(dir.path());
    let body = serde_json::json!({"session_id": m.session_id, "subject_id": "s", "trial_index": 0,
        "chosen": null, "rt_ms": null})
    .to_string();
    assert_eq!(post(&app, &body).await.0, StatusCode::OK);
    let log = load_responses(&dir.path().join("sessions/responses")).unwrap();
    assert_eq!((log[0].chosen.clone(), log[0].rt_ms), (None, None));
}

#[tokio::test]
async fn bad_posts_are_rejected_and_not_logged() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let app = app(dir.path());
    let sid = &m.session_id;
    let cases = [
        ("{not json".to_owned(), StatusCode::BAD_REQUEST),
        (r#"{"session_id":"x"}"#.to_owned(), StatusCode::BAD_REQUEST),
        (response_json(sid, "s", 0, "spider"), StatusCode::BAD_REQUEST),
        (response_json(sid, "", 0, "cat"), StatusCode::BAD_REQUEST),
        (response_json(sid, "s", 16, "cat"), StatusCode::CONFLICT),
        (response_json("other-1", "s", 0, "cat"), StatusCode::CONFLICT),
        (
            serde_json::json!({"session_id": sid, "subject_id": "s", "trial_index": 0, "chosen": "cat",
                "rt_ms": -3.0})
            .to_string(),
            StatusCode::BAD_REQUEST,
        ),
        (
            serde_json::json!({"session_id": sid, "subject_id": "s", "trial_index": 0, "chosen": "cat",
                "rt_ms": 10.0, "stimulus": stimulus_token(&m.trials[1].stimulus_id)})
            .to_string(),
            StatusCode::CONFLICT,
        ),
    ];
    for (body, expected) in cases {
        assert_eq!(post(&app, &body).await.0, expected, "{body}");
    }
    let log = std::fs::read_to_string(dir.path().join(format!("sessions/responses/{sid}.jsonl"))).unwrap();
    assert!(log.is_empty());
}

#[tokio::test]
async fn counted_state_survives_reload() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let sid = &m.session_id;
    {
        let app = app(dir.path());
        assert_eq!(post(&app, &response_json(sid, "s01", 2, "cat")).await.0, StatusCode::OK);
    }
    let app = app(dir.path());
    let (_, b) = post(&app, &response_json(sid, "s01", 2, "dog")).await;
    let ack: Ack = serde_json::from_slice(&b).unwrap();
    assert!(!ack.counted);
    let log = load_responses(&dir.path().join("sessions/responses")).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(log.iter().filter(|r| r.first_press).count(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_duplicates_count_once() {
    let dir = tempfile::tempdir().unwrap();
    let m = fixture(dir.path());
    let app = app(dir.path());
    let tasks: Vec<_> = (0..12)
        .map(|i| {
            let app = app.clone();
            let body = response_json(&m.session_id, "s01", 7, CLASSES[i % 2]);
            tokio::spawn(async move { post(&app, &body).await })
        })
        .collect();
    let mut counted = 0;
    for t in tasks {
        let (s, b) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        counted += usize::from(serde_json::from_slice::<Ack>(&b).unwrap().counted);
    }
    assert_eq!(counted, 1);
    let log = load_responses(&dir.path().join("sessions/responses")).unwrap();
    assert_eq!(log.len(), 12);
    assert_eq!(log.iter().filter(|r| r.first_press).count(), 1);
}

#[test]
fn manifest_with_missing_stimulus_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = fixture(dir.path());
    m.session_id = "broken".into();
    m.trials[0].stimulus_id = "ghost-image".into();
    m.write(&dir.path().join("sessions/broken.json")).unwrap();
    assert!(AppState::load(&dir.path().join("stimuli"), &dir.path().join("sessions")).is_err());
}
