use std::io::Write;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use patholab_core::eval::{Origin, ResponseLabels};
use patholab_vtt::http::router;
use patholab_vtt::*;
use serde_json::Value;
use tower::ServiceExt;

fn pool(prefix: &str, n: usize, offset: u8) -> Vec<PoolImage> {
    (0..n)
        .map(|i| PoolImage {
            id: format!("{prefix}-{i}"),
            width: 4,
            height: 3,
            pixels: (0..12).map(|j| offset.wrapping_add((i * 12 + j) as u8)).collect(),
            tumor: Some(i % 3 == 0),
        })
        .collect()
}

fn store(dir: &std::path::Path) -> VttStore {
    VttStore::open(dir, pool("real", 120, 0), pool("synthetic", 120, 128)).unwrap()
}

fn answer(origin: Origin) -> RaterResponse {
    RaterResponse {
        session_id: None,
        index: 0,
        answer: ResponseLabels { origin, tumor: None },
        timestamp_ms: Some(1),
    }
}

fn log_lines(dir: &std::path::Path, id: &str) -> usize {
    std::fs::read_to_string(dir.join(id).join(LOG_FILE)).unwrap().lines().count()
}

#[test]
fn deck_composition_and_seeding() {
    let (r, s) = (pool("real", 60, 0), pool("synthetic", 60, 128));
    let deck = create_session("a", &r, &s, Composition::default(), QuestionSet::default(), 7).unwrap();
    assert_eq!(deck.items.len(), 100);
    assert_eq!(deck.items.iter().filter(|i| i.truth.origin == Origin::Real).count(), 50);
    let mut ids: Vec<&str> = deck.items.iter().map(|i| i.image.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 100);

    let again = create_session("a", &r, &s, Composition::default(), QuestionSet::default(), 7).unwrap();
    assert_eq!(deck, again);
    let other = create_session("a", &r, &s, Composition::default(), QuestionSet::default(), 8).unwrap();
    assert_ne!(deck.items, other.items);

    let zero = Composition { real: 0, synthetic: 0 };
    assert!(create_session("a", &r, &s, zero, QuestionSet::default(), 7).is_err());
    let big = Composition { real: 61, synthetic: 1 };
    assert!(create_session("a", &r, &s, big, QuestionSet::default(), 7).is_err());
}

#[test]
fn serves_in_order_until_exhausted() {
    let dir = tempfile::tempdir().unwrap();
    let st = store(dir.path());
    let (id, n) = st.create(Composition::default(), QuestionSet::default(), 3).unwrap();
    assert_eq!(n, 100);
    assert_eq!(st.next_trial(&id).unwrap().index, 0);
    for i in 0..n {
        let ack = st.record(&id, &RaterResponse { index: i, ..answer(Origin::Real) }).unwrap();
        assert_eq!(ack.recorded, i + 1);
        assert_eq!(log_lines(dir.path(), &id), i + 1);
    }
    assert!(matches!(st.next_trial(&id), Err(VttError::DeckExhausted)));
    assert!(matches!(st.next_trial("nope"), Err(VttError::UnknownSession(_))));
}

#[test]
fn duplicate_is_rejected_and_log_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let st = store(dir.path());
    let (id, _) = st.create(Composition::default(), QuestionSet::default(), 3).unwrap();
    st.record(&id, &RaterResponse { index: 4, ..answer(Origin::Real) }).unwrap();
    let before = std::fs::read(dir.path().join(&id).join(LOG_FILE)).unwrap();
    assert!(matches!(st.record(&id, &RaterResponse { index: 4, ..answer(Origin::Synthetic) }), Err(VttError::Duplicate(4))));
    assert_eq!(std::fs::read(dir.path().join(&id).join(LOG_FILE)).unwrap(), before);
    assert_eq!(st.recorded(&id).unwrap(), 1);
    assert!(st.record(&id, &RaterResponse { index: 100, ..answer(Origin::Real) }).is_err());
    assert!(st.record("nope", &answer(Origin::Real)).is_err());
}

#[test]
fn restart_replays_acknowledged_responses() {
    let dir = tempfile::tempdir().unwrap();
    let (id, acked) = {
        let st = store(dir.path());
        let (id, _) = st.create(Composition { real: 10, synthetic: 10 }, QuestionSet::default(), 5).unwrap();
        let acked: Vec<usize> = [3, 0, 7, 12, 1].into_iter().map(|i| st.record(&id, &RaterResponse { index: i, ..answer(Origin::Real) }).unwrap().index).collect();
        (id, acked)
    };
    // A write that died before its newline was never acknowledged.
    let mut f = std::fs::OpenOptions::new().append(true).open(dir.path().join(&id).join(LOG_FILE)).unwrap();
    f.write_all(br#"{"index":2,"answer":{"orig"#).unwrap();
    drop(f);

    let st = store(dir.path());
    assert_eq!(st.recorded(&id).unwrap(), acked.len());
    assert_eq!(st.next_trial(&id).unwrap().index, 2);
    for &i in &acked {
        assert!(matches!(st.record(&id, &RaterResponse { index: i, ..answer(Origin::Real) }), Err(VttError::Duplicate(_))));
    }
    st.record(&id, &RaterResponse { index: 2, ..answer(Origin::Real) }).unwrap();
    assert_eq!(log_lines(dir.path(), &id), acked.len() + 1);
    let report = store(dir.path()).finalize(&id, true).unwrap();
    assert_eq!(report.responses, acked.len() + 1);
    assert!(!report.complete);
}

fn answer_deck(st: &VttStore, dir: &std::path::Path, id: &str, real_hits: usize, synth_hits: usize) {
    let deck: TrialDeck = serde_json::from_slice(&std::fs::read(dir.join(id).join(DECK_FILE)).unwrap()).unwrap();
    let (mut r, mut s) = (0, 0);
    for (i, item) in deck.items.iter().enumerate() {
        let said = match item.truth.origin {
            Origin::Real => {
                r += 1;
                if r <= real_hits { Origin::Real } else { Origin::Synthetic }
            }
            Origin::Synthetic => {
                s += 1;
                if s <= synth_hits { Origin::Synthetic } else { Origin::Real }
            }
        };
        st.record(id, &RaterResponse { index: i, ..answer(said) }).unwrap();
    }
}

#[test]
fn report_reproduces_table_row_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let st = store(dir.path());
    let (id, _) = st.create(Composition { real: 100, synthetic: 100 }, QuestionSet::default(), 11).unwrap();
    assert!(matches!(st.finalize(&id, false), Err(VttError::Incomplete { open: 200 })));
    assert!(st.finalize(&id, true).is_err());
    answer_deck(&st, dir.path(), &id, 73, 86);
    let rep = st.finalize(&id, false).unwrap();
    assert_eq!(rep.accuracy, 79.5);
    assert_eq!((rep.real_as_real, rep.real_as_synthetic, rep.synthetic_as_real, rep.synthetic_as_synthetic), (73.0, 27.0, 14.0, 86.0));
    assert!(rep.complete);
    assert_eq!(rep.origin.counts[0][0] + rep.origin.counts[0][1], 100);

    let (id, _) = st.create(Composition { real: 5, synthetic: 5 }, QuestionSet::default(), 12).unwrap();
    answer_deck(&st, dir.path(), &id, 5, 5);
    assert_eq!(st.finalize(&id, false).unwrap().accuracy, 100.0);
}

#[test]
fn tumor_question_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let st = store(dir.path());
    let (id, _) = st.create(Composition { real: 3, synthetic: 3 }, QuestionSet { tumor: true }, 1).unwrap();
    assert_eq!(st.next_trial(&id).unwrap().questions, vec!["origin", "tumor"]);
    assert!(st.record(&id, &answer(Origin::Real)).is_err());
    let with = RaterResponse {
        answer: ResponseLabels { origin: Origin::Real, tumor: Some(true) },
        ..answer(Origin::Real)
    };
    st.record(&id, &with).unwrap();
    assert!(st.finalize(&id, true).unwrap().tumor.is_some());
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn contains(hay: &[u8], needle: &str) -> bool {
    hay.windows(needle.len()).any(|w| w == needle.as_bytes())
}

#[tokio::test]
async fn http_round_trip_keeps_labels_off_the_wire() {
    let dir = tempfile::tempdir().unwrap();
    let st = Arc::new(store(dir.path()));
    let app = router(st.clone());
    let (status, body) = call(&app, "POST", "/sessions", Some(serde_json::json!({"real": 10, "synthetic": 10, "seed": 4}))).await;
    assert_eq!(status, StatusCode::OK);
    let created: Value = serde_json::from_slice(&body).unwrap();
    let id = created["session_id"].as_str().unwrap().to_string();
    assert_eq!(created["items"], 20);

    let deck: TrialDeck = serde_json::from_slice(&std::fs::read(dir.path().join(&id).join(DECK_FILE)).unwrap()).unwrap();
    let mut captured: Vec<Vec<u8>> = Vec::new();
    let mut rest_of_payload: Option<Value> = None;
    loop {
        let (status, body) = call(&app, "GET", &format!("/sessions/{id}/next"), None).await;
        if status == StatusCode::CONFLICT {
            assert!(contains(&body, "deck exhausted"));
            break;
        }
        assert_eq!(status, StatusCode::OK);
        let v: Value = serde_json::from_slice(&body).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["image", "index", "questions"]);
        let img = v["image"].as_object().unwrap();
        assert_eq!(img.keys().map(String::as_str).collect::<Vec<_>>(), vec!["data", "height", "width"]);
        let index = v["index"].as_u64().unwrap() as usize;
        let pixels = base64::engine::general_purpose::STANDARD.decode(img["data"].as_str().unwrap()).unwrap();
        assert_eq!(pixels, deck.items[index].image.pixels);

        // Everything except the pixels and the index is identical across items.
        let mut stripped = v.clone();
        stripped["image"]["data"] = Value::Null;
        stripped["index"] = Value::Null;
        match &rest_of_payload {
            Some(prev) => assert_eq!(prev, &stripped),
            None => rest_of_payload = Some(stripped.clone()),
        }
        captured.push(serde_json::to_vec(&stripped).unwrap());

        let origin = if index % 2 == 0 { "real" } else { "synthetic" };
        let (status, ack) = call(
            &app,
            "POST",
            &format!("/sessions/{id}/responses"),
            Some(serde_json::json!({"index": index, "answer": {"origin": origin}})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        captured.push(ack);
        let (status, _) = call(
            &app,
            "POST",
            &format!("/sessions/{id}/responses"),
            Some(serde_json::json!({"index": index, "answer": {"origin": origin}})),
        )
        .await;
        assert_eq!(status, StatusCode::CONFLICT);
    }
    assert_eq!(captured.len(), 40);
    for bytes in &captured {
        for needle in ["real", "synthetic", "truth", "tumor\":true", "tumor\":false"] {
            assert!(!contains(bytes, needle), "{needle} leaked in {}", String::from_utf8_lossy(bytes));
        }
    }

    let (status, body) = call(&app, "GET", &format!("/sessions/{id}/report"), None).await;
    assert_eq!(status, StatusCode::OK);
    let rep: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(rep["responses"], 20);
    assert_eq!(rep["complete"], true);

    let (status, _) = call(&app, "GET", "/sessions/session-9999/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = call(&app, "POST", "/sessions", Some(serde_json::json!({"real": 0, "synthetic": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(contains(&body, "at least one item"));

    let (status, body) = call(&app, "POST", "/sessions", Some(serde_json::json!({"real": 2, "synthetic": 2}))).await;
    assert_eq!(status, StatusCode::OK);
    let id2 = serde_json::from_slice::<Value>(&body).unwrap()["session_id"].as_str().unwrap().to_string();
    let (status, _) = call(&app, "GET", &format!("/sessions/{id2}/report"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    call(&app, "POST", &format!("/sessions/{id2}/responses"), Some(serde_json::json!({"index": 1, "answer": {"origin": "real"}}))).await;
    let (status, body) = call(&app, "GET", &format!("/sessions/{id2}/report?partial=true"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["complete"], false);
}
