use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use super::http::{router, AppState, ErrorBody};
use super::*;

fn vocab() -> Vocab {
    Vocab::geometric("ab", 4, 100.0, 200.0).unwrap()
}

fn prompt(i: usize) -> Prompt {
    Prompt::new(format!("p{i}"), "abab", vec![0.5; 4]).unwrap()
}

fn cand(v: &Vocab, prompt_id: &str, bins: &[usize]) -> Candidate {
    let mut ids: Vec<u32> = "abab"
        .chars()
        .zip(bins)
        .map(|(c, &b)| v.token_for(v.char_index(c).unwrap(), b))
        .collect();
    ids.push(v.eos());
    Candidate {
        prompt_id: prompt_id.into(),
        token_logprobs: vec![-1.0; ids.len()],
        token_ids: ids,
        terminated: true,
        seed: 0,
    }
}

fn tasks(n: usize, systems: (&str, &str)) -> Vec<NewTask> {
    let v = vocab();
    (0..n)
        .map(|i| {
            let p = prompt(i % 7);
            NewTask {
                first: cand(&v, &p.id, &[0, 3, 0, 3]),
                second: cand(&v, &p.id, &[1, 1, 1, (i % 4).min(2)]),
                prompt: p,
                first_system: systems.0.into(),
                second_system: systems.1.into(),
            }
        })
        .collect()
}

fn store_with(n: usize) -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    enqueue_round(dir.path(), 1, &tasks(n, ("sys-x", "sys-y")), 42).unwrap();
    let s = Store::open(dir.path(), vocab(), EloConfig::default()).unwrap();
    (dir, s)
}

fn take(s: &mut Store, annotator: &str, now: u64) -> TaskView {
    match s.next_pair(1, annotator, now).unwrap() {
        NextPair::Task { task, .. } => task,
        other => panic!("expected a task, got {other:?}"),
    }
}

fn vote(task: &TaskView, annotator: &str, choice: Choice) -> VoteRequest {
    VoteRequest {
        task_id: task.task_id.clone(),
        annotator_id: annotator.into(),
        choice,
    }
}

#[test]
fn first_pair_is_populated() {
    let (_d, mut s) = store_with(3);
    let t = take(&mut s, "ann", 0);
    assert_eq!(t.text, "abab");
    assert_eq!(t.side_a.transcript, "abab");
    assert_eq!(t.side_a.contour.len(), 4);
    assert_eq!(t.side_b.contour.len(), 4);
    assert_ne!(t.side_a.contour, t.side_b.contour);
    assert_eq!(t.expires_at_ms, TASK_TTL_MS);
}

#[test]
fn consecutive_requests_get_distinct_tasks() {
    let (_d, mut s) = store_with(3);
    let a = take(&mut s, "ann", 0);
    let b = take(&mut s, "ann", 0);
    assert_ne!(a.task_id, b.task_id);
}

#[test]
fn round_completes_after_every_vote() {
    let (_d, mut s) = store_with(3);
    for _ in 0..3 {
        let t = take(&mut s, "ann", 5);
        s.submit_vote(&vote(&t, "ann", Choice::A), 6).unwrap();
    }
    assert!(matches!(
        s.next_pair(1, "other", 7).unwrap(),
        NextPair::RoundComplete {
            progress: Progress { voted: 3, total: 3 },
            ..
        }
    ));
}

#[test]
fn waiting_while_others_hold_the_rest() {
    let (_d, mut s) = store_with(2);
    take(&mut s, "a1", 0);
    take(&mut s, "a2", 0);
    assert!(matches!(s.next_pair(1, "a3", 1).unwrap(), NextPair::Waiting { in_flight: 2, .. }));
}

#[test]
fn duplicate_vote_is_idempotent() {
    let (dir, mut s) = store_with(2);
    let t = take(&mut s, "ann", 0);
    let first = s.submit_vote(&vote(&t, "ann", Choice::B), 10).unwrap();
    let again = s.submit_vote(&vote(&t, "ann", Choice::B), 11).unwrap();
    assert_eq!(first, again);
    assert_eq!(s.pairs(1).unwrap().len(), 1);
    let journal = fs::read_to_string(journal_path(dir.path(), 1)).unwrap();
    assert_eq!(journal.lines().count(), 1);
    // A different choice for the same task is a conflict, not an overwrite.
    assert!(matches!(
        s.submit_vote(&vote(&t, "ann", Choice::A), 12),
        Err(ServiceError::Conflict { .. })
    ));
}

#[test]
fn expired_vote_conflicts_and_requeues() {
    let (_d, mut s) = store_with(1);
    let t = take(&mut s, "slow", 0);
    let err = s.submit_vote(&vote(&t, "slow", Choice::A), TASK_TTL_MS + 1).unwrap_err();
    assert!(matches!(err, ServiceError::Conflict { .. }), "{err}");
    let again = take(&mut s, "fast", TASK_TTL_MS + 2);
    assert_eq!(again.task_id, t.task_id);
    s.submit_vote(&vote(&again, "fast", Choice::A), TASK_TTL_MS + 3).unwrap();
}

#[test]
fn vote_by_someone_else_conflicts() {
    let (_d, mut s) = store_with(1);
    let t = take(&mut s, "owner", 0);
    assert!(matches!(
        s.submit_vote(&vote(&t, "intruder", Choice::A), 1),
        Err(ServiceError::Conflict { .. })
    ));
    assert!(matches!(
        s.submit_vote(
            &VoteRequest {
                task_id: "r1-t99999".into(),
                annotator_id: "owner".into(),
                choice: Choice::A
            },
            1
        ),
        Err(ServiceError::UnknownTask(_))
    ));
}

#[test]
fn choice_maps_back_through_the_hidden_side() {
    let (_d, mut s) = store_with(6);
    let v = vocab();
    for k in 0..6 {
        let t = take(&mut s, "ann", 0);
        s.submit_vote(&vote(&t, "ann", Choice::A), k).unwrap();
        let pair = s.pairs(1).unwrap().pop().unwrap();
        assert_eq!(env::pitch_contour(&pair.preferred, &v).unwrap(), t.side_a.contour);
        assert_eq!(pair.source, PairSource::Human);
        let rec = s.votes(1).unwrap().pop().unwrap();
        let task = &s.rounds[&1].tasks[s.rounds[&1].index[&t.task_id]];
        let shown_a = if task.first_is_a { &task.first_system } else { &task.second_system };
        assert_eq!(&rec.system_a, shown_a);
        assert_eq!(rec.winner, Winner::A);
    }
}

#[test]
fn export_refuses_incomplete_round_unless_partial() {
    let (dir, mut s) = store_with(200);
    for k in 0..150 {
        let t = take(&mut s, "ann", k);
        s.submit_vote(&vote(&t, "ann", Choice::A), k).unwrap();
    }
    match s.export(1, false) {
        Err(ServiceError::Incomplete { round: 1, missing: 50 }) => {}
        other => panic!("{other:?}"),
    }
    let sum = s.export(1, true).unwrap();
    assert_eq!((sum.count, sum.complete), (150, false));
    let first = fs::read(&sum.pairs_path).unwrap();
    let votes = fs::read(&sum.votes_path).unwrap();
    s.export(1, true).unwrap();
    assert_eq!(first, fs::read(&sum.pairs_path).unwrap());
    assert_eq!(votes, fs::read(&sum.votes_path).unwrap());
    let back = crate::dpo::read_pairs(&export_paths(dir.path(), 1).0).unwrap();
    assert_eq!(back.len(), 150);
}

#[test]
fn torn_journal_tail_is_dropped_on_replay() {
    let (dir, mut s) = store_with(3);
    for k in 0..2 {
        let t = take(&mut s, "ann", k);
        s.submit_vote(&vote(&t, "ann", Choice::B), k).unwrap();
    }
    drop(s);
    let jp = journal_path(dir.path(), 1);
    let mut f = OpenOptions::new().append(true).open(&jp).unwrap();
    f.write_all(br#"{"schema_version":1,"task_id":"r1-t0"#).unwrap();
    drop(f);
    let mut s = Store::open(dir.path(), vocab(), EloConfig::default()).unwrap();
    assert_eq!(s.progress(1).unwrap(), Progress { voted: 2, total: 3 });
    let t = take(&mut s, "ann", 10);
    s.submit_vote(&vote(&t, "ann", Choice::A), 11).unwrap();
    drop(s);
    let s = Store::open(dir.path(), vocab(), EloConfig::default()).unwrap();
    assert_eq!(s.progress(1).unwrap(), Progress { voted: 3, total: 3 });
}

#[test]
fn corrupt_interior_line_is_an_error() {
    let (dir, mut s) = store_with(2);
    let t = take(&mut s, "ann", 0);
    s.submit_vote(&vote(&t, "ann", Choice::B), 1).unwrap();
    drop(s);
    let jp = journal_path(dir.path(), 1);
    let body = fs::read_to_string(&jp).unwrap();
    fs::write(&jp, format!("not json\n{body}")).unwrap();
    assert!(matches!(
        Store::open(dir.path(), vocab(), EloConfig::default()),
        Err(ServiceError::Corrupt { line: 1, .. })
    ));
}

#[test]
fn leaderboard_matches_offline_aggregation() {
    let (_d, mut s) = store_with(40);
    for k in 0..40u64 {
        let t = take(&mut s, "ann", k);
        let c = if k % 3 == 0 { Choice::B } else { Choice::A };
        s.submit_vote(&vote(&t, "ann", c), 100 + k).unwrap();
    }
    let votes = s.votes(1).unwrap();
    let offline = elo::aggregate(&votes, &elo::systems_in(&votes), &EloConfig::default()).unwrap();
    assert_eq!(s.leaderboard().unwrap().rows, offline.leaderboard());
}

#[test]
fn same_system_pairs_make_no_vote_record() {
    let dir = tempfile::tempdir().unwrap();
    enqueue_round(dir.path(), 1, &tasks(2, ("same", "same")), 1).unwrap();
    let mut s = Store::open(dir.path(), vocab(), EloConfig::default()).unwrap();
    let t = take(&mut s, "ann", 0);
    s.submit_vote(&vote(&t, "ann", Choice::A), 1).unwrap();
    assert_eq!(s.pairs(1).unwrap().len(), 1);
    assert!(s.votes(1).unwrap().is_empty());
}

#[test]
fn enqueue_rejects_duplicates_and_bad_tasks() {
    let dir = tempfile::tempdir().unwrap();
    enqueue_round(dir.path(), 2, &tasks(1, ("x", "y")), 0).unwrap();
    assert!(matches!(
        enqueue_round(dir.path(), 2, &tasks(1, ("x", "y")), 0),
        Err(ServiceError::RoundExists(2))
    ));
    let mut bad = tasks(1, ("x", "y"));
    bad[0].second = bad[0].first.clone();
    assert!(matches!(enqueue_round(dir.path(), 3, &bad, 0), Err(ServiceError::BadTask(_))));
}

#[test]
fn side_assignment_is_balanced() {
    // Chi-square goodness of fit against a fair coin, 1 dof, 99.9% critical value.
    let dir = tempfile::tempdir().unwrap();
    let recs = enqueue_round(dir.path(), 1, &tasks(2000, ("x", "y")), 7).unwrap();
    let n_a = recs.iter().filter(|r| r.first_is_a).count() as f64;
    let e = 1000.0;
    let chi2 = (n_a - e).powi(2) / e + ((2000.0 - n_a) - e).powi(2) / e;
    assert!(chi2 < 10.828, "chi2 = {chi2}");
}

#[test]
fn task_payload_hides_identity() {
    let (_d, mut s) = store_with(4);
    let raw = serde_json::to_value(s.next_pair(1, "ann", 0).unwrap()).unwrap();
    let text = raw.to_string();
    for leak in [
        "sys-x",
        "sys-y",
        "first",
        "second",
        "system",
        "token_ids",
        "prompt_id",
        "seed",
        "logprob",
    ] {
        assert!(!text.contains(leak), "payload leaks {leak}: {text}");
    }
    let task = raw["task"].as_object().unwrap();
    let keys: Vec<&str> = task.keys().map(String::as_str).collect();
    assert_eq!(keys, ["expires_at_ms", "round", "side_a", "side_b", "task_id", "text"]);
}

struct TestClock(AtomicU64);

impl Clock for TestClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, serde_json::Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

#[tokio::test]
async fn http_round_trip() {
    let (_d, s) = store_with(2);
    let clock = Arc::new(TestClock(AtomicU64::new(1_000)));
    let app = router(AppState::new(s, clock.clone()));

    let (st, body) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["rounds"], serde_json::json!([1]));

    let (st, _) = call(&app, "GET", "/api/round/1/next", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, body) = call(&app, "GET", "/api/round/9/next?annotator=a", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(body["schema_version"], 1);

    let (st, body) = call(&app, "GET", "/api/round/1/next?annotator=a", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["status"], "task");
    let task_id = body["task"]["task_id"].as_str().unwrap().to_owned();

    let (st, body) = call(&app, "GET", "/api/round/1/export", None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!((err.error.as_str(), err.missing), ("incomplete", Some(2)));

    let v = serde_json::json!({"task_id": task_id, "annotator_id": "a", "choice": "B"});
    let (st, body) = call(&app, "POST", "/api/vote", Some(v.clone())).await;
    assert_eq!(st, StatusCode::OK, "{body}");
    assert_eq!(body["progress"]["voted"], 1);
    let (st, _) = call(&app, "POST", "/api/vote", Some(v)).await;
    assert_eq!(st, StatusCode::OK);

    let (st, _) = call(&app, "POST", "/api/vote", Some(serde_json::json!({"task_id": 3}))).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);

    // Let the next task expire before voting.
    let (_, body) = call(&app, "GET", "/api/round/1/next?annotator=a", None).await;
    let late = body["task"]["task_id"].as_str().unwrap().to_owned();
    clock.0.fetch_add(TASK_TTL_MS + 1, Ordering::SeqCst);
    let v = serde_json::json!({"task_id": late, "annotator_id": "a", "choice": "A"});
    let (st, _) = call(&app, "POST", "/api/vote", Some(v)).await;
    assert_eq!(st, StatusCode::CONFLICT);

    let (_, body) = call(&app, "GET", "/api/round/1/next?annotator=b", None).await;
    assert_eq!(body["task"]["task_id"], late.as_str());
    let v = serde_json::json!({"task_id": late, "annotator_id": "b", "choice": "A"});
    assert_eq!(call(&app, "POST", "/api/vote", Some(v)).await.0, StatusCode::OK);

    let (st, body) = call(&app, "GET", "/api/round/1/export", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["count"], 2);
    assert_eq!(body["complete"], true);

    let (st, body) = call(&app, "GET", "/api/leaderboard", None).await;
    assert_eq!(st, StatusCode::OK);
    let rows = body["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["n_votes"], 2);
}
