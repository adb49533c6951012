mod common;

use std::sync::Arc;

use axum::http::{Method, StatusCode};
use common::{quiz_script, strip_ts, Client, GatedProvider};
use learnflow_core::exemplars::{DEBATE, QUIZ_DRILL, TEAM_DEBATE_3V3};
use learnflow_core::gateway::StubProvider;
use serde_json::{json, Value};

fn words(n: usize) -> String {
    vec!["word"; n].join(" ")
}

fn team_b_ai() -> Value {
    json!({"b1": "ai", "b2": "ai", "b3": "ai"})
}

#[tokio::test]
async fn flow_registration_statuses() {
    let client = Client::stub(Vec::new());
    let (status, body) = client.post_flow(QUIZ_DRILL).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["id"], "quiz-drill");
    assert_eq!(body["report"]["ok"], true);

    let (status, body) = client.post_flow(QUIZ_DRILL).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "DuplicateFlow");

    let (status, doc) = client.get("/v1/flows/quiz-drill", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(doc["id"], "quiz-drill");
    assert_eq!(doc["steps"].as_array().unwrap().len(), 11);

    let (status, body) = client.get("/v1/flows/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "UnknownFlow");
}

#[tokio::test]
async fn invalid_flows_are_rejected_with_their_report() {
    let client = Client::stub(Vec::new());
    let mut doc: Value = serde_json::from_str(QUIZ_DRILL).unwrap();
    doc["id"] = json!("reversed");
    doc["steps"][8]["range"] = json!(["8", "4"]);
    let reversed = doc.to_string();
    let (status, body) = client.post_flow(&reversed).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let codes: Vec<&str> = body["details"]["report"]["diagnostics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["code"].as_str().unwrap())
        .collect();
    assert!(codes.contains(&"ReversedRange"), "{codes:?}");
    assert_eq!(client.get("/v1/flows/reversed", None).await.0, StatusCode::NOT_FOUND);

    let (status, body) = client.post_flow("{not json").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["code"].is_string() && body["message"].is_string());
}

#[tokio::test]
async fn session_creation_statuses() {
    let client = Client::stub(Vec::new());
    let (status, body) = client.post("/v1/sessions", None, json!({"flow_id": "missing"})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "UnknownFlow");

    client.post_flow(TEAM_DEBATE_3V3).await;
    let (status, body) = client
        .post(
            "/v1/sessions",
            None,
            json!({"flow_id": "team-debate-3v3", "roster_overrides": {"instructor": "ai"}}),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "IllegalToggle");

    let (status, body) = client.post("/v1/sessions", None, json!({"nothing": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
}

#[tokio::test]
async fn team_b_as_ai_issues_four_tokens() {
    let client = Client::stub(Vec::new());
    let (_, tokens) = client.start(TEAM_DEBATE_3V3, team_b_ai()).await;
    assert_eq!(tokens.keys().collect::<Vec<_>>(), ["a1", "a2", "a3", "instructor"]);
    for token in tokens.values() {
        assert_eq!(token.len(), 32);
        assert!(token.chars().all(|c| c.is_ascii_hexdigit()));
    }
    let (_, all_human) = client.start(TEAM_DEBATE_3V3, json!({})).await;
    assert_eq!(all_human.len(), 7);
    assert!(all_human.values().all(|t| !tokens.values().any(|u| u == t)));
}

#[tokio::test]
async fn input_statuses() {
    let client = Client::stub(Vec::new());
    let (sid, tokens) = client.start(TEAM_DEBATE_3V3, json!({})).await;
    let state = client.settle(&sid, &tokens["instructor"]).await;
    assert_eq!(state["status"]["slot_id"], "a1");
    let input = format!("/v1/sessions/{sid}/input");

    let (status, body) = client.post(&input, Some(&tokens["b1"]), json!({"content": "hi"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "NotYourTurn");

    let (status, _) = client.post(&input, Some("0123"), json!({"content": "hi"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = client.post(&input, None, json!({"content": "hi"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = client
        .post("/v1/sessions/s-missing/input", Some(&tokens["a1"]), json!({"content": "hi"}))
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = client.post(&input, Some(&tokens["a1"]), json!({"content": words(121)})).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "WordLimitExceeded");
    assert_eq!(body["details"]["limit"], 120);
    assert_eq!(body["details"]["actual"], 121);

    let before = client.state(&sid, &tokens["instructor"]).await["last_seq"].as_u64().unwrap();
    let (status, body) = client.post(&input, Some(&tokens["a1"]), json!({"content": words(120)})).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["seq"], before + 1);
    let state = client.settle(&sid, &tokens["instructor"]).await;
    assert_eq!(state["status"]["slot_id"], "b1");
}

#[tokio::test]
async fn event_feeds_follow_visibility() {
    let mut script = vec!["Topic: remote work.".to_string()];
    script.extend((0..6).map(|i| format!("reply {i}")));
    let client = Client::stub(script);
    let (sid, tokens) = client.start(DEBATE, json!({})).await;
    let instructor = &tokens["instructor"];
    let learner = &tokens["learner-1"];
    client.settle(&sid, instructor).await;

    let all = client.events(&sid, instructor, 0).await;
    let last = client.state(&sid, instructor).await["last_seq"].as_u64().unwrap();
    assert_eq!(all.len() as u64, last);
    assert!(all.iter().enumerate().all(|(i, e)| e["seq"] == i as u64 + 1));
    assert!(all.iter().any(|e| e["step_id"] == "4" && e["kind"] == "agent_response"));

    let mine = client.events(&sid, learner, 0).await;
    assert!(!mine.iter().any(|e| e["step_id"] == "4"));
    let expected: Vec<Value> = all
        .iter()
        .filter(|e| e["visibility"].as_array().unwrap().iter().any(|v| v == "learner-1"))
        .cloned()
        .collect();
    assert_eq!(mine, expected);
    assert!(client.events(&sid, instructor, last).await.is_empty());
    assert_eq!(
        client.get(&format!("/v1/sessions/{sid}/events?since=0"), Some("bad")).await.0,
        StatusCode::UNAUTHORIZED
    );
    assert_eq!(
        client.get("/v1/sessions/s-none/events?since=0", Some(instructor)).await.0,
        StatusCode::NOT_FOUND
    );

    // A waiting reader wakes up when the learner answers.
    let waiter = {
        let client = client.clone();
        let sid = sid.clone();
        let instructor = instructor.clone();
        tokio::spawn(async move {
            client
                .get(&format!("/v1/sessions/{sid}/events?since={last}&wait=10"), Some(&instructor))
                .await
        })
    };
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    let (status, _) = client
        .post(&format!("/v1/sessions/{sid}/input"), Some(learner), json!({"content": "Cities gain."}))
        .await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = waiter.await.unwrap();
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["events"][0]["seq"], last + 1);
    assert_eq!(body["events"][0]["content"], "Cities gain.");
}

#[tokio::test]
async fn controls_need_the_instructor() {
    let client = Client::stub(Vec::new());
    let (sid, tokens) = client.start(TEAM_DEBATE_3V3, json!({})).await;
    client.settle(&sid, &tokens["instructor"]).await;
    let control = format!("/v1/sessions/{sid}/control");
    let (status, body) = client.post(&control, Some(&tokens["a1"]), json!({"action": "end"})).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["code"], "Forbidden");
    let (status, _) = client.post(&control, Some("bad"), json!({"action": "end"})).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _) = client
        .post(&control, Some(&tokens["instructor"]), json!({"action": "override_response", "text": "x"}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = client.post(&control, Some(&tokens["instructor"]), json!({"action": "dance"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = client
        .post(&control, Some(&tokens["instructor"]), json!({"action": "advance", "text": "(absent)"}))
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let state = client.settle(&sid, &tokens["instructor"]).await;
    assert_eq!(state["status"]["slot_id"], "b1");
    let events = client.events(&sid, &tokens["instructor"], 0).await;
    assert!(events.iter().any(|e| e["step_id"] == "3-1" && e["content"] == "(absent)"));
}

#[tokio::test]
async fn override_replaces_an_in_flight_agent_response() {
    let gate = Arc::new(GatedProvider::new(StubProvider::from_responses(quiz_script())));
    let client = Client::new(gate.clone());
    let (sid, tokens) = client.start(QUIZ_DRILL, json!({})).await;
    let instructor = &tokens["instructor"];
    client
        .wait_until(&sid, instructor, |s| s["status"]["state"] == "awaiting_agent")
        .await;
    let (status, body) = client
        .post(
            &format!("/v1/sessions/{sid}/control"),
            Some(instructor),
            json!({"action": "override_response", "text": "Which species is a keystone predator?"}),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let state = client.settle(&sid, instructor).await;
    assert_eq!(state["status"]["slot_id"], "learner-1");
    gate.open();

    let feed = client.events(&sid, &tokens["learner-1"], 0).await;
    let question: Vec<&Value> = feed.iter().filter(|e| e["step_id"] == "5").collect();
    assert_eq!(question.len(), 1);
    assert_eq!(question[0]["content"], "Which species is a keystone predator?");

    // The late provider result is discarded.
    tokio::time::sleep(std::time::Duration::from_millis(100)).await;
    let after = client.events(&sid, instructor, 0).await;
    assert_eq!(after.iter().filter(|e| e["step_id"] == "5").count(), 1);
    assert_eq!(client.state(&sid, instructor).await["status"]["slot_id"], "learner-1");
}

#[tokio::test]
async fn ending_mid_loop_stops_the_session() {
    let client = Client::stub(quiz_script());
    let (sid, tokens) = client.start(QUIZ_DRILL, json!({})).await;
    let instructor = &tokens["instructor"];
    let input = format!("/v1/sessions/{sid}/input");
    for i in 0..3 {
        client.settle(&sid, instructor).await;
        let (status, _) = client.post(&input, Some(&tokens["learner-1"]), json!({"content": format!("a{i}")})).await;
        assert_eq!(status, StatusCode::OK);
    }
    let state = client.settle(&sid, instructor).await;
    assert_eq!(state["loop_frames"][0]["iteration"], 3);
    let (status, body) = client
        .post(&format!("/v1/sessions/{sid}/control"), Some(instructor), json!({"action": "end"}))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"]["state"], "ended_by_instructor");
    let last = client.state(&sid, instructor).await["last_seq"].clone();

    let (status, body) = client.post(&input, Some(&tokens["learner-1"]), json!({"content": "late"})).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "SessionEnded");
    let (status, _) = client
        .post(&format!("/v1/sessions/{sid}/control"), Some(instructor), json!({"action": "skip_step"}))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(client.state(&sid, instructor).await["last_seq"], last);
}

#[tokio::test]
async fn request_ids_make_retries_safe() {
    let client = Client::stub(Vec::new());
    let (sid, tokens) = client.start(TEAM_DEBATE_3V3, json!({})).await;
    let instructor = &tokens["instructor"];
    client.settle(&sid, instructor).await;
    let body = json!({"content": "Opening.", "request_id": "r-1"}).to_string();
    let uri = format!("/v1/sessions/{sid}/input");
    let first = client.raw(Method::POST, &uri, Some(&tokens["a1"]), &[], body.clone()).await;
    let second = client.raw(Method::POST, &uri, Some(&tokens["a1"]), &[], body).await;
    assert_eq!(first.0, StatusCode::OK);
    assert_eq!(first, second);
    let events = client.events(&sid, instructor, 0).await;
    assert_eq!(events.iter().filter(|e| e["content"] == "Opening.").count(), 1);

    // Header form, on session creation.
    let create = json!({"flow_id": "team-debate-3v3"}).to_string();
    let headers = [("request_id", "create-7")];
    let a = client.raw(Method::POST, "/v1/sessions", None, &headers, create.clone()).await;
    let b = client.raw(Method::POST, "/v1/sessions", None, &headers, create).await;
    assert_eq!(a.0, StatusCode::CREATED);
    assert_eq!(a, b);

    let control = json!({"action": "end"}).to_string();
    let headers = [("request-id", "end-1")];
    let uri = format!("/v1/sessions/{sid}/control");
    let a = client.raw(Method::POST, &uri, Some(instructor), &headers, control.clone()).await;
    let b = client.raw(Method::POST, &uri, Some(instructor), &headers, control).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
}

#[tokio::test]
async fn state_hides_event_content() {
    let client = Client::stub(vec!["Topic: the secret motion".into()]);
    let (sid, tokens) = client.start(DEBATE, json!({})).await;
    let state = client.settle(&sid, &tokens["learner-1"]).await;
    assert_eq!(state["flow_id"], "debate");
    assert!(!state.to_string().contains("secret"));
    assert_eq!(client.get("/v1/sessions/s-x/state", Some("t")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sse_and_long_poll_agree_on_the_quiz() {
    let client = Client::stub(quiz_script());
    let (sid, tokens) = client.start(QUIZ_DRILL, json!({})).await;
    let readers: Vec<_> = ["instructor", "learner-1"]
        .into_iter()
        .map(|slot| {
            let client = client.clone();
            let sid = sid.clone();
            let token = tokens[slot].clone();
            tokio::spawn(async move { (client.stream(&sid, &token).await, client.long_poll_all(&sid, &token).await) })
        })
        .collect();
    let end = client.play(&sid, &tokens, |_, n| format!("b) answer {n}")).await;
    assert_eq!(end["status"]["state"], "completed");

    for (slot, reader) in ["instructor", "learner-1"].into_iter().zip(readers) {
        let (sse, polled) = reader.await.unwrap();
        assert!(!sse.is_empty());
        assert_eq!(strip_ts(&sse), strip_ts(&polled), "{slot}");
        let seqs: Vec<u64> = sse.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(polled, client.events(&sid, &tokens[slot], 0).await);
    }
    let all = client.events(&sid, &tokens["instructor"], 0).await;
    assert_eq!(all.iter().filter(|e| e["step_id"] == "5").count(), 10);
    assert_eq!(all.iter().filter(|e| e["step_id"] == "11").count(), 1);

    // A late subscriber replays the finished session and closes.
    let late = client.stream(&sid, &tokens["learner-1"]).await;
    assert_eq!(late, client.events(&sid, &tokens["learner-1"], 0).await);
}

#[tokio::test]
async fn stream_resumes_after_last_event_id() {
    let client = Client::stub(quiz_script());
    let (sid, tokens) = client.start(QUIZ_DRILL, json!({})).await;
    client.play(&sid, &tokens, |_, _| "a".into()).await;
    let token = &tokens["instructor"];
    let (status, bytes) = client
        .raw(
            Method::GET,
            &format!("/v1/sessions/{sid}/stream"),
            Some(token),
            &[("last-event-id", "40")],
            String::new(),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.contains("id: 41") || text.contains("id:41"));
    let frames = common::sse_data(&text);
    assert_eq!(frames, client.events(&sid, token, 40).await);
}
