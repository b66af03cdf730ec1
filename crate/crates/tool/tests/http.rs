use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use gd_core::image_io::encode_png;
use gd_core::scene::default_universe;
use gd_core::segment::segment;
use gd_core::session::{render_seed, Session};
use gd_tool::commands::{build_state, load_model, ModelArgs, RankingArg};
use gd_tool::server::{router, AppState};

const PLANTED: u64 = 1;

fn state() -> Arc<AppState> {
    static STATE: OnceLock<Arc<AppState>> = OnceLock::new();
    STATE
        .get_or_init(|| {
            let m = load_model(&ModelArgs {
                model: None,
                planted: Some(PLANTED),
            })
            .unwrap();
            Arc::new(build_state(m, default_universe(), RankingArg::Iou).unwrap())
        })
        .clone()
}

async fn call(method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

fn png(v: &Value) -> Vec<u8> {
    base64::engine::general_purpose::STANDARD
        .decode(v.as_str().unwrap())
        .unwrap()
}

async fn new_session(seed: u64) -> (String, Vec<u8>) {
    let (status, v) = call("POST", "/api/session", Some(json!({ "seed": seed }))).await;
    assert_eq!(status, StatusCode::CREATED);
    (v["session_id"].as_str().unwrap().to_string(), png(&v["image"]))
}

/// First seed with a featuremap cell whose 3x3 neighbourhood is entirely
/// `concept`, so a wide stroke there stays inside it.
fn find_cell(concept: &str) -> (u64, (usize, usize)) {
    let st = state();
    let uni = default_universe();
    for seed in 0..200 {
        let img = render_seed(&st.net, seed).unwrap();
        let seg = segment(&img, &uni).unwrap();
        let full = |y: usize, x: usize| seg.mask(concept).unwrap().count_in(y * 8, y * 8 + 8, x * 8, x * 8 + 8) == 64;
        let cell = (1..7)
            .flat_map(|y| (1..7).map(move |x| (y, x)))
            .find(|&(y, x)| (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| full(yy, xx))));
        if let Some(c) = cell {
            return (seed, c);
        }
    }
    panic!("no seed with a solid {concept} block");
}

fn paint(op: &str, concept: &str, cell: (usize, usize)) -> Value {
    json!({
        "op": op,
        "concept": concept,
        "brush": { "points": [[cell.1 * 8 + 4, cell.0 * 8 + 4]], "radius": 8 },
    })
}

#[tokio::test]
async fn meta_lists_concepts_and_sizes() {
    let (status, v) = call("GET", "/api/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let concepts: Vec<&str> = v["concepts"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    for c in ["door", "tree", "sky"] {
        assert!(concepts.contains(&c), "{concepts:?}");
        assert_eq!(v["unit_sets"][c].as_array().unwrap().len(), 20);
    }
    assert_eq!(v["image_size"], json!([64, 64]));
}

#[tokio::test]
async fn fresh_session_matches_command_line_render() {
    let (_, image) = new_session(5).await;
    assert_eq!(image, encode_png(&render_seed(&state().net, 5).unwrap()).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.png");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_gd"))
        .args(["render", "--planted", &PLANTED.to_string(), "--seed", "5", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read(out).unwrap(), image);
}

#[tokio::test]
async fn door_on_building_appears_and_undo_restores() {
    let (seed, building) = find_cell("building");
    let (id, before) = new_session(seed).await;
    let (status, v) = call("POST", &format!("/api/session/{id}/edit"), Some(paint("insert", "door", building))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert!(v["delta_stats"]["door"].as_i64().unwrap() > 0, "{v}");
    assert_eq!(v["visible"], json!(true));
    assert_ne!(png(&v["image"]), before);
    assert_eq!(v["depth"], json!(1));

    let (status, t) = call("GET", &format!("/api/session/{id}/trace"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(t["profile"].as_array().unwrap().iter().any(|p| p.as_f64().unwrap() > 0.0));

    let (status, u) = call("POST", &format!("/api/session/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(png(&u["image"]), before);
    assert_eq!(u["depth"], json!(0));
}

#[tokio::test]
async fn door_on_sky_is_vetoed() {
    let (seed, sky) = find_cell("sky");
    let (id, before) = new_session(seed).await;
    let (status, v) = call("POST", &format!("/api/session/{id}/edit"), Some(paint("insert", "door", sky))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["delta_stats"]["door"], json!(0));
    assert_eq!(v["visible"], json!(false));
    let after = png(&v["image"]);
    let (_, _, a) = gd_core::image_io::decode_png(&after).unwrap();
    let (_, _, b) = gd_core::image_io::decode_png(&before).unwrap();
    let changed = a.iter().zip(&b).filter(|(x, y)| x.abs_diff(**y) > 8).count();
    assert!(changed < 10, "{changed} bytes changed");
}

#[tokio::test]
async fn exported_session_replays_to_the_same_image() {
    let (seed, building) = find_cell("building");
    let (id, _) = new_session(seed).await;
    call("POST", &format!("/api/session/{id}/edit"), Some(paint("insert", "door", building))).await;
    let (_, v) = call("POST", &format!("/api/session/{id}/edit"), Some(paint("ablate", "sky", (0, 0)))).await;
    let (status, exported) = call("GET", &format!("/api/session/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let session = Session::from_json(&exported.to_string()).unwrap();
    assert_eq!(session.edits.len(), 2);
    let replayed = encode_png(&session.replay(&state().net).unwrap()).unwrap();
    assert_eq!(replayed, png(&v["image"]));
}

#[tokio::test]
async fn errors_are_json_with_codes() {
    let (status, v) = call("POST", "/api/session/nope/edit", Some(json!({"op": "undo"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], json!("unknown-session"));
    assert!(v["message"].is_string());

    let (status, _) = call("GET", "/api/session/nope/trace", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (id, _) = new_session(1).await;
    let edit = format!("/api/session/{id}/edit");
    let bad = json!({"op": "insert", "concept": "door", "brush": {"points": [[64, 3]], "radius": 2}});
    let (status, v) = call("POST", &edit, Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], json!("invalid-edit"));
    assert_eq!(v["field"], json!("brush.points"));

    let (status, v) = call("POST", &edit, Some(json!({"op": "insert", "concept": "lava", "brush": {"points": [[3, 3]], "radius": 1}}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], json!("concept"));

    let (status, v) = call("POST", &edit, Some(json!({"op": "teleport"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], json!("invalid-json"));

    let (status, v) = call("POST", &format!("/api/session/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], json!("empty-stack"));

    let (status, v) = call("GET", &format!("/api/session/{id}/trace"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], json!("no-edit"));
}

#[tokio::test]
async fn reset_clears_the_stack() {
    let (seed, building) = find_cell("building");
    let (id, before) = new_session(seed).await;
    let edit = format!("/api/session/{id}/edit");
    call("POST", &edit, Some(paint("insert", "door", building))).await;
    call("POST", &edit, Some(paint("insert", "tree", (7, 0)))).await;
    let (status, v) = call("POST", &edit, Some(json!({"op": "reset"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["depth"], json!(0));
    assert_eq!(png(&v["image"]), before);
}
