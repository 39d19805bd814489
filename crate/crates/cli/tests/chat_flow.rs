//! Click an object, chat about it, fall back to view and scene questions.

mod common;

use common::*;
use convsplat_cli::codebook::{object_caption, view_caption, SCENE_CAPTION};
use convsplat_cli::service::ServiceOptions;
use serde_json::{json, Value};

async fn post(c: &reqwest::Client, url: &str, body: Value) -> (u16, Value) {
    let r = c.post(url).json(&body).send().await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

#[tokio::test]
async fn mock_chat_follows_selection() {
    let l = loaded(5, true);
    let n_cams = l.session.scene.cameras.len();
    let (t, _) = l.session.token_shape();
    let mut clicks = Vec::new();
    for cam in 0..n_cams {
        for m in 0..l.session.scene.object_count {
            if let Some(p) = pixel_of(&l, cam, m) {
                clicks.push((cam, m, p));
            }
        }
    }
    let bg = background_pixel(&l, 0);
    assert!(clicks.len() >= 2);
    let (base, _) = serve(Some(l), ServiceOptions::default()).await;
    let c = reqwest::Client::new();
    let (select, chat) = (format!("{base}/select"), format!("{base}/chat"));

    for (cam, m, (x, y)) in clicks {
        let (s, sel) = post(&c, &select, json!({"cam": cam, "x": x, "y": y})).await;
        assert_eq!(s, 200);
        assert_eq!(sel["object_id"], m);
        let (s, reply) = post(
            &c,
            &chat,
            json!({"level": "object", "cams": [cam], "object_id": sel["object_id"], "question": "what is this?"}),
        )
        .await;
        assert_eq!(s, 200, "{reply}");
        assert_eq!(reply["answer"], format!("[object] {}", object_caption(m)));
        assert_eq!(reply["backend"], "mock");
        assert_eq!(reply["tokens_used"], t);
    }

    // a background click leaves nothing to ask about at object level
    let (_, sel) = post(&c, &select, json!({"cam": 0, "x": bg.0, "y": bg.1})).await;
    assert_eq!(sel["object_id"], Value::Null);
    let (s, _) = post(
        &c,
        &chat,
        json!({"level": "object", "cams": [0], "object_id": sel["object_id"], "question": "what is this?"}),
    )
    .await;
    assert_eq!(s, 400);

    for cam in 0..n_cams {
        let (s, reply) = post(&c, &chat, json!({"level": "view", "cams": [cam], "question": "describe"})).await;
        assert_eq!(s, 200);
        assert_eq!(reply["answer"], format!("[view] {}", view_caption(cam)));
        assert_eq!(reply["tokens_used"], t);
    }
    let all: Vec<usize> = (0..n_cams).collect();
    let (s, reply) = post(&c, &chat, json!({"level": "scene", "cams": all, "question": "describe"})).await;
    assert_eq!(s, 200);
    assert_eq!(reply["answer"], format!("[scene] {SCENE_CAPTION}"));
    assert_eq!(reply["tokens_used"], t * n_cams);
}
