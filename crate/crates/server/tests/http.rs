mod common;

use bm_core::protocol::{Control, Message};
use bm_server::{Introspection, JOIN_TOKEN_HEADER, TEACHER_KEY_HEADER};
use common::*;

#[tokio::test]
async fn index_and_join_pages() {
    let server = start(|_| {}).await;
    let index = http_get(server.addr, "/", &[]).await;
    assert_eq!(index.status, 200);
    assert!(index.header("content-type").unwrap().starts_with("text/html"));

    let join = http_get(server.addr, &format!("/join/{}", server.first.join_token), &[]).await;
    assert_eq!(join.status, 200);
    assert_eq!(join.body, index.body);

    let bogus = http_get(server.addr, "/join/not-a-token", &[]).await;
    assert_eq!(bogus.status, 404);
    assert_eq!(bogus.json()["code"], "E_UNKNOWN_TOKEN");
    server.stop().await;
}

#[tokio::test]
async fn urls_follow_the_printed_format() {
    let server = start(|_| {}).await;
    let base = format!("http://127.0.0.1:{}", server.addr.port());
    assert_eq!(server.first.join_url, format!("{base}/join/{}", server.first.join_token));
    assert_eq!(server.first.teacher_url, format!("{base}/#teacher={}", server.first.teacher_key));
    let banner = bm_server::session_banner(&server.first);
    assert!(banner.contains(&server.first.join_url));
    assert!(banner.contains(&server.first.teacher_key));
    server.stop().await;
}

#[tokio::test]
async fn regenerating_the_token_retires_the_old_join_url() {
    let server = start(|_| {}).await;
    let old = server.first.join_token.clone();
    let (mut teacher, _) = join_teacher(&server, &server.first.teacher_key).await;
    let seq = teacher.send(Message::Control(Control::RegenerateToken)).await.unwrap();
    let info = reply(&mut teacher, seq, |m| match m {
        Message::JoinInfo(i) => Some(i.clone()),
        _ => None,
    })
    .await
    .unwrap();
    assert_ne!(info.join_token, old);
    assert!(info.join_url.ends_with(&format!("/join/{}", info.join_token)));

    assert_eq!(http_get(server.addr, &format!("/join/{old}"), &[]).await.status, 404);
    assert_eq!(http_get(server.addr, &format!("/join/{}", info.join_token), &[]).await.status, 200);
    server.stop().await;
}

#[tokio::test]
async fn dataset_requires_credentials_and_unlock() {
    let server = start(|_| {}).await;
    let token = server.first.join_token.clone();
    let key = server.first.teacher_key.clone();

    let none = http_get(server.addr, "/dataset", &[]).await;
    assert_eq!(none.status, 401);
    assert_eq!(none.json()["code"], "E_AUTH");

    let unknown = http_get(server.addr, "/dataset?token=nope", &[]).await;
    assert_eq!(unknown.status, 403);
    assert_eq!(unknown.json()["code"], "E_UNKNOWN_TOKEN");

    let bad_key = http_get(server.addr, "/dataset?key=nope", &[]).await;
    assert_eq!(bad_key.status, 401);

    let locked = http_get(server.addr, &format!("/dataset?token={token}"), &[]).await;
    assert_eq!(locked.status, 403);
    assert_eq!(locked.json()["code"], "E_DATASET_LOCKED");

    // the teacher always has access
    let teacher = http_get(server.addr, "/dataset", &[(TEACHER_KEY_HEADER, &key)]).await;
    assert_eq!(teacher.status, 200);
    let labels: Vec<String> = teacher.json()["labels"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["label_name"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(labels.len(), 2);
    assert!(labels.contains(&"dark".to_owned()) && labels.contains(&"bright".to_owned()));

    let (mut t, _) = join_teacher(&server, &key).await;
    let seq = t.send(Message::Control(Control::SetDatasetUnlock { enabled: true })).await.unwrap();
    reply(&mut t, seq, |m| match m {
        Message::Flags(f) if f.dataset_unlocked => Some(()),
        _ => None,
    })
    .await
    .unwrap();

    let open = http_get(server.addr, "/dataset", &[(JOIN_TOKEN_HEADER, &token)]).await;
    assert_eq!(open.status, 200);
    assert_eq!(open.json(), teacher.json());

    let seq = t.send(Message::Control(Control::SetDatasetUnlock { enabled: false })).await.unwrap();
    reply(&mut t, seq, |m| match m {
        Message::Flags(f) if !f.dataset_unlocked => Some(()),
        _ => None,
    })
    .await
    .unwrap();
    assert_eq!(http_get(server.addr, &format!("/dataset?token={token}"), &[]).await.status, 403);
    server.stop().await;
}

#[tokio::test]
async fn dataset_label_and_image_bytes() {
    let server = start(|_| {}).await;
    let key = server.first.teacher_key.clone();
    let auth = [(TEACHER_KEY_HEADER, key.as_str())];

    let label = http_get(server.addr, "/dataset/bright", &auth).await;
    assert_eq!(label.status, 200);
    let body = label.json();
    assert_eq!(body["label_name"], "bright");
    let refs: Vec<&str> = body["image_refs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(refs.len(), 2, "non-images are skipped: {refs:?}");

    let image = http_get(server.addr, &format!("/dataset/bright/{}", refs[0]), &auth).await;
    assert_eq!(image.status, 200);
    assert_eq!(image.header("content-type"), Some("image/png"));
    assert_eq!(image.header("cache-control"), Some("no-store"));
    let on_disk = image::load_from_memory(&image.body).unwrap().to_rgb8();
    assert_eq!(on_disk.width(), 16);

    let missing_label = http_get(server.addr, "/dataset/purple", &auth).await;
    assert_eq!(missing_label.status, 404);
    assert_eq!(missing_label.json()["code"], "E_NOT_FOUND");

    let missing_image = http_get(server.addr, "/dataset/bright/none.png", &auth).await;
    assert_eq!(missing_image.status, 404);
    assert_eq!(missing_image.json()["code"], "E_NOT_FOUND");

    let stray = http_get(server.addr, "/dataset/bright/notes.txt", &auth).await;
    assert_eq!(stray.status, 404);

    for path in [
        "/dataset/bright/..%2F..%2Fmodel.bmn",
        "/dataset/..%2Fmodel.bmn/x.png",
        "/dataset/bright/%2E%2E",
    ] {
        let r = http_get(server.addr, path, &auth).await;
        assert_eq!(r.status, 404, "{path}");
    }
    server.stop().await;
}

#[tokio::test]
async fn introspection_counts_connections_and_images() {
    let server = start(|_| {}).await;
    let before: Introspection = serde_json::from_value(http_get(server.addr, "/introspect", &[]).await.json()).unwrap();
    assert_eq!(before.sessions, 1);
    assert_eq!(before.retained_images, 0);
    assert_eq!(before.open_connections, 0);
    assert_eq!(before.rejected_non_local, 0);

    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;
    let seq = student
        .send(Message::FrameSubmit(bm_core::protocol::FrameSubmit {
            image: png(200),
            client_ts: 1,
        }))
        .await
        .unwrap();
    reply(&mut student, seq, |m| matches!(m, Message::Score(_)).then_some(())).await.unwrap();
    student.barrier().await.unwrap();

    let during = server.state.introspect();
    assert_eq!(during.open_connections, 1);
    assert!(during.retained_images >= 1);
    assert!(during.accepted_connections >= 2);

    server.state.shut_down();
    assert_eq!(server.state.introspect().retained_images, 0);
    server.stop().await;
}
