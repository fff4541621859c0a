mod common;

use common::{gen_model, http_get, ServerProcess};

#[test]
fn missing_model_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.bmn");
    let out = ServerProcess::binary()
        .args(["serve", "--port", "0", "--bind", "127.0.0.1", "--model"])
        .arg(&missing)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(missing.to_str().unwrap()), "{stderr}");
}

#[test]
fn corrupt_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bmn");
    std::fs::write(&path, b"BMN1 but not really").unwrap();
    let out = ServerProcess::binary()
        .args(["serve", "--port", "0", "--bind", "127.0.0.1", "--model"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.bmn"));
}

#[test]
fn public_bind_addresses_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bmn");
    gen_model(&model);
    let out = ServerProcess::binary()
        .args(["serve", "--port", "0", "--bind", "8.8.8.8", "--model"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("8.8.8.8"));
}

#[test]
fn serve_prints_port_and_urls() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bmn");
    gen_model(&model);
    let server = ServerProcess::serve(
        &["--model", model.to_str().unwrap(), "--port", "0", "--bind", "127.0.0.1", "--reveal", "2", "--max-players", "3"],
        dir.path(),
    )
    .unwrap();
    assert_ne!(server.port, 0);
    let base = format!("http://127.0.0.1:{}", server.port);
    let token = server.join_url.strip_prefix(&format!("{base}/join/")).expect("join URL format");
    assert!(token.len() >= 22 && token.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'));
    assert!(server.teacher_url.starts_with(&format!("{base}/#teacher=")));

    let rt = tokio::runtime::Runtime::new().unwrap();
    let page = rt.block_on(http_get(server.addr(), &format!("/join/{token}"), &[]));
    assert_eq!(page.status, 200);
    assert_eq!(server.interrupt().code(), Some(0));
}

#[test]
fn gen_model_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bmn");
    let out = ServerProcess::binary()
        .args(["gen-model", "--kind", "random", "--labels", "cat,dog,fish", "--seed", "9", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let model = bm_server::load_model(&path).unwrap();
    assert_eq!(model.labels(), ["cat", "dog", "fish"]);
    assert_eq!(model.feature_shape(), (32, 7, 7));
}

#[test]
fn port_in_use_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.bmn");
    gen_model(&model);
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = ServerProcess::binary()
        .args(["serve", "--bind", "127.0.0.1", "--port", &port, "--model"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(&port));
}
