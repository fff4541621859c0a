mod common;

use bm_core::protocol::{ByeReason, Control, ErrorCode, FrameSubmit, Message, Role, ScopeKind, MAX_FRAME_BYTES, PROTOCOL_VERSION};
use bm_core::session::Reveal;
use bm_core::testkit::{brightness_model, grey_frame, noise_frame};
use common::*;

fn frame(level: u8, ts: u64) -> Message {
    Message::FrameSubmit(FrameSubmit {
        image: png(level),
        client_ts: ts,
    })
}

fn error_code(m: &Message) -> Option<ErrorCode> {
    match m {
        Message::Error(e) => Some(e.code),
        _ => None,
    }
}

async fn bye(client: &mut bm_sim::Client) -> bm_core::protocol::Bye {
    client
        .until("bye", |m| match m {
            Message::Bye(b) => Some(b.clone()),
            _ => None,
        })
        .await
        .unwrap()
}

#[tokio::test]
async fn student_score_matches_reference_forward() {
    let server = start(|c| c.session.reveal = Reveal::Top(3)).await;
    let (mut student, joined) = join_student(&server, &server.first.join_token, "ada").await;
    assert_eq!(joined.role, Role::Student);
    assert_eq!(joined.snapshot.labels, vec!["dark", "bright"]);
    assert!(joined.snapshot.roster.is_none());
    let player = joined.player_id.clone().unwrap();

    let seq = student.send(frame(200, 42)).await.unwrap();
    let score = reply(&mut student, seq, |m| match m {
        Message::Score(s) => Some(s.clone()),
        _ => None,
    })
    .await
    .unwrap();

    let model = brightness_model(&["dark", "bright"], &[0.0, 4.0], &[0.0, -4.0]);
    let input = bm_oracle::preprocess(&grey_frame(64, 200), model.input_size());
    let want = bm_oracle::forward(&model, &input).probs[0];
    assert!((score.confidence as f64 - want).abs() < 1e-4, "{} vs {want}", score.confidence);
    assert_eq!(score.client_ts, Some(42));
    assert!(score.is_new_best);
    assert_eq!(score.challenge.label_name, "dark");
    assert!(score.cam_grid.is_none() && score.heatmap_png.is_none(), "heatmaps start disabled");

    // the teacher sees the same score on the board
    let (mut teacher, tj) = join_teacher(&server, &server.first.teacher_key).await;
    let board = tj.snapshot.board.unwrap();
    assert_eq!(board.rows.len(), 1);
    assert_eq!(board.rows[0].player_id, player);
    assert_eq!(board.rows[0].confidence, Some(score.confidence));
    assert!(!board.rows[0].thumbnail.is_empty());
    teacher.close().await;
    server.stop().await;
}

#[tokio::test]
async fn heatmap_png_follows_the_teacher_toggle() {
    let server = start(|_| {}).await;
    let (mut teacher, _) = join_teacher(&server, &server.first.teacher_key).await;
    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;
    let seq = teacher.send(Message::Control(Control::SetHeatmap { enabled: true })).await.unwrap();
    reply(&mut teacher, seq, |m| matches!(m, Message::Flags(f) if f.heatmap_enabled).then_some(())).await.unwrap();
    student.barrier().await.unwrap();
    let mut wide = std::io::Cursor::new(Vec::new());
    noise_frame(3, 640, 480).write_to(&mut wide, image::ImageFormat::Png).unwrap();
    for (bytes, size) in [(png(100), (64, 64)), (wide.into_inner(), (224, 168))] {
        let seq = student
            .send(Message::FrameSubmit(FrameSubmit { image: bytes, client_ts: 1 }))
            .await
            .unwrap();
        let score = reply(&mut student, seq, |m| match m {
            Message::Score(s) => Some(s.clone()),
            _ => None,
        })
        .await
        .unwrap();
        assert_eq!((score.cam_height, score.cam_width), (Some(7), Some(7)));
        let grid = score.cam_grid.unwrap();
        assert_eq!(grid.len(), 49);
        assert!(grid.iter().all(|v| (0.0..=1.0).contains(v)));
        let overlay = image::load_from_memory(&score.heatmap_png.expect("heatmap enabled")).unwrap();
        assert_eq!((overlay.width(), overlay.height()), size);
    }
    server.stop().await;
}

#[tokio::test]
async fn frames_beyond_the_rate_are_refused() {
    let server = start(|c| c.frame_rate = 2.0).await;
    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;
    let mut seqs = Vec::new();
    for ts in 0..6 {
        seqs.push(student.send(frame(120, ts)).await.unwrap());
    }
    let (mut scored, mut limited) = (0, 0);
    for seq in seqs {
        match reply(&mut student, seq, |m| matches!(m, Message::Score(_)).then_some(())).await {
            Ok(()) => scored += 1,
            Err(code) => {
                assert_eq!(code, "E_RATE_LIMITED");
                limited += 1;
            }
        }
    }
    assert!(scored >= 2, "burst is allowed");
    assert!(limited >= 1, "scored {scored}");
    server.stop().await;
}

#[tokio::test]
async fn role_checks() {
    let server = start(|_| {}).await;
    let (mut teacher, tj) = join_teacher(&server, &server.first.teacher_key).await;
    assert_eq!(tj.role, Role::Teacher);
    assert!(tj.snapshot.roster.is_some());
    assert!(tj.next_teacher_credential.is_some());
    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;

    let seq = student.send(Message::Control(Control::SetPause { paused: true })).await.unwrap();
    assert_eq!(reply(&mut student, seq, |_| None::<()>).await, Err("E_NOT_TEACHER".into()));

    let seq = teacher.send(frame(120, 0)).await.unwrap();
    assert_eq!(reply(&mut teacher, seq, |_| None::<()>).await, Err("E_SEQUENCE".into()));

    let seq = teacher
        .send(Message::Control(Control::SetChallenge {
            label_index: 9,
            scope: ScopeKind::All,
            player_ids: None,
        }))
        .await
        .unwrap();
    assert_eq!(reply(&mut teacher, seq, |_| None::<()>).await, Err("E_INVALID_LABEL".into()));

    let seq = teacher
        .send(Message::Control(Control::SetChallenge {
            label_index: 1,
            scope: ScopeKind::Players,
            player_ids: Some(vec!["nobody".into()]),
        }))
        .await
        .unwrap();
    assert_eq!(reply(&mut teacher, seq, |_| None::<()>).await, Err("E_UNKNOWN_PLAYER".into()));

    // the connection survives all of the above
    student.barrier().await.unwrap();
    teacher.barrier().await.unwrap();
    server.stop().await;
}

#[tokio::test]
async fn malformed_frames_get_errors_and_the_connection_continues() {
    let server = start(|_| {}).await;
    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;
    student.send_raw("{not json".into()).await.unwrap();
    let code = student.until("error", error_code).await.unwrap();
    assert_eq!(code, ErrorCode::Malformed);

    student.send_raw(r#"{"type":"teleport","seq":50}"#.into()).await.unwrap();
    let code = student.until("error", error_code).await.unwrap();
    assert_eq!(code, ErrorCode::UnknownType);

    student.send_raw(r#"{"type":"frame_submit","seq":51}"#.into()).await.unwrap();
    let code = student.until("error", error_code).await.unwrap();
    assert_eq!(code, ErrorCode::Schema);

    let huge = format!(
        r#"{{"type":"frame_submit","seq":52,"client_ts":0,"image":"{}"}}"#,
        "A".repeat(MAX_FRAME_BYTES + 16)
    );
    student.send_raw(huge).await.unwrap();
    let code = student.until("error", error_code).await.unwrap();
    assert_eq!(code, ErrorCode::Oversize);

    let garbage = Message::FrameSubmit(FrameSubmit {
        image: b"definitely not a png".to_vec(),
        client_ts: 0,
    });
    let seq = student.send(garbage).await.unwrap();
    assert_eq!(reply(&mut student, seq, |_| None::<()>).await, Err("E_BAD_FRAME".into()));

    student.barrier().await.unwrap();
    assert!(!student.closed);
    server.stop().await;
}

#[tokio::test]
async fn wrong_version_gets_error_then_bye() {
    let server = start(|_| {}).await;
    let mut c = connect(&server, "old").await;
    let bytes = bm_core::protocol::encode(&bm_core::protocol::Envelope::new(1, student_hello(&server.first.join_token, "old"))).unwrap();
    let mut hello: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    hello["protocol_version"] = "0.1".into();
    assert_ne!(PROTOCOL_VERSION, "0.1");
    c.send_raw(hello.to_string()).await.unwrap();
    let code = c.until("error", error_code).await.unwrap();
    assert_eq!(code, ErrorCode::Version);
    assert_eq!(bye(&mut c).await.reason, ByeReason::ProtocolError);
    assert_eq!(c.recv().await.unwrap(), None);
    server.stop().await;
}

#[tokio::test]
async fn refused_handshakes_close_the_connection() {
    let server = start(|c| c.session.max_players = 1).await;

    let mut c = connect(&server, "lost").await;
    c.send(student_hello("no-such-token", "lost")).await.unwrap();
    assert_eq!(c.until("error", error_code).await.unwrap(), ErrorCode::UnknownToken);
    assert_eq!(c.recv().await.unwrap(), None);

    let mut c = connect(&server, "blank").await;
    c.send(student_hello(&server.first.join_token, "   ")).await.unwrap();
    assert_eq!(c.until("error", error_code).await.unwrap(), ErrorCode::InvalidName);

    let _first = join_student(&server, &server.first.join_token, "ada").await;
    let mut c = connect(&server, "late").await;
    c.send(student_hello(&server.first.join_token, "late")).await.unwrap();
    assert_eq!(c.until("error", error_code).await.unwrap(), ErrorCode::Capacity);

    let mut c = connect(&server, "early").await;
    c.send(frame(120, 0)).await.unwrap();
    assert_eq!(c.until("error", error_code).await.unwrap(), ErrorCode::Sequence);
    server.stop().await;
}

#[tokio::test]
async fn teacher_credentials_are_single_use() {
    let server = start(|_| {}).await;
    let original = server.first.teacher_key.clone();
    let (mut first, joined) = join_teacher(&server, &original).await;
    let next = joined.next_teacher_credential.unwrap();
    assert_ne!(next, original);

    let mut replay = connect(&server, "replay").await;
    replay.send(teacher_hello(&original)).await.unwrap();
    assert_eq!(replay.until("error", error_code).await.unwrap(), ErrorCode::Auth);

    let (mut second, j2) = join_teacher(&server, &next).await;
    assert_eq!(j2.session_id, joined.session_id);
    first.barrier().await.unwrap();
    second.barrier().await.unwrap();
    server.stop().await;
}

#[tokio::test]
async fn pause_refuses_frames_until_resume() {
    let server = start(|_| {}).await;
    let (mut teacher, _) = join_teacher(&server, &server.first.teacher_key).await;
    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;

    let seq = teacher.send(Message::Control(Control::SetPause { paused: true })).await.unwrap();
    reply(&mut teacher, seq, |m| matches!(m, Message::Pause(p) if p.paused).then_some(())).await.unwrap();
    student.barrier().await.unwrap();
    assert!(student.view.as_ref().unwrap().snapshot.paused);

    let seq = student.send(frame(30, 0)).await.unwrap();
    assert_eq!(reply(&mut student, seq, |m| matches!(m, Message::Score(_)).then_some(())).await, Err("E_PAUSED".into()));

    let seq = teacher.send(Message::Control(Control::SetPause { paused: false })).await.unwrap();
    reply(&mut teacher, seq, |m| matches!(m, Message::Pause(p) if !p.paused).then_some(())).await.unwrap();
    student.barrier().await.unwrap();
    let seq = student.send(frame(30, 1)).await.unwrap();
    reply(&mut student, seq, |m| matches!(m, Message::Score(_)).then_some(())).await.unwrap();
    server.stop().await;
}

#[tokio::test]
async fn reveal_hides_confidences_below_the_cut() {
    let server = start(|_| {}).await;
    let (mut teacher, _) = join_teacher(&server, &server.first.teacher_key).await;
    let mut students = Vec::new();
    for (name, level) in [("ada", 20u8), ("bo", 60), ("cy", 100)] {
        let (mut s, _) = join_student(&server, &server.first.join_token, name).await;
        let seq = s.send(frame(level, 0)).await.unwrap();
        reply(&mut s, seq, |m| matches!(m, Message::Score(_)).then_some(())).await.unwrap();
        students.push(s);
    }
    let seq = teacher
        .send(Message::Control(Control::SetReveal { reveal: Reveal::Top(1) }))
        .await
        .unwrap();
    reply(&mut teacher, seq, |m| matches!(m, Message::Board(b) if b.reveal == Reveal::Top(1)).then_some(())).await.unwrap();
    teacher.barrier().await.unwrap();
    let rows = teacher.view.as_ref().unwrap().snapshot.board.clone().unwrap().rows;
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].display_name, "ada", "darkest frame wins the dark challenge");
    assert!(rows[0].confidence.is_some());
    assert!(rows[1..].iter().all(|r| r.confidence.is_none()));
    assert!(rows.iter().all(|r| !r.thumbnail.is_empty()));

    // the board lives on the teacher's screen only
    for s in &mut students {
        s.barrier().await.unwrap();
        assert!(s.view.as_ref().unwrap().snapshot.board.is_none());
        assert!(s.log.iter().all(|r| r.kind != "board"));
    }
    server.stop().await;
}

#[tokio::test]
async fn ending_a_session_says_bye_and_hands_over_a_new_credential() {
    let server = start(|_| {}).await;
    let (mut teacher, _) = join_teacher(&server, &server.first.teacher_key).await;
    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;
    let seq = student.send(frame(200, 0)).await.unwrap();
    reply(&mut student, seq, |m| matches!(m, Message::Score(_)).then_some(())).await.unwrap();
    assert!(server.state.introspect().retained_images > 0);

    teacher.send(Message::Control(Control::EndSession)).await.unwrap();
    let teacher_bye = bye(&mut teacher).await;
    assert_eq!(teacher_bye.reason, ByeReason::SessionEnded);
    let next = teacher_bye.next_teacher_credential.expect("replacement credential");
    let student_bye = bye(&mut student).await;
    assert_eq!(student_bye.reason, ByeReason::SessionEnded);
    assert!(student_bye.next_teacher_credential.is_none());
    assert_eq!(student.recv().await.unwrap(), None);

    let after = server.state.introspect();
    assert_eq!(after.retained_images, 0);
    assert_eq!(after.sessions, 1);

    // the old join link is dead, the new credential works
    let mut late = connect(&server, "late").await;
    late.send(student_hello(&server.first.join_token, "late")).await.unwrap();
    assert_eq!(late.until("error", error_code).await.unwrap(), ErrorCode::UnknownToken);
    let (_, j) = join_teacher(&server, &next).await;
    assert!(j.snapshot.board.unwrap().rows.is_empty());
    server.stop().await;
}

#[tokio::test]
async fn shutdown_says_bye_to_everyone() {
    let server = start(|_| {}).await;
    let (mut teacher, _) = join_teacher(&server, &server.first.teacher_key).await;
    let (mut student, _) = join_student(&server, &server.first.join_token, "ada").await;
    let stopping = tokio::spawn(server.stop());
    assert_eq!(bye(&mut teacher).await.reason, ByeReason::ServerShutdown);
    assert_eq!(bye(&mut student).await.reason, ByeReason::ServerShutdown);
    tokio::time::timeout(std::time::Duration::from_secs(10), stopping)
        .await
        .expect("server stops")
        .unwrap();
}
