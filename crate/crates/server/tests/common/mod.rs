#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bm_core::encode_model;
use bm_core::protocol::{Hello, Joined, Message, Role, PROTOCOL_VERSION};
use bm_core::testkit::{brightness_model, grey_frame};
use bm_server::{AppState, Server, ServerConfig, SessionInfo};
use bm_sim::Client;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const TIMEOUT: Duration = Duration::from_secs(10);

/// P(bright) = sigmoid(4g) for a uniform frame of normalised grey level g.
pub fn write_model(dir: &Path) -> PathBuf {
    let path = dir.join("model.bmn");
    let model = brightness_model(&["dark", "bright"], &[0.0, 4.0], &[0.0, -4.0]);
    std::fs::write(&path, encode_model(&model)).unwrap();
    path
}

/// `dark/` and `bright/` with two PNGs each, plus a stray text file.
pub fn write_dataset(dir: &Path) -> PathBuf {
    let root = dir.join("dataset");
    for (label, levels) in [("dark", [10u8, 30]), ("bright", [220, 240])] {
        std::fs::create_dir_all(root.join(label)).unwrap();
        for level in levels {
            grey_frame(16, level)
                .save(root.join(label).join(format!("{label}-{level}.png")))
                .unwrap();
        }
    }
    std::fs::write(root.join("bright").join("notes.txt"), "not an image").unwrap();
    root
}

pub fn png(level: u8) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    grey_frame(64, level)
        .write_to(&mut out, image::ImageFormat::Png)
        .unwrap();
    out.into_inner()
}

pub struct Running {
    pub addr: SocketAddr,
    pub first: SessionInfo,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
    _dir: tempfile::TempDir,
}

impl Running {
    pub fn ws_url(&self) -> String {
        format!("ws://{}/rt", self.addr)
    }

    /// Stops the server and waits for it to finish.
    pub async fn stop(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(task) = self.task.take() {
            task.await.unwrap();
        }
    }
}

pub async fn start(tweak: impl FnOnce(&mut ServerConfig)) -> Running {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServerConfig::new(write_model(dir.path()));
    config.dataset = Some(write_dataset(dir.path()));
    config.bind = "127.0.0.1".parse().unwrap();
    config.port = 0;
    tweak(&mut config);
    let server = Server::bind(config).await.unwrap();
    let addr = server.local_addr();
    let first = server.first_session().clone();
    let state = server.state().clone();
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(server.run(async {
        let _ = rx.await;
    }));
    Running {
        addr,
        first,
        state,
        stop: Some(tx),
        task: Some(task),
        _dir: dir,
    }
}

pub async fn connect(server: &Running, name: &str) -> Client {
    Client::connect(&server.ws_url(), name, Instant::now(), TIMEOUT).await.unwrap()
}

pub fn student_hello(token: &str, name: &str) -> Message {
    Message::Hello(Hello {
        protocol_version: PROTOCOL_VERSION.into(),
        role: Role::Student,
        join_token: Some(token.into()),
        teacher_credential: None,
        display_name: Some(name.into()),
        avatar: None,
    })
}

pub fn teacher_hello(credential: &str) -> Message {
    Message::Hello(Hello {
        protocol_version: PROTOCOL_VERSION.into(),
        role: Role::Teacher,
        join_token: None,
        teacher_credential: Some(credential.into()),
        display_name: None,
        avatar: None,
    })
}

pub async fn joined(client: &mut Client) -> Joined {
    client
        .until("joined", |m| match m {
            Message::Joined(j) => Some(j.clone()),
            Message::Error(e) => panic!("refused: {e:?}"),
            _ => None,
        })
        .await
        .unwrap()
}

pub async fn join_student(server: &Running, token: &str, name: &str) -> (Client, Joined) {
    let mut c = connect(server, name).await;
    c.send(student_hello(token, name)).await.unwrap();
    let j = joined(&mut c).await;
    (c, j)
}

pub async fn join_teacher(server: &Running, credential: &str) -> (Client, Joined) {
    let mut c = connect(server, "teacher").await;
    c.send(teacher_hello(credential)).await.unwrap();
    let j = joined(&mut c).await;
    (c, j)
}

/// Waits for the reply to `seq`: the first error naming it, or the first
/// message `pick` accepts.
pub async fn reply<T>(client: &mut Client, seq: u64, mut pick: impl FnMut(&Message) -> Option<T>) -> Result<T, String> {
    client
        .until("reply", |m| match m {
            Message::Error(e) if e.in_reply_to == Some(seq) => Some(Err(e.code.as_str().to_owned())),
            other => pick(other).map(Ok),
        })
        .await
        .unwrap()
}

pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap()
    }
}

/// Minimal HTTP/1.1 GET; the server closes the connection after replying.
pub async fn http_get(addr: SocketAddr, path: &str, headers: &[(&str, &str)]) -> HttpResponse {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let mut request = format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n");
    for (k, v) in headers {
        request.push_str(&format!("{k}: {v}\r\n"));
    }
    request.push_str("\r\n");
    stream.write_all(request.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    tokio::time::timeout(TIMEOUT, stream.read_to_end(&mut raw))
        .await
        .unwrap()
        .unwrap();
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("header terminator");
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let mut body = raw[split + 4..].to_vec();
    let mut lines = head.lines();
    let status: u16 = lines.next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    let headers: Vec<(String, String)> = lines
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .collect();
    let chunked = headers
        .iter()
        .any(|(k, v)| k.eq_ignore_ascii_case("transfer-encoding") && v.contains("chunked"));
    if chunked {
        body = dechunk(&body);
    }
    HttpResponse { status, headers, body }
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let end = data.windows(2).position(|w| w == b"\r\n").unwrap();
        let size = usize::from_str_radix(std::str::from_utf8(&data[..end]).unwrap().trim(), 16).unwrap();
        data = &data[end + 2..];
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[..size]);
        data = &data[size + 2..];
    }
}

/// The `breakable-machine` binary running as a child process.
pub struct ServerProcess {
    pub child: std::process::Child,
    pub port: u16,
    pub teacher_url: String,
    pub join_url: String,
    /// Every stdout line read so far.
    pub stdout: Vec<String>,
    lines: std::sync::mpsc::Receiver<String>,
}

impl ServerProcess {
    pub fn binary() -> std::process::Command {
        std::process::Command::new(env!("CARGO_BIN_EXE_breakable-machine"))
    }

    /// Runs `serve` with `args` in `cwd` and waits for the first banner.
    pub fn serve(args: &[&str], cwd: &Path) -> Result<Self, String> {
        use std::io::BufRead;
        use std::process::Stdio;

        let mut child = Self::binary()
            .arg("serve")
            .args(args)
            .current_dir(cwd)
            .env_remove("BM_LOG_LEVEL")
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("cannot start server: {e}"))?;
        let stdout = child.stdout.take().unwrap();
        let (tx, lines) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            for line in std::io::BufReader::new(stdout).lines().map_while(Result::ok) {
                if tx.send(line).is_err() {
                    return;
                }
            }
        });
        let mut process = Self {
            child,
            port: 0,
            teacher_url: String::new(),
            join_url: String::new(),
            stdout: Vec::new(),
            lines,
        };
        while process.join_url.is_empty() {
            let line = process.next_line()?;
            let value = |prefix: &str| line.strip_prefix(prefix).map(|v| v.trim().to_owned());
            if let Some(port) = value("Port:") {
                process.port = port.parse().map_err(|_| format!("bad port line: {line}"))?;
            } else if let Some(url) = value("Teacher URL:") {
                process.teacher_url = url;
            } else if let Some(url) = value("Student join URL:") {
                process.join_url = url;
            }
        }
        Ok(process)
    }

    pub fn next_line(&mut self) -> Result<String, String> {
        match self.lines.recv_timeout(TIMEOUT) {
            Ok(line) => {
                self.stdout.push(line.clone());
                Ok(line)
            }
            Err(_) => {
                let _ = self.child.kill();
                let mut err = String::new();
                if let Some(mut stderr) = self.child.stderr.take() {
                    use std::io::Read;
                    let _ = stderr.read_to_string(&mut err);
                }
                Err(format!("server printed no more output; stdout {:?}, stderr {err}", self.stdout))
            }
        }
    }

    pub fn addr(&self) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], self.port))
    }

    /// Sends SIGINT and waits for the process to exit.
    pub fn interrupt(mut self) -> std::process::ExitStatus {
        let _ = std::process::Command::new("kill")
            .args(["-INT", &self.child.id().to_string()])
            .status();
        let deadline = Instant::now() + TIMEOUT;
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status;
            }
            if Instant::now() > deadline {
                let _ = self.child.kill();
                return self.child.wait().unwrap();
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Writes the default brightness model with the server's own `gen-model`.
pub fn gen_model(path: &Path) {
    let status = ServerProcess::binary()
        .args(["gen-model", "--out"])
        .arg(path)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success());
}
