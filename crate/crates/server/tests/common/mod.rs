#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::Method;
use s3m_core::facility::{FacilityDocument, ResourceConfig};
use s3m_core::mesh::{Mesh, MeshConfig, Services};
use s3m_core::policy::{AllocationSpec, PolicyDocument, ProjectSpec};
use s3m_core::scope::ScopeSet;
use s3m_core::time::{ManualClock, Timestamp};
use s3m_core::workflows::EngineConfig;
use serde_json::Value;
use tokio::sync::oneshot;

pub const T0: u64 = 1_700_000_000_000;

pub fn policy_doc() -> PolicyDocument {
    PolicyDocument {
        projects: vec![
            ProjectSpec::new(
                "proj-a",
                ["alice", "carol"],
                ["frontier", "defiant", "streaming"],
                [
                    AllocationSpec::new("frontier", 10_000.0),
                    AllocationSpec::new("defiant", 1_000.0),
                    AllocationSpec::new("streaming", 1_000.0),
                ],
            ),
            ProjectSpec::new(
                "proj-b",
                ["bob"],
                ["frontier", "streaming"],
                [
                    AllocationSpec::new("frontier", 5.0),
                    AllocationSpec::new("streaming", 48.0),
                ],
            ),
        ],
    }
}

pub fn facility_doc() -> FacilityDocument {
    FacilityDocument {
        resources: vec![
            ResourceConfig::compute("frontier", 64),
            ResourceConfig::compute("defiant", 8),
        ],
    }
}

pub fn config() -> MeshConfig {
    MeshConfig {
        policy: policy_doc(),
        facility: facility_doc(),
        engine: EngineConfig {
            poll_interval: Duration::from_millis(2),
            max_real_wait: Duration::from_secs(20),
            ..EngineConfig::default()
        },
        ..MeshConfig::default()
    }
}

/// HTTP server on an ephemeral port, backed by a mesh on a manual clock.
pub struct TestServer {
    pub base: String,
    pub clock: Arc<ManualClock>,
    pub mesh: Mesh,
    pub client: Client,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

pub struct Reply {
    pub status: u16,
    pub body: Value,
    pub trace_id: String,
}

impl TestServer {
    pub fn start(config: MeshConfig) -> Self {
        let clock = Arc::new(ManualClock::new(Timestamp::from_millis(T0)));
        let mesh = Mesh::new(config, clock.clone()).expect("mesh builds");
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        std_listener.set_nonblocking(true).unwrap();
        let base = format!("http://{}", std_listener.local_addr().unwrap());
        let gateway = Arc::clone(mesh.gateway());
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(4)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let tcp = tokio::net::TcpListener::from_std(std_listener).unwrap();
                s3m_server::serve(tcp, gateway, None, async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
            });
        });
        TestServer {
            base,
            clock,
            mesh,
            client: Client::builder().timeout(Duration::from_secs(30)).build().unwrap(),
            shutdown: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn s(&self) -> &Services {
        self.mesh.services()
    }

    pub fn admin_token(&self) -> String {
        self.mesh.admin_token().token.clone()
    }

    /// Mints a token without going through HTTP, so nothing is audited.
    pub fn token(&self, user: &str, project: &str, scopes: ScopeSet) -> String {
        let admin = self.s().tokens.validate(&self.mesh.admin_token().token).unwrap();
        self.s()
            .tokens
            .issue(&admin, user, project, scopes, None)
            .unwrap()
            .token
    }

    pub fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<&Value>) -> Reply {
        call(&self.client, &self.base, method, path, token, body)
    }

    /// Advances the clock by `step` and ticks every couple of milliseconds
    /// until the returned handle is dropped.
    pub fn drive(&self, step: Duration) -> Driver {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let clock = self.clock.clone();
        let services = self.mesh.services().clone();
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                clock.advance(step);
                services.tick();
                std::thread::sleep(Duration::from_millis(2));
            }
        });
        Driver {
            stop,
            thread: Some(thread),
        }
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn call(client: &Client, base: &str, method: &str, path: &str, token: Option<&str>, body: Option<&Value>) -> Reply {
    let mut req = client.request(Method::from_bytes(method.as_bytes()).unwrap(), format!("{base}{path}"));
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    if let Some(b) = body {
        req = req.json(b);
    }
    let resp = req.send().expect("request completes");
    let status = resp.status().as_u16();
    let trace_id = resp
        .headers()
        .get("x-trace-id")
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let bytes = resp.bytes().unwrap();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    Reply { status, body, trace_id }
}

pub struct Driver {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for Driver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
