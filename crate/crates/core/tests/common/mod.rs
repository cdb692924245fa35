#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use s3m_core::facility::{FacilityDocument, ResourceConfig};
use s3m_core::mesh::{Mesh, MeshConfig, Services};
use s3m_core::policy::{AllocationSpec, PolicyDocument, ProjectSpec};
use s3m_core::scope::{Scope, ScopeSet};
use s3m_core::time::{ManualClock, Timestamp};
use s3m_core::tokens::AuthContext;
use s3m_core::workflows::EngineConfig;

pub const T0: u64 = 1_700_000_000_000;

pub struct Fixture {
    pub clock: Arc<ManualClock>,
    pub mesh: Mesh,
}

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
            ResourceConfig::compute("orion", 0),
        ],
    }
}

impl Fixture {
    pub fn new() -> Self {
        Fixture::with_config(MeshConfig {
            policy: policy_doc(),
            facility: facility_doc(),
            engine: EngineConfig {
                poll_interval: Duration::from_millis(2),
                max_real_wait: Duration::from_secs(20),
                ..EngineConfig::default()
            },
            ..MeshConfig::default()
        })
    }

    pub fn with_config(config: MeshConfig) -> Self {
        let clock = Arc::new(ManualClock::new(Timestamp::from_millis(T0)));
        let mesh = Mesh::new(config, clock.clone()).expect("mesh builds");
        Fixture { clock, mesh }
    }

    pub fn s(&self) -> &Services {
        self.mesh.services()
    }

    pub fn admin(&self) -> AuthContext {
        self.s().tokens.validate(&self.mesh.admin_token().token).unwrap()
    }

    pub fn token(&self, user: &str, project: &str, scopes: &[Scope]) -> String {
        let scopes: ScopeSet = scopes.iter().copied().collect();
        self.s()
            .tokens
            .issue(&self.admin(), user, project, scopes, None)
            .unwrap()
            .token
    }

    pub fn ctx(&self, user: &str, project: &str, scopes: &[Scope]) -> AuthContext {
        self.s().tokens.validate(&self.token(user, project, scopes)).unwrap()
    }

    /// Every scope, for alice in proj-a.
    pub fn alice(&self) -> AuthContext {
        self.ctx("alice", "proj-a", &Scope::ALL)
    }

    /// Advances simulated time by `step` and ticks every couple of real
    /// milliseconds until the returned handle is dropped.
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

/// Polls `cond` until it holds or `timeout` passes.
pub fn eventually(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if cond() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    cond()
}
