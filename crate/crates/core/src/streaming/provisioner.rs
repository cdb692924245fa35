//! The deployment layer under the stream manager: allocates streaming nodes
//! from a fixed pool and stands up a broker per cluster. The manager only
//! talks to the [`BrokerProvisioner`] trait, so a backend driving a real
//! broker can replace [`EmbeddedProvisioner`].

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::broker::{Broker, BrokerConfig};

pub const ENDPOINT_SCHEME: &str = "s3m-stream://";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServiceFlavor {
    Rabbitmq,
    Redis,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeploymentSpec {
    pub project_id: String,
    pub cluster_name: String,
    pub flavor: ServiceFlavor,
    pub node_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProvisionError {
    #[error("insufficient streaming nodes: requested {requested}, available {available} of {pool}")]
    InsufficientNodes { requested: u32, available: u32, pool: u32 },
    #[error("endpoint {0} already deployed")]
    AlreadyDeployed(String),
}

pub trait BrokerProvisioner: Send + Sync + fmt::Debug {
    /// Deploys a broker and returns its endpoint locator.
    fn deploy(&self, spec: &DeploymentSpec) -> Result<String, ProvisionError>;

    /// Tears down the broker at `endpoint`, waking its consumers, and returns
    /// its nodes to the pool. Unknown endpoints are ignored.
    fn teardown(&self, endpoint: &str);

    fn resolve(&self, endpoint: &str) -> Option<Arc<Broker>>;

    /// Streaming nodes currently in use.
    fn nodes_in_use(&self) -> u32;
}

pub fn endpoint_for(project_id: &str, cluster_name: &str) -> String {
    format!("{ENDPOINT_SCHEME}{project_id}/{cluster_name}")
}

/// Splits an endpoint locator into `(project_id, cluster_name)`.
pub fn parse_endpoint(endpoint: &str) -> Option<(&str, &str)> {
    endpoint.strip_prefix(ENDPOINT_SCHEME)?.split_once('/')
}

#[derive(Debug, Default)]
struct Pool {
    used: u32,
    brokers: HashMap<String, (Arc<Broker>, u32)>,
}

#[derive(Debug)]
pub struct EmbeddedProvisioner {
    pool_nodes: u32,
    broker_config: BrokerConfig,
    pool: Mutex<Pool>,
}

impl EmbeddedProvisioner {
    pub fn new(pool_nodes: u32, broker_config: BrokerConfig) -> Self {
        EmbeddedProvisioner {
            pool_nodes,
            broker_config,
            pool: Mutex::default(),
        }
    }

    pub fn pool_nodes(&self) -> u32 {
        self.pool_nodes
    }
}

impl BrokerProvisioner for EmbeddedProvisioner {
    fn deploy(&self, spec: &DeploymentSpec) -> Result<String, ProvisionError> {
        let endpoint = endpoint_for(&spec.project_id, &spec.cluster_name);
        let mut pool = self.pool.lock();
        if pool.brokers.contains_key(&endpoint) {
            return Err(ProvisionError::AlreadyDeployed(endpoint));
        }
        let available = self.pool_nodes - pool.used;
        if spec.node_count > available {
            return Err(ProvisionError::InsufficientNodes {
                requested: spec.node_count,
                available,
                pool: self.pool_nodes,
            });
        }
        pool.used += spec.node_count;
        let broker = Arc::new(Broker::new(endpoint.clone(), self.broker_config));
        pool.brokers.insert(endpoint.clone(), (broker, spec.node_count));
        log::info!("deployed {:?} broker at {endpoint}", spec.flavor);
        Ok(endpoint)
    }

    fn teardown(&self, endpoint: &str) {
        let removed = {
            let mut pool = self.pool.lock();
            let removed = pool.brokers.remove(endpoint);
            if let Some((_, nodes)) = &removed {
                pool.used -= nodes;
            }
            removed
        };
        if let Some((broker, _)) = removed {
            broker.close();
        }
    }

    fn resolve(&self, endpoint: &str) -> Option<Arc<Broker>> {
        self.pool.lock().brokers.get(endpoint).map(|(b, _)| b.clone())
    }

    fn nodes_in_use(&self) -> u32 {
        self.pool.lock().used
    }
}
