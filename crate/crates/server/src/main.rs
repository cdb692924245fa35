use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use s3m_core::mesh::{Mesh, MeshConfig, DEFAULT_STREAMING_NODES};
use s3m_core::time::SystemClock;
use s3m_core::tokens::SigningKey;
use s3m_server::{load_facility, load_policy, serve, tls_config, BIND_ENV, DEFAULT_BIND};

/// Token-scoped gateway over simulated facility, compute, streaming and workflow services.
#[derive(Debug, Parser)]
#[command(name = "s3m", version)]
struct Args {
    /// Listen address.
    #[arg(long, env = BIND_ENV, default_value = DEFAULT_BIND)]
    bind: SocketAddr,

    /// Policy document (projects, members, resource ACLs, allocations).
    #[arg(long)]
    policy_file: Option<PathBuf>,

    /// Facility document (resources, node counts, environments).
    #[arg(long)]
    facility_file: Option<PathBuf>,

    /// Scheduler and lease housekeeping period in milliseconds.
    #[arg(long, default_value_t = 500)]
    tick_ms: u64,

    /// Nodes available to streaming clusters.
    #[arg(long, default_value_t = DEFAULT_STREAMING_NODES)]
    streaming_nodes: u32,

    /// Token lifetime in seconds when a request gives none.
    #[arg(long, default_value_t = 8 * 3600)]
    token_ttl_secs: u64,

    /// File holding the HMAC signing key. A random key is generated when absent,
    /// which invalidates all tokens on restart.
    #[arg(long)]
    signing_key_file: Option<PathBuf>,

    /// Write the bootstrap admin token here instead of printing it.
    #[arg(long)]
    admin_token_out: Option<PathBuf>,

    /// Mirror every audit record to this file as JSON Lines.
    #[arg(long)]
    audit_log: Option<PathBuf>,

    /// PEM certificate chain; enables TLS together with --tls-key.
    #[arg(long, requires = "tls_key")]
    tls_cert: Option<PathBuf>,

    /// PEM private key.
    #[arg(long, requires = "tls_cert")]
    tls_key: Option<PathBuf>,
}

fn write_secret(path: &PathBuf, contents: &str) -> std::io::Result<()> {
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    writeln!(f, "{contents}")
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    anyhow::ensure!(args.tick_ms > 0, "--tick-ms must be positive");
    let tick = Duration::from_millis(args.tick_ms);

    let mut config = MeshConfig {
        token_ttl: Duration::from_secs(args.token_ttl_secs),
        streaming_nodes: args.streaming_nodes,
        ..MeshConfig::default()
    };
    config.engine.poll_interval = tick;
    if let Some(p) = &args.policy_file {
        config.policy = load_policy(p)?;
    }
    if let Some(p) = &args.facility_file {
        config.facility = load_facility(p)?;
    }
    if let Some(p) = &args.signing_key_file {
        let raw = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let key = raw.trim_ascii();
        anyhow::ensure!(
            key.len() >= 16,
            "signing key in {} is shorter than 16 bytes",
            p.display()
        );
        config.signing_key = Some(SigningKey::new(key));
    }
    let tls = match (&args.tls_cert, &args.tls_key) {
        (Some(c), Some(k)) => Some(tls_config(c, k)?),
        _ => None,
    };

    let clock = Arc::new(SystemClock);
    let mesh = match &args.audit_log {
        Some(p) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening audit log {}", p.display()))?;
            Mesh::with_audit_sink(config, clock, Box::new(std::io::LineWriter::new(file)))?
        }
        None => Mesh::new(config, clock)?,
    };

    match &args.admin_token_out {
        Some(p) => {
            write_secret(p, &mesh.admin_token().token).with_context(|| format!("writing {}", p.display()))?;
            log::info!("admin token written to {}", p.display());
        }
        None => println!("{}", mesh.admin_token().token),
    }

    let _ticker = mesh.start_ticker(tick);
    let tcp = tokio::net::TcpListener::bind(args.bind)
        .await
        .with_context(|| format!("binding {}", args.bind))?;
    log::info!(
        "listening on {}://{}",
        if tls.is_some() { "https" } else { "http" },
        tcp.local_addr()?
    );
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        log::info!("shutting down");
    };
    serve(tcp, Arc::clone(mesh.gateway()), tls, shutdown).await?;
    Ok(())
}
