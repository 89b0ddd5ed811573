use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use homewire::channel::ChannelConfig;
use homewire::feed::{FeedClient, FeedConfig, FeedService};
use homewire::http::{Clock, HttpClient, HttpServer, SimClock, WallClock};
use homewire::hub::HubConfig;
use homewire::intent::{IntentEngine, Lexicon, LookupTable};
use homewire::node::NodeConfig;
use homewire::protocol::{ControlAck, Frame, FrameType, InitAck};
use homewire::scenario::{run_scenario, RunOptions, Scenario, EXIT_ASSERT, EXIT_INVALID};
use homewire::server::{ControlServer, ServerConfig};
use homewire::sim::{Sim, Step};
use homewire::trace::{replay_check, ReplayResult};

#[derive(Parser)]
#[command(name = "homewire", version, about = "Feed-driven home automation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and print the final report.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Serve the feed and control server on real sockets.
        #[arg(long)]
        networked: bool,
    },
    /// Run the intent pipeline on one post.
    Parse {
        text: String,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        no_failsafe: bool,
    },
    /// Frame utilities.
    Frame {
        #[command(subcommand)]
        command: FrameCommand,
    },
    /// Compare two traces, ignoring wall-clock metadata.
    ReplayCheck { a: PathBuf, b: PathBuf },
    /// Serve the control server API.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also serve a mock feed at the configured feed URL.
        #[arg(long)]
        with_feed: bool,
    },
    /// Serve only the mock feed.
    Feed {
        #[arg(long, default_value_t = 8081)]
        port: u16,
    },
    /// Publish a post to a running mock feed.
    Post {
        text: String,
        #[arg(long, default_value = "http://127.0.0.1:8081")]
        feed_url: String,
        #[arg(long, default_value = "alice")]
        author: String,
    },
    /// Run a hub and simulated nodes in real time against a control server.
    /// Type `reinit` on stdin to re-initialize the network.
    Hub {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server_url: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ack_timeout: Option<u64>,
        #[arg(long)]
        retries: Option<u32>,
        /// Force re-initialization on the next cycle.
        #[arg(long)]
        reinit: bool,
        /// JSON list of node configs; two light+fan nodes when omitted.
        #[arg(long)]
        nodes: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        loss: f64,
        /// Stop after this many milliseconds.
        #[arg(long)]
        duration_ms: Option<u64>,
    },
}

#[derive(Subcommand)]
enum FrameCommand {
    /// Decode a hex frame and print its fields.
    Decode { hex: String },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INVALID as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Run { scenario, seed, trace, networked } => run(&scenario, seed, trace.as_deref(), networked),
        Command::Parse { text, table, lexicon, no_failsafe } => parse(&text, table, lexicon, no_failsafe),
        Command::Frame { command: FrameCommand::Decode { hex } } => decode(&hex),
        Command::ReplayCheck { a, b } => replay(&a, &b),
        Command::Serve { config, with_feed } => serve(config.as_deref(), with_feed),
        Command::Feed { port } => feed(port),
        Command::Post { text, feed_url, author } => {
            let id = FeedClient::inject(&mut HttpClient::new(feed_url), &author, &text)?;
            println!("{}", serde_json::json!({ "id": id }));
            Ok(0)
        }
        Command::Hub { server_url, seed, ack_timeout, retries, reinit, nodes, loss, duration_ms } => {
            let mut config = HubConfig { server_url, ..HubConfig::default() };
            if let Some(t) = ack_timeout {
                config.ack_timeout_ms = t;
            }
            if let Some(r) = retries {
                config.max_retries = r;
            }
            let channel = ChannelConfig { loss_probability: loss, seed, ..ChannelConfig::default() };
            hub(config, channel, nodes.as_deref(), reinit, duration_ms)
        }
    }
}

fn run(path: &Path, seed: Option<u64>, trace: Option<&Path>, networked: bool) -> Result<i32> {
    let scenario = match Scenario::load(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return Ok(e.exit_code());
        }
    };
    let outcome = match run_scenario(&scenario, &RunOptions { seed, networked }) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return Ok(e.exit_code());
        }
    };
    if let Some(p) = trace {
        outcome.trace.write_to(p).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&outcome.report)?);
    if let Some(f) = &outcome.report.first_failure {
        eprintln!("{f}");
    }
    Ok(outcome.report.exit_code)
}

fn parse(text: &str, table: Option<PathBuf>, lexicon: Option<PathBuf>, no_failsafe: bool) -> Result<i32> {
    let table = match table {
        Some(p) => LookupTable::load(&p)?,
        None => LookupTable::default(),
    };
    let lexicon = match lexicon {
        Some(p) => Lexicon::load(&p)?,
        None => Lexicon::bundled(),
    };
    let mut engine = IntentEngine::new(table, lexicon);
    engine.failsafe_enabled = !no_failsafe;
    let (_, trace) = engine.process_post(text);
    println!("{}", serde_json::to_string_pretty(&trace)?);
    Ok(0)
}

fn decode(hex_text: &str) -> Result<i32> {
    let cleaned: String = hex_text.chars().filter(|c| !c.is_whitespace()).collect();
    let bytes = hex::decode(&cleaned).context("not valid hex")?;
    let frame = match Frame::decode(&bytes) {
        Ok(f) => f,
        Err(e) => {
            println!("{}", serde_json::json!({ "error": e.to_string() }));
            return Ok(EXIT_ASSERT);
        }
    };
    let payload = match frame.ftype {
        FrameType::InitAck => InitAck::parse(&frame.payload)
            .map(|a| serde_json::json!({ "node": a.node, "appliances": a.appliances }))
            .unwrap_or_else(|e| serde_json::json!({ "error": e.to_string() })),
        FrameType::ControlAck => ControlAck::parse(&frame.payload)
            .map(|a| {
                serde_json::json!({
                    "appliance": a.appliance, "opcode": a.opcode, "status": a.status as u8, "on": a.on, "level": a.level,
                })
            })
            .unwrap_or_else(|e| serde_json::json!({ "error": e.to_string() })),
        FrameType::Control => serde_json::json!({
            "appliance": frame.payload[0], "opcode": frame.payload[1], "value": frame.payload[2],
        }),
        FrameType::Init => serde_json::json!({}),
    };
    let out = serde_json::json!({
        "ftype": frame.ftype.to_string(),
        "src": frame.src,
        "dst": frame.dst,
        "seq": frame.seq,
        "payload": payload,
        "summary": frame.to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn replay(a: &Path, b: &Path) -> Result<i32> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    match replay_check(&read(a)?, &read(b)?) {
        ReplayResult::Identical { lines } => {
            println!("identical ({lines} lines)");
            Ok(0)
        }
        ReplayResult::Diverged { line, left, right } => {
            println!("diverged at line {line}");
            println!("< {}", left.as_deref().unwrap_or("<end of trace>"));
            println!("> {}", right.as_deref().unwrap_or("<end of trace>"));
            Ok(EXIT_ASSERT)
        }
    }
}

fn serve(config_path: Option<&Path>, with_feed: bool) -> Result<i32> {
    let config: ServerConfig = match config_path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => ServerConfig::default(),
    };
    let clock: Arc<dyn Clock> = Arc::new(WallClock::default());
    let _feed_server = if with_feed {
        let bind = config.feed_url.trim_start_matches("http://").to_string();
        let feed = Arc::new(Mutex::new(FeedService::new(FeedConfig::default())));
        let srv = HttpServer::spawn(&bind, feed, clock.clone()).map_err(|e| anyhow::anyhow!("feed bind {bind}: {e}"))?;
        eprintln!("mock feed on {}", srv.url());
        Some(srv)
    } else {
        None
    };
    let table = match &config.table_path {
        Some(p) => LookupTable::load(p)?,
        None => LookupTable::default(),
    };
    let lexicon = match &config.lexicon_path {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::bundled(),
    };
    let mut engine = IntentEngine::new(table, lexicon);
    engine.failsafe_enabled = config.failsafe_enabled;
    let feed_link = Box::new(HttpClient::new(config.feed_url.clone()));
    let (period, requeue) = (config.poll_period_ms, config.requeue_timeout_ms);
    let bind = format!("0.0.0.0:{}", config.listen_port);
    let server = Arc::new(Mutex::new(ControlServer::open(config, engine, feed_link)?));
    let http = HttpServer::spawn(&bind, Arc::clone(&server), clock.clone()).map_err(|e| anyhow::anyhow!("bind {bind}: {e}"))?;
    eprintln!("control server on {}", http.url());
    loop {
        let now = clock.now_ms();
        {
            let mut s = server.lock().expect("server lock");
            if let Err(e) = s.ingest_cycle(now) {
                tracing::warn!(error = %e, "ingest failed");
            }
            if let Err(e) = s.requeue_stale(requeue, now) {
                tracing::warn!(error = %e, "requeue failed");
            }
            for ev in s.take_events() {
                println!("{}", serde_json::to_string(&ev)?);
            }
        }
        std::thread::sleep(Duration::from_millis(period));
    }
}

fn feed(port: u16) -> Result<i32> {
    let feed = Arc::new(Mutex::new(FeedService::new(FeedConfig::default())));
    let bind = format!("0.0.0.0:{port}");
    let srv = HttpServer::spawn(&bind, feed, Arc::new(WallClock::default())).map_err(|e| anyhow::anyhow!("bind {bind}: {e}"))?;
    eprintln!("mock feed on {}", srv.url());
    loop {
        std::thread::park();
    }
}

fn hub(config: HubConfig, channel: ChannelConfig, nodes: Option<&Path>, reinit: bool, duration_ms: Option<u64>) -> Result<i32> {
    let nodes: Vec<NodeConfig> = match nodes {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => vec![NodeConfig::light_and_fan(1), NodeConfig::light_and_fan(2)],
    };
    if nodes.is_empty() {
        bail!("at least one node is needed");
    }
    let link = Box::new(HttpClient::new(config.server_url.clone()));
    let mut sim = Sim::new(channel, config, link, SimClock::default())?;
    for n in nodes {
        sim.add_node(n, 0)?;
    }
    sim.with_hub(|hub, io| {
        if reinit {
            hub.request_reinit();
        }
        hub.start(io);
    });

    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in std::io::stdin().lock().lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let started = Instant::now();
    let mut printed = 0;
    loop {
        let now = started.elapsed().as_millis() as u64;
        if duration_ms.is_some_and(|d| now >= d) {
            return Ok(0);
        }
        while let Ok(line) = rx.try_recv() {
            if line.trim() == "reinit" {
                sim.with_hub(|hub, _| hub.request_reinit());
                eprintln!("re-initialization requested");
            }
        }
        while !matches!(sim.step(now), Step::Done) {}
        for line in &sim.trace().lines()[printed..] {
            println!("{line}");
        }
        printed = sim.trace().len();
        let wait = sim.next_event_at().map_or(50, |t| t.saturating_sub(now).clamp(1, 50));
        std::thread::sleep(Duration::from_millis(wait));
    }
}
