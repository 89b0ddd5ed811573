//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

use homewire::appliance::{ApplianceKind, ControlWord, Opcode};
use homewire::channel::ChannelConfig;
use homewire::hub::HubConfig;
use homewire::intent::{IntentEngine, PipelinePath};
use homewire::node::NodeConfig;
use homewire::protocol::{crc16, Frame, FrameType, BROADCAST, MASTER, MAX_PAYLOAD};
use homewire::scenario::{run_scenario, RunOptions, RunOutcome, Scenario};
use homewire::server::{CommandEntry, CommandSource, CommandStatus};
use homewire::sim::RfBench;
use homewire::trace::{parse_trace, phase_violations, replay_check, star_violations, ReplayResult, TraceLine, META_EVENT};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn bundled_scenarios() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(repo_root().join("scenarios"))
        .expect("scenarios directory")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    out
}

fn run(path: &Path, networked: bool) -> Result<RunOutcome, String> {
    let scenario = Scenario::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    run_scenario(&scenario, &RunOptions { seed: None, networked }).map_err(|e| format!("{}: {e}", path.display()))
}

fn without_meta(text: &str) -> String {
    text.lines()
        .filter(|l| serde_json::from_str::<Value>(l).map_or(true, |v| v.ev() != META_EVENT))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Bit-at-a-time CRC-16/CCITT-FALSE, independent of the table-driven one.
fn crc16_bitwise(bytes: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &b in bytes {
        crc ^= u16::from(b) << 8;
        for _ in 0..8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
        }
    }
    crc
}

fn crc_oracle() -> Verdict {
    let check = crc16_bitwise(b"123456789");
    ensure(check == 0x29B1, || format!("bitwise oracle gives {check:#06X}"))?;
    let lib = crc16(b"123456789");
    ensure(lib == check, || format!("crc16 gives {lib:#06X}, oracle {check:#06X}"))?;
    let mut rng = StdRng::seed_from_u64(6);
    for _ in 0..1000 {
        let len = rng.gen_range(0..80);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        ensure(crc16(&bytes) == crc16_bitwise(&bytes), || format!("crc mismatch on {}", hex::encode(&bytes)))?;
    }
    Ok("crc16(\"123456789\") = 0x29B1, 1000 random buffers agree with the bitwise oracle".into())
}

fn c1_golden_handshake() -> Verdict {
    let start = Instant::now();
    let out = run(&repo_root().join("scenarios/handshake.json"), false)?;
    let elapsed = start.elapsed();
    let got = without_meta(&out.trace.to_text());
    let golden = std::fs::read_to_string(fixture("handshake.golden.jsonl")).map_err(|e| e.to_string())?;
    if let ReplayResult::Diverged { line, left, right } = replay_check(&golden, &got) {
        return Err(format!("differs from golden at line {line}: golden {left:?}, run {right:?}"));
    }
    ensure(got == golden, || "not byte-identical to the golden trace".into())?;
    let events = parse_trace(&got).map_err(|e| e.to_string())?;
    let inits: Vec<&Value> = events.iter().filter(|e| e.ev() == "tx" && e.str_field("ftype") == Some("INIT")).collect();
    ensure(inits.len() == 1, || format!("{} INIT broadcasts", inits.len()))?;
    let init_t = inits[0].t();
    let acks: Vec<(String, u64)> = events
        .iter()
        .filter(|e| e.ev() == "tx" && e.str_field("ftype") == Some("INIT_ACK"))
        .map(|e| (e.str_field("from").unwrap_or("").to_string(), e.t()))
        .collect();
    let senders: Vec<&str> = acks.iter().map(|(f, _)| f.as_str()).collect();
    ensure(senders == ["n1", "n2"], || format!("INIT_ACK senders {senders:?}"))?;
    ensure(acks.iter().all(|(_, t)| *t > init_t) && acks[0].1 < acks[1].1, || format!("INIT_ACK times {acks:?}"))?;
    ensure(out.report.registry == [1, 2], || format!("registry {:?}", out.report.registry))?;
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("{} lines match golden, INIT_ACKs at {:?}, {elapsed:?}", events.len(), acks.iter().map(|a| a.1).collect::<Vec<_>>()))
}

fn two_node_configs() -> Vec<NodeConfig> {
    vec![NodeConfig::light_and_fan(1), NodeConfig::light_and_fan(2)]
}

fn random_word(rng: &mut StdRng) -> ControlWord {
    let node = if rng.gen_bool(0.05) { 9 } else { rng.gen_range(1..=2) };
    let appliance = rng.gen_range(1..=2);
    let kind = if appliance == 1 { ApplianceKind::Light } else { ApplianceKind::Fan };
    match rng.gen_range(0..3) {
        0 => ControlWord::new(node, appliance, Opcode::Off, 0),
        1 => ControlWord::new(node, appliance, Opcode::On, 0),
        _ => ControlWord::new(node, appliance, Opcode::SetLevel, rng.gen_range(0..=kind.max_level())),
    }
}

/// Checks that every CONTROL transmit for a new command follows the final
/// outcome of the previous one. Returns the number of adjacent pairs.
fn sequencing_violations(events: &[Value]) -> (usize, Vec<String>) {
    let mut pairs = 0;
    let mut bad = Vec::new();
    let mut in_flight: Option<u64> = None;
    let mut last_outcome: Option<u64> = None;
    for e in events {
        match e.ev() {
            "outcome" => {
                in_flight = None;
                last_outcome = Some(e.t());
            }
            "tx" if e.str_field("from") == Some("hub") && e.str_field("ftype") == Some("CONTROL") => {
                let seq = e.u64_field("seq");
                match in_flight {
                    Some(s) if Some(s) == seq => {}
                    Some(s) => bad.push(format!("t={}: CONTROL seq {seq:?} while seq {s} unresolved", e.t())),
                    None => {
                        if let Some(t) = last_outcome {
                            pairs += 1;
                            if e.t() <= t {
                                bad.push(format!("t={}: CONTROL not after outcome at t={t}", e.t()));
                            }
                        }
                        in_flight = seq;
                    }
                }
            }
            _ => {}
        }
    }
    (pairs, bad)
}

fn c2_sequencing() -> Verdict {
    let mut rng = StdRng::seed_from_u64(2);
    let mut pairs = 0;
    let mut commands = 0;
    for batch_no in 0..100u64 {
        let channel = ChannelConfig { loss_probability: rng.gen_range(0.0..0.3), seed: batch_no, ..Default::default() };
        let mut bench = RfBench::new(channel, HubConfig::default(), two_node_configs()).map_err(|e| e.to_string())?;
        while bench.initialize_network().map_err(|e| e.to_string())?.len() < 2 {}
        let n = rng.gen_range(2..=12);
        let batch: Vec<CommandEntry> = (1..=n).map(|seq| CommandEntry { seq, word: random_word(&mut rng) }).collect();
        let outcomes = bench.relay_batch(batch.clone()).map_err(|e| e.to_string())?;
        let order: Vec<u64> = outcomes.iter().map(|(c, _)| c.seq).collect();
        ensure(order == (1..=n).collect::<Vec<_>>(), || format!("batch {batch_no}: outcome order {order:?}"))?;
        let events = bench.trace().events();
        let (p, bad) = sequencing_violations(&events);
        ensure(bad.is_empty(), || format!("batch {batch_no}: {}", bad.join("; ")))?;
        pairs += p;
        commands += n;
    }
    Ok(format!("100 batches, {commands} commands, {pairs} adjacent CONTROL pairs, 0 violations"))
}

fn c3_end_to_end() -> Verdict {
    let path = repo_root().join("scenarios/two_node_demo.json");
    let out = run(&path, false)?;
    let again = run(&path, false)?;
    let post = out.posts.iter().find(|p| p.text == "Turn on the bedroom light at 70%").ok_or("post missing")?;
    let cmd = out
        .server_state
        .commands
        .values()
        .find(|c| c.source == CommandSource::Feed { post_id: post.id })
        .ok_or("no FEED command for the post")?;
    ensure(cmd.word == ControlWord::new(1, 1, Opcode::SetLevel, 70), || format!("word {:?}", cmd.word))?;
    ensure(cmd.status == CommandStatus::Acked, || format!("status {:?}", cmd.status))?;
    let light = out.report.nodes.get(&1).and_then(|a| a.iter().find(|s| s.appliance == 1)).ok_or("no node 1 light")?;
    ensure(light.on && light.level == 70, || format!("light {light:?}"))?;
    let events = out.trace.events();
    let acked_at = events
        .iter()
        .find(|e| e.ev() == "outcome" && e.u64_field("seq") == Some(cmd.seq) && e.str_field("outcome") == Some("ACKED"))
        .map(|e| e.t())
        .ok_or("no ACKED outcome event")?;
    let period = HubConfig::default().poll_period_ms;
    ensure(acked_at < post.posted_at + period, || format!("acked at {acked_at}, posted at {}", post.posted_at))?;
    ensure(
        matches!(replay_check(&out.trace.to_text(), &again.trace.to_text()), ReplayResult::Identical { .. }),
        || "second run differs".into(),
    )?;
    Ok(format!("seq {} ACKED FEED at t={acked_at}, node 1 light on at 70, rerun identical", cmd.seq))
}

fn c4_failsafe_and_corpus() -> Verdict {
    let engine = IntentEngine::default();
    let (words, trace) = engine.process_post("what a wonderful lovely day");
    ensure(trace.path == PipelinePath::Failsafe, || format!("mood post took {:?}", trace.path))?;
    let scene = vec![ControlWord::new(1, 1, Opcode::SetLevel, 100), ControlWord::new(2, 1, Opcode::SetLevel, 100)];
    ensure(words == scene, || format!("mood post words {words:?}"))?;

    let text = std::fs::read_to_string(fixture("intent_corpus.jsonl")).map_err(|e| e.to_string())?;
    let corpus = parse_trace(&text).map_err(|e| e.to_string())?;
    let (mut path_ok, mut exact_base, mut base, mut exact_noise, mut noise) = (0, 0, 0, 0, 0);
    let mut misses = Vec::new();
    for entry in &corpus {
        let sentence = entry.str_field("text").ok_or("corpus line without text")?;
        let (_, trace) = engine.process_post(sentence);
        ensure((trace.path == PipelinePath::Failsafe) == trace.intents.is_empty(), || {
            format!("path {:?} with {} intents for {sentence:?}", trace.path, trace.intents.len())
        })?;
        let intents = serde_json::to_value(&trace.intents).map_err(|e| e.to_string())?;
        let exact = intents == entry["intents"];
        if !exact {
            misses.push(format!("intents {intents} for {sentence:?}"));
        }
        if entry.str_field("variant") == Some("base") {
            let want_path = entry.str_field("path").ok_or("corpus line without path")?;
            let got_path = serde_json::to_value(trace.path).map_err(|e| e.to_string())?;
            ensure(got_path.as_str() == Some(want_path), || format!("path {got_path} for {sentence:?}"))?;
            path_ok += 1;
            base += 1;
            exact_base += usize::from(exact);
        } else {
            noise += 1;
            exact_noise += usize::from(exact);
        }
    }
    for m in &misses {
        eprintln!("  corpus miss: {m}");
    }
    ensure(base == 60, || format!("{base} base sentences"))?;
    let noise_rate = exact_noise as f64 / noise as f64;
    ensure(noise_rate >= 0.9, || format!("noise exact match {exact_noise}/{noise}"))?;

    // Scene commands only come from posts whose decision tree found nothing.
    let out = run(&repo_root().join("scenarios/failsafe_moods.json"), false)?;
    let posts: BTreeMap<u64, &str> = out.posts.iter().map(|p| (p.id, p.text.as_str())).collect();
    let mut scene_cmds = 0;
    for cmd in out.server_state.commands.values() {
        let (post_id, scene) = match cmd.source {
            CommandSource::Feed { post_id } => (post_id, false),
            CommandSource::Scene { post_id } => (post_id, true),
            CommandSource::Manual => continue,
        };
        let text = posts.get(&post_id).ok_or_else(|| format!("seq {} from unknown post {post_id}", cmd.seq))?;
        let path = engine.process_post(text).1.path;
        ensure(scene == (path == PipelinePath::Failsafe), || format!("seq {} source/path mismatch for {text:?}", cmd.seq))?;
        scene_cmds += usize::from(scene);
    }
    ensure(scene_cmds > 0, || "failsafe_moods produced no scene commands".into())?;
    Ok(format!(
        "path {path_ok}/{base} correct, exclusivity holds on all {} lines, exact intents base {exact_base}/{base}, noise {exact_noise}/{noise} ({:.1}%), {scene_cmds} scene commands all from intent-free posts",
        corpus.len(),
        noise_rate * 100.0
    ))
}

fn c5_loss_statistics() -> Verdict {
    let start = Instant::now();
    let (loss, attempts, n) = (0.3_f64, 5_u32, 1000_u64);
    let p_round = (1.0 - loss) * (1.0 - loss);
    let p = 1.0 - (1.0 - p_round).powi(attempts as i32);
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let channel = ChannelConfig { loss_probability: loss, seed: 5, ..Default::default() };
    let hub = HubConfig { max_retries: attempts, ..Default::default() };
    let mut bench = RfBench::new(channel, hub, vec![NodeConfig::light_and_fan(1)]).map_err(|e| e.to_string())?;
    let mut inits = 0;
    while bench.initialize_network().map_err(|e| e.to_string())?.is_empty() {
        inits += 1;
        ensure(inits < 100, || "node never discovered".into())?;
    }
    let mut rng = StdRng::seed_from_u64(5);
    let batch: Vec<CommandEntry> = (1..=n)
        .map(|seq| CommandEntry { seq, word: ControlWord::new(1, 1, Opcode::SetLevel, rng.gen_range(0..=100)) })
        .collect();
    let outcomes = bench.relay_batch(batch).map_err(|e| e.to_string())?;
    ensure(outcomes.len() as u64 == n, || format!("{} outcomes", outcomes.len()))?;
    let acked = outcomes.iter().filter(|(_, o)| o.is_acked()).count();
    let frac = acked as f64 / n as f64;
    let elapsed = start.elapsed();
    ensure((frac - p).abs() <= 3.0 * sigma, || format!("acked {frac:.4}, expected {p:.4} +- {:.4}", 3.0 * sigma))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("acked {acked}/{n} = {frac:.4}, analytic {p:.4}, 3 sigma {:.4}, {elapsed:?}", 3.0 * sigma))
}

fn random_frame(rng: &mut StdRng) -> Frame {
    let seq = rng.gen();
    let slave = rng.gen_range(1..=254);
    match rng.gen_range(0..4) {
        0 => Frame { ftype: FrameType::Init, src: MASTER, dst: BROADCAST, seq, payload: vec![] },
        1 => Frame { ftype: FrameType::Control, src: MASTER, dst: slave, seq, payload: (0..3).map(|_| rng.gen()).collect() },
        t => {
            let len = rng.gen_range(0..=MAX_PAYLOAD);
            Frame {
                ftype: if t == 2 { FrameType::InitAck } else { FrameType::ControlAck },
                src: slave,
                dst: MASTER,
                seq,
                payload: (0..len).map(|_| rng.gen()).collect(),
            }
        }
    }
}

fn c6_codec() -> Verdict {
    crc_oracle()?;
    let mut rng = StdRng::seed_from_u64(6);
    for i in 0..10_000 {
        let f = random_frame(&mut rng);
        let bytes = f.encode().map_err(|e| format!("frame {i}: {e}"))?;
        ensure(bytes.len() == 9 + f.payload.len(), || format!("frame {i}: length {}", bytes.len()))?;
        let back = Frame::decode(&bytes).map_err(|e| format!("frame {i}: {e}"))?;
        ensure(back == f, || format!("frame {i}: round trip changed {f:?}"))?;
    }
    let mut corruptions = 0;
    for i in 0..1000 {
        let bytes = random_frame(&mut rng).encode().map_err(|e| e.to_string())?;
        for pos in 0..bytes.len() {
            for _ in 0..3 {
                let mut bad = bytes.clone();
                bad[pos] ^= rng.gen_range(1..=255u8);
                corruptions += 1;
                ensure(Frame::decode(&bad).is_err(), || format!("frame {i}: corruption at {pos} accepted: {}", hex::encode(&bad)))?;
            }
        }
    }
    Ok(format!("crc oracle ok, 10000 round trips, {corruptions} single-byte corruptions rejected"))
}

fn c7_reinit_discovery() -> Verdict {
    let out = run(&repo_root().join("scenarios/reinit_discovery.json"), false)?;
    ensure(out.report.exit_code == 0, || format!("scenario failed: {:?}", out.report.first_failure))?;
    let events = out.trace.events();
    let registries: Vec<usize> = events
        .iter()
        .filter(|e| e.ev() == "registry")
        .map(|e| e["nodes"].as_array().map_or(0, Vec::len))
        .collect();
    ensure(registries.first() == Some(&2) && registries.last() == Some(&3), || format!("registry sizes {registries:?}"))?;
    let acked_node3 = events
        .iter()
        .any(|e| e.ev() == "outcome" && e.u64_field("node") == Some(3) && e.str_field("outcome") == Some("ACKED"));
    ensure(acked_node3, || "no ACKED command for node 3".into())?;
    Ok(format!("registry sizes {registries:?}, command to node 3 ACKED"))
}

fn c8_phase_exclusivity() -> Verdict {
    let mut checked = 0;
    for path in bundled_scenarios() {
        for networked in [false, true] {
            let out = run(&path, networked)?;
            let events = out.trace.events();
            let mut v = phase_violations(&events);
            v.extend(star_violations(&events));
            ensure(v.is_empty(), || format!("{} (networked {networked}): {}", path.display(), v.join("; ")))?;
            checked += events.len();
        }
    }
    Ok(format!("{} scenarios in both modes, {checked} events, 0 violations", bundled_scenarios().len()))
}

fn c9_determinism() -> Verdict {
    let mut lines = 0;
    for path in bundled_scenarios() {
        let a = run(&path, false)?.trace.to_text();
        let b = run(&path, false)?.trace.to_text();
        match replay_check(&a, &b) {
            ReplayResult::Identical { lines: n } => lines += n,
            ReplayResult::Diverged { line, .. } => return Err(format!("{} diverges at line {line}", path.display())),
        }
    }
    Ok(format!("{} scenarios replayed identically ({lines} lines)", bundled_scenarios().len()))
}

fn c10_persistence() -> Verdict {
    let out = run(&repo_root().join("scenarios/restart_server.json"), true)?;
    ensure(out.report.exit_code == 0, || format!("scenario failed: {:?}", out.report.first_failure))?;
    let events = out.trace.events();
    ensure(events.iter().filter(|e| e.ev() == "server_down").count() >= 1, || "server never went down".into())?;

    let enqueued: Vec<u64> = events.iter().filter(|e| e.ev() == "enqueue").filter_map(|e| e.u64_field("seq")).collect();
    let distinct: BTreeSet<u64> = enqueued.iter().copied().collect();
    ensure(distinct.len() == enqueued.len(), || format!("seq reused: {enqueued:?}"))?;
    let n = enqueued.len() as u64;
    ensure(enqueued == (1..=n).collect::<Vec<_>>(), || format!("seqs not contiguous: {enqueued:?}"))?;
    ensure(out.server_state.seq_high_water == n, || format!("high water {} for {n} seqs", out.server_state.seq_high_water))?;
    let stored: Vec<u64> = out.server_state.commands.keys().copied().collect();
    ensure(stored == enqueued, || format!("persisted seqs {stored:?}, enqueued {enqueued:?}"))?;

    let mut ingested: BTreeMap<u64, usize> = BTreeMap::new();
    for e in events.iter().filter(|e| e.ev() == "post") {
        *ingested.entry(e.u64_field("post_id").unwrap_or(0)).or_default() += 1;
    }
    for p in &out.posts {
        ensure(ingested.get(&p.id) == Some(&1), || format!("post {} ingested {:?} times", p.id, ingested.get(&p.id)))?;
    }

    let mut relayed: BTreeMap<u64, usize> = BTreeMap::new();
    for e in events.iter().filter(|e| e.ev() == "outcome") {
        *relayed.entry(e.u64_field("seq").unwrap_or(0)).or_default() += 1;
    }
    for (seq, cmd) in &out.server_state.commands {
        ensure(cmd.status == CommandStatus::Acked, || format!("seq {seq} ended {:?}", cmd.status))?;
        ensure(relayed.get(seq) == Some(&1), || format!("seq {seq} relayed {:?} times", relayed.get(seq)))?;
    }
    Ok(format!("{n} seqs contiguous and unique, {} posts ingested once, every command relayed once and ACKED", out.posts.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("golden handshake trace", c1_golden_handshake),
        ("strict command sequencing", c2_sequencing),
        ("end-to-end feed to appliance", c3_end_to_end),
        ("fail-safe exclusivity and intent corpus", c4_failsafe_and_corpus),
        ("loss and retry statistics", c5_loss_statistics),
        ("codec robustness", c6_codec),
        ("re-initialization discovery", c7_reinit_discovery),
        ("phase exclusivity", c8_phase_exclusivity),
        ("deterministic replay", c9_determinism),
        ("persistence across server restart", c10_persistence),
    ];
    if let Err(e) = crc_oracle() {
        println!("FAIL crc oracle: {e}");
        std::process::exit(1);
    }
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
