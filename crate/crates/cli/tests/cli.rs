use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use serde_json::Value;

use otshadow_core::device::{Device, DeviceHandle, RunMode};
use otshadow_core::scenario::Scenario;
use otshadow_gateway::server::{shared, RunningGateway};
use otshadow_gateway::GatewayConfig;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn otshadow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otshadow"))
        .args(args)
        .env_remove("OTSHADOW_CONNECT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn print_message_emits_protocol_lines() {
    let cases: [(&[&str], &str); 6] = [
        (
            &["deploy-shadow"],
            r#"{"v":1,"type":"deploy_shadow","id":"1","payload":{"asset":0}}"#,
        ),
        (
            &["promote", "--cycle", "6000"],
            r#"{"v":1,"type":"promote","id":"1","payload":{"asset":0,"cycle":6000}}"#,
        ),
        (
            &["promote", "--cycle", "120", "--asset", "1", "--phase", "prepare"],
            r#"{"v":1,"type":"promote","id":"1","payload":{"asset":1,"cycle":120,"phase":"prepare"}}"#,
        ),
        (
            &["rollback", "--cycle", "6500"],
            r#"{"v":1,"type":"rollback","id":"1","payload":{"asset":0,"cycle":6500}}"#,
        ),
        (&["abort"], r#"{"v":1,"type":"abort","id":"1","payload":{"asset":0}}"#),
        (
            &["status", "--include", "history", "--include", "twin_csv"],
            r#"{"v":1,"type":"status","id":"1","payload":{"include":["history","twin_csv"]}}"#,
        ),
    ];
    for (args, want) in cases {
        let mut full = args.to_vec();
        full.push("--print-message");
        let out = otshadow(&full);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        assert_eq!(stdout(&out), format!("{want}\n"), "{args:?}");
    }
}

#[test]
fn promote_without_a_cycle_or_phase_is_a_usage_error() {
    let out = otshadow(&["promote", "--print-message"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--cycle"));
}

#[test]
fn run_writes_one_row_per_cycle_and_reports_the_switch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ab.csv");
    let twin = dir.path().join("twin");
    let out = otshadow(&[
        "run",
        scenarios().join("ab_demo.toml").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--twin-dir",
        twin.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["actuator_writes"][0], 10_000);
    assert_eq!(summary["integrity_faults"], 0);
    assert_eq!(summary["switch_cycles"][0][1][0], 6000);

    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("cycle,"));
    assert_eq!(lines.count(), 10_000);
    let level2 = std::fs::read_to_string(twin.join("twin_level2.csv")).unwrap();
    assert_eq!(level2.lines().count(), 10_001);
    let level3 = std::fs::read_to_string(twin.join("twin_level3.csv")).unwrap();
    assert_eq!(level3.lines().count(), 101);
}

#[test]
fn second_asset_gets_its_own_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("two.csv");
    let out = otshadow(&[
        "run",
        scenarios().join("two_assets.toml").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["two.csv", "two.asset1.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.lines().count(), 6001, "{f}");
    }
}

#[test]
fn invalid_scenario_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(scenarios().join("ab_demo.toml"))
        .unwrap()
        .replace("cycles = 10000", "cycles = 0")
        .replace("period_us = 1000", "period_us = 1000\nring_capacity = 3");
    std::fs::write(&path, text).unwrap();
    let out = otshadow(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("cycles must be >= 1"), "{err}");
    assert!(err.contains("ring_capacity must be a power of two"), "{err}");
}

fn gateway(device: Device) -> RunningGateway {
    let cfg = GatewayConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        http_listen: None,
        push_interval_ms: 100,
    };
    RunningGateway::spawn(&cfg, shared(device)).unwrap()
}

fn ab_device() -> Device {
    let mut s = Scenario::from_path(scenarios().join("ab_demo.toml")).unwrap();
    s.events.clear();
    Device::from_scenario(&s, "cli").unwrap()
}

#[test]
fn status_against_an_idle_device() {
    let gw = gateway(ab_device());
    let addr = gw.tcp_addr.to_string();
    let out = otshadow(&["status", "--connect", &addr]);
    assert!(out.status.success(), "{}", stderr(&out));
    let reply: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(reply["type"], "ack");
    assert_eq!(reply["payload"]["assets"][0]["state"], "Idle");
}

#[test]
fn rejected_commands_exit_with_one() {
    let mut device = ab_device();
    device.run_until(50, |_, _| {}).unwrap();
    let gw = gateway(device);
    let addr = gw.tcp_addr.to_string();
    let out = otshadow(&["deploy-shadow", "--connect", &addr]);
    assert!(out.status.success(), "{}", stdout(&out));
    // The device is at cycle 49: a switch in the past cannot be honoured.
    let out = otshadow(&["promote", "--cycle", "3", "--connect", &addr]);
    assert_eq!(out.status.code(), Some(1));
    let reply: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(reply["type"], "error");
    assert_eq!(reply["payload"]["reason"], "rejected");
}

#[test]
fn export_writes_the_requested_section() {
    let handle = DeviceHandle::spawn(
        ab_device(),
        RunMode {
            until: Some(300),
            pace: false,
        },
    )
    .unwrap();
    let cfg = GatewayConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        http_listen: None,
        push_interval_ms: 100,
    };
    let gw = RunningGateway::spawn(&cfg, shared(handle)).unwrap();
    let addr = gw.tcp_addr.to_string();
    // Let the device finish its 300 cycles.
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    loop {
        let out = otshadow(&["status", "--connect", &addr]);
        let reply: Value = serde_json::from_str(&stdout(&out)).unwrap();
        if reply["payload"]["cycle"] == 299 {
            break;
        }
        assert!(std::time::Instant::now() < deadline, "device stuck: {reply}");
        std::thread::sleep(Duration::from_millis(20));
    }
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("metrics.csv");
    let out = otshadow(&[
        "export",
        "--csv",
        csv.to_str().unwrap(),
        "--section",
        "metrics",
        "--connect",
        &addr,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("cycle,start_jitter_ns,"));
    assert_eq!(text.lines().count(), 301);
}

#[test]
fn subscribe_stops_after_count() {
    let handle = DeviceHandle::spawn(
        ab_device(),
        RunMode {
            until: None,
            pace: true,
        },
    )
    .unwrap();
    let cfg = GatewayConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        http_listen: None,
        push_interval_ms: 100,
    };
    let gw = RunningGateway::spawn(&cfg, shared(handle)).unwrap();
    let addr = gw.tcp_addr.to_string();
    let out = otshadow(&["subscribe", "--interval-ms", "20", "--count", "3", "--connect", &addr]);
    assert!(out.status.success(), "{}", stderr(&out));
    let pushes: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(pushes.len(), 3);
    assert!(pushes.iter().all(|p| p["type"] == "metrics_push"));
}

#[test]
fn unreachable_gateway_is_reported() {
    // Bind and drop to get a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let out = otshadow(&["status", "--connect", &addr, "--timeout-ms", "500"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains(&format!("connecting to {addr}")),
        "{}",
        stderr(&out)
    );
}
