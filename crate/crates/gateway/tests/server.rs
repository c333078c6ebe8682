use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use serde_json::{json, Value};

use otshadow_core::device::{Device, DeviceHandle, RunMode};
use otshadow_core::scenario::Scenario;
use otshadow_gateway::protocol::{ErrorReason, ManagementMessage, MessageType};
use otshadow_gateway::server::{shared, RunningGateway};
use otshadow_gateway::{Client, GatewayConfig};

const AB_DEMO: &str = include_str!("../../../scenarios/ab_demo.toml");
const TIMEOUT: Duration = Duration::from_secs(5);

fn device() -> Device {
    let mut s = Scenario::from_toml_str(AB_DEMO).unwrap();
    s.events.clear();
    Device::from_scenario(&s, "dev").unwrap()
}

fn config(http: bool) -> GatewayConfig {
    GatewayConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        http_listen: http.then(|| "127.0.0.1:0".parse().unwrap()),
        push_interval_ms: 100,
    }
}

fn idle_gateway(http: bool) -> RunningGateway {
    RunningGateway::spawn(&config(http), shared(device())).unwrap()
}

#[test]
fn status_on_an_idle_system_is_idle() {
    let gw = idle_gateway(false);
    let mut c = Client::connect(gw.tcp_addr, TIMEOUT).unwrap();
    let reply = c.request(MessageType::Status, json!({})).unwrap();
    assert_eq!(reply.kind, MessageType::Ack);
    assert_eq!(reply.id, "1");
    assert_eq!(reply.payload["assets"][0]["state"], "Idle");
    gw.shutdown().unwrap();
}

#[test]
fn malformed_lines_are_answered_and_the_connection_survives() {
    let gw = idle_gateway(false);
    let mut c = Client::connect(gw.tcp_addr, TIMEOUT).unwrap();
    for bad in [
        &b"{not json\n"[..],
        b"\xff\xfe\n",
        b"[1,2,3]\n",
        b"{\"v\":1,\"type\":\"status\"}\n",
    ] {
        let reply = c.send_raw(bad).unwrap();
        assert_eq!(reply.kind, MessageType::Error);
        assert_eq!(reply.error_payload().unwrap().reason, ErrorReason::Parse);
    }
    let reply = c
        .send_raw(b"{\"v\":9,\"type\":\"status\",\"id\":\"old\",\"payload\":{}}\n")
        .unwrap();
    assert_eq!(reply.id, "old");
    assert_eq!(reply.error_payload().unwrap().reason, ErrorReason::Version);
    // Still serving on the same connection.
    let reply = c.request(MessageType::Status, json!({})).unwrap();
    assert_eq!(reply.kind, MessageType::Ack);
}

#[test]
fn an_oversized_line_is_refused_without_dropping_the_connection() {
    let gw = idle_gateway(false);
    let mut c = Client::connect(gw.tcp_addr, TIMEOUT).unwrap();
    let mut huge = vec![b'x'; otshadow_gateway::server::MAX_LINE_BYTES + 10];
    huge.push(b'\n');
    let reply = c.send_raw(&huge).unwrap();
    assert_eq!(reply.error_payload().unwrap().reason, ErrorReason::Parse);
    assert_eq!(
        c.request(MessageType::Status, json!({})).unwrap().kind,
        MessageType::Ack
    );
}

#[test]
fn subscription_pushes_at_the_requested_rate() {
    let handle = DeviceHandle::spawn(
        device(),
        RunMode {
            until: None,
            pace: true,
        },
    )
    .unwrap();
    let gw = RunningGateway::spawn(&config(false), shared(handle)).unwrap();
    let mut c = Client::connect(gw.tcp_addr, TIMEOUT).unwrap();
    let interval = Duration::from_millis(50);
    let window = Duration::from_millis(1000);
    let ack = c
        .request(
            MessageType::SubscribeMetrics,
            json!({"interval_ms": interval.as_millis() as u64}),
        )
        .unwrap();
    assert_eq!(ack.kind, MessageType::Ack);
    let sub = ack.payload["subscription"].as_str().unwrap().to_string();
    assert_eq!(ack.payload["interval_ms"], 50);

    let start = Instant::now();
    let mut pushes = Vec::new();
    while start.elapsed() < window {
        let p = c.next_push().unwrap();
        if start.elapsed() <= window {
            pushes.push(p);
        }
    }
    // The first push goes out right away, then one per interval.
    let expected = (window.as_millis() / interval.as_millis()) as usize + 1;
    assert!(
        pushes.len() + 3 >= expected && pushes.len() <= expected + 1,
        "{} pushes, expected about {expected}",
        pushes.len()
    );
    assert!(pushes.iter().all(|p| p.id == sub && p.kind == MessageType::MetricsPush));
    let cycles: Vec<u64> = pushes.iter().filter_map(|p| p.payload["cycle"].as_u64()).collect();
    assert!(cycles.windows(2).all(|w| w[0] <= w[1]));
    assert!(cycles.last() > cycles.first(), "device did not advance: {cycles:?}");

    // Requests on a subscribed connection still get their own reply.
    let reply = c.request(MessageType::Status, json!({})).unwrap();
    assert_eq!(reply.kind, MessageType::Ack);
}

fn http(addr: SocketAddr, request: &str) -> (String, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(TIMEOUT)).unwrap();
    s.write_all(request.as_bytes()).unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    (head.to_ascii_lowercase(), body.to_string())
}

fn post(addr: SocketAddr, body: &str) -> (String, String) {
    http(
        addr,
        &format!(
            "POST /rpc HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        ),
    )
}

#[test]
fn http_bridge_speaks_the_same_messages() {
    let gw = idle_gateway(true);
    let addr = gw.http_addr.unwrap();
    let (head, body) = post(addr, r#"{"v":1,"type":"status","id":"h1","payload":{}}"#);
    assert!(head.starts_with("http/1.1 200"), "{head}");
    assert!(head.contains("access-control-allow-origin: *"));
    let reply: ManagementMessage = serde_json::from_str(&body).unwrap();
    assert_eq!((reply.kind, reply.id.as_str()), (MessageType::Ack, "h1"));
    assert_eq!(reply.payload["assets"][0]["state"], "Idle");

    let (_, body) = post(addr, "{oops");
    let reply: ManagementMessage = serde_json::from_str(&body).unwrap();
    assert_eq!(reply.error_payload().unwrap().reason, ErrorReason::Parse);

    let (head, _) = http(addr, "OPTIONS /rpc HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
    assert!(head.starts_with("http/1.1 204"), "{head}");
    assert!(head.contains("access-control-allow-methods"));
}

#[test]
fn event_stream_carries_metrics_pushes() {
    let handle = DeviceHandle::spawn(
        device(),
        RunMode {
            until: None,
            pace: true,
        },
    )
    .unwrap();
    let gw = RunningGateway::spawn(&config(true), shared(handle)).unwrap();
    let mut s = TcpStream::connect(gw.http_addr.unwrap()).unwrap();
    s.set_read_timeout(Some(TIMEOUT)).unwrap();
    s.write_all(b"GET /events?interval_ms=20 HTTP/1.1\r\nHost: x\r\nAccept: text/event-stream\r\n\r\n")
        .unwrap();
    let mut reader = BufReader::new(s);
    let mut head = String::new();
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        if line == "\r\n" {
            break;
        }
        head.push_str(&line.to_ascii_lowercase());
    }
    assert!(head.contains("text/event-stream"), "{head}");
    assert!(head.contains("access-control-allow-origin: *"));

    let mut events = Vec::new();
    let mut pending_event = None;
    while events.len() < 3 {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let line = line.trim_end();
        if let Some(e) = line.strip_prefix("event: ") {
            pending_event = Some(e.to_string());
        } else if let Some(d) = line.strip_prefix("data: ") {
            assert_eq!(pending_event.as_deref(), Some("metrics_push"));
            let msg: ManagementMessage = serde_json::from_str(d).unwrap();
            assert_eq!(msg.kind, MessageType::MetricsPush);
            events.push(msg);
        }
    }
    assert!(events.iter().all(|e| e.payload["device"] == "dev"));
}

fn request_line() -> impl Strategy<Value = (bool, String)> {
    let kinds = prop_oneof![
        Just("deploy_shadow"),
        Just("promote"),
        Just("rollback"),
        Just("abort"),
        Just("status"),
        Just("ack"),
        Just("metrics_push"),
    ];
    prop_oneof![
        4 => (kinds, 0u64..500, any::<bool>()).prop_map(|(k, c, phase)| {
            let payload = if phase { json!({"cycle": c, "phase": "prepare"}) } else { json!({"cycle": c}) };
            (true, json!({"v": 1, "type": k, "id": "", "payload": payload}).to_string())
        }),
        1 => "[a-z{}\\[\\]:,\" ]{1,40}".prop_map(|s| (false, s)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Over one connection, every line gets exactly one reply, in order, and
    /// well-formed requests get their own id back.
    #[test]
    fn every_line_gets_exactly_one_reply(lines in proptest::collection::vec(request_line(), 1..40)) {
        let gw = idle_gateway(false);
        let mut c = Client::connect(gw.tcp_addr, TIMEOUT).unwrap();
        for (i, (well_formed, line)) in lines.iter().enumerate() {
            let line = if *well_formed {
                let mut v: Value = serde_json::from_str(line).unwrap();
                v["id"] = json!(format!("q{i}"));
                v.to_string()
            } else {
                line.replace('\n', " ")
            };
            if line.trim().is_empty() {
                continue;
            }
            let reply = c.send_raw(format!("{line}\n").as_bytes()).unwrap();
            prop_assert!(matches!(reply.kind, MessageType::Ack | MessageType::Error));
            if *well_formed {
                prop_assert_eq!(reply.id, format!("q{i}"));
            }
        }
        // Nothing left over: the next request's reply is the next message.
        let reply = c.request(MessageType::Status, json!({})).unwrap();
        prop_assert_eq!(reply.kind, MessageType::Ack);
    }
}
