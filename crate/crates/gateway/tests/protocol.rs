use proptest::prelude::*;
use serde_json::{json, Value};

use otshadow_core::device::Device;
use otshadow_core::scenario::Scenario;
use otshadow_gateway::codec;
use otshadow_gateway::dispatch;
use otshadow_gateway::protocol::{
    AbortPayload, DeployPayload, ErrorReason, ManagementMessage, MessageType, StatusPayload, SubscribePayload,
    SwitchPayload, SwitchPhase,
};

const GOLDEN: &str = include_str!("golden/messages.ndjson");
const AB_DEMO: &str = include_str!("../../../scenarios/ab_demo.toml");

fn to_value(p: impl serde::Serialize) -> Value {
    serde_json::to_value(p).unwrap()
}

fn switch(asset: usize, cycle: Option<u64>, phase: Option<SwitchPhase>) -> Value {
    to_value(SwitchPayload { asset, cycle, phase })
}

/// The golden lines, in file order, built through the typed API.
fn expected() -> Vec<ManagementMessage> {
    use MessageType::*;
    let m = ManagementMessage::new;
    vec![
        m(
            DeployShadow,
            "1",
            to_value(DeployPayload {
                asset: 0,
                service: None,
            }),
        ),
        m(Promote, "2", switch(0, Some(6000), None)),
        m(Promote, "3", switch(1, Some(120), Some(SwitchPhase::Prepare))),
        m(Promote, "4", switch(1, Some(120), Some(SwitchPhase::Commit))),
        m(Promote, "5", switch(0, None, Some(SwitchPhase::Release))),
        m(Rollback, "6", switch(0, Some(6500), None)),
        m(Abort, "7", to_value(AbortPayload { asset: 0 })),
        m(Status, "8", to_value(StatusPayload::default())),
        m(
            Status,
            "9",
            to_value(StatusPayload {
                include: vec!["history".into(), "twin_csv".into()],
            }),
        ),
        m(
            SubscribeMetrics,
            "10",
            to_value(SubscribePayload { interval_ms: Some(50) }),
        ),
        ManagementMessage::ack("10", json!({"subscription": "sub-1", "interval_ms": 50})),
        ManagementMessage::ack("7", json!({"state": "Aborted"})),
        ManagementMessage::error(
            "2",
            ErrorReason::Rejected,
            "rejected in state Idle: promotion requires a shadow service",
        ),
        ManagementMessage::error("", ErrorReason::Parse, "parse: expected value at line 1 column 1"),
        m(MetricsPush, "sub-1", json!({"cycle": 41})),
    ]
}

#[test]
fn encoding_matches_golden_lines() {
    let lines: Vec<&str> = GOLDEN.lines().collect();
    let msgs = expected();
    assert_eq!(lines.len(), msgs.len());
    for (line, msg) in lines.iter().zip(&msgs) {
        assert_eq!(codec::encode(msg), format!("{line}\n"));
        assert_eq!(&codec::decode(line).unwrap(), msg);
    }
}

fn idle_device() -> Device {
    let mut s = Scenario::from_toml_str(AB_DEMO).unwrap();
    s.events.clear();
    Device::from_scenario(&s, "dev").unwrap()
}

#[test]
fn golden_requests_get_the_golden_replies() {
    let mut device = idle_device();
    let msgs = expected();
    // Promote before any deployment is refused with exactly this text.
    assert_eq!(dispatch::handle(&mut device, &msgs[1]), msgs[12]);
    assert_eq!(codec::decode("\n").unwrap_err().1.reason(), ErrorReason::Parse);
    let (id, err) = codec::decode("?").unwrap_err();
    assert_eq!(
        ManagementMessage::error(id.unwrap_or_default(), err.reason(), err.to_string()),
        msgs[13]
    );
}

#[test]
fn status_on_idle_reports_idle() {
    let mut device = idle_device();
    let reply = dispatch::handle(
        &mut device,
        &ManagementMessage::new(MessageType::Status, "s", json!({})),
    );
    assert_eq!(reply.kind, MessageType::Ack);
    assert_eq!(reply.id, "s");
    assert_eq!(reply.payload["assets"][0]["state"], "Idle");
    assert_eq!(reply.payload["cycle"], Value::Null);
}

#[test]
fn status_can_carry_exports() {
    let mut device = idle_device();
    device.run_until(30, |_, _| {}).unwrap();
    let msg = ManagementMessage::new(
        MessageType::Status,
        "s",
        json!({"include": ["twin_csv", "metrics_csv"]}),
    );
    let reply = dispatch::handle(&mut device, &msg);
    let twin = reply.payload["exports"]["twin_csv"].as_str().unwrap();
    assert_eq!(twin.lines().count(), 31);
    assert!(twin.starts_with("cycle_start,cycle_end,"));
    let bad = ManagementMessage::new(MessageType::Status, "t", json!({"include": ["secrets"]}));
    let reply = dispatch::handle(&mut device, &bad);
    assert_eq!(reply.error_payload().unwrap().reason, ErrorReason::InvalidPayload);
}

#[test]
fn server_initiated_types_are_not_requests() {
    let mut device = idle_device();
    for kind in [MessageType::Ack, MessageType::Error, MessageType::MetricsPush] {
        let reply = dispatch::handle(&mut device, &ManagementMessage::new(kind, "x", json!({})));
        assert_eq!(reply.error_payload().unwrap().reason, ErrorReason::NotARequest);
    }
}

fn kind() -> impl Strategy<Value = MessageType> {
    prop_oneof![
        Just(MessageType::DeployShadow),
        Just(MessageType::Promote),
        Just(MessageType::Rollback),
        Just(MessageType::Abort),
        Just(MessageType::Status),
        Just(MessageType::SubscribeMetrics),
        Just(MessageType::MetricsPush),
        Just(MessageType::Ack),
        Just(MessageType::Error),
    ]
}

fn payload() -> impl Strategy<Value = Value> {
    let phase = prop_oneof![
        Just(Value::Null),
        Just(json!("prepare")),
        Just(json!("commit")),
        Just(json!("release")),
        Just(json!("bogus")),
    ];
    (0usize..3, proptest::option::of(0u64..400), phase, any::<bool>()).prop_map(|(asset, cycle, phase, extra)| {
        let mut p = json!({"asset": asset});
        if let Some(c) = cycle {
            p["cycle"] = json!(c);
        }
        if !phase.is_null() {
            p["phase"] = phase;
        }
        if extra {
            p["unexpected"] = json!(true);
        }
        p
    })
}

#[derive(Clone, Debug)]
enum Step {
    Request(MessageType, Value),
    Run(u64),
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        4 => (kind(), payload()).prop_map(|(k, p)| Step::Request(k, p)),
        1 => (1u64..40).prop_map(Step::Run),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_request_gets_one_correlated_reply(steps in proptest::collection::vec(step(), 1..60)) {
        let mut device = idle_device();
        for (i, s) in steps.into_iter().enumerate() {
            match s {
                Step::Run(n) => {
                    let until = device.next_cycle() + n;
                    device.run_until(until, |_, _| {}).unwrap();
                }
                Step::Request(kind, payload) => {
                    let id = format!("r{i}");
                    let line = codec::encode(&ManagementMessage::new(kind, id.clone(), payload));
                    let msg = codec::decode(&line).unwrap();
                    let reply = dispatch::handle(&mut device, &msg);
                    prop_assert_eq!(&reply.id, &id);
                    prop_assert!(matches!(reply.kind, MessageType::Ack | MessageType::Error));
                    if reply.kind == MessageType::Error {
                        prop_assert!(reply.error_payload().is_some());
                    }
                    // Replies themselves survive the codec.
                    let again = codec::decode(&codec::encode(&reply)).unwrap();
                    prop_assert_eq!(again, reply);
                }
            }
        }
        prop_assert_eq!(device.executor().fieldbus().faults().len(), 0);
    }

    #[test]
    fn arbitrary_lines_never_panic_the_decoder(line in "\\PC{0,200}") {
        let _ = codec::decode(&line);
    }
}
