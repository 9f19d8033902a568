use std::net::SocketAddr;

use demoaug_core::augment::{generate_demo_set, GenerationParams};
use demoaug_core::demo::{DemoSource, DemoTrajectory};
use demoaug_core::expert::{plan, Pace};
use demoaug_core::sim::{self, Action, TaskInstance, TaskKind, TaskSpec, Vec3};
use demoaug_teleop::{Server, Session, TeleopError};
use futures_util::{SinkExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start(kind: TaskKind, seed: u64, dir: &std::path::Path) -> SocketAddr {
    let session = Session::new(TaskSpec::new(kind), seed, dir).unwrap();
    let server = Server::bind("127.0.0.1:0", session).await.unwrap();
    let addr = server.local_addr().unwrap();
    tokio::spawn(server.run());
    addr
}

async fn connect(addr: SocketAddr) -> Ws {
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}")).await.unwrap();
    ws
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> Value {
    loop {
        match ws.next().await.expect("stream open").unwrap() {
            Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
            Message::Close(_) => panic!("server closed the connection"),
            _ => continue,
        }
    }
}

fn vec3(v: &Value) -> Vec3 {
    Vec3::new(v[0].as_f64().unwrap(), v[1].as_f64().unwrap(), v[2].as_f64().unwrap())
}

fn instance_of(state: &Value) -> TaskInstance {
    TaskInstance {
        block_starts: state["blocks"].as_array().unwrap().iter().map(|b| vec3(&b["pos"])).collect(),
        goals: state["goals"].as_array().unwrap().iter().map(vec3).collect(),
    }
}

async fn act(ws: &mut Ws, a: Action) -> Value {
    send(ws, json!({"type": "action", "d_pos": [a.d_pos.x, a.d_pos.y, a.d_pos.z], "d_gripper": a.d_gripper})).await;
    let ack = recv(ws).await;
    assert_eq!(ack["type"], "ack", "{ack}");
    recv(ws).await
}

#[tokio::test]
async fn scripted_client_records_a_usable_push_demo() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(TaskKind::Push, 11, dir.path()).await;
    let mut ws = connect(addr).await;
    let spec = TaskSpec::new(TaskKind::Push);

    let mut state = recv(&mut ws).await;
    assert_eq!(state["type"], "state");
    send(&mut ws, json!({"type": "start_recording"})).await;
    assert_eq!(recv(&mut ws).await["of"], "start_recording");

    // The client only sees protocol messages: it plans from the state it was sent.
    let steps = plan(&spec, &instance_of(&state), Pace::DEMO);
    for step in &steps {
        let ee = vec3(&state["ee"]);
        let a = Action { d_pos: (step.target - ee) * (1.0 / sim::MAX_STEP), d_gripper: step.gripper }.clamped();
        state = act(&mut ws, a).await;
    }
    assert_eq!(state["step"], spec.episode_length);
    assert_eq!(state["is_success"], true);

    send(&mut ws, json!({"type": "stop_recording", "save_path": "demos/push.json"})).await;
    let ack = recv(&mut ws).await;
    assert_eq!(ack["type"], "ack", "{ack}");

    let demo = DemoTrajectory::load(dir.path().join("demos/push.json")).unwrap();
    assert_eq!(demo.source, DemoSource::HumanTeleop);
    demo.validate(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = generate_demo_set(&demo, 10, &spec, &GenerationParams::default(), &mut rng).unwrap();
    let successes = set.episodes.len();
    let attempts = set.attempts;
    // Ten successes in at most twelve attempts means at least 8 of the first 10.
    assert!(successes == 10 && attempts <= 12, "{successes}/{attempts}");
}

#[tokio::test]
async fn unsuccessful_recording_is_rejected_without_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(TaskKind::Push, 3, dir.path()).await;
    let mut ws = connect(addr).await;
    recv(&mut ws).await;
    send(&mut ws, json!({"type": "start_recording"})).await;
    recv(&mut ws).await;
    for _ in 0..5 {
        act(&mut ws, Action::new(0.0, 0.0, 1.0, 0.0)).await;
    }
    send(&mut ws, json!({"type": "stop_recording", "save_path": "bad.json"})).await;
    let reply = recv(&mut ws).await;
    assert_eq!(reply["type"], "error");
    assert!(reply["reason"].as_str().unwrap().starts_with("demonstration rejected"), "{reply}");
    assert!(!dir.path().join("bad.json").exists());
}

#[tokio::test]
async fn lockstep_matches_direct_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(TaskKind::PickAndPlace, 8, dir.path()).await;
    let mut ws = connect(addr).await;
    let spec = TaskSpec::new(TaskKind::PickAndPlace);
    recv(&mut ws).await;
    send(&mut ws, json!({"type": "reset"})).await;
    let first = recv(&mut ws).await;
    assert_eq!(first["step"], 0);

    let mut direct = sim::initial_state(&spec, &instance_of(&first)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 1..=50 {
        let a = Action::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let got = act(&mut ws, a).await;
        let (next, out) = sim::step(&direct, a, &spec).unwrap();
        direct = next;
        assert_eq!(got["step"], k);
        assert_eq!(vec3(&got["ee"]), direct.ee_pos);
        assert_eq!(got["width"].as_f64().unwrap(), direct.gripper_width);
        assert_eq!(vec3(&got["blocks"][0]["pos"]), direct.blocks[0].pos);
        assert_eq!(got["blocks"][0]["grasped"], direct.grasped_block == Some(0));
        assert_eq!(got["reward"].as_f64().unwrap(), out.reward);
    }
    for _ in 50..spec.episode_length {
        act(&mut ws, Action::new(0.0, 0.0, 0.0, 0.0)).await;
    }
    send(&mut ws, json!({"type": "action", "d_pos": [0, 0, 0], "d_gripper": 0})).await;
    assert_eq!(recv(&mut ws).await["type"], "error");
}

#[tokio::test]
async fn bad_frames_do_not_disconnect() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(TaskKind::Push, 1, dir.path()).await;
    let mut ws = connect(addr).await;
    recv(&mut ws).await;
    for bad in ["{", r#"{"type":"teleport"}"#, r#"{"type":"action","d_pos":"up","d_gripper":0}"#] {
        ws.send(Message::text(bad)).await.unwrap();
        let reply = recv(&mut ws).await;
        assert_eq!(reply["type"], "error", "{bad}");
        assert!(reply["reason"].as_str().is_some_and(|r| !r.is_empty()));
    }
    ws.send(Message::binary(vec![1u8, 2, 3])).await.unwrap();
    assert_eq!(recv(&mut ws).await["type"], "error");
    send(&mut ws, json!({"type": "start_recording"})).await;
    recv(&mut ws).await;
    send(&mut ws, json!({"type": "start_recording"})).await;
    assert_eq!(recv(&mut ws).await, json!({"type": "error", "reason": "already recording"}));
    let clamped = {
        send(&mut ws, json!({"type": "action", "d_pos": [3.0, 0, 0], "d_gripper": 0})).await;
        recv(&mut ws).await
    };
    assert_eq!(clamped, json!({"type": "ack", "of": "action", "clamped": true}));
}

#[tokio::test]
async fn second_client_is_turned_away() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(TaskKind::Push, 1, dir.path()).await;
    let mut first = connect(addr).await;
    recv(&mut first).await;
    let mut second = connect(addr).await;
    let reply = recv(&mut second).await;
    assert_eq!(reply["type"], "error");
    // The first client keeps control.
    send(&mut first, json!({"type": "reset"})).await;
    assert_eq!(recv(&mut first).await["type"], "state");

    drop(first);
    let mut third = None;
    for _ in 0..50 {
        let mut ws = connect(addr).await;
        if recv(&mut ws).await["type"] == "state" {
            third = Some(ws);
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    assert!(third.is_some(), "control was never released");
}

#[tokio::test]
async fn port_in_use_is_a_startup_error() {
    let dir = tempfile::tempdir().unwrap();
    let taken = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let session = Session::new(TaskSpec::new(TaskKind::Push), 0, dir.path()).unwrap();
    assert!(matches!(Server::bind(&addr, session).await, Err(TeleopError::Bind { .. })));
}
