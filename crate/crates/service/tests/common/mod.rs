#![allow(dead_code)]

use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};
use sgedit_core::inpaint::InpaintSpec;
use sgedit_core::nn::NetworkConfig;
use sgedit_core::pipeline::PipelineConfig;
use sgedit_core::synth::{generate_scene, SceneOptions, SyntheticScene};
use sgedit_service::http::{router, AppState};
use sgedit_service::runner::Runner;
use sgedit_service::store::{Job, JobStatus, Store};

pub fn scene(index: usize) -> SyntheticScene {
    generate_scene(11, index, &SceneOptions::default())
}

pub fn fast_config(iterations: usize) -> PipelineConfig {
    PipelineConfig {
        inpaint: InpaintSpec {
            iterations,
            network: NetworkConfig {
                depth: 3,
                channels: 8,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct Server {
    pub base: String,
    pub store: Arc<Store>,
}

/// Serves `data` on an ephemeral port for the rest of the test process.
pub fn serve(data: &Path, workers: usize, default_spec: PipelineConfig) -> Server {
    let store = Arc::new(Store::open(data).unwrap());
    let runner = Runner::start(Arc::clone(&store), workers).unwrap();
    let state = Arc::new(AppState {
        store: Arc::clone(&store),
        runner,
        default_spec,
        extra_predicates: vec!["above".into()],
    });
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(state)).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    Server {
        base: format!("http://{addr}"),
        store,
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

pub fn get(url: &str) -> (u16, Vec<u8>) {
    let mut r = agent().get(url).call().unwrap();
    let status = r.status().as_u16();
    (status, r.body_mut().read_to_vec().unwrap())
}

pub fn get_json(url: &str) -> (u16, Value) {
    let (s, body) = get(url);
    (s, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

pub fn post_json(url: &str, body: &Value) -> (u16, Value) {
    let mut r = agent().post(url).send_json(body).unwrap();
    let status = r.status().as_u16();
    let v = r.body_mut().read_json::<Value>().unwrap_or(Value::Null);
    (status, v)
}

pub fn session_body(scene: &SyntheticScene) -> Value {
    let png = scene.image.clone().quantized().encode_png().unwrap();
    json!({"image": B64.encode(png), "graph": serde_json::to_value(&scene.graph).unwrap()})
}

pub fn wait_done(store: &Store, id: &str, timeout: Duration) -> Job {
    let start = Instant::now();
    loop {
        let job = store.job(id).unwrap();
        if matches!(job.status, JobStatus::Done | JobStatus::Failed) {
            return job;
        }
        assert!(start.elapsed() < timeout, "job {id} still {:?}", job.status);
        std::thread::sleep(Duration::from_millis(20));
    }
}
