#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use drgrade::fundus::GradeLabel;
use drgrade::model::{to_bytes, ConvBlock, Model, ModelConfig, TrainingMeta};
use drgrade_service::{Service, ServiceConfig};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub const TOKEN: &str = "test-admin-token";

pub fn small_model(seed: u64) -> Model {
    Model::build(ModelConfig {
        input_size: 32,
        conv_blocks: vec![ConvBlock::new(4), ConvBlock::new(6)],
        attention_channels: 3,
        hidden_units: 8,
        classes: 5,
        seed,
    })
    .unwrap()
}

pub fn checkpoint_bytes(seed: u64) -> Vec<u8> {
    to_bytes(&small_model(seed), &TrainingMeta::default()).unwrap()
}

pub fn fundus_png(grade: i64, seed: u64) -> Vec<u8> {
    drgrade::synth::generate(GradeLabel::new(grade).unwrap(), 64, seed)
        .encode_png()
        .unwrap()
}

pub struct Dirs {
    pub root: tempfile::TempDir,
}

impl Dirs {
    pub fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        std::fs::create_dir(root.path().join("models")).unwrap();
        Dirs { root }
    }

    /// Same layout with one checkpoint already in the registry.
    pub fn with_model(id: &str, seed: u64) -> Self {
        let d = Self::new();
        std::fs::write(d.models().join(format!("{id}.ckpt")), checkpoint_bytes(seed)).unwrap();
        d
    }

    pub fn models(&self) -> PathBuf {
        self.root.path().join("models")
    }

    pub fn feedback(&self) -> PathBuf {
        self.root.path().join("feedback.ndjson")
    }

    pub fn config(&self) -> ServiceConfig {
        ServiceConfig {
            listen: "127.0.0.1:0".parse().unwrap(),
            model_dir: self.models(),
            feedback_path: self.feedback(),
            admin_token: TOKEN.into(),
            ig_steps: 8,
            image_dir: None,
        }
    }
}

pub struct Running {
    pub base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl Running {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.take().unwrap().await.unwrap().unwrap();
    }
}

pub async fn start(config: ServiceConfig) -> Running {
    let service = Service::open(config).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    let (tx, rx) = oneshot::channel();
    let handle = tokio::spawn(service.run(listener, async {
        let _ = rx.await;
    }));
    Running {
        base: format!("http://{addr}"),
        stop: Some(tx),
        handle: Some(handle),
    }
}

pub fn image_form(bytes: Vec<u8>, file_name: &str) -> reqwest::multipart::Form {
    reqwest::multipart::Form::new().part("image", reqwest::multipart::Part::bytes(bytes).file_name(file_name.to_string()))
}

pub fn checkpoint_form(id: &str, bytes: Vec<u8>) -> reqwest::multipart::Form {
    reqwest::multipart::Form::new()
        .text("model_id", id.to_string())
        .part("checkpoint", reqwest::multipart::Part::bytes(bytes).file_name("model.ckpt"))
}

pub fn read_ndjson(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
