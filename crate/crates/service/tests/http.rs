use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use gatedgan::latent::EditSession;
use gatedgan::model::{ArchConfig, Generator, GeneratorCheckpoint, NoiseGateConfig, StyleMixSpec};
use gatedgan_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};

fn arch(res: usize) -> ArchConfig {
    ArchConfig {
        latent_dim: 16,
        channel_base: 128.max(res),
        channel_max: 8,
        noise_strength_init: 0.1,
        ..ArchConfig::toy(res)
    }
}

fn write_model(dir: &Path, id: &str, res: usize, gates: &str, seed: u64) {
    let a = arch(res);
    let g = Generator::new(&a, seed).unwrap();
    let gates = NoiseGateConfig::parse(gates, &a).unwrap();
    GeneratorCheckpoint::new(g, gates)
        .unwrap()
        .save(&dir.join(format!("{id}.ckpt")))
        .unwrap();
}

fn config(model_dir: &Path, cache: Option<PathBuf>) -> ServiceConfig {
    ServiceConfig {
        model_dir: model_dir.to_path_buf(),
        workers: 2,
        basis_cache_dir: cache,
        pca_samples: 128,
        w_mean_samples: 256,
        max_upload_bytes: 64 << 10,
        ..ServiceConfig::default()
    }
}

struct Server {
    base: String,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Server {
    fn start(cfg: ServiceConfig, load: bool) -> Self {
        let state = AppState::new(cfg).unwrap();
        if load {
            state.load_all().unwrap();
        }
        Self::with_state(state)
    }

    fn with_state(state: Arc<AppState>) -> Self {
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, router(state))
                    .with_graceful_shutdown(async {
                        stopped.await.ok();
                    })
                    .await
                    .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Self {
            base: format!("http://{addr}"),
            stop: Some(stop),
            thread: Some(thread),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            s.send(()).ok();
        }
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

fn get(url: &str) -> (u16, Vec<u8>) {
    let mut r = agent().get(url).call().unwrap();
    (r.status().as_u16(), r.body_mut().read_to_vec().unwrap())
}

fn post(url: &str, content_type: &str, body: &[u8]) -> (u16, Vec<u8>) {
    let mut r = agent()
        .post(url)
        .header("content-type", content_type)
        .send(body)
        .unwrap();
    let status = r.status().as_u16();
    let body = r
        .body_mut()
        .with_config()
        .limit(64 << 20)
        .read_to_vec()
        .unwrap();
    (status, body)
}

fn post_json(url: &str, v: &Value) -> (u16, Value) {
    let (s, b) = post(url, "application/json", &serde_json::to_vec(v).unwrap());
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn get_json(url: &str) -> (u16, Value) {
    let (s, b) = get(url);
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn session(model: &str, latent_seed: i64, noise_seed: i64) -> Value {
    serde_json::to_value(EditSession::new(model, latent_seed, noise_seed)).unwrap()
}

fn edited_session(model: &str) -> Value {
    let mut s = EditSession::new(model, 7, 11);
    s.truncation = 0.7;
    s.style_mix = Some(StyleMixSpec {
        cutoff: 2,
        strength: 0.5,
        mix_seed: 3,
    });
    s.pca_edits = vec![gatedgan::latent::PcaEdit::new(0, 3.0), gatedgan::latent::PcaEdit::new(2, -1.5)];
    serde_json::to_value(s).unwrap()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("models")).unwrap();
    write_model(&dir.path().join("models"), "toy", 16, "off:4-8", 1);
    dir
}

#[test]
fn concurrent_identical_sessions_render_identical_png() {
    let dir = fixture();
    let server = Server::start(config(&dir.path().join("models"), None), true);
    let url = server.url("/v1/generate?format=png");
    let body = serde_json::to_vec(&edited_session("toy")).unwrap();
    let handles: Vec<_> = (0..100)
        .map(|_| {
            let (url, body) = (url.clone(), body.clone());
            thread::spawn(move || post(&url, "application/json", &body))
        })
        .collect();
    let results: Vec<(u16, Vec<u8>)> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(results.iter().all(|(s, _)| *s == 200));
    assert!(results.iter().all(|(_, png)| png == &results[0].1));
    assert_eq!(&results[0].1[1..4], b"PNG");

    let (s, v) = post_json(&server.url("/v1/generate"), &edited_session("toy"));
    assert_eq!(s, 200);
    let png = BASE64.decode(v["image_png_base64"].as_str().unwrap()).unwrap();
    assert_eq!(png, results[0].1);
    assert_eq!(v["session_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn restart_reproduces_images_and_cached_basis() {
    let dir = fixture();
    let cache = dir.path().join("bases");
    let cfg = config(&dir.path().join("models"), Some(cache.clone()));
    let render = |server: &Server| {
        let body = serde_json::to_vec(&edited_session("toy")).unwrap();
        let (s, png) = post(&server.url("/v1/generate?format=png"), "application/json", &body);
        assert_eq!(s, 200);
        let (s, pca) = get_json(&server.url("/v1/pca/toy?k=5"));
        assert_eq!(s, 200);
        (png, pca)
    };
    let first = {
        let server = Server::start(cfg.clone(), true);
        render(&server)
    };
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), 1);
    let second = render(&Server::start(cfg.clone(), true));
    assert_eq!(first, second);
    let uncached = render(&Server::start(config(&dir.path().join("models"), None), true));
    assert_eq!(first, uncached);
}

#[test]
fn plain_session_matches_core_generate() {
    let dir = fixture();
    let cfg = config(&dir.path().join("models"), None);
    let state = AppState::new(cfg).unwrap();
    let model = state.load_model("toy").unwrap();
    let server = Server::with_state(state);
    let body = serde_json::to_vec(&session("toy", 42, 9)).unwrap();
    let (s, png) = post(&server.url("/v1/generate?format=png"), "application/json", &body);
    assert_eq!(s, 200);
    let (img, _, _) = gatedgan::model::generate(42, 9, 1.0, &model.ckpt).unwrap();
    assert_eq!(png, img.to_png());
}

#[test]
fn latent_archive_round_trip() {
    let dir = fixture();
    let server = Server::start(config(&dir.path().join("models"), None), true);
    let (s, v) = post_json(&server.url("/v1/generate"), &edited_session("toy"));
    assert_eq!(s, 200);
    let original = BASE64.decode(v["image_png_base64"].as_str().unwrap()).unwrap();
    let id = v["latent_id"].as_str().unwrap().to_string();

    let (s, archive) = get(&server.url(&format!("/v1/latent/{id}")));
    assert_eq!(s, 200);
    let (s, png) = get(&server.url(&format!("/v1/latent/{id}/render")));
    assert_eq!(s, 200);
    assert_eq!(png, original);

    // A fresh server has never seen the archive.
    let other = Server::start(config(&dir.path().join("models"), None), true);
    let (s, _) = get(&other.url(&format!("/v1/latent/{id}")));
    assert_eq!(s, 404);
    let (s, up) = post(&other.url("/v1/latent"), "application/octet-stream", &archive);
    assert_eq!(s, 201);
    let up: Value = serde_json::from_slice(&up).unwrap();
    assert_eq!(up["latent_id"], id.as_str());
    let (_, again) = get(&other.url(&format!("/v1/latent/{id}")));
    assert_eq!(again, archive);
    let (s, png) = get(&other.url(&format!("/v1/latent/{id}/render")));
    assert_eq!(s, 200);
    assert_eq!(png, original);
}

#[test]
fn out_of_range_fields_are_rejected_individually() {
    let dir = fixture();
    let server = Server::start(config(&dir.path().join("models"), None), true);
    let (_, models) = get_json(&server.url("/v1/models"));
    let l = models["models"][0]["detail"]["num_ws"].as_u64().unwrap();
    let base = edited_session("toy");
    let cases: Vec<(&str, Box<dyn Fn(&mut Value)>)> = vec![
        ("truncation", Box::new(|s| s["truncation"] = json!(2.5))),
        ("truncation", Box::new(|s| s["truncation"] = json!(-2.01))),
        ("style_mix.cutoff", Box::new(move |s| s["style_mix"]["cutoff"] = json!(l))),
        ("style_mix.strength", Box::new(|s| s["style_mix"]["strength"] = json!(1.5))),
        ("style_mix.strength", Box::new(|s| s["style_mix"]["strength"] = json!(-0.1))),
        (
            "pca_edits[1].direction_index",
            Box::new(|s| s["pca_edits"][1]["direction_index"] = json!(512)),
        ),
        ("pca_edits[0].weight", Box::new(|s| s["pca_edits"][0]["weight"] = json!(40.5))),
        ("pca_edits[0].weight", Box::new(|s| s["pca_edits"][0]["weight"] = json!(-41))),
        (
            "pca_edits",
            Box::new(|s| s["pca_edits"] = json!(vec![json!({"direction_index": 0, "weight": 1.0}); 11])),
        ),
    ];
    for (field, mutate) in cases {
        let mut s = base.clone();
        mutate(&mut s);
        let (status, v) = post_json(&server.url("/v1/generate"), &s);
        assert_eq!(status, 400, "{field}: {v}");
        let fields: Vec<&str> = v["error"]["fields"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["field"].as_str().unwrap())
            .collect();
        assert_eq!(fields, vec![field], "{v}");
    }
    let (status, _) = post_json(&server.url("/v1/generate"), &base);
    assert_eq!(status, 200);
    let (status, _) = post_json(&server.url("/v1/generate"), &json!({"model_id": "toy"}));
    assert_eq!(status, 400);
}

#[test]
fn error_statuses() {
    let dir = fixture();
    let models = dir.path().join("models");
    write_model(&models, "wide", 16, "on", 2);
    write_model(&models, "big", 32, "off:4-8", 3);
    let server = Server::start(config(&models, None), true);

    let (s, v) = post_json(&server.url("/v1/generate"), &session("nope", 1, 1));
    assert_eq!((s, v["error"]["code"].as_str()), (404, Some("not_found")));
    assert_eq!(get(&server.url("/v1/jobs/job-00ffffff")).0, 404);
    assert_eq!(get(&server.url("/v1/pca/nope")).0, 404);
    assert_eq!(get(&server.url("/v1/latent/deadbeef")).0, 404);
    assert_eq!(get(&server.url("/v1/pca/toy?k=0")).0, 400);

    let (_, v) = post_json(&server.url("/v1/generate"), &session("toy", 1, 1));
    let id = v["latent_id"].as_str().unwrap();
    let (_, archive) = get(&server.url(&format!("/v1/latent/{id}")));
    for target in ["wide", "big"] {
        let (s, v) = post(&server.url(&format!("/v1/latent?model_id={target}")), "application/octet-stream", &archive);
        let v: Value = serde_json::from_slice(&v).unwrap();
        assert_eq!((s, v["error"]["code"].as_str()), (409, Some("architecture_mismatch")), "{v}");
    }
    let (s, v) = post(&server.url("/v1/latent"), "application/octet-stream", &archive[..archive.len() - 7]);
    let v: Value = serde_json::from_slice(&v).unwrap();
    assert_eq!(s, 422);
    assert!(v["error"]["offset"].as_u64().is_some(), "{v}");
    let mut corrupt = archive.clone();
    corrupt[0] ^= 0xff;
    let (s, v) = post(&server.url("/v1/latent"), "application/octet-stream", &corrupt);
    let v: Value = serde_json::from_slice(&v).unwrap();
    assert_eq!((s, v["error"]["offset"].as_u64()), (422, Some(0)));

    let (s, _) = post(&server.url("/v1/latent"), "application/octet-stream", &vec![0u8; 65 << 10]);
    assert_eq!(s, 413);
    let huge = json!({"model_id": "toy", "image_png_base64": "A".repeat(80 << 10)});
    assert_eq!(post_json(&server.url("/v1/project"), &huge).1["error"]["code"], "payload_too_large");

    let (s, _) = post_json(&server.url("/v1/project"), &json!({"model_id": "toy", "image_png_base64": "not base64!"}));
    assert_eq!(s, 422);
    let garbage = BASE64.encode(b"definitely not a png");
    let (s, _) = post_json(&server.url("/v1/project"), &json!({"model_id": "toy", "image_png_base64": garbage}));
    assert_eq!(s, 422);
    let (_, v) = post_json(&server.url("/v1/generate"), &session("big", 1, 1));
    let (s, v) = post_json(&server.url("/v1/project"), &json!({"model_id": "toy", "image_png_base64": v["image_png_base64"]}));
    assert_eq!(s, 422, "{v}");
    let (s, _) = post_json(&server.url("/v1/project"), &json!({"model_id": "nope", "image_png_base64": ""}));
    assert_eq!(s, 404);
}

#[test]
fn models_listing() {
    let empty = tempfile::tempdir().unwrap();
    let server = Server::start(config(empty.path(), None), true);
    let (s, v) = get_json(&server.url("/v1/models"));
    assert_eq!(s, 200);
    assert_eq!(v["models"], json!([]));

    let dir = fixture();
    let models = dir.path().join("models");
    write_model(&models, "large", 256, "coarse-off", 4);
    std::fs::write(models.join("notes.txt"), "not a model").unwrap();
    let server = Server::start(config(&models, None), true);
    let (_, v) = get_json(&server.url("/v1/models"));
    let list = v["models"].as_array().unwrap();
    let ids: Vec<&str> = list.iter().map(|m| m["model_id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec!["large", "toy"]);
    let large = &list[0]["detail"];
    assert_eq!((large["resolution"].as_u64(), large["num_ws"].as_u64()), (Some(256), Some(14)));
    assert_eq!(large["latent_dim"], 16);
    assert_eq!(large["gate_config"], "off:4-32,on:64-256");
    assert_eq!(large["basis_available"], true);
    assert_eq!(large["limits"]["cutoff"], json!([0, 13]));
    assert_eq!(large["limits"]["direction"], json!([0, 511]));
}

#[test]
fn pca_summary_is_sorted_and_stable() {
    let dir = fixture();
    let server = Server::start(config(&dir.path().join("models"), None), true);
    let (s, a) = get_json(&server.url("/v1/pca/toy?k=10"));
    assert_eq!(s, 200);
    let vars: Vec<f64> = a["variances"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(vars.len(), 10);
    assert!(vars.windows(2).all(|p| p[0] >= p[1]));
    assert_eq!(get_json(&server.url("/v1/pca/toy?k=10")).1, a);
    let (_, all) = get_json(&server.url("/v1/pca/toy?k=1000"));
    assert_eq!(all["k"], 16);
    let (_, default) = get_json(&server.url("/v1/pca/toy"));
    assert_eq!(default["k"], 10);
}

#[test]
fn unloaded_model_answers_503_until_ready() {
    let dir = fixture();
    let state = AppState::new(config(&dir.path().join("models"), None)).unwrap();
    let server = Server::with_state(state.clone());
    let (s, v) = post_json(&server.url("/v1/generate"), &session("toy", 1, 1));
    assert_eq!((s, v["error"]["code"].as_str()), (503, Some("model_loading")));
    assert_eq!(get_json(&server.url("/v1/models")).1["models"][0]["status"], "pending");
    state.load_model("toy").unwrap();
    assert_eq!(post_json(&server.url("/v1/generate"), &session("toy", 1, 1)).0, 200);
}

#[test]
fn projection_job_inverts_a_served_image() {
    let dir = fixture();
    let server = Server::start(config(&dir.path().join("models"), None), true);
    let (_, v) = post_json(&server.url("/v1/generate"), &session("toy", 5, 6));
    let original = BASE64.decode(v["image_png_base64"].as_str().unwrap()).unwrap();
    let (s, job) = post_json(
        &server.url("/v1/project"),
        &json!({"model_id": "toy", "image_png_base64": v["image_png_base64"]}),
    );
    assert_eq!(s, 202);
    let job_id = job["job_id"].as_str().unwrap();
    let deadline = Instant::now() + Duration::from_secs(600);
    let done = loop {
        let (s, v) = get_json(&server.url(&format!("/v1/jobs/{job_id}")));
        assert_eq!(s, 200);
        match v["status"].as_str().unwrap() {
            "done" => break v,
            "failed" => panic!("projection failed: {v}"),
            _ => {}
        }
        assert!(Instant::now() < deadline, "projection timed out");
        thread::sleep(Duration::from_millis(200));
    };
    assert!(done["loss"]["mse"].as_f64().unwrap() < 0.01, "{done}");
    assert_eq!(done["loss"]["steps"], 1000);
    let latent_id = done["latent_id"].as_str().unwrap();
    let (s, png) = get(&server.url(&format!("/v1/latent/{latent_id}/render")));
    assert_eq!(s, 200);
    let a = gatedgan::model::ImageTensor::from_png(&png).unwrap();
    let b = gatedgan::model::ImageTensor::from_png(&original).unwrap();
    assert!(a.mse(&b) < 0.01);
}
