use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use dialeval::botkit::{
    serve_bot, train_markov, Bot, BotError, BotHandle, BotServerConfig, EchoBot, MarkovBot, RetrievalBot, DEGRADED_UTTERANCE,
};
use dialeval::domain::{BotId, Conversation, Origin};
use dialeval::embeddings::{embed_emotion, embed_sentence, EmbeddingError, EmbeddingKind, EmbeddingProvider, RemoteProvider, WordVectorTable};
use dialeval::net::RunningServer;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn listener() -> TcpListener {
    TcpListener::bind("127.0.0.1:0").unwrap()
}

fn history(texts: &[&str]) -> Conversation {
    Conversation::from_texts("h", BotId::new("x", "y", "z"), Origin::Interactive, texts.iter().copied()).unwrap()
}

fn served(bot: Arc<dyn Bot>, id: BotId) -> RunningServer {
    serve_bot(bot, id, listener(), BotServerConfig::default()).unwrap()
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

#[test]
fn info_and_round_trip_for_deterministic_bots() {
    let corpus = ["hello there friend", "how are you doing", "i am fine thanks", "hello again"];
    let table = Arc::new(WordVectorTable::deterministic(
        corpus.iter().flat_map(|t| t.split(' ')).collect::<Vec<_>>().into_iter(),
        8,
    ));
    let bots: Vec<(BotId, Arc<dyn Bot>, f64)> = vec![
        (BotId::new("echo", "none", "baseline"), Arc::new(EchoBot), 1.0),
        (
            BotId::new("markov", "toy", "baseline"),
            Arc::new(MarkovBot::new(train_markov(corpus, 1).unwrap())),
            0.0,
        ),
        (
            BotId::new("retrieval", "toy", "baseline"),
            Arc::new(RetrievalBot::new([(corpus[0], corpus[1]), (corpus[2], corpus[3])], table).unwrap()),
            1.0,
        ),
    ];
    for (id, bot, temperature) in bots {
        let server = served(bot.clone(), id.clone());
        let info: Value = agent().get(&format!("{}/info", server.url())).call().unwrap().body_mut().read_json().unwrap();
        assert_eq!(info, json!({"name": id.name, "dataset": id.dataset, "variant": id.variant}));

        let remote = BotHandle::connect(&server.url(), Duration::from_secs(5)).unwrap().with_temperature(temperature);
        assert_eq!(remote.bot_id, id);
        let local = BotHandle::in_process(id.clone(), bot).with_temperature(temperature);
        for h in [history(&["hello there friend"]), history(&["hi", "yo", "i am fine"])] {
            let mut r1 = ChaCha8Rng::seed_from_u64(1);
            let mut r2 = ChaCha8Rng::seed_from_u64(1);
            assert_eq!(remote.respond(&h, &mut r1).unwrap(), local.respond(&h, &mut r2).unwrap(), "{id}");
        }
    }
}

#[test]
fn identical_requests_get_identical_sampled_replies() {
    let model = train_markov(["a b c d", "a c b d", "b a d c", "d d a b"], 1).unwrap();
    let server = served(Arc::new(MarkovBot::new(model).with_degrade(0.3)), BotId::new("m", "t", "v"));
    let remote = BotHandle::connect(&server.url(), Duration::from_secs(5)).unwrap();
    let h = history(&["a b"]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = remote.respond(&h, &mut rng).unwrap();
    for _ in 0..5 {
        assert_eq!(remote.respond(&h, &mut rng).unwrap(), first);
    }
    let replies: std::collections::BTreeSet<String> =
        (0..40).map(|i| remote.respond(&history(&[&format!("q{i}")]), &mut rng).unwrap()).collect();
    assert!(replies.len() > 2);
    assert!(replies.contains(DEGRADED_UTTERANCE));
}

#[test]
fn server_rejects_bad_requests() {
    let server = served(Arc::new(EchoBot), BotId::new("echo", "none", "baseline"));
    let url = format!("{}/respond", server.url());
    let mut resp = agent().post(&url).send_json(json!({"utterances": [], "temperature": 1.0})).unwrap();
    assert_eq!(resp.status(), 400);
    let body: Value = resp.body_mut().read_json().unwrap();
    assert!(body["error"].is_string());

    let resp = agent().post(&url).content_type("application/json").send("{not json").unwrap();
    assert_eq!(resp.status(), 400);

    let alternation = json!({"utterances": [{"speaker": "A", "text": "a"}, {"speaker": "A", "text": "b"}], "temperature": 1.0});
    assert_eq!(agent().post(&url).send_json(alternation).unwrap().status(), 400);

    let mut ok = agent()
        .post(&url)
        .send_json(json!({"utterances": [{"speaker": "A", "text": "hello"}], "temperature": 1.0}))
        .unwrap();
    assert_eq!(ok.status(), 200);
    assert_eq!(ok.body_mut().read_json::<Value>().unwrap(), json!({"text": "hello"}));
}

struct Slow;

impl Bot for Slow {
    fn respond(&self, _: &Conversation, _: f64, _: &mut dyn RngCore) -> Result<String, BotError> {
        std::thread::sleep(Duration::from_millis(600));
        Ok("late".into())
    }
}

#[test]
fn slow_bot_times_out_as_504() {
    let server = serve_bot(
        Arc::new(Slow),
        BotId::new("slow", "none", "v"),
        listener(),
        BotServerConfig {
            timeout: Duration::from_millis(100),
        },
    )
    .unwrap();
    let resp = agent()
        .post(&format!("{}/respond", server.url()))
        .send_json(json!({"utterances": [{"speaker": "A", "text": "hi"}], "temperature": 1.0}))
        .unwrap();
    assert_eq!(resp.status(), 504);
    let handle = BotHandle::remote(BotId::new("slow", "none", "v"), &server.url(), Duration::from_secs(5));
    let err = handle.respond(&history(&["hi"]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, BotError::Timeout), "{err:?}");
}

fn fixed_status(status: u16, body: Value) -> RunningServer {
    let router = Router::new().route(
        "/respond",
        post(move || {
            let body = body.clone();
            async move { (StatusCode::from_u16(status).unwrap(), Json(body)) }
        }),
    );
    RunningServer::start(listener(), router).unwrap()
}

#[test]
fn remote_status_codes_map_to_errors() {
    let cases: Vec<(u16, Value, fn(&BotError) -> bool)> = vec![
        (500, json!({"error": "boom"}), |e| matches!(e, BotError::Unavailable(m) if m == "boom")),
        (503, json!({"error": "down"}), |e| matches!(e, BotError::Unavailable(_))),
        (504, json!({"error": "slow"}), |e| matches!(e, BotError::Timeout)),
        (400, json!({"error": "bad"}), |e| matches!(e, BotError::Protocol(_))),
        (200, json!({"reply": "wrong field"}), |e| matches!(e, BotError::Protocol(_))),
        (200, json!({"text": "  "}), |e| matches!(e, BotError::Protocol(_))),
    ];
    for (status, body, check) in cases {
        let server = fixed_status(status, body.clone());
        let handle = BotHandle::remote(BotId::new("r", "d", "v"), &server.url(), Duration::from_secs(5));
        let err = handle.respond(&history(&["hi"]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(check(&err), "{status} {body}: {err:?}");
    }
    let gone = {
        let l = listener();
        let addr = l.local_addr().unwrap();
        drop(l);
        format!("http://{addr}")
    };
    let handle = BotHandle::remote(BotId::new("r", "d", "v"), &gone, Duration::from_secs(2));
    assert!(matches!(
        handle.respond(&history(&["hi"]), &mut ChaCha8Rng::seed_from_u64(0)),
        Err(BotError::Unavailable(_))
    ));
}

#[test]
fn client_side_timeout() {
    let router = Router::new().route(
        "/respond",
        post(|| async {
            tokio::time::sleep(Duration::from_millis(800)).await;
            Json(json!({"text": "late"}))
        }),
    );
    let server = RunningServer::start(listener(), router).unwrap();
    let handle = BotHandle::remote(BotId::new("r", "d", "v"), &server.url(), Duration::from_millis(150));
    assert!(matches!(handle.respond(&history(&["hi"]), &mut ChaCha8Rng::seed_from_u64(0)), Err(BotError::Timeout)));
}

type Seen = Arc<Mutex<Vec<Value>>>;

fn embed_service(seen: Seen, status: StatusCode, extra: bool) -> RunningServer {
    let router = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route(
            "/embed",
            post(move |Json(body): Json<Value>| {
                let seen = seen.clone();
                async move {
                    seen.lock().unwrap().push(body.clone());
                    if status != StatusCode::OK {
                        return (status, Json(json!({"error": "model not loaded"})));
                    }
                    let dim = if body["kind"] == "emotion" { 64 } else { 4096 };
                    let mut vectors: Vec<Vec<f64>> = body["texts"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|t| {
                            let n = t.as_str().unwrap().len() as f64;
                            (0..dim).map(|i| ((i as f64 + 1.0) * n).sin().abs() * 2.0).collect()
                        })
                        .collect();
                    if extra {
                        vectors.push(vec![1.0; dim]);
                    }
                    (StatusCode::OK, Json(json!({"vectors": vectors})))
                }
            }),
        );
    RunningServer::start(listener(), router).unwrap()
}

#[test]
fn remote_embedding_protocol() {
    let seen: Seen = Arc::default();
    let server = embed_service(seen.clone(), StatusCode::OK, false);
    let emotion = RemoteProvider::new(&server.url(), EmbeddingKind::Emotion, Duration::from_secs(5));
    let e = embed_emotion(&emotion, "hello").unwrap();
    assert_eq!(e.probabilities().len(), 64);
    assert!((e.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(embed_emotion(&emotion, "hello").unwrap(), e);
    assert_eq!(seen.lock().unwrap()[0], json!({"kind": "emotion", "texts": ["hello"]}));
    assert_eq!(seen.lock().unwrap().len(), 1);

    let sentence = RemoteProvider::new(&server.url(), EmbeddingKind::Sentence, Duration::from_secs(5));
    let batch = sentence.embed_batch(&["a", "bb", "a"]).unwrap();
    assert_eq!(batch.len(), 3);
    assert_eq!(batch[0], batch[2]);
    assert_eq!(seen.lock().unwrap()[1], json!({"kind": "sentence", "texts": ["a", "bb"]}));
    assert_eq!(embed_sentence(&sentence, "bb").unwrap().as_slice().len(), 4096);
}

#[test]
fn remote_embedding_errors() {
    let server = embed_service(Arc::default(), StatusCode::INTERNAL_SERVER_ERROR, false);
    let p = RemoteProvider::new(&server.url(), EmbeddingKind::Emotion, Duration::from_secs(5));
    assert!(matches!(p.embed("x"), Err(EmbeddingError::RemoteUnavailable(m)) if m == "model not loaded"));

    let server = embed_service(Arc::default(), StatusCode::BAD_REQUEST, false);
    let p = RemoteProvider::new(&server.url(), EmbeddingKind::Emotion, Duration::from_secs(5));
    assert!(matches!(p.embed("x"), Err(EmbeddingError::Protocol(_))));

    let server = embed_service(Arc::default(), StatusCode::OK, true);
    let p = RemoteProvider::new(&server.url(), EmbeddingKind::Emotion, Duration::from_secs(5));
    assert!(matches!(p.embed("x"), Err(EmbeddingError::Protocol(_))));
}
