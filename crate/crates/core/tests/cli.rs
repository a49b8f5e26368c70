use std::path::{Path, PathBuf};
use std::process::Command;

use dialeval::cli::{read_features, run, RunManifest};
use dialeval::domain::{BotId, Conversation, LikertScores, Origin, RatingRecord, Vote};
use dialeval::hybrid::HybridModel;
use dialeval::metrics::FEATURE_NAMES;
use serde_json::Value;

const LINES: [&str; 10] = [
    "hello how are you today?",
    "i am good thanks, just got back from work",
    "what do you do for work?",
    "i teach music to kids haha",
    "that sounds fun, do you play guitar?",
    "yes and a little piano too",
    "i love piano music so much",
    "me too, it makes me happy",
    "where do you teach?",
    "at a small school near the park",
];

fn dialeval(args: &[&str]) -> i32 {
    run(std::iter::once("dialeval").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

/// Interactive conversations for four bots with two ratings each.
fn human_data(dir: &Path) -> (PathBuf, PathBuf) {
    let mut convs = String::new();
    let mut ratings = String::new();
    for b in 0..4 {
        let variant = if b % 2 == 0 { "EI" } else { "baseline" };
        let bot = BotId::new(format!("bot{b}"), "toy", variant);
        for i in 0..6 {
            let texts: Vec<&str> = (0..6).map(|j| LINES[(b + i * 3 + j * (b + 1)) % LINES.len()]).collect();
            let id = format!("b{b}-c{i}");
            let mut conv = Conversation::from_texts(id.clone(), bot.clone(), Origin::Interactive, texts).unwrap();
            conv = conv.with_vote(1, if (b + i) % 2 == 0 { Vote::Up } else { Vote::Down }).unwrap();
            convs.push_str(&(conv.to_json_line() + "\n"));
            for (a, shift) in [("ann1", 0), ("ann2", 1)] {
                let q = 1 + ((b * 2 + i + shift) % 7) as i64;
                let rec = RatingRecord {
                    conversation_id: id.clone(),
                    annotator_id: a.into(),
                    scores: LikertScores::new(q, 4, 1 + (i as i64 % 7), 5, 3).unwrap(),
                };
                ratings.push_str(&(rec.to_json_line() + "\n"));
            }
        }
    }
    let (c, r) = (dir.join("human.jsonl"), dir.join("ratings.jsonl"));
    std::fs::write(&c, convs).unwrap();
    std::fs::write(&r, ratings).unwrap();
    (c, r)
}

#[test]
fn corpus_extract_on_three_comment_chain() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("comments.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"id":"c1","parent_id":"t3_post","body":"what is your favorite food?","author":"u1","created_utc":1}"#, "\n",
            r#"{"id":"c2","parent_id":"t1_c1","body":"pizza, see https://example.com","author":"u2","created_utc":2}"#, "\n",
            r#"{"id":"c3","parent_id":"t1_c2","body":"nice choice\nedit: typo","author":"u3","created_utc":3}"#, "\n",
        ),
    )
    .unwrap();
    let out = dir.path().join("conv.jsonl");
    assert_eq!(dialeval(&["corpus", "extract", "--in", p(&input), "--out", p(&out)]), 0);
    let convs = lines(&out);
    assert_eq!(convs.len(), 1);
    let conv: Conversation = serde_json::from_str(&convs[0]).unwrap();
    assert_eq!(conv.texts().collect::<Vec<_>>(), ["what is your favorite food?", "pizza, see", "nice choice"]);
    assert_eq!(conv.origin, Origin::Corpus);

    let manifest = RunManifest::load(RunManifest::path_for(&out)).unwrap();
    assert_eq!(manifest.command, "corpus extract");
    assert_eq!(manifest.outputs, [p(&out)]);
    assert_eq!(manifest.inputs, [p(&input)]);

    let stats = dir.path().join("stats.json");
    assert_eq!(dialeval(&["corpus", "stats", "--in", p(&out), "--out", p(&stats)]), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(v["conversation_count"], 1);
    assert_eq!(v["median_turns"], 3);
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dialeval");
    let unknown = Command::new(bin).args(["corpus", "extract", "--bogus"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));

    let missing = Command::new(bin)
        .args(["corpus", "stats", "--in", "/nonexistent/conv.jsonl"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("nonexistent"), "{err}");
    assert!(err["causes"].is_array());
}

#[test]
fn metrics_hybrid_and_correlation_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (human, ratings) = human_data(d);
    let features = d.join("features.csv");
    assert_eq!(dialeval(&["metrics", "compute", "--in", p(&human), "--out", p(&features)]), 0);
    let rows = csv_rows(&features);
    let mut header = vec!["conversation_id".to_string(), "bot_id".to_string()];
    header.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    assert_eq!(rows[0], header);
    assert_eq!(rows.len(), 1 + 24);
    assert_eq!(read_features(&features).unwrap().len(), 24);

    let model_path = d.join("model.json");
    assert_eq!(
        dialeval(&["hybrid", "fit", "--features", p(&features), "--ratings", p(&ratings), "--held-out", "bot0@toy/EI", "--out", p(&model_path)]),
        0
    );
    let model = HybridModel::load(&model_path).unwrap();
    assert_eq!(model.held_out_bot, BotId::new("bot0", "toy", "EI"));
    assert_eq!(model.n_train, 18);

    let report = d.join("report");
    assert_eq!(dialeval(&["hybrid", "report", "--features", p(&features), "--ratings", p(&ratings), "--out-dir", p(&report)]), 0);
    let lambdas = csv_rows(&report.join("lambdas.csv"));
    assert_eq!(lambdas[0], ["feature", "mean", "ci_low", "ci_high"]);
    assert_eq!(lambdas.len(), 1 + FEATURE_NAMES.len());
    let models: Value = serde_json::from_str(&std::fs::read_to_string(report.join("models.json")).unwrap()).unwrap();
    assert_eq!(models.as_object().unwrap().len(), 4);

    let corr = d.join("corr.csv");
    assert_eq!(
        dialeval(&["stats", "correlate", "--features", p(&features), "--ratings", p(&ratings), "--method", "spearman", "--out", p(&corr)]),
        0
    );
    let rows = csv_rows(&corr);
    assert_eq!(rows[0], ["metric", "n", "quality", "fluency", "diversity", "relatedness", "empathy"]);
    assert_eq!(rows.len(), 1 + FEATURE_NAMES.len());
    assert!(rows[1..].iter().all(|r| r[1] == "24"));
    // fluency is constant, so its column is empty
    assert!(rows[1..].iter().all(|r| r[3].is_empty()));

    // self-play for the held-out bot, scored and joined at bot level
    let corpus = d.join("corpus.jsonl");
    std::fs::copy(&human, &corpus).unwrap();
    let sp = d.join("selfplay.jsonl");
    assert_eq!(
        dialeval(&[
            "selfplay", "run", "--bot", "builtin:markov", "--corpus", p(&corpus), "--bot-id", "bot0@toy/EI", "--n", "6", "--turns", "8", "--seed", "4",
            "--out", p(&sp),
        ]),
        0
    );
    let convs: Vec<Conversation> = lines(&sp).iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(convs.len(), 6);
    assert!(convs.iter().all(|c| c.len() == 8 && c.origin == Origin::Selfplay));
    assert_eq!(convs[5].id, "selfplay-4-0005");

    let scores = d.join("scores.csv");
    let per = d.join("per.csv");
    assert_eq!(
        dialeval(&["selfplay", "score", "--model", p(&model_path), "--in", p(&sp), "--out", p(&scores), "--per-conversation", p(&per)]),
        0
    );
    let rows = csv_rows(&scores);
    assert_eq!(rows[0], ["bot_id", "n_conversations", "mean_mh"]);
    assert_eq!(rows[1][..2], ["bot0@toy/EI", "6"]);
    let per_rows = csv_rows(&per);
    assert_eq!(per_rows.len(), 7);
    let mean: f64 = per_rows[1..].iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / 6.0;
    assert!((mean - rows[1][2].parse::<f64>().unwrap()).abs() < 1e-9);

    let other_model = d.join("other.json");
    assert_eq!(
        dialeval(&["hybrid", "fit", "--features", p(&features), "--ratings", p(&ratings), "--held-out", "bot1@toy/baseline", "--out", p(&other_model)]),
        0
    );
    assert_eq!(dialeval(&["selfplay", "score", "--model", p(&other_model), "--in", p(&sp), "--out", p(&d.join("x.csv"))]), 1);

    let bot_corr = d.join("bot_corr.csv");
    let base = ["stats", "correlate", "--features", p(&features), "--ratings", p(&ratings), "--selfplay-scores", p(&scores), "--out", p(&bot_corr)];
    assert_eq!(dialeval(&base), 1);
    let mut at_bot = base.to_vec();
    at_bot.extend(["--level", "bot"]);
    assert_eq!(dialeval(&at_bot), 0);
    let rows = csv_rows(&bot_corr);
    let mh = rows.iter().find(|r| r[0] == "mh_selfplay").unwrap();
    assert_eq!(mh[1], "1");
    assert!(rows.iter().filter(|r| r[0] != "metric" && r[0] != "mh_selfplay").all(|r| r[1] == "4"));

    let overlap = d.join("overlap.json");
    assert_eq!(dialeval(&["selfplay", "overlap", "--in", p(&sp), "--window", "2", "--training", p(&corpus), "--out", p(&overlap)]), 0);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&overlap).unwrap()).unwrap();
    assert_eq!(v["mode"], "training");
    assert_eq!(v["conversations"], 6);
    assert!((0.0..=100.0).contains(&v["percent"].as_f64().unwrap()));
}

#[test]
fn trajectory_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (human, ratings) = human_data(d);
    let out = d.join("traj");
    assert_eq!(
        dialeval(&["report", "trajectories", "--conversations", p(&human), "--ratings", p(&ratings), "--out-dir", p(&out), "--top-n", "5", "--bottom-n", "5"]),
        0
    );
    for name in ["top", "bottom", "ei", "baseline"] {
        let rows = csv_rows(&out.join(format!("{name}.csv")));
        assert_eq!(rows[0][0], "turn");
        assert_eq!((rows[0].len() - 1) % 4, 0, "{name}: {:?}", rows[0]);
        for triple in rows[0][1..].chunks(4) {
            let metric = triple[0].strip_suffix("_n").unwrap();
            assert_eq!(triple[1..], [format!("{metric}_mean"), format!("{metric}_ci_low"), format!("{metric}_ci_high")]);
        }
        let turns: Vec<usize> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(turns, (0..turns.len()).collect::<Vec<_>>(), "{name}: one row per turn index");
        assert!(!turns.is_empty());
    }
    let top = csv_rows(&out.join("top.csv"));
    assert_eq!(top[1][1], "5");
}

#[test]
fn rerun_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (human, _) = human_data(d);
    let out = d.join("sp.jsonl");
    let openers = d.join("openers.txt");
    std::fs::write(&openers, "hello there\nwhat do you do?\n").unwrap();
    let args = [
        "selfplay", "run", "--bot", "builtin:markov", "--corpus", p(&human), "--degrade", "0.3", "--n", "12", "--turns", "10", "--seed", "77",
        "--openers", p(&openers), "--out", p(&out),
    ];
    assert_eq!(dialeval(&args), 0);
    let first = std::fs::read(&out).unwrap();
    assert_eq!(dialeval(&args), 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);

    let manifest_path = RunManifest::path_for(&out);
    let manifest = RunManifest::load(&manifest_path).unwrap();
    assert_eq!(manifest.seed, Some(77));
    assert_eq!(manifest.config["selfplay"]["n_conversations"], 12);
    assert_eq!(manifest.config["bot_id"], "markov-d0.3@human/baseline");
    let kept = d.join("kept.manifest.json");
    std::fs::copy(&manifest_path, &kept).unwrap();
    std::fs::remove_file(&out).unwrap();
    assert_eq!(dialeval(&["rerun", p(&kept)]), 0);
    assert_eq!(std::fs::read(&out).unwrap(), first);

    let mut other = args.to_vec();
    let seed_at = other.len() - 5;
    other[seed_at] = "78";
    assert_eq!(dialeval(&other), 0);
    assert_ne!(std::fs::read(&out).unwrap(), first);
}
