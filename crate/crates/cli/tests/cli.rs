use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tradeflow"));
    c.env_remove("TRADEFLOW_API_KEY");
    c
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn jsonl_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = std::fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(jsonl_under(&p));
            } else if p.extension().is_some_and(|x| x == "jsonl") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_one_transcript_per_seed_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["run", "--variant", "ASTP", "--scenario", "1", "--seeds", "0..2", "--backend", "scripted", "--outdir", "out"];
    let o = run(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let files = jsonl_under(&dir.path().join("out"));
    assert_eq!(files.len(), 3);
    assert!(dir.path().join("out/ASTP/scenario1/2.jsonl").exists());

    let before: Vec<_> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    let mut again = args.to_vec();
    again.push("--resume");
    let o = run(&again, dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 written, 3 skipped"), "{}", stdout(&o));
    let after: Vec<_> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn http_backend_without_key_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["run", "--backend", "http", "--endpoint", "http://127.0.0.1:9/v1", "--seeds", "0", "--outdir", "out"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("TRADEFLOW_API_KEY"));
    assert!(jsonl_under(&dir.path().join("out")).is_empty());
}

#[test]
fn bad_config_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "variants = []\n").unwrap();
    let o = run(&["run", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("variants"));

    std::fs::write(dir.path().join("d.toml"), "[npc]\nbakend = \"rule\"\n").unwrap();
    let o = run(&["run", "--config", "d.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

/// Answers every request with the same OpenAI-style completion.
fn stub_server(content: &'static str) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut authorized = false;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                authorized |= lower.starts_with("authorization: bearer test-key");
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).ok();
            counter.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = if authorized {
                let v = completion_body(content);
                ("200 OK", v)
            } else {
                ("401 Unauthorized", "{\"error\":\"bad key\"}".to_string())
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(resp.as_bytes()).ok();
        }
    });
    (url, hits)
}

fn completion_body(content: &str) -> String {
    let escaped = content.replace('\\', "\\\\").replace('"', "\\\"");
    format!(
        "{{\"choices\":[{{\"message\":{{\"role\":\"assistant\",\"content\":\"{escaped}\"}}}}],\"usage\":{{\"completion_tokens\":42}}}}"
    )
}

#[test]
fn http_backend_against_local_stub() {
    let (url, hits) = stub_server(
        r#"{"last_trade_context":"","context_reason":"greeting","context_type":"CASUAL","npc_thoughts":"","npc_action":"","npc_dialogue":"Welcome, traveller."}"#,
    );
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", "--backend", "http", "--endpoint", &url, "--seeds", "4", "--max-turns", "2", "--outdir", "out"])
        .env("TRADEFLOW_API_KEY", "test-key")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    let t = std::fs::read_to_string(dir.path().join("out/ASTP/scenario1/4.jsonl")).unwrap();
    assert!(t.contains("Welcome, traveller."));
    assert!(t.contains("\"completion_tokens\":42"));
    assert!(t.contains("MAX_TURNS"));
}

#[test]
fn validate_reports_fixture_violations() {
    let dir = tempfile::tempdir().unwrap();
    let clean = run(&["validate", fixture("astp_s1_seed280.jsonl").to_str().unwrap()], dir.path());
    assert_eq!(clean.status.code(), Some(0));
    assert!(stdout(&clean).contains("0 violation(s)"));

    let guard = run(&["validate", fixture("astp_s2_seed154_excerpt.jsonl").to_str().unwrap()], dir.path());
    assert_eq!(guard.status.code(), Some(1));
    assert!(stdout(&guard).contains("turn 10 (exchange 5): COMMIT_WITHOUT_FINAL_CHECK"), "{}", stdout(&guard));

    let price = run(&["validate", fixture("astp_s1_seed242_excerpt.jsonl").to_str().unwrap()], dir.path());
    assert_eq!(price.status.code(), Some(1));
    assert!(stdout(&price).contains("turn 4 (exchange 2): PRICE_MISMATCH"), "{}", stdout(&price));

    std::fs::write(dir.path().join("junk.jsonl"), "not json\n").unwrap();
    assert_eq!(run(&["validate", "junk.jsonl"], dir.path()).status.code(), Some(2));
}

#[test]
fn metrics_pools_scenarios_and_clamps_n() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["astp_s1_seed280.jsonl", "astp_s2_seed154_excerpt.jsonl"] {
        std::fs::copy(fixture(f), dir.path().join(f)).unwrap();
    }
    let o = run(&["metrics", ".", "--normalized-n", "218"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("metrics/summary.csv")).unwrap();
    let pooled = csv.lines().find(|l| l.starts_with("ASTP,all,")).expect(&csv);
    let cols: Vec<_> = pooled.split(',').collect();
    // commit_dialogues, normalized_n, compliant, stcr
    assert_eq!(&cols[3..7], ["2", "2", "1", "50.00"]);
    let matrix = std::fs::read_to_string(dir.path().join("metrics/matrix_ASTP_scenario1.csv")).unwrap();
    assert!(matrix.starts_with("from\\to,C,SI,OS,N,FC,CS,E"));
    assert_eq!(matrix.lines().count(), 8);
}

#[test]
fn metrics_on_offer_only_set_reports_no_others() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("astp_s1_seed242_excerpt.jsonl")).unwrap();
    let first_turn: Vec<_> = text.lines().take(2).collect();
    std::fs::write(dir.path().join("os.jsonl"), first_turn.join("\n") + "\n").unwrap();
    let o = run(&["metrics", "."], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("metrics/summary.csv")).unwrap();
    let row: Vec<_> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[6], "NA", "no commit dialogue");
    assert_eq!((row[7], row[8]), ("1", "1"));
    assert_eq!((row[10], row[12]), ("0", "NA"));
}

#[test]
fn metrics_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["metrics", "."], dir.path()).status.code(), Some(2));
}

#[test]
fn replay_matches_fixture_and_rejects_excerpts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["replay", fixture("astp_s1_seed280.jsonl").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("replay matches: 5 turn(s)"));
    let o = run(&["replay", fixture("astp_s2_seed154_excerpt.jsonl").to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn enforced_runs_always_validate() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "variants = [\"ASTP\", \"AUTOTOD\"]\nseeds = \"0..5\"\nenforce = true\noutdir = \"out\"\n\n[npc]\nskip_final_check_rate = 0.3\nprice_error_rate = 0.2\n",
    )
    .unwrap();
    run(&["run", "--config", "c.toml"], dir.path());
    let files = jsonl_under(&dir.path().join("out"));
    assert_eq!(files.len(), 12);
    for f in files {
        let o = run(&["validate", f.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    }
}

#[test]
fn chat_session_shows_guard_and_saves_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["chat", "--backend", "scripted", "--out", "chat.jsonl"])
        .current_dir(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"Hello! I'd like to buy 2x Healing Potion.\nyes\nyes\nbye\nbye\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("state=FINAL_CHECK"), "{out}");
    assert!(out.contains("guard: passed (FINAL_CHECK -> COMMIT_SALE)"), "{out}");
    assert!(out.contains("state=END"), "{out}");

    let saved = std::fs::read_to_string(dir.path().join("chat.jsonl")).unwrap();
    assert_eq!(saved.lines().filter(|l| l.contains("\"kind\":\"turn\"")).count(), 4);
    assert!(saved.lines().last().unwrap().contains("PLAYER_EXIT"));
}

#[test]
fn help_documents_exit_codes() {
    let o = bin().arg("--help").output().unwrap();
    let text = stdout(&o);
    for needle in ["run", "metrics", "validate", "replay", "chat", "Exit codes", "TRADEFLOW_API_KEY"] {
        assert!(text.contains(needle), "{needle} missing from help");
    }
}
