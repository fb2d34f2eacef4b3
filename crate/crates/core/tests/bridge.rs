//! JSON-lines oracle client against in-process and child-process stubs.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::process::Command;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use promptbound::harness::{
    run_experiment, DataSource, ExperimentConfig, ExperimentKind, PriorConfig,
};
use promptbound::prior::{point_mass_kl, KlPolicy};
use promptbound::{Error, OracleBridgePrior, PriorModel, PromptSet, SyntheticSpec, TokenId};

const SECOND: Duration = Duration::from_secs(1);

/// Connects a bridge to a stub thread. `respond` maps each request to the
/// lines written back (possibly none).
fn stub<F>(
    vocab_size: usize,
    timeout: Duration,
    respond: F,
) -> (OracleBridgePrior, mpsc::Receiver<Value>)
where
    F: Fn(&Value) -> Vec<String> + Send + 'static,
{
    let (client, server) = UnixStream::pair().unwrap();
    let (seen_tx, seen_rx) = mpsc::channel();
    thread::spawn(move || {
        let mut out = server.try_clone().unwrap();
        for line in BufReader::new(server).lines() {
            let Ok(line) = line else { return };
            let req: Value = serde_json::from_str(&line).unwrap();
            for reply in respond(&req) {
                if writeln!(out, "{reply}").is_err() {
                    return;
                }
            }
            let _ = seen_tx.send(req);
        }
    });
    let reader = client.try_clone().unwrap();
    (
        OracleBridgePrior::from_streams(reader, client, vocab_size, timeout),
        seen_rx,
    )
}

fn id(req: &Value) -> u64 {
    req["id"].as_u64().unwrap()
}

fn uniform_reply(req: &Value, v: usize) -> String {
    let lp = -(v as f64).ln();
    json!({ "id": id(req), "tokens": (0..v).collect::<Vec<_>>(), "logprobs": vec![lp; v] })
        .to_string()
}

fn ids(v: &[u32]) -> Vec<TokenId> {
    v.iter().map(|&i| TokenId(i)).collect()
}

#[test]
fn next_request_carries_context_and_densifies() {
    let (bridge, seen) = stub(4, SECOND, |req| {
        // Sparse answer: token 3 is absent and gets zero probability.
        vec![json!({ "id": id(req), "tokens": [2, 0, 1], "logprobs": [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()], "extra": "ignored" }).to_string()]
    });
    let lp = bridge.next_token_logprobs(&ids(&[1, 2])).unwrap();
    assert_eq!(lp.len(), 4);
    assert!((lp[2] - 0.5f64.ln()).abs() < 1e-12);
    assert!((lp[0] - 0.25f64.ln()).abs() < 1e-12);
    assert_eq!(lp[3], f64::NEG_INFINITY);
    let req = seen.recv().unwrap();
    assert_eq!(req["method"], "next");
    assert_eq!(req["context_tokens"], json!([1, 2]));
}

#[test]
fn score_sums_under_the_oracle() {
    let (bridge, seen) = stub(10, SECOND, |req| {
        vec![json!({ "id": id(req), "logprob": -3.25 }).to_string()]
    });
    let lp = bridge.sequence_logprob(&ids(&[4, 5]), &ids(&[9])).unwrap();
    assert_eq!(lp, -3.25);
    let req = seen.recv().unwrap();
    assert_eq!(req["method"], "score");
    assert_eq!(req["tokens"], json!([4, 5]));
    assert_eq!(req["context_tokens"], json!([9]));

    let text = bridge
        .score_with_text_context("a photo of", &ids(&[1]))
        .unwrap();
    assert_eq!(text, -3.25);
    let req = seen.recv().unwrap();
    assert_eq!(req["context_text"], "a photo of");
    assert!(req.get("context_tokens").is_none());
}

#[test]
fn kl_through_the_bridge_matches_the_uniform_value() {
    let (bridge, _) = stub(8, SECOND, |req| {
        let n = req["tokens"].as_array().map_or(0, Vec::len);
        vec![json!({ "id": id(req), "logprob": -(n as f64) * 8f64.ln() }).to_string()]
    });
    let prompts = PromptSet::new(vec![ids(&[1, 2]), ids(&[3, 4])], vec![]);
    let kl = point_mass_kl(&bridge, &prompts, KlPolicy::default()).unwrap();
    assert!((kl - 4.0 * 8f64.ln()).abs() < 1e-12);
}

#[test]
fn out_of_order_responses_are_matched_by_id() {
    let (bridge, _) = stub(2, SECOND, |req| {
        let i = id(req);
        let stray = json!({ "id": i + 100, "tokens": [0, 1], "logprobs": [0.0, -1e9] }).to_string();
        vec![stray, uniform_reply(req, 2)]
    });
    for _ in 0..3 {
        let lp = bridge.next_token_logprobs(&[]).unwrap();
        assert!((lp[0] - 0.5f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn late_answer_to_a_timed_out_request_is_not_reused() {
    let (bridge, _) = stub(2, Duration::from_millis(200), |req| {
        if id(req) == 1 {
            thread::sleep(Duration::from_millis(400));
            vec![json!({ "id": 1, "tokens": [0, 1], "logprobs": [0.0, -1e9] }).to_string()]
        } else {
            vec![uniform_reply(req, 2)]
        }
    });
    let err = bridge.next_token_logprobs(&[]).unwrap_err();
    assert!(matches!(err, Error::Bridge(_)));
    let lp = bridge.next_token_logprobs(&[]).unwrap();
    assert!((lp[1] - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn error_responses_map_to_bridge_errors() {
    let (bridge, _) = stub(3, SECOND, |req| {
        vec![json!({ "id": id(req), "error": "model not loaded" }).to_string()]
    });
    let err = bridge.next_token_logprobs(&[]).unwrap_err();
    assert!(err.to_string().contains("model not loaded"));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn invalid_payloads_are_rejected() {
    let cases: Vec<(&str, Value)> = vec![
        (
            "unnormalized",
            json!({ "tokens": [0, 1], "logprobs": [-0.1, -0.1] }),
        ),
        (
            "length mismatch",
            json!({ "tokens": [0, 1], "logprobs": [-0.1] }),
        ),
        (
            "out of vocabulary",
            json!({ "tokens": [0, 7], "logprobs": [0.5f64.ln(), 0.5f64.ln()] }),
        ),
        ("missing fields", json!({})),
    ];
    for (what, body) in cases {
        let (bridge, _) = stub(2, SECOND, move |req| {
            let mut b = body.clone();
            b["id"] = json!(id(req));
            vec![b.to_string()]
        });
        assert!(
            matches!(bridge.next_token_logprobs(&[]), Err(Error::Bridge(_))),
            "{what}"
        );
    }
    let (bridge, _) = stub(2, SECOND, |req| {
        vec![json!({ "id": id(req), "logprob": 0.5 }).to_string()]
    });
    assert!(bridge.sequence_logprob(&ids(&[0]), &[]).is_err());
}

#[test]
fn malformed_line_is_a_bridge_error() {
    let (bridge, _) = stub(2, SECOND, |_| vec!["not json".to_string()]);
    assert!(matches!(
        bridge.next_token_logprobs(&[]),
        Err(Error::Bridge(_))
    ));
}

#[test]
fn silence_times_out() {
    let (bridge, _) = stub(2, Duration::from_millis(150), |_| Vec::new());
    let start = Instant::now();
    let err = bridge.next_token_logprobs(&[]).unwrap_err();
    assert!(matches!(err, Error::Bridge(_)));
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn temperature_rescales_logits() {
    let (bridge, seen) = stub(2, SECOND, |req| {
        vec![json!({ "id": id(req), "tokens": [0, 1], "logprobs": [2.0, 0.0] }).to_string()]
    });
    let bridge = bridge.with_temperature(2.0).unwrap();
    let lp = bridge.next_token_logprobs(&[]).unwrap();
    // Softmax of (1, 0).
    let want = 1.0 - (1.0 + 1f64.exp()).ln();
    assert!((lp[0] - want).abs() < 1e-12);
    assert_eq!(seen.recv().unwrap()["method"], "logits");
    assert!(bridge.with_temperature(0.0).is_err());
}

const SH_STUB: &str = r#"while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed 's/.*"id":\([0-9]*\).*/\1/')
  printf '{"id":%s,"tokens":[0,1,2,3],"logprobs":[-1.3862943611198906,-1.3862943611198906,-1.3862943611198906,-1.3862943611198906],"logprob":-1.3862943611198906}\n' "$id"
done"#;

fn sh_available() -> bool {
    Command::new("sh")
        .arg("-c")
        .arg("exit 0")
        .status()
        .is_ok_and(|s| s.success())
}

#[test]
fn spawned_process_oracle() {
    if !sh_available() {
        return;
    }
    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg(SH_STUB);
    let bridge = OracleBridgePrior::spawn(cmd, 4, Duration::from_secs(5)).unwrap();
    let lp = bridge.next_token_logprobs(&ids(&[0])).unwrap();
    assert!(lp.iter().all(|v| (v + 4f64.ln()).abs() < 1e-12));
    assert!((bridge.sequence_logprob(&ids(&[2]), &[]).unwrap() + 4f64.ln()).abs() < 1e-12);
}

#[test]
fn exited_process_is_a_bridge_error() {
    if !sh_available() {
        return;
    }
    let mut cmd = Command::new("sh");
    cmd.arg("-c").arg("exit 0");
    let bridge = OracleBridgePrior::spawn(cmd, 4, Duration::from_secs(5)).unwrap();
    assert!(matches!(
        bridge.next_token_logprobs(&[]),
        Err(Error::Bridge(_))
    ));
    let missing = OracleBridgePrior::spawn(Command::new("/nonexistent/oracle-binary"), 4, SECOND);
    assert!(matches!(missing, Err(Error::Bridge(_))));
}

#[test]
fn harness_runs_with_an_oracle_prior() {
    if !sh_available() {
        return;
    }
    let mut cfg = ExperimentConfig::new(ExperimentKind::SrmCompare);
    cfg.source = DataSource::Synthetic {
        spec: SyntheticSpec {
            vocab_size: 4,
            dim: 8,
            classes: 2,
            prompt_len: 1,
            train_per_class: 10,
            test_per_class: 10,
            ..Default::default()
        },
    };
    cfg.search.length = 1;
    cfg.betas = vec![1.0];
    cfg.prior = PriorConfig::Oracle {
        command: vec!["sh".into(), "-c".into(), SH_STUB.into()],
        timeout_ms: 5000,
        temperature: 1.0,
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert!((out.rows[0].kl - 2.0 * 4f64.ln()).abs() < 1e-9);
    assert!(out.notes.iter().any(|n| n.contains("oracle")));
}
