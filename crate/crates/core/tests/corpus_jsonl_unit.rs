use adgen_core::corpus::*;
use adgen_core::Error;
use std::fs;
use std::path::Path;

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn three_reviews_load_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "r.jsonl",
        "{\"id\":\"a\",\"text\":\"good taste\"}\n{\"id\":\"b\",\"text\":\"fair price, nice\"}\n{\"id\":\"c\",\"text\":\"ok\"}\n",
    );
    let r = load_reviews(&p).unwrap();
    assert_eq!(r.len(), 3);
    assert_eq!(r[1].tokens, vec!["fair", "price", ",", "nice"]);
    let out = dir.path().join("out.jsonl");
    save_reviews(&out, &r).unwrap();
    assert_eq!(load_reviews(&out).unwrap(), r);
}

#[test]
fn empty_file_is_empty_collection() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "e.jsonl", "");
    for kind in [
        RecordKind::Reviews,
        RecordKind::AbSamples,
        RecordKind::Aspects,
        RecordKind::Triples,
    ] {
        assert!(load_jsonl(&p, kind).unwrap().is_empty());
    }
}

#[test]
fn clicks_over_impressions_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "ab.jsonl",
        "{\"source\":\"good taste\",\"control\":\"taste\",\"pos\":\"a b\",\"neg\":\"c d\",\"pos_imp\":10,\"pos_clk\":11,\"neg_imp\":10,\"neg_clk\":1}\n",
    );
    let err = load_absamples(&p).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 1"), "{msg}");
    assert!(msg.contains("ClickStats"), "{msg}");
}

#[test]
fn missing_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "r.jsonl", "{\"id\":\"a\"}\n");
    match load_reviews(&p) {
        Err(Error::MissingField { line, field }) => {
            assert_eq!(line, 1);
            assert_eq!(field, "text");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_json_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "r.jsonl",
        "{\"id\":\"a\",\"text\":\"x\"}\n{oops\n",
    );
    assert!(matches!(
        load_reviews(&p),
        Err(Error::Parse { line: 2, .. })
    ));
}

#[test]
fn vocab_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = Vocab::build([tokenize("b a c")].iter());
    let p = dir.path().join("vocab.json");
    save_vocab(&p, &v).unwrap();
    assert_eq!(load_vocab(&p).unwrap(), v);
}
