//! End-to-end command-line tests: train on the toy grammar, parse, tag,
//! evaluate, and run the significance test, checking outputs and exit codes.

mod common;

use std::path::Path;
use std::process::Command;

fn treerec(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_treerec"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
}

/// Tests that only read the trained model share one fixture; training it
/// twice would just burn time.
fn shared_trained() -> &'static Fixture {
    use std::sync::OnceLock;
    static SHARED: OnceLock<Fixture> = OnceLock::new();
    SHARED.get_or_init(|| {
        let fx = Fixture::new();
        fx.train();
        fx
    })
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("train.tb"), &common::corpus_lines(0..40));
        write(&dir.path().join("heldout.tb"), &common::corpus_lines(40..50));
        write(&dir.path().join("test.tb"), &common::corpus_lines(50..58));
        write(&dir.path().join("heads.txt"), common::toy_head_table());
        Fixture { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().to_string()
    }

    fn train(&self) {
        let (code, _, err) = treerec(&[
            "train",
            "--train",
            &self.path("train.tb"),
            "--heldout",
            &self.path("heldout.tb"),
            "--head-table",
            &self.path("heads.txt"),
            "--output",
            &self.path("model"),
            "--oov-rate",
            "0.0",
        ]);
        assert_eq!(code, 0, "train failed: {err}");
    }

    fn test_sentences(&self) -> String {
        let text = std::fs::read_to_string(self.path("test.tb")).unwrap();
        let mut out = String::new();
        for line in text.lines() {
            let tree = treerec::treebank::parse_bracketed(line).unwrap();
            let words: Vec<String> = tree
                .tokens()
                .iter()
                .map(|t| t.surface.clone())
                .collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out
    }
}

#[test]
fn train_parse_evaluate_round_trip() {
    let fx = shared_trained();
    assert!(fx.dir.path().join("model/manifest.txt").exists());
    assert!(fx.dir.path().join("model/train.log").exists());
    let log = std::fs::read_to_string(fx.path("model/train.log")).unwrap();
    assert!(log.contains("# reestimation"));
    assert!(log.contains("# smoothing"));

    write(&fx.dir.path().join("input.txt"), &fx.test_sentences());
    let (code, _, err) = treerec(&[
        "parse",
        "--model",
        &fx.path("model"),
        "--input",
        &fx.path("input.txt"),
        "--output",
        &fx.path("parses.txt"),
        "--top-k",
        "3",
        "--gold",
        &fx.path("test.tb"),
    ]);
    assert_eq!(code, 0, "parse failed: {err}");
    let parses = std::fs::read_to_string(fx.path("parses.txt")).unwrap();
    assert!(parses.contains("# sentence 0"));
    assert!(parses.contains("# logprob="));
    assert!(parses.contains("# gold_log2="));

    let (code, stdout, err) = treerec(&[
        "evaluate",
        "--gold",
        &fx.path("test.tb"),
        "--pred",
        &fx.path("parses.txt"),
    ]);
    assert_eq!(code, 0, "evaluate failed: {err}");
    assert!(stdout.contains("EXACT"), "report:\n{stdout}");
    assert!(stdout.contains("test perplexity"));
    // The toy grammar memorizes perfectly.
    let exact_line = stdout
        .lines()
        .find(|l| l.starts_with("EXACT"))
        .expect("EXACT row present");
    assert!(exact_line.ends_with("100.0%"), "report:\n{stdout}");

    let (code, kv, _) = treerec(&[
        "evaluate",
        "--gold",
        &fx.path("test.tb"),
        "--pred",
        &fx.path("parses.txt"),
        "--kv",
    ]);
    assert_eq!(code, 0);
    assert!(kv.contains("exact=1.000000"), "kv:\n{kv}");
}

#[test]
fn evaluating_gold_against_itself_is_perfect() {
    let fx = Fixture::new();
    let (code, stdout, _) = treerec(&[
        "evaluate",
        "--gold",
        &fx.path("test.tb"),
        "--pred",
        &fx.path("test.tb"),
        "--kv",
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("exact=1.000000"));
    assert!(stdout.contains("cb_zero=1.000000"));
}

#[test]
fn mismatched_sentence_counts_exit_one() {
    let fx = Fixture::new();
    write(&fx.dir.path().join("short.tb"), &common::corpus_lines(50..53));
    let (code, _, err) = treerec(&[
        "evaluate",
        "--gold",
        &fx.path("test.tb"),
        "--pred",
        &fx.path("short.tb"),
    ]);
    assert_eq!(code, 1, "stderr: {err}");
}

#[test]
fn missing_head_table_is_config_error_before_work() {
    let fx = Fixture::new();
    let (code, _, err) = treerec(&[
        "train",
        "--train",
        &fx.path("train.tb"),
        "--head-table",
        &fx.path("no_such_file.txt"),
        "--output",
        &fx.path("model2"),
    ]);
    assert_eq!(code, 2, "stderr: {err}");
    assert!(!fx.dir.path().join("model2").exists());
}

#[test]
fn significance_direct_counts_match_published_value() {
    let (code, stdout, _) = treerec(&["significance", "--c12", "11", "--c21", "16"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("p=0.22"), "got {stdout}");
    let (code, stdout, _) = treerec(&["significance", "--c12", "5", "--c21", "5"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("p=0.5000"), "got {stdout}");
}

#[test]
fn significance_identical_files_report_no_evidence() {
    let fx = Fixture::new();
    let (code, stdout, _) = treerec(&[
        "significance",
        "--gold",
        &fx.path("test.tb"),
        "--x",
        &fx.path("test.tb"),
        "--y",
        &fx.path("test.tb"),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.contains("no discriminating sentences"), "got {stdout}");
}

#[test]
fn describe_experiment_covers_all_letters() {
    for letter in ["A", "B", "C", "D", "E", "F", "G", "H", "I"] {
        let (code, stdout, _) = treerec(&["describe-experiment", letter]);
        assert_eq!(code, 0);
        assert!(stdout.starts_with(letter));
    }
    let (code, _, _) = treerec(&["describe-experiment", "Z"]);
    assert_eq!(code, 2);
}

#[test]
fn tag_command_emits_tagged_tokens() {
    let fx = shared_trained();
    write(&fx.dir.path().join("tag_input.txt"), "the cat sees a dog\n");
    let (code, _, err) = treerec(&[
        "tag",
        "--model",
        &fx.path("model"),
        "--input",
        &fx.path("tag_input.txt"),
        "--output",
        &fx.path("tagged.txt"),
    ]);
    assert_eq!(code, 0, "tag failed: {err}");
    let tagged = std::fs::read_to_string(fx.path("tagged.txt")).unwrap();
    assert!(
        tagged.contains("the_D cat_NN sees_VB a_D dog_NN"),
        "got {tagged}"
    );
}

#[test]
fn known_tags_mode_fixes_tags() {
    let fx = shared_trained();
    write(
        &fx.dir.path().join("kt_input.txt"),
        "the_D cat_NN sees_VB a_D dog_NN\n",
    );
    let (code, _, err) = treerec(&[
        "parse",
        "--model",
        &fx.path("model"),
        "--input",
        &fx.path("kt_input.txt"),
        "--output",
        &fx.path("kt_parses.txt"),
        "--known-tags",
    ]);
    assert_eq!(code, 0, "parse failed: {err}");
    let parses = std::fs::read_to_string(fx.path("kt_parses.txt")).unwrap();
    assert!(parses.contains("[S [N the_D cat_NN N] sees_VB [N a_D dog_NN N] S]"));
}

#[test]
fn train_fraction_uses_first_half() {
    let fx = Fixture::new();
    let (code, stdout, err) = treerec(&[
        "train",
        "--train",
        &fx.path("train.tb"),
        "--head-table",
        &fx.path("heads.txt"),
        "--output",
        &fx.path("model_half"),
        "--train-fraction",
        "0.5",
        "--smoothing-iterations",
        "0",
        "--reestimation-iterations",
        "2",
        "--oov-rate",
        "0.0",
    ]);
    assert_eq!(code, 0, "train failed: {err}");
    assert!(
        stdout.contains("trained on 20 sentences"),
        "got {stdout}"
    );
}

#[test]
fn config_file_supplies_paths() {
    let fx = Fixture::new();
    let config = format!(
        "train = {}\nhead_table = {}\noutput = {}\nsmoothing_iterations = 0\nreestimation_iterations = 1\noov_rate = 0.0\n",
        fx.path("train.tb"),
        fx.path("heads.txt"),
        fx.path("model_cfg"),
    );
    write(&fx.dir.path().join("run.conf"), &config);
    let (code, _, err) = treerec(&["train", "--config", &fx.path("run.conf")]);
    assert_eq!(code, 0, "train failed: {err}");
    assert!(fx.dir.path().join("model_cfg/manifest.txt").exists());
}

#[test]
fn supplied_label_encodings_are_authoritative() {
    let fx = Fixture::new();
    // Hand-built label bitstrings override the corpus clustering.
    write(&fx.dir.path().join("labels.bct"), "GOD\t11\nS\t0\nN\t10\n");
    let config = format!(
        "train = {}\nhead_table = {}\noutput = {}\nlabels_bct = {}\n\
         smoothing_iterations = 0\nreestimation_iterations = 1\noov_rate = 0.0\n",
        fx.path("train.tb"),
        fx.path("heads.txt"),
        fx.path("model_bct"),
        fx.path("labels.bct"),
    );
    write(&fx.dir.path().join("bct.conf"), &config);
    let (code, _, err) = treerec(&["train", "--config", &fx.path("bct.conf")]);
    assert_eq!(code, 0, "train failed: {err}");
    let saved = std::fs::read_to_string(fx.path("model_bct/labels.vocab")).unwrap();
    assert!(saved.contains("GOD\t11"));
    assert!(saved.contains("S\t0"));
    assert!(saved.contains("N\t10"));
}

#[test]
fn experiment_a_trains_without_derivation_model() {
    let fx = Fixture::new();
    let (code, _, err) = treerec(&[
        "train",
        "--train",
        &fx.path("train.tb"),
        "--head-table",
        &fx.path("heads.txt"),
        "--output",
        &fx.path("model_a"),
        "--experiment",
        "A",
        "--smoothing-iterations",
        "0",
        "--reestimation-iterations",
        "1",
        "--oov-rate",
        "0.0",
    ]);
    assert_eq!(code, 0, "train failed: {err}");
    let manifest = std::fs::read_to_string(fx.path("model_a/manifest.txt")).unwrap();
    assert!(manifest.contains("derivation_model = false"));
    assert!(!fx.dir.path().join("model_a/derivation.model").exists());

    // Parsing with the leftmost-only model still reproduces the grammar.
    write(&fx.dir.path().join("input.txt"), "the cat sees a dog\n");
    let (code, _, err) = treerec(&[
        "parse",
        "--model",
        &fx.path("model_a"),
        "--input",
        &fx.path("input.txt"),
        "--output",
        &fx.path("parses_a.txt"),
    ]);
    assert_eq!(code, 0, "parse failed: {err}");
    let parses = std::fs::read_to_string(fx.path("parses_a.txt")).unwrap();
    assert!(parses.contains("[S [N the_D cat_NN N] sees_VB [N a_D dog_NN N] S]"));
}

#[test]
fn unparseable_input_reports_noparse() {
    let fx = shared_trained();
    // An unknown-word-only sentence exercises the no-parse fallback: the
    // engine must not crash and must emit either a parse or a NOPARSE line.
    write(&fx.dir.path().join("np_input.txt"), "zzz\n");
    let (code, _, err) = treerec(&[
        "parse",
        "--model",
        &fx.path("model"),
        "--input",
        &fx.path("np_input.txt"),
        "--output",
        &fx.path("np_parses.txt"),
    ]);
    assert_eq!(code, 0, "parse failed: {err}");
    let parses = std::fs::read_to_string(fx.path("np_parses.txt")).unwrap();
    assert!(
        parses.contains("# NOPARSE") || parses.contains("# logprob="),
        "got {parses}"
    );
}
