use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};

use vibra::dataset::{GestureWindow, SplitMethod};
use vibra::model::SepCnnConfig;
use vibra::pipeline::{materialize_in_memory, PreprocessConfig};
use vibra::search::{run_search, Leaderboard, RunControl, SearchOptions, SearchSpace, SkipReason};
use vibra::synth::{generate_session, SynthConfig};
use vibra::train::TrainConfig;
use vibra::{Error, GestureSet, Result};

fn space() -> SearchSpace {
    SearchSpace::from_toml(
        r#"
bandpass = ["none", "225-375"]
downsample = [5, 10]
window_ms = [1000]
kernel = [5, 9]
blocks_width = ["2x8", "8x4"]
dropout = [0.2]
"#,
    )
    .unwrap()
}

fn options() -> SearchOptions {
    SearchOptions {
        model: SepCnnConfig {
            classifier_hidden: 8,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 5,
            ..Default::default()
        },
        cv: SplitMethod::PooledSessions { folds: 2 },
        ..Default::default()
    }
}

fn corpus() -> Vec<(vibra::dataset::Recording, vibra::detect::EventAnnotation)> {
    let cfg = SynthConfig {
        reps_per_class: 2,
        seed: 3,
        ..Default::default()
    };
    [(1, 1), (1, 2), (2, 1), (2, 2)]
        .iter()
        .map(|&(p, s)| generate_session(&cfg, p, s).unwrap())
        .collect()
}

fn dataset<'a>(
    sessions: &'a [(vibra::dataset::Recording, vibra::detect::EventAnnotation)],
    calls: &'a AtomicUsize,
) -> impl Fn(&PreprocessConfig) -> Result<Vec<GestureWindow>> + 'a {
    move |pre| {
        calls.fetch_add(1, Ordering::SeqCst);
        materialize_in_memory(sessions, pre, GestureSet::All)
    }
}

#[test]
fn resumed_search_reproduces_uninterrupted_leaderboard() {
    let sessions = corpus();
    let calls = AtomicUsize::new(0);
    let (space, opts) = (space(), options());
    let full = run_search(
        &space,
        &opts,
        1000.0,
        dataset(&sessions, &calls),
        &RunControl::default(),
    )
    .unwrap();
    assert_eq!(
        calls.load(Ordering::SeqCst),
        4,
        "one materialization per (band, downsample, window)"
    );
    assert!(full.is_complete());
    assert_eq!(full.total, 16);
    assert_eq!(full.results.len() + full.skipped.len(), 16);
    assert_eq!(full.results.len(), 8);
    assert!(full
        .skipped
        .iter()
        .all(|s| s.reason == SkipReason::InvalidModel && s.detail.contains("collapses")));
    let best = full.best().unwrap().accuracy.mean;
    assert!(full.results.iter().all(|r| r.accuracy.mean <= best));

    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("journal.jsonl");
    for (stop, expect_pending) in [(Some(3), 13), (Some(6), 7)] {
        let board = run_search(
            &space,
            &opts,
            1000.0,
            dataset(&sessions, &calls),
            &RunControl {
                journal: Some(&journal),
                stop_after: stop,
            },
        )
        .unwrap();
        assert_eq!(board.pending, expect_pending);
        assert!(!board.is_complete());
    }
    // simulate a crash in the middle of writing a record
    let mut text = fs::read_to_string(&journal).unwrap();
    text.push_str("{\"index\":9,\"key\":\"bp=");
    fs::write(&journal, text).unwrap();

    let resumed = run_search(
        &space,
        &opts,
        1000.0,
        dataset(&sessions, &calls),
        &RunControl {
            journal: Some(&journal),
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(resumed, full);
    assert_eq!(resumed.to_csv(), full.to_csv());
    assert_eq!(resumed.to_json(), full.to_json());

    // a finished journal evaluates nothing on a further resume
    let before = calls.load(Ordering::SeqCst);
    let again = run_search(
        &space,
        &opts,
        1000.0,
        dataset(&sessions, &calls),
        &RunControl {
            journal: Some(&journal),
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(again, full);
    assert_eq!(calls.load(Ordering::SeqCst), before);

    // the journal refuses a different search
    let other = SearchOptions {
        train: TrainConfig {
            seed: 6,
            ..opts.train.clone()
        },
        ..opts.clone()
    };
    let err = run_search(
        &space,
        &other,
        1000.0,
        dataset(&sessions, &calls),
        &RunControl {
            journal: Some(&journal),
            stop_after: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    full.save(dir.path()).unwrap();
    let json: Leaderboard =
        serde_json::from_str(&fs::read_to_string(dir.path().join("leaderboard.json")).unwrap()).unwrap();
    assert_eq!(json, full);
    let csv = fs::read_to_string(dir.path().join("leaderboard.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.starts_with("rank,index,bandpass"));
}

#[test]
fn budgeted_search_accounts_for_every_config() {
    let sessions = corpus();
    let calls = AtomicUsize::new(0);
    let opts = SearchOptions {
        budget: Some(3),
        budget_seed: 1,
        ..options()
    };
    let board = run_search(
        &space(),
        &opts,
        1000.0,
        dataset(&sessions, &calls),
        &RunControl::default(),
    )
    .unwrap();
    assert!(board.is_complete());
    let counts = board.skip_counts();
    assert_eq!(counts[&SkipReason::NotInBudget], 13);
    assert_eq!(board.results.len() + board.skipped.len(), 16);
    let evaluated = board.results.len() + counts.get(&SkipReason::InvalidModel).copied().unwrap_or(0);
    assert_eq!(evaluated, 3);
}

#[test]
fn failing_variant_is_skipped_not_fatal() {
    let calls = AtomicUsize::new(0);
    let broken = |_: &PreprocessConfig| -> Result<Vec<GestureWindow>> {
        calls.fetch_add(1, Ordering::SeqCst);
        Err(Error::Config("missing recording".into()))
    };
    let board = run_search(&space(), &options(), 1000.0, broken, &RunControl::default()).unwrap();
    assert!(board.results.is_empty());
    assert_eq!(board.skipped.len(), 16);
    assert!(board.skipped.iter().all(|s| s.reason == SkipReason::InvalidPreprocess));
    assert_eq!(calls.load(Ordering::SeqCst), 4);
}
