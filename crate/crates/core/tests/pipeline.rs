use std::sync::Arc;

use text2table::backend::{
    BackendError, CachedBackend, OracleBackend, RecordingBackend, ReplayBackend, ScriptedBackend,
};
use text2table::corpus::{fixtures, Prediction, Sample};
use text2table::metrics::evaluate_corpus;
use text2table::pipeline::{CellAddress, HeaderMode, Pipeline, SkeletonDelta};
use text2table::{DatasetKind, Table};

fn oracle_for(samples: &[Sample]) -> OracleBackend {
    let mut oracle = OracleBackend::new();
    for s in samples {
        oracle.insert(&s.text, s.table.clone());
    }
    oracle
}

fn predictions(outputs: Vec<text2table::pipeline::SampleOutput>) -> Vec<Prediction> {
    outputs
        .into_iter()
        .map(|o| Prediction {
            id: o.id,
            table: o.table,
            errored: o.errored,
        })
        .collect()
}

#[tokio::test]
async fn oracle_reproduces_every_mini_fixture() {
    for kind in DatasetKind::ALL {
        let samples = fixtures::mini(kind);
        let pipeline = Pipeline::new(oracle_for(&samples), kind);
        for mode in [HeaderMode::Predicted, HeaderMode::Gold] {
            let outputs = pipeline.run_corpus(&samples, mode, 4).await;
            assert!(outputs.iter().all(|o| o.error.is_none()), "{kind} {mode:?}");
            let report = evaluate_corpus(&predictions(outputs), &samples, mode).unwrap();
            assert_eq!(report.cell.f1, 1.0, "{kind} {mode:?}");
            assert_eq!(report.header.f1, 1.0, "{kind} {mode:?}");
            assert_eq!(report.error_rate, 0.0);
        }
    }
}

#[tokio::test]
async fn header_mode_only_changes_stage_one() {
    let samples = fixtures::examples(DatasetKind::RotowireTeam);
    let pipeline = Pipeline::new(oracle_for(&samples), DatasetKind::RotowireTeam);
    let gold = pipeline.run_sample(&samples[0], HeaderMode::Gold).await;
    let predicted = pipeline
        .run_sample(&samples[0], HeaderMode::Predicted)
        .await;
    let (g, p) = (
        gold.trace.unwrap().without_timings(),
        predicted.trace.unwrap().without_timings(),
    );
    assert!(g.structure_output.is_none());
    assert!(p.structure_output.is_some());
    assert_eq!(g.cells, p.cells);
    assert_eq!(gold.table, predicted.table);
}

#[tokio::test]
async fn corpus_runs_keep_input_order() {
    let samples = fixtures::mini(DatasetKind::E2e);
    let pipeline = Pipeline::new(oracle_for(&samples), DatasetKind::E2e);
    let outputs = pipeline
        .run_corpus(&samples, HeaderMode::Predicted, 8)
        .await;
    let ids: Vec<_> = outputs.iter().map(|o| o.id.as_str()).collect();
    let expected: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, expected);
}

#[tokio::test]
async fn update_only_touches_requested_cells() {
    let table = Table::matrix(
        ["Magic", "Hawks"],
        ["Wins", "Losses"],
        vec![
            vec![Some("19".into()), Some("41".into())],
            vec![Some("46".into()), None],
        ],
    )
    .unwrap();
    let backend = ScriptedBackend::from_fn(|r| {
        let q = match &r.hint.as_ref().unwrap().task {
            text2table::backend::PromptTask::Cell { question } => question.clone(),
            _ => unreachable!(),
        };
        Ok(if q.contains("Wins for Magic") {
            "not mentioned".into()
        } else if q.contains("Losses for Hawks") {
            "They lost twelve".into()
        } else {
            "3".into()
        })
    });
    let pipeline = Pipeline::new(backend, DatasetKind::RotowireTeam);
    let delta = SkeletonDelta {
        row_headers: vec![],
        col_headers: vec!["Streak".into()],
        reask: vec![
            CellAddress {
                row: Some(0),
                col: 0,
            },
            CellAddress {
                row: Some(1),
                col: 1,
            },
        ],
    };
    let (updated, trace) = pipeline
        .update_table(&table, &delta, "Hawks now 46 - 12.")
        .await
        .unwrap();
    assert_eq!(pipeline.backend().calls(), 4);
    assert_eq!(trace.cells.len(), 4);
    let expected = Table::matrix(
        ["Magic", "Hawks"],
        ["Wins", "Losses", "Streak"],
        vec![
            vec![Some("19".into()), Some("41".into()), Some("3".into())],
            vec![Some("46".into()), Some("12".into()), Some("3".into())],
        ],
    )
    .unwrap();
    assert_eq!(updated, expected);
}

#[tokio::test]
async fn update_rejects_invalid_tables() {
    let ragged = Table::matrix(["a", "b"], ["x"], vec![vec![None]]).unwrap();
    let pipeline = Pipeline::new(ScriptedBackend::constant("1"), DatasetKind::RotowireTeam);
    let err = pipeline
        .update_table(&ragged, &SkeletonDelta::default(), "text")
        .await
        .unwrap_err();
    assert!(matches!(
        err,
        text2table::pipeline::PipelineError::InvalidTable(_)
    ));
}

#[tokio::test]
async fn replayed_run_matches_recorded_run() {
    let samples = fixtures::examples(DatasetKind::WikiBio);
    let dir = tempfile::tempdir().unwrap();
    let recorder = RecordingBackend::new(oracle_for(&samples), dir.path()).unwrap();
    let live = Pipeline::new(recorder, DatasetKind::WikiBio)
        .generate_table(&samples[0].text)
        .await
        .unwrap();
    let replay = ReplayBackend::open(dir.path()).unwrap();
    assert_eq!(replay.len(), 4);
    let again = Pipeline::new(replay, DatasetKind::WikiBio)
        .generate_table(&samples[0].text)
        .await
        .unwrap();
    assert_eq!(live.table, again.table);
    assert_eq!(live.trace.without_timings().cells.len(), 3);

    // A passage never recorded misses every fixture.
    let replay = ReplayBackend::open(dir.path()).unwrap();
    let err = Pipeline::new(replay, DatasetKind::WikiBio)
        .generate_table("Someone else entirely.")
        .await
        .unwrap_err();
    assert!(matches!(
        err,
        text2table::pipeline::PipelineError::Backend(BackendError::MalformedResponse(_))
    ));
}

#[tokio::test]
async fn cache_serves_repeated_runs() {
    let samples = fixtures::examples(DatasetKind::E2e);
    let cached = Arc::new(CachedBackend::new(oracle_for(&samples)));
    let pipeline = Pipeline::new(cached.clone(), DatasetKind::E2e);
    let first = pipeline.generate_table(&samples[0].text).await.unwrap();
    let calls = cached.upstream_calls();
    assert_eq!(calls, 8);
    let second = pipeline.generate_table(&samples[0].text).await.unwrap();
    assert_eq!(cached.upstream_calls(), calls);
    assert_eq!(first.table, second.table);
}
