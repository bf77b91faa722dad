use flowcast::autodiff::SeededRng;
use flowcast::hpo::*;
use proptest::prelude::*;

fn x_of(a: &Assignment) -> f64 {
    match a["x"] {
        ParamValue::Real(x) => x,
        _ => unreachable!(),
    }
}

fn quadratic_study(seed: u64, n_startup: usize) -> StudyOutcome {
    let space = SearchSpace::new().real("x", 0.0, 1.0);
    let mut cfg = StudyConfig::new(40, 8);
    cfg.tpe.seed = seed;
    cfg.tpe.n_startup = n_startup;
    run_study(&space, &cfg, |t, _| {
        let x = x_of(&t.params);
        Ok(-(x - 0.3) * (x - 0.3))
    })
    .unwrap()
}

#[test]
fn single_trial_is_best() {
    let out = run_study(&SearchSpace::gnn_default(), &StudyConfig::new(1, 75), |_, _| Ok(0.5)).unwrap();
    assert_eq!(out.trials.len(), 1);
    assert_eq!(out.best.unwrap().id, 0);
}

#[test]
fn same_seed_gives_same_history() {
    let a = quadratic_study(7, 10);
    let b = quadratic_study(7, 10);
    assert_eq!(a.trials, b.trials);
    let c = quadratic_study(8, 10);
    assert_ne!(a.trials, c.trials);
}

#[test]
fn tpe_finds_quadratic_optimum() {
    let best = quadratic_study(42, 10).best.unwrap();
    assert!((x_of(&best.params) - 0.3).abs() < 0.05, "{best:?}");
}

/// Reports a score every epoch; trial `star` dominates everything.
fn rung_objective(star: usize) -> impl Fn(&TrialContext, &mut dyn FnMut(usize, f64) -> bool) -> Result<f64, ObjectiveFailure> + Sync {
    move |t, report| {
        let base = if t.id == star { 10.0 } else { 1.0 - t.id as f64 * 0.01 };
        let mut last = 0.0;
        for e in 1..=t.max_epochs {
            last = base + e as f64 * 1e-3;
            if !report(e, last) {
                break;
            }
        }
        Ok(last)
    }
}

#[test]
fn dominant_trial_survives_and_wins() {
    let out = run_study(&SearchSpace::baseline_default(), &StudyConfig::new(12, 75), rung_objective(4)).unwrap();
    let star = &out.trials[4];
    assert_eq!(star.status, TrialStatus::Complete);
    assert_eq!(star.rung_scores.iter().map(|r| r.0).collect::<Vec<_>>(), vec![8, 24, 72]);
    assert_eq!(out.best.unwrap().id, 4);
    assert!(out.trials.iter().any(|t| t.status == TrialStatus::Pruned));
    for t in &out.trials {
        assert_eq!(t.final_score.is_some(), t.status == TrialStatus::Complete);
        assert!(t.rung_scores.windows(2).all(|w| w[0].0 < w[1].0));
    }
}

#[test]
fn failing_objective_does_not_stop_study() {
    let out = run_study(&SearchSpace::baseline_default(), &StudyConfig::new(5, 8), |t, _| {
        if t.id == 2 {
            Err(ObjectiveFailure("diverged".into()))
        } else {
            Ok(t.id as f64)
        }
    })
    .unwrap();
    assert_eq!(out.trials.len(), 5);
    assert_eq!(out.trials[2].status, TrialStatus::Failed);
    assert_eq!(out.best.unwrap().id, 4);
}

#[test]
fn journal_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let space = SearchSpace::gnn_default();
    let full = run_study(&space, &StudyConfig::new(14, 75), rung_objective(3)).unwrap();

    let mut cfg = StudyConfig::new(6, 75);
    cfg.journal = Some(dir.path().join("journal.csv"));
    run_study(&space, &cfg, rung_objective(3)).unwrap();
    cfg.n_trials = 14;
    let resumed = run_study(&space, &cfg, rung_objective(3)).unwrap();
    assert_eq!(resumed.trials, full.trials);

    let text = std::fs::read_to_string(dir.path().join("journal.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("trial_id,hidden_dim,"));
    assert!(header.ends_with(",rung_epoch,score,status"));
}

#[test]
fn interrupted_trial_is_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.csv");
    let space = SearchSpace::new().real("x", 0.0, 1.0);
    let mut cfg = StudyConfig::new(3, 8);
    cfg.journal = Some(path.clone());
    run_study(&space, &cfg, |t, _| Ok(x_of(&t.params))).unwrap();
    // Drop the final row, as if the process died during trial 2.
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().collect();
    std::fs::write(&path, kept[..kept.len() - 1].join("\n") + "\n").unwrap();
    let out = run_study(&space, &cfg, |t, _| Ok(x_of(&t.params))).unwrap();
    assert_eq!(out.trials.len(), 3);
    assert!(out.trials.iter().all(|t| t.status == TrialStatus::Complete));
}

#[test]
fn parallel_study_runs_every_trial() {
    let mut cfg = StudyConfig::new(9, 75);
    cfg.parallel = 3;
    let out = run_study(&SearchSpace::gnn_default(), &cfg, rung_objective(0)).unwrap();
    assert_eq!(out.trials.len(), 9);
    assert!(out.trials.iter().all(|t| t.status != TrialStatus::Running));
}

#[test]
fn best_sidecar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_study(&SearchSpace::gnn_default(), &StudyConfig::new(3, 8), |t, _| Ok(t.id as f64)).unwrap();
    let best = out.best.unwrap();
    let path = dir.path().join("best.txt");
    write_best(&path, &best).unwrap();
    let c = flowcast::config::KvConfig::read(&path).unwrap();
    assert_eq!(c.get::<usize>("trial_id").unwrap(), Some(2));
    let h = flowcast::gnn::GnnHyper::default().read_from(&c).unwrap();
    assert_eq!(h.n_layers.to_string(), best.params["n_layers"].to_string());
}

fn arb_space() -> impl Strategy<Value = SearchSpace> {
    (0.0f64..5.0, 0.1f64..5.0, 1e-5f64..1e-2, -5i64..5, 0i64..4).prop_map(|(lo, w, llo, ilo, iw)| {
        SearchSpace::new()
            .real("a", lo, lo + w)
            .log_real("b", llo, llo * 100.0)
            .int("c", ilo, ilo + iw)
            .categorical("d", &["p", "q", "r"])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn suggestions_stay_in_bounds(space in arb_space(), n in 0usize..30, seed in 0u64..1000) {
        let mut rng = SeededRng::new(seed);
        let history: Vec<TrialRecord> = (0..n)
            .map(|id| {
                let params = sample_uniform(&space, &mut rng);
                TrialRecord { id, params, rung_scores: vec![], status: TrialStatus::Complete, final_score: Some(rng.uniform()) }
            })
            .collect();
        let s = tpe_suggest(&history, &space, &TpeConfig::default(), &mut rng).unwrap();
        prop_assert!(space.contains(&s), "{:?}", s);
        let again = tpe_suggest(&history, &space, &TpeConfig::default(), &mut SeededRng::new(seed ^ 1)).unwrap();
        let twice = tpe_suggest(&history, &space, &TpeConfig::default(), &mut SeededRng::new(seed ^ 1)).unwrap();
        prop_assert_eq!(again, twice);
    }

    #[test]
    fn rungs_are_exact_powers(min in 1usize..20, eta in 2usize..5, max in 20usize..2000) {
        let cfg = ShaConfig { min_resource: min, reduction_factor: eta, ..ShaConfig::default() };
        let rungs = sha_rungs(&cfg, max).unwrap();
        for (k, r) in rungs.iter().enumerate() {
            prop_assert_eq!(*r, min * eta.pow(k as u32));
            prop_assert!(*r <= max);
        }
        prop_assert!(rungs.last().unwrap() * eta > max);
    }

    #[test]
    fn promotion_count_is_ceiling(scores in prop::collection::vec(0u8..6, 2..20)) {
        let cfg = ShaConfig::default();
        let board: Vec<(usize, f64)> = scores.iter().enumerate().map(|(i, &s)| (i, s as f64)).collect();
        let kept = board.iter().filter(|(_, s)| !sha_should_prune(*s, &board, &cfg)).count();
        let k = board.len().div_ceil(3);
        // Ties at the boundary survive together.
        prop_assert!(kept >= k);
        let mut sorted: Vec<f64> = board.iter().map(|b| b.1).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[k - 1];
        prop_assert_eq!(kept, sorted.iter().filter(|&&s| s >= cut).count());
    }
}
