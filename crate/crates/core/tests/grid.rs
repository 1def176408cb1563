mod common;

use std::fs;
use std::sync::Arc;

use common::{Fixture, Policy, Scheme};
use lexprobe::config::ExtractionConfig;
use lexprobe::distill::{build_matrix, StoreSet};
use lexprobe::error::Error;
use lexprobe::grid::{emit_plot_data, read_results_csv, run_grid, GridSpec, Selector, Task};
use lexprobe::matrix::TypeEmbeddingMatrix;
use lexprobe::store::TokenStore;
use lexprobe::vocab::Vocabulary;

fn spec(fx: &Fixture, configs: &[&str], tasks: &str, out: &str) -> GridSpec {
    GridSpec::parse(&fx.grid_spec(configs, tasks, &fx.path(out)), fx.dir.path()).unwrap()
}

#[test]
fn single_cell_matches_reference() {
    let fx = Fixture::build();
    let summary = run_grid(&spec(&fx, &["mono.aoc-3.withcls.avg_le2"], "lsim", "out")).unwrap();
    assert_eq!(summary.failed_rows, 0);
    let rows = read_results_csv(&summary.results_csv).unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert_eq!(
        (row.task, row.lang.as_str(), row.metric.as_str()),
        (Task::Lsim, "en", "spearman")
    );
    assert_eq!(row.config, "mono.aoc-3.withcls.avg_le2");
    let expect = common::lsim(
        &fx.en.words,
        &common::distill(&fx.en, Some(3), Policy::WithCls, Scheme::AvgLe(2)),
        &fx.lsim,
    );
    assert!(
        (row.value.unwrap() - expect).abs() <= 1e-6,
        "{:?} vs {expect}",
        row.value
    );
    assert_eq!(row.provenance.len(), 16);
    assert!(row.provenance.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(row.coverage.unwrap() > 0.0);

    let json: serde_json::Value = serde_json::from_slice(&fs::read(&summary.results_json).unwrap()).unwrap();
    assert_eq!(json["LSIM"][0]["metric"], "spearman");
    let timings = fs::read_to_string(fx.path("out/timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 2);
}

#[test]
fn rerun_is_served_from_a_sound_cache() {
    let fx = Fixture::build();
    let configs = ["mono.iso.all.l0", "mono.aoc-3.nospec.avg_ge1"];
    let grid = spec(&fx, &configs, "lsim, wa", "out");
    let first = run_grid(&grid).unwrap();
    assert_eq!((first.cache_hits, first.cache_misses), (0, 2));
    let second = run_grid(&grid).unwrap();
    assert_eq!((second.cache_hits, second.cache_misses), (2, 0));

    let iso = TokenStore::open(fx.path("en.iso.lxts")).unwrap();
    let aoc = TokenStore::open(fx.path("en.aoc.lxts")).unwrap();
    let vocab = Arc::new(Vocabulary::load(fx.path("en.vocab")).unwrap());
    let mut cached: Vec<TypeEmbeddingMatrix> = fs::read_dir(fx.path("out/cache"))
        .unwrap()
        .map(|e| TypeEmbeddingMatrix::read_binary(e.unwrap().path()).unwrap())
        .collect();
    assert_eq!(cached.len(), 2);
    cached.sort_by_key(|m| m.provenance.config.clone());
    for m in cached {
        let cfg: ExtractionConfig = m.provenance.config.as_deref().unwrap().parse().unwrap();
        let stores = if cfg.pooling().context == lexprobe::config::ContextMode::Iso {
            StoreSet::iso(&iso)
        } else {
            StoreSet::aoc(&aoc, &iso)
        };
        let fresh = build_matrix(Arc::clone(&vocab), &stores, &cfg).unwrap();
        let bits = |m: &TypeEmbeddingMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&fresh), "{cfg}");
        assert_eq!(m.vocab().words(), fresh.vocab().words());
    }
}

#[test]
fn missing_input_aborts_before_any_output() {
    let fx = Fixture::build();
    let mut grid = spec(&fx, &["mono.iso.nospec.l1"], "lsim", "out");
    fs::remove_file(fx.path("lsim.txt")).unwrap();
    let err = run_grid(&grid).unwrap_err();
    assert!(matches!(&err, Error::Io { .. }), "{err:?}");
    assert!(err.to_string().contains("lsim.txt"), "{err}");
    assert!(!fx.path("out/results.csv").exists());

    grid.configs = vec!["mono.iso.nospec.l9".parse().unwrap()];
    common::write_lines(&fx.path("lsim.txt"), &["river stone 1".into()]);
    let err = run_grid(&grid).unwrap_err();
    assert!(
        matches!(&err, Error::Parse { segment, .. } if segment == "mono.iso.nospec.l9"),
        "{err:?}"
    );
    assert!(!fx.path("out/results.csv").exists());
}

#[test]
fn failing_rows_do_not_stop_the_grid() {
    let fx = Fixture::build();
    common::write_lines(&fx.path("wa.txt"), &["zzz yyy xxx www".into()]);
    let summary = run_grid(&spec(&fx, &["mono.iso.nospec.l1"], "lsim, wa, bli", "out")).unwrap();
    let rows = read_results_csv(&summary.results_csv).unwrap();
    let wa: Vec<_> = rows.iter().filter(|r| r.task == Task::Wa).collect();
    assert!(!wa.is_empty());
    assert!(wa.iter().all(|r| r.value.is_none() && r.error.is_some()));
    assert_eq!(summary.failed_rows, wa.len());
    assert!(rows.iter().filter(|r| r.task != Task::Wa).all(|r| r.value.is_some()));
}

#[test]
fn plot_data_from_results() {
    let fx = Fixture::build();
    let configs = [
        "mono.iso.nospec.l0",
        "mono.iso.nospec.l1",
        "mono.iso.nospec.l2",
        "mono.iso.nospec.l3",
    ];
    let summary = run_grid(&spec(&fx, &configs, "lsim, cka", "out")).unwrap();
    let rows = read_results_csv(&summary.results_csv).unwrap();

    let lsim = emit_plot_data(&rows, &"task=lsim".parse::<Selector>().unwrap()).unwrap();
    assert_eq!(lsim.len(), 4);
    assert!(lsim.iter().all(|p| p.config == "mono.iso.nospec"));
    let xs: Vec<_> = lsim.iter().map(|p| p.x.as_str()).collect();
    assert_eq!(xs, ["l0", "l1", "l2", "l3"]);

    let heat = emit_plot_data(&rows, &"task=cka;metric=self".parse::<Selector>().unwrap()).unwrap();
    assert_eq!(heat.len(), 4 * 4 * 2);
    assert!(heat.iter().all(|p| (0.0..=1.0 + 1e-9).contains(&p.value)));
    assert!(emit_plot_data(&rows, &"task=relp".parse::<Selector>().unwrap()).is_err());
}
