use std::fs;
use std::path::Path;

use hwu_core::engine::PermutationConfig;
use hwu_core::scan::{
    load_inputs, parse_results, run_scan, run_scan_with, write_results, GenotypeTable, KappaSource,
    LoadOptions, ResultWriter, ScanOptions, ScanStatus, Variant,
};
use hwu_core::weights::WeightMode;
use hwu_core::HwuError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

fn opts(dir: &Path, covar: bool, kappa: KappaSource) -> LoadOptions {
    LoadOptions {
        genotypes: dir.join("geno.tsv"),
        phenotypes: dir.join("pheno.txt"),
        covariates: covar.then(|| dir.join("covar.txt")),
        kappa,
    }
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

/// Random study with `m` variants; variant `planted` (if any) drives y.
fn study(dir: &Path, n: usize, m: usize, planted: Option<usize>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let variants: Vec<Variant> = (0..m)
        .map(|j| Variant {
            id: format!("rs{j}"),
            chrom: "1".into(),
            pos: 1000 + j as u64,
            dosages: (0..n)
                .map(|_| (rng.random_bool(0.3) as u8 + rng.random_bool(0.3) as u8) as f64)
                .collect(),
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            e + planted.map_or(0.0, |j| 0.8 * variants[j].dosages[i])
        })
        .collect();
    let mut pheno = String::from("id\ttrait\n");
    let mut covar = String::from("id\tage\tpc1\n");
    for i in 0..n {
        pheno.push_str(&format!("{}\t{}\n", samples[i], y[i]));
        let c: f64 = rng.sample(StandardNormal);
        covar.push_str(&format!("{}\t{}\t{}\n", samples[i], 40 + i % 20, c));
    }
    write(dir, "geno.tsv", &GenotypeTable { samples, variants }.to_text());
    write(dir, "pheno.txt", &pheno);
    write(dir, "covar.txt", &covar);
}

#[test]
fn small_fixture_aligns_samples() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "geno.tsv",
        "#samples\ta\tb\tc\td\te\n\
         rs1\t1\t100\t0\t1\t2\t1\t0\n\
         rs2\t1\t200\t1\t1\t1\t1\tNA\n\
         rs3\t2\t300\t2\tNA\t0\t1\t1\n",
    );
    // e has no phenotype, z is not genotyped, b is missing
    write(dir.path(), "pheno.txt", "id y\nz 1.0\nd 0.3\na 2.5\nb NA\nc -1.2\n");
    let inputs = load_inputs(&opts(dir.path(), false, KappaSource::Constant)).unwrap();
    assert_eq!(inputs.samples, ["d", "a", "c"]);
    assert_eq!(inputs.counts.used, 3);
    assert_eq!(inputs.counts.missing_phenotype, 1);

    write(dir.path(), "pheno.txt", "id y\nd 0.3\na 2.5\nb 0.7\nc -1.2\n");
    let inputs = load_inputs(&opts(dir.path(), false, KappaSource::Constant)).unwrap();
    assert_eq!(inputs.counts.used, 4);
    let recs = run_scan(&inputs, &ScanOptions::default()).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.n_used == 4));
    assert_eq!(recs[0].status, ScanStatus::Ok);
    // rs2 is constant on the used samples
    assert_eq!(recs[1].status, ScanStatus::SkippedMonomorphic);
    assert!(recs[1].p_hwu.is_none());
    // rs3 has b imputed to the mean of d, a, c = (1, 2, 0)
    assert_eq!(inputs.variants[2].dosages, [1.0, 2.0, 1.0, 0.0]);
}

#[test]
fn bad_dosage_names_the_line() {
    let err = GenotypeTable::parse("#samples\ta\tb\n\nrs1\t1\t5\t0\t1\nrs2\t1\t6\t3\t1\n", "g.tsv").unwrap_err();
    match err {
        HwuError::Parse { line, message, .. } => {
            assert_eq!(line, 4);
            assert!(message.contains("rs2"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn too_few_samples_is_fatal() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "geno.tsv", "#samples\ta\tb\tc\nrs1\t1\t1\t0\t1\t2\n");
    write(dir.path(), "pheno.txt", "id y\na 1\nb 2\nx 3\n");
    assert!(load_inputs(&opts(dir.path(), false, KappaSource::Constant)).is_err());
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    study(dir.path(), 80, 60, Some(7), 11);
    let inputs = load_inputs(&opts(dir.path(), true, KappaSource::Euclidean(dir.path().join("covar.txt")))).unwrap();
    let mut texts = Vec::new();
    for threads in [1, 8] {
        let o = ScanOptions {
            modes: vec![WeightMode::Hwu, WeightMode::Nhwu, WeightMode::Phwu],
            permutation: Some(PermutationConfig::new(200, 5).unwrap()),
            threads,
            queue_capacity: 4,
            ..ScanOptions::default()
        };
        let out = dir.path().join(format!("res{threads}.tsv"));
        write_results(&run_scan(&inputs, &o).unwrap(), &out).unwrap();
        texts.push(fs::read(&out).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn all_monomorphic_input_is_skipped() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "geno.tsv", "#samples\ta\tb\tc\td\nrs1\t1\t1\t1\t1\t1\t1\nrs2\t1\t2\t0\t0\t0\tNA\n");
    write(dir.path(), "pheno.txt", "id y\na 1\nb 2\nc 3\nd 4\n");
    let inputs = load_inputs(&opts(dir.path(), false, KappaSource::Constant)).unwrap();
    let recs = run_scan(&inputs, &ScanOptions::default()).unwrap();
    assert!(recs.iter().all(|r| r.status == ScanStatus::SkippedMonomorphic));
    let out = dir.path().join("r.tsv");
    let s = write_results(&recs, &out).unwrap();
    assert_eq!((s.records, s.skipped, s.ok), (2, 2, 0));
}

#[test]
fn planted_signal_ranks_first() {
    let dir = TempDir::new().unwrap();
    study(dir.path(), 300, 100, Some(42), 3);
    let inputs = load_inputs(&opts(dir.path(), true, KappaSource::Constant)).unwrap();
    let recs = run_scan(&inputs, &ScanOptions { threads: 4, ..ScanOptions::default() }).unwrap();
    let best = recs
        .iter()
        .filter(|r| r.p_hwu.is_some())
        .min_by(|a, b| a.p_hwu.partial_cmp(&b.p_hwu).unwrap())
        .unwrap();
    assert_eq!(best.variant_id, "rs42");
    assert!(best.p_hwu.unwrap() < 1e-6);
}

#[test]
fn results_round_trip() {
    let dir = TempDir::new().unwrap();
    study(dir.path(), 60, 20, None, 8);
    let inputs = load_inputs(&opts(dir.path(), true, KappaSource::Constant)).unwrap();
    let o = ScanOptions {
        modes: vec![WeightMode::Hwu, WeightMode::Phwu],
        permutation: Some(PermutationConfig::new(100, 1).unwrap()),
        ..ScanOptions::default()
    };
    let recs = run_scan(&inputs, &o).unwrap();
    let out = dir.path().join("r.tsv");
    write_results(&recs, &out).unwrap();
    assert!(recs.iter().filter(|r| r.status == ScanStatus::Ok).count() >= 15);
    let back = parse_results(&fs::read_to_string(&out).unwrap(), "r.tsv").unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.variant_id, b.variant_id);
        assert_eq!(a.status, b.status);
        assert_eq!(a.u, b.u);
        assert!(b.p_nhwu.is_none());
        // constant kappa leaves nothing for the centered weights
        assert!(b.p_phwu.is_none());
        assert_eq!(a.p_hwu.is_some(), b.p_hwu.is_some());
        if let (Some(pa), Some(pb)) = (a.p_hwu, b.p_hwu) {
            assert!((pa - pb).abs() <= 1e-5 * pa);
        }
    }
}

#[test]
fn empty_scan_writes_only_the_header() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.tsv");
    let s = write_results(&[], &out).unwrap();
    assert_eq!(s.records, 0);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("variant_id\t"));
}

#[test]
fn failed_scan_leaves_no_partial_file() {
    let dir = TempDir::new().unwrap();
    study(dir.path(), 40, 30, None, 2);
    let inputs = load_inputs(&opts(dir.path(), false, KappaSource::Constant)).unwrap();
    let out = dir.path().join("r.tsv");
    let mut w = ResultWriter::create(&out).unwrap();
    let err = run_scan_with(&inputs, &ScanOptions { threads: 3, ..ScanOptions::default() }, |r| {
        if r.variant_id == "rs10" {
            return Err(HwuError::Numerical("disk full".into()));
        }
        w.write(&r)
    })
    .unwrap_err();
    assert!(matches!(err, HwuError::Numerical(_)));
    drop(w);
    let left: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".tmp") || n == "r.tsv")
        .collect();
    assert!(left.is_empty(), "{left:?}");
}
