//! Genome-wide scan: text input parsing, sample alignment, a parallel
//! per-variant test loop with ordered output, and the results table.
//!
//! Genotypes are variant-major and tab-separated:
//!
//! ```text
//! #samples	s1	s2	s3
//! rs1	1	12345	0	1	NA
//! ```
//!
//! Phenotype files hold `sample_id value`, covariate files
//! `sample_id c1 ... cp`; both start with a header line. `NA` marks a
//! missing value.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crossbeam_channel::bounded;

use crate::engine::{asymptotic_test_scores, permutation_pvalue_scores, prepare_phenotype, PermutationConfig};
use crate::error::{HwuError, Result};
use crate::matrix::Matrix;
use crate::rank_kernel::{CovariateMatrix, PhenotypeVector, StandardizedScores};
use crate::weights::{
    compose_weight, impute_mean, kappa_crossprod, kappa_euclidean, kappa_ibs, DistanceMetric,
    GeneticSimilarity, KappaMatrix, SimilarityKind, WeightMode,
};

const MISSING: &str = "NA";

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub id: String,
    pub chrom: String,
    pub pos: u64,
    /// Dosages in sample order; `NaN` where missing.
    pub dosages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeTable {
    pub samples: Vec<String>,
    pub variants: Vec<Variant>,
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> HwuError {
    HwuError::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HwuError::io(path, e))
}

fn check_unique(ids: &[String], source: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(HwuError::InvalidInput(format!("duplicate sample id {id:?} in {source}")));
        }
    }
    Ok(())
}

impl GenotypeTable {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines
            .next()
            .ok_or_else(|| parse_err(source, 1, "empty genotype file"))?;
        let mut fields = header.trim_end_matches('\r').split('\t');
        if fields.next() != Some("#samples") {
            return Err(parse_err(source, hl + 1, "header must start with #samples"));
        }
        let samples: Vec<String> = fields.map(str::to_string).collect();
        if samples.is_empty() || samples.iter().any(|s| s.is_empty()) {
            return Err(parse_err(source, hl + 1, "header lists no (or an empty) sample id"));
        }
        check_unique(&samples, source)?;
        let n = samples.len();
        let mut variants = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if f.len() != n + 3 {
                return Err(parse_err(
                    source,
                    lineno,
                    format!("expected {} fields, found {}", n + 3, f.len()),
                ));
            }
            let pos = f[2]
                .parse::<u64>()
                .map_err(|_| parse_err(source, lineno, format!("bad position {:?}", f[2])))?;
            let dosages = f[3..]
                .iter()
                .map(|d| match *d {
                    "0" => Ok(0.0),
                    "1" => Ok(1.0),
                    "2" => Ok(2.0),
                    MISSING => Ok(f64::NAN),
                    other => Err(parse_err(
                        source,
                        lineno,
                        format!("variant {}: dosage {other:?} is not 0, 1, 2 or NA", f[0]),
                    )),
                })
                .collect::<Result<Vec<f64>>>()?;
            variants.push(Variant {
                id: f[0].to_string(),
                chrom: f[1].to_string(),
                pos,
                dosages,
            });
        }
        Ok(Self { samples, variants })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("#samples");
        for s in &self.samples {
            out.push('\t');
            out.push_str(s);
        }
        out.push('\n');
        for v in &self.variants {
            out.push_str(&format!("{}\t{}\t{}", v.id, v.chrom, v.pos));
            for d in &v.dosages {
                out.push('\t');
                if d.is_nan() {
                    out.push_str(MISSING);
                } else {
                    out.push_str(&format!("{}", *d as u8));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// A sample-keyed table with a header: `sample_id v1 ... vp`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub columns: Vec<String>,
    pub samples: Vec<String>,
    /// `None` for a row with any missing value.
    pub rows: Vec<Option<Vec<f64>>>,
}

impl SampleTable {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines
            .next()
            .ok_or_else(|| parse_err(source, 1, "empty file; a header line is required"))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() < 2 {
            return Err(parse_err(source, hl + 1, "header needs a sample id column and at least one value column"));
        }
        if head[1..].iter().all(|h| h.parse::<f64>().is_ok()) {
            return Err(parse_err(source, hl + 1, "first line looks like data; a header line is required"));
        }
        let p = head.len() - 1;
        let mut samples = Vec::new();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != p + 1 {
                return Err(parse_err(source, i + 1, format!("expected {} fields, found {}", p + 1, f.len())));
            }
            let mut vals = Vec::with_capacity(p);
            let mut missing = false;
            for v in &f[1..] {
                if *v == MISSING {
                    missing = true;
                    continue;
                }
                let x = v
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(source, i + 1, format!("bad value {v:?}")))?;
                vals.push(x);
            }
            samples.push(f[0].to_string());
            rows.push((!missing).then_some(vals));
        }
        check_unique(&samples, source)?;
        Ok(Self {
            columns: head[1..].iter().map(|s| s.to_string()).collect(),
            samples,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?, &path.display().to_string())
    }

    fn complete_index(&self) -> HashMap<&str, &[f64]> {
        self.samples
            .iter()
            .zip(&self.rows)
            .filter_map(|(s, r)| r.as_deref().map(|r| (s.as_str(), r)))
            .collect()
    }
}

/// Where the background similarity comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum KappaSource {
    Euclidean(PathBuf),
    CrossProduct(PathBuf),
    Ibs(PathBuf),
    Constant,
    /// Whitespace-separated `n x n` matrix in genotype-file sample order.
    File(PathBuf),
}

impl FromStr for KappaSource {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "constant" {
            return Ok(Self::Constant);
        }
        let (kind, path) = s
            .split_once(':')
            .filter(|(_, p)| !p.is_empty())
            .ok_or_else(|| HwuError::InvalidParameter(format!("bad kappa source {s:?}")))?;
        let path = PathBuf::from(path);
        match kind {
            "euclidean" => Ok(Self::Euclidean(path)),
            "crossprod" => Ok(Self::CrossProduct(path)),
            "ibs" => Ok(Self::Ibs(path)),
            "file" => Ok(Self::File(path)),
            other => Err(HwuError::InvalidParameter(format!("unknown kappa source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub genotypes: PathBuf,
    pub phenotypes: PathBuf,
    pub covariates: Option<PathBuf>,
    pub kappa: KappaSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadCounts {
    pub genotype_samples: usize,
    pub phenotype_samples: usize,
    pub missing_phenotype: usize,
    pub used: usize,
    pub variants: usize,
    pub imputed_dosages: usize,
}

/// Inputs aligned to the analysed samples, in phenotype-file order, with
/// missing dosages mean-imputed per variant.
#[derive(Debug, Clone)]
pub struct ScanInputs {
    pub samples: Vec<String>,
    pub variants: Vec<Variant>,
    pub y: PhenotypeVector,
    pub z: CovariateMatrix,
    pub kappa: KappaMatrix,
    pub counts: LoadCounts,
}

fn covariate_matrix(table: &SampleTable, samples: &[String]) -> Result<Matrix> {
    let idx = table.complete_index();
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| idx[s.as_str()].to_vec()).collect();
    Matrix::from_rows(&rows)
}

pub fn load_inputs(opts: &LoadOptions) -> Result<ScanInputs> {
    let geno = GenotypeTable::load(&opts.genotypes)?;
    let pheno = SampleTable::load(&opts.phenotypes)?;
    if pheno.columns.len() != 1 {
        return Err(HwuError::InvalidInput(format!(
            "{}: phenotype file must have exactly one value column",
            opts.phenotypes.display()
        )));
    }
    let covar = opts.covariates.as_deref().map(SampleTable::load).transpose()?;
    let kappa_table = match &opts.kappa {
        KappaSource::Euclidean(p) | KappaSource::CrossProduct(p) => Some(SampleTable::load(p)?),
        _ => None,
    };
    let ibs_table = match &opts.kappa {
        KappaSource::Ibs(p) => Some(GenotypeTable::load(p)?),
        _ => None,
    };

    let geno_pos: HashMap<&str, usize> =
        geno.samples.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let covar_idx = covar.as_ref().map(SampleTable::complete_index);
    let kappa_idx = kappa_table.as_ref().map(SampleTable::complete_index);
    let ibs_pos: Option<HashSet<&str>> =
        ibs_table.as_ref().map(|t| t.samples.iter().map(String::as_str).collect());

    let mut counts = LoadCounts {
        genotype_samples: geno.samples.len(),
        phenotype_samples: pheno.samples.len(),
        variants: geno.variants.len(),
        ..Default::default()
    };
    let mut samples = Vec::new();
    let mut y = Vec::new();
    for (s, row) in pheno.samples.iter().zip(&pheno.rows) {
        let Some(row) = row else {
            counts.missing_phenotype += 1;
            continue;
        };
        let keep = geno_pos.contains_key(s.as_str())
            && covar_idx.as_ref().is_none_or(|c| c.contains_key(s.as_str()))
            && kappa_idx.as_ref().is_none_or(|c| c.contains_key(s.as_str()))
            && ibs_pos.as_ref().is_none_or(|c| c.contains(s.as_str()));
        if keep {
            samples.push(s.clone());
            y.push(row[0]);
        }
    }
    let n = samples.len();
    if n < 3 {
        return Err(HwuError::InvalidInput(format!(
            "only {n} sample(s) are present in every input; at least 3 are needed"
        )));
    }
    counts.used = n;
    let cols: Vec<usize> = samples.iter().map(|s| geno_pos[s.as_str()]).collect();

    let mut variants = Vec::with_capacity(geno.variants.len());
    for v in geno.variants {
        let mut d: Vec<f64> = cols.iter().map(|&c| v.dosages[c]).collect();
        counts.imputed_dosages += impute_mean(&mut d);
        variants.push(Variant { dosages: d, ..v });
    }

    let z = match &covar {
        Some(t) => {
            let m = covariate_matrix(t, &samples)?;
            let columns: Vec<Vec<f64>> = (0..m.ncols()).map(|j| m.column(j)).collect();
            CovariateMatrix::with_covariates(n, &columns)?
        }
        None => CovariateMatrix::intercept_only(n)?,
    };

    let kappa = match &opts.kappa {
        KappaSource::Constant => KappaMatrix::constant(n, 1.0),
        KappaSource::Euclidean(_) => kappa_euclidean(
            &covariate_matrix(kappa_table.as_ref().expect("loaded above"), &samples)?,
            &DistanceMetric::ScaledIdentity,
        )?,
        KappaSource::CrossProduct(_) => {
            kappa_crossprod(&covariate_matrix(kappa_table.as_ref().expect("loaded above"), &samples)?)?
        }
        KappaSource::Ibs(_) => {
            let t = ibs_table.expect("loaded above");
            let pos: HashMap<&str, usize> =
                t.samples.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let cols: Vec<usize> = samples.iter().map(|s| pos[s.as_str()]).collect();
            let markers: Vec<Vec<f64>> = t
                .variants
                .iter()
                .map(|v| {
                    let mut d: Vec<f64> = cols.iter().map(|&c| v.dosages[c]).collect();
                    impute_mean(&mut d);
                    d
                })
                .collect();
            kappa_ibs(&markers)?
        }
        KappaSource::File(p) => {
            let full = KappaMatrix::load(p)?;
            if full.n() != geno.samples.len() {
                return Err(HwuError::InvalidInput(format!(
                    "{}: kappa is {}x{} but the genotype file has {} samples",
                    p.display(),
                    full.n(),
                    full.n(),
                    geno.samples.len()
                )));
            }
            full.select(&cols)
        }
    };

    Ok(ScanInputs {
        samples,
        variants,
        y: PhenotypeVector::new(y)?,
        z,
        kappa,
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanStatus {
    Ok,
    SkippedMonomorphic,
    SkippedDegenerate,
    FallbackMomentMatch,
    Failed,
}

impl ScanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::SkippedMonomorphic => "skipped_monomorphic",
            Self::SkippedDegenerate => "skipped_degenerate",
            Self::FallbackMomentMatch => "fallback_moment_match",
            Self::Failed => "failed",
        }
    }
}

impl fmt::Display for ScanStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScanStatus {
    type Err = HwuError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ok" => Self::Ok,
            "skipped_monomorphic" => Self::SkippedMonomorphic,
            "skipped_degenerate" => Self::SkippedDegenerate,
            "fallback_moment_match" => Self::FallbackMomentMatch,
            "failed" => Self::Failed,
            other => return Err(HwuError::InvalidInput(format!("unknown status {other:?}"))),
        })
    }
}

/// One output row. `u` is the statistic of the first mode that could be tested.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub variant_id: String,
    pub chrom: String,
    pub pos: u64,
    pub n_used: usize,
    pub u: Option<f64>,
    pub p_hwu: Option<f64>,
    pub p_nhwu: Option<f64>,
    pub p_phwu: Option<f64>,
    pub p_perm: Option<f64>,
    pub status: ScanStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanOptions {
    pub modes: Vec<WeightMode>,
    pub similarity: SimilarityKind,
    /// Permutation p-value for the first mode that has nonzero weights; the
    /// stream is the variant index.
    pub permutation: Option<PermutationConfig>,
    pub threads: usize,
    pub queue_capacity: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            modes: vec![WeightMode::Hwu],
            similarity: SimilarityKind::CrossProduct,
            permutation: None,
            threads: 1,
            queue_capacity: 64,
        }
    }
}

fn is_monomorphic(g: &[f64]) -> bool {
    g.windows(2).all(|w| w[0] == w[1])
}

fn record_for(
    v: &Variant,
    inputs: &ScanInputs,
    scores: &StandardizedScores,
    opts: &ScanOptions,
    index: usize,
) -> ScanRecord {
    let mut rec = ScanRecord {
        variant_id: v.id.clone(),
        chrom: v.chrom.clone(),
        pos: v.pos,
        n_used: scores.len(),
        u: None,
        p_hwu: None,
        p_nhwu: None,
        p_phwu: None,
        p_perm: None,
        status: ScanStatus::Ok,
    };
    if is_monomorphic(&v.dosages) {
        rec.status = ScanStatus::SkippedMonomorphic;
        return rec;
    }
    let run = || -> Result<ScanRecord> {
        let mut rec = rec.clone();
        let gs = GeneticSimilarity::new(vec![v.dosages.clone()], opts.similarity)?;
        // a mode whose weights vanish leaves its own column NA
        let mut degenerate = None;
        for &mode in &opts.modes {
            let tested = compose_weight(&inputs.kappa, &gs, mode)
                .and_then(|w| asymptotic_test_scores(scores, &inputs.z, &w).map(|r| (w, r)));
            let (w, res) = match tested {
                Err(e) if e.is_degenerate() => {
                    degenerate.get_or_insert(e);
                    continue;
                }
                other => other?,
            };
            if rec.u.is_none() {
                rec.u = Some(res.u_stat);
                if let Some(cfg) = &opts.permutation {
                    let cfg = cfg.with_stream(index as u64);
                    rec.p_perm = Some(permutation_pvalue_scores(scores, &w, &cfg)?.value);
                }
            }
            if res.fallback {
                rec.status = ScanStatus::FallbackMomentMatch;
            }
            let p = Some(res.p_asymptotic.value);
            match mode {
                WeightMode::Hwu => rec.p_hwu = p,
                WeightMode::Nhwu => rec.p_nhwu = p,
                WeightMode::Phwu => rec.p_phwu = p,
            }
        }
        match degenerate {
            Some(e) if rec.u.is_none() => Err(e),
            _ => Ok(rec),
        }
    };
    match catch_unwind(AssertUnwindSafe(run)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) if e.is_degenerate() => {
            log::debug!("variant {}: {e}", v.id);
            rec.status = ScanStatus::SkippedDegenerate;
            rec
        }
        Ok(Err(e)) => {
            log::warn!("variant {} failed: {e}", v.id);
            rec.status = ScanStatus::Failed;
            rec
        }
        Err(_) => {
            log::error!("variant {} panicked; continuing", v.id);
            rec.status = ScanStatus::Failed;
            rec
        }
    }
}

fn validate_options(opts: &ScanOptions) -> Result<()> {
    if opts.modes.is_empty() {
        return Err(HwuError::InvalidParameter("no weight mode requested".into()));
    }
    let distinct: HashSet<_> = opts.modes.iter().collect();
    if distinct.len() != opts.modes.len() {
        return Err(HwuError::InvalidParameter("weight modes repeat".into()));
    }
    if opts.similarity == SimilarityKind::MultiLocus {
        return Err(HwuError::InvalidParameter(
            "a per-variant scan uses single-locus similarity".into(),
        ));
    }
    Ok(())
}

/// Tests every variant and hands records to `sink` in input order. A
/// producer feeds a bounded queue, `threads` workers share the read-only
/// inputs, and the calling thread restores input order.
pub fn run_scan_with<F>(inputs: &ScanInputs, opts: &ScanOptions, mut sink: F) -> Result<usize>
where
    F: FnMut(ScanRecord) -> Result<()>,
{
    validate_options(opts)?;
    let scores = prepare_phenotype(&inputs.y, &inputs.z)?;
    let threads = opts.threads.max(1);
    let cap = opts.queue_capacity.max(1);
    let (work_tx, work_rx) = bounded::<(usize, &Variant)>(cap);
    let (done_tx, done_rx) = bounded::<(usize, ScanRecord)>(cap);

    std::thread::scope(|s| {
        s.spawn(move || {
            for item in inputs.variants.iter().enumerate() {
                if work_tx.send(item).is_err() {
                    break;
                }
            }
        });
        for _ in 0..threads {
            let rx = work_rx.clone();
            let tx = done_tx.clone();
            let scores = &scores;
            s.spawn(move || {
                for (i, v) in rx {
                    if tx.send((i, record_for(v, inputs, scores, opts, i))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(work_rx);
        drop(done_tx);

        let mut pending = BTreeMap::new();
        let mut next = 0usize;
        let mut result = Ok(());
        for (i, rec) in done_rx.iter() {
            if result.is_err() {
                continue;
            }
            pending.insert(i, rec);
            while let Some(rec) = pending.remove(&next) {
                next += 1;
                if let Err(e) = sink(rec) {
                    result = Err(e);
                    break;
                }
            }
        }
        result.map(|_| next)
    })
}

pub fn run_scan(inputs: &ScanInputs, opts: &ScanOptions) -> Result<Vec<ScanRecord>> {
    let mut out = Vec::with_capacity(inputs.variants.len());
    run_scan_with(inputs, opts, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

pub const RESULT_HEADER: [&str; 10] = [
    "variant_id", "chrom", "pos", "n_used", "U", "p_hwu", "p_nhwu", "p_phwu", "p_perm", "status",
];

fn fmt_p(p: Option<f64>) -> String {
    p.map_or_else(|| MISSING.to_string(), |v| format!("{v:.5e}"))
}

/// Tab-separated line for `rec`, without the newline. p-values carry six
/// significant digits; `U` is written in shortest round-trip form.
pub fn format_record(rec: &ScanRecord) -> String {
    [
        rec.variant_id.clone(),
        rec.chrom.clone(),
        rec.pos.to_string(),
        rec.n_used.to_string(),
        rec.u.map_or_else(|| MISSING.to_string(), |u| format!("{u:e}")),
        fmt_p(rec.p_hwu),
        fmt_p(rec.p_nhwu),
        fmt_p(rec.p_phwu),
        fmt_p(rec.p_perm),
        rec.status.to_string(),
    ]
    .join("\t")
}

pub fn parse_record(line: &str, source: &str, lineno: usize) -> Result<ScanRecord> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != RESULT_HEADER.len() {
        return Err(parse_err(source, lineno, format!("expected {} fields", RESULT_HEADER.len())));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == MISSING {
            return Ok(None);
        }
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| parse_err(source, lineno, format!("bad number {s:?}")))
    };
    Ok(ScanRecord {
        variant_id: f[0].to_string(),
        chrom: f[1].to_string(),
        pos: f[2].parse().map_err(|_| parse_err(source, lineno, "bad position"))?,
        n_used: f[3].parse().map_err(|_| parse_err(source, lineno, "bad n_used"))?,
        u: opt(f[4])?,
        p_hwu: opt(f[5])?,
        p_nhwu: opt(f[6])?,
        p_phwu: opt(f[7])?,
        p_perm: opt(f[8])?,
        status: f[9].parse()?,
    })
}

pub fn parse_results(text: &str, source: &str) -> Result<Vec<ScanRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULT_HEADER.join("\t") => {}
        _ => return Err(parse_err(source, 1, "missing results header")),
    }
    lines.map(|(i, l)| parse_record(l, source, i + 1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteSummary {
    pub records: usize,
    pub ok: usize,
    pub skipped: usize,
    pub fallback: usize,
    pub failed: usize,
}

/// Streams records to a temporary file beside `path` and renames it into
/// place on [`ResultWriter::finish`]. Dropping an unfinished writer removes
/// the temporary file.
pub struct ResultWriter {
    path: PathBuf,
    tmp: PathBuf,
    out: Option<BufWriter<File>>,
    summary: WriteSummary,
}

impl ResultWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .ok_or_else(|| HwuError::InvalidParameter(format!("{} is not a file path", path.display())))?;
        let mut tmp_name = std::ffi::OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(format!(".{}.tmp", std::process::id()));
        let tmp = path.with_file_name(tmp_name);
        let file = File::create(&tmp).map_err(|e| HwuError::io(&tmp, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            tmp,
            out: Some(BufWriter::new(file)),
            summary: WriteSummary::default(),
        };
        w.line(&RESULT_HEADER.join("\t"))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        let out = self.out.as_mut().expect("writer is open");
        writeln!(out, "{s}").map_err(|e| HwuError::io(&self.tmp, e))
    }

    pub fn write(&mut self, rec: &ScanRecord) -> Result<()> {
        self.line(&format_record(rec))?;
        let s = &mut self.summary;
        s.records += 1;
        match rec.status {
            ScanStatus::Ok => s.ok += 1,
            ScanStatus::FallbackMomentMatch => s.fallback += 1,
            ScanStatus::SkippedMonomorphic | ScanStatus::SkippedDegenerate => s.skipped += 1,
            ScanStatus::Failed => s.failed += 1,
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<WriteSummary> {
        let out = self.out.take().expect("writer is open");
        let file = out.into_inner().map_err(|e| HwuError::io(&self.tmp, e.into_error()))?;
        file.sync_all().map_err(|e| HwuError::io(&self.tmp, e))?;
        fs::rename(&self.tmp, &self.path).map_err(|e| HwuError::io(&self.path, e))?;
        Ok(self.summary)
    }
}

impl Drop for ResultWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

pub fn write_results<'a, I>(records: I, path: &Path) -> Result<WriteSummary>
where
    I: IntoIterator<Item = &'a ScanRecord>,
{
    let mut w = ResultWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}
