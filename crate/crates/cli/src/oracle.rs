use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use log::info;
use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use tempora_core::checkpoint::Checkpoint;
use tempora_core::corpus::{Document, TemporalCorpus, TimeSlice, Vocabulary};
use tempora_core::exact_oracle::{self, FdReport};
use tempora_core::rng::{stream_rng, Purpose};
use tempora_core::rnn_rsm::{self, RnnRsmParams, SliceEstimator, TENSOR_NAMES};
use tempora_core::rsm_core;

use crate::error::{CliError, CliResult};
use crate::run::{RunManifest, Workdir};

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Check this checkpoint instead of a generated tiny model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub fd_epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest number of coordinates probed per finite-difference check.
    #[arg(long, default_value_t = 200)]
    pub coordinates: usize,
    /// Negate the analytic gradient of this tensor before comparing.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(TENSOR_NAMES))]
    pub corrupt_gradient: Option<String>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    deviation: f64,
    tolerance: f64,
    passed: bool,
}

const NORMALIZATION_TOL: f64 = 1e-9;
const PARTITION_TOL: f64 = 1e-10;
const RSM_FD_TOL: f64 = 1e-6;
const BPTT_FD_TOL: f64 = 1e-4;
/// Largest K^D enumerated for the normalization check.
const MAX_SEQUENCES: u64 = 200_000;

fn tiny_model(seed: u64) -> CliResult<(RnnRsmParams, TemporalCorpus)> {
    let (k, f, u, t) = (3, 2, 2, 3);
    let mut rng = stream_rng(seed, Purpose::Init, 0);
    let mut p = RnnRsmParams::zeros(k, f, u);
    let flat: Vec<f64> = (0..p.num_parameters()).map(|_| rng.random_range(-0.5..0.5)).collect();
    p.assign_flat(&flat)?;
    let corpus = random_corpus(k, t, seed)?;
    Ok((p, corpus))
}

fn random_corpus(k: usize, slices: usize, seed: u64) -> CliResult<TemporalCorpus> {
    let mut rng = stream_rng(seed, Purpose::Synthetic, 0);
    let vocab = Vocabulary::new((0..k).map(|i| format!("t{i}")).collect())?;
    let slices = (0..slices)
        .map(|t| {
            let docs = (0..2)
                .map(|_| {
                    let mut counts = vec![0u32; k];
                    for _ in 0..rng.random_range(1..=3) {
                        counts[rng.random_range(0..k)] += 1;
                    }
                    Document::from_dense(&counts)
                })
                .collect::<tempora_core::Result<Vec<_>>>()?;
            Ok(TimeSlice::new(t.to_string(), docs))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(TemporalCorpus::new(Arc::new(vocab), slices)?)
}

fn coordinates(n: usize, limit: usize, seed: u64) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    let mut rng = stream_rng(seed, Purpose::Split, 1);
    let mut picked = index::sample(&mut rng, n, limit).into_vec();
    picked.sort_unstable();
    picked
}

fn corrupt(flat: &mut [f64], sizes: &[usize], name: &str) {
    let mut offset = 0;
    for (n, &len) in TENSOR_NAMES.iter().zip(sizes) {
        if *n == name {
            flat[offset..offset + len].iter_mut().for_each(|x| *x = -*x);
        }
        offset += len;
    }
}

fn fd_check(name: &str, report: FdReport, tolerance: f64) -> Check {
    info!(
        "{name}: {} coordinates, worst index {}, absolute {:.3e}",
        report.checked, report.worst_index, report.max_absolute
    );
    Check {
        name: name.to_owned(),
        deviation: report.max_relative,
        tolerance,
        passed: report.max_relative <= tolerance,
    }
}

pub fn run(args: &OracleArgs, wd: &Workdir, manifest: &mut RunManifest) -> CliResult<()> {
    if !(1e-7..=1e-3).contains(&args.fd_epsilon) {
        return Err(CliError::Input(format!(
            "--fd-epsilon {} is outside [1e-7, 1e-3]",
            args.fd_epsilon
        )));
    }
    manifest.seed = Some(args.seed);
    manifest.config = serde_json::json!({
        "fd_epsilon": args.fd_epsilon,
        "coordinates": args.coordinates,
        "corrupt_gradient": args.corrupt_gradient,
    });
    let (params, corpus) = match &args.checkpoint {
        Some(path) => {
            let path = wd.path(path);
            manifest.input(&path)?;
            let ckpt = Checkpoint::load(&path)?;
            let p = ckpt.params()?;
            let c = random_corpus(p.vocab_size(), ckpt.labels().len(), args.seed)?;
            (p, c)
        }
        None => tiny_model(args.seed)?,
    };
    let (k, f) = (params.vocab_size(), params.hidden_size());
    if f > exact_oracle::MAX_EXACT_HIDDEN {
        return Err(tempora_core::Error::EnumerationTooLarge {
            hidden: f,
            limit: exact_oracle::MAX_EXACT_HIDDEN,
        }
        .into());
    }
    let state = rnn_rsm::forward(&params, &corpus)?;
    let mut checks = Vec::new();

    // Probabilities of all sequences of a length sum to one.
    let max_len = (1..=3u32).filter(|&d| (k as u64).saturating_pow(d) <= MAX_SEQUENCES).max().unwrap_or(1);
    let mut worst = 0.0f64;
    for t in 0..corpus.num_slices() {
        for d in 1..=max_len {
            let bias = state.bias(t);
            let log_z = exact_oracle::exact_log_z(&params.rsm, Some(bias), d)?;
            let total: f64 = exact_oracle::enumerate_sequences(k, d)
                .iter()
                .map(|(doc, m)| Ok(m * (-rsm_core::free_energy(&params.rsm, doc, Some(bias))? - log_z).exp()))
                .sum::<tempora_core::Result<f64>>()?;
            worst = worst.max((total - 1.0).abs());
        }
    }
    checks.push(Check {
        name: format!("normalization (D <= {max_len})"),
        deviation: worst,
        tolerance: NORMALIZATION_TOL,
        passed: worst <= NORMALIZATION_TOL,
    });

    // Closed-form partition function against explicit enumeration.
    let mut worst = 0.0f64;
    let mut compared = 0;
    for d in 1..=3u32 {
        match exact_oracle::brute_force_log_z(&params.rsm, Some(state.bias(0)), d) {
            Ok(brute) => {
                let closed = exact_oracle::exact_log_z(&params.rsm, Some(state.bias(0)), d)?;
                worst = worst.max((closed - brute).abs() / brute.abs().max(1.0));
                compared += 1;
            }
            Err(tempora_core::Error::InvalidArgument(_)) => break,
            Err(e) => return Err(e.into()),
        }
    }
    if compared > 0 {
        checks.push(Check {
            name: format!("partition function (D <= {compared})"),
            deviation: worst,
            tolerance: PARTITION_TOL,
            passed: worst <= PARTITION_TOL,
        });
    }

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();

    // Single-slice RSM gradient, with the slice-1 biases folded into a
    // plain RSM so that perturbing them changes the cost.
    let docs = &corpus.slices()[0].documents;
    let bias = state.bias(0);
    let rsm = rsm_core::RsmParams {
        w_vh: params.rsm.w_vh.clone(),
        b_v: bias.b_v.clone(),
        b_h: bias.b_h.clone(),
    };
    let g = exact_oracle::exact_rsm_gradient(&rsm, docs, None)?;
    let flat = |w: &ndarray::Array2<f64>, a: &ndarray::Array1<f64>, b: &ndarray::Array1<f64>| -> Vec<f64> {
        w.iter().chain(a.iter()).chain(b.iter()).copied().collect()
    };
    let mut analytic = flat(&g.w_vh, &g.b_v, &g.b_h);
    let rsm_point = flat(&rsm.w_vh, &rsm.b_v, &rsm.b_h);
    if let Some(name) = &args.corrupt_gradient {
        corrupt(&mut analytic, &sizes[..3], name);
    }
    let (kk, ff) = (k, f);
    let rsm_cost = |x: &[f64]| {
        let q = rsm_core::RsmParams {
            w_vh: ndarray::Array2::from_shape_vec((kk, ff), x[..kk * ff].to_vec()).expect("shape"),
            b_v: ndarray::Array1::from(x[kk * ff..kk * ff + kk].to_vec()),
            b_h: ndarray::Array1::from(x[kk * ff + kk..].to_vec()),
        };
        exact_oracle::exact_collection_cost(&q, docs, None)
    };
    let report = exact_oracle::finite_difference_check_at(
        rsm_cost,
        &rsm_point,
        &analytic,
        args.fd_epsilon,
        &coordinates(rsm_point.len(), args.coordinates, args.seed),
    )?;
    checks.push(fd_check("RSM gradient", report, RSM_FD_TOL));

    // Full sequence gradient through time.
    let point = params.to_flat();
    let mut rng = stream_rng(args.seed, Purpose::Epoch, 0);
    let g = rnn_rsm::sequence_gradient(&params, &corpus, SliceEstimator::Exact, &mut rng)?;
    let mut analytic = g.to_flat();
    if let Some(name) = &args.corrupt_gradient {
        corrupt(&mut analytic, &sizes, name);
    }
    let cost = |x: &[f64]| {
        let mut q = params.clone();
        q.assign_flat(x)?;
        exact_oracle::exact_sequence_cost(&q, &corpus)
    };
    let report = exact_oracle::finite_difference_check_at(
        cost,
        &point,
        &analytic,
        args.fd_epsilon,
        &coordinates(point.len(), args.coordinates, args.seed),
    )?;
    checks.push(fd_check("BPTT gradient", report, BPTT_FD_TOL));

    for c in &checks {
        println!(
            "{:<32} {:.3e} (tolerance {:.0e}) {}",
            c.name,
            c.deviation,
            c.tolerance,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(r) = &args.report {
        let r = wd.path(r);
        let text = serde_json::to_string_pretty(&checks).map_err(tempora_core::Error::from)?;
        std::fs::write(&r, text + "\n").map_err(|e| CliError::io(&r, e))?;
        manifest.output(&r);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!("failed: {}", failed.join(", "))))
    }
}
