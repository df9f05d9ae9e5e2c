//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints one PASS/FAIL line; the process fails if any check fails.
//!
//! Set `QBE_SOL_ROOT` to a directory of SOL recordings to also run the
//! reference-dataset cells (hours of compute).

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use qbe_core::baseline::{mel_spectrogram, render_line_spectrum, MelFilterbank, MfccConfig};
use qbe_core::corpus::{scan_corpus, Namespace, NoteMetadata};
use qbe_core::embedding::{diffusion_map, markov_matrix, DiffusionParams};
use qbe_core::evaluate::{
    evaluate_cell, score_retrieval, stratified_split, EvalReport, EvalSettings, FeatureTable, MetricKind,
};
use qbe_core::features::{FeatureSpec, FeatureVector};
use qbe_core::index::{IndexItem, RetrievalIndex};
use qbe_core::metric::{
    lmnn_loss_grad, target_neighbors, train_lmnn, LabeledFeatures, LmnnConfig, MetricMatrix,
};
use qbe_core::scattering::{
    build_filterbank, fit_compression, log_compress, CompressionStats, Scatterer, ScatteringConfig, ScatteringPath,
    ScatteringVector, DEFAULT_EPSILON,
};
use qbe_core::signal::{load_wav, synth_corpus, time_stretch, SynthCorpusConfig, Waveform, CANONICAL_RATE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const CORPUS_SEED: u64 = 7;

struct Outcome {
    passed: bool,
    detail: String,
}

fn check(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Corpus {
    waves: Vec<Waveform>,
    metadata: Vec<NoteMetadata>,
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let notes = synth_corpus(&SynthCorpusConfig::default(), CANONICAL_RATE, CORPUS_SEED).expect("synthetic corpus");
        let (waves, metadata) = notes.into_iter().unzip();
        Corpus { waves, metadata }
    })
}

fn scatterer() -> &'static Scatterer {
    static S: OnceLock<Scatterer> = OnceLock::new();
    S.get_or_init(|| Scatterer::new(ScatteringConfig::with_scale(1.0)).expect("scatterer"))
}

/// Raw T = 1 s scattering vectors of the synthetic corpus.
fn raw_scattering() -> &'static Vec<ScatteringVector> {
    static V: OnceLock<Vec<ScatteringVector>> = OnceLock::new();
    V.get_or_init(|| scatterer().scatter_batch(&corpus().waves).expect("scattering"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE)
}

fn compression_analytics() -> Outcome {
    let mu = 0.37;
    let paths = vec![ScatteringPath {
        order: 1,
        lambda1: 440.0,
        lambda2: None,
    }];
    let stats = CompressionStats {
        medians: vec![mu],
        epsilon: DEFAULT_EPSILON,
        paths: paths.clone(),
    };
    let at = |x: f64| {
        log_compress(
            &ScatteringVector {
                values: vec![x],
                paths: paths.clone(),
                averaging_scale: 1.0,
            },
            &stats,
        )
        .expect("compress")
        .values[0]
    };
    let zero = at(0.0);
    let eps_mu = at(DEFAULT_EPSILON * mu);
    let median = at(mu);
    let ok = zero == 0.0 && rel_close(eps_mu, 2f64.ln(), 1e-9) && rel_close(median, 1001f64.ln(), 1e-9);
    check(
        ok,
        format!("f(0)={zero:e}, f(eps*mu)={eps_mu:.12}, f(mu)={median:.12} (log 1001 = {:.12})", 1001f64.ln()),
    )
}

fn mel_equivalence() -> Outcome {
    let corpus = corpus();
    let cfg = MfccConfig::default();
    let mel = MelFilterbank::new(cfg.n_mel_bands, CANONICAL_RATE);
    let centers = scatterer().first_filterbank().centers();
    let (lo, hi) = (centers[0], *centers.last().expect("bands"));
    // mel bands whose centers the constant-Q bank spans
    let keep: Vec<usize> = (0..mel.n_bands())
        .filter(|&b| mel.centers()[b] >= lo && mel.centers()[b] <= hi)
        .collect();
    let mut worst = f64::INFINITY;
    let mut below = 0;
    for (w, s) in corpus.waves.iter().zip(raw_scattering()) {
        let s1: Vec<f64> = s.first_order().map(|(_, v)| v).collect();
        let rendered = render_line_spectrum(&s1, &centers, &cfg, CANONICAL_RATE).expect("render");
        let spec = mel_spectrogram(w, &cfg).expect("mel");
        let averaged: Vec<f64> = spec
            .iter()
            .map(|band| band.iter().sum::<f64>() / band.len() as f64)
            .collect();
        let a: Vec<f64> = keep.iter().map(|&b| rendered[b]).collect();
        let b: Vec<f64> = keep.iter().map(|&b| averaged[b]).collect();
        let c = cosine(&a, &b);
        worst = worst.min(c);
        if !(c > 0.95) {
            below += 1;
        }
    }
    check(
        below == 0,
        format!("worst cosine {worst:.4} over {} notes, {below} at or below 0.95, {} of {} bands compared", corpus.waves.len(), keep.len(), mel.n_bands()),
    )
}

fn am_detection() -> Outcome {
    let corpus = corpus();
    let sc = scatterer();
    let first = sc.first_filterbank();
    let second = build_filterbank(&sc.config().second).expect("second bank");
    let target = second.band_containing(6.0);
    let (mut hits, mut total) = (0, 0);
    for (meta, s) in corpus.metadata.iter().zip(raw_scattering()) {
        if meta.technique != "tremolo" {
            continue;
        }
        total += 1;
        let carrier = meta.pitch.expect("pitched").frequency();
        let band = first.band_containing(carrier).expect("carrier in range");
        let lambda1 = first.filters[band].center;
        let peak = s
            .second_order()
            .filter(|(p, _)| p.lambda1 == lambda1)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((p, _)) = peak {
            if second.band_containing(p.lambda2.expect("second order")) == target {
                hits += 1;
            }
        }
    }
    let rate = hits as f64 / total as f64;
    check(total > 0 && rate >= 0.95, format!("{hits}/{total} tremolo notes peak in the 6 Hz bin ({:.1}%)", 100.0 * rate))
}

fn technique_report(spec: FeatureSpec, table: Option<FeatureTable>) -> EvalReport {
    let corpus = corpus();
    let table = table.unwrap_or_else(|| FeatureTable::extract(&spec, &corpus.waves).expect("features"));
    let labels: Vec<String> = corpus.metadata.iter().map(|m| m.label(Namespace::Technique)).collect();
    evaluate_cell(&table, &labels, Namespace::Technique, MetricKind::Lmnn, &EvalSettings::default()).expect("cell")
}

fn am_fm_separation() -> Outcome {
    let scattering_spec = FeatureSpec::scattering(1.0);
    let extractor = qbe_core::features::Extractor::new(scattering_spec.clone()).expect("extractor");
    let raw: Vec<FeatureVector> = raw_scattering()
        .iter()
        .map(|v| FeatureVector::new(v.values.clone(), extractor.descriptor().clone()).expect("finite"))
        .collect();
    let table = FeatureTable::from_raw(&extractor, raw).expect("table");
    let scat = technique_report(scattering_spec, Some(table));
    let mfcc = technique_report(FeatureSpec::mfcc(13), None);
    let gap = scat.p_at_k - mfcc.p_at_k;
    let (cm, cs) = (mfcc.confusion("tremolo", "vibrato"), scat.confusion("tremolo", "vibrato"));
    let ok = gap >= 0.10 && cm >= 2.0 * cs && cm > 0.0;
    check(
        ok,
        format!(
            "P@5 scattering+LMNN {:.3} vs mfcc13+LMNN {:.3} (gap {gap:.3}); tremolo->vibrato confusion mfcc {cm:.3} vs scattering {cs:.3}",
            scat.p_at_k, mfcc.p_at_k
        ),
    )
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("normal");
    (0..n).map(|_| (0..d).map(|_| normal.sample(rng)).collect()).collect()
}

fn finite_difference_gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = LmnnConfig::default();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(12..25);
        let d = rng.random_range(2..5);
        let rows = gaussian_rows(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let data = LabeledFeatures::new(&rows, labels).expect("data");
        let targets = target_neighbors(&data, cfg.n_target_neighbors);
        let l = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } + 0.3 * rng.random_range(-1.0..1.0));
        let (_, grad) = lmnn_loss_grad(&l, &data, &targets, &cfg).expect("grad");
        let mut numeric = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut up = l.clone();
                up[(i, j)] += h;
                let mut down = l.clone();
                down[(i, j)] -= h;
                let fu = lmnn_loss_grad(&up, &data, &targets, &cfg).expect("loss").0;
                let fd = lmnn_loss_grad(&down, &data, &targets, &cfg).expect("loss").0;
                numeric[(i, j)] = (fu - fd) / (2.0 * h);
            }
        }
        let rel = (&grad - &numeric).norm() / grad.norm().max(1e-12);
        worst = worst.max(rel);
    }
    (worst < 1e-4, format!("worst relative gradient error {worst:.2e} over 20 instances"))
}

/// Two unit-variance classes separated along the first axis; the second axis
/// is pure noise scaled x10.
fn noisy_axis_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let unit = Normal::new(0.0, 1.0).expect("normal");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let center = if class == 0 { -2.0 } else { 2.0 };
        rows.push(vec![center + unit.sample(rng), 10.0 * unit.sample(rng)]);
        labels.push(class);
    }
    (rows, labels)
}

fn one_nn_accuracy(
    metric: Option<MetricMatrix>,
    train: &[Vec<f64>],
    train_labels: &[usize],
    test: &[Vec<f64>],
    test_labels: &[usize],
) -> f64 {
    let desc = FeatureSpec::mfcc(2).descriptor();
    let items = (0..train.len())
        .map(|i| IndexItem {
            path: PathBuf::from(format!("{i}")),
            metadata: NoteMetadata::new("Vn", "ord", None, qbe_core::corpus::Dynamics::Mf),
        })
        .collect();
    let vectors = train.iter().map(|r| FeatureVector::new(r.clone(), desc.clone()).expect("finite")).collect();
    let index = RetrievalIndex::build(vectors, items, metric).expect("index");
    let hits = test
        .iter()
        .zip(test_labels)
        .filter(|(q, &label)| {
            let top = index
                .query(&FeatureVector::new(q.to_vec(), desc.clone()).expect("finite"), 1, &[])
                .expect("query");
            train_labels[top.ranked[0].0] == label
        })
        .count();
    hits as f64 / test.len() as f64
}

fn lmnn_correctness() -> Outcome {
    let (grad_ok, grad_detail) = finite_difference_gradients();

    // noisy-axis improvement, averaged over small training sets where the
    // noise axis actually misleads Euclidean neighbors
    let mut monotone = true;
    let (mut before, mut after) = (0.0, 0.0);
    let mut worst_ratio: f64 = 0.0;
    let mut top1_changed = false;
    let runs = 10;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (train, train_labels) = noisy_axis_instance(&mut rng, 12);
        let (test, test_labels) = noisy_axis_instance(&mut rng, 400);
        let data = LabeledFeatures::new(&train, train_labels.clone()).expect("data");
        let outcome = train_lmnn(&data, FeatureSpec::mfcc(2).descriptor(), &LmnnConfig::default()).expect("train");
        monotone &= outcome.loss_history.windows(2).all(|w| w[1] <= w[0]);
        before += one_nn_accuracy(None, &train, &train_labels, &test, &test_labels) / runs as f64;
        after += one_nn_accuracy(Some(outcome.metric.clone()), &train, &train_labels, &test, &test_labels) / runs as f64;
        let l = &outcome.metric.entries;
        worst_ratio = worst_ratio.max(l.column(1).norm() / l.column(0).norm());
        let desc = FeatureSpec::mfcc(2).descriptor();
        let vectors: Vec<FeatureVector> =
            train.iter().map(|r| FeatureVector::new(r.clone(), desc.clone()).expect("finite")).collect();
        let items: Vec<IndexItem> = (0..train.len())
            .map(|i| IndexItem {
                path: PathBuf::from(format!("{i}")),
                metadata: NoteMetadata::new("Vn", "ord", None, qbe_core::corpus::Dynamics::Mf),
            })
            .collect();
        let plain = RetrievalIndex::build(vectors.clone(), items.clone(), None).expect("index");
        let learned = RetrievalIndex::build(vectors, items, Some(outcome.metric.clone())).expect("index");
        top1_changed |= (0..train.len())
            .any(|i| plain.query_item(i, 1).expect("q").ids() != learned.query_item(i, 1).expect("q").ids());
    }
    let improved = after - before >= 0.10;
    // the noise axis loses weight relative to the informative one
    let noise_suppressed = worst_ratio < 1.0;
    let desc = FeatureSpec::mfcc(4).descriptor();

    // more training runs on random instances, for monotonicity alone
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rows = gaussian_rows(&mut rng, 60, 3);
        let labels = (0..60).map(|i| i % 3).collect();
        let data = LabeledFeatures::new(&rows, labels).expect("data");
        let out = train_lmnn(&data, desc.clone(), &LmnnConfig { max_iterations: 200, ..LmnnConfig::default() }).expect("train");
        monotone &= out.loss_history.windows(2).all(|w| w[1] <= w[0]);
    }

    // identity map against plain Euclidean, through the retrieval pipeline
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rows = gaussian_rows(&mut rng, 120, 6);
    let labels: Vec<String> = (0..120).map(|i| format!("c{}", i % 4)).collect();
    let vectors: Vec<FeatureVector> = rows
        .iter()
        .map(|r| FeatureVector::new(r.clone(), desc.clone()).expect("finite"))
        .collect();
    let split = stratified_split(&labels, 0.2, 42).expect("split");
    let plain = score_retrieval(&vectors, &labels, &split, None, 5).expect("plain");
    let identity = score_retrieval(&vectors, &labels, &split, Some(MetricMatrix::identity(6, desc.clone())), 5).expect("identity");
    let zero_iter = train_lmnn(
        &LabeledFeatures::new(&rows, (0..120).map(|i| i % 4).collect()).expect("data"),
        desc.clone(),
        &LmnnConfig { max_iterations: 0, ..LmnnConfig::default() },
    )
    .expect("train");
    let untrained = score_retrieval(&vectors, &labels, &split, Some(zero_iter.metric), 5).expect("untrained");
    let items = |n: usize| -> Vec<IndexItem> {
        (0..n)
            .map(|i| IndexItem {
                path: PathBuf::from(format!("{i}")),
                metadata: NoteMetadata::new("Vn", "ord", None, qbe_core::corpus::Dynamics::Mf),
            })
            .collect()
    };
    let a = RetrievalIndex::build(vectors.clone(), items(120), None).expect("index");
    let b = RetrievalIndex::build(vectors.clone(), items(120), Some(MetricMatrix::identity(6, desc.clone()))).expect("index");
    let rankings_equal = (0..120).all(|i| a.query_item(i, 119).expect("q").ranked == b.query_item(i, 119).expect("q").ranked);
    let identity_ok = rankings_equal && plain == identity && plain == untrained;

    check(
        grad_ok && monotone && identity_ok && improved && noise_suppressed && top1_changed,
        format!(
            "{grad_detail}; accepted losses non-increasing: {monotone}; identity rankings equal: {identity_ok}; \
             noisy-axis mean 1-NN {:.1}% -> {:.1}%, worst noise/signal column ratio 1 -> {worst_ratio:.3}, top-1 changed: {top1_changed}",
            100.0 * before,
            100.0 * after
        ),
    )
}

fn index_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    let data = gaussian_rows(&mut rng, 300, d);
    let l = DMatrix::from_fn(5, d, |_, _| rng.random_range(-1.0..1.0));
    let desc = FeatureSpec::mfcc(8).descriptor();
    let metric = MetricMatrix::new(l.clone(), desc.clone()).expect("metric");
    let items = (0..300)
        .map(|i| IndexItem {
            path: PathBuf::from(format!("{i}")),
            metadata: NoteMetadata::new("Vn", "ord", None, qbe_core::corpus::Dynamics::Mf),
        })
        .collect();
    let vectors = data.iter().map(|r| FeatureVector::new(r.clone(), desc.clone()).expect("finite")).collect();
    let index = RetrievalIndex::build(vectors, items, Some(metric)).expect("index");
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let q: Vec<f64> = gaussian_rows(&mut rng, 1, d).remove(0);
        let k = 10;
        let got = index
            .query(&FeatureVector::new(q.clone(), desc.clone()).expect("finite"), k, &[])
            .expect("query");
        // linear scan computing L (x - q) directly
        let mut oracle: Vec<(usize, f64)> = data
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let diff = nalgebra::DVector::from_iterator(d, x.iter().zip(&q).map(|(a, b)| a - b));
                (i, (&l * diff).norm())
            })
            .collect();
        oracle.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for ((gid, gd), (oid, od)) in got.ranked.iter().zip(&oracle[..k]) {
            worst = worst.max((gd - od).abs());
            if gid != oid || (gd - od).abs() > 1e-6 {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("100 queries x 300 items, {mismatches} rank mismatches, max |distance error| {worst:.1e}"))
}

fn deformation_stability() -> Outcome {
    let corpus = corpus();
    let raw = raw_scattering();
    let stats = fit_compression(raw, DEFAULT_EPSILON).expect("stats");
    let compressed: Vec<Vec<f64>> = raw.iter().map(|v| log_compress(v, &stats).expect("compress").values).collect();
    let stretched: Vec<Waveform> = corpus.waves.iter().map(|w| time_stretch(w, 1.01).expect("stretch")).collect();
    let moved: Vec<Vec<f64>> = scatterer()
        .scatter_batch(&stretched)
        .expect("scattering")
        .iter()
        .map(|v| log_compress(v, &stats).expect("compress").values)
        .collect();
    let n = compressed.len();
    let mut stable = 0;
    let mut worst_ratio: f64 = 0.0;
    for i in 0..n {
        let norm = compressed[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        let shift = l2(&compressed[i], &moved[i]) / norm;
        let nearest_other = (0..n)
            .filter(|&j| corpus.metadata[j].technique != corpus.metadata[i].technique)
            .map(|j| l2(&compressed[i], &compressed[j]) / norm)
            .fold(f64::INFINITY, f64::min);
        worst_ratio = worst_ratio.max(shift / nearest_other);
        if shift < nearest_other {
            stable += 1;
        }
    }
    let rate = stable as f64 / n as f64;
    check(
        rate >= 0.90,
        format!("{stable}/{n} notes move less than their nearest other-technique note ({:.1}%), worst ratio {worst_ratio:.2}", 100.0 * rate),
    )
}

fn diffusion_clusters() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = Normal::new(0.0, 0.5).expect("normal");
    let mut rows = Vec::new();
    for c in 0..2 {
        let center = if c == 0 { -3.0 } else { 3.0 };
        for _ in 0..60 {
            rows.push(vec![center + normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)]);
        }
    }
    let embedding = diffusion_map(&rows, None, &DiffusionParams::default()).expect("embedding");
    let sign = |i: usize| embedding.coordinates[i][0] > 0.0;
    let majority_a = (0..60).filter(|&i| sign(i)).count() >= 30;
    let agree = (0..120)
        .filter(|&i| if i < 60 { sign(i) == majority_a } else { sign(i) != majority_a })
        .count();
    let rate = agree as f64 / 120.0;
    let markov = markov_matrix(&rows, None, Some(embedding.bandwidth)).expect("markov");
    let worst_row = (0..markov.nrows())
        .map(|r| (markov.row(r).sum() - 1.0).abs())
        .fold(0.0, f64::max);
    check(
        rate >= 0.95 && worst_row <= 1e-10,
        format!("{:.1}% of points on their cluster's side, worst Markov row-sum error {worst_row:.1e}", 100.0 * rate),
    )
}

/// Reference-dataset cells; `None` when the dataset is absent.
fn reference_dataset() -> Option<Outcome> {
    let root = std::env::var_os("QBE_SOL_ROOT").map(PathBuf::from)?;
    let manifest = match scan_corpus(&root, &Namespace::ALL) {
        Ok(m) => m,
        Err(e) => return Some(check(false, format!("cannot scan {}: {e}", root.display()))),
    };
    let waves: Vec<Waveform> = match manifest.entries.iter().map(|e| load_wav(&manifest.resolve(e))).collect() {
        Ok(w) => w,
        Err(e) => return Some(check(false, format!("cannot load audio: {e}"))),
    };
    let metadata: Vec<NoteMetadata> = manifest.entries.iter().map(|e| e.metadata.clone()).collect();
    let cells: [(FeatureSpec, MetricKind, Namespace, f64); 8] = [
        (FeatureSpec::mfcc(13), MetricKind::Lmnn, Namespace::Instrument, 0.900),
        (FeatureSpec::scattering(0.025), MetricKind::Lmnn, Namespace::Instrument, 0.980),
        (FeatureSpec::scattering(1.0), MetricKind::Lmnn, Namespace::Instrument, 0.997),
        (FeatureSpec::mfcc(13), MetricKind::Euclidean, Namespace::Technique, 0.445),
        (FeatureSpec::scattering(1.0), MetricKind::Lmnn, Namespace::Technique, 0.630),
        (FeatureSpec::scattering(0.025), MetricKind::Lmnn, Namespace::Technique, 0.533),
        (FeatureSpec::scattering(1.0), MetricKind::Euclidean, Namespace::Technique, 0.500),
        (FeatureSpec::mfcc(13), MetricKind::Lmnn, Namespace::Technique, 0.484),
    ];
    let mut lines = Vec::new();
    let mut all = true;
    for (spec, metric, ns, expected) in cells {
        let table = match FeatureTable::extract(&spec, &waves) {
            Ok(t) => t,
            Err(e) => return Some(check(false, format!("{}: {e}", spec.name()))),
        };
        let labels: Vec<String> = metadata.iter().map(|m| m.label(ns)).collect();
        match evaluate_cell(&table, &labels, ns, metric, &EvalSettings::default()) {
            Ok(r) => {
                let ok = (r.p_at_k - expected).abs() <= 0.02;
                all &= ok;
                lines.push(format!("{} {metric} {ns}: {:.3} (expected {expected:.3})", spec.name(), r.p_at_k));
            }
            Err(e) => return Some(check(false, format!("{}: {e}", spec.name()))),
        }
    }
    Some(check(all, lines.join("; ")))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("log-compression analytic values", compression_analytics),
        ("mel equivalence of first-order coefficients", mel_equivalence),
        ("amplitude-modulation detection", am_detection),
        ("tremolo/vibrato separation", am_fm_separation),
        ("LMNN correctness", lmnn_correctness),
        ("index exactness", index_exactness),
        ("deformation stability", deformation_stability),
        ("diffusion map", diffusion_clusters),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t0 = Instant::now();
        let outcome = run();
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        if !outcome.passed {
            failed += 1;
        }
        println!("{tag} {name} [{:.1} s]: {}", t0.elapsed().as_secs_f64(), outcome.detail);
    }
    match reference_dataset() {
        None => println!("SKIP reference-dataset P@5 cells: QBE_SOL_ROOT is not set"),
        Some(outcome) => {
            if !outcome.passed {
                failed += 1;
            }
            println!("{} reference-dataset P@5 cells: {}", if outcome.passed { "PASS" } else { "FAIL" }, outcome.detail);
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
