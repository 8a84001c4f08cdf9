//! End-to-end acceptance run: one line per criterion, non-zero exit if any
//! criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tessef::formats::encode_annotations;
use tessef::metrics::{event_metrics, max_matching, segment_metrics, EvaluationReport, TimedEvent};
use tessef::postprocess::{threshold_runs, FrameProbabilities};
use tessef::semicrf::{log_partition, viterbi, ScoreTensor};
use tessef::synth::{generate_sequence, write_corpus, Split, SynthConfig};
use tessef::train::{build_targets, evaluate_model, load_split, train, HeadKind, TrainConfig, TrainOutcome};
use tessef::verify::{
    exhaustive_matching, full_model_grad_check, gradient_identity, mode_equivalence, random_bipartite, semicrf_oracle,
};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Flag,
    Fail,
}

struct Line {
    id: u8,
    name: &'static str,
    status: Status,
    detail: String,
}

impl Line {
    fn new(id: u8, name: &'static str, ok: bool, detail: String) -> Self {
        let status = if ok { Status::Pass } else { Status::Fail };
        Line { id, name, status, detail }
    }

    fn print(&self) {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Flag => "PASS (flagged)",
            Status::Fail => "FAIL",
        };
        println!("criterion {} [{}]: {tag} {}", self.id, self.name, self.detail);
    }
}

fn exactness() -> Line {
    let t0 = Instant::now();
    let out = semicrf_oracle(200, 2024);
    let secs = t0.elapsed().as_secs_f64();
    match out {
        Ok((z, exact, m)) => Line::new(
            1,
            "semi-CRF exactness",
            z <= 1e-9 && exact && m <= 1e-9 && secs < 10.0,
            format!("logZ_err={z:.2e} viterbi_exact={exact} marginal_err={m:.2e} time={secs:.2}s"),
        ),
        Err(e) => Line::new(1, "semi-CRF exactness", false, e.to_string()),
    }
}

fn constants() -> Line {
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (t, n) in [(1usize, 2.0f64), (2, 6.0), (3, 20.0)] {
        let s = ScoreTensor::from_fn(t, 1, |_, _, _| 0.0).unwrap();
        let z = log_partition(&s, 0).unwrap();
        worst = worst.max((z - n.ln()).abs());
        detail.push(format!("T={t}:{z:.15}"));
    }
    Line::new(
        2,
        "hand-checkable constants",
        worst <= 1e-12,
        format!("{} max_err={worst:.2e}", detail.join(" ")),
    )
}

fn gradients() -> Line {
    let t0 = Instant::now();
    let id = gradient_identity(200, 99);
    let full = full_model_grad_check(6, 5);
    let secs = t0.elapsed().as_secs_f64();
    match (id, full) {
        (Ok((id, fd)), Ok(rel)) => Line::new(
            3,
            "gradient identity",
            id <= 1e-9 && rel <= 1e-6 && secs < 60.0,
            format!("identity_err={id:.2e} finite_diff_err={fd:.2e} full_model_rel_err={rel:.2e} time={secs:.2}s"),
        ),
        (a, b) => Line::new(3, "gradient identity", false, format!("{:?} {:?}", a.err(), b.err())),
    }
}

fn modes() -> Line {
    let t0 = Instant::now();
    let out = mode_equivalence(50, 512, 4242);
    let secs = t0.elapsed().as_secs_f64();
    match out {
        Ok((rec, fft)) => Line::new(
            4,
            "S4 mode equivalence",
            rec <= 1e-8 && fft <= 1e-10 && secs < 10.0,
            format!("scan_vs_conv={rec:.2e} fft_vs_direct={fft:.2e} time={secs:.2}s"),
        ),
        Err(e) => Line::new(4, "S4 mode equivalence", false, e.to_string()),
    }
}

fn metric_fixtures() -> Line {
    let ev = |on: f64, off: f64| TimedEvent::new(on, off, "filler");
    let none: Vec<String> = Vec::new();
    let mut ok = true;
    let mut notes = Vec::new();

    let cases = [
        (vec![ev(1.0, 1.5)], vec![ev(1.15, 1.40)], 1usize),
        (vec![ev(1.0, 1.5)], vec![ev(1.3, 1.8)], 0),
        (vec![ev(0.0, 1.0), ev(0.3, 1.3)], vec![ev(0.15, 1.15), ev(0.05, 1.05)], 2),
    ];
    for (k, (r, p, tp)) in cases.iter().enumerate() {
        let c = event_metrics(r, p, 0.2, &none).unwrap().micro();
        let want_f1 = if *tp == r.len() { 1.0 } else if *tp == 0 { 0.0 } else { f64::NAN };
        let good = c.tp == *tp && (want_f1.is_nan() || c.f1() == want_f1);
        ok &= good;
        notes.push(format!("event{}:tp={}", k + 1, c.tp));
    }

    let seg = segment_metrics(&[ev(0.0, 0.10)], &[ev(0.05, 0.15)], 0.05, 0.2, &none)
        .unwrap()
        .micro();
    let seg_ok = (seg.tp, seg.fp, seg.fn_) == (1, 1, 1)
        && seg.precision() == 0.5
        && seg.recall() == 0.5
        && seg.f1() == 0.5;
    ok &= seg_ok;
    notes.push(format!("segment:tp={} fp={} fn={} f1={}", seg.tp, seg.fp, seg.fn_, seg.f1()));

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let matched = (0..20)
        .filter(|_| {
            let (adj, nr) = random_bipartite(&mut rng);
            max_matching(&adj, nr).0 == exhaustive_matching(&adj, nr)
        })
        .count();
    ok &= matched == 20;
    notes.push(format!("matching={matched}/20"));
    Line::new(5, "metrics fixtures", ok, notes.join(" "))
}

struct Reference {
    corpus: tempfile::TempDir,
    semicrf: (TrainOutcome, EvaluationReport, f64),
    framewise50: (TrainOutcome, EvaluationReport),
    framewise100: (TrainOutcome, EvaluationReport),
}

fn fit(cfg: &TrainConfig, dir: &Path) -> (TrainOutcome, EvaluationReport) {
    let tr = load_split(cfg, &dir.join("train")).unwrap();
    let va = load_split(cfg, &dir.join("val")).unwrap();
    let te = load_split(cfg, &dir.join("test")).unwrap();
    let out = train(cfg, &tr, &va, |e| eprintln!("  [{} {}] {}", cfg.head.name(), cfg.resolution, e.line())).unwrap();
    let report = evaluate_model(&out.model, &te, out.threshold).unwrap();
    (out, report)
}

fn reference_runs() -> Reference {
    let t0 = Instant::now();
    let corpus = tempfile::tempdir().unwrap();
    write_corpus(&SynthConfig::default(), corpus.path()).unwrap();
    let semicrf = fit(&TrainConfig::default(), corpus.path());
    let secs = t0.elapsed().as_secs_f64();
    let fw = |res: f64| TrainConfig {
        head: HeadKind::Framewise,
        resolution: res,
        ..TrainConfig::default()
    };
    let framewise50 = fit(&fw(0.05), corpus.path());
    let framewise100 = fit(&fw(0.1), corpus.path());
    Reference {
        corpus,
        semicrf: (semicrf.0, semicrf.1, secs),
        framewise50,
        framewise100,
    }
}

fn end_to_end(r: &Reference) -> Line {
    let (out, rep, secs) = &r.semicrf;
    let f1 = rep.event.micro().f1();
    Line::new(
        6,
        "end-to-end synthetic performance",
        f1 >= 0.80 && *secs <= 600.0 && out.log.len() <= 30,
        format!(
            "test_event_f1={f1:.4} (filler {:.4}) segment_f1={:.4} best_epoch={} wall={secs:.0}s threads={}",
            rep.event.class("filler").f1(),
            rep.segment.micro().f1(),
            out.best_epoch,
            rayon::current_num_threads()
        ),
    )
}

fn trend(margin: f64) -> Status {
    if margin > 0.0 {
        Status::Pass
    } else if margin > -0.01 {
        Status::Flag
    } else {
        Status::Fail
    }
}

fn ablations(r: &Reference) -> Line {
    let crf = r.semicrf.1.event.micro().f1();
    let fw = r.framewise50.1.event.micro().f1();
    let seg50 = r.framewise50.1.segment.micro().f1();
    let seg100 = r.framewise100.1.segment.micro().f1();
    let (a, b) = (crf - fw, seg50 - seg100);
    let (sa, sb) = (trend(a), if b >= 0.0 { Status::Pass } else { trend(b) });
    let status = match (sa, sb) {
        (Status::Fail, _) | (_, Status::Fail) => Status::Fail,
        (Status::Flag, _) | (_, Status::Flag) => Status::Flag,
        _ => Status::Pass,
    };
    Line {
        id: 7,
        name: "ablation trends",
        status,
        detail: format!(
            "(a) semicrf_event_f1={crf:.4} framewise_event_f1={fw:.4} (tau={:.2}) margin={:+.4}; \
             filler-only {:.4} vs {:.4}; \
             (b) segment_f1 50ms={seg50:.4} 100ms={seg100:.4} margin={:+.4}",
            r.framewise50.0.threshold.unwrap_or(f64::NAN),
            a,
            r.semicrf.1.event.class("filler").f1(),
            r.framewise50.1.event.class("filler").f1(),
            b
        ),
    }
}

fn pipeline_bytes(dir: &Path, cfg: &TrainConfig) -> (Vec<u8>, Vec<Vec<u8>>, String) {
    let tr = load_split(cfg, &dir.join("train")).unwrap();
    let va = load_split(cfg, &dir.join("val")).unwrap();
    let te = load_split(cfg, &dir.join("test")).unwrap();
    let out = train(cfg, &tr, &va, |_| {}).unwrap();
    let decoded: Vec<Vec<u8>> = te
        .iter()
        .map(|ex| {
            let events = out.model.events(&out.model.infer(&ex.x).unwrap(), out.threshold).unwrap();
            encode_annotations(&events).unwrap()
        })
        .collect();
    let json = evaluate_model(&out.model, &te, out.threshold).unwrap().to_json();
    (out.checkpoint.encode().unwrap(), decoded, json)
}

fn determinism(r: &Reference) -> Line {
    let again = tempfile::tempdir().unwrap();
    write_corpus(&SynthConfig::default(), again.path()).unwrap();
    let cfg = SynthConfig::default();
    let mut corpus_same = true;
    for split in Split::ALL {
        for id in cfg.split_ids(split) {
            for ext in ["fseq", "csv"] {
                let rel = format!("{}/{id:05}.{ext}", split.name());
                corpus_same &= std::fs::read(r.corpus.path().join(&rel)).unwrap()
                    == std::fs::read(again.path().join(&rel)).unwrap();
            }
        }
    }
    let mut notes = vec![format!("corpus_identical={corpus_same}")];
    let mut ok = corpus_same;
    for head in [HeadKind::SemiCrf, HeadKind::Framewise] {
        let short = TrainConfig {
            head,
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = pipeline_bytes(r.corpus.path(), &short);
        let b = pipeline_bytes(again.path(), &short);
        let same = (a.0 == b.0, a.1 == b.1, a.2 == b.2);
        ok &= same.0 && same.1 && same.2;
        notes.push(format!(
            "{}: checkpoint={} decode={} metrics={}",
            head.name(),
            same.0,
            same.1,
            same.2
        ));
    }
    let full = TrainConfig::default();
    let refit = fit(&full, again.path());
    let log_same = refit.0.log == r.semicrf.0.log;
    let json_same = refit.1.to_json() == r.semicrf.1.to_json();
    ok &= log_same && json_same;
    notes.push(format!("full-run log={log_same} metrics={json_same}"));
    Line::new(8, "determinism", ok, notes.join("; "))
}

fn validity() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = 0usize;
    for _ in 0..10_000 {
        let t = rng.gen_range(1..=40);
        let n = rng.gen_range(1..=3);
        let cap = rng.gen_range(1..=t.min(21));
        let raw: Vec<f64> = (0..t * t * n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let s = ScoreTensor::from_raw(&raw, t, n, cap).unwrap();
        bad += viterbi(&s).validate(Some(t)).is_err() as usize;
    }
    let mut bad_fw = 0usize;
    for _ in 0..10_000 {
        let t = rng.gen_range(1..=40);
        let c = rng.gen_range(1..=3);
        let p = FrameProbabilities::new(t, c, (0..t * c).map(|_| rng.gen::<f64>()).collect()).unwrap();
        bad_fw += threshold_runs(&p, rng.gen(), rng.gen_range(1..=3)).validate(Some(t)).is_err() as usize;
    }
    let cfg = SynthConfig::default();
    let labels = cfg.labels();
    let mut targets = 0usize;
    let mut bad_targets = 0usize;
    for id in 0..cfg.n_train + cfg.n_val + cfg.n_test {
        let (_, events) = generate_sequence(&cfg, id).unwrap();
        for (res, frames) in [(0.05, 40), (0.1, 20)] {
            targets += 1;
            bad_targets += build_targets(&events, &labels, res, frames).unwrap().validate(Some(frames)).is_err() as usize;
        }
    }
    for _ in 0..5_000 {
        let events: Vec<TimedEvent> = (0..rng.gen_range(0..12))
            .map(|_| {
                let on = rng.gen_range(0..199) as f64 / 100.0;
                let off = (on + rng.gen_range(1..80) as f64 / 100.0).min(2.0);
                TimedEvent::new(on, off, labels[rng.gen_range(0..labels.len())].clone())
            })
            .collect();
        for (res, frames) in [(0.05, 40), (0.1, 20)] {
            targets += 1;
            bad_targets += build_targets(&events, &labels, res, frames).unwrap().validate(Some(frames)).is_err() as usize;
        }
    }
    Line::new(
        9,
        "validity preservation",
        bad + bad_fw + bad_targets == 0,
        format!(
            "semicrf_decodes=10000 invalid={bad}; framewise_decodes=10000 invalid={bad_fw}; targets={targets} invalid={bad_targets}"
        ),
    )
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut lines = vec![exactness(), constants(), gradients(), modes(), metric_fixtures()];
    for l in &lines {
        l.print();
    }
    eprintln!("training reference models (semicrf 50 ms, framewise 50 ms, framewise 100 ms)");
    let reference = reference_runs();
    for l in [end_to_end(&reference), ablations(&reference), determinism(&reference), validity()] {
        l.print();
        lines.push(l);
    }
    let failed: Vec<u8> = lines.iter().filter(|l| l.status == Status::Fail).map(|l| l.id).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
