use std::sync::Arc;

use deid_autograd::{Graph, Var};
use proptest::prelude::*;

use super::*;
use crate::asi::SpeakerModel;
use crate::audio::{save_wav, FeaturePipeline, MfccConfig, Waveform};
use crate::config::GlobalConfig;
use crate::corpus::{synth_utterance, SynthConfig};
use crate::error::Result;
use crate::metrics::{auc, eer};

/// Time-averaged cepstrum.
struct MeanCepstrum(FeaturePipeline);

impl SpeakerModel for MeanCepstrum {
    fn name(&self) -> &str {
        "mean_cepstrum"
    }
    fn embedding_dim(&self) -> usize {
        self.0.config().num_coeffs
    }
    fn min_len(&self) -> usize {
        self.0.config().frame_len()
    }
    fn embed_graph(&self, g: &mut Graph, wave: Var) -> Var {
        let c = self.0.cepstra(g, wave);
        g.mean_rows(c)
    }
}

fn stub() -> Arc<dyn SpeakerModel> {
    Arc::new(MeanCepstrum(FeaturePipeline::new(&MfccConfig::default()).unwrap()))
}

fn small_config() -> GlobalConfig {
    let mut c = GlobalConfig::default();
    c.audio.synth = SynthConfig { speakers: 6, utterances_per_speaker: 10, seconds: 0.5, seed: 3 };
    c.harness = ExperimentConfig {
        users: 2,
        enroll: [0, 3],
        cvae: [3, 7],
        probes: [7, 9],
        models: vec!["mc".into()],
        td: true,
        signal_attacks: vec![crate::adversary::SignalAttackKind::Requantize],
        reidentification: true,
        reid_enroll_per_user: 2,
        workers: 2,
        seed: 11,
        ..Default::default()
    };
    c.deid.conv.max_iterations = 3;
    c.cvae.epochs = 3;
    c.cvae.latent_dim = 4;
    c.cvae.base_channels = 4;
    c.validate().unwrap();
    c
}

fn resources(cfg: &GlobalConfig) -> Resources {
    let mut r = Resources::new(CorpusSource::Synth(cfg.audio.synth.clone()));
    r.add_model("mc", stub());
    r.prepare_cvaes(cfg, None).unwrap();
    r
}

fn opts(dir: &std::path::Path) -> RunOptions {
    RunOptions { run_dir: dir.to_path_buf(), resume: false, force: false }
}

#[test]
fn pool_preserves_order_and_stops_on_sink_error() {
    let items: Vec<u64> = (0..50).collect();
    let mut seen = vec![];
    ordered_pool(
        &items,
        4,
        |&i| {
            // Later items finish first.
            std::thread::sleep(std::time::Duration::from_micros(200 * (50 - i)));
            i * i
        },
        |i, r| {
            seen.push((i, r));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, (0..50).map(|i| (i as usize, i * i)).collect::<Vec<_>>());
    let mut count = 0;
    let e = ordered_pool(&items, 3, |&i| i, |i, _| {
        count += 1;
        if i == 5 {
            Err(crate::Error::State("stop".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert_eq!(e.kind(), "state");
    assert_eq!(count, 6);
    ordered_pool(&Vec::<u8>::new(), 4, |_| (), |_, _| Ok(())).unwrap();
}

proptest! {
    #[test]
    fn success_flag_tracks_labels(src in 0usize..8, pred in 0usize..8) {
        let r = TrialRecord::new("u", "u", "x", "x", "conv", Condition::Deidentified, None, src, pred);
        prop_assert_eq!(r.success, pred != src);
        prop_assert!(r.check().is_ok());
        let mut bad = r.clone();
        bad.success = !bad.success;
        prop_assert!(bad.check().is_err());
        let back: TrialRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }
}

#[test]
fn mos_csv_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mos.csv");
    std::fs::write(
        &p,
        "voice_id,listener,trial,aspect,rating,option,reason,note\n\
         v1,l1,comparing,voiceprint,4,,,\n\
         v1,l2,distinguishing,,,no,obvious reverb,echoey\n\
         v2,l1,distinguishing,,,yes,,\n",
    )
    .unwrap();
    let rows = read_mos_csv(&p).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].trial, MosTrial::Comparing { aspect: MosAspect::Voiceprint, rating: 4 });
    assert_eq!(
        rows[1].trial,
        MosTrial::Distinguishing {
            original: false,
            reason: Some(DistinguishReason::ObviousReverb),
            note: Some("echoey".into())
        }
    );
    for bad in [
        "v,l,comparing,text,6,,,\n",
        "v,l,comparing,text,x,,,\n",
        "v,l,comparing,pitch,3,,,\n",
        "v,l,distinguishing,,,maybe,,\n",
        "v,l,distinguishing,,,no,too loud,\n",
        "v,l,distinguishing,,,yes,illegible text,\n",
        "v,l,ranking,,,,,\n",
    ] {
        std::fs::write(&p, format!("voice_id,listener,trial,aspect,rating,option,reason,note\n{bad}")).unwrap();
        assert_eq!(read_mos_csv(&p).unwrap_err().kind(), "data", "{bad}");
    }
}

fn rec(unit: &str, cond: Condition, src: usize, pred: usize, genuine: f64, imposter: &[f64], td: &[f64]) -> TrialRecord {
    let subs = if cond == Condition::Original { "" } else { "m" };
    let mut r = TrialRecord::new(unit, unit, subs, "m", "conv", cond, None, src, pred);
    r.scores.genuine = genuine;
    r.scores.imposter = imposter.to_vec();
    r.scores.td = td.iter().enumerate().map(|(i, &s)| TdScore { ratio: 0.25 * (i + 1) as f64, score: s }).collect();
    r
}

fn brute_auc(p: &[f64], n: &[f64]) -> f64 {
    let mut s = 0.0;
    for a in p {
        for b in n {
            s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    s / (p.len() * n.len()) as f64
}

#[test]
fn summary_matches_direct_computation() {
    let records = vec![
        rec("a", Condition::Original, 0, 0, 0.9, &[0.1, 0.2], &[0.1, 0.3]),
        rec("b", Condition::Original, 1, 1, 0.8, &[0.3, 0.0], &[0.2, 0.2]),
        rec("c", Condition::Original, 1, 0, 0.4, &[0.5, 0.1], &[0.05, 0.1]),
        rec("d", Condition::Deidentified, 0, 2, 0.3, &[0.7, 0.2], &[0.4, 0.1]),
        rec("e", Condition::Deidentified, 1, 1, 0.6, &[0.2, 0.1], &[0.2, 0.6]),
    ];
    let s = summarize(&records).unwrap();
    assert_eq!(s.rows.len(), 2);
    let o = &s.rows[0];
    assert_eq!((o.condition, o.trials), (Condition::Original, 3));
    assert!((o.dsr - 100.0 / 3.0).abs() < 1e-12);
    let (g, i) = trial_scores(&records[..3]);
    assert_eq!(o.eer, Some(100.0 * eer(&g, &i).unwrap()));
    let d = &s.rows[1];
    assert_eq!((d.trials, d.dsr, d.distinct_predicted), (2, 50.0, 2));
    assert_eq!(s.td.len(), 2);
    for (j, row) in s.td.iter().enumerate() {
        let p: Vec<f64> = records[3..].iter().map(|r| r.scores.td[j].score).collect();
        let n: Vec<f64> = records[..3].iter().map(|r| r.scores.td[j].score).collect();
        assert!((row.auc - brute_auc(&p, &n)).abs() < 1e-12);
        assert_eq!(row.auc, auc(&p, &n).unwrap());
        assert_eq!(row.ratio, 0.25 * (j + 1) as f64);
    }
    assert_eq!(s.td.iter().filter(|r| r.best).count(), 1);
    let text = render_report(&s);
    assert!(text.contains("Temporal-dependency detection"), "{text}");

    let mut bad = records.clone();
    bad[0].success = true;
    assert_eq!(summarize(&bad).unwrap_err().kind(), "data");
}

fn read(dir: &std::path::Path, f: &str) -> String {
    std::fs::read_to_string(dir.join(f)).unwrap()
}

fn without_timing(mut rs: Vec<TrialRecord>) -> Vec<TrialRecord> {
    for r in &mut rs {
        r.rtr = None;
        r.stage_times = None;
    }
    rs
}

#[test]
fn runs_are_deterministic_resumable_and_complete() {
    let cfg = small_config();
    let res = resources(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run_experiment(&cfg, &res, &opts(&a)).unwrap();
    let serial = GlobalConfig { harness: ExperimentConfig { workers: 1, ..cfg.harness.clone() }, ..cfg.clone() };
    let rb = run_experiment(&serial, &res, &opts(&b)).unwrap();
    assert!(ra.status.complete && ra.failures.is_empty());
    // 2 users × 2 probes: originals, then de-identified with none /
    // requantize / reidentification.
    assert_eq!(ra.status.units, 8);
    assert_eq!(ra.records.len(), 4 + 4 * 3);
    for f in ["summary.csv", "td.csv", "transfer.csv", "scores_hist.csv", "td_roc.csv", "seeds.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_eq!(without_timing(ra.records.clone()), without_timing(rb.records.clone()));
    assert_eq!(GlobalConfig::from_toml_str(&read(&a, "config.toml")).unwrap(), cfg);
    assert_eq!(summarize(&load_records(&a).unwrap()).unwrap(), ra.summary);
    let kinds: std::collections::BTreeSet<_> = ra.summary.rows.iter().map(|r| r.attack.clone()).collect();
    assert_eq!(kinds.into_iter().collect::<Vec<_>>(), ["none", "reidentification", "requantize"]);
    for r in ra.records.iter().filter(|r| r.stage_times.is_some()) {
        let t = r.stage_times.unwrap();
        assert!(t.stage_sum() <= t.total_seconds + 1e-9);
        assert!(t.total_seconds - t.stage_sum() <= 0.02 * t.total_seconds + 1e-3, "{t:?}");
        assert!(r.target_label.is_some_and(|l| l >= 2));
        assert_eq!(r.scores.td.len(), cfg.attacks.td.sweep.len());
    }

    // An existing directory needs an explicit choice.
    assert_eq!(run_experiment(&cfg, &res, &opts(&a)).unwrap_err().kind(), "state");
    let mut other = cfg.clone();
    other.harness.seed = 12;
    let resume = RunOptions { resume: true, ..opts(&a) };
    assert_eq!(run_experiment(&other, &res, &resume).unwrap_err().kind(), "config");

    // Simulate an interruption after the first five units.
    let progress = read(&a, "progress.jsonl");
    let kept: Vec<&str> = progress.lines().take(5).collect();
    std::fs::write(a.join("progress.jsonl"), kept.join("\n") + "\n").unwrap();
    let rr = run_experiment(&cfg, &res, &resume).unwrap();
    assert!(rr.status.complete);
    assert_eq!(read(&a, "summary.csv"), read(&b, "summary.csv"));
    assert_eq!(without_timing(rr.records), without_timing(rb.records));
    assert_eq!(read(&a, "progress.jsonl").lines().count(), 8);

    let forced = run_experiment(&cfg, &res, &RunOptions { force: true, ..opts(&a) }).unwrap();
    assert_eq!(forced.records.len(), ra.records.len());
}

#[test]
fn ignorant_setting_and_additive_runs() {
    let mut cfg = small_config();
    cfg.harness.signal_attacks.clear();
    cfg.harness.reidentification = false;
    cfg.harness.td = false;
    cfg.harness.method = "fgsm".into();
    let res = resources(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let r = run_experiment(&cfg, &res, &opts(tmp.path())).unwrap();
    assert!(r.summary.rows.iter().all(|row| row.attack == NO_ATTACK));
    assert!(r.summary.td.is_empty());
    let deid: Vec<_> = r.records.iter().filter(|r| r.condition == Condition::Deidentified).collect();
    assert_eq!(deid.len(), 4);
    assert!(deid.iter().all(|r| r.method == "fgsm" && r.target_label.is_none() && r.mcd_db.is_some()));

    cfg.harness.method = "bogus".into();
    assert_eq!(cfg.validate().unwrap_err().kind(), "config");
    cfg.harness.method = "pgd".into();
    cfg.harness.substitutes = vec![vec!["mc".into(), "mc".into()]];
    assert_eq!(cfg.validate().unwrap_err().kind(), "config");
}

#[test]
fn failed_units_are_marked_and_the_rest_persist() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    let synth = SynthConfig { speakers: 4, utterances_per_speaker: 6, seconds: 0.4, seed: 5 };
    for s in 0..4 {
        std::fs::create_dir_all(root.join(format!("s{s}"))).unwrap();
        for i in 0..6 {
            let mut w = synth_utterance(&synth, s, i).wave;
            if s == 1 && i == 5 {
                // Shorter than one analysis frame.
                w = Waveform::new(w.samples()[..100].to_vec()).unwrap();
            }
            save_wav(root.join(format!("s{s}/u{i}.wav")), &w).unwrap();
        }
    }
    let mut cfg = small_config();
    cfg.audio.corpus_dir = Some(root);
    cfg.harness.enroll = [0, 2];
    cfg.harness.cvae = [2, 4];
    cfg.harness.probes = [4, 6];
    cfg.harness.reidentification = false;
    let mut res = Resources::new(CorpusSource::from_config(&cfg).unwrap());
    res.add_model("mc", stub());
    res.prepare_cvaes(&cfg, Some(tmp.path())).unwrap();
    assert!(tmp.path().join("mc.cvae").exists());
    let run = tmp.path().join("run");
    let r = run_experiment(&cfg, &res, &opts(&run)).unwrap();
    assert!(!r.status.complete);
    assert_eq!(r.failures.len(), 2, "{:?}", r.failures);
    assert!(r.failures.iter().all(|f| f.unit.ends_with("u5") && f.error_kind == "empty_feature"));
    let on_disk: Vec<FailureRecord> = read_jsonl(run.join("failures.jsonl")).unwrap();
    assert_eq!(on_disk, r.failures);
    let status: RunStatus = serde_json::from_str(&read(&run, "status.json")).unwrap();
    assert_eq!((status.done, status.failed, status.complete), (6, 2, false));
    assert_eq!(r.records.len(), 3 + 3 * 2);
}

#[test]
fn corpus_selection_and_resource_errors() {
    let c = CorpusSource::Synth(SynthConfig { speakers: 3, ..Default::default() });
    let sel = c.select(&[2, 0], [1, 3]).unwrap();
    let ids: Vec<&str> = sel.utterances.iter().map(|u| u.id.as_str()).collect();
    assert_eq!(ids, ["spk002_utt0001", "spk002_utt0002", "spk000_utt0001", "spk000_utt0002"]);
    assert_eq!(c.select(&[3], [0, 1]).unwrap_err().kind(), "data");
    let res = Resources::new(c);
    assert_eq!(res.model("nope").err().unwrap().kind(), "config");
    assert_eq!(res.cvae("nope").err().unwrap().kind(), "config");
    let mut r2 = res.clone();
    assert_eq!(r2.load_models(std::path::Path::new("/nonexistent"), &["x".into()]).unwrap_err().kind(), "config");
    assert_ne!(unit_seed(1, "a"), unit_seed(1, "b"));
    assert_eq!(stable_hash(""), 0xcbf2_9ce4_8422_2325);
}

#[test]
fn session_deidentifies_single_utterances() -> Result<()> {
    let mut cfg = small_config();
    cfg.harness.reidentification = false;
    let res = resources(&cfg);
    let s = Session::new(&cfg, &res)?;
    assert_eq!(s.crafting_sets(), ["mc"]);
    let u = synth_utterance(&cfg.audio.synth, 0, 9);
    let (w, recs) = s.deidentify(0, &u, 4)?;
    assert_eq!(w.len(), u.wave.len());
    assert_eq!(recs.len(), 2);
    assert!(recs[0].unit.starts_with("single/"));
    assert!(s.deidentify(1, &u, 4).is_err());
    s.identify("mc", &u.wave)?;
    Ok(())
}
