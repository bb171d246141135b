//! Experiment orchestration: enroll, de-identify, attack, score, persist.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::additive::{generate_additive, AttackTarget};
use crate::adversary::{signal_attacks, td_detection, SignalAttack, TdBackend, TdMode};
use crate::asi::{identify_embedding, score, EnrollmentProfile, Ensemble, SpeakerEmbedding, SpeakerModel};
use crate::audio::{ImpulseResponse, Waveform};
use crate::config::GlobalConfig;
use crate::conv_deid::{construct_perturbation, deidentify, reverberate, MemberGoal};
use crate::corpus::{Corpus, Utterance};
use crate::cvae::CvaeModel;
use crate::error::{Error, Result};
use crate::metrics::{mcd_with, rtr, word_accuracy, StageTimes};

use super::records::{read_jsonl, Condition, FailureRecord, JsonlWriter, TdScore, TrialRecord, TrialScores};
use super::report::{summarize, write_rows, write_summary, Summary};
use super::resources::{cvae_corpus, target_labels, Resources};
use super::TargetMode;

/// Attack kind of records scored against re-identification profiles.
pub const REIDENTIFICATION: &str = "reidentification";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    /// Continue an interrupted run with the same configuration.
    pub resume: bool,
    /// Discard an existing run directory.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub complete: bool,
    pub units: usize,
    pub done: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<FailureRecord>,
    pub summary: Summary,
    pub status: RunStatus,
}

/// Stable 64-bit FNV-1a.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn unit_seed(seed: u64, unit: &str) -> u64 {
    stable_hash(unit) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Evaluates `f` on every item with `workers` threads and hands results to
/// `sink` in item order.
pub fn ordered_pool<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
    mut sink: impl FnMut(usize, R) -> Result<()>,
) -> Result<()> {
    let workers = workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut want = 0;
        for (i, r) in rx {
            pending.insert(i, r);
            while let Some(r) = pending.remove(&want) {
                if let Err(e) = sink(want, r) {
                    // Stop handing out work; running items drain into the
                    // closed channel.
                    next.store(items.len(), Ordering::Relaxed);
                    return Err(e);
                }
                want += 1;
            }
        }
        Ok(())
    })
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug, Clone)]
enum UnitKind {
    Original,
    Deid(usize),
}

#[derive(Debug, Clone)]
struct Unit {
    key: String,
    kind: UnitKind,
    probe: usize,
    seed: u64,
}

struct Crafting {
    label: String,
    ids: Vec<String>,
    ensemble: Ensemble,
    cvaes: Vec<Arc<CvaeModel>>,
}

struct Context<'a> {
    cfg: &'a GlobalConfig,
    res: &'a Resources,
    models: Vec<(String, Arc<dyn SpeakerModel>)>,
    /// Closed-set profiles per model id.
    profiles: BTreeMap<String, Vec<EnrollmentProfile>>,
    crafting: Vec<Crafting>,
    reference: ImpulseResponse,
    attacks: Vec<Arc<dyn SignalAttack>>,
    targets: Vec<usize>,
    target_utts: BTreeMap<usize, Vec<Utterance>>,
    probes: Vec<Utterance>,
    /// Re-identification profiles per crafting set, then per model.
    reid: Vec<BTreeMap<String, Vec<EnrollmentProfile>>>,
}

/// The de-identified rendition and its bookkeeping.
pub struct DeidOutput {
    pub wave: Waveform,
    /// Comparison rendition for MCD.
    pub reference: Waveform,
    pub target_label: Option<usize>,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub times: StageTimes,
}

impl Context<'_> {
    fn profiles(&self, id: &str) -> &[EnrollmentProfile] {
        &self.profiles[id]
    }

    fn choose_targets(&self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let a = self.targets[rng.random_range(0..self.targets.len())];
        let mut b = self.targets[rng.random_range(0..self.targets.len() - 1)];
        if b == a {
            b = *self.targets.last().expect("two targets");
        }
        (a, b)
    }

    fn target_embedding(&self, c: &Crafting, member: usize, labels: (usize, usize), seed: u64, pick: usize) -> Result<SpeakerEmbedding> {
        let cvae = &c.cvaes[member];
        let y = cvae.identity(labels.0)?;
        match self.cfg.harness.target_mode {
            TargetMode::Sampling => cvae.sample_target(&y, seed),
            TargetMode::Interpolation => {
                cvae.interpolate_targets(&y, &cvae.identity(labels.1)?, self.cfg.harness.interpolation_t, seed)
            }
            TargetMode::Reconstruction => {
                let utts = &self.target_utts[&labels.0];
                let e = c.ensemble.members()[member].extract_embedding(&utts[pick % utts.len()].wave)?;
                cvae.reconstruct(&e, &y)
            }
        }
    }

    /// Runs the configured method for crafting set `set` on `u`.
    fn deidentify(&self, set: usize, u: &Utterance, seed: u64) -> Result<DeidOutput> {
        let start = Instant::now();
        let c = &self.crafting[set];
        let exp = &self.cfg.harness;
        if exp.method != "conv" {
            let model = c.ensemble.members()[0].clone();
            let target = AttackTarget {
                model: model.as_ref(),
                profiles: self.profiles(&c.ids[0]),
                source_label: u.label,
            };
            let acfg = crate::additive::AdditiveAttackConfig {
                method: exp.method.clone(),
                seed,
                ..self.cfg.deid.additive.clone()
            };
            let t0 = Instant::now();
            let out = generate_additive(&target, &u.wave, &acfg)?;
            let opt = t0.elapsed().as_secs_f64();
            return Ok(DeidOutput {
                wave: out.adversarial,
                reference: u.wave.clone(),
                target_label: None,
                iterations: out.iterations,
                final_loss: None,
                times: StageTimes {
                    target_seconds: 0.0,
                    optimization_seconds: opt,
                    rendering_seconds: 0.0,
                    total_seconds: start.elapsed().as_secs_f64(),
                },
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = self.choose_targets(&mut rng);
        let pick = rng.random_range(0..usize::MAX);
        let cvae_seed = rng.random::<u64>();
        let t0 = Instant::now();
        let mut goals = Vec::with_capacity(c.ensemble.len());
        for (i, m) in c.ensemble.members().iter().enumerate() {
            goals.push(MemberGoal {
                target: self.target_embedding(c, i, labels, cvae_seed, pick)?,
                source: m.extract_embedding(&u.wave)?,
            });
        }
        let target_seconds = t0.elapsed().as_secs_f64();
        let dcfg = crate::conv_deid::DeidConfig {
            seed,
            ..self.cfg.deid.conv.clone()
        };
        let p = construct_perturbation(&c.ensemble, &u.wave, &goals, &self.reference, &dcfg)?;
        let t1 = Instant::now();
        let wave = deidentify(&u.wave, p.filter(), &self.reference)?;
        let reference = reverberate(&u.wave, &self.reference);
        let rendering_seconds = t1.elapsed().as_secs_f64();
        Ok(DeidOutput {
            wave,
            reference,
            target_label: Some(labels.0),
            iterations: p.iterations,
            final_loss: Some(p.best_loss),
            times: StageTimes {
                target_seconds,
                optimization_seconds: p.optimization_seconds,
                rendering_seconds,
                total_seconds: start.elapsed().as_secs_f64(),
            },
        })
    }

    fn scores(&self, profiles: &[EnrollmentProfile], e: &SpeakerEmbedding, source: usize, target: Option<usize>) -> Result<TrialScores> {
        let mut s = TrialScores::default();
        let mut genuine = None;
        for p in profiles {
            let v = score(&p.centroid, e)?;
            if p.label == source {
                genuine = Some(v);
            } else if self.cfg.harness.score_distribution {
                s.imposter.push(v);
            }
            if Some(p.label) == target {
                s.target = Some(v);
            }
        }
        s.genuine = genuine.ok_or_else(|| Error::Data(format!("source speaker {source} is not enrolled")))?;
        Ok(s)
    }

    fn td(&self, model: &dyn SpeakerModel, w: &Waveform) -> Result<Vec<TdScore>> {
        if !self.cfg.harness.td {
            return Ok(vec![]);
        }
        let backend = TdBackend {
            model,
            transcriber: self.res.transcriber.as_deref(),
        };
        self.cfg
            .attacks
            .td
            .sweep
            .iter()
            .map(|&r| {
                Ok(TdScore {
                    ratio: r,
                    score: td_detection(backend, w, &self.cfg.attacks.td.with_ratio(r))?,
                })
            })
            .collect()
    }

    fn word_accuracy(&self, u: &Utterance, w: &Waveform) -> Result<Option<(f64, f64)>> {
        let Some(t) = &self.res.transcriber else { return Ok(None) };
        let reference = match &u.text {
            Some(text) => text.clone(),
            None => t.transcribe(&u.wave)?,
        };
        if reference.split_whitespace().next().is_none() {
            return Ok(None);
        }
        let wa = word_accuracy(&reference, &t.transcribe(w)?)?;
        Ok(Some((wa.clipped, wa.raw)))
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        key: &str,
        subs: &str,
        model: &(String, Arc<dyn SpeakerModel>),
        condition: Condition,
        attack: Option<&str>,
        profiles: &[EnrollmentProfile],
        u: &Utterance,
        w: &Waveform,
        target: Option<usize>,
    ) -> Result<TrialRecord> {
        let e = model.1.extract_embedding(w)?;
        let (pred, _) = identify_embedding(profiles, &e)?;
        let method = match condition {
            Condition::Original => "none",
            Condition::Deidentified => self.cfg.harness.method.as_str(),
        };
        let mut r = TrialRecord::new(key, &u.id, subs, &model.0, method, condition, attack, u.label, pred);
        r.target_label = target;
        r.scores = self.scores(profiles, &e, u.label, target)?;
        if attack.is_none() {
            r.scores.td = self.td(model.1.as_ref(), w)?;
        }
        Ok(r)
    }

    fn run_original(&self, key: &str, u: &Utterance) -> Result<Vec<TrialRecord>> {
        let wa = self.word_accuracy(u, &u.wave)?;
        let mut out = Vec::new();
        for m in &self.models {
            let mut r = self.record(key, "", m, Condition::Original, None, self.profiles(&m.0), u, &u.wave, None)?;
            (r.wa_percent, r.wa_raw) = (wa.map(|w| w.0), wa.map(|w| w.1));
            out.push(r);
        }
        Ok(out)
    }

    fn run_deid(&self, key: &str, set: usize, seed: u64, u: &Utterance) -> Result<(Waveform, Vec<TrialRecord>)> {
        let d = self.deidentify(set, u, seed)?;
        let subs = &self.crafting[set].label;
        let mcd = mcd_with(&d.reference, &d.wave, &self.cfg.audio.mcd)?;
        let wa = self.word_accuracy(u, &d.wave)?;
        let ratio = rtr(d.times.total_seconds, u.wave.duration_secs())?;
        let attacked: Vec<(String, Waveform)> = self
            .attacks
            .iter()
            .map(|a| Ok((a.kind().id().to_string(), a.apply(&d.wave)?)))
            .collect::<Result<_>>()?;
        let mut out = Vec::new();
        for m in &self.models {
            let profiles = self.profiles(&m.0);
            let mut r = self.record(key, subs, m, Condition::Deidentified, None, profiles, u, &d.wave, d.target_label)?;
            r.mcd_db = Some(mcd);
            (r.wa_percent, r.wa_raw) = (wa.map(|w| w.0), wa.map(|w| w.1));
            r.rtr = Some(ratio);
            r.iterations = Some(d.iterations);
            r.final_loss = d.final_loss;
            r.stage_times = Some(d.times);
            out.push(r);
            for (kind, w) in &attacked {
                out.push(self.record(key, subs, m, Condition::Deidentified, Some(kind), profiles, u, w, d.target_label)?);
            }
            if let Some(reid) = self.reid.get(set) {
                out.push(self.record(
                    key,
                    subs,
                    m,
                    Condition::Deidentified,
                    Some(REIDENTIFICATION),
                    &reid[&m.0],
                    u,
                    &d.wave,
                    d.target_label,
                )?);
            }
        }
        Ok((d.wave, out))
    }

    fn run_unit(&self, unit: &Unit) -> Result<Vec<TrialRecord>> {
        let u = &self.probes[unit.probe];
        match unit.kind {
            UnitKind::Original => self.run_original(&unit.key, u),
            UnitKind::Deid(set) => Ok(self.run_deid(&unit.key, set, unit.seed, u)?.1),
        }
    }
}

fn enroll_all(model: &dyn SpeakerModel, corpus: &Corpus) -> Result<Vec<EnrollmentProfile>> {
    let mut out = Vec::new();
    for label in 0..corpus.num_speakers() {
        let waves: Vec<&Waveform> = corpus.of_label(label).map(|u| &u.wave).collect();
        if !waves.is_empty() {
            out.push(model.enroll(label, &waves)?);
        }
    }
    Ok(out)
}

const RECORDS: &str = "records.jsonl";
const PROGRESS: &str = "progress.jsonl";
const FAILURES: &str = "failures.jsonl";
const STATUS: &str = "status.json";
const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Progress {
    unit: String,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Creates, resumes or replaces the run directory; returns completed units.
fn open_run_dir(cfg: &GlobalConfig, opts: &RunOptions) -> Result<BTreeSet<String>> {
    let dir = &opts.run_dir;
    let canonical = cfg.canonical();
    let exists = dir.exists() && std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
    if exists {
        if opts.force {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        } else if opts.resume {
            let snap = dir.join(CONFIG);
            let old = std::fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
            if old != canonical {
                return Err(Error::Config(format!(
                    "{} was written by a different configuration; use a new run directory or --force",
                    dir.display()
                )));
            }
            let done: BTreeSet<String> = if dir.join(PROGRESS).exists() {
                read_jsonl::<Progress>(dir.join(PROGRESS))?.into_iter().map(|p| p.unit).collect()
            } else {
                BTreeSet::new()
            };
            // Drop records of units that never finished.
            let kept: Vec<TrialRecord> = if dir.join(RECORDS).exists() {
                read_jsonl::<TrialRecord>(dir.join(RECORDS))?
                    .into_iter()
                    .filter(|r| done.contains(&r.unit))
                    .collect()
            } else {
                vec![]
            };
            let tmp = dir.join("records.jsonl.tmp");
            let _ = std::fs::remove_file(&tmp);
            let mut w = JsonlWriter::append(&tmp)?;
            for r in &kept {
                w.write(r)?;
            }
            w.flush()?;
            std::fs::rename(&tmp, dir.join(RECORDS)).map_err(|e| Error::io(dir, e))?;
            let _ = std::fs::remove_file(dir.join(FAILURES));
            return Ok(done);
        } else {
            return Err(Error::State(format!(
                "run directory {} already exists; pass --resume or --force",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(dir.join(CONFIG), &canonical).map_err(|e| Error::io(dir.join(CONFIG), e))?;
    Ok(BTreeSet::new())
}

fn build_context<'a>(cfg: &'a GlobalConfig, res: &'a Resources) -> Result<Context<'a>> {
    cfg.validate()?;
    let exp = &cfg.harness;
    if exp.td && cfg.attacks.td.mode == TdMode::Speech && res.transcriber.is_none() {
        return Err(Error::Config("speech-mode TD detection needs a transcriber".into()));
    }
    let models: Vec<(String, Arc<dyn SpeakerModel>)> =
        exp.models.iter().map(|id| Ok((id.clone(), res.model(id)?))).collect::<Result<_>>()?;
    let conv = exp.method == "conv";
    let mut crafting = Vec::new();
    for ids in exp.crafting_sets() {
        let members: Vec<Arc<dyn SpeakerModel>> = ids.iter().map(|id| res.model(id)).collect::<Result<_>>()?;
        let cvaes: Vec<Arc<CvaeModel>> = if conv {
            ids.iter().map(|id| res.cvae(id)).collect::<Result<_>>()?
        } else {
            vec![]
        };
        let users: Vec<usize> = (0..exp.users).collect();
        for c in &cvaes {
            c.ensure_disjoint(&users)?;
        }
        crafting.push(Crafting {
            label: ids.join("+"),
            ids,
            ensemble: Ensemble::new(members)?,
            cvaes,
        });
    }
    let targets = target_labels(&res.corpus, exp);
    let mut target_utts: BTreeMap<usize, Vec<Utterance>> = BTreeMap::new();
    if conv {
        for u in cvae_corpus(&res.corpus, exp)? {
            target_utts.entry(u.label).or_default().push(u);
        }
        for c in &crafting {
            for cv in &c.cvaes {
                if let Some(l) = targets.iter().find(|l| !cv.decoder().labels().contains(l)) {
                    return Err(Error::Config(format!("the CVAE of {} does not know target speaker {l}", c.label)));
                }
            }
        }
    }

    let all: Vec<usize> = (0..res.corpus.num_speakers()).collect();
    let enroll = res.corpus.select(&all, exp.enroll)?;
    let mut profiles = BTreeMap::new();
    for id in exp.model_ids() {
        let model = res.model(&id)?;
        profiles.insert(id, enroll_all(model.as_ref(), &enroll)?);
    }
    let probes = res.corpus.select(&exp.probe_users(), exp.probes)?.utterances;
    let attack_registry = signal_attacks(&cfg.attacks.signal)?;
    let attacks = exp
        .signal_attacks
        .iter()
        .map(|k| attack_registry.get(k.id()))
        .collect::<Result<Vec<_>>>()?;

    Ok(Context {
        cfg,
        res,
        models,
        profiles,
        crafting,
        reference: cfg.deid.conv.reference()?,
        attacks,
        targets,
        target_utts,
        probes,
        reid: vec![],
    })

}

/// The configured pipeline, enrolled and ready to de-identify single
/// utterances outside a run.
pub struct Session<'a> {
    ctx: Context<'a>,
}

impl<'a> Session<'a> {
    pub fn new(cfg: &'a GlobalConfig, res: &'a Resources) -> Result<Self> {
        Ok(Self { ctx: build_context(cfg, res)? })
    }

    pub fn crafting_sets(&self) -> Vec<String> {
        self.ctx.crafting.iter().map(|c| c.label.clone()).collect()
    }

    /// Closed-set identity of `w` under model `id`.
    pub fn identify(&self, id: &str, w: &Waveform) -> Result<(usize, f64)> {
        let profiles = self
            .ctx
            .profiles
            .get(id)
            .ok_or_else(|| Error::Config(format!("model `{id}` is not part of the experiment")))?;
        identify_embedding(profiles, &self.ctx.res.model(id)?.extract_embedding(w)?)
    }

    /// De-identifies `u` with crafting set `set` and scores the result on
    /// every identification model.
    pub fn deidentify(&self, set: usize, u: &Utterance, seed: u64) -> Result<(Waveform, Vec<TrialRecord>)> {
        if set >= self.ctx.crafting.len() {
            return Err(Error::Argument(format!("crafting set {set} does not exist")));
        }
        let key = format!("single/{}/{}", self.ctx.crafting[set].label, u.id);
        self.ctx.run_deid(&key, set, seed, u)
    }
}

/// Runs the experiment of `cfg.harness` and persists everything under
/// `opts.run_dir`.
pub fn run_experiment(cfg: &GlobalConfig, res: &Resources, opts: &RunOptions) -> Result<RunReport> {
    let mut ctx = build_context(cfg, res)?;
    let exp = &cfg.harness;
    let done = open_run_dir(cfg, opts)?;
    let dir = &opts.run_dir;
    let workers = if exp.workers == 0 { default_workers() } else { exp.workers };

    let mut units = Vec::new();
    for (i, _) in ctx.probes.iter().enumerate() {
        let key = format!("orig/{}", ctx.probes[i].id);
        units.push(Unit { seed: unit_seed(exp.seed, &key), key, kind: UnitKind::Original, probe: i });
    }
    for (s, c) in ctx.crafting.iter().enumerate() {
        for (i, u) in ctx.probes.iter().enumerate() {
            let key = format!("deid/{}/{}", c.label, u.id);
            units.push(Unit { seed: unit_seed(exp.seed, &key), key, kind: UnitKind::Deid(s), probe: i });
        }
    }
    let seeds: BTreeMap<&str, u64> = units.iter().map(|u| (u.key.as_str(), u.seed)).collect();
    write_json(&dir.join("seeds.json"), &serde_json::json!({ "seed": exp.seed, "units": seeds }))?;

    if exp.reidentification {
        // The adversary de-identifies the users' enrollment speech with the
        // system itself and enrolls the result.
        let users: Vec<usize> = (0..exp.users).collect();
        let start = exp.enroll[0];
        let reid_enroll = res.corpus.select(&users, [start, start + exp.reid_enroll_per_user])?;
        let mut reid = Vec::new();
        for s in 0..ctx.crafting.len() {
            let mut waves: Vec<Option<Waveform>> = vec![None; reid_enroll.len()];
            let items: Vec<usize> = (0..reid_enroll.len()).collect();
            let c = &ctx;
            ordered_pool(
                &items,
                workers,
                |&i| {
                    let u = &reid_enroll.utterances[i];
                    let key = format!("reid/{}/{}", c.crafting[s].label, u.id);
                    c.deidentify(s, u, unit_seed(exp.seed, &key)).map(|d| d.wave)
                },
                |i, r| {
                    waves[i] = Some(r?);
                    Ok(())
                },
            )?;
            let deid = Corpus {
                speakers: reid_enroll.speakers.clone(),
                utterances: reid_enroll
                    .utterances
                    .iter()
                    .zip(waves)
                    .map(|(u, w)| Utterance { wave: w.expect("filled"), ..u.clone() })
                    .collect(),
            };
            let mut per_model = BTreeMap::new();
            for (id, m) in &ctx.models {
                per_model.insert(id.clone(), enroll_all(m.as_ref(), &deid)?);
            }
            reid.push(per_model);
        }
        ctx.reid = reid;
    }

    let pending: Vec<&Unit> = units.iter().filter(|u| !done.contains(&u.key)).collect();
    let mut records_out = JsonlWriter::append(dir.join(RECORDS))?;
    let mut progress = JsonlWriter::append(dir.join(PROGRESS))?;
    let mut failures = Vec::new();
    let mut finished = done.len();
    let write_status = |finished: usize, failed: usize, complete: bool| {
        write_json(
            &dir.join(STATUS),
            &RunStatus {
                complete,
                units: units.len(),
                done: finished,
                failed,
            },
        )
    };
    write_status(finished, 0, false)?;
    ordered_pool(
        &pending,
        workers,
        |u| ctx.run_unit(u),
        |i, r| {
            let unit = pending[i];
            match r {
                Ok(recs) => {
                    for rec in &recs {
                        records_out.write(rec)?;
                    }
                    records_out.flush()?;
                    progress.write(&Progress { unit: unit.key.clone() })?;
                    progress.flush()?;
                    finished += 1;
                }
                Err(e) => {
                    tracing::warn!(unit = %unit.key, error = %e, "work unit failed");
                    failures.push(FailureRecord {
                        unit: unit.key.clone(),
                        stage: match unit.kind {
                            UnitKind::Original => "identify".into(),
                            UnitKind::Deid(_) => "deidentify".into(),
                        },
                        error_kind: e.kind().into(),
                        message: e.to_string(),
                    });
                }
            }
            Ok(())
        },
    )?;
    if !failures.is_empty() {
        let mut w = JsonlWriter::append(dir.join(FAILURES))?;
        for f in &failures {
            w.write(f)?;
        }
        w.flush()?;
    }

    // Records in unit order, including those of a resumed run.
    let mut records: Vec<TrialRecord> = read_jsonl(dir.join(RECORDS))?;
    let order: BTreeMap<&str, usize> = units.iter().enumerate().map(|(i, u)| (u.key.as_str(), i)).collect();
    records.sort_by_key(|r| order.get(r.unit.as_str()).copied().unwrap_or(usize::MAX));
    let summary = if records.is_empty() { Summary::default() } else { summarize(&records)? };
    write_summary(dir, &summary, &records)?;
    write_timing(dir, &records)?;
    let status = RunStatus {
        complete: failures.is_empty(),
        units: units.len(),
        done: finished,
        failed: failures.len(),
    };
    write_status(status.done, status.failed, status.complete)?;
    Ok(RunReport {
        run_dir: dir.clone(),
        records,
        failures,
        summary,
        status,
    })
}

#[derive(Serialize)]
struct TimingRow<'a> {
    unit: &'a str,
    target_seconds: f64,
    optimization_seconds: f64,
    rendering_seconds: f64,
    total_seconds: f64,
    rtr: Option<f64>,
}

fn write_timing(dir: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    let rows: Vec<TimingRow> = records
        .iter()
        .filter_map(|r| r.stage_times.map(|t| (r, t)))
        .filter(|(r, _)| seen.insert(r.unit.clone()))
        .map(|(r, t)| TimingRow {
            unit: &r.unit,
            target_seconds: t.target_seconds,
            optimization_seconds: t.optimization_seconds,
            rendering_seconds: t.rendering_seconds,
            total_seconds: t.total_seconds,
            rtr: r.rtr,
        })
        .collect();
    write_rows(&dir.join("timing.csv"), &rows)
}

/// Reads the records of a finished or interrupted run.
pub fn load_records(run_dir: &Path) -> Result<Vec<TrialRecord>> {
    read_jsonl(run_dir.join(RECORDS))
}
