//! Labeled utterance sets: a source-filter speaker synthesiser for desk
//! experiments and a loader for `<root>/<speaker>/<utt>.wav` trees.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub label: usize,
    pub wave: Waveform,
    /// Reference transcript, when known.
    pub text: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    /// Speaker names indexed by label.
    pub speakers: Vec<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn of_label(&self, label: usize) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.label == label)
    }

    /// Utterances per label, in label order.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.speakers.len()];
        for u in &self.utterances {
            c[u.label] += 1;
        }
        c
    }

    /// Split each speaker's utterances: the first `k` go left, the rest right.
    pub fn split_per_speaker(&self, k: usize) -> (Corpus, Corpus) {
        let mut seen = vec![0usize; self.speakers.len()];
        let mut a = Corpus { utterances: vec![], speakers: self.speakers.clone() };
        let mut b = a.clone();
        for u in &self.utterances {
            if seen[u.label] < k {
                a.utterances.push(u.clone());
            } else {
                b.utterances.push(u.clone());
            }
            seen[u.label] += 1;
        }
        (a, b)
    }

    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> Corpus {
        Corpus {
            utterances: self.utterances.iter().filter(|u| keep(u.label)).cloned().collect(),
            speakers: self.speakers.clone(),
        }
    }

    /// Loads `<root>/<speaker>/*.wav`; speakers are labelled in sorted
    /// directory-name order, utterances sorted by file name. A sibling
    /// `<utt>.txt` is taken as the transcript.
    pub fn load_dir(root: impl AsRef<Path>) -> Result<Corpus> {
        let root = root.as_ref();
        let mut dirs: Vec<_> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        dirs.sort();
        let mut corpus = Corpus::default();
        for dir in dirs {
            let label = corpus.speakers.len();
            corpus.speakers.push(dir.file_name().unwrap().to_string_lossy().into_owned());
            let mut files: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            for f in files {
                let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
                let txt = f.with_extension("txt");
                let text = if txt.exists() {
                    Some(std::fs::read_to_string(&txt).map_err(|e| Error::io(&txt, e))?.trim().to_string())
                } else {
                    None
                };
                corpus.utterances.push(Utterance {
                    id: format!("{}/{}", corpus.speakers[label], stem),
                    label,
                    wave: load_wav(&f)?,
                    text,
                });
            }
        }
        if corpus.is_empty() {
            return Err(Error::Data(format!("no utterances under {}", root.display())));
        }
        Ok(corpus)
    }
}

/// Voice parameters of a synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    pub f0: f64,
    /// Formant frequency multiplier (vocal tract length).
    pub tract_scale: f64,
    /// One-pole source low-pass coefficient; larger is darker.
    pub tilt: f64,
    pub breathiness: f64,
    /// Fixed speaker-specific resonance (Hz) and its bandwidth.
    pub resonance_hz: f64,
    pub resonance_bw: f64,
    pub bandwidth_scale: f64,
    pub jitter: f64,
}

impl Voice {
    pub fn random(rng: &mut impl Rng) -> Voice {
        let low = rng.random_bool(0.5);
        Voice {
            f0: if low { rng.random_range(85.0..150.0) } else { rng.random_range(160.0..260.0) },
            tract_scale: if low { rng.random_range(0.85..1.05) } else { rng.random_range(1.0..1.22) },
            tilt: rng.random_range(0.55..0.95),
            breathiness: rng.random_range(0.0..0.35),
            resonance_hz: rng.random_range(1800.0..5200.0),
            resonance_bw: rng.random_range(150.0..500.0),
            bandwidth_scale: rng.random_range(0.7..1.6),
            jitter: rng.random_range(0.002..0.02),
        }
    }
}

/// (F1, F2, F3, F4) of the synthesiser's vowel inventory.
const VOWELS: [(&str, [f64; 4]); 8] = [
    ("a", [730.0, 1090.0, 2440.0, 3400.0]),
    ("i", [270.0, 2290.0, 3010.0, 3700.0]),
    ("u", [300.0, 870.0, 2240.0, 3300.0]),
    ("e", [530.0, 1840.0, 2480.0, 3500.0]),
    ("o", [570.0, 840.0, 2410.0, 3300.0]),
    ("ae", [660.0, 1720.0, 2410.0, 3450.0]),
    ("er", [490.0, 1350.0, 1690.0, 3300.0]),
    ("uh", [520.0, 1190.0, 2390.0, 3400.0]),
];

const CONSONANTS: [(&str, f64); 5] = [("s", 5500.0), ("sh", 3200.0), ("f", 6500.0), ("h", 1500.0), ("", 0.0)];

/// Time-varying two-pole resonator with unit gain at DC (Klatt form).
struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Self { y1: 0.0, y2: 0.0 }
    }

    fn tick(&mut self, x: f64, freq: f64, bw: f64) -> f64 {
        let fs = SAMPLE_RATE as f64;
        let freq = freq.min(0.45 * fs);
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let b = 2.0 * r * (std::f64::consts::TAU * freq / fs).cos();
        let c = -r * r;
        let a = 1.0 - b - c;
        let y = a * x + b * self.y1 + c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    len: usize,
    vowel: usize,
    consonant: usize,
    f0_mult: f64,
    gain: f64,
}

/// Renders one utterance of `n` samples for `voice`; the returned text is
/// the syllable sequence.
pub fn synthesize(voice: &Voice, n: usize, rng: &mut ChaCha8Rng) -> (Waveform, String) {
    let fs = SAMPLE_RATE as f64;
    let mut segs = Vec::new();
    let mut t = rng.random_range(0..(0.06 * fs) as usize);
    while t < n {
        let len = rng.random_range((0.12 * fs) as usize..(0.26 * fs) as usize);
        segs.push(Segment {
            start: t,
            len,
            vowel: rng.random_range(0..VOWELS.len()),
            consonant: rng.random_range(0..CONSONANTS.len()),
            f0_mult: rng.random_range(0.9..1.12),
            gain: rng.random_range(0.6..1.0),
        });
        t += len + rng.random_range(0..(0.05 * fs) as usize);
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut res: Vec<Resonator> = (0..5).map(|_| Resonator::new()).collect();
    let mut fric = Resonator::new();
    let mut out = vec![0.0; n];
    let mut phase = 0.0;
    let mut src_lp = 0.0;
    let mut period_jitter = 1.0;
    let mut seg_idx = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while seg_idx + 1 < segs.len() && i >= segs[seg_idx + 1].start {
            seg_idx += 1;
        }
        let s = segs[seg_idx];
        let pos = i as f64 - s.start as f64;
        let in_seg = pos >= 0.0 && pos < s.len as f64;
        let frac = (pos / s.len as f64).clamp(0.0, 1.0);
        // Formants glide from the previous vowel over the first 30 %.
        let prev = if seg_idx > 0 { segs[seg_idx - 1].vowel } else { s.vowel };
        let w = (frac / 0.3).min(1.0);
        let fm: Vec<f64> = (0..4)
            .map(|k| voice.tract_scale * ((1.0 - w) * VOWELS[prev].1[k] + w * VOWELS[s.vowel].1[k]))
            .collect();
        let declination = 1.0 - 0.12 * i as f64 / n as f64;
        let f0 = voice.f0 * s.f0_mult * declination * (1.0 + 0.04 * (std::f64::consts::PI * frac).sin());
        phase += f0 * period_jitter / fs;
        let mut pulse = 0.0;
        if phase >= 1.0 {
            phase -= 1.0;
            pulse = 1.0;
            period_jitter = 1.0 + voice.jitter * normal.sample(rng);
        }
        let noise: f64 = normal.sample(rng);
        src_lp = voice.tilt * src_lp + (1.0 - voice.tilt) * pulse * 8.0;
        let consonant_part = frac < 0.18 && CONSONANTS[s.consonant].1 > 0.0;
        let env = if in_seg { (std::f64::consts::PI * frac).sin().powf(0.6) * s.gain } else { 0.0 };
        let mut y = 0.0;
        if in_seg && !consonant_part {
            let mut v = src_lp + voice.breathiness * 0.15 * noise;
            for k in 0..4 {
                let bw = voice.bandwidth_scale * (50.0 + 40.0 * k as f64);
                v = res[k].tick(v, fm[k], bw);
            }
            let extra = res[4].tick(v, voice.resonance_hz, voice.resonance_bw);
            y = v + 0.6 * extra;
        } else {
            for r in res.iter_mut() {
                r.tick(0.0, 1000.0, 200.0);
            }
        }
        if in_seg && consonant_part {
            y += 0.25 * fric.tick(noise, CONSONANTS[s.consonant].1, 900.0);
        } else {
            fric.tick(0.0, 1000.0, 900.0);
        }
        *o = env * y + 1e-4 * noise;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let target = rng.random_range(0.35..0.7);
    out.iter_mut().for_each(|v| *v *= target / peak);
    let text = segs
        .iter()
        .map(|s| format!("{}{}", CONSONANTS[s.consonant].0, VOWELS[s.vowel].0))
        .collect::<Vec<_>>()
        .join(" ");
    (Waveform::new(out).expect("finite synthesis"), text)
}

/// Desk corpus specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speakers: 30,
            utterances_per_speaker: 40,
            seconds: 1.0,
            seed: 7,
        }
    }
}

pub fn voice_for(seed: u64, speaker: usize) -> Voice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(speaker as u64 + 1)));
    Voice::random(&mut rng)
}

/// Utterance `index` of `speaker`, independent of every other utterance.
pub fn synth_utterance(cfg: &SynthConfig, speaker: usize, index: usize) -> Utterance {
    let voice = voice_for(cfg.seed, speaker);
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(1_000_003)
            .wrapping_add((speaker as u64) << 32)
            .wrapping_add(index as u64 + 1),
    );
    let n = (cfg.seconds * SAMPLE_RATE as f64).round() as usize;
    let (wave, text) = synthesize(&voice, n, &mut rng);
    Utterance {
        id: format!("spk{speaker:03}_utt{index:04}"),
        label: speaker,
        wave,
        text: Some(text),
    }
}

/// Utterances `range` of every speaker, grouped by speaker.
pub fn synth_corpus(cfg: &SynthConfig, range: std::ops::Range<usize>) -> Corpus {
    let mut c = Corpus {
        utterances: vec![],
        speakers: (0..cfg.speakers).map(|s| format!("spk{s:03}")).collect(),
    };
    for s in 0..cfg.speakers {
        for i in range.clone() {
            c.utterances.push(synth_utterance(cfg, s, i));
        }
    }
    c
}
