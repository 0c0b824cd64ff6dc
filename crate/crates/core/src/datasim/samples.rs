//! Training-sample assembly: utterance banks, pre-training concatenations,
//! and verification pairs.

use super::speaker::{gen_utterance, PhoneInventory, SyntheticSpeaker};
use super::DatasimError;
use crate::features::{
    featurize, FeatureMatrix, PhoneSpan, PhoneticProvider, Waveform, SAMPLE_RATE,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A pool of speakers with pre-synthesized utterances.
///
/// Slot scripts are shared across speakers: slot j holds the same phone
/// script no matter who speaks it, which gives the text-independent setting
/// its same-content hard negatives for free.
pub struct UtteranceBank {
    pub speakers: Vec<SyntheticSpeaker>,
    pub inventory: PhoneInventory,
    utterances: Vec<Vec<Waveform>>, // [speaker][slot]
    pub slots_per_speaker: usize,
}

impl UtteranceBank {
    /// `speaker_base` offsets speaker identities so held-out pools never
    /// collide with training pools built from the same seed.
    pub fn build(
        seed: u64,
        speaker_base: u64,
        n_speakers: usize,
        slots_per_speaker: usize,
        min_utterance_s: f64,
        max_utterance_s: f64,
    ) -> Result<UtteranceBank, DatasimError> {
        let speakers: Vec<SyntheticSpeaker> = (0..n_speakers as u64)
            .map(|i| SyntheticSpeaker::generate(seed, speaker_base + i))
            .collect();
        let inventory = PhoneInventory::default();
        let mut script_rng = ChaCha8Rng::seed_from_u64(seed);
        script_rng.set_stream(0x5c);
        let slot_specs: Vec<(Vec<u8>, f64)> = (0..slots_per_speaker)
            .map(|_| {
                let dur = script_rng.gen_range(min_utterance_s..max_utterance_s);
                (inventory.random_script(dur, &mut script_rng), dur)
            })
            .collect();
        let mut utterances = Vec::with_capacity(n_speakers);
        for (si, spk) in speakers.iter().enumerate() {
            let mut per_speaker = Vec::with_capacity(slots_per_speaker);
            for (slot, (script, dur)) in slot_specs.iter().enumerate() {
                let utt_seed = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(((speaker_base + si as u64) << 16) | slot as u64);
                per_speaker.push(gen_utterance(spk, &inventory, script, *dur, utt_seed)?);
            }
            utterances.push(per_speaker);
        }
        Ok(UtteranceBank {
            speakers,
            inventory,
            utterances,
            slots_per_speaker,
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn utterance(&self, speaker: usize, slot: usize) -> &Waveform {
        &self.utterances[speaker][slot]
    }
}

/// What a pre-training sample will contain, before any synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    /// Pool speaker indices, one per drawn speaker.
    pub speakers: Vec<usize>,
    /// Bank slot indices per drawn speaker (no repeats within a speaker).
    pub slots: Vec<Vec<usize>>,
    /// Concatenation order as (local speaker index, slot) pairs.
    pub order: Vec<(usize, usize)>,
}

/// Draw the speaker/utterance structure of one sample: speaker count uniform
/// on {1..4}, utterances per speaker uniform on {1..3}, shuffled order.
pub fn draw_sample_plan(
    pool_size: usize,
    slots_per_speaker: usize,
    seed: u64,
) -> Result<SamplePlan, DatasimError> {
    if pool_size < 4 {
        return Err(DatasimError::PoolTooSmall {
            got: pool_size,
            need: 4,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x11);
    let n_speakers = rng.gen_range(1..=4usize);
    let mut pool: Vec<usize> = (0..pool_size).collect();
    pool.shuffle(&mut rng);
    let speakers: Vec<usize> = pool[..n_speakers].to_vec();
    let mut slots = Vec::with_capacity(n_speakers);
    let mut order = Vec::new();
    for local in 0..n_speakers {
        let n_utts = rng.gen_range(1..=3usize.min(slots_per_speaker));
        let mut all: Vec<usize> = (0..slots_per_speaker).collect();
        all.shuffle(&mut rng);
        let chosen: Vec<usize> = all[..n_utts].to_vec();
        for &slot in &chosen {
            order.push((local, slot));
        }
        slots.push(chosen);
    }
    order.shuffle(&mut rng);
    Ok(SamplePlan {
        speakers,
        slots,
        order,
    })
}

/// A concatenated multi-speaker training sample with frame-level labels.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub features: FeatureMatrix,
    /// Local speaker index per frame; usize::MAX marks silence/none.
    pub frame_labels: Vec<usize>,
    /// T x S binary activity (local speaker order), allowing overlap.
    pub activity: Vec<f64>,
    pub n_speakers: usize,
    /// Frame ranges of the concatenated utterances, in concatenation order.
    pub utterance_boundaries: Vec<std::ops::Range<usize>>,
    /// Pool speaker index per local speaker.
    pub local_to_pool: Vec<usize>,
}

pub const NO_SPEAKER: usize = usize::MAX;

/// Placement of source utterances on a shared sample clock.
pub struct Placement<'a> {
    pub waveform: &'a Waveform,
    pub local_speaker: usize,
    pub start_sample: usize,
}

/// Mix placements into one waveform (phone tracks merged, peak-normalized)
/// and keep per-placement sample ranges.
pub fn mix_placements(placements: &[Placement]) -> (Waveform, Vec<std::ops::Range<usize>>) {
    let total = placements
        .iter()
        .map(|p| p.start_sample + p.waveform.samples.len())
        .max()
        .unwrap_or(0);
    let mut samples = vec![0.0; total];
    let mut phones: Vec<PhoneSpan> = Vec::new();
    let mut ranges = Vec::with_capacity(placements.len());
    for p in placements {
        for (i, &s) in p.waveform.samples.iter().enumerate() {
            samples[p.start_sample + i] += s;
        }
        if let Some(spans) = &p.waveform.phones {
            for span in spans {
                phones.push(PhoneSpan {
                    phone: span.phone,
                    start_sample: span.start_sample + p.start_sample,
                    end_sample: span.end_sample + p.start_sample,
                });
            }
        }
        ranges.push(p.start_sample..p.start_sample + p.waveform.samples.len());
    }
    let mut w = Waveform::new(samples, SAMPLE_RATE);
    w.normalize_peak(0.95);
    w.phones = Some(phones);
    (w, ranges)
}

/// Frame labels and activity from placement ranges: a frame belongs to every
/// speaker whose utterance covers the frame center.
fn labels_from_ranges(
    frames: usize,
    sample_rate: u32,
    placements: &[(std::ops::Range<usize>, usize)],
    n_speakers: usize,
) -> (Vec<usize>, Vec<f64>) {
    let hop = crate::features::hop_samples(sample_rate);
    let win = crate::features::window_samples(sample_rate);
    let mut labels = vec![NO_SPEAKER; frames];
    let mut activity = vec![0.0; frames * n_speakers];
    for t in 0..frames {
        let center = t * hop + win / 2;
        for (range, local) in placements {
            if range.contains(&center) {
                activity[t * n_speakers + local] = 1.0;
                if labels[t] == NO_SPEAKER {
                    labels[t] = *local;
                } else if labels[t] != *local {
                    // overlapped frame: keep the earliest-starting speaker as
                    // the single-label view; activity carries both
                }
            }
        }
    }
    (labels, activity)
}

/// Realize a pre-training sample: concatenate the planned utterances
/// back-to-back, featurize the mixed waveform, attach frame labels.
pub fn make_pretrain_sample(
    bank: &UtteranceBank,
    provider: &PhoneticProvider,
    seed: u64,
) -> Result<TrainingSample, DatasimError> {
    let plan = draw_sample_plan(bank.n_speakers(), bank.slots_per_speaker, seed)?;
    realize_plan(bank, provider, &plan, 0.0, seed)
}

/// Realize a plan with optional onset overlap between consecutive utterances
/// (diarization fine-tuning wants a small overlapped portion).
pub fn realize_plan(
    bank: &UtteranceBank,
    provider: &PhoneticProvider,
    plan: &SamplePlan,
    overlap_ratio: f64,
    seed: u64,
) -> Result<TrainingSample, DatasimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x22);
    let n_speakers = plan.speakers.len();
    let mut placements = Vec::new();
    let mut cursor = 0usize;
    let mut prev: Option<(usize, usize)> = None; // (start, len) of previous utterance
    for &(local, slot) in &plan.order {
        let w = bank.utterance(plan.speakers[local], slot);
        let len = w.samples.len();
        let mut start = cursor;
        if overlap_ratio > 0.0 {
            if let Some((pstart, plen)) = prev {
                let max_overlap = (plen / 2).min(len / 2);
                let want = (overlap_ratio * len as f64 * 2.0) as usize;
                let overlap = want.min(max_overlap);
                start = (pstart + plen).saturating_sub(overlap).max(pstart);
            }
        }
        placements.push(Placement {
            waveform: w,
            local_speaker: local,
            start_sample: start,
        });
        prev = Some((start, len));
        cursor = start + len;
    }
    let locals: Vec<usize> = placements.iter().map(|p| p.local_speaker).collect();
    let (mixed, ranges) = mix_placements(&placements);
    let features = featurize(&mixed, provider)?;
    let tagged: Vec<(std::ops::Range<usize>, usize)> =
        ranges.iter().cloned().zip(locals).collect();
    let (frame_labels, activity) =
        labels_from_ranges(features.frames, SAMPLE_RATE, &tagged, n_speakers);

    // frame ranges of each placed utterance, for pooling and diagnostics
    let hop = crate::features::hop_samples(SAMPLE_RATE);
    let win = crate::features::window_samples(SAMPLE_RATE);
    let frame_range = |r: &std::ops::Range<usize>| {
        let first = r.start.div_ceil(hop.max(1)).min(features.frames);
        let centered_start = (0..features.frames)
            .find(|t| r.contains(&(t * hop + win / 2)))
            .unwrap_or(first);
        let centered_end = (0..features.frames)
            .rev()
            .find(|t| r.contains(&(t * hop + win / 2)))
            .map(|t| t + 1)
            .unwrap_or(centered_start);
        centered_start..centered_end
    };
    let utterance_boundaries = ranges.iter().map(frame_range).collect();

    Ok(TrainingSample {
        features,
        frame_labels,
        activity,
        n_speakers,
        utterance_boundaries,
        local_to_pool: plan.speakers.clone(),
    })
}

/// One verification trial: two 5-second utterances and a target flag.
pub struct VerificationPair {
    pub utt1: Waveform,
    pub utt2: Waveform,
    pub speaker1: usize,
    pub speaker2: usize,
    pub is_target: bool,
    pub same_script: bool,
}

/// Crop to exactly `seconds`, keeping the phone track consistent.
fn crop(w: &Waveform, seconds: f64) -> Waveform {
    let want = (seconds * w.sample_rate as f64).round() as usize;
    if want >= w.samples.len() {
        return w.clone();
    }
    let mut out = Waveform::new(w.samples[..want].to_vec(), w.sample_rate);
    out.phones = w.phones.as_ref().map(|spans| {
        spans
            .iter()
            .filter(|s| s.start_sample < want)
            .map(|s| PhoneSpan {
                phone: s.phone,
                start_sample: s.start_sample,
                end_sample: s.end_sample.min(want),
            })
            .collect()
    });
    out
}

/// Draw one pair. Positive pairs take one speaker and two different slots
/// (different scripts); negatives take two speakers, and in hard-negative
/// mode force the same slot so the scripts match.
pub fn make_verification_pair(
    bank: &UtteranceBank,
    positive: bool,
    hard_negative: bool,
    crop_seconds: f64,
    seed: u64,
) -> Result<VerificationPair, DatasimError> {
    if bank.n_speakers() < 2 || bank.slots_per_speaker < 2 {
        return Err(DatasimError::PoolTooSmall {
            got: bank.n_speakers().min(bank.slots_per_speaker),
            need: 2,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x33);
    let (s1, s2, slot1, slot2, same_script) = if positive {
        let s = rng.gen_range(0..bank.n_speakers());
        let a = rng.gen_range(0..bank.slots_per_speaker);
        let b = loop {
            let b = rng.gen_range(0..bank.slots_per_speaker);
            if b != a {
                break b;
            }
        };
        (s, s, a, b, false)
    } else {
        let a = rng.gen_range(0..bank.n_speakers());
        let b = loop {
            let b = rng.gen_range(0..bank.n_speakers());
            if b != a {
                break b;
            }
        };
        let slot_a = rng.gen_range(0..bank.slots_per_speaker);
        let slot_b = if hard_negative {
            slot_a
        } else {
            rng.gen_range(0..bank.slots_per_speaker)
        };
        (a, b, slot_a, slot_b, slot_a == slot_b)
    };
    Ok(VerificationPair {
        utt1: crop(bank.utterance(s1, slot1), crop_seconds),
        utt2: crop(bank.utterance(s2, slot2), crop_seconds),
        speaker1: s1,
        speaker2: s2,
        is_target: positive,
        same_script,
    })
}

/// Exactly balanced batch of verification pairs: n/2 targets first by
/// construction of the flags, order shuffled.
pub fn make_trial_batch(
    bank: &UtteranceBank,
    n: usize,
    hard_negative: bool,
    crop_seconds: f64,
    seed: u64,
) -> Result<Vec<VerificationPair>, DatasimError> {
    let mut flags: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x44);
    flags.shuffle(&mut rng);
    flags
        .into_iter()
        .enumerate()
        .map(|(i, positive)| {
            make_verification_pair(
                bank,
                positive,
                hard_negative && !positive,
                crop_seconds,
                seed.wrapping_add(1 + i as u64),
            )
        })
        .collect()
}
