//! Simulated multi-speaker meetings with exact reference timelines.

use super::samples::{mix_placements, Placement};
use super::speaker::{gen_utterance, PhoneInventory, SyntheticSpeaker};
use super::DatasimError;
use crate::features::{Waveform, SAMPLE_RATE};
use crate::timeline::Timeline;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Meeting {
    pub waveform: Waveform,
    pub reference: Timeline,
    pub num_speakers: usize,
}

/// Alternating turns of 2-10 s with small gaps; when an overlap budget is
/// requested, turn onsets are pulled forward onto the tail of the previous
/// turn until the measured overlapped fraction catches up with the target.
pub fn simulate_meeting(
    pool: &[SyntheticSpeaker],
    inventory: &PhoneInventory,
    num_speakers: usize,
    duration_s: f64,
    overlap_ratio: f64,
    seed: u64,
) -> Result<Meeting, DatasimError> {
    if !(2..=8).contains(&num_speakers) {
        return Err(DatasimError::BadSpeakerCount(num_speakers));
    }
    if pool.len() < num_speakers {
        return Err(DatasimError::PoolTooSmall {
            got: pool.len(),
            need: num_speakers,
        });
    }
    if duration_s < 60.0 {
        return Err(DatasimError::MeetingTooShort(duration_s));
    }
    if !(0.0..=0.2).contains(&overlap_ratio) {
        return Err(DatasimError::BadOverlapRatio(overlap_ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x77);

    // pick participants, then guarantee everyone appears: the first round of
    // turns is a shuffled pass over all of them
    let mut pool_indices: Vec<usize> = (0..pool.len()).collect();
    pool_indices.shuffle(&mut rng);
    let participants: Vec<usize> = pool_indices[..num_speakers].to_vec();
    let mut first_round: Vec<usize> = (0..num_speakers).collect();
    first_round.shuffle(&mut rng);

    struct Turn {
        local: usize,
        waveform: Waveform,
        start: usize,
    }
    let mut turns: Vec<Turn> = Vec::new();
    let mut cursor = 0usize;
    let mut speech_samples = 0usize; // union speech time
    let mut overlap_samples = 0usize;
    let total_samples = (duration_s * SAMPLE_RATE as f64) as usize;
    let mut turn_index = 0usize;
    let mut prev_local = usize::MAX;

    while cursor < total_samples {
        let local = if turn_index < first_round.len() {
            first_round[turn_index]
        } else {
            loop {
                let c = rng.gen_range(0..num_speakers);
                if c != prev_local || num_speakers == 1 {
                    break c;
                }
            }
        };
        let turn_len = rng.gen_range(2.0..10.0f64);
        let remaining = (total_samples - cursor) as f64 / SAMPLE_RATE as f64;
        let turn_len = turn_len.min(remaining.max(2.0));
        let script = inventory.random_script(turn_len, &mut rng);
        let utt_seed = seed
            .wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(turn_index as u64);
        let w = gen_utterance(&pool[participants[local]], inventory, &script, turn_len, utt_seed)?;
        let len = w.samples.len();

        // a turn can only overlap the tail of the immediately previous turn,
        // so two concurrent speakers is the cap and bookkeeping stays exact
        let mut start = cursor;
        let mut overlap_added = 0usize;
        if overlap_ratio > 0.0 {
            if let Some(last) = turns.last() {
                let last_end = last.start + last.waveform.samples.len();
                let target = overlap_ratio * (speech_samples + len) as f64;
                let deficit = target - overlap_samples as f64;
                if deficit > 0.0 {
                    let max_pull = (last.waveform.samples.len() / 2).min(len / 2);
                    let pull = (deficit as usize).min(max_pull);
                    start = last_end.saturating_sub(pull);
                    overlap_added = last_end - start;
                }
            }
        } else if !turns.is_empty() {
            // small seeded gap between turns
            start = cursor + (rng.gen_range(0.15..0.5) * SAMPLE_RATE as f64) as usize;
        }
        overlap_samples += overlap_added;
        speech_samples += len - overlap_added;
        turns.push(Turn {
            local,
            waveform: w,
            start,
        });
        cursor = start + len;
        prev_local = local;
        turn_index += 1;
    }

    let placements: Vec<Placement> = turns
        .iter()
        .map(|t| Placement {
            waveform: &t.waveform,
            local_speaker: t.local,
            start_sample: t.start,
        })
        .collect();
    let (waveform, ranges) = mix_placements(&placements);

    let mut reference = Timeline::new(&format!("meeting_{seed}"));
    for (turn, range) in turns.iter().zip(&ranges) {
        reference
            .push(
                range.start as f64 / SAMPLE_RATE as f64,
                (range.end - range.start) as f64 / SAMPLE_RATE as f64,
                &pool[participants[turn.local]].speaker_id,
            )
            .expect("positive turn duration");
    }
    Ok(Meeting {
        waveform,
        reference,
        num_speakers,
    })
}

/// Fraction of speech time where two speakers are active, measured on the
/// reference at millisecond resolution.
pub fn measured_overlap_fraction(reference: &Timeline) -> f64 {
    let end_ms = (reference.end() * 1000.0).ceil() as usize;
    let mut active = vec![0u8; end_ms + 1];
    for span in &reference.spans {
        let s = (span.start * 1000.0) as usize;
        let e = (span.end() * 1000.0) as usize;
        for a in &mut active[s..e.min(end_ms)] {
            *a = a.saturating_add(1);
        }
    }
    let speech = active.iter().filter(|&&a| a >= 1).count();
    let overlapped = active.iter().filter(|&&a| a >= 2).count();
    if speech == 0 {
        0.0
    } else {
        overlapped as f64 / speech as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::speaker_pool;

    fn pool() -> Vec<SyntheticSpeaker> {
        speaker_pool(42, 10)
    }

    #[test]
    fn zero_overlap_means_disjoint_spans() {
        let m = simulate_meeting(&pool(), &PhoneInventory::default(), 3, 60.0, 0.0, 1).unwrap();
        let spans = &m.reference.spans;
        for i in 0..spans.len() {
            for j in i + 1..spans.len() {
                let a = &spans[i];
                let b = &spans[j];
                if a.speaker == b.speaker {
                    continue;
                }
                let inter = a.end().min(b.end()) - a.start.max(b.start);
                assert!(inter <= 0.0, "spans {i} and {j} intersect by {inter}");
            }
        }
    }

    #[test]
    fn requested_speaker_count_appears_exactly() {
        let m = simulate_meeting(&pool(), &PhoneInventory::default(), 4, 60.0, 0.0, 2).unwrap();
        assert_eq!(m.reference.speakers().len(), 4);
    }

    #[test]
    fn overlap_fraction_tracks_request() {
        let m = simulate_meeting(&pool(), &PhoneInventory::default(), 4, 120.0, 0.1, 3).unwrap();
        let measured = measured_overlap_fraction(&m.reference);
        assert!(
            (measured - 0.1).abs() <= 0.03,
            "requested 0.1, measured {measured}"
        );
    }

    #[test]
    fn invalid_requests_rejected() {
        let p = pool();
        let inv = PhoneInventory::default();
        assert!(matches!(
            simulate_meeting(&p, &inv, 1, 60.0, 0.0, 0),
            Err(DatasimError::BadSpeakerCount(1))
        ));
        assert!(matches!(
            simulate_meeting(&p, &inv, 9, 60.0, 0.0, 0),
            Err(DatasimError::BadSpeakerCount(9))
        ));
        assert!(matches!(
            simulate_meeting(&p, &inv, 2, 30.0, 0.0, 0),
            Err(DatasimError::MeetingTooShort(_))
        ));
        assert!(matches!(
            simulate_meeting(&p, &inv, 2, 60.0, 0.5, 0),
            Err(DatasimError::BadOverlapRatio(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = simulate_meeting(&pool(), &PhoneInventory::default(), 2, 60.0, 0.05, 9).unwrap();
        let b = simulate_meeting(&pool(), &PhoneInventory::default(), 2, 60.0, 0.05, 9).unwrap();
        assert_eq!(a.waveform.samples, b.waveform.samples);
        assert_eq!(a.reference, b.reference);
    }

    #[test]
    fn reference_spans_lie_within_audio() {
        let m = simulate_meeting(&pool(), &PhoneInventory::default(), 5, 90.0, 0.05, 4).unwrap();
        let audio_end = m.waveform.duration_seconds();
        for span in &m.reference.spans {
            assert!(span.end() <= audio_end + 1e-9);
            assert!(span.duration > 0.0);
        }
    }
}
