//! Standard MIDI file reading and writing.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};

use crate::error::{MuserError, Result};
use crate::score::{NoteEvent, Score, DEFAULT_BPM};

/// Marker text prefix carrying chord symbols through MIDI files.
const CHORD_PREFIX: &str = "chord:";

/// Parses a format 0 or 1 file. Note-ons are matched to note-offs per
/// (channel, key) in FIFO order; notes still open at the end of their track
/// are closed there.
pub fn parse_midi(bytes: &[u8]) -> Result<Score> {
    let smf = Smf::parse(bytes).map_err(|e| MuserError::data(format!("malformed MIDI: {e}")))?;
    let tpb = match smf.header.timing {
        Timing::Metrical(t) => t.as_int() as u32,
        Timing::Timecode(..) => return Err(MuserError::data("SMPTE timecode MIDI files are not supported")),
    };
    if tpb == 0 {
        return Err(MuserError::data("ticks per beat is zero"));
    }
    if smf.header.format == Format::Sequential {
        return Err(MuserError::data("format 2 MIDI files are not supported"));
    }
    let mut score = Score::new(tpb);
    let mut time_sig: Option<(u64, u32)> = None;

    for track in &smf.tracks {
        let mut tick: u64 = 0;
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                TrackEventKind::Midi { channel, message } => {
                    let ch = channel.as_int();
                    match message {
                        MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                            open.entry((ch, key.as_int()))
                                .or_default()
                                .push_back((tick, vel.as_int()));
                        }
                        MidiMessage::NoteOn { key, .. } | MidiMessage::NoteOff { key, .. } => {
                            if let Some((onset, vel)) =
                                open.get_mut(&(ch, key.as_int())).and_then(VecDeque::pop_front)
                            {
                                score.notes.push(NoteEvent::new(
                                    key.as_int(),
                                    onset,
                                    (tick - onset).max(1),
                                    vel,
                                ));
                            }
                        }
                        _ => {}
                    }
                }
                TrackEventKind::Meta(MetaMessage::Tempo(us)) => {
                    let us = us.as_int().max(1) as f64;
                    score.tempo_changes.push((tick, 60_000_000.0 / us));
                }
                TrackEventKind::Meta(MetaMessage::Marker(text)) => {
                    if let Some(sym) = std::str::from_utf8(text).ok().and_then(|t| t.strip_prefix(CHORD_PREFIX)) {
                        score.chords.push((tick, sym.to_string()));
                    }
                }
                TrackEventKind::Meta(MetaMessage::TimeSignature(num, ..)) => {
                    // Only the first time signature is honoured.
                    if time_sig.map_or(true, |(t, _)| tick < t) && num > 0 {
                        time_sig = Some((tick, num as u32));
                    }
                }
                _ => {}
            }
        }
        for ((_, key), queue) in open {
            for (onset, vel) in queue {
                score
                    .notes
                    .push(NoteEvent::new(key, onset, (tick - onset).max(1), vel));
            }
        }
    }
    if score.notes.is_empty() {
        return Err(MuserError::data("no note events"));
    }
    if let Some((_, num)) = time_sig {
        score.beats_per_bar = num;
    }
    score.sort();
    score.tempo_changes.dedup_by(|b, a| a.0 == b.0 && {
        a.1 = b.1;
        true
    });
    Ok(score)
}

pub fn read_midi(path: &Path) -> Result<Score> {
    let bytes = std::fs::read(path).map_err(|e| MuserError::io(path, e))?;
    parse_midi(&bytes)
}

/// Serialises a score as a single-track (format 0) file on channel 0.
/// Chords are written as `chord:<symbol>` marker events.
pub fn write_midi_bytes(score: &Score) -> Result<Vec<u8>> {
    if score.ticks_per_beat == 0 || score.ticks_per_beat > 0x7fff {
        return Err(MuserError::data("ticks per beat must fit in 15 bits"));
    }
    let tpb = u15::new(score.ticks_per_beat as u16);

    // (tick, order, kind): note-offs sort before note-ons at equal ticks.
    let chord_text: Vec<(u64, String)> = score.chords.iter().map(|(t, c)| (*t, format!("{CHORD_PREFIX}{c}"))).collect();
    let mut events: Vec<(u64, u8, TrackEventKind<'_>)> = Vec::new();
    events.push((
        0,
        0,
        TrackEventKind::Meta(MetaMessage::TimeSignature(score.beats_per_bar.min(255) as u8, 2, 24, 8)),
    ));
    let tempos: Vec<(u64, f64)> = if score.tempo_changes.is_empty() {
        vec![(0, DEFAULT_BPM)]
    } else {
        score.tempo_changes.clone()
    };
    for (tick, bpm) in tempos {
        let us = (60_000_000.0 / bpm.max(1.0)).round().min(0xff_ffff as f64) as u32;
        events.push((tick, 1, TrackEventKind::Meta(MetaMessage::Tempo(u24::new(us)))));
    }
    for (tick, text) in &chord_text {
        events.push((*tick, 1, TrackEventKind::Meta(MetaMessage::Marker(text.as_bytes()))));
    }
    let ch = u4::new(0);
    for n in &score.notes {
        let key = u7::new(n.pitch.min(127));
        events.push((
            n.onset,
            3,
            TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::NoteOn {
                    key,
                    vel: u7::new(n.velocity.clamp(1, 127)),
                },
            },
        ));
        events.push((
            n.end(),
            2,
            TrackEventKind::Midi {
                channel: ch,
                message: MidiMessage::NoteOff { key, vel: u7::new(0) },
            },
        ));
    }
    events.sort_by_key(|(t, order, _)| (*t, *order));

    let mut track = Vec::with_capacity(events.len() + 1);
    let mut last = 0u64;
    for (tick, _, kind) in events {
        let delta = tick - last;
        if delta > u28::max_value().as_int() as u64 {
            return Err(MuserError::data("event delta exceeds 28 bits"));
        }
        track.push(TrackEvent {
            delta: u28::new(delta as u32),
            kind,
        });
        last = tick;
    }
    track.push(TrackEvent {
        delta: u28::new(0),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });
    let mut smf = Smf::new(Header::new(Format::SingleTrack, Timing::Metrical(tpb)));
    smf.tracks.push(track);
    let mut out = Vec::new();
    smf.write_std(&mut out)
        .map_err(|e| MuserError::data(format!("MIDI write failed: {e}")))?;
    Ok(out)
}

pub fn write_midi(score: &Score, path: &Path) -> Result<()> {
    let bytes = write_midi_bytes(score)?;
    std::fs::write(path, bytes).map_err(|e| MuserError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled format 0 file: header, one track, raw event bytes.
    fn smf_bytes(tpb: u16, events: &[u8]) -> Vec<u8> {
        let mut b = b"MThd".to_vec();
        b.extend_from_slice(&6u32.to_be_bytes());
        b.extend_from_slice(&0u16.to_be_bytes());
        b.extend_from_slice(&1u16.to_be_bytes());
        b.extend_from_slice(&tpb.to_be_bytes());
        b.extend_from_slice(b"MTrk");
        let mut body = events.to_vec();
        body.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        b.extend_from_slice(&(body.len() as u32).to_be_bytes());
        b.extend_from_slice(&body);
        b
    }

    #[test]
    fn single_quarter_note() {
        // delta 0 note-on C4 vel 64; delta 96 (one beat) note-off.
        let bytes = smf_bytes(96, &[0x00, 0x90, 60, 64, 0x60, 0x80, 60, 0]);
        let s = parse_midi(&bytes).unwrap();
        assert_eq!(s.ticks_per_beat, 96);
        assert_eq!(s.notes, vec![NoteEvent::new(60, 0, 96, 64)]);
    }

    #[test]
    fn empty_track_is_an_error() {
        let bytes = smf_bytes(96, &[]);
        let err = parse_midi(&bytes).unwrap_err();
        assert!(err.to_string().contains("no note events"));
    }

    #[test]
    fn overlapping_same_pitch_closes_fifo() {
        // on@0 v10, on@10 v20, off@20, off@40
        let bytes = smf_bytes(
            96,
            &[0x00, 0x90, 60, 10, 0x0A, 0x90, 60, 20, 0x0A, 0x80, 60, 0, 0x14, 0x90, 60, 0],
        );
        let s = parse_midi(&bytes).unwrap();
        assert_eq!(
            s.notes,
            vec![NoteEvent::new(60, 0, 20, 10), NoteEvent::new(60, 10, 30, 20)]
        );
    }

    #[test]
    fn unmatched_note_closed_at_track_end() {
        let bytes = smf_bytes(96, &[0x00, 0x90, 62, 50, 0x30, 0xFF, 0x01, 0x00]);
        let s = parse_midi(&bytes).unwrap();
        assert_eq!(s.notes, vec![NoteEvent::new(62, 0, 48, 50)]);
    }

    #[test]
    fn tempo_meta_is_collected() {
        // 500000 us per beat = 120 bpm
        let bytes = smf_bytes(96, &[0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, 0x00, 0x90, 60, 64, 0x60, 0x80, 60, 0]);
        let s = parse_midi(&bytes).unwrap();
        assert_eq!(s.tempo_changes, vec![(0, 120.0)]);
    }

    #[test]
    fn write_then_read_round_trips() {
        let mut s = Score::new(480);
        s.notes = vec![
            NoteEvent::new(60, 0, 480, 64),
            NoteEvent::new(64, 0, 240, 80),
            NoteEvent::new(67, 480, 960, 100),
        ];
        s.tempo_changes = vec![(0, 100.0), (960, 140.0)];
        let back = parse_midi(&write_midi_bytes(&s).unwrap()).unwrap();
        assert_eq!(back.notes, s.notes);
        assert_eq!(back.tempo_changes.len(), 2);
        assert!((back.tempo_changes[1].1 - 140.0).abs() < 1e-3);
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(parse_midi(b"not a midi file").is_err());
    }
}
