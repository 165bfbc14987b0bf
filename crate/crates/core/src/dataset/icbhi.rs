use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{OfficialSubset, RespiratoryCycle, SplitListing};
use crate::error::{Error, Result};
use crate::Class;

/// Fields encoded in an ICBHI file stem, `patient_recording_location_mode_device`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordingName {
    pub patient_id: String,
    pub recording_index: String,
    pub chest_location: String,
    pub mode: String,
    pub device: String,
}

impl RecordingName {
    pub fn parse(stem: &str) -> Result<Self> {
        let parts: Vec<&str> = stem.split('_').collect();
        if parts.len() != 5 || parts.iter().any(|p| p.is_empty()) {
            return Err(Error::BadFilename(stem.to_string()));
        }
        Ok(RecordingName {
            patient_id: parts[0].into(),
            recording_index: parts[1].into(),
            chest_location: parts[2].into(),
            mode: parts[3].into(),
            device: parts[4].into(),
        })
    }
}

/// Reads every `*.wav` in `audio_dir` with its `<stem>.txt` annotation from
/// `annotation_dir`. Recordings are visited in file-name order.
pub fn ingest_icbhi(audio_dir: &Path, annotation_dir: &Path) -> Result<Vec<RespiratoryCycle>> {
    let mut wavs: Vec<PathBuf> = fs::read_dir(audio_dir)
        .map_err(|e| Error::io(audio_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();

    let mut cycles = Vec::new();
    for wav in wavs {
        let stem = wav.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::BadFilename(wav.display().to_string()))?;
        let name = RecordingName::parse(stem)?;
        let ann = annotation_dir.join(format!("{stem}.txt"));
        if !ann.is_file() {
            return Err(Error::MissingAnnotation(wav));
        }
        let rows = parse_annotation(&ann)?;
        let (audio, rate) = read_wav(&wav)?;
        let duration = audio.len() as f64 / rate as f64;
        for (i, (t_begin, t_end, crackle, wheeze)) in rows.into_iter().enumerate() {
            let start = (t_begin * rate as f64).round() as usize;
            let len = ((t_end - t_begin) * rate as f64).round() as usize;
            if start + len > audio.len() {
                return Err(Error::CycleOutOfBounds { path: ann, row: i + 1, t_end, duration });
            }
            cycles.push(RespiratoryCycle {
                samples: audio[start..start + len].to_vec(),
                sample_rate: rate,
                label: Class::from_flags(crackle, wheeze),
                patient_id: name.patient_id.clone(),
                recording_id: stem.to_string(),
                chest_location: name.chest_location.clone(),
                device: name.device.clone(),
                t_begin,
                t_end,
                index: i,
            });
        }
    }
    Ok(cycles)
}

/// Rows of `begin end crackle wheeze`, whitespace separated. Blank lines are skipped.
fn parse_annotation(path: &Path) -> Result<Vec<(f64, f64, bool, bool)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::MalformedRow { path: path.to_path_buf(), row: i + 1, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let time = |s: &str| -> Result<f64> {
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(format!("bad time {s:?}"))),
            }
        };
        let flag = |s: &str| -> Result<bool> {
            match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad(format!("bad flag {s:?}"))),
            }
        };
        let (t0, t1) = (time(fields[0])?, time(fields[1])?);
        if t0 < 0.0 || t1 <= t0 {
            return Err(bad(format!("need 0 <= begin < end, got {t0} .. {t1}")));
        }
        rows.push((t0, t1, flag(fields[2])?, flag(fields[3])?));
    }
    Ok(rows)
}

/// Mono samples in [-1, 1]; multi-channel audio is averaged.
fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let mono = if ch == 1 {
        interleaved
    } else {
        interleaved.chunks_exact(ch).map(|f| f.iter().sum::<f64>() / ch as f64).collect()
    };
    Ok((mono, spec.sample_rate))
}

/// Lines of `recording_id<TAB>train|test`; blank lines and `#` comments are skipped.
pub fn parse_split_listing(text: &str) -> Result<SplitListing> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(id), Some(which), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::Config(format!("split listing line {}: expected `recording_id<TAB>split`", i + 1)));
        };
        let subset = match which {
            "train" => OfficialSubset::Train,
            "test" => OfficialSubset::Test,
            other => return Err(Error::Config(format!("split listing line {}: unknown subset {other:?}", i + 1))),
        };
        out.insert(id.to_string(), subset);
    }
    Ok(out)
}

pub fn read_split_listing(path: &Path) -> Result<SplitListing> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split_listing(&text)
}

/// Writes cycles back out in the ICBHI layout: one 32-bit float WAV and one
/// annotation file per recording under `dir/audio` and `dir/annotations`, plus
/// `dir/split.txt` when a listing is given. Cycles of a recording are laid out
/// at their `t_begin` offsets; gaps are silent.
pub fn write_corpus(cycles: &[RespiratoryCycle], listing: Option<&SplitListing>, dir: &Path) -> Result<()> {
    let audio_dir = dir.join("audio");
    let ann_dir = dir.join("annotations");
    for d in [&audio_dir, &ann_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut recordings: BTreeMap<&str, Vec<&RespiratoryCycle>> = BTreeMap::new();
    for c in cycles {
        recordings.entry(&c.recording_id).or_default().push(c);
    }
    for (id, mut rec) in recordings {
        rec.sort_by_key(|c| c.index);
        let rate = rec[0].sample_rate;
        if rec.iter().any(|c| c.sample_rate != rate) {
            return Err(Error::Config(format!("recording {id} mixes sample rates")));
        }
        let total = rec
            .iter()
            .map(|c| (c.t_begin * rate as f64).round() as usize + c.samples.len())
            .max()
            .unwrap_or(0);
        let mut audio = vec![0f32; total];
        let mut ann = String::new();
        for c in &rec {
            let start = (c.t_begin * rate as f64).round() as usize;
            for (dst, s) in audio[start..].iter_mut().zip(&c.samples) {
                *dst = *s as f32;
            }
            let (cr, wh) = match c.label {
                Class::Normal => (0, 0),
                Class::Crackle => (1, 0),
                Class::Wheeze => (0, 1),
                Class::Both => (1, 1),
            };
            ann += &format!("{}\t{}\t{cr}\t{wh}\n", c.t_begin, c.t_end);
        }
        let wav_path = audio_dir.join(format!("{id}.wav"));
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let wav_err = |source| Error::Wav { path: wav_path.clone(), source };
        let mut w = hound::WavWriter::create(&wav_path, spec).map_err(wav_err)?;
        for s in audio {
            w.write_sample(s).map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)?;
        let ann_path = ann_dir.join(format!("{id}.txt"));
        fs::write(&ann_path, ann).map_err(|e| Error::io(&ann_path, e))?;
    }
    if let Some(listing) = listing {
        let text: String = listing
            .iter()
            .map(|(id, s)| format!("{id}\t{}\n", if *s == OfficialSubset::Train { "train" } else { "test" }))
            .collect();
        let p = dir.join("split.txt");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
