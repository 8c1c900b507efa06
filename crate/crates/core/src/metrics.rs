//! Character error rate, segmental SNR and the energy VAD used for SNR gating.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{StftConfig, Waveform};

/// Text after normalization: lowercase, runs of whitespace collapsed to a
/// single space, ends trimmed. Spaces count as characters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript(String);

impl Transcript {
    pub fn new(raw: &str) -> Self {
        let lowered = raw.to_lowercase();
        Transcript(lowered.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn chars(&self) -> Vec<char> {
        self.0.chars().collect()
    }

    /// Number of characters, `|t|`.
    pub fn len(&self) -> usize {
        self.0.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Transcript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Transcript {
    fn from(s: &str) -> Self {
        Transcript::new(s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditCounts {
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.insertions + self.deletions + self.substitutions
    }
}

/// Capped character error rate with the error counts behind it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CerScore {
    pub value: f64,
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
}

impl CerScore {
    pub fn counts(&self) -> EditCounts {
        EditCounts {
            insertions: self.insertions,
            deletions: self.deletions,
            substitutions: self.substitutions,
        }
    }

    /// Uncapped `(I + D + S) / |t|`.
    pub fn raw(&self, ref_len: usize) -> f64 {
        self.counts().total() as f64 / ref_len as f64
    }
}

/// Minimal unit-cost alignment of `hyp` against `reference`.
///
/// An insertion is a hypothesis character with no reference counterpart; a
/// deletion is an unmatched reference character. When several alignments
/// reach the minimum, the backtrace prefers substitution (or match), then
/// insertion, then deletion.
pub fn edit_alignment(hyp: &Transcript, reference: &Transcript) -> EditCounts {
    align_chars(&hyp.chars(), &reference.chars())
}

pub(crate) fn align_chars(h: &[char], r: &[char]) -> EditCounts {
    let (n, m) = (h.len(), r.len());
    let width = m + 1;
    let mut d = vec![0usize; (n + 1) * width];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * width] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * width + j - 1] + usize::from(h[i - 1] != r[j - 1]);
            let ins = d[(i - 1) * width + j] + 1;
            let del = d[i * width + j - 1] + 1;
            d[i * width + j] = diag.min(ins).min(del);
        }
    }

    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        if i > 0 && j > 0 {
            let sub = usize::from(h[i - 1] != r[j - 1]);
            if d[(i - 1) * width + j - 1] + sub == here {
                counts.substitutions += sub;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * width + j] + 1 == here {
            counts.insertions += 1;
            i -= 1;
        } else {
            counts.deletions += 1;
            j -= 1;
        }
    }
    counts
}

/// `min((I + D + S) / |ref|, 1)`.
pub fn cer(hyp: &Transcript, reference: &Transcript) -> Result<CerScore> {
    let len = reference.len();
    if len == 0 {
        return Err(Error::EmptyReference);
    }
    let counts = edit_alignment(hyp, reference);
    Ok(CerScore {
        value: (counts.total() as f64 / len as f64).min(1.0),
        insertions: counts.insertions,
        deletions: counts.deletions,
        substitutions: counts.substitutions,
    })
}

/// Frame layout shared by the VAD and segmental SNR. Frames start at sample
/// 0 and advance by `hop`; the last frame may be shorter than `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub len: usize,
    pub hop: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self::from(&StftConfig::default())
    }
}

impl From<&StftConfig> for FrameSpec {
    fn from(cfg: &StftConfig) -> Self {
        FrameSpec {
            len: cfg.fft_size,
            hop: cfg.hop,
        }
    }
}

impl FrameSpec {
    pub fn ranges(&self, total: usize) -> Vec<std::ops::Range<usize>> {
        if total == 0 {
            return Vec::new();
        }
        if total <= self.len {
            return vec![0..total];
        }
        let count = 1 + (total - self.len).div_ceil(self.hop);
        (0..count)
            .map(|k| {
                let start = k * self.hop;
                start..(start + self.len).min(total)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VadMask {
    pub active: Vec<bool>,
    pub frame_len: usize,
    pub frame_hop: usize,
}

impl VadMask {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn frames(&self) -> FrameSpec {
        FrameSpec {
            len: self.frame_len,
            hop: self.frame_hop,
        }
    }

    /// Mean power of `w` over the active frames (overlapping samples counted
    /// once per frame).
    pub fn gated_power(&self, w: &[f64]) -> f64 {
        let (mut energy, mut count) = (0.0, 0usize);
        for (range, _) in self
            .frames()
            .ranges(w.len())
            .into_iter()
            .zip(&self.active)
            .filter(|(_, a)| **a)
        {
            count += range.len();
            energy += w[range].iter().map(|x| x * x).sum::<f64>();
        }
        if count == 0 {
            0.0
        } else {
            energy / count as f64
        }
    }
}

pub const DEFAULT_VAD_THRESHOLD_DB: f64 = 15.0;

/// Marks frames whose power is within `threshold_db` of the loudest frame.
pub fn vad(w: &Waveform, threshold_db: f64, frames: FrameSpec) -> VadMask {
    let samples = w.samples();
    let powers: Vec<f64> = frames
        .ranges(samples.len())
        .into_iter()
        .map(|r| {
            let len = r.len() as f64;
            samples[r].iter().map(|x| x * x).sum::<f64>() / len
        })
        .collect();
    let max = powers.iter().cloned().fold(0.0, f64::max);
    let floor = max * 10f64.powf(-threshold_db / 10.0);
    VadMask {
        active: powers.iter().map(|p| *p >= floor).collect(),
        frame_len: frames.len,
        frame_hop: frames.hop,
    }
}

pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;

/// Mean over frames of the clipped per-frame SNR of `est` against `reference`.
pub fn seg_snr(reference: &Waveform, est: &Waveform, frames: FrameSpec) -> Result<f64> {
    if reference.len() != est.len() {
        return Err(Error::LengthMismatch(reference.len(), est.len()));
    }
    let (s, e) = (reference.samples(), est.samples());
    let ranges = frames.ranges(s.len());
    if ranges.is_empty() {
        return Err(Error::Empty("waveform"));
    }
    let total: f64 = ranges
        .iter()
        .map(|r| {
            let signal: f64 = s[r.clone()].iter().map(|x| x * x).sum();
            let error: f64 = s[r.clone()]
                .iter()
                .zip(&e[r.clone()])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if error == 0.0 {
                SEG_SNR_MAX_DB
            } else if signal == 0.0 {
                SEG_SNR_MIN_DB
            } else {
                (10.0 * (signal / error).log10()).clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB)
            }
        })
        .sum();
    Ok(total / ranges.len() as f64)
}

/// One utterance of a batch scoring run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub cer: f64,
    pub insertions: usize,
    pub deletions: usize,
    pub substitutions: usize,
    pub ref_len: usize,
    pub missing_hypothesis: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub utterances: usize,
    /// Mean of the per-utterance capped CER.
    pub mean_cer: f64,
    /// Total errors over total reference characters (uncapped).
    pub pooled_cer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchScore {
    pub utterances: Vec<UtteranceScore>,
    pub aggregate: AggregateScore,
}

impl BatchScore {
    /// Per-utterance records followed by one aggregate record, one JSON
    /// object per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for u in &self.utterances {
            out.push_str(&serde_json::to_string(
                &serde_json::json!({"type": "utterance", "score": u}),
            )?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(
            &serde_json::json!({"type": "aggregate", "score": self.aggregate}),
        )?);
        out.push('\n');
        Ok(out)
    }
}

/// Parses a two-column `id<TAB>text` file. Blank lines are skipped.
pub fn parse_id_text_tsv(source: &str, name: &str) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in source.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: name.into(),
            line: idx + 1,
            message: "expected `id<TAB>text`".into(),
        })?;
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateUtterance(id.to_string()));
        }
        rows.push((id.to_string(), text.to_string()));
    }
    Ok(rows)
}

/// Scores hypotheses against references keyed by utterance id. References
/// without a hypothesis are scored against an empty string.
pub fn score_batch(refs: &[(String, String)], hyps: &[(String, String)]) -> Result<BatchScore> {
    let known: HashSet<&str> = refs.iter().map(|(id, _)| id.as_str()).collect();
    if let Some((id, _)) = hyps.iter().find(|(id, _)| !known.contains(id.as_str())) {
        return Err(Error::UnknownUtterance(id.clone()));
    }
    let hyp_map: HashMap<&str, &str> = hyps.iter().map(|(i, t)| (i.as_str(), t.as_str())).collect();
    let mut utterances = Vec::with_capacity(refs.len());
    let (mut errors, mut chars) = (0usize, 0usize);
    for (id, text) in refs {
        let reference = Transcript::new(text);
        let hyp_raw = hyp_map.get(id.as_str()).copied();
        let hyp = Transcript::new(hyp_raw.unwrap_or(""));
        let score = cer(&hyp, &reference)?;
        errors += score.counts().total();
        chars += reference.len();
        utterances.push(UtteranceScore {
            id: id.clone(),
            reference: reference.to_string(),
            hypothesis: hyp.to_string(),
            cer: score.value,
            insertions: score.insertions,
            deletions: score.deletions,
            substitutions: score.substitutions,
            ref_len: reference.len(),
            missing_hypothesis: hyp_raw.is_none(),
        });
    }
    if utterances.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let mean_cer = utterances.iter().map(|u| u.cer).sum::<f64>() / utterances.len() as f64;
    Ok(BatchScore {
        aggregate: AggregateScore {
            utterances: utterances.len(),
            mean_cer,
            pooled_cer: errors as f64 / chars as f64,
        },
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(s: &str) -> Transcript {
        Transcript::new(s)
    }

    /// Exhaustive recursion over all alignments.
    fn brute_distance(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ar)), Some((y, br))) => {
                let sub = brute_distance(ar, br) + usize::from(x != y);
                let ins = brute_distance(ar, b) + 1;
                let del = brute_distance(a, br) + 1;
                sub.min(ins).min(del)
            }
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(t("  Hello   World\t").as_str(), "hello world");
        assert_eq!(Transcript::new(t("A  b").as_str()), t("A  b"));
        assert_eq!(t("").len(), 0);
    }

    #[test]
    fn alignment_examples() {
        assert_eq!(edit_alignment(&t("abc"), &t("abc")), EditCounts::default());
        assert_eq!(
            edit_alignment(&t("axb"), &t("ab")),
            EditCounts {
                insertions: 1,
                deletions: 0,
                substitutions: 0
            }
        );
        assert_eq!(
            edit_alignment(&t(""), &t("ab")),
            EditCounts {
                insertions: 0,
                deletions: 2,
                substitutions: 0
            }
        );
        assert_eq!(brute_distance(&['a', 'x', 'b'], &['a', 'b']), 1);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&t("abc"), &t("abc")).unwrap().value, 0.0);
        let capped = cer(&t("bcd"), &t("a")).unwrap();
        assert_eq!(capped.value, 1.0);
        assert_eq!(capped.counts().total(), 3);
        assert_eq!(capped.raw(1), 3.0);
        assert_eq!(cer(&t("axb"), &t("ab")).unwrap().value, 0.5);
        assert!(matches!(cer(&t("a"), &t("  ")), Err(Error::EmptyReference)));
    }

    #[test]
    fn swapping_arguments_swaps_insertions_and_deletions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a: String = (0..rng.random_range(0..7))
                .map(|_| ['a', 'b', 'c'][rng.random_range(0..3)])
                .collect();
            let b: String = (0..rng.random_range(0..7))
                .map(|_| ['a', 'b', 'c'][rng.random_range(0..3)])
                .collect();
            let ab = edit_alignment(&t(&a), &t(&b));
            let ba = edit_alignment(&t(&b), &t(&a));
            assert_eq!(ab.total(), ba.total());
            assert_eq!(ab.total(), brute_distance(&t(&a).chars(), &t(&b).chars()));
            // Counts come from a minimal alignment read in the other direction.
            assert_eq!(
                ab.insertions as isize - ab.deletions as isize,
                a.len() as isize - b.len() as isize
            );
            assert_eq!(
                ba.insertions as isize - ba.deletions as isize,
                b.len() as isize - a.len() as isize
            );
        }
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
            let d = |x: &str, y: &str| edit_alignment(&t(x), &t(y)).total();
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn cer_in_unit_interval(h in "[a-d ]{0,12}", r in "[a-d]{1,12}") {
            let score = cer(&t(&h), &t(&r)).unwrap();
            prop_assert!((0.0..=1.0).contains(&score.value));
            prop_assert_eq!(score.value == 0.0, t(&h) == t(&r));
        }
    }

    fn frames() -> FrameSpec {
        FrameSpec { len: 512, hop: 256 }
    }

    #[test]
    fn frame_ranges() {
        assert_eq!(frames().ranges(100), vec![0..100]);
        assert_eq!(frames().ranges(1024), vec![0..512, 256..768, 512..1024]);
        assert_eq!(frames().ranges(1100).last().unwrap(), &(768..1100));
    }

    #[test]
    fn vad_constant_signal_all_active() {
        let w = Waveform::new(vec![0.3; 5000], 16000).unwrap();
        let mask = vad(&w, 15.0, frames());
        assert!(mask.active.iter().all(|a| *a));
    }

    #[test]
    fn vad_single_loud_frame() {
        // Loud block aligned to one frame; the rest at -40 dB.
        let mut s = vec![0.01; 512 * 8];
        for v in &mut s[2048..2560] {
            *v = 1.0;
        }
        let mask = vad(
            &Waveform::new(s, 16000).unwrap(),
            15.0,
            FrameSpec { len: 512, hop: 512 },
        );
        assert_eq!(mask.active, vec![false, false, false, false, true, false, false, false]);
    }

    #[test]
    fn vad_two_levels_within_threshold() {
        let quiet = 10f64.powf(-10.0 / 20.0);
        let mut s = vec![1.0; 4096];
        s.extend(vec![quiet; 4096]);
        let w = Waveform::new(s, 16000).unwrap();
        assert!(vad(&w, 15.0, frames()).active.iter().all(|a| *a));
        // Frame-power oracle: the quiet half sits 10 dB down, so a 5 dB
        // threshold keeps only the loud half.
        let strict = vad(&w, 5.0, FrameSpec { len: 512, hop: 512 });
        assert_eq!(strict.active, [vec![true; 8], vec![false; 8]].concat());
    }

    #[test]
    fn seg_snr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(s.clone(), 16000).unwrap();
        assert_eq!(seg_snr(&w, &w, frames()).unwrap(), 35.0);
        let zero = Waveform::silence(16000, 16000).unwrap();
        assert_abs_diff_eq!(seg_snr(&w, &zero, frames()).unwrap(), 0.0, epsilon = 1e-12);
        assert!(matches!(
            seg_snr(&w, &Waveform::silence(10, 16000).unwrap(), frames()),
            Err(Error::LengthMismatch(16000, 10))
        ));
    }

    #[test]
    fn seg_snr_constructed_twenty_db() {
        // Per frame, scale an independent error to exactly -20 dB of the frame.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = FrameSpec { len: 512, hop: 512 };
        let s: Vec<f64> = (0..512 * 20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut est = s.clone();
        for r in fs.ranges(s.len()) {
            let noise: Vec<f64> = r.clone().map(|_| rng.random_range(-1.0..1.0)).collect();
            let ps: f64 = s[r.clone()].iter().map(|x| x * x).sum();
            let pn: f64 = noise.iter().map(|x| x * x).sum();
            let g = (ps / pn / 100.0).sqrt();
            for (k, i) in r.enumerate() {
                est[i] += g * noise[k];
            }
        }
        let v = seg_snr(
            &Waveform::new(s, 16000).unwrap(),
            &Waveform::new(est, 16000).unwrap(),
            fs,
        )
        .unwrap();
        assert!((v - 20.0).abs() < 0.5, "{v}");
    }

    #[test]
    fn seg_snr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(s.clone(), 16000).unwrap();
        let scores: Vec<f64> = [0.01, 0.1, 0.5]
            .iter()
            .map(|g| {
                let est = s.iter().zip(&noise).map(|(a, n)| a + g * n).collect();
                seg_snr(&w, &Waveform::new(est, 16000).unwrap(), frames()).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn batch_scoring() {
        let refs = parse_id_text_tsv("u1\tabc\nu2\tab\n\nu3\tHello  World\n", "refs").unwrap();
        let hyps = parse_id_text_tsv("u2\taxb\nu1\tabc\n", "hyps").unwrap();
        let score = score_batch(&refs, &hyps).unwrap();
        assert_eq!(score.utterances.len(), 3);
        assert_eq!(score.utterances[0].cer, 0.0);
        assert_eq!(score.utterances[1].cer, 0.5);
        assert!(score.utterances[2].missing_hypothesis);
        assert_eq!(score.utterances[2].cer, 1.0);
        assert_abs_diff_eq!(score.aggregate.mean_cer, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(score.aggregate.pooled_cer, 12.0 / 16.0, epsilon = 1e-12);
        let lines = score.to_json_lines().unwrap();
        assert_eq!(lines.lines().count(), 4);
        assert!(lines.lines().last().unwrap().contains("\"aggregate\""));

        assert!(matches!(
            score_batch(&refs, &[("zz".into(), "a".into())]),
            Err(Error::UnknownUtterance(_))
        ));
        assert!(parse_id_text_tsv("no tab here", "x").is_err());
        assert!(matches!(
            parse_id_text_tsv("a\tx\na\ty", "x"),
            Err(Error::DuplicateUtterance(_))
        ));
    }
}
