//! Descriptor matching, match-count similarity and rank-1 identification.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    /// Accept when `best / second_best` is below this.
    pub ratio_threshold: f64,
    /// Additionally require the gallery descriptor's nearest probe descriptor
    /// to be the matching one.
    pub cross_check: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            ratio_threshold: 0.8,
            cross_check: false,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio_threshold > 0.0 && self.ratio_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ratio threshold must lie in (0, 1), got {}",
                self.ratio_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub probe_index: usize,
    pub gallery_index: usize,
    pub best_dist: f64,
    pub second_dist: f64,
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the two nearest gallery rows (first index wins ties).
fn two_nearest<D: AsRef<[f64]>>(q: &[f64], gallery: &[D]) -> Option<((usize, f64), f64)> {
    if gallery.len() < 2 {
        return None;
    }
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, g) in gallery.iter().enumerate() {
        let d = squared_distance(q, g.as_ref());
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    Some((best, second))
}

/// One-way nearest-neighbour ratio test from each probe descriptor into the gallery.
///
/// With fewer than two gallery descriptors nothing matches. A zero best distance
/// with a zero second distance (duplicated gallery rows) is not a match.
pub fn match_descriptors<P: AsRef<[f64]>, G: AsRef<[f64]>>(
    probe: &[P],
    gallery: &[G],
    cfg: &MatcherConfig,
) -> Vec<Match> {
    let mut out = Vec::new();
    for (i, p) in probe.iter().enumerate() {
        let Some(((j, best_sq), second_sq)) = two_nearest(p.as_ref(), gallery) else {
            continue;
        };
        let best = best_sq.sqrt();
        let second = second_sq.sqrt();
        if second == 0.0 || best / second >= cfg.ratio_threshold {
            continue;
        }
        if cfg.cross_check {
            let back = gallery[j].as_ref();
            let nearest_probe = probe
                .iter()
                .enumerate()
                .map(|(k, q)| (k, squared_distance(back, q.as_ref())))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(k, _)| k);
            if nearest_probe != Some(i) {
                continue;
            }
        }
        out.push(Match {
            probe_index: i,
            gallery_index: j,
            best_dist: best,
            second_dist: second,
        });
    }
    out
}

/// Number of ratio-test matches.
pub fn similarity<P: AsRef<[f64]>, G: AsRef<[f64]>>(probe: &[P], gallery: &[G], cfg: &MatcherConfig) -> usize {
    match_descriptors(probe, gallery, cfg).len()
}

#[derive(Clone, Debug)]
pub struct GalleryEntry<D> {
    pub identity: String,
    pub descriptors: Vec<D>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    /// Position in the gallery.
    pub index: usize,
    pub identity: String,
    pub similarity: usize,
    /// Mean best distance of the matches; infinite without matches.
    pub mean_distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionResult {
    pub ranked: Vec<RankedEntry>,
    pub rank1: String,
    /// Set when no gallery entry had a single match.
    pub zero_confidence: bool,
}

/// Ranks the gallery by similarity; ties go to the smaller mean match
/// distance, then to the earlier gallery entry.
pub fn recognize<P: AsRef<[f64]>, G: AsRef<[f64]>>(
    probe: &[P],
    gallery: &[GalleryEntry<G>],
    cfg: &MatcherConfig,
) -> Result<RecognitionResult> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("gallery is empty".into()));
    }
    let mut ranked: Vec<RankedEntry> = gallery
        .iter()
        .enumerate()
        .map(|(index, entry)| {
            let matches = match_descriptors(probe, &entry.descriptors, cfg);
            let mean_distance = if matches.is_empty() {
                f64::INFINITY
            } else {
                matches.iter().map(|m| m.best_dist).sum::<f64>() / matches.len() as f64
            };
            RankedEntry {
                index,
                identity: entry.identity.clone(),
                similarity: matches.len(),
                mean_distance,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.similarity
            .cmp(&a.similarity)
            .then(a.mean_distance.total_cmp(&b.mean_distance))
            .then(a.index.cmp(&b.index))
    });
    Ok(RecognitionResult {
        rank1: ranked[0].identity.clone(),
        zero_confidence: ranked[0].similarity == 0,
        ranked,
    })
}

/// Evaluation protocol: which scans enrol and which probe.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Gallery from `train`, probes from `test`, per subject.
    Split {
        name: String,
        train: Vec<u8>,
        test: Vec<u8>,
    },
    /// Every scan probes against all other scans.
    LeaveOneOut,
    /// Every scan probes against all scans including itself.
    Sanity,
}

impl Protocol {
    fn split(name: &str, train: &[u8], test: &[u8]) -> Self {
        Protocol::Split {
            name: name.into(),
            train: train.to_vec(),
            test: test.to_vec(),
        }
    }

    pub fn t1() -> Self {
        Self::split("T1", &[1, 2, 3], &[4])
    }
    pub fn t2() -> Self {
        Self::split("T2", &[1, 2, 3, 4], &[11])
    }
    pub fn t3() -> Self {
        Self::split("T3", &[1, 2, 3, 4], &[12])
    }
    pub fn t4() -> Self {
        Self::split("T4", &[1, 2, 3, 4], &[15, 16])
    }
    pub fn t5() -> Self {
        Self::split("T5", &[1, 2, 3, 4], &[7, 8])
    }

    pub fn name(&self) -> &str {
        match self {
            Protocol::Split { name, .. } => name,
            Protocol::LeaveOneOut => "LOO",
            Protocol::Sanity => "SANITY",
        }
    }

    pub const NAMES: [&'static str; 7] = ["T1", "T2", "T3", "T4", "T5", "LOO", "SANITY"];
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "T1" => Protocol::t1(),
            "T2" => Protocol::t2(),
            "T3" => Protocol::t3(),
            "T4" => Protocol::t4(),
            "T5" => Protocol::t5(),
            "LOO" => Protocol::LeaveOneOut,
            "SANITY" => Protocol::Sanity,
            _ => return Err(Error::InvalidArgument(format!("unknown protocol {s:?}"))),
        })
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Features of one scan.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScanFeatures {
    pub descriptors: Vec<Vec<f64>>,
    /// Significant points found before descriptor extraction.
    pub detected: usize,
    /// Points dropped because their descriptor left the image.
    pub skipped: usize,
}

/// Features keyed by `(subject, scan)`, with subjects in enrolment order.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet {
    subjects: Vec<String>,
    scans: BTreeMap<(String, u8), ScanFeatures>,
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, subject: &str, scan: u8, features: ScanFeatures) {
        if !self.subjects.iter().any(|s| s == subject) {
            self.subjects.push(subject.to_string());
        }
        self.scans.insert((subject.to_string(), scan), features);
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn get(&self, subject: &str, scan: u8) -> Option<&ScanFeatures> {
        self.scans.get(&(subject.to_string(), scan))
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// All scans: subjects in enrolment order, scans ascending.
    pub fn iter(&self) -> impl Iterator<Item = (&str, u8, &ScanFeatures)> {
        self.subjects.iter().flat_map(move |s| {
            self.scans
                .range((s.clone(), 0)..=(s.clone(), u8::MAX))
                .map(|((subj, scan), f)| (subj.as_str(), *scan, f))
        })
    }

    fn require(&self, subject: &str, scan: u8) -> Result<&ScanFeatures> {
        self.get(subject, scan).ok_or_else(|| Error::MissingScan {
            subject: subject.to_string(),
            scan,
        })
    }
}

/// Outcome of one protocol run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolReport {
    pub name: String,
    pub subjects: usize,
    pub probes: usize,
    pub correct: usize,
    /// Rank-1 rate in percent.
    pub accuracy: f64,
    pub mean_points: f64,
    pub skipped: usize,
    pub zero_confidence: usize,
}

struct Enrolled<'a> {
    subject: &'a str,
    scan: u8,
    features: &'a ScanFeatures,
}

/// Runs `protocol` over `features` and reports the rank-1 rate.
pub fn evaluate(features: &FeatureSet, protocol: &Protocol, cfg: &MatcherConfig) -> Result<ProtocolReport> {
    cfg.validate()?;
    let mut gallery: Vec<Enrolled> = Vec::new();
    let mut probes: Vec<Enrolled> = Vec::new();
    match protocol {
        Protocol::Split { train, test, .. } => {
            for s in features.subjects() {
                for &scan in train {
                    gallery.push(Enrolled {
                        subject: s,
                        scan,
                        features: features.require(s, scan)?,
                    });
                }
                for &scan in test {
                    probes.push(Enrolled {
                        subject: s,
                        scan,
                        features: features.require(s, scan)?,
                    });
                }
            }
        }
        Protocol::LeaveOneOut | Protocol::Sanity => {
            for (subject, scan, f) in features.iter() {
                gallery.push(Enrolled {
                    subject,
                    scan,
                    features: f,
                });
                probes.push(Enrolled {
                    subject,
                    scan,
                    features: f,
                });
            }
        }
    }
    if probes.is_empty() {
        return Err(Error::InvalidArgument("protocol selects no probes".into()));
    }

    let mut correct = 0;
    let mut zero_confidence = 0;
    for probe in &probes {
        let entries: Vec<GalleryEntry<&Vec<f64>>> = gallery
            .iter()
            .filter(|g| {
                !(matches!(protocol, Protocol::LeaveOneOut) && g.subject == probe.subject && g.scan == probe.scan)
            })
            .map(|g| GalleryEntry {
                identity: g.subject.to_string(),
                descriptors: g.features.descriptors.iter().collect(),
            })
            .collect();
        let result = recognize(&probe.features.descriptors, &entries, cfg)?;
        if result.rank1 == probe.subject {
            correct += 1;
        }
        if result.zero_confidence {
            zero_confidence += 1;
        }
    }

    // images that take part in the protocol
    let mut used: BTreeMap<(&str, u8), &ScanFeatures> = BTreeMap::new();
    for e in gallery.iter().chain(&probes) {
        used.insert((e.subject, e.scan), e.features);
    }
    let mean_points = used.values().map(|f| f.detected as f64).sum::<f64>() / used.len() as f64;
    let skipped = used.values().map(|f| f.skipped).sum();
    let subjects = probes
        .iter()
        .map(|p| p.subject)
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    Ok(ProtocolReport {
        name: protocol.name().to_string(),
        subjects,
        probes: probes.len(),
        correct,
        accuracy: 100.0 * correct as f64 / probes.len() as f64,
        mean_points,
        skipped,
        zero_confidence,
    })
}

/// Fixed-width text table, accuracies with two decimals.
pub fn format_report(reports: &[ProtocolReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>8} {:>7} {:>8} {:>9} {:>12} {:>8}",
        "protocol", "subjects", "probes", "correct", "accuracy", "mean_points", "skipped"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>7} {:>8} {:>9.2} {:>12.2} {:>8}",
            r.name, r.subjects, r.probes, r.correct, r.accuracy, r.mean_points, r.skipped
        );
    }
    s
}

/// Tab-separated variant with a header row.
pub fn format_report_tsv(reports: &[ProtocolReport]) -> String {
    let mut s = String::from("name\tsubjects\tprobes\tcorrect\taccuracy\tmean_points\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{:.2}\t{:.2}",
            r.name, r.subjects, r.probes, r.correct, r.accuracy, r.mean_points
        );
    }
    s
}
