//! Caption-level object hallucination metrics.
//!
//! Captions are grounded against an [`ObjectLexicon`]: surface forms
//! (synonyms, multi-word names, plurals) map to canonical objects. From the
//! mentioned and ground-truth object sets we compute
//!
//! * `CHAIR_S`: hallucinating sentences / all sentences (corpus pooled)
//! * `CHAIR_I`: hallucinated objects / mentioned objects, once per image
//! * precision, recall and F1 of mentioned objects (per-image mean or pooled)
//! * `Cover`: mean fraction of ground-truth objects mentioned
//! * `Hal`: fraction of captions with at least one hallucinated object
//! * `Cog`: hallucinated objects that are associated with a ground-truth
//!   object of the same image, over all mentioned objects
//!
//! Every fraction is kept as an exact rational next to its float value.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Identifier of the reconstructed cognitive-hallucination formula.
pub const COG_FORMULA: &str = "reconstructed-v1";

const DEFAULT_LEXICON: &str = include_str!("../data/coco_lexicon.json");

#[derive(Debug, Clone, Deserialize, Serialize)]
struct LexiconFile {
    objects: Vec<String>,
    #[serde(default)]
    surface_forms: BTreeMap<String, String>,
    #[serde(default)]
    cog_associations: BTreeMap<String, Vec<String>>,
}

/// Canonical objects with their surface forms and cognitive associations.
#[derive(Debug, Clone)]
pub struct ObjectLexicon {
    objects: BTreeSet<String>,
    forms: HashMap<Vec<String>, String>,
    max_words: usize,
    cog: BTreeMap<String, BTreeSet<String>>,
}

impl ObjectLexicon {
    /// Parses the lexicon JSON: `{objects, surface_forms, cog_associations}`.
    pub fn from_json(json: &str) -> Result<Self> {
        let file: LexiconFile = serde_json::from_str(json)?;
        Self::new(file.objects, file.surface_forms, file.cog_associations)
    }

    /// The bundled 80-object vocabulary.
    pub fn default_coco() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn new(
        objects: impl IntoIterator<Item = String>,
        surface_forms: impl IntoIterator<Item = (String, String)>,
        cog_associations: impl IntoIterator<Item = (String, Vec<String>)>,
    ) -> Result<Self> {
        let objects: BTreeSet<String> = objects.into_iter().map(|o| o.to_lowercase()).collect();
        if objects.is_empty() {
            return Err(Error::EmptyInput("lexicon has no objects".into()));
        }
        let mut forms = HashMap::new();
        for o in &objects {
            forms.insert(words(o), o.clone());
        }
        for (surface, canonical) in surface_forms {
            let canonical = canonical.to_lowercase();
            if !objects.contains(&canonical) {
                return Err(Error::InvalidArgument(format!(
                    "surface form {surface:?} maps to unknown object {canonical:?}"
                )));
            }
            let key = words(&surface);
            if key.is_empty() {
                return Err(Error::InvalidArgument(format!("empty surface form {surface:?}")));
            }
            forms.insert(key, canonical);
        }
        let mut cog = BTreeMap::new();
        for (object, targets) in cog_associations {
            let object = object.to_lowercase();
            let targets: BTreeSet<String> = targets.into_iter().map(|t| t.to_lowercase()).collect();
            if let Some(bad) = std::iter::once(&object).chain(&targets).find(|o| !objects.contains(*o)) {
                return Err(Error::InvalidArgument(format!(
                    "cog association refers to unknown object {bad:?}"
                )));
            }
            cog.insert(object, targets);
        }
        let max_words = forms.keys().map(Vec::len).max().unwrap_or(1);
        Ok(ObjectLexicon {
            objects,
            forms,
            max_words,
            cog,
        })
    }

    pub fn objects(&self) -> &BTreeSet<String> {
        &self.objects
    }

    /// Canonical object for a name or surface form, if any.
    pub fn canonical(&self, name: &str) -> Option<&str> {
        self.lookup(&words(name))
    }

    fn lookup(&self, phrase: &[String]) -> Option<&str> {
        if let Some(c) = self.forms.get(phrase) {
            return Some(c);
        }
        let (last, head) = phrase.split_last()?;
        for suffix in ["es", "s"] {
            if let Some(stem) = last.strip_suffix(suffix).filter(|s| !s.is_empty()) {
                let mut folded = head.to_vec();
                folded.push(stem.to_string());
                if let Some(c) = self.forms.get(&folded) {
                    return Some(c);
                }
            }
        }
        None
    }

    fn cog_targets(&self, object: &str) -> Option<&BTreeSet<String>> {
        self.cog.get(object)
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Canonical objects mentioned in `text`, in order of mention.
///
/// Longest surface form wins at each position; repeated mentions repeat.
pub fn extract_objects(text: &str, lexicon: &ObjectLexicon) -> Vec<String> {
    let tokens = words(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = (1..=lexicon.max_words.min(tokens.len() - i))
            .rev()
            .find_map(|len| lexicon.lookup(&tokens[i..i + len]).map(|c| (len, c)));
        match longest {
            Some((len, canonical)) => {
                out.push(canonical.to_string());
                i += len;
            }
            None => i += 1,
        }
    }
    out
}

/// Splits on terminal punctuation, dropping empty pieces.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(['.', '!', '?'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub generated_text: String,
    pub sentences: Vec<String>,
    pub gt_objects: BTreeSet<String>,
}

impl CaptionRecord {
    /// Builds a record, canonicalizing ground-truth names through the lexicon.
    pub fn new(
        image_id: impl Into<String>,
        text: impl Into<String>,
        gt_objects: impl IntoIterator<Item = impl AsRef<str>>,
        lexicon: &ObjectLexicon,
    ) -> Result<Self> {
        let image_id = image_id.into();
        let generated_text = text.into();
        let mut gt = BTreeSet::new();
        for name in gt_objects {
            let name = name.as_ref();
            let c = lexicon.canonical(name).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "ground-truth object {name:?} of image {image_id} is not in the lexicon"
                ))
            })?;
            gt.insert(c.to_string());
        }
        Ok(CaptionRecord {
            sentences: split_sentences(&generated_text),
            image_id,
            generated_text,
            gt_objects: gt,
        })
    }
}

/// Exact rational with its float value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fraction(BigRational);

impl Fraction {
    /// `num / den`, with `0 / 0 = 0`.
    pub fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            return Fraction(BigRational::zero());
        }
        Fraction(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn zero() -> Self {
        Fraction(BigRational::zero())
    }

    pub fn exact(&self) -> &BigRational {
        &self.0
    }

    pub fn value(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }

    fn mean(items: &[Fraction]) -> Fraction {
        if items.is_empty() {
            return Fraction::zero();
        }
        let sum = items.iter().fold(BigRational::zero(), |acc, f| acc + &f.0);
        Fraction(sum / BigRational::from_integer(BigInt::from(items.len())))
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Fraction", 2)?;
        st.serialize_field("value", &self.value())?;
        st.serialize_field("exact", &format!("{}/{}", self.0.numer(), self.0.denom()))?;
        st.end()
    }
}

/// Grounding results for one caption.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageAnalysis {
    pub image_id: String,
    pub sentences: u64,
    pub hallucinated_sentences: u64,
    pub mentioned: BTreeSet<String>,
    pub hallucinated: BTreeSet<String>,
    pub gt: BTreeSet<String>,
    /// Hallucinated objects associated with some ground-truth object.
    pub cog_hallucinated: BTreeSet<String>,
}

impl ImageAnalysis {
    pub fn matched(&self) -> u64 {
        self.mentioned.intersection(&self.gt).count() as u64
    }

    pub fn precision(&self) -> Fraction {
        Fraction::ratio(self.matched(), self.mentioned.len() as u64)
    }

    pub fn recall(&self) -> Fraction {
        Fraction::ratio(self.matched(), self.gt.len() as u64)
    }

    /// Harmonic mean of precision and recall, `2 TP / (|M| + |GT|)`.
    pub fn f1(&self) -> Fraction {
        Fraction::ratio(2 * self.matched(), (self.mentioned.len() + self.gt.len()) as u64)
    }
}

pub fn analyze(record: &CaptionRecord, lexicon: &ObjectLexicon) -> ImageAnalysis {
    let mut mentioned = BTreeSet::new();
    let mut hallucinated_sentences = 0;
    for sentence in &record.sentences {
        let objs = extract_objects(sentence, lexicon);
        if objs.iter().any(|o| !record.gt_objects.contains(o)) {
            hallucinated_sentences += 1;
        }
        mentioned.extend(objs);
    }
    let hallucinated: BTreeSet<String> =
        mentioned.difference(&record.gt_objects).cloned().collect();
    let cog_hallucinated = hallucinated
        .iter()
        .filter(|h| {
            record
                .gt_objects
                .iter()
                .any(|g| lexicon.cog_targets(g).is_some_and(|t| t.contains(*h)))
        })
        .cloned()
        .collect();
    ImageAnalysis {
        image_id: record.image_id.clone(),
        sentences: record.sentences.len() as u64,
        hallucinated_sentences,
        mentioned,
        hallucinated,
        gt: record.gt_objects.clone(),
        cog_hallucinated,
    }
}

/// Integer counts behind the reported fractions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MetricCounts {
    pub images: u64,
    pub sentences: u64,
    pub hallucinated_sentences: u64,
    pub mentioned_objects: u64,
    pub hallucinated_objects: u64,
    pub matched_objects: u64,
    pub gt_objects: u64,
    pub hallucinating_images: u64,
    pub cog_objects: u64,
    pub images_with_gt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    #[default]
    PerImage,
    Pooled,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair_s: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair_i: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1_mode: Option<F1Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cover: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hal: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cog: Option<Fraction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cog_formula: Option<&'static str>,
    pub counts: MetricCounts,
    /// Degenerate-denominator conventions that were applied.
    pub flags: Vec<String>,
}

impl MetricsReport {
    /// Fields set in `other` override those in `self`.
    pub fn merge(mut self, other: MetricsReport) -> MetricsReport {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(chair_s, chair_i, precision, recall, f1, f1_mode, cover, hal, cog, cog_formula);
        self.counts = other.counts;
        for f in other.flags {
            if !self.flags.contains(&f) {
                self.flags.push(f);
            }
        }
        self
    }
}

fn counts(analyses: &[ImageAnalysis]) -> MetricCounts {
    let mut c = MetricCounts {
        images: analyses.len() as u64,
        ..Default::default()
    };
    for a in analyses {
        c.sentences += a.sentences;
        c.hallucinated_sentences += a.hallucinated_sentences;
        c.mentioned_objects += a.mentioned.len() as u64;
        c.hallucinated_objects += a.hallucinated.len() as u64;
        c.matched_objects += a.matched();
        c.gt_objects += a.gt.len() as u64;
        c.hallucinating_images += u64::from(!a.hallucinated.is_empty());
        c.cog_objects += a.cog_hallucinated.len() as u64;
        c.images_with_gt += u64::from(!a.gt.is_empty());
    }
    c
}

fn analyze_all(records: &[CaptionRecord], lexicon: &ObjectLexicon) -> Result<Vec<ImageAnalysis>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no caption records".into()));
    }
    Ok(records.iter().map(|r| analyze(r, lexicon)).collect())
}

/// `CHAIR_S` and `CHAIR_I`, pooled over the corpus.
pub fn chair(records: &[CaptionRecord], lexicon: &ObjectLexicon) -> Result<MetricsReport> {
    Ok(chair_from(&analyze_all(records, lexicon)?))
}

pub fn chair_from(analyses: &[ImageAnalysis]) -> MetricsReport {
    let c = counts(analyses);
    let mut flags = Vec::new();
    if c.sentences == 0 {
        flags.push("chair_s: no sentences, reported as 0".to_string());
    }
    if c.mentioned_objects == 0 {
        flags.push("chair_i: no mentioned objects, reported as 0".to_string());
    }
    MetricsReport {
        chair_s: Some(Fraction::ratio(c.hallucinated_sentences, c.sentences)),
        chair_i: Some(Fraction::ratio(c.hallucinated_objects, c.mentioned_objects)),
        counts: c,
        flags,
        ..Default::default()
    }
}

/// Object precision, recall and F1.
pub fn object_f1(records: &[CaptionRecord], lexicon: &ObjectLexicon, mode: F1Mode) -> Result<MetricsReport> {
    Ok(object_f1_from(&analyze_all(records, lexicon)?, mode))
}

pub fn object_f1_from(analyses: &[ImageAnalysis], mode: F1Mode) -> MetricsReport {
    let c = counts(analyses);
    let (precision, recall, f1) = match mode {
        F1Mode::PerImage => {
            let p: Vec<_> = analyses.iter().map(ImageAnalysis::precision).collect();
            let r: Vec<_> = analyses.iter().map(ImageAnalysis::recall).collect();
            let f: Vec<_> = analyses.iter().map(ImageAnalysis::f1).collect();
            (Fraction::mean(&p), Fraction::mean(&r), Fraction::mean(&f))
        }
        F1Mode::Pooled => (
            Fraction::ratio(c.matched_objects, c.mentioned_objects),
            Fraction::ratio(c.matched_objects, c.gt_objects),
            Fraction::ratio(2 * c.matched_objects, c.mentioned_objects + c.gt_objects),
        ),
    };
    MetricsReport {
        precision: Some(precision),
        recall: Some(recall),
        f1: Some(f1),
        f1_mode: Some(mode),
        counts: c,
        ..Default::default()
    }
}

/// Generative-task metrics: CHAIR (instance level), Cover, Hal and Cog.
pub fn amber_generative(records: &[CaptionRecord], lexicon: &ObjectLexicon) -> Result<MetricsReport> {
    Ok(amber_from(&analyze_all(records, lexicon)?))
}

pub fn amber_from(analyses: &[ImageAnalysis]) -> MetricsReport {
    let c = counts(analyses);
    let mut flags = Vec::new();
    let covers: Vec<Fraction> = analyses
        .iter()
        .filter(|a| !a.gt.is_empty())
        .map(ImageAnalysis::recall)
        .collect();
    let excluded = analyses.len() - covers.len();
    if excluded > 0 {
        flags.push(format!("cover: {excluded} images with empty ground truth excluded"));
    }
    if c.mentioned_objects == 0 {
        flags.push("chair_i: no mentioned objects, reported as 0".to_string());
    }
    MetricsReport {
        chair_i: Some(Fraction::ratio(c.hallucinated_objects, c.mentioned_objects)),
        cover: Some(Fraction::mean(&covers)),
        hal: Some(Fraction::ratio(c.hallucinating_images, c.images)),
        cog: Some(Fraction::ratio(c.cog_objects, c.mentioned_objects)),
        cog_formula: Some(COG_FORMULA),
        counts: c,
        flags,
        ..Default::default()
    }
}

/// Per-image CSV row.
#[derive(Debug, Clone, Serialize)]
pub struct ImageRow {
    pub image_id: String,
    pub sentences: u64,
    pub hallucinated_sentences: u64,
    pub mentioned: usize,
    pub hallucinated: usize,
    pub gt: usize,
    pub matched: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub cog_hallucinated: usize,
    pub hallucinated_objects: String,
}

pub fn image_rows(analyses: &[ImageAnalysis]) -> Vec<ImageRow> {
    analyses
        .iter()
        .map(|a| ImageRow {
            image_id: a.image_id.clone(),
            sentences: a.sentences,
            hallucinated_sentences: a.hallucinated_sentences,
            mentioned: a.mentioned.len(),
            hallucinated: a.hallucinated.len(),
            gt: a.gt.len(),
            matched: a.matched(),
            precision: a.precision().value(),
            recall: a.recall().value(),
            f1: a.f1().value(),
            cog_hallucinated: a.cog_hallucinated.len(),
            hallucinated_objects: a.hallucinated.iter().cloned().collect::<Vec<_>>().join(";"),
        })
        .collect()
}

fn id_string(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(Error::InvalidHeader(format!("image_id must be a string or number, got {other}"))),
    }
}

#[derive(Deserialize)]
struct CaptionLine {
    image_id: serde_json::Value,
    caption: String,
}

/// Parses captions JSONL: one `{image_id, caption}` object per line.
pub fn parse_captions_jsonl(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let c: CaptionLine = serde_json::from_str(line)?;
            Ok((id_string(&c.image_id)?, c.caption))
        })
        .collect()
}

/// Parses annotations JSON: `{image_id: [gt objects]}`.
pub fn parse_annotations(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    Ok(serde_json::from_str(text)?)
}

/// Joins captions with their annotations; unknown image ids are an error.
pub fn build_records(
    captions: &[(String, String)],
    annotations: &BTreeMap<String, Vec<String>>,
    lexicon: &ObjectLexicon,
) -> Result<Vec<CaptionRecord>> {
    let unknown: Vec<String> = captions
        .iter()
        .filter(|(id, _)| !annotations.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownImageIds(unknown));
    }
    captions
        .iter()
        .map(|(id, text)| CaptionRecord::new(id.clone(), text.clone(), &annotations[id], lexicon))
        .collect()
}
