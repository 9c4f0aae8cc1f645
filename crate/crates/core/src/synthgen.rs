//! Synthetic annotated corpora.
//!
//! Documents are filler prose from a pseudo-word lexicon with measurement
//! sentences mixed in. Each measurement plants a quantity (optionally with a
//! unit and modifier phrase), a measured entity, optionally a measured
//! property, optionally a qualifier, and the relations between them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{annot_id_for, Annotation, AnnotationKind, Corpus, DocEntry, Document, QuantityDetail, Relation, RelationKind, Span};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible grammar: {0}")]
    InfeasibleSpec(String),
}

pub const MOD_LABELS: [&str; 11] = [
    "IsCount",
    "IsApproximate",
    "IsMean",
    "IsMedian",
    "IsRange",
    "IsList",
    "HasTolerance",
    "IsMeanHasTolerance",
    "IsMeanHasSD",
    "IsRangeHasTolerance",
    "Other",
];

/// Value phrasings. `Plain` carries no modifier label; every other pattern carries the label of the same name.
pub const PATTERNS: [&str; 11] = [
    "Plain",
    "IsApproximate",
    "IsMean",
    "IsMedian",
    "IsRange",
    "IsList",
    "HasTolerance",
    "IsMeanHasTolerance",
    "IsMeanHasSD",
    "IsRangeHasTolerance",
    "Other",
];

const COUNT_PATTERNS: [&str; 5] = ["Plain", "IsApproximate", "IsRange", "IsList", "Other"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slots {
    WithProperty,
    NoProperty,
    Count,
}

const TEMPLATES: [(&str, Slots); 10] = [
    ("The {P} of the {E} was {Q}{L}.", Slots::WithProperty),
    ("The {E} has a {P} of {Q}{L}.", Slots::WithProperty),
    ("We measured the {P} of the {E} at {Q}{L}.", Slots::WithProperty),
    ("The {E} showed a {P} of {Q}{L}.", Slots::WithProperty),
    ("For the {E}, the {P} reached {Q}{L}.", Slots::WithProperty),
    ("The {E} measured {Q}{L}.", Slots::NoProperty),
    ("In total, {Q} of the {E} was added{L}.", Slots::NoProperty),
    ("The {E} ({Q}) was used in all runs{L}.", Slots::NoProperty),
    ("A total of {Q} {E} were collected{L}.", Slots::Count),
    ("We analysed {Q} {E}{L}.", Slots::Count),
];

pub const TEMPLATE_COUNT: usize = TEMPLATES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyEntry {
    pub name: String,
    pub units: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounEntry {
    pub singular: String,
    pub plural: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarSpec {
    pub seed: u64,
    /// Seeds the filler lexicon only, so corpora with different `seed` share a vocabulary.
    pub lexicon_seed: u64,
    pub lexicon_size: usize,
    pub doc_prefix: String,
    pub mean_words: usize,
    pub long_fraction: f64,
    pub long_words: usize,
    pub measurements_min: usize,
    pub measurements_max: usize,
    pub property_prob: f64,
    pub count_prob: f64,
    pub qualifier_prob: f64,
    /// Where a qualifier attaches: quantity, entity, property.
    pub qualifier_targets: [f64; 3],
    pub distractor_prob: f64,
    pub pattern_weights: BTreeMap<String, f64>,
    pub adjectives: Vec<String>,
    pub nouns: Vec<NounEntry>,
    pub properties: Vec<PropertyEntry>,
    pub count_units: Vec<String>,
    pub qualifiers: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for GrammarSpec {
    fn default() -> Self {
        let props: [(&str, &[&str]); 16] = [
            ("thickness", &["m", "cm", "mm", "µm", "nm", "km"]),
            ("density", &["g/cm³", "kg/m³", "g/mL"]),
            ("mass", &["kg", "g", "mg", "t"]),
            ("temperature", &["°C", "K"]),
            ("porosity", &["%", "vol%"]),
            ("concentration", &["mmol/L", "mol/L", "ppm", "mg/L", "wt%"]),
            ("velocity", &["m/s", "km/h", "cm/yr"]),
            ("pressure", &["kPa", "MPa", "GPa", "bar"]),
            ("grain size", &["µm", "mm"]),
            ("age", &["Ma", "ka", "years"]),
            ("duration", &["s", "min", "h", "days"]),
            ("frequency", &["Hz", "kHz", "MHz"]),
            ("voltage", &["V", "mV"]),
            ("power output", &["W", "kW", "MW"]),
            ("surface area", &["m²", "cm²", "km²"]),
            ("energy", &["J", "eV", "keV", "kJ/mol"]),
        ];
        let nouns: [(&str, &str); 20] = [
            ("sample", "samples"),
            ("core", "cores"),
            ("sediment layer", "sediment layers"),
            ("soil profile", "soil profiles"),
            ("crystal", "crystals"),
            ("thin film", "thin films"),
            ("solution", "solutions"),
            ("membrane", "membranes"),
            ("leaf", "leaves"),
            ("specimen", "specimens"),
            ("electrode", "electrodes"),
            ("alloy bar", "alloy bars"),
            ("wafer", "wafers"),
            ("ice core", "ice cores"),
            ("tree", "trees"),
            ("particle", "particles"),
            ("reactor", "reactors"),
            ("fiber", "fibers"),
            ("nodule", "nodules"),
            ("colony", "colonies"),
        ];
        let weights: [(&str, f64); 11] = [
            ("Plain", 4.0),
            ("IsApproximate", 1.0),
            ("IsMean", 1.0),
            ("IsMedian", 1.0),
            ("IsRange", 1.0),
            ("IsList", 1.0),
            ("HasTolerance", 1.0),
            ("IsMeanHasTolerance", 1.0),
            ("IsMeanHasSD", 1.0),
            ("IsRangeHasTolerance", 1.0),
            ("Other", 1.0),
        ];
        GrammarSpec {
            seed: 7,
            lexicon_seed: 1,
            lexicon_size: 8000,
            doc_prefix: "doc".to_string(),
            mean_words: 160,
            long_fraction: 0.04,
            long_words: 620,
            measurements_min: 1,
            measurements_max: 4,
            property_prob: 0.6,
            count_prob: 0.15,
            qualifier_prob: 0.35,
            qualifier_targets: [0.6, 0.25, 0.15],
            distractor_prob: 0.3,
            pattern_weights: weights.iter().map(|(k, w)| (k.to_string(), *w)).collect(),
            adjectives: strings(&[
                "basaltic", "granitic", "untreated", "annealed", "oxidized", "porous", "coarse", "fine-grained",
                "doped", "hydrated", "frozen", "marine", "lacustrine", "polished", "irradiated", "synthetic",
                "natural", "weathered", "amorphous", "layered",
            ]),
            nouns: nouns.iter().map(|(s, p)| NounEntry { singular: s.to_string(), plural: p.to_string() }).collect(),
            properties: props
                .iter()
                .map(|(n, us)| PropertyEntry { name: n.to_string(), units: strings(us) })
                .collect(),
            count_units: Vec::new(),
            qualifiers: strings(&[
                "during the dry season",
                "under ambient conditions",
                "in the upper layer",
                "after annealing",
                "at the northern site",
                "in untreated controls",
                "before irradiation",
                "at steady state",
                "in the second campaign",
                "near the inlet",
                "under vacuum",
                "in the lower horizon",
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub documents: usize,
    pub quantities: usize,
    pub long_documents: usize,
    pub mean_words: f64,
    pub distinct_words: usize,
    pub label_counts: BTreeMap<String, usize>,
    pub template_counts: Vec<usize>,
    pub label_proportions: BTreeMap<String, f64>,
    pub expected_proportions: BTreeMap<String, f64>,
    pub coverage_min: usize,
    pub coverage_ok: bool,
}

impl GenerationReport {
    /// Largest absolute gap between observed and requested label proportions.
    pub fn max_proportion_error(&self) -> f64 {
        self.expected_proportions
            .iter()
            .map(|(k, e)| libm::fabs(self.label_proportions.get(k).copied().unwrap_or(0.0) - e))
            .fold(0.0, f64::max)
    }
}

const FUNCTION_WORDS: [&str; 16] =
    ["the", "of", "and", "in", "was", "were", "to", "a", "for", "with", "by", "on", "is", "that", "from", "as"];

/// Deterministic pseudo-word lexicon.
pub fn lexicon(seed: u64, size: usize, exclude: &[&str]) -> Vec<String> {
    const ONSETS: [&str; 26] = [
        "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cl", "dr", "st", "tr",
        "pl", "gr", "sh", "ch", "th",
    ];
    const VOWELS: [&str; 9] = ["a", "e", "i", "o", "u", "ai", "ea", "io", "ou"];
    const CODAS: [&str; 11] = ["", "", "n", "r", "s", "l", "t", "m", "x", "nd", "st"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = alloc::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while out.len() < size && attempts < size * 50 {
        attempts += 1;
        let syll = rng.gen_range(1..=4);
        let mut w = String::new();
        for _ in 0..syll {
            w.push_str(ONSETS.choose(&mut rng).unwrap());
            w.push_str(VOWELS.choose(&mut rng).unwrap());
        }
        w.push_str(CODAS.choose(&mut rng).unwrap());
        if w.len() < 3 || exclude.contains(&w.as_str()) || !seen.insert(w.clone()) {
            continue;
        }
        out.push(w);
    }
    out
}

struct Builder {
    text: String,
    chars: usize,
}

impl Builder {
    fn push(&mut self, s: &str) -> Span {
        let start = self.chars;
        self.text.push_str(s);
        self.chars += s.chars().count();
        Span { start, end: self.chars }
    }
}

struct Measurement {
    template: usize,
    pattern: usize,
    qualifier: Option<usize>,
}

struct Planted {
    template: usize,
    labels: Vec<String>,
}

struct Ctx<'a> {
    spec: &'a GrammarSpec,
    lex: &'a [String],
    pattern_weights: Vec<f64>,
    count_weights: Vec<f64>,
}

impl Ctx<'_> {
    fn filler_word(&self, rng: &mut ChaCha8Rng) -> String {
        if rng.gen_bool(0.3) {
            FUNCTION_WORDS.choose(rng).unwrap().to_string()
        } else {
            // Zipf-like: low indices are much more frequent.
            let u: f64 = rng.gen();
            let i = (libm::pow(u, 2.5) * self.lex.len() as f64) as usize;
            self.lex[i.min(self.lex.len() - 1)].clone()
        }
    }

    fn filler_sentence(&self, rng: &mut ChaCha8Rng) -> (String, usize) {
        let n = rng.gen_range(8..=20);
        let mut words: Vec<String> = (0..n).map(|_| self.filler_word(rng)).collect();
        capitalize(&mut words[0]);
        let mut s = words.join(" ");
        let mut count = n;
        if rng.gen_bool(self.spec.distractor_prob) {
            let d = match rng.gen_range(0..4) {
                0 => format!(" (Fig. {})", rng.gen_range(1..=9)),
                1 => format!(" [{}]", rng.gen_range(1..=60)),
                2 => format!(" in {}", rng.gen_range(1950..=2021)),
                _ => format!(" (Table {})", rng.gen_range(1..=6)),
            };
            count += 2;
            s.push_str(&d);
        }
        s.push('.');
        (s, count)
    }

    fn pick_measurement(&self, rng: &mut ChaCha8Rng) -> Measurement {
        let s = self.spec;
        let template = if rng.gen_bool(s.count_prob) {
            pick_template(rng, Slots::Count)
        } else if rng.gen_bool(s.property_prob) {
            pick_template(rng, Slots::WithProperty)
        } else {
            pick_template(rng, Slots::NoProperty)
        };
        let pattern = if TEMPLATES[template].1 == Slots::Count {
            weighted(rng, &self.count_weights)
        } else {
            weighted(rng, &self.pattern_weights)
        };
        let qualifier = if rng.gen_bool(s.qualifier_prob) { Some(weighted(rng, &s.qualifier_targets)) } else { None };
        Measurement { template, pattern, qualifier }
    }
}

fn pick_template(rng: &mut ChaCha8Rng, slots: Slots) -> usize {
    let ids: Vec<usize> = (0..TEMPLATES.len()).filter(|&i| TEMPLATES[i].1 == slots).collect();
    *ids.choose(rng).unwrap()
}

fn weighted(rng: &mut ChaCha8Rng, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

fn capitalize(s: &mut String) {
    if let Some(c) = s.chars().next() {
        let up: String = c.to_uppercase().collect();
        s.replace_range(..c.len_utf8(), &up);
    }
}

fn number(rng: &mut ChaCha8Rng) -> String {
    match rng.gen_range(0..3) {
        0 => format!("{}", rng.gen_range(1..1000)),
        1 => format!("{}.{}", rng.gen_range(0..100), rng.gen_range(1..10)),
        _ => format!("{}.{:02}", rng.gen_range(0..20), rng.gen_range(1..100)),
    }
}

fn small_number(rng: &mut ChaCha8Rng) -> String {
    format!("{}.{}", rng.gen_range(0..5), rng.gen_range(1..10))
}

/// Render the quantity phrase. Returns (surface, unit substring).
fn render_quantity(rng: &mut ChaCha8Rng, pattern: &str, unit: Option<&str>) -> String {
    let u = |s: String| match unit {
        Some(u) if u == "%" => format!("{s}%"),
        Some(u) => format!("{s} {u}"),
        None => s,
    };
    match pattern {
        "Plain" => u(number(rng)),
        "IsApproximate" => {
            let w = ["approximately", "about", "roughly", "ca.", "~"].choose(rng).unwrap();
            if *w == "~" {
                u(format!("~{}", number(rng)))
            } else {
                u(format!("{w} {}", number(rng)))
            }
        }
        "IsMean" => {
            let w = ["a mean of", "an average of", "on average"].choose(rng).unwrap();
            u(format!("{w} {}", number(rng)))
        }
        "IsMedian" => {
            let w = ["a median of", "median values of"].choose(rng).unwrap();
            u(format!("{w} {}", number(rng)))
        }
        "IsRange" => {
            let (a, b) = (number(rng), number(rng));
            match rng.gen_range(0..3) {
                0 => u(format!("{a}-{b}")),
                1 => u(format!("{a} to {b}")),
                _ => u(format!("between {a} and {b}")),
            }
        }
        "IsList" => {
            let (a, b, c) = (number(rng), number(rng), number(rng));
            if rng.gen_bool(0.5) {
                u(format!("{a}, {b} and {c}"))
            } else {
                u(format!("{a}, {b}, and {c}"))
            }
        }
        "HasTolerance" => {
            let w = ["±", "+/-"].choose(rng).unwrap();
            u(format!("{} {w} {}", number(rng), small_number(rng)))
        }
        "IsMeanHasTolerance" => u(format!("a mean of {} ± {}", number(rng), small_number(rng))),
        "IsMeanHasSD" => {
            let m = u(format!("a mean of {}", number(rng)));
            format!("{m} (SD {})", small_number(rng))
        }
        "IsRangeHasTolerance" => u(format!("{}-{} ± {}", number(rng), number(rng), small_number(rng))),
        _ => {
            let w = ["more than", "less than", "at least", "up to", ">"].choose(rng).unwrap();
            u(format!("{w} {}", number(rng)))
        }
    }
}

struct DocState {
    entry: DocEntry,
    builder: Builder,
    next_id: usize,
    next_set: u32,
}

impl DocState {
    fn annotate(&mut self, kind: AnnotationKind, span: Span, set: u32, detail: Option<QuantityDetail>) -> String {
        self.next_id += 1;
        let id = annot_id_for(&self.entry.doc.doc_id, self.next_id);
        let surface = crate::corpus::slice_chars(&self.builder.text, span);
        let mut a = Annotation::new(id.clone(), set, kind, span, surface);
        if let Some(d) = detail {
            a.payload = Some(d);
        }
        self.entry.annotations.push(a);
        id
    }

    fn relate(&mut self, kind: RelationKind, source: &str, target: &str) {
        self.entry.relations.push(Relation { kind, source: source.to_string(), target: target.to_string() });
    }
}

fn plant(ctx: &Ctx, rng: &mut ChaCha8Rng, st: &mut DocState, m: &Measurement) -> Planted {
    let spec = ctx.spec;
    let (tpl, slots) = TEMPLATES[m.template];
    let noun = spec.nouns.choose(rng).unwrap();
    let head = if slots == Slots::Count { &noun.plural } else { &noun.singular };
    let entity = match spec.adjectives.choose(rng) {
        Some(a) if rng.gen_bool(0.7) => format!("{a} {head}"),
        _ => head.clone(),
    };
    let (property, unit) = if slots == Slots::Count {
        (None, spec.count_units.choose(rng).cloned())
    } else {
        let p = spec.properties.choose(rng).unwrap();
        let name = (slots == Slots::WithProperty).then(|| p.name.clone());
        (name, p.units.choose(rng).cloned())
    };
    let pattern = PATTERNS[m.pattern];
    let quantity = render_quantity(rng, pattern, unit.as_deref());
    let qual_text = m.qualifier.map(|_| spec.qualifiers.choose(rng).unwrap().clone());
    let mut labels: Vec<String> = Vec::new();
    if slots == Slots::Count {
        labels.push("IsCount".to_string());
    }
    if pattern != "Plain" {
        labels.push(pattern.to_string());
    }
    labels.sort();

    let set = st.next_set;
    st.next_set += 1;
    if !st.builder.text.is_empty() {
        st.builder.push(" ");
    }
    let mut spans: BTreeMap<char, Span> = BTreeMap::new();
    let mut qual_span = None;
    let mut rest = tpl;
    while let Some(open) = rest.find('{') {
        st.builder.push(&rest[..open]);
        let slot = rest[open + 1..].chars().next().unwrap();
        rest = &rest[open + 3..];
        match slot {
            'E' => {
                spans.insert('E', st.builder.push(&entity));
                if m.qualifier == Some(1) {
                    st.builder.push(" ");
                    qual_span = Some(st.builder.push(qual_text.as_deref().unwrap()));
                }
            }
            'P' => {
                spans.insert('P', st.builder.push(property.as_deref().unwrap()));
                if m.qualifier == Some(2) {
                    st.builder.push(" ");
                    qual_span = Some(st.builder.push(qual_text.as_deref().unwrap()));
                }
            }
            'Q' => {
                spans.insert('Q', st.builder.push(&quantity));
            }
            _ => {
                let attach_here = m.qualifier == Some(0) || (m.qualifier == Some(2) && property.is_none());
                if attach_here {
                    st.builder.push(" ");
                    qual_span = Some(st.builder.push(qual_text.as_deref().unwrap()));
                }
            }
        }
    }
    st.builder.push(rest);

    let detail = QuantityDetail { unit: unit.clone(), mods: labels.clone() };
    let q = st.annotate(AnnotationKind::Quantity, spans[&'Q'], set, Some(detail));
    let p = spans.get(&'P').map(|s| *s).map(|s| st.annotate(AnnotationKind::MeasuredProperty, s, set, None));
    let e = st.annotate(AnnotationKind::MeasuredEntity, spans[&'E'], set, None);
    match &p {
        Some(p) => {
            st.relate(RelationKind::HasQuantity, p, &q);
            st.relate(RelationKind::HasProperty, &e, p);
        }
        None => st.relate(RelationKind::HasQuantity, &e, &q),
    }
    if let Some(span) = qual_span {
        let l = st.annotate(AnnotationKind::Qualifier, span, set, None);
        let target = match m.qualifier {
            Some(1) => e.clone(),
            Some(2) if p.is_some() => p.clone().unwrap(),
            _ => q.clone(),
        };
        st.relate(RelationKind::Qualifies, &l, &target);
    }
    Planted { template: m.template, labels }
}

impl GrammarSpec {
    fn check(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InfeasibleSpec(m.to_string()));
        if self.nouns.is_empty() {
            return bad("entity noun lexicon is empty");
        }
        if self.count_prob < 1.0 && self.properties.iter().all(|p| p.units.is_empty()) {
            return bad("property/unit lexicon is empty");
        }
        if self.qualifier_prob > 0.0 && self.qualifiers.is_empty() {
            return bad("qualifier lexicon is empty");
        }
        if self.lexicon_size == 0 {
            return bad("filler lexicon is empty");
        }
        if self.measurements_min == 0 || self.measurements_min > self.measurements_max {
            return bad("measurement count range is empty");
        }
        for p in [self.property_prob, self.count_prob, self.qualifier_prob, self.distractor_prob, self.long_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probability outside [0, 1]");
            }
        }
        if self.qualifier_targets.iter().any(|&w| w < 0.0) || self.qualifier_targets.iter().sum::<f64>() <= 0.0 {
            return bad("qualifier target weights must be non-negative with a positive sum");
        }
        for name in self.pattern_weights.keys() {
            if !PATTERNS.contains(&name.as_str()) {
                return Err(SynthError::InfeasibleSpec(format!("unknown value pattern {name}")));
            }
        }
        if self.pattern_weights.values().any(|&w| w < 0.0) || self.pattern_weights.values().sum::<f64>() <= 0.0 {
            return bad("pattern weights must be non-negative with a positive sum");
        }
        Ok(())
    }

    fn weights(&self) -> (Vec<f64>, Vec<f64>) {
        let all: Vec<f64> = PATTERNS.iter().map(|p| self.pattern_weights.get(*p).copied().unwrap_or(0.0)).collect();
        let count: Vec<f64> =
            PATTERNS.iter().zip(&all).map(|(p, &w)| if COUNT_PATTERNS.contains(p) { w } else { 0.0 }).collect();
        (all, count)
    }

    /// Share of quantities expected to carry each label.
    pub fn expected_proportions(&self) -> BTreeMap<String, f64> {
        let (all, count) = self.weights();
        let (sa, sc): (f64, f64) = (all.iter().sum(), count.iter().sum());
        let pc = self.count_prob;
        let mut out = BTreeMap::new();
        for label in MOD_LABELS {
            let v = if label == "IsCount" {
                pc
            } else {
                let i = PATTERNS.iter().position(|p| *p == label).unwrap();
                let nc = (1.0 - pc) * all[i] / sa;
                let c = if sc > 0.0 { pc * count[i] / sc } else { 0.0 };
                nc + c
            };
            out.insert(label.to_string(), v);
        }
        out
    }
}

/// Generate `n_docs` documents. Deterministic in `spec`.
pub fn generate(spec: &GrammarSpec, n_docs: usize) -> Result<(Corpus, GenerationReport), SynthError> {
    spec.check()?;
    if n_docs == 0 {
        return Err(SynthError::InfeasibleSpec("n_docs must be at least 1".to_string()));
    }
    let mut reserved: Vec<&str> = FUNCTION_WORDS.to_vec();
    reserved.extend(spec.adjectives.iter().map(|s| s.as_str()));
    let lex = lexicon(spec.lexicon_seed, spec.lexicon_size, &reserved);
    let (pattern_weights, count_weights) = spec.weights();
    let ctx = Ctx { spec, lex: &lex, pattern_weights, count_weights };

    let mut states = Vec::with_capacity(n_docs);
    let mut planted: Vec<Planted> = Vec::new();
    let mut words_total = 0usize;
    let mut long_docs = 0usize;
    for i in 0..n_docs {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let doc_id = format!("{}-{:05}", spec.doc_prefix, i + 1);
        let long = rng.gen_bool(spec.long_fraction);
        let target = if long {
            long_docs += 1;
            spec.long_words + rng.gen_range(0..=spec.long_words / 5)
        } else {
            // Keep the corpus-wide mean near `mean_words` once long documents are included.
            let long_mean = spec.long_words as f64 * 1.1;
            let lf = spec.long_fraction.min(0.5);
            let normal = ((spec.mean_words as f64 - lf * long_mean) / (1.0 - lf)).max(20.0) as usize;
            let lo = normal * 3 / 4;
            rng.gen_range(lo..=2 * normal - lo)
        };
        let n_meas = rng.gen_range(spec.measurements_min..=spec.measurements_max);
        let meas: Vec<Measurement> = (0..n_meas).map(|_| ctx.pick_measurement(&mut rng)).collect();
        // Approximate measurement sentence length, used to plan filler.
        let mut remaining = target.saturating_sub(16 * n_meas + 10);
        let mut fillers: Vec<(String, usize)> = Vec::new();
        while remaining > 0 {
            let (s, w) = ctx.filler_sentence(&mut rng);
            remaining = remaining.saturating_sub(w);
            fillers.push((s, w));
        }
        // Measurement slots among the filler sentences.
        let mut order: Vec<Option<usize>> = fillers.iter().map(|_| None).collect();
        for m in 0..n_meas {
            let at = rng.gen_range(0..=order.len());
            order.insert(at, Some(m));
        }
        let mut st = DocState {
            entry: DocEntry::new(Document::new(doc_id, String::new())),
            builder: Builder { text: String::new(), chars: 0 },
            next_id: 0,
            next_set: 1,
        };
        let mut fi = 0;
        for slot in order {
            match slot {
                Some(m) => planted.push(plant(&ctx, &mut rng, &mut st, &meas[m])),
                None => {
                    if !st.builder.text.is_empty() {
                        st.builder.push(" ");
                    }
                    st.builder.push(&fillers[fi].0);
                    fi += 1;
                }
            }
        }
        states.push((st, rng));
    }

    // Top up so every label and template reaches the coverage floor.
    let coverage_min = core::cmp::max(1, n_docs / 20);
    let mut top_up = 0usize;
    loop {
        let (labels, templates) = tally(&planted);
        let missing_label = MOD_LABELS.iter().find(|l| labels.get(**l).copied().unwrap_or(0) < coverage_min);
        let missing_template = (0..TEMPLATES.len()).find(|&t| templates[t] < coverage_min);
        let (st, rng) = &mut states[top_up % n_docs];
        let m = match (missing_label, missing_template) {
            (Some(&label), _) if label == "IsCount" => Measurement { template: 8, pattern: 0, qualifier: None },
            (Some(&label), _) => {
                let pattern = PATTERNS.iter().position(|p| *p == label).unwrap();
                Measurement { template: 0, pattern, qualifier: None }
            }
            (None, Some(t)) => {
                let pattern = if TEMPLATES[t].1 == Slots::Count { 0 } else { weighted(rng, &ctx.pattern_weights) };
                Measurement { template: t, pattern, qualifier: None }
            }
            (None, None) => break,
        };
        planted.push(plant(&ctx, rng, st, &m));
        top_up += 1;
    }

    let mut docs = Vec::with_capacity(n_docs);
    let mut distinct = alloc::collections::BTreeSet::new();
    for (mut st, _) in states {
        st.entry.doc.text = st.builder.text;
        st.entry.relations.sort();
        for t in crate::corpus::tokenize(&st.entry.doc) {
            if t.surface.chars().any(|c| c.is_alphabetic()) {
                distinct.insert(t.surface.to_lowercase());
            }
        }
        words_total += st.entry.doc.text.split_whitespace().count();
        docs.push(st.entry);
    }
    let corpus = Corpus::new(docs);
    debug_assert!(corpus.validate().is_ok());

    let (label_counts, template_counts) = tally(&planted);
    let quantities = planted.len();
    let label_proportions = MOD_LABELS
        .iter()
        .map(|l| (l.to_string(), label_counts.get(*l).copied().unwrap_or(0) as f64 / quantities as f64))
        .collect();
    let coverage_ok = MOD_LABELS.iter().all(|l| label_counts.get(*l).copied().unwrap_or(0) >= coverage_min)
        && template_counts.iter().all(|&c| c >= coverage_min);
    let report = GenerationReport {
        documents: n_docs,
        quantities,
        long_documents: long_docs,
        mean_words: words_total as f64 / n_docs as f64,
        distinct_words: distinct.len(),
        label_counts: label_counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        template_counts,
        label_proportions,
        expected_proportions: spec.expected_proportions(),
        coverage_min,
        coverage_ok,
    };
    Ok((corpus, report))
}

fn tally(planted: &[Planted]) -> (BTreeMap<&str, usize>, Vec<usize>) {
    let mut labels: BTreeMap<&str, usize> = MOD_LABELS.iter().map(|l| (*l, 0)).collect();
    let mut templates = alloc::vec![0usize; TEMPLATES.len()];
    for p in planted {
        templates[p.template] += 1;
        for l in &p.labels {
            if let Some(c) = labels.get_mut(l.as_str()) {
                *c += 1;
            }
        }
    }
    (labels, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn deterministic_and_valid() {
        let spec = GrammarSpec::default();
        let (a, ra) = generate(&spec, 20).unwrap();
        let (b, _) = generate(&spec, 20).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(ra.coverage_ok);
    }

    #[test]
    fn single_document_covers_everything() {
        let (c, r) = generate(&GrammarSpec::default(), 1).unwrap();
        c.validate().unwrap();
        assert!(r.coverage_ok, "{r:?}");
    }

    #[test]
    fn surfaces_token_aligned() {
        let (c, _) = generate(&GrammarSpec::default(), 30).unwrap();
        for d in &c.docs {
            let toks = tokenize(&d.doc);
            for a in &d.annotations {
                assert!(toks.iter().any(|t| t.span.start == a.span.start), "{} {:?}", d.doc.doc_id, a.surface);
                assert!(toks.iter().any(|t| t.span.end == a.span.end), "{} {:?}", d.doc.doc_id, a.surface);
            }
        }
    }

    #[test]
    fn empty_lexicon_is_infeasible() {
        let spec = GrammarSpec { nouns: Vec::new(), ..GrammarSpec::default() };
        assert!(matches!(generate(&spec, 3), Err(SynthError::InfeasibleSpec(_))));
        assert!(generate(&GrammarSpec::default(), 0).is_err());
    }
}
