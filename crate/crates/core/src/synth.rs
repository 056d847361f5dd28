//! Deterministic synthetic corpora: toy "scans" with a modality texture,
//! organ silhouette and optional nodule; colored shapes standing in for
//! general images; medical and general text; and the benchmark sets used
//! by the reproduction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_manifest, CorpusError, DatasetManifest, Domain, Image, ImageCaptionSample, ImageRef, Language, QuestionKind, Sample,
    Task, TextRecord, VqaSample,
};

pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Ct,
    Mri,
    Xray,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ct, Modality::Mri, Modality::Xray];

    /// Class descriptor and short answer.
    pub fn name(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Mri => "mri",
            Modality::Xray => "x-ray",
        }
    }

    fn phrases(self) -> &'static [&'static str] {
        match self {
            Modality::Ct => &["ct scan", "axial ct image", "contrast ct slice"],
            Modality::Mri => &["mri scan", "t2 weighted mri", "axial mri slice"],
            Modality::Xray => &["x-ray", "plain x-ray film", "frontal x-ray"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Organ {
    Lung,
    Brain,
    Liver,
}

impl Organ {
    pub const ALL: [Organ; 3] = [Organ::Lung, Organ::Brain, Organ::Liver];

    pub fn name(self) -> &'static str {
        match self {
            Organ::Lung => "lung",
            Organ::Brain => "brain",
            Organ::Liver => "liver",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Nodule {
    None,
    Left,
    Right,
}

impl Nodule {
    pub const ALL: [Nodule; 3] = [Nodule::None, Nodule::Left, Nodule::Right];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ScanAttrs {
    pub modality: Modality,
    pub organ: Organ,
    pub nodule: Nodule,
}

impl ScanAttrs {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            modality: *Modality::ALL.choose(rng).unwrap(),
            organ: *Organ::ALL.choose(rng).unwrap(),
            nodule: *Nodule::ALL.choose(rng).unwrap(),
        }
    }

    /// Every combination in a fixed order.
    pub fn all() -> Vec<ScanAttrs> {
        let mut out = Vec::new();
        for modality in Modality::ALL {
            for organ in Organ::ALL {
                for nodule in Nodule::ALL {
                    out.push(ScanAttrs { modality, organ, nodule });
                }
            }
        }
        out
    }
}

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn organ_mask(organ: Organ, x: f64, y: f64) -> bool {
    match organ {
        Organ::Lung => inside_ellipse(x, y, 10.0, 16.0, 5.0, 10.0) || inside_ellipse(x, y, 22.0, 16.0, 5.0, 10.0),
        Organ::Brain => inside_ellipse(x, y, 16.0, 16.0, 12.0, 10.5),
        Organ::Liver => inside_ellipse(x, y, 18.0, 19.0, 11.0, 7.0),
    }
}

pub fn render_scan(attrs: ScanAttrs, rng: &mut impl Rng) -> Image {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, 0.0);
    let background = match attrs.modality {
        Modality::Xray => 0.25,
        _ => 0.02,
    };
    let nodule_y = rng.random_range(12.0..20.0);
    let nodule_x = match attrs.nodule {
        Nodule::Left => Some(rng.random_range(8.0..11.0)),
        Nodule::Right => Some(rng.random_range(21.0..24.0)),
        Nodule::None => None,
    };
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = if organ_mask(attrs.organ, fx, fy) {
                match attrs.modality {
                    Modality::Ct => 0.55,
                    Modality::Mri => 0.35 + 0.25 * (fx * 0.9).sin(),
                    Modality::Xray => 0.85 - 0.01 * (fy - 16.0).abs(),
                }
            } else {
                background
            };
            if let Some(nx) = nodule_x {
                if (fx - nx).powi(2) + (fy - nodule_y).powi(2) <= 5.0 {
                    v = 1.0;
                }
            }
            v += rng.random_range(-0.03..0.03);
            let v = v.clamp(0.0, 1.0);
            img.set_pixel(x, y, [v, v, v]);
        }
    }
    img
}

fn finding(attrs: ScanAttrs, rng: &mut impl Rng) -> String {
    let organ = attrs.organ.name();
    let side = match attrs.nodule {
        Nodule::None => {
            return ["with no visible nodule", "showing no focal lesion", "without a nodule"]
                .choose(rng)
                .unwrap()
                .to_string()
        }
        Nodule::Left => "left",
        Nodule::Right => "right",
    };
    let size = rng.random_range(3..15);
    match rng.random_range(0..3) {
        0 => format!("with a {size} mm nodule on the {side}"),
        1 => format!("showing a {size} mm lesion in the {side} {organ}"),
        _ => format!("with a small bright nodule on the {side} side"),
    }
}

const CAPTION_TAILS: [&str; 6] = [
    "the surrounding tissue looks normal.",
    "no other abnormality is seen.",
    "image quality is adequate for review.",
    "clinical correlation is advised.",
    "comparison with prior imaging is suggested.",
    "margins are well defined.",
];

pub fn scan_caption(attrs: ScanAttrs, rng: &mut impl Rng) -> String {
    let lead = attrs.modality.phrases().choose(rng).unwrap();
    format!(
        "{lead} of the {} {}. {}",
        attrs.organ.name(),
        finding(attrs, rng),
        CAPTION_TAILS.choose(rng).unwrap()
    )
}

/// Short caption that is a pure function of the attributes.
pub fn canonical_caption(attrs: ScanAttrs) -> String {
    let finding = match attrs.nodule {
        Nodule::None => "no nodule".to_string(),
        Nodule::Left => "a nodule on the left".to_string(),
        Nodule::Right => "a nodule on the right".to_string(),
    };
    format!("{} of the {} with {finding}.", attrs.modality.name(), attrs.organ.name())
}

/// Question-answer pairs about a scan.
pub fn scan_questions(attrs: ScanAttrs, rng: &mut impl Rng) -> Vec<(String, String, QuestionKind)> {
    let yn = |b: bool| if b { "yes" } else { "no" }.to_string();
    let probe = *Modality::ALL.choose(rng).unwrap();
    let mut qs = vec![
        ("what modality is this image?".into(), attrs.modality.name().into(), QuestionKind::Open),
        ("which organ is shown?".into(), attrs.organ.name().into(), QuestionKind::Open),
        ("is there a nodule?".into(), yn(attrs.nodule != Nodule::None), QuestionKind::Closed),
        (
            format!("is this a {} image?", probe.name()),
            yn(probe == attrs.modality),
            QuestionKind::Closed,
        ),
    ];
    match attrs.nodule {
        Nodule::Left => qs.push(("on which side is the nodule?".into(), "left".into(), QuestionKind::Open)),
        Nodule::Right => qs.push(("on which side is the nodule?".into(), "right".into(), QuestionKind::Open)),
        Nodule::None => {}
    }
    qs
}

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.75, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeAttrs {
    pub color: usize,
    pub shape: usize,
    pub large: bool,
}

impl ShapeAttrs {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            color: rng.random_range(0..COLORS.len()),
            shape: rng.random_range(0..SHAPES.len()),
            large: rng.random(),
        }
    }

    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    pub fn shape_name(&self) -> &'static str {
        SHAPES[self.shape]
    }
}

pub fn render_shape(attrs: ShapeAttrs, rng: &mut impl Rng) -> Image {
    let mut img = Image::filled(IMAGE_SIZE, IMAGE_SIZE, 0.5);
    let r = if attrs.large { 10.0 } else { 6.0 };
    let cx = 16.0 + rng.random_range(-4.0..4.0);
    let cy = 16.0 + rng.random_range(-4.0..4.0);
    let rgb = COLORS[attrs.color].1;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match attrs.shape {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
                _ => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
            };
            let n = rng.random_range(-0.03..0.03);
            let px = if inside { rgb } else { [0.5, 0.5, 0.5] };
            img.set_pixel(x, y, px.map(|c| (c + n).clamp(0.0, 1.0)));
        }
    }
    img
}

pub fn shape_caption(attrs: ShapeAttrs, rng: &mut impl Rng) -> String {
    let size = if attrs.large { "large" } else { "small" };
    let tails = [
        "on a plain gray background.",
        "drawn in the middle of a gray square.",
        "with nothing else in the picture.",
        "seen against a flat gray backdrop.",
    ];
    format!("a {size} {} {} {}", attrs.color_name(), attrs.shape_name(), tails.choose(rng).unwrap())
}

pub fn shape_questions(attrs: ShapeAttrs, rng: &mut impl Rng) -> Vec<(String, String, QuestionKind)> {
    let probe = COLORS.choose(rng).unwrap().0;
    vec![
        ("what color is the shape?".into(), attrs.color_name().into(), QuestionKind::Open),
        ("what shape is shown?".into(), attrs.shape_name().into(), QuestionKind::Open),
        (
            format!("is the shape {probe}?"),
            if probe == attrs.color_name() { "yes" } else { "no" }.into(),
            QuestionKind::Closed,
        ),
    ]
}

struct Disease {
    name: &'static str,
    zh: &'static str,
    organ: Organ,
    symptoms: [&'static str; 3],
    treatment: &'static str,
}

const DISEASES: [Disease; 9] = [
    Disease { name: "pneumonia", zh: "肺炎", organ: Organ::Lung, symptoms: ["cough", "fever", "chest pain"], treatment: "antibiotics" },
    Disease { name: "asthma", zh: "哮喘", organ: Organ::Lung, symptoms: ["wheezing", "shortness of breath", "cough"], treatment: "inhaled steroids" },
    Disease { name: "tuberculosis", zh: "肺结核", organ: Organ::Lung, symptoms: ["night sweats", "weight loss", "cough"], treatment: "a long course of antibiotics" },
    Disease { name: "stroke", zh: "中风", organ: Organ::Brain, symptoms: ["weakness", "slurred speech", "facial droop"], treatment: "rapid thrombolysis" },
    Disease { name: "migraine", zh: "偏头痛", organ: Organ::Brain, symptoms: ["headache", "nausea", "light sensitivity"], treatment: "pain relief and rest" },
    Disease { name: "epilepsy", zh: "癫痫", organ: Organ::Brain, symptoms: ["seizures", "confusion", "staring spells"], treatment: "anticonvulsant drugs" },
    Disease { name: "hepatitis", zh: "肝炎", organ: Organ::Liver, symptoms: ["jaundice", "fatigue", "abdominal pain"], treatment: "antiviral therapy" },
    Disease { name: "cirrhosis", zh: "肝硬化", organ: Organ::Liver, symptoms: ["swelling", "fatigue", "easy bruising"], treatment: "treating the underlying cause" },
    Disease { name: "fatty liver", zh: "脂肪肝", organ: Organ::Liver, symptoms: ["fatigue", "mild discomfort", "abdominal pain"], treatment: "weight loss and exercise" },
];

fn zh_sentence(d: &Disease, rng: &mut impl Rng) -> String {
    let organ = match d.organ {
        Organ::Lung => "肺",
        Organ::Brain => "脑",
        Organ::Liver => "肝",
    };
    let extra = ["患者应及时就医。", "早期诊断很重要。", "需要定期复查。", "医生会根据病情调整治疗方案。"]
        .choose(rng)
        .unwrap();
    format!("{}是一种影响{organ}的疾病，{extra}", d.zh)
}

fn en_sentence(d: &Disease, rng: &mut impl Rng) -> String {
    let s = d.symptoms.choose_multiple(rng, 2).cloned().collect::<Vec<_>>();
    let organ = d.organ.name();
    let n = rng.random_range(20..900);
    let options = [
        format!("{} is a disease of the {organ}.", d.name),
        format!("{} mainly affects the {organ}.", d.name),
        format!("common symptoms of {} include {} and {}.", d.name, s[0], s[1]),
        format!("{} often presents with {} and {}.", d.name, s[0], s[1]),
        format!("for {}, treatment usually involves {}.", d.name, d.treatment),
        format!("in a review of {n} patients with {}, most responded to {}.", d.name, d.treatment),
        format!("a clinic reported {n} new cases of {} last year.", d.name),
        format!("imaging of the {organ} helps confirm {} when {} persists.", d.name, s[0]),
    ];
    options.choose(rng).unwrap().clone()
}

/// A multi-sentence paragraph, mostly English, occasionally Chinese.
fn medical_paragraph(rng: &mut impl Rng) -> (String, Language) {
    if rng.random_bool(0.1) {
        let n = rng.random_range(10..14);
        let text: String = (0..n).map(|_| zh_sentence(DISEASES.choose(rng).unwrap(), rng)).collect();
        return (text, Language::Zh);
    }
    let n = rng.random_range(4..7);
    let text = (0..n)
        .map(|_| en_sentence(DISEASES.choose(rng).unwrap(), rng))
        .collect::<Vec<_>>()
        .join(" ");
    (text, Language::En)
}

fn general_sentence(rng: &mut impl Rng) -> String {
    let subjects = ["the dog", "a small cat", "my neighbor", "the teacher", "a young boy", "the old man", "our team", "the artist"];
    let verbs = ["walks to", "looks at", "paints", "cleans", "visits", "builds", "reads about", "waits near"];
    let objects = ["the park", "a red car", "the river", "a tall tree", "the market", "a wooden house", "the library", "a blue boat"];
    let times = ["every morning", "after lunch", "on sunday", "in the evening", "before school", "during the rain"];
    let second = ["it is a quiet day.", "the weather is warm.", "everyone seems happy.", "the street is busy.", "birds sing nearby."];
    format!(
        "{} {} {} {}. {}",
        subjects.choose(rng).unwrap(),
        verbs.choose(rng).unwrap(),
        objects.choose(rng).unwrap(),
        times.choose(rng).unwrap(),
        second.choose(rng).unwrap()
    )
}

/// Medical text corpus with duplicates, near duplicates, personal data,
/// math and noise mixed in, as curation input.
pub fn medical_text_corpus(n: usize, seed: u64) -> Vec<TextRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<TextRecord> = Vec::with_capacity(n);
    for i in 0..n {
        let roll = rng.random_range(0..100);
        let earlier = |rng: &mut ChaCha8Rng| out[rng.random_range(0..out.len())].clone();
        let (text, language) = if roll < 6 && !out.is_empty() {
            // Case and spacing variant of an earlier record.
            let src: TextRecord = earlier(&mut rng);
            (src.text.to_uppercase().replace(' ', "  "), src.language)
        } else if roll < 10 && !out.is_empty() {
            let src = earlier(&mut rng);
            (format!("{} see above.", src.text), src.language)
        } else if roll < 13 {
            let (t, _) = medical_paragraph(&mut rng);
            (format!("{t} contact dr. lee at clinic{}@hospital.org for details.", rng.random_range(0..100)), Language::En)
        } else if roll < 15 {
            let (t, _) = medical_paragraph(&mut rng);
            (format!("{t} call 415-555-{:04} to book.", rng.random_range(0..10000)), Language::En)
        } else if roll < 18 {
            let (t, _) = medical_paragraph(&mut rng);
            (format!("{t} dose = {} mg/kg * weight, repeated twice daily.", rng.random_range(1..20)), Language::En)
        } else if roll < 20 {
            let noise: String = (0..300).map(|_| *b"#%&@~|{}<>^$".choose(&mut rng).unwrap() as char).collect();
            (noise, Language::En)
        } else if roll < 24 {
            let (t, l) = medical_paragraph(&mut rng);
            let cut: String = t.chars().take(rng.random_range(40..200)).collect();
            (cut, l)
        } else {
            medical_paragraph(&mut rng)
        };
        out.push(TextRecord {
            id: format!("medtext-{i:04}"),
            text,
            language,
            source: "synthetic-medical".into(),
            domain: Domain::Medical,
        });
    }
    out
}

pub fn general_text_corpus(n: usize, seed: u64) -> Vec<TextRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TextRecord {
            id: format!("gentext-{i:04}"),
            text: general_sentence(&mut rng),
            language: Language::En,
            source: "synthetic-general".into(),
            domain: Domain::General,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSizes {
    pub medical_text: usize,
    pub general_text: usize,
    pub medical_captions: usize,
    pub general_captions: usize,
    pub medical_vqa_images: usize,
    pub general_vqa_images: usize,
    pub eval_images: usize,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        Self {
            medical_text: 1000,
            general_text: 400,
            medical_captions: 320,
            general_captions: 300,
            medical_vqa_images: 40,
            general_vqa_images: 60,
            eval_images: 30,
        }
    }
}

/// Manifest paths of a fixture set, keyed by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureSet {
    pub manifests: BTreeMap<String, PathBuf>,
}

struct Writer<'a> {
    dir: &'a Path,
    count: usize,
}

impl Writer<'_> {
    fn image(&mut self, prefix: &str, img: &Image) -> Result<ImageRef, CorpusError> {
        let rel = PathBuf::from("images").join(format!("{prefix}-{:04}.png", self.count));
        self.count += 1;
        img.save_png(&self.dir.join(&rel))?;
        Ok(ImageRef {
            path: rel,
            width: img.width(),
            height: img.height(),
        })
    }
}

fn vqa_record(id: String, image: Option<ImageRef>, q: String, a: String, kind: QuestionKind, domain: Domain) -> Sample {
    Sample::Vqa(VqaSample {
        id,
        image,
        question: q,
        answer: a,
        question_kind: kind,
        options: None,
        domain,
    })
}

/// Writes the full toy fixture set under `dir` (manifests at the top,
/// images in `images/`).
pub fn write_toy_fixtures(dir: &Path, seed: u64, sizes: &FixtureSizes) -> Result<FixtureSet, CorpusError> {
    fs::create_dir_all(dir.join("images"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Writer { dir, count: 0 };
    let mut set = FixtureSet::default();
    let mut emit = |name: &str, task: Task, records: Vec<Sample>| -> Result<(), CorpusError> {
        let path = dir.join(format!("{name}.jsonl"));
        write_manifest(&DatasetManifest::new(name, task, records).with_base_dir(dir), &path)?;
        set.manifests.insert(name.to_string(), path);
        Ok(())
    };

    let text = |v: Vec<TextRecord>| v.into_iter().map(Sample::Text).collect::<Vec<_>>();
    emit("medical_text", Task::Text, text(medical_text_corpus(sizes.medical_text, seed ^ 0x11)))?;
    emit("general_text", Task::Text, text(general_text_corpus(sizes.general_text, seed ^ 0x22)))?;

    let mut caps = Vec::new();
    for i in 0..sizes.medical_captions {
        let a = ScanAttrs::random(&mut rng);
        let image = w.image("med", &render_scan(a, &mut rng))?;
        let caption = if i % 40 == 39 {
            format!("{} window level = 40, width = 400.", scan_caption(a, &mut rng))
        } else {
            scan_caption(a, &mut rng)
        };
        caps.push(Sample::Caption(ImageCaptionSample {
            id: format!("medcap-{i:04}"),
            image,
            caption,
            language: Language::En,
            domain: Domain::Medical,
        }));
    }
    emit("medical_captions", Task::Captioning, caps)?;

    let mut caps = Vec::new();
    for i in 0..sizes.general_captions {
        let a = ShapeAttrs::random(&mut rng);
        let image = w.image("gen", &render_shape(a, &mut rng))?;
        caps.push(Sample::Caption(ImageCaptionSample {
            id: format!("gencap-{i:04}"),
            image,
            caption: shape_caption(a, &mut rng),
            language: Language::En,
            domain: Domain::General,
        }));
    }
    emit("general_captions", Task::Captioning, caps)?;

    let scan_vqa = |w: &mut Writer, rng: &mut ChaCha8Rng, prefix: &str, n: usize| -> Result<Vec<Sample>, CorpusError> {
        let mut out = Vec::new();
        for i in 0..n {
            let a = ScanAttrs::random(rng);
            let image = w.image("medq", &render_scan(a, rng))?;
            for (j, (q, ans, kind)) in scan_questions(a, rng).into_iter().enumerate() {
                out.push(vqa_record(format!("{prefix}-{i:04}-{j}"), Some(image.clone()), q, ans, kind, Domain::Medical));
            }
        }
        Ok(out)
    };
    let shape_vqa = |w: &mut Writer, rng: &mut ChaCha8Rng, prefix: &str, n: usize| -> Result<Vec<Sample>, CorpusError> {
        let mut out = Vec::new();
        for i in 0..n {
            let a = ShapeAttrs::random(rng);
            let image = w.image("genq", &render_shape(a, rng))?;
            for (j, (q, ans, kind)) in shape_questions(a, rng).into_iter().enumerate() {
                out.push(vqa_record(format!("{prefix}-{i:04}-{j}"), Some(image.clone()), q, ans, kind, Domain::General));
            }
        }
        Ok(out)
    };
    let v = scan_vqa(&mut w, &mut rng, "medvqa", sizes.medical_vqa_images)?;
    emit("medical_vqa", Task::Vqa, v)?;
    let v = shape_vqa(&mut w, &mut rng, "genvqa", sizes.general_vqa_images)?;
    emit("general_vqa", Task::Vqa, v)?;
    let v = scan_vqa(&mut w, &mut rng, "eval-medvqa", sizes.eval_images)?;
    emit("eval_medical_vqa", Task::Vqa, v)?;
    let v = shape_vqa(&mut w, &mut rng, "eval-toygen", sizes.eval_images)?;
    emit("eval_toy_general", Task::Vqa, v)?;

    let classes: Vec<String> = Modality::ALL.iter().map(|m| m.name().to_string()).collect();
    let mut ic = Vec::new();
    for i in 0..sizes.eval_images {
        let a = ScanAttrs {
            modality: Modality::ALL[i % 3],
            ..ScanAttrs::random(&mut rng)
        };
        let image = w.image("ic", &render_scan(a, &mut rng))?;
        ic.push(Sample::Vqa(VqaSample {
            id: format!("eval-ic-{i:04}"),
            image: Some(image),
            question: String::new(),
            answer: a.modality.name().into(),
            question_kind: QuestionKind::Closed,
            options: Some(classes.clone()),
            domain: Domain::Medical,
        }));
    }
    emit("eval_medical_ic", Task::Ic, ic)?;

    let mut qa = Vec::new();
    for (i, d) in DISEASES.iter().enumerate() {
        for organ in Organ::ALL {
            let answer = if organ == d.organ { "yes" } else { "no" };
            qa.push(vqa_record(
                format!("eval-qa-{i}-{}", organ.name()),
                None,
                format!("is {} a disease of the {}?", d.name, organ.name()),
                answer.into(),
                QuestionKind::Closed,
                Domain::Medical,
            ));
        }
    }
    emit("eval_medical_qa", Task::Qa, qa)?;

    let organs: Vec<String> = Organ::ALL.iter().map(|o| o.name().to_string()).collect();
    let mut mcq = Vec::new();
    for (i, d) in DISEASES.iter().enumerate() {
        for (j, q) in [
            format!("which organ does {} mainly affect?", d.name),
            format!("{} is a disease of which organ?", d.name),
        ]
        .into_iter()
        .enumerate()
        {
            mcq.push(Sample::Vqa(VqaSample {
                id: format!("eval-mcq-{i}-{j}"),
                image: None,
                question: q,
                answer: d.organ.name().into(),
                question_kind: QuestionKind::Closed,
                options: Some(organs.clone()),
                domain: Domain::Medical,
            }));
        }
    }
    emit("eval_medical_mcq", Task::Qa, mcq)?;
    Ok(set)
}

/// `n` image-caption pairs with distinct attribute combinations and
/// canonical captions, images written under `dir`.
pub fn overfit_pairs(dir: &Path, n: usize, seed: u64) -> Result<DatasetManifest, CorpusError> {
    fs::create_dir_all(dir.join("images"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut combos = ScanAttrs::all();
    combos.shuffle_with(&mut rng);
    let mut w = Writer { dir, count: 0 };
    let mut records = Vec::with_capacity(n);
    for (i, a) in combos.into_iter().cycle().take(n).enumerate() {
        let image = w.image("overfit", &render_scan(a, &mut rng))?;
        records.push(Sample::Caption(ImageCaptionSample {
            id: format!("overfit-{i:02}"),
            image,
            caption: canonical_caption(a),
            language: Language::En,
            domain: Domain::Medical,
        }));
    }
    Ok(DatasetManifest::new("overfit", Task::Captioning, records).with_base_dir(dir))
}

trait ShuffleWith {
    fn shuffle_with(&mut self, rng: &mut ChaCha8Rng);
}

impl<T> ShuffleWith for Vec<T> {
    fn shuffle_with(&mut self, rng: &mut ChaCha8Rng) {
        use rand::seq::SliceRandom;
        self.shuffle(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;

    #[test]
    fn scans_differ_by_modality_and_nodule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = ScanAttrs {
            modality: Modality::Ct,
            organ: Organ::Lung,
            nodule: Nodule::None,
        };
        let a = render_scan(base, &mut rng);
        let b = render_scan(ScanAttrs { modality: Modality::Xray, ..base }, &mut rng);
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 50.0);
        assert_eq!(a.width(), IMAGE_SIZE);
    }

    #[test]
    fn canonical_captions_are_unique() {
        let caps: std::collections::HashSet<String> = ScanAttrs::all().into_iter().map(canonical_caption).collect();
        assert_eq!(caps.len(), 27);
    }

    #[test]
    fn corpus_is_deterministic() {
        assert_eq!(medical_text_corpus(50, 3), medical_text_corpus(50, 3));
        assert_ne!(medical_text_corpus(50, 3), medical_text_corpus(50, 4));
    }

    #[test]
    fn fixtures_load_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = FixtureSizes {
            medical_text: 30,
            general_text: 10,
            medical_captions: 5,
            general_captions: 5,
            medical_vqa_images: 2,
            general_vqa_images: 2,
            eval_images: 3,
        };
        let set = write_toy_fixtures(dir.path(), 1, &sizes).unwrap();
        for path in set.manifests.values() {
            load_manifest(path).unwrap();
        }
        let ov = overfit_pairs(&dir.path().join("ov"), 16, 0).unwrap();
        ov.validate().unwrap();
        assert_eq!(ov.len(), 16);
    }
}
