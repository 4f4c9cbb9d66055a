//! Deterministic synthetic dataset and fixture shared by the CLI test
//! targets, plus brute-force reference implementations.

#![allow(dead_code)]

pub mod reference;

use std::fs;
use std::path::{Path, PathBuf};

use auditor_core::evaluation::{append_verdict, VerdictRecord};
use auditor_core::oracle::{DetectionBox, FixtureWriter, ModelIds};
use auditor_core::patch::ClassMap;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const PERSON: u8 = 6;
pub const BICYCLE: u8 = 7;
pub const NUM_CLASSES: u16 = 8;
pub const JOINT_DIM: usize = 64;
pub const SENTENCE_DIM: usize = 48;
pub const DATASET_ID: &str = "synthetic";
pub const SSM_ID: &str = "fixture-ssm";
pub const PANEL: [&str; 3] = ["ana", "ben", "cho"];

pub fn class_name(index: u8) -> &'static str {
    match index {
        PERSON => "person",
        BICYCLE => "bicycle",
        _ => "other",
    }
}

pub struct ImageSpec {
    pub id: &'static str,
    pub width: u32,
    pub height: u32,
    pub has_gt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Correct prediction the detector confirms.
    True,
    /// Snow mistaken for the class; one shared concept.
    Snow,
    /// Railing mistaken for bicycle; captions close to the class prompt.
    Rail,
    /// Unrelated one-off error.
    Noise,
    /// Correct prediction the detector misses.
    Missed,
    /// Wrong prediction the detector confirms anyway.
    Halluc,
}

pub struct Object {
    pub name: &'static str,
    pub image: usize,
    pub class: u8,
    /// `(x, y, w, h)`.
    pub rect: (u32, u32, u32, u32),
    /// Cut a 12x12 square from the top-right corner of the predicted region.
    pub notch: bool,
    pub role: Role,
    pub scores: &'static [f64],
    pub caption: &'static str,
}

pub const IMAGES: [ImageSpec; 12] = [
    ImageSpec { id: "img00", width: 256, height: 256, has_gt: true },
    ImageSpec { id: "img01", width: 192, height: 192, has_gt: true },
    ImageSpec { id: "img02", width: 224, height: 128, has_gt: true },
    ImageSpec { id: "img03", width: 160, height: 120, has_gt: true },
    ImageSpec { id: "img04", width: 64, height: 64, has_gt: true },
    ImageSpec { id: "img05", width: 200, height: 150, has_gt: true },
    ImageSpec { id: "img06", width: 96, height: 96, has_gt: true },
    ImageSpec { id: "img07", width: 256, height: 128, has_gt: true },
    ImageSpec { id: "img08", width: 128, height: 256, has_gt: true },
    ImageSpec { id: "img09", width: 80, height: 80, has_gt: false },
    ImageSpec { id: "img10", width: 144, height: 144, has_gt: true },
    ImageSpec { id: "img11", width: 224, height: 160, has_gt: true },
];

#[allow(clippy::too_many_arguments)]
const fn obj(
    name: &'static str,
    image: usize,
    class: u8,
    rect: (u32, u32, u32, u32),
    notch: bool,
    role: Role,
    scores: &'static [f64],
    caption: &'static str,
) -> Object {
    Object { name, image, class, rect, notch, role, scores, caption }
}

pub const OBJECTS: [Object; 21] = [
    obj("p_true1", 0, PERSON, (20, 30, 70, 90), true, Role::True, &[0.82], "a woman walking on the street"),
    obj("p_snow1", 0, PERSON, (130, 140, 100, 90), false, Role::Snow, &[0.2], "a pile of white snow"),
    obj("p_true2", 1, PERSON, (100, 40, 62, 80), false, Role::True, &[0.91, 0.4], "a man crossing the road"),
    obj("b_rail1", 1, BICYCLE, (10, 120, 150, 64), false, Role::Rail, &[], "a metal railing next to a bike lane"),
    obj("p_snow2", 2, PERSON, (10, 10, 100, 100), true, Role::Snow, &[], "snow covering the ground"),
    obj("p_snow5", 2, PERSON, (120, 12, 90, 100), false, Role::Snow, &[0.1], "a snowy patch of road"),
    obj("p_noise1", 3, PERSON, (40, 20, 70, 80), false, Role::Noise, &[], "a red fire hydrant"),
    obj("b_small", 3, BICYCLE, (112, 60, 45, 45), false, Role::Noise, &[], "a wooden park bench"),
    obj("p_tiny", 4, PERSON, (5, 5, 30, 30), false, Role::True, &[0.9], "a small child"),
    obj("p_thin", 4, PERSON, (40, 2, 20, 60), false, Role::True, &[0.9], "a person behind a pole"),
    obj("p_snow3", 5, PERSON, (60, 30, 120, 110), false, Role::Snow, &[0.3], "a snow bank by the curb"),
    obj("p_small", 6, PERSON, (10, 10, 50, 50), false, Role::True, &[0.7], "a cyclist in a helmet"),
    obj("p_true3", 7, PERSON, (150, 20, 90, 100), false, Role::True, &[0.6], "two people at a bus stop"),
    obj("b_true1", 7, BICYCLE, (20, 40, 100, 70), false, Role::True, &[0.7], "a parked bicycle"),
    obj("p_missed", 8, PERSON, (30, 100, 70, 120), false, Role::Missed, &[], "a figure in a dark coat"),
    obj("b_cart", 8, BICYCLE, (10, 10, 100, 70), false, Role::Noise, &[], "a shopping cart"),
    obj("p_nogt", 9, PERSON, (8, 6, 66, 68), false, Role::True, &[0.77], "a pedestrian with an umbrella"),
    obj("p_snow4", 10, PERSON, (20, 20, 110, 100), false, Role::Snow, &[], "fresh snow on the pavement"),
    obj("p_halluc", 11, PERSON, (100, 30, 80, 100), false, Role::Halluc, &[0.5], "a shop window display"),
    obj("b_rail2", 11, BICYCLE, (10, 20, 80, 120), true, Role::Rail, &[0.1], "a steel railing beside a bicycle path"),
    obj("b_extra", 4, BICYCLE, (2, 40, 10, 10), false, Role::True, &[0.9], "a bicycle bell"),
];

/// Smallest bbox side any test run uses; smaller objects are never patches.
pub const MIN_AUTHORED: u32 = 40;

impl Object {
    pub fn authored(&self) -> bool {
        self.rect.2 >= MIN_AUTHORED && self.rect.3 >= MIN_AUTHORED
    }

    pub fn bbox(&self) -> (u32, u32, u32, u32) {
        let (x, y, w, h) = self.rect;
        (x, y, x + w, y + h)
    }

    pub fn in_pred(&self, x: u32, y: u32) -> bool {
        let (x0, y0, x1, y1) = self.bbox();
        let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
        inside && !(self.notch && x >= x1 - 12 && y < y0 + 12)
    }

    /// Ground-truth class and rectangle painted under this object.
    pub fn gt(&self) -> (u8, (u32, u32, u32, u32)) {
        let (x, y, w, h) = self.rect;
        match self.role {
            Role::True => (self.class, (x + 2, y, w, h)),
            Role::Missed => (self.class, (x, y, w, h)),
            Role::Snow => (1, (x, y, w, h)),
            Role::Rail | Role::Halluc => (2, (x, y, w, h)),
            Role::Noise if self.class == BICYCLE && self.name == "b_cart" => (BICYCLE, (x, y, w, h)),
            Role::Noise => (5, (x, y, w, h)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Error patches share concepts; systematic errors exist.
    Clustered,
    /// Every patch sits on its own axes; nothing is systematic.
    Dispersed,
}

fn background(y: u32, h: u32) -> u8 {
    if y < h / 3 {
        4
    } else if y < h / 2 {
        3
    } else {
        0
    }
}

pub fn rgb_image(i: usize) -> RgbImage {
    let spec = &IMAGES[i];
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    let mut img = RgbImage::new(spec.width, spec.height);
    for p in img.pixels_mut() {
        p.0 = [rng.gen(), rng.gen(), rng.gen()];
    }
    img
}

pub fn pred_map(i: usize) -> ClassMap {
    let spec = &IMAGES[i];
    let mut m = ClassMap::filled(spec.width, spec.height, 0);
    for y in 0..spec.height {
        for x in 0..spec.width {
            m.set(x, y, background(y, spec.height));
        }
    }
    for o in OBJECTS.iter().filter(|o| o.image == i) {
        let (x0, y0, x1, y1) = o.bbox();
        for y in y0..y1 {
            for x in x0..x1 {
                if o.in_pred(x, y) {
                    m.set(x, y, o.class);
                }
            }
        }
    }
    m
}

pub fn gt_map(i: usize) -> Option<ClassMap> {
    let spec = &IMAGES[i];
    if !spec.has_gt {
        return None;
    }
    let mut m = ClassMap::filled(spec.width, spec.height, 0);
    for y in 0..spec.height {
        for x in 0..spec.width {
            m.set(x, y, background(y, spec.height));
        }
    }
    for o in OBJECTS.iter().filter(|o| o.image == i) {
        let (class, (x, y, w, h)) = o.gt();
        for yy in y..(y + h).min(spec.height) {
            for xx in x..(x + w).min(spec.width) {
                m.set(xx, yy, class);
            }
        }
    }
    Some(m)
}

pub fn crop(img: &RgbImage, o: &Object) -> RgbImage {
    let (x, y, w, h) = o.rect;
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

fn axes(dim: usize, terms: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &(i, w) in terms {
        v[i] += w;
    }
    v
}

/// Authored oracle outputs for one object.
pub struct Vectors {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub sentence: Vec<f64>,
}

pub fn prompt_text(class: u8) -> String {
    format!("the concept of one or many {}", class_name(class))
}

pub fn prompt_vector(class: u8) -> Vec<f64> {
    axes(SENTENCE_DIM, &[(if class == PERSON { 1 } else { 2 }, 1.0)])
}

pub fn object_vectors(variant: Variant, k: usize) -> Vectors {
    let o = &OBJECTS[k];
    if variant == Variant::Dispersed {
        return Vectors {
            image: axes(JOINT_DIM, &[(k, 1.0)]),
            text: axes(JOINT_DIM, &[(32 + k, 1.0)]),
            sentence: axes(SENTENCE_DIM, &[(3 + k, 1.0)]),
        };
    }
    let nth = |role: Role| OBJECTS[..k].iter().filter(|p| p.role == role).count();
    match o.role {
        Role::Snow => {
            let j = nth(Role::Snow);
            Vectors {
                image: axes(JOINT_DIM, &[(0, 1.0), (2 + j, 0.05)]),
                text: axes(JOINT_DIM, &[(0, 1.0), (2 + j, 0.03), (9, 0.02)]),
                sentence: axes(SENTENCE_DIM, &[(0, 1.0), (4 + j, 0.04), (1, 0.1)]),
            }
        }
        Role::Rail => {
            let j = nth(Role::Rail);
            Vectors {
                image: axes(JOINT_DIM, &[(1, 1.0), (7 + j, 0.05)]),
                text: axes(JOINT_DIM, &[(1, 1.0), (7 + j, 0.03)]),
                sentence: axes(SENTENCE_DIM, &[(2, 0.9), (3, 0.35), (9 + j, 0.03)]),
            }
        }
        _ => Vectors {
            image: axes(JOINT_DIM, &[(12 + 2 * k, 1.0)]),
            text: axes(JOINT_DIM, &[(13 + 2 * k, 1.0)]),
            sentence: axes(SENTENCE_DIM, &[(14 + k, 1.0)]),
        },
    }
}

fn boxes(o: &Object) -> Vec<DetectionBox> {
    let (w, h) = (f64::from(o.rect.2), f64::from(o.rect.3));
    o.scores
        .iter()
        .enumerate()
        .map(|(i, &score)| DetectionBox {
            x0: 2.0 + i as f64,
            y0: 2.0,
            x1: w - 2.0,
            y1: h - 2.0 - i as f64,
            score,
            label: class_name(o.class).to_string(),
        })
        .collect()
}

/// A generated dataset on disk: images, maps, manifest and oracle fixture.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub fixture: PathBuf,
    pub variant: Variant,
}

pub fn write_dataset(root: &Path, variant: Variant) -> Dataset {
    for d in ["images", "pred", "gt"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let mut manifest = String::new();
    let images: Vec<RgbImage> = (0..IMAGES.len()).map(rgb_image).collect();
    for (i, spec) in IMAGES.iter().enumerate() {
        images[i].save(root.join(format!("images/{}.png", spec.id))).unwrap();
        pred_map(i).save_png(&root.join(format!("pred/{}.png", spec.id))).unwrap();
        let mut entry = json!({
            "image_id": spec.id,
            "image_path": format!("images/{}.png", spec.id),
            "pred_map_path": format!("pred/{}.png", spec.id),
        });
        if let Some(gt) = gt_map(i) {
            gt.save_png(&root.join(format!("gt/{}.png", spec.id))).unwrap();
            entry["gt_map_path"] = json!(format!("gt/{}.png", spec.id));
        }
        manifest.push_str(&entry.to_string());
        manifest.push('\n');
    }
    let manifest_path = root.join("manifest.jsonl");
    fs::write(&manifest_path, manifest).unwrap();

    let fixture = root.join("fixture");
    let w = FixtureWriter::new(&fixture, ModelIds::default());
    for (k, o) in OBJECTS.iter().enumerate() {
        if !o.authored() {
            continue;
        }
        let c = crop(&images[o.image], o);
        let v = object_vectors(variant, k);
        w.detections(o.name, &c, class_name(o.class), &boxes(o)).unwrap();
        w.image_vector(o.name, &c, &v.image).unwrap();
        w.caption(o.name, &c, o.caption).unwrap();
        w.text_vector(o.caption, &v.text).unwrap();
        w.sentence_vector(o.caption, &v.sentence).unwrap();
    }
    for class in [PERSON, BICYCLE] {
        w.sentence_vector(&prompt_text(class), &prompt_vector(class)).unwrap();
    }
    w.finish(JOINT_DIM, SENTENCE_DIM).unwrap();
    Dataset {
        root: root.to_path_buf(),
        manifest: manifest_path,
        fixture,
        variant,
    }
}

/// A config file for `run_dir` over the dataset.
pub fn write_config(ds: &Dataset, run_dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = json!({
        "manifest_path": ds.manifest,
        "run_dir": run_dir,
        "num_classes": NUM_CLASSES,
        "classes": [
            {"index": PERSON, "name": "person"},
            {"index": BICYCLE, "name": "bicycle"}
        ],
        "oracle": {"mode": "fixture", "fixture_dir": ds.fixture},
        "dataset_id": DATASET_ID,
        "ssm_id": SSM_ID,
        "panel": PANEL,
    });
    if let (Some(base), Some(more)) = (cfg.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            base.insert(k.clone(), v.clone());
        }
    }
    let path = run_dir.with_extension("config.json");
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Panel votes per object name: one entry per evaluator, `None` for no vote.
pub const VOTES: [(&str, [Option<bool>; 3]); 7] = [
    ("p_snow1", [Some(true), Some(true), Some(true)]),
    ("p_snow2", [Some(true), Some(true), Some(false)]),
    ("p_snow3", [Some(true), Some(false), Some(false)]),
    ("p_snow4", [Some(true), Some(true), Some(true)]),
    ("p_snow5", [Some(false), Some(true), Some(true)]),
    ("p_noise1", [Some(false), Some(false), Some(false)]),
    ("p_missed", [Some(false), Some(true), None]),
];

pub fn object_patch_id(o: &Object) -> String {
    let (x0, y0, x1, y1) = o.bbox();
    reference::sha256_hex(format!("{}|{}|{x0},{y0},{x1},{y1}", IMAGES[o.image].id, o.class).as_bytes())
}

pub fn object(name: &str) -> &'static Object {
    OBJECTS.iter().find(|o| o.name == name).expect("known object")
}

/// Writes the scripted panel verdicts into `<run_dir>/verdicts`.
pub fn write_verdicts(run_dir: &Path) {
    let dir = run_dir.join("verdicts");
    for (name, votes) in VOTES {
        let id = object_patch_id(object(name));
        for (e, vote) in PANEL.iter().zip(votes) {
            if let Some(v) = vote {
                let conditions = if v { [true; 3] } else { [true, false, true] };
                append_verdict(&dir, &VerdictRecord::new(&id, *e, conditions, "2024-05-01T12:00:00Z")).unwrap();
            }
        }
    }
}

/// Absolute path of a golden file.
pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}
