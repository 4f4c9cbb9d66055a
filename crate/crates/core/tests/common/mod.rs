//! Small on-disk dataset with a matching fixture oracle.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use auditor_core::oracle::{DetectionBox, FixtureWriter, ModelIds, OracleConfig};
use auditor_core::patch::{ClassMap, SemanticClass};
use auditor_core::pipeline::RunConfig;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PERSON: u8 = 1;

/// `(image, x, y, detected, caption, image axis, sentence axis)`.
const REGIONS: [(usize, u32, u32, bool, &str, usize, usize); 6] = [
    (0, 4, 4, false, "snow on a lawn", 0, 0),
    (0, 50, 50, true, "a jogger", 5, 5),
    (1, 10, 8, false, "snow by the road", 0, 0),
    (2, 40, 6, false, "a snowdrift", 0, 0),
    (2, 2, 52, false, "a traffic cone", 6, 6),
    (3, 30, 30, true, "a man waiting", 7, 7),
];
const SIDE: u32 = 40;
const DIM: usize = 8;

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub fixture: PathBuf,
}

fn image(i: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
    RgbImage::from_fn(96, 96, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

fn axis(i: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    v[(i + 1 + j) % DIM] += 0.05;
    v
}

pub fn write(root: &Path) -> Dataset {
    fs::create_dir_all(root).unwrap();
    let fixture = root.join("fixture");
    let w = FixtureWriter::new(&fixture, ModelIds::default());
    let mut manifest = String::new();
    for i in 0..4 {
        let img = image(i);
        let mut map = ClassMap::filled(96, 96, 0);
        for (j, &(_, x, y, detected, caption, ia, sa)) in REGIONS.iter().enumerate().filter(|r| r.1 .0 == i) {
            for yy in y..y + SIDE {
                for xx in x..x + SIDE {
                    map.set(xx, yy, PERSON);
                }
            }
            let crop = image::imageops::crop_imm(&img, x, y, SIDE, SIDE).to_image();
            let boxes: Vec<DetectionBox> = if detected {
                vec![DetectionBox { x0: 1.0, y0: 1.0, x1: 30.0, y1: 30.0, score: 0.8, label: "person".into() }]
            } else {
                Vec::new()
            };
            w.detections(caption, &crop, "person", &boxes).unwrap();
            w.image_vector(caption, &crop, &axis(ia, j)).unwrap();
            w.caption(caption, &crop, caption).unwrap();
            w.text_vector(caption, &axis(ia, j + 2)).unwrap();
            w.sentence_vector(caption, &axis(sa, j)).unwrap();
        }
        img.save(root.join(format!("img{i}.png"))).unwrap();
        map.save_png(&root.join(format!("pred{i}.png"))).unwrap();
        map.save_png(&root.join(format!("gt{i}.png"))).unwrap();
        manifest.push_str(&format!(
            "{{\"image_id\":\"img{i}\",\"image_path\":\"img{i}.png\",\"pred_map_path\":\"pred{i}.png\",\"gt_map_path\":\"gt{i}.png\"}}\n"
        ));
    }
    w.sentence_vector("the concept of one or many person", &axis(3, 0)).unwrap();
    w.finish(DIM, DIM).unwrap();
    let manifest_path = root.join("manifest.jsonl");
    fs::write(&manifest_path, manifest).unwrap();
    Dataset {
        root: root.to_path_buf(),
        manifest: manifest_path,
        fixture,
    }
}

pub fn config(ds: &Dataset, run_dir: &Path) -> RunConfig {
    RunConfig {
        manifest_path: ds.manifest.clone(),
        run_dir: run_dir.to_path_buf(),
        num_classes: 3,
        classes: vec![SemanticClass::new(PERSON, "person")],
        min_patch_size: 30,
        connectivity: Default::default(),
        oracle: OracleConfig::fixture(&ds.fixture),
        q: 2,
        alpha: 0.35,
        prompt_template: "the concept of one or many {class}".into(),
        sigma1_query: Default::default(),
        dataset_id: "tiny".into(),
        ssm_id: "ssm".into(),
        panel: Vec::new(),
        quorum: None,
        gt_manifest_path: None,
        seed: 0,
    }
}
