#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use takit::bench::Category;
use takit::records::{to_line, AnnotationRecord, EngineRecord, RawItem};
use takit::rng::Pcg32;

pub const NOISE_PROFILE: &str =
    r#"{"recall": 0.6069, "precision": 0.8072, "cer": 0.3923, "e_del_hat": 0.7256, "e_ins_hat": 0.2744}"#;

const WORDS: &[&str] = &[
    "EXIT", "Total", "价格", "Open 24h", "No.7", "café", "SALE", "収据", "Room 101", "Qty: 3", "北京", "INVOICE",
];

pub fn takit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_takit"))
}

pub fn run(args: &[&str]) -> Output {
    let out = takit().args(args).output().expect("spawn takit");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Non-overlapping boxes laid out on a grid with random sizes.
fn grid_items(rng: &mut Pcg32, w: u32, h: u32, n: usize) -> Vec<RawItem> {
    let cols = 4usize;
    let cell_w = w as f64 / cols as f64;
    let cell_h = h as f64 / n.div_ceil(cols).max(1) as f64;
    (0..n)
        .map(|i| {
            let (cx, cy) = ((i % cols) as f64 * cell_w, (i / cols) as f64 * cell_h);
            let bw = cell_w * rng.uniform(0.4, 0.9);
            let bh = cell_h * rng.uniform(0.3, 0.8);
            let x0 = cx + rng.uniform(0.0, cell_w - bw);
            let y0 = cy + rng.uniform(0.0, cell_h - bh);
            let text = format!("{} {}", WORDS[rng.below_usize(WORDS.len())], rng.below(1000));
            RawItem {
                bbox: [x0.round(), y0.round(), (x0 + bw).round(), (y0 + bh).round()],
                text,
            }
        })
        .collect()
}

pub fn write_pool(path: &Path, images: usize, seed: u64) {
    let mut rng = Pcg32::seed_from(seed);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).unwrap());
    for i in 0..images {
        let cat = Category::ALL[i % Category::ALL.len()];
        let (w, h) = (640 + 32 * rng.below(10) as u32, 480 + 16 * rng.below(10) as u32);
        let n = 1 + rng.below_usize(8);
        let mut items = grid_items(&mut rng, w, h, n);
        if n > 2 {
            // repeated transcript so multi-target queries exist
            items[1].text = items[0].text.clone();
        }
        let rec = AnnotationRecord {
            image: format!("img{i:05}.jpg"),
            width: w,
            height: h,
            category: cat.to_string(),
            source: if cat == Category::SceneText {
                "scene".into()
            } else {
                "document".into()
            },
            items,
        };
        f.write_all(to_line(&rec).as_bytes()).unwrap();
    }
}

/// Two engine files over the same images. Engine B sees most of engine A's
/// items with small box offsets, misreads some and misses others.
pub fn write_engines(dir: &Path, images: usize, per_image: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (pa, pb) = (dir.join("engine_a.jsonl"), dir.join("engine_b.jsonl"));
    let mut rng = Pcg32::seed_from(seed);
    let mut fa = std::io::BufWriter::new(std::fs::File::create(&pa).unwrap());
    let mut fb = std::io::BufWriter::new(std::fs::File::create(&pb).unwrap());
    for i in 0..images {
        let (w, h) = (1024, 768);
        let a = grid_items(&mut rng, w, h, per_image);
        let mut b = Vec::new();
        for it in &a {
            let r = rng.next_f64();
            if r < 0.05 {
                continue;
            }
            let d = rng.uniform(-2.0, 2.0);
            let mut bbox = it.bbox;
            bbox[0] = (bbox[0] + d).max(0.0);
            bbox[2] = (bbox[2] + d).min(w as f64);
            let text = if r < 0.15 {
                format!("{}x", it.text)
            } else {
                it.text.clone()
            };
            b.push(RawItem { bbox, text });
        }
        let image = format!("scene{i:06}.jpg");
        let ra = EngineRecord {
            image: image.clone(),
            width: w,
            height: h,
            items: a,
        };
        let rb = EngineRecord {
            image,
            width: w,
            height: h,
            items: b,
        };
        fa.write_all(to_line(&ra).as_bytes()).unwrap();
        fb.write_all(to_line(&rb).as_bytes()).unwrap();
    }
    (pa, pb)
}
