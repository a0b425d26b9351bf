//! Synthetic generator, JSONL cleaning and the attribute probe.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use mantis::autograd::Tape;
use mantis::datakit::{
    attribute_recall, generate, load_jsonl, parse_jsonl, split_of, to_jsonl, write_jsonl, Scope, Split, SynthSpec, GENDERS, MATERIALS,
    PATTERNS, SHAPES, SIZES,
};
use mantis::metrics::tokenize;
use mantis::params::{Binding, ParamStore};
use mantis::trainer::{adamw_step, AdamState, TrainConfig};
use mantis::vision::{ImageInput, ImageProjector, VisionConfig};
use mantis::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn generation_is_deterministic() {
    let spec = SynthSpec::new(40, 7);
    assert_eq!(to_jsonl(&generate(&spec).unwrap()).unwrap(), to_jsonl(&generate(&spec).unwrap()).unwrap());
    let other = to_jsonl(&generate(&SynthSpec::new(40, 8)).unwrap()).unwrap();
    assert_ne!(to_jsonl(&generate(&spec).unwrap()).unwrap(), other);
    assert!(generate(&SynthSpec::new(0, 7)).is_err());
}

#[test]
fn sample_contracts() {
    for s in generate(&SynthSpec::new(300, 3)).unwrap() {
        let desc = tokenize(&s.description);
        let name = tokenize(&s.name);
        for (k, v) in &s.attributes {
            assert!(desc.contains(v), "{} missing {k}", s.description);
            let in_name = name.contains(v);
            assert_eq!(in_name, k == "material" || k == "gender", "{}: {k}", s.name);
        }
        assert!((1..=5).contains(&s.images.len()));
        for img in &s.images {
            let ImageInput::Pixels(p) = img else { panic!("pixels expected") };
            assert_eq!((p.width, p.height), (24, 24));
        }
        assert_eq!(attribute_recall(&s.description, &s.attributes, Scope::All).unwrap(), 1.0);
    }
}

#[test]
fn attribute_marginals_are_uniform() {
    let samples = generate(&SynthSpec::new(10_000, 11)).unwrap();
    let pools: [(&str, &[&str]); 5] =
        [("shape", &SHAPES), ("pattern", &PATTERNS), ("size", &SIZES), ("material", &MATERIALS), ("gender", &GENDERS)];
    for (key, pool) in pools {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &samples {
            *counts.entry(s.attributes[key].as_str()).or_default() += 1;
        }
        let expected = samples.len() as f64 / pool.len() as f64;
        for v in pool {
            let c = counts.get(v).copied().unwrap_or(0) as f64;
            assert!((c - expected).abs() <= 0.05 * expected, "{key}={v}: {c} vs {expected}");
        }
    }
}

#[test]
fn splits_are_stable_and_proportioned() {
    let small = generate(&SynthSpec::new(100, 5)).unwrap();
    let big = generate(&SynthSpec::new(5000, 5)).unwrap();
    for (a, b) in small.iter().zip(&big) {
        assert_eq!(a, b);
        assert_eq!(split_of(&a.id), split_of(&b.id));
    }
    let mut counts: HashMap<Split, usize> = HashMap::new();
    for s in &big {
        *counts.entry(split_of(&s.id)).or_default() += 1;
    }
    let frac = |s| counts[&s] as f64 / big.len() as f64;
    assert!((frac(Split::Train) - 0.8).abs() < 0.02);
    assert!((frac(Split::Val) - 0.1).abs() < 0.02);
    assert!((frac(Split::Test) - 0.1).abs() < 0.02);
}

fn rec(id: &str, name: &str, desc: &str, images: &str) -> String {
    format!(r#"{{"id":"{id}","name":"{name}","description":"{desc}","images":{images}}}"#)
}

#[test]
fn cleaning_rules() {
    let px = "[[0,1,1,0]]";
    let lines = [
        rec("a", "silk scarf", "a red scarf", px),
        rec("b", "", "no name", px),
        rec("c", "tote", "", px),
        rec("d", "tote", "no images", "[]"),
        rec("e", "shirt", "a red scarf", px),
        rec("f", "dress", "a blue dress", px),
    ];
    let (samples, stats) = parse_jsonl(&lines.join("\n"), Path::new("mem")).unwrap();
    assert_eq!(samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "f"]);
    assert_eq!((stats.empty_name, stats.empty_description, stats.empty_images, stats.duplicate_description), (1, 1, 1, 1));

    let features = r#"{"id":"g","name":"x","description":"y","image_features":[[0.5,0.25]]}"#;
    let (s, stats) = parse_jsonl(features, Path::new("mem")).unwrap();
    assert_eq!(stats.total(), 0);
    assert_eq!(s[0].images, vec![ImageInput::Features(vec![0.5, 0.25])]);
}

#[test]
fn clean_file_round_trips_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clean.jsonl");
    let samples = generate(&SynthSpec::new(25, 2)).unwrap();
    write_jsonl(&samples, &path).unwrap();
    let (back, stats) = load_jsonl(&path).unwrap();
    assert_eq!(stats.total(), 0);
    assert_eq!(back, samples);
    // loading what was kept changes nothing
    let again = dir.path().join("again.jsonl");
    write_jsonl(&back, &again).unwrap();
    assert_eq!(load_jsonl(&again).unwrap().0, back);
}

#[test]
fn malformed_lines_name_their_line() {
    let text = format!("{}\n{{not json\n", rec("a", "n", "d", "[[1]]"));
    match parse_jsonl(&text, Path::new("x.jsonl")) {
        Err(Error::Data { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected data error, got {other:?}"),
    }
    let text = rec("a", "n", "d", "[[1,0,1]]");
    assert!(matches!(parse_jsonl(&text, Path::new("x")), Err(Error::Data { line: 1, .. })));
}

#[test]
fn attribute_recall_examples() {
    let attrs: BTreeMap<String, String> =
        [("shape", "circle"), ("pattern", "striped"), ("size", "large"), ("material", "silk"), ("gender", "womens")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
    assert_eq!(attribute_recall("", &attrs, Scope::ImageOnly).unwrap(), 0.0);
    assert_eq!(attribute_recall("a large Circle.", &attrs, Scope::ImageOnly).unwrap(), 2.0 / 3.0);
    assert_eq!(attribute_recall("a circle for mens", &attrs, Scope::ImageOnly).unwrap(), 1.0 / 3.0);
    assert_eq!(attribute_recall("for mens", &attrs, Scope::NameOnly).unwrap(), 0.0);
    assert_eq!(attribute_recall("womens silk", &attrs, Scope::NameOnly).unwrap(), 1.0);
    assert!(attribute_recall("x", &BTreeMap::new(), Scope::All).is_err());
}

/// A small conv classifier recovers the shape from a single view, so the
/// image-only attributes are learnable.
#[test]
fn shape_probe_classifier() {
    let train = generate(&SynthSpec::new(1000, 21)).unwrap();
    let test = generate(&SynthSpec::new(1000, 22)).unwrap();
    let label = |s: &mantis::datakit::Sample| SHAPES.iter().position(|x| *x == s.attributes["shape"]).unwrap();
    let mut store = ParamStore::<f32>::new();
    let cfg = VisionConfig { image_size: 24, channels: [16, 32], out_dim: SHAPES.len(), proj_bias: true };
    let probe = ImageProjector::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1));
    let tc = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut state = AdamState::new(&store);
    for epoch in 0..60 {
        for chunk in train.chunks(25) {
            let imgs: Vec<&ImageInput> = chunk.iter().map(|s| &s.images[(epoch) % s.images.len()]).collect();
            let targets: Vec<usize> = chunk.iter().map(label).collect();
            let mut tape = Tape::new();
            let mut bind = Binding::new(&store);
            let logits = probe.encode_on_tape(&mut tape, &mut bind, &store, &imgs).unwrap();
            let loss = tape.masked_cross_entropy(logits, &targets, &vec![true; targets.len()]).unwrap();
            let grads = tape.backward(loss).unwrap();
            store.zero_grads();
            store.accumulate(&grads, &bind);
            adamw_step(&mut store, &mut state, 3e-3, &tc).unwrap();
        }
    }
    let mut correct = 0;
    for s in &test {
        let out = probe.encode_image(&store, &s.images[0]).unwrap();
        let pred = out.data().iter().enumerate().fold(0, |b, (i, v)| if *v > out.data()[b] { i } else { b });
        correct += (pred == label(s)) as usize;
    }
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.99, "probe accuracy {acc}");
}
