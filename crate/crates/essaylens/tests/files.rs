use std::io::Cursor;

use essaylens::config::{Config, Overrides};
use essaylens::container::{load_model, save_model, ModelMeta};
use essaylens::embfile::{read_embedding_file, write_embedding_file};
use essaylens::registry::{resolve_model, Registry};
use essaylens::Error;
use essaylens_core::diagnostics::{random_example, tiny_spec};
use essaylens_core::embeddings::EmbeddedDocument;
use essaylens_core::rng::seeded;
use essaylens_core::scorers::{ModelKind, ScoreModel};

fn doc(id: &str, vectors: Vec<Vec<f64>>) -> EmbeddedDocument {
    EmbeddedDocument {
        id: id.into(),
        sentences: (0..vectors.len()).map(|i| format!("s{} of {}", i, id)).collect(),
        dim: vectors[0].len(),
        vectors,
        provider: "test".into(),
    }
}

#[test]
fn three_documents_round_trip_bit_for_bit() {
    let docs = vec![
        doc("1", vec![vec![0.1, 1.0 / 3.0, -2.5e-300]]),
        doc("2", vec![vec![f64::MIN_POSITIVE, 1e300, -0.0], vec![0.7, 0.2, 1.0 - f64::EPSILON]]),
        doc("passage:3", vec![vec![std::f64::consts::PI, 0.0, 123456.789]]),
    ];
    let mut buf = Vec::new();
    write_embedding_file(&docs, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 3);
    let back = read_embedding_file(Cursor::new(buf)).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in docs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.sentences, b.sentences);
        let bits = |d: &EmbeddedDocument| d.vectors.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn container_round_trip_keeps_predictions() {
    let mut rng = seeded(31);
    for kind in [ModelKind::Mha2, ModelKind::PassageConditioned] {
        let model = ScoreModel::build(tiny_spec(kind), 9).unwrap();
        let meta = ModelMeta {
            provider: Some("hashed-bow:dim=6".into()),
            set_id: Some(3),
            qwk: [(3, 0.75)].into_iter().collect(),
        };
        let bytes = save_model(&model, &meta).unwrap();
        let (back, meta_back) = load_model(&bytes).unwrap();
        assert_eq!(meta_back, meta);
        let passage = kind == ModelKind::PassageConditioned;
        for i in 0..10 {
            let ex = random_example(&mut rng, 2 + i % 5, i % 3, passage);
            assert_eq!(model.predict(&ex.input).unwrap(), back.predict(&ex.input).unwrap());
        }
        // truncation and a stray trailing byte are both rejected
        assert!(load_model(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(load_model(&longer).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 99;
        assert!(matches!(load_model(&wrong), Err(Error::VersionMismatch { found: 99, .. })));
    }
}

#[test]
fn registry_loads_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let models = dir.path().join("models");
    let empty = Registry::load_dir(&models).unwrap();
    assert!(empty.is_empty());

    std::fs::create_dir(&models).unwrap();
    for (name, kind) in [("a", ModelKind::Lstm), ("b", ModelKind::Mha)] {
        let m = ScoreModel::build(tiny_spec(kind), 1).unwrap();
        std::fs::write(models.join(format!("{}.eslm", name)), save_model(&m, &ModelMeta::default()).unwrap()).unwrap();
    }
    std::fs::write(models.join("notes.txt"), "ignored").unwrap();
    let reg = Registry::load_dir(&models).unwrap();
    assert_eq!(reg.len(), 2);
    let ids: Vec<String> = reg.manifests().into_iter().map(|m| m.id).collect();
    assert_eq!(ids, ["a", "b"]);
    assert!(matches!(reg.get("c"), Err(Error::ModelNotFound(_))));
    assert_eq!(resolve_model("b", &models).unwrap().id, "b");
    let by_path = resolve_model(models.join("a.eslm").to_str().unwrap(), dir.path()).unwrap();
    assert_eq!(by_path.model.spec.kind, ModelKind::Lstm);

    std::fs::write(models.join("broken.eslm"), b"ESLM").unwrap();
    assert!(Registry::load_dir(&models).is_err());
}

#[test]
fn config_layers() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.json");
    std::fs::write(&file, r#"{"port": 9000, "provider": "hashed-bow:dim=32", "tau": 0.5}"#).unwrap();
    let none: [(&str, &str); 0] = [];
    let c = Config::load(Some(&file), none, &Overrides::default()).unwrap();
    assert_eq!((c.port, c.tau, c.seed), (9000, 0.5, 42));
    let env = [("ESSAYLENS_PORT", "9100"), ("ESSAYLENS_SEED", "3"), ("HOME", "/x")];
    let c = Config::load(Some(&file), env, &Overrides::default()).unwrap();
    assert_eq!((c.port, c.seed), (9100, 3));
    let flags = Overrides {
        port: Some(9200),
        ..Overrides::default()
    };
    let c = Config::load(Some(&file), env, &flags).unwrap();
    assert_eq!(c.port, 9200);
    let via_env = [("ESSAYLENS_CONFIG", file.to_str().unwrap())];
    assert_eq!(Config::load(None, via_env, &Overrides::default()).unwrap().port, 9000);

    std::fs::write(&file, r#"{"prot": 1}"#).unwrap();
    assert!(matches!(Config::load(Some(&file), none, &Overrides::default()), Err(Error::Config(_))));
    assert!(Config::load(None, [("ESSAYLENS_TAU", "1.0")], &Overrides::default()).is_err());
}
