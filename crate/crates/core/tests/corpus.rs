use cartal_core::corpus::{read_corpus, read_index, write_corpus, SplitTag, INDEX_FILE};
use cartal_core::synthdata::{generate, split, ClassCounts, CorpusSpec, TileClass};

fn spec() -> CorpusSpec {
    CorpusSpec {
        changed: 6,
        unchanged: 10,
        ignored: 2,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let tiles = generate(&spec()).unwrap();
    let (initial, test) = (ClassCounts::new(1, 2), ClassCounts::new(2, 3));
    let index = write_corpus(dir.path(), &tiles, Some(&spec()), initial, test, 9).unwrap();
    assert_eq!(read_index(dir.path()).unwrap(), index);

    let corpus = read_corpus(dir.path()).unwrap();
    assert_eq!(corpus.tiles.len(), tiles.len());
    for (a, b) in tiles.iter().zip(&corpus.tiles) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.mask, b.mask);
        for (x, y) in
            a.t0.data()
                .iter()
                .chain(a.t1.data())
                .zip(b.t0.data().iter().chain(b.t1.data()))
        {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    let expect = split(&tiles, initial, test, 9).unwrap();
    let got = corpus.tagged_split();
    let ids = |v: &[cartal_core::synthdata::TilePair]| v.iter().map(|t| t.id).collect::<Vec<_>>();
    assert_eq!(ids(&got.initial), ids(&expect.initial));
    assert_eq!(ids(&got.pool), ids(&expect.pool));
    assert_eq!(ids(&got.test), ids(&expect.test));
    for e in &index.tiles {
        assert_eq!(e.split == SplitTag::Excluded, e.class == TileClass::Ignored);
    }
}

#[test]
fn mismatched_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let tiles = generate(&spec()).unwrap();
    write_corpus(
        dir.path(),
        &tiles,
        None,
        ClassCounts::new(1, 1),
        ClassCounts::new(1, 1),
        0,
    )
    .unwrap();
    let path = dir.path().join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(
        &path,
        text.replacen("\"format_version\": 1", "\"format_version\": 7", 1),
    )
    .unwrap();
    assert!(read_index(dir.path()).is_err());

    std::fs::write(&path, &text).unwrap();
    std::fs::remove_file(dir.path().join("mask").join("0.png")).unwrap();
    assert!(read_corpus(dir.path()).is_err());
}
