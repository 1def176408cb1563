mod common;

use std::fs;
use std::path::Path;

use common::{write_store_bytes, Occ};
use lexprobe::error::Error;
use lexprobe::store::{write_store, Limit, SourceKind, StoreHeader, TokenFlag, TokenStore};

fn occ(flags: &[u8], layers: usize, dim: usize, start: f32) -> Occ {
    let n = layers * flags.len() * dim;
    Occ {
        flags: flags.to_vec(),
        vectors: (0..n).map(|i| start + i as f32 * 0.25).collect(),
    }
}

fn sample(path: &Path) {
    let groups = vec![
        (
            "alpha".to_string(),
            vec![occ(&[1, 0, 0, 2], 2, 3, 0.0), occ(&[0], 2, 3, 100.0)],
        ),
        ("beta".to_string(), vec![occ(&[1, 0], 2, 3, -7.5)]),
    ];
    write_store_bytes(path, "MULTI", 2, 3, &groups);
}

fn header_span(bytes: &[u8]) -> (usize, usize) {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    (16, 16 + len)
}

/// Rewrites the JSON header through `edit` and fixes up its length.
fn edit_header(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
    let bytes = fs::read(path).unwrap();
    let (start, end) = header_span(&bytes);
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[start..end]).unwrap();
    edit(&mut header);
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[end..]);
    fs::write(path, out).unwrap();
}

fn open_err(path: &Path) -> Error {
    TokenStore::open(path).expect_err("store should be rejected")
}

#[test]
fn reads_hand_built_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.lxts");
    sample(&path);
    let store = TokenStore::open(&path).unwrap();
    assert_eq!(store.header().source_kind, SourceKind::Multi);
    assert_eq!((store.num_layers(), store.dim(), store.len()), (2, 3, 2));
    assert_eq!(store.header().export_seed, Some(common::SEED));
    assert_eq!(store.occurrence_count("alpha"), 2);
    assert_eq!(store.occurrence_count("gamma"), 0);

    let alpha = store.read_occurrences("alpha", Limit::All).unwrap();
    assert_eq!(
        alpha[0].flags,
        [TokenFlag::Cls, TokenFlag::Content, TokenFlag::Content, TokenFlag::Sep]
    );
    assert_eq!(alpha[0].subword_count(), 2);
    // layer 1, token 2 starts at (1·4 + 2)·3
    assert_eq!(alpha[0].vector(1, 2), &[4.5, 4.75, 5.0]);
    assert_eq!(alpha[1].vectors[0], 100.0);
    assert_eq!(store.read_occurrences("ALPHA", Limit::First(1)).unwrap(), alpha[..1]);
    assert_eq!(store.read_occurrences("beta", Limit::First(10)).unwrap().len(), 1);
    assert!(matches!(
        store.read_occurrences("gamma", Limit::All),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn writer_output_matches_hand_built_bytes_payload() {
    let dir = tempfile::tempdir().unwrap();
    let (hand, written) = (dir.path().join("hand.lxts"), dir.path().join("written.lxts"));
    sample(&hand);
    let reference = TokenStore::open(&hand).unwrap();
    let records: Vec<_> = ["alpha", "beta"]
        .iter()
        .flat_map(|w| reference.read_occurrences(w, Limit::All).unwrap())
        .collect();
    write_store(
        &written,
        StoreHeader::new("fixture-encoder", SourceKind::Multi, 2, 3),
        &records,
    )
    .unwrap();
    let (a, b) = (fs::read(&hand).unwrap(), fs::read(&written).unwrap());
    assert_eq!(a[..8], b[..8]);
    assert_eq!(a[header_span(&a).1..], b[header_span(&b).1..]);
    let reopened = TokenStore::open(&written).unwrap();
    assert_eq!(reopened.header().index, reference.header().index);
}

#[test]
fn rejects_wrong_version_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.lxts");

    sample(&path);
    let mut bytes = fs::read(&path).unwrap();
    bytes[4] = 2;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(open_err(&path), Error::Format(m) if m.contains("version")));

    sample(&path);
    let mut bytes = fs::read(&path).unwrap();
    bytes[16] = b'#';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(open_err(&path), Error::Format(m) if m.contains("JSON")));

    sample(&path);
    let mut bytes = fs::read(&path).unwrap();
    bytes[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(open_err(&path), Error::Corruption(_)));

    sample(&path);
    edit_header(&path, |h| h["dim"] = 0.into());
    assert!(matches!(open_err(&path), Error::Format(_)));
}

#[test]
fn rejects_inconsistent_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.lxts");

    sample(&path);
    edit_header(&path, |h| h["index"][1]["offset"] = 0.into());
    assert!(matches!(open_err(&path), Error::Format(m) if m.contains("strictly increasing")));

    sample(&path);
    edit_header(&path, |h| h["index"][0]["count"] = 0.into());
    assert!(matches!(open_err(&path), Error::Format(m) if m.contains("zero occurrences")));

    sample(&path);
    edit_header(&path, |h| h["index"][0]["count"] = 1.into());
    assert!(matches!(open_err(&path), Error::Corruption(_)));

    sample(&path);
    edit_header(&path, |h| h["vocab_size"] = 5.into());
    assert!(matches!(open_err(&path), Error::Format(m) if m.contains("vocab_size")));

    sample(&path);
    edit_header(&path, |h| h["index"][1]["word"] = "alpha".into());
    assert!(matches!(open_err(&path), Error::DuplicateWord(_)));

    sample(&path);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(open_err(&path), Error::Corruption(_)));
}

#[test]
fn bad_records_surface_on_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.lxts");
    let cases: [(&[u8], Option<f32>); 4] = [
        (&[0, 3], None),
        (&[1, 1, 0], None),
        (&[2, 2, 0], None),
        (&[0, 0], Some(f32::NAN)),
    ];
    for (flags, poison) in cases {
        let mut bad = occ(flags, 1, 2, 0.0);
        if let Some(v) = poison {
            bad.vectors[1] = v;
        }
        write_store_bytes(
            &path,
            "MONO",
            1,
            2,
            &[("ok".into(), vec![occ(&[0], 1, 2, 1.0)]), ("bad".into(), vec![bad])],
        );
        let store = TokenStore::open(&path).unwrap();
        assert!(store.read_occurrences("ok", Limit::All).is_ok());
        let err = store.read_occurrences("bad", Limit::All).unwrap_err();
        assert!(
            matches!(err, Error::Corruption(_) | Error::InvalidRecord { .. }),
            "{flags:?}: {err:?}"
        );
    }
}

#[test]
fn optional_header_fields_may_be_absent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.lxts");
    sample(&path);
    edit_header(&path, |h| {
        let h = h.as_object_mut().unwrap();
        h.remove("vocab_size");
        h.remove("export_seed");
        h.insert("extra".into(), serde_json::json!({"tokenizer": "wordpiece"}));
    });
    let store = TokenStore::open(&path).unwrap();
    assert_eq!(store.header().export_seed, None);
    assert_eq!(store.header().extra["tokenizer"], "wordpiece");
    assert_eq!(store.len(), 2);
}
