use proptest::prelude::*;
use qrtd::io::{
    assemble, emit, ingest, read_rows, read_stanford_raw, stanford_covariates, write_rows, InstrumentRule,
    STANFORD_COVARIATES,
};
use qrtd::{CovariatePath, Dataset, Error, Subject};

fn ingest_str(text: &str, rule: InstrumentRule) -> qrtd::Result<qrtd::io::NamedDataset> {
    ingest(text.as_bytes(), rule)
}

#[test]
fn two_row_subject() {
    let csv = "id,start,stop,event,x\na,0,50,0,0\na,50,200,1,1\n";
    let nd = ingest_str(csv, InstrumentRule::AtY).unwrap();
    let s = &nd.dataset.subjects()[0];
    assert_eq!(s.y, 200.0);
    assert!(s.delta);
    assert_eq!(s.path.breakpoints(), &[0.0, 50.0]);
    assert_eq!(s.path.segment_value(1), &[1.0, 1.0]);
    assert_eq!(s.z, vec![1.0, 1.0]);
    assert_eq!(nd.ids, vec!["a"]);
    assert_eq!(nd.covariate_names, vec!["x"]);
}

#[test]
fn instrument_columns() {
    let csv = "# a comment\nid,start,stop,event,x,z_1\na,0,5,1,0.5,2\nb,0,3,0,1.5,4\n";
    let nd = ingest_str(csv, InstrumentRule::Columns).unwrap();
    assert_eq!(nd.dataset.subjects()[0].z, vec![1.0, 2.0]);
    assert_eq!(nd.dataset.subjects()[1].z, vec![1.0, 4.0]);
    let missing = "id,start,stop,event,x\na,0,5,1,0.5\n";
    assert!(matches!(ingest_str(missing, InstrumentRule::Columns), Err(Error::Record { .. })));
}

#[test]
fn record_errors_name_the_subject() {
    let cases = [
        "id,start,stop,event,x\nq7,0,50,0,0\nq7,40,200,1,1\n",
        "id,start,stop,event,x\nq7,0,50,0,0\nq7,60,200,1,1\n",
        "id,start,stop,event,x\nq7,0,50,1,0\nq7,50,200,0,1\n",
        "id,start,stop,event,x\nq7,5,50,1,0\n",
    ];
    for csv in cases {
        match ingest_str(csv, InstrumentRule::AtY) {
            Err(Error::Record { subject, .. }) => assert_eq!(subject, "q7"),
            other => panic!("expected a record error, got {other:?}"),
        }
    }
}

#[test]
fn parse_errors_carry_the_line() {
    let csv = "id,start,stop,event,x\na,0,50,0,0\nb,0,20,1,oops\n";
    match ingest_str(csv, InstrumentRule::AtY) {
        Err(Error::Parse { line, message }) => {
            assert_eq!(line, 3);
            assert!(message.contains('x'), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(ingest_str("id,start,stop,event\na,0,5,2\n", InstrumentRule::AtY), Err(Error::Parse { .. })));
    assert!(matches!(ingest_str("id,start,event\na,0,1\n", InstrumentRule::AtY), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(ingest_str("id,start,stop,event\na,3,1,0\n", InstrumentRule::AtY), Err(Error::Parse { .. })));
}

#[test]
fn header_comment_is_skipped_on_read() {
    let (rows, names, _) = read_rows("# seed 4\nid,start,stop,event,x\na,0,1,1,2\n".as_bytes()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(names, vec!["x"]);
    let mut out = Vec::new();
    write_rows(&mut out, &rows, &names, Some("seed 4\nconfig {}")).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("# seed 4\n# config {}\nid,start,stop,event,x,z_1\n") || text.starts_with("# seed 4\n# config {}\nid,start,stop,event,x\n"), "{text}");
}

fn stanford_rows() -> Vec<qrtd::io::CountingProcessRow> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/jasa.csv");
    let records = read_stanford_raw(std::fs::File::open(path).unwrap()).unwrap();
    stanford_covariates(&records).unwrap()
}

#[test]
fn stanford_file() {
    let rows = stanford_rows();
    let (ds, ids) = assemble(&rows, InstrumentRule::AtY).unwrap();
    assert_eq!(ds.len(), 99);
    assert_eq!(ds.len() - ds.n_events(), 28);
    assert_eq!(ids.len(), 99);
    assert_eq!(STANFORD_COVARIATES.len(), 3);
    for s in ds.subjects() {
        assert!(s.y > 0.0);
        assert_eq!(s.z.len(), 4);
        // Transplant status at Y is 0 or 1; covariates are zero before transplant.
        assert!(s.z[1] == 0.0 || s.z[1] == 1.0);
        if s.z[1] == 0.0 {
            assert_eq!(s.z, vec![1.0, 0.0, 0.0, 0.0]);
        }
        assert!(s.path.n_segments() <= 2);
    }
}

#[test]
fn stanford_rejects_transplant_after_follow_up() {
    let mut records = read_stanford_raw(
        std::fs::File::open(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/jasa.csv")).unwrap(),
    )
    .unwrap();
    let k = records.iter().position(|r| r.wait.is_some()).unwrap();
    records[k].wait = Some(records[k].last_seen + 1.0);
    assert!(stanford_covariates(&records).is_err());
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    let subject = (1usize..4, 0.01f64..100.0, any::<bool>(), prop::collection::vec(-1e3f64..1e3, 2))
        .prop_flat_map(|(pieces, y, d, z)| {
            (
                Just((y, d, z)),
                prop::collection::vec(0.0f64..1.0, pieces - 1),
                prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 2), pieces),
            )
        })
        .prop_map(|((y, d, z), mut cuts, vals)| {
            cuts.sort_by(f64::total_cmp);
            cuts.dedup();
            let mut starts = vec![0.0];
            starts.extend(cuts.iter().map(|c| c * y).filter(|t| *t > 0.0 && *t < y));
            starts.dedup();
            let values = vals
                .into_iter()
                .take(starts.len())
                .map(|v| std::iter::once(1.0).chain(v).collect())
                .collect();
            let path = CovariatePath::new(starts, values).unwrap();
            Subject::new(y, d, path, std::iter::once(1.0).chain(z).collect())
        });
    prop::collection::vec(subject, 1..12).prop_filter("needs an event", |v| v.iter().any(|s| s.delta)).prop_map(Dataset::new)
}

proptest! {
    #[test]
    fn emit_then_ingest_is_identity(ds in dataset_strategy()) {
        let text = emit(&ds, None, None).unwrap();
        let back = ingest_str(&text, InstrumentRule::Columns).unwrap();
        prop_assert_eq!(&back.dataset, &ds);
        let again = emit(&back.dataset, Some(&back.ids), Some(&back.covariate_names)).unwrap();
        prop_assert_eq!(again, text);
    }
}
