//! File format round trips and error reporting.

mod common;

use std::fs;

use proptest::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tts_sim::io::{
    from_json_str, parse_config, read_config, read_jsonl_from, read_metrics, read_trace, write_config,
    write_jsonl_to, write_metrics, write_trace, FormatError,
};
use tts_sim_core::sim::SimConfig;

fn json_roundtrip<T: Serialize + DeserializeOwned + PartialEq + std::fmt::Debug>(value: &T) -> Result<(), TestCaseError> {
    let text = serde_json::to_string_pretty(value).unwrap();
    let back: T = from_json_str(&text, "mem").unwrap();
    prop_assert_eq!(&back, value);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn config_file_roundtrip(c in common::sim_config()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        write_config(&c, &p).unwrap();
        prop_assert_eq!(read_config(&p).unwrap(), c);
    }

    #[test]
    fn metrics_file_roundtrip(m in common::metrics()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        write_metrics(&m, &p).unwrap();
        prop_assert_eq!(read_metrics(&p).unwrap(), m);
    }

    #[test]
    fn trace_file_roundtrip(records in prop::collection::vec(common::trace_record(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_trace(&records, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        prop_assert_eq!(text.matches('\n').count(), records.len());
        prop_assert!(text.is_empty() || text.ends_with('\n'));
        prop_assert_eq!(read_trace(&p).unwrap(), records);
    }

    #[test]
    fn occupancy_lines_roundtrip(samples in prop::collection::vec(common::occupancy_sample(), 0..20)) {
        let mut buf = Vec::new();
        write_jsonl_to(&samples, &mut buf).unwrap();
        let back: Vec<tts_sim::io::OccupancySample> = read_jsonl_from(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back, samples);
    }

    #[test]
    fn allocation_documents_roundtrip(
        p in common::profiles_file(),
        d in common::device(),
        a in common::allocation(),
        s in common::schedule_report(),
    ) {
        json_roundtrip(&p)?;
        json_roundtrip(&d)?;
        json_roundtrip(&a)?;
        json_roundtrip(&s)?;
    }

    #[test]
    fn compare_summary_roundtrip(c in common::compare_summary()) {
        json_roundtrip(&c)?;
    }
}

fn default_json() -> serde_json::Value {
    serde_json::to_value(SimConfig::default()).unwrap()
}

fn parse_err(v: &serde_json::Value) -> String {
    parse_config(&v.to_string(), "c.json").unwrap_err().to_string()
}

#[test]
fn out_of_range_rho_names_the_field() {
    let mut v = default_json();
    v["workload"]["score_process"]["rho"] = 1.5.into();
    let msg = parse_err(&v);
    assert!(msg.contains("score_process.rho out of range"), "{msg}");
}

#[test]
fn unknown_field_reports_its_key_path() {
    let mut v = default_json();
    v["workload"]["score_process"]["rhoo"] = 0.5.into();
    let msg = parse_err(&v);
    assert!(msg.contains("workload.score_process"), "{msg}");
    assert!(msg.contains("unknown field `rhoo`"), "{msg}");
}

#[test]
fn missing_field_is_named() {
    let mut v = default_json();
    v["search"].as_object_mut().unwrap().remove("branching_factor");
    let msg = parse_err(&v);
    assert!(msg.contains("missing field `branching_factor`"), "{msg}");
}

#[test]
fn wrong_type_reports_path() {
    let mut v = default_json();
    v["device"]["kv_budget_bytes"] = "lots".into();
    let msg = parse_err(&v);
    assert!(msg.contains("device.kv_budget_bytes"), "{msg}");
}

#[test]
fn bad_split_is_rejected() {
    let mut v = default_json();
    v["policies"]["allocator"] = serde_json::json!({ "static_split": 1.0 });
    assert!(parse_err(&v).contains("policies.allocator.static_split out of range"));
}

#[test]
fn malformed_json_is_an_error() {
    assert!(matches!(parse_config("{", "c.json"), Err(FormatError::Parse { .. })));
    assert!(matches!(parse_config("{} {}", "c.json"), Err(FormatError::Parse { .. })));
}

#[test]
fn three_records_make_three_lines() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    let records: Vec<_> = (0..3)
        .map(|i| tts_sim_core::workload::TraceRecord {
            iter: 0,
            beam_id: i,
            parent_id: None,
            step_tokens: 10,
            score: 0.5,
            selected: true,
            speculative: false,
        })
        .collect();
    write_trace(&records, &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    assert_eq!(lines.len(), 3);
    for (line, r) in lines.iter().zip(&records) {
        let one: tts_sim_core::workload::TraceRecord = serde_json::from_str(line).unwrap();
        assert_eq!(&one, r);
    }
}

#[test]
fn bad_trace_line_is_located() {
    let text = "{\"iter\":0,\"beam_id\":1,\"parent_id\":null,\"step_tokens\":3,\"score\":0.1,\"selected\":true,\"speculative\":false}\n{\"iter\":0}\n";
    let err = read_jsonl_from::<tts_sim_core::workload::TraceRecord, _>(text.as_bytes(), "t.jsonl").unwrap_err();
    assert!(err.to_string().starts_with("t.jsonl:2"), "{err}");
}

#[test]
fn committed_examples_parse() {
    let data = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    assert_eq!(read_config(&data.join("config.json")).unwrap(), SimConfig::default());
    read_config(&data.join("config_small.json")).unwrap();
    read_metrics(&data.join("metrics_small.json")).unwrap();
    assert!(!read_trace(&data.join("trace_small.jsonl")).unwrap().is_empty());
    assert_eq!(read_trace(&data.join("trace_three_cots.jsonl")).unwrap().len(), 5);
    tts_sim::io::read_profiles(&data.join("profiles_unit.json")).unwrap();
    tts_sim::io::read_device(&data.join("device_unit.json")).unwrap();
    let occ = fs::File::open(data.join("occupancy_small.jsonl")).unwrap();
    let samples: Vec<tts_sim::io::OccupancySample> = read_jsonl_from(std::io::BufReader::new(occ), "occ").unwrap();
    assert!(!samples.is_empty());
    let _: tts_sim::compare::CompareSummary = from_json_str(&fs::read_to_string(data.join("compare_small.json")).unwrap(), "cmp").unwrap();
    let _: tts_sim::schedule::ScheduleReport = from_json_str(&fs::read_to_string(data.join("schedule_greedy.json")).unwrap(), "s").unwrap();
    let _: tts_sim_core::roofline::Allocation = from_json_str(&fs::read_to_string(data.join("allocation_unit.json")).unwrap(), "a").unwrap();
}
