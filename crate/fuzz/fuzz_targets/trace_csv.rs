#![no_main]

use libfuzzer_sys::fuzz_target;
use sec_core::coordinator::read_trace;
use sec_core::geometry::cartpole_safety_spec;
use sec_core::harness::{check_trace, checker_inputs, read_run_csv, read_summary_csv, RunConfig};
use sec_core::student::published_cartpole_design;

fuzz_target!(|data: &[u8]| {
    let _ = read_trace(data);
    let _ = read_summary_csv(data);
    if let Ok((meta, rows)) = read_run_csv(data) {
        let mut buf = Vec::new();
        sec_core::harness::write_run_csv(&mut buf, &meta, &rows).unwrap();
        assert_eq!(read_run_csv(&buf[..]).unwrap().1.len(), rows.len());
    }
    if let Ok(text) = std::str::from_utf8(data) {
        let design = published_cartpole_design();
        let safety = cartpole_safety_spec();
        let cfg = RunConfig::default();
        let _ = check_trace(text, &checker_inputs(&cfg, &design, &safety, true));
    }
});
