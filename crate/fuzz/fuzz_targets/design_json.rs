#![no_main]

use libfuzzer_sys::fuzz_target;
use sec_core::geometry::{cartpole_action_spec, cartpole_safety_spec};
use sec_core::student::{verify_student_design, StudentDesign};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = StudentDesign::from_json(text) {
        let back = StudentDesign::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back.p, d.p);
        if d.state_dim() == 4 && d.action_dim() == 1 {
            let _ = verify_student_design(&d, &cartpole_safety_spec(), &cartpole_action_spec(), 1e-3);
        }
    }
});
