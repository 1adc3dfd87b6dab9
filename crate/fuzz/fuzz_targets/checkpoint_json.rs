#![no_main]

use libfuzzer_sys::fuzz_target;
use sec_core::drl::Learner;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(l) = Learner::<f32>::from_checkpoint_json(text) {
        let json = l.to_checkpoint_json().unwrap();
        let back = Learner::<f32>::from_checkpoint_json(&json).unwrap();
        assert_eq!(back.to_checkpoint_json().unwrap(), json);
        let s = nalgebra::DVector::zeros(l.state_dim());
        assert!(l.policy(&s).iter().all(|a| a.is_finite()));
    }
});
