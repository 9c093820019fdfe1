#![no_main]
use libfuzzer_sys::fuzz_target;
use riskstab::certs::parse_certificate;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cert) = parse_certificate(text) {
        let again = parse_certificate(&cert.to_json()).expect("reparse");
        assert_eq!(cert.to_json(), again.to_json());
    }
});
