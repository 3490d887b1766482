//! Malformed safetensors images.

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

fn image(json: &str, data_len: usize) -> Vec<u8> {
    let mut out = (json.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(json.as_bytes());
    out.extend(std::iter::repeat_n(0u8, data_len));
    out
}

const VALID: &str = r#"{"t":{"dtype":"F32","shape":[2,3],"data_offsets":[0,24]}}"#;
const SUPPORTED: [&str; 9] = ["F64", "F32", "F16", "BF16", "I64", "I32", "I8", "U8", "BOOL"];

fn malformed() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![
        (0usize..(8 + VALID.len() + 24)).prop_map(|cut| {
            let mut img = image(VALID, 24);
            img.truncate(cut);
            img
        }),
        (1u64..u64::MAX / 2).prop_map(|extra| {
            let mut img = image(VALID, 24);
            let declared = (VALID.len() as u64 + 24).saturating_add(extra);
            img[..8].copy_from_slice(&declared.to_le_bytes());
            img
        }),
        "[A-Z][A-Z0-9]{0,5}"
            .prop_filter("unsupported dtype", |s| !SUPPORTED.contains(&s.as_str()))
            .prop_map(|d| image(&format!(r#"{{"t":{{"dtype":"{d}","shape":[2],"data_offsets":[0,8]}}}}"#), 8)),
        (0u64..64, 0u64..64)
            .prop_filter("wrong size", |(b, e)| e < b || e - b != 24)
            .prop_map(|(b, e)| image(&format!(r#"{{"t":{{"dtype":"F32","shape":[2,3],"data_offsets":[{b},{e}]}}}}"#), 64)),
        (1u64..100).prop_map(|s| image(
            &format!(r#"{{"t":{{"dtype":"F32","shape":[2,3],"data_offsets":[{s},{}]}}}}"#, s + 24),
            24
        )),
        (0u64..4).prop_map(|b| image(
            &format!(
                r#"{{"a":{{"dtype":"F32","shape":[2],"data_offsets":[0,8]}},"b":{{"dtype":"F32","shape":[2],"data_offsets":[{},{}]}}}}"#,
                b * 2,
                b * 2 + 8
            ),
            16
        )),
        (1usize..VALID.len()).prop_map(|cut| image(&VALID[..cut], 24)),
        any::<u8>().prop_map(|b| {
            let mut json = VALID.as_bytes().to_vec();
            json[3] = 0x80 | (b & 0x3f);
            let mut img = (json.len() as u64).to_le_bytes().to_vec();
            img.extend_from_slice(&json);
            img.extend_from_slice(&[0; 24]);
            img
        }),
        prop::sample::select(vec![
            "[]",
            r#"{"t":[]}"#,
            r#"{"t":{"dtype":"F32","shape":[-1],"data_offsets":[0,4]}}"#,
            r#"{"t":{"dtype":"F32","shape":[1],"data_offsets":[0]}}"#,
            r#"{"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4],"extra":1}}"#,
            r#"{"t":{"dtype":7,"shape":[1],"data_offsets":[0,4]}}"#,
            r#"{"t":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"t":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
        ])
        .prop_map(|j| image(j, 8)),
    ]
}

/// `count` malformed images from a fixed seed.
pub fn cases(count: usize) -> Vec<Vec<u8>> {
    let rng = TestRng::from_seed(RngAlgorithm::ChaCha, &[7; 32]);
    let mut runner = TestRunner::new_with_rng(Config::default(), rng);
    let strategy = malformed();
    (0..count)
        .map(|_| strategy.new_tree(&mut runner).unwrap().current())
        .collect()
}
