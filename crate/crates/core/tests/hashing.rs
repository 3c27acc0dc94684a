//! The crate's SHA-1 and PCR fold against the test oracle.

mod common;

use common::{boot_fold_oracle, extend_oracle, sha1_oracle, XorShift};
use proptest::prelude::*;
use trustsim::anchor::PcrBank;
use trustsim::attestation::recompute_pcr;
use trustsim::boot::{LogEntry, MeasurementLog};
use trustsim::crypto::{hash160, Digest160};

#[test]
fn hash160_matches_oracle_on_corpus() {
    let mut gen = XorShift(0x0123_4567_89ab_cdef);
    // Lengths around every padding boundary, then random ones.
    let mut lengths: Vec<usize> = (0..=130).collect();
    lengths.extend((0..200).map(|_| gen.below(4096) as usize));
    for len in lengths {
        let data = gen.bytes(len);
        assert_eq!(hash160(&data).0, sha1_oracle(&data), "length {len}");
    }
}

#[test]
fn bank_extend_matches_oracle() {
    let mut gen = XorShift(99);
    let mut bank = PcrBank::new();
    let mut expected = [[0u8; 20]; 24];
    for _ in 0..500 {
        let index = gen.below(24) as usize;
        let m = sha1_oracle(&gen.bytes(17));
        bank.extend(index, &Digest160(m)).unwrap();
        expected[index] = extend_oracle(&expected[index], &m);
    }
    for (i, want) in expected.iter().enumerate() {
        assert_eq!(bank.read(i).unwrap().0, *want, "register {i}");
    }
    assert!(bank.read(24).is_err());
}

proptest! {
    #[test]
    fn recompute_matches_oracle_fold(payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..300), 0..20)) {
        let log = MeasurementLog {
            entries: payloads
                .iter()
                .enumerate()
                .map(|(i, p)| LogEntry { component: format!("c{i}"), measurement: hash160(p), pcr: 0 })
                .collect(),
        };
        prop_assert_eq!(recompute_pcr(&log).0, boot_fold_oracle(payloads.iter().map(Vec::as_slice)));
    }
}
