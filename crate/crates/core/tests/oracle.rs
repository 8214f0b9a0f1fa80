//! Property tests against the brute-force oracles in `support`.

mod support;

use lcm::axiom::SpecConfig;
use proptest::prelude::*;
use support::{check_program, program, render, structures, tso_outcomes};

#[test]
fn machine_finds_store_buffering_outcomes() {
    let s = &structures(
        "thread t0:\n W x <- 1\n R y -> r1\nthread t1:\n W y <- 1\n R x -> r1\n",
        SpecConfig::none(),
    )[0];
    assert_eq!(tso_outcomes(s).len(), 4);
}

#[test]
fn machine_respects_full_fences() {
    let s = &structures(
        "thread t0:\n W x <- 1\n MFENCE\n R y -> r1\nthread t1:\n W y <- 1\n MFENCE\n R x -> r1\n",
        SpecConfig::none(),
    )[0];
    assert_eq!(tso_outcomes(s).len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn enumeration_and_detection_match_oracles(prog in program(), silent in any::<bool>()) {
        let src = render(&prog);
        if let Err(e) = check_program(&src, silent) {
            return Err(TestCaseError::fail(format!("{e}\nprogram:\n{src}")));
        }
    }
}
