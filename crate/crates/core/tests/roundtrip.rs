use lcm::ir::parse;
use proptest::prelude::*;

const LOCS: [&str; 4] = ["x", "y", "A", "B"];

fn line() -> impl Strategy<Value = String> {
    let reg = || (0..4u8).prop_map(|r| format!("r{r}"));
    let loc = || prop::sample::select(&LOCS[..]);
    prop_oneof![
        (loc(), reg()).prop_map(|(l, r)| format!("R {l} -> {r}")),
        (loc(), reg(), reg()).prop_map(|(l, i, r)| format!("R {l}+{i} -> {r}")),
        (loc(), reg()).prop_map(|(l, r)| format!("W {l} <- {r}")),
        (loc(), 0..9i64).prop_map(|(l, v)| format!("W {l} <- {v}")),
        (reg(), reg(), reg()).prop_map(|(d, a, b)| format!("{d} <- and {a}, {b}")),
        (reg(), reg()).prop_map(|(d, a)| format!("{d} <- lt {a}, 16")),
        reg().prop_map(|r| format!("BEQZ {r}, E")),
        Just("LFENCE".to_string()),
        Just("MFENCE".to_string()),
        Just("skip".to_string()),
    ]
}

proptest! {
    #[test]
    fn canonical_form_is_a_fixed_point(body in prop::collection::vec(line(), 0..12)) {
        let mut src = String::from("R x -> r0\nR y -> r1\nR A -> r2\nR B -> r3\n");
        for l in &body {
            src.push_str(l);
            src.push('\n');
        }
        src.push_str("E: skip\n");
        let once = parse(&src).unwrap().to_string();
        let twice = parse(&once).unwrap().to_string();
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn corpus_round_trips() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
    for case in lcm::corpus::load(&dir).unwrap() {
        let text = case.program.to_string();
        assert_eq!(parse(&text).unwrap().to_string(), text, "{}", case.name);
    }
}
