//! Parser properties: round-trip identity on generated models and totality
//! (no panics, in-bounds spans) on arbitrary input.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdkit_core::testgen::{random_model, random_statement_soup};
use sdkit_core::{parse_model, serialize_model, validate_model, ParseError};

#[test]
fn generated_models_are_valid_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5d_1e57);
    for case in 0..300 {
        let model = random_model(&mut rng);
        assert_eq!(
            validate_model(&model),
            vec![],
            "case {} generated an invalid model",
            case
        );
        let text = serialize_model(&model);
        match parse_model(&text) {
            Ok(reparsed) => assert_eq!(model, reparsed, "case {} mismatch for:\n{}", case, text),
            Err(errors) => panic!("case {} failed to reparse: {:?}\n{}", case, errors, text),
        }
    }
}

fn assert_spans_in_bounds(input: &str, errors: &[ParseError]) {
    assert!(!errors.is_empty());
    let lines: Vec<&str> = input
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .collect();
    for err in errors {
        let line_no = err.span.line as usize;
        assert!(line_no >= 1 && line_no <= lines.len(), "line {} of {}", line_no, lines.len());
        let line_chars = lines[line_no - 1].chars().count() as u32;
        assert!(err.span.column >= 1);
        assert!(err.span.length >= 1);
        // A span may point one column past the end of its line (end-of-line
        // errors), never further.
        assert!(
            err.span.column + err.span.length - 1 <= line_chars + 1,
            "span {}+{} exceeds line of {} chars in {:?}",
            err.span.column,
            err.span.length,
            line_chars,
            input
        );
    }
}

fn check_totality(input: &str) {
    if let Err(errors) = parse_model(input) {
        assert_spans_in_bounds(input, &errors);
    }
}

proptest! {
    #[test]
    fn parse_is_total_on_arbitrary_text(input in any::<String>()) {
        check_totality(&input);
    }
}

#[test]
fn parse_is_total_on_statement_soup() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf0_2217);
    for _ in 0..2000 {
        let n_lines = rand::Rng::random_range(&mut rng, 0..6);
        let text: Vec<String> = (0..n_lines).map(|_| random_statement_soup(&mut rng)).collect();
        check_totality(&text.join("\n"));
    }
}
