use std::path::PathBuf;

use asmscribe_core::asm::{
    mask_count, mask_sample, parse_sample, render, split_comment, AsmSample, LineKind, MASK_MARKER,
};
use proptest::prelude::*;

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(path).unwrap()
}

fn fixtures() -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn bitwise_listing_shape() {
    let s = parse_sample(&fixture("bitwise.asm"), "bitwise").unwrap();
    assert_eq!(s.line_count(), 39);
    assert!(s.header_comment.is_none());
    assert!(s.inline_comments.is_empty());
    assert_eq!(s.line_kinds[0], LineKind::Directive);
    assert_eq!(s.line_kinds[1], LineKind::Directive);
    assert_eq!(s.line_kinds[2], LineKind::Label);
    assert_eq!(s.instruction_lines().len(), 30);
    let blanks: Vec<usize> =
        s.line_kinds.iter().enumerate().filter(|(_, k)| **k == LineKind::Blank).map(|(i, _)| i + 1).collect();
    assert_eq!(blanks, vec![7, 10, 12, 19, 26, 33]);
}

#[test]
fn obfuscated_listing_shape() {
    let s = parse_sample(&fixture("obfuscated.asm"), "obf").unwrap();
    assert_eq!(s.line_count(), 15);
    assert_eq!(s.instruction_lines().len(), 12);
    assert!(s.inline_comments.is_empty());
}

#[test]
fn commented_fixture_details() {
    let s = parse_sample(&fixture("xorpd_style.asm"), "x").unwrap();
    assert_eq!(s.header_comment.as_deref(), Some("Counts the set bits in eax.\nResult is left in ecx."));
    assert_eq!(s.code_lines[0], "    xor     ecx, ecx");
    assert_eq!(s.inline_comments[&1], "clear counter");
    assert_eq!(s.inline_comments[&4], "no bits left");
    assert_eq!(s.inline_comments[&5], "drop the lowest set bit");
    assert_eq!(s.line_kinds[1], LineKind::Label);
    assert_eq!(s.line_count(), 9);

    let s = parse_sample(&fixture("strings.asm"), "s").unwrap();
    assert_eq!(s.code_lines[1], "msg db \"a;b#c\", 10, 0");
    assert_eq!(s.code_lines[2], "ch  db ';'");
    assert_eq!(s.code_lines[3], "tpl db `tab\\`;x`, 0");
    assert_eq!(s.inline_comments[&2], "delimiters inside a literal");

    let s = parse_sample(&fixture("gas_hash.s"), "g").unwrap();
    assert_eq!(s.header_comment.as_deref(), Some("strlen for a nul-terminated string in %rdi"));
    assert_eq!(s.line_kinds[0], LineKind::Directive);
    assert_eq!(s.line_kinds[3], LineKind::Instruction);
    assert_eq!(s.inline_comments[&8], "length");
}

#[test]
fn fixtures_round_trip() {
    for (name, text) in fixtures() {
        let s = parse_sample(&text, &name).unwrap();
        let again = parse_sample(&render(&s, true, true), &name).unwrap();
        assert!(s.same_structure(&again), "{name}");
        assert_eq!(render(&s, false, false), s.code_lines.join("\n"));
    }
}

fn code_line() -> impl Strategy<Value = String> {
    let indent = prop_oneof![Just(""), Just("    "), Just("\t"), Just("  \t")];
    let body = prop_oneof![
        4 => prop::sample::select(vec![
            "mov eax, 1", "xor\trax,rcx", "push rbp", "ret", "lea edx, [eax-1]", "int 0x80",
            "db \"x;y\", 0", "mov al, '#'", "cmpb $0, (%rax)",
        ]).prop_map(String::from),
        1 => "[a-z_][a-z0-9_]{0,6}:",
        1 => prop::sample::select(vec!["section .text", "global main", "%define X 1", ".globl f", "align 16"])
            .prop_map(String::from),
        1 => Just(String::new()),
    ];
    let comment = prop::option::of(("[;#]", "[ a-zA-Z0-9;#,.()]{0,16}").prop_map(|(d, t)| format!(" {d} {t}")));
    (indent, body, comment).prop_map(|(i, b, c)| format!("{i}{b}{}", c.unwrap_or_default()))
}

fn listing() -> impl Strategy<Value = String> {
    let header = prop::collection::vec("[;#] [a-zA-Z ,.]{0,20}", 0..4);
    let body = prop::collection::vec(
        prop_oneof![4 => code_line(), 1 => "[ \t]{0,3}; [a-z ]{1,12}"],
        1..40,
    );
    (header, body).prop_map(|(h, b)| {
        let mut lines = h;
        lines.extend(b);
        lines.push("    nop".into());
        lines.join("\n")
    })
}

fn chaotic_text() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z0-9 \t;#'\"`\\\\:.%\\[\\]]{0,24}", 1..30).prop_map(|l| l.join("\n"))
}

fn structural_invariants(s: &AsmSample) {
    let n = s.line_count();
    assert_eq!(s.line_kinds.len(), n);
    for k in s.inline_comments.keys() {
        assert!((1..=n).contains(k), "key {k} outside 1..={n}");
    }
    for line in &s.code_lines {
        assert!(split_comment(line).1.is_none(), "comment left in {line:?}");
    }
}

proptest! {
    #[test]
    fn parse_render_parse_is_identity(text in listing()) {
        let s = parse_sample(&text, "p").unwrap();
        let again = parse_sample(&render(&s, true, true), "p").unwrap();
        prop_assert!(s.same_structure(&again), "{:?}\n{:?}", s, again);
    }

    #[test]
    fn parser_keeps_invariants_on_noise(text in chaotic_text()) {
        if let Ok(s) = parse_sample(&text, "n") {
            structural_invariants(&s);
        }
    }

    #[test]
    fn masking_law(text in listing(), seed in any::<u64>()) {
        let s = parse_sample(&text, "m").unwrap();
        let instr = s.instruction_lines();
        let m = mask_sample(&s, 0.25, seed).unwrap();
        let expected = ((0.25 * instr.len() as f64 + 0.5).floor() as usize).max(1);
        prop_assert_eq!(m.masked_indices.len(), expected);
        prop_assert!(m.masked_indices.iter().all(|i| instr.contains(i)));
        let base = render(&s, false, false);
        let base_lines: Vec<&str> = base.split('\n').collect();
        let masked_lines: Vec<&str> = m.masked_text.split('\n').collect();
        prop_assert_eq!(base_lines.len(), masked_lines.len());
        for (i, (b, t)) in base_lines.iter().zip(&masked_lines).enumerate() {
            if m.masked_indices.contains(&(i + 1)) {
                let indent = &b[..b.len() - b.trim_start().len()];
                prop_assert_eq!(t.to_string(), format!("{indent}{MASK_MARKER}"));
            } else {
                prop_assert_eq!(b, t);
            }
        }
        prop_assert_eq!(&mask_sample(&s, 0.25, seed).unwrap(), &m);
    }
}

#[test]
fn mask_count_formula_up_to_ten_thousand() {
    for n in 1..=10_000usize {
        // round half up of n/4 in integer arithmetic
        let expected = ((n + 2) / 4).max(1);
        assert_eq!(mask_count(n, 0.25), expected, "n = {n}");
    }
}
