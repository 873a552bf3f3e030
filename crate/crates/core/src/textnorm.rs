//! Text normalization for benchmark construction and scoring.
//!
//! * [`canonicalize_t2r`] builds the merge key for text-to-region queries.
//! * [`normalize_r2t`] normalizes reading outputs before exact-match scoring.
//! * [`normalize_ws`] compares consensus transcripts.
//!
//! None of them fold case.

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

/// Version tag of [`R2T_PUNCT_TABLE`].
pub const R2T_PUNCT_TABLE_VERSION: &str = "1";

/// CJK punctuation variants mapped to ASCII before region-to-text matching.
pub const R2T_PUNCT_TABLE: &[(char, &str)] = &[
    ('，', ","),
    ('。', "."),
    ('：', ":"),
    ('；', ";"),
    ('！', "!"),
    ('？', "?"),
    ('（', "("),
    ('）', ")"),
    ('【', "["),
    ('】', "]"),
    ('“', "\""),
    ('”', "\""),
    ('‘', "'"),
    ('’', "'"),
    ('、', ","),
];

// Normalizing can recompose characters that a removal made adjacent, so each
// pipeline is iterated to a fixed point. Two passes suffice in practice.
const MAX_PASSES: usize = 8;

pub fn is_zero_width(c: char) -> bool {
    matches!(c, '\u{200B}'..='\u{200D}' | '\u{FEFF}')
}

pub fn is_cjk_symbol_or_punct(c: char) -> bool {
    ('\u{3000}'..='\u{303F}').contains(&c)
}

/// Unicode general category P* (Pc, Pd, Ps, Pe, Pi, Pf, Po).
pub fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

fn fixed_point(s: &str, pass: impl Fn(&str) -> String) -> String {
    let mut cur = pass(s);
    for _ in 1..MAX_PASSES {
        let next = pass(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Merge key for text-to-region queries: NFKC, then drop whitespace,
/// punctuation (P* and U+3000..U+303F) and zero-width characters.
pub fn canonicalize_t2r(s: &str) -> String {
    fixed_point(s, |x| {
        x.nfkc()
            .filter(|&c| !(c.is_whitespace() || is_punctuation(c) || is_cjk_symbol_or_punct(c) || is_zero_width(c)))
            .collect()
    })
}

fn map_punct(c: char) -> Option<&'static str> {
    R2T_PUNCT_TABLE.iter().find_map(|&(from, to)| (from == c).then_some(to))
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalization applied to both prediction and ground truth before
/// region-to-text exact matching.
pub fn normalize_r2t(s: &str) -> String {
    fixed_point(s, |x| {
        let mut out = String::with_capacity(x.len());
        for c in x.nfkc() {
            if is_zero_width(c) {
                continue;
            }
            match map_punct(c) {
                Some(rep) => out.push_str(rep),
                None => out.push(c),
            }
        }
        collapse_ws(&out)
    })
}

/// Collapses whitespace runs to one ASCII space and trims.
pub fn normalize_ws(s: &str) -> String {
    collapse_ws(s)
}

/// The punctuation table as two-column UTF-8 TSV with a header row.
pub fn punct_table_tsv() -> String {
    let mut out = String::from("from\tto\n");
    for (from, to) in R2T_PUNCT_TABLE {
        out.push(*from);
        out.push('\t');
        out.push_str(to);
        out.push('\n');
    }
    out
}
