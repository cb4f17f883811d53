//! Label normalization shared by conditioning and filtering.

use unicode_normalization::UnicodeNormalization;

/// Unicode NFC plus leading/trailing whitespace trim; optional case folding
/// (simple lowercase) for match policies that ignore case.
pub fn normalize_label(s: &str, case_fold: bool) -> String {
    let norm: String = s.nfc().collect();
    let trimmed = norm.trim();
    if case_fold {
        trimmed.to_lowercase()
    } else {
        trimmed.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trims_and_composes() {
        // U+0065 U+0301 composes to U+00E9 under NFC.
        assert_eq!(normalize_label("  e\u{301}x ", false), "\u{e9}x");
        assert_eq!(normalize_label("AbC", true), "abc");
        assert_eq!(normalize_label("AbC", false), "AbC");
    }
}
