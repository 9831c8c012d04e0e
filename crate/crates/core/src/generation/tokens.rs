/// Rough token count: every maximal run of alphanumeric characters is one
/// token and every other non-whitespace character is one token.
///
/// This is an estimate for cost reports, not any provider's tokenizer.
pub fn estimate_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !ch.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}
