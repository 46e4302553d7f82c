/// Lowercases, deletes every character outside `a-z` and whitespace, then
/// splits on whitespace. Deleted characters do not separate words, so
/// `"A-B"` becomes `"ab"`.
pub fn preprocess_caption(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_ascii_lowercase() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}
