#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace pal::text {

std::string trim(std::string_view s);
std::string to_lower_ascii(std::string_view s);

// NFC-normalizes UTF-8 input. Invalid UTF-8 is passed through unchanged.
std::string nfc(std::string_view s);

// NFC + trim; the canonical form every loaded text field is stored in.
std::string canonical(std::string_view s);

std::vector<std::string> split_whitespace(std::string_view s);

// Splits a UTF-8 string into code points, skipping whitespace.
std::vector<std::string> split_codepoints(std::string_view s);

// Lowercased word tokens with punctuation split off into separate tokens.
// "Hi, I'm here." -> {"hi", ",", "i'm", "here", "."}
std::vector<std::string> word_tokens(std::string_view s);

bool is_punctuation_token(std::string_view tok);
bool is_stopword(std::string_view word);

// Lowercased word tokens with punctuation and stopwords removed.
std::vector<std::string> content_words(std::string_view s);

// Unigram-overlap F1 over multisets of tokens. Zero when either side is empty.
double overlap_f1(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Stable 64-bit FNV-1a, used where a hash must not vary across platforms.
std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Replaces every ill-formed UTF-8 sequence with U+FFFD.
std::string sanitize_utf8(std::string_view s);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::string& path);

}  // namespace pal::text
