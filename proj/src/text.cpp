#include "pal/text.h"

#include <openssl/evp.h>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <unordered_set>

#include "pal/errors.h"

namespace pal::text {

namespace {

bool is_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_word_char(unsigned char c) {
    // Bytes >= 0x80 belong to multi-byte UTF-8 sequences and are kept inside words.
    return std::isalnum(c) || c == '\'' || c == '_' || c >= 0x80;
}

const std::unordered_set<std::string_view>& stopwords() {
    static const std::unordered_set<std::string_view> words = {
        "a",      "about", "after",  "again",   "all",   "also",   "am",    "an",    "and",
        "any",    "are",   "as",     "at",      "be",    "been",   "but",   "by",    "can",
        "could",  "did",   "do",     "does",    "doing", "for",    "from",  "had",   "has",
        "have",   "he",    "her",    "here",    "hers",  "him",    "his",   "how",   "i",
        "i'm",    "i've",  "i'd",    "i'll",    "if",    "in",     "into",  "is",    "it",
        "it's",   "its",   "just",   "me",      "mine",  "more",   "most",  "my",    "myself",
        "of",     "off",   "on",     "once",    "only",  "or",     "other", "our",   "ours",
        "out",    "over",  "own",    "really",  "she",   "so",     "some",  "such",  "than",
        "that",   "the",   "their",  "them",    "then",  "there",  "these", "they",  "this",
        "those",  "to",    "too",    "up",      "very",  "was",    "we",    "were",  "what",
        "when",   "where", "which",  "while",   "who",   "whom",   "why",   "will",  "with",
        "would",  "you",   "your",   "yours",   "yes",   "oh",     "well",  "lol",   "not",
        "no",     "never", "don't",  "dont",    "doesn't", "didn't", "isn't", "aren't", "can't",
        "cannot", "won't", "wasn't", "haven't", "nor",   "'s",     "s",     "t",
    };
    return words;
}

}  // namespace

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string to_lower_ascii(std::string_view s) {
    std::string out(s);
    for (auto& c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

std::string nfc(std::string_view s) {
    bool ascii = std::all_of(s.begin(), s.end(), [](char c) { return static_cast<unsigned char>(c) < 0x80; });
    if (ascii) return std::string(s);

    UErrorCode status = U_ZERO_ERROR;
    const icu::Normalizer2* norm = icu::Normalizer2::getNFCInstance(status);
    if (U_FAILURE(status)) return std::string(s);
    icu::UnicodeString src = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
    icu::UnicodeString dst = norm->normalize(src, status);
    if (U_FAILURE(status)) return std::string(s);
    std::string out;
    dst.toUTF8String(out);
    return out;
}

std::string canonical(std::string_view s) { return trim(nfc(s)); }

std::vector<std::string> split_whitespace(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && is_space(static_cast<unsigned char>(s[i]))) ++i;
        std::size_t j = i;
        while (j < s.size() && !is_space(static_cast<unsigned char>(s[j]))) ++j;
        if (j > i) out.emplace_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

std::vector<std::string> split_codepoints(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        auto c = static_cast<unsigned char>(s[i]);
        std::size_t len = 1;
        if (c >= 0xF0) len = 4;
        else if (c >= 0xE0) len = 3;
        else if (c >= 0xC0) len = 2;
        len = std::min(len, s.size() - i);
        if (!(len == 1 && is_space(c))) out.emplace_back(s.substr(i, len));
        i += len;
    }
    return out;
}

std::vector<std::string> word_tokens(std::string_view s) {
    std::vector<std::string> out;
    const std::string lower = to_lower_ascii(s);
    std::size_t i = 0;
    while (i < lower.size()) {
        auto c = static_cast<unsigned char>(lower[i]);
        if (is_space(c)) {
            ++i;
        } else if (is_word_char(c)) {
            std::size_t j = i;
            while (j < lower.size() && is_word_char(static_cast<unsigned char>(lower[j]))) ++j;
            // Quotes wrapping a word are punctuation, apostrophes inside it are not.
            std::size_t b = i;
            std::size_t e = j;
            while (b < e && lower[b] == '\'') ++b;
            while (e > b && lower[e - 1] == '\'') --e;
            for (std::size_t k = i; k < b; ++k) out.emplace_back("'");
            if (e > b) out.emplace_back(lower.substr(b, e - b));
            for (std::size_t k = e; k < j; ++k) out.emplace_back("'");
            i = j;
        } else {
            out.emplace_back(1, lower[i]);
            ++i;
        }
    }
    return out;
}

bool is_punctuation_token(std::string_view tok) {
    return std::none_of(tok.begin(), tok.end(), [](char c) {
        auto u = static_cast<unsigned char>(c);
        return std::isalnum(u) || u >= 0x80;
    });
}

bool is_stopword(std::string_view word) { return stopwords().count(word) > 0; }

std::vector<std::string> content_words(std::string_view s) {
    std::vector<std::string> out;
    for (auto& tok : word_tokens(s)) {
        if (is_punctuation_token(tok) || is_stopword(tok)) continue;
        out.push_back(std::move(tok));
    }
    return out;
}

double overlap_f1(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0.0;
    std::map<std::string_view, int> counts;
    for (const auto& w : b) ++counts[w];
    int overlap = 0;
    for (const auto& w : a) {
        auto it = counts.find(w);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    double p = static_cast<double>(overlap) / static_cast<double>(a.size());
    double r = static_cast<double>(overlap) / static_cast<double>(b.size());
    return 2.0 * p * r / (p + r);
}

std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw PalError("sha256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xF]);
    }
    return out;
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PalError("cannot open for digest: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return sha256_hex(ss.str());
}

std::string sanitize_utf8(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        std::size_t len = 0;
        std::uint32_t lo = 0x80, hi = 0xBF;  // allowed range of the second byte
        if (b0 < 0x80) len = 1;
        else if (b0 >= 0xC2 && b0 <= 0xDF) len = 2;
        else if (b0 >= 0xE0 && b0 <= 0xEF) {
            len = 3;
            if (b0 == 0xE0) lo = 0xA0;
            if (b0 == 0xED) hi = 0x9F;
        } else if (b0 >= 0xF0 && b0 <= 0xF4) {
            len = 4;
            if (b0 == 0xF0) lo = 0x90;
            if (b0 == 0xF4) hi = 0x8F;
        }
        bool ok = len > 0 && i + len <= s.size();
        for (std::size_t k = 1; ok && k < len; ++k) {
            const auto b = static_cast<unsigned char>(s[i + k]);
            ok = k == 1 ? (b >= lo && b <= hi) : (b >= 0x80 && b <= 0xBF);
        }
        if (ok) {
            out.append(s.substr(i, len));
            i += len;
        } else {
            out += "\xEF\xBF\xBD";
            ++i;
        }
    }
    return out;
}

}  // namespace pal::text
