#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace pal::lm {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

// Greedy longest-match tokenizer over a fixed piece inventory plus two specials
// (end-of-text and unknown). The byte-level variant covers every byte, so it is
// lossless on arbitrary input; extra multi-byte pieces only shorten sequences.
class Tokenizer {
public:
    // ids 0..255 are single bytes, 256 = <eot>, 257 = <unk>, 258.. = `pieces`.
    static Tokenizer byte_level(std::vector<std::string> pieces = {});
    // One id per character of `chars` (single bytes), then <eot>, <unk>. Other bytes map to <unk>.
    static Tokenizer alphabet(std::string_view chars);

    // Frequent word-like pieces (with their leading space) ranked by bytes saved.
    static std::vector<std::string> learn_pieces(const std::vector<std::string>& texts, std::size_t max_pieces,
                                                 std::size_t min_count = 2);

    TokenSequence encode(std::string_view text) const;
    // <eot> decodes to nothing, <unk> to U+FFFD.
    std::string decode(std::span<const TokenId> ids) const;

    std::size_t vocab_size() const { return pieces_.size(); }
    TokenId eot() const { return eot_; }
    TokenId unk() const { return unk_; }

    nlohmann::json to_json() const;
    static Tokenizer from_json(const nlohmann::json& j);

    bool operator==(const Tokenizer& o) const { return kind_ == o.kind_ && pieces_ == o.pieces_; }

private:
    enum class Kind { bytes, alphabet };
    Tokenizer() = default;
    void index();

    Kind kind_ = Kind::bytes;
    std::vector<std::string> pieces_;  // id -> bytes; empty for specials
    std::unordered_map<std::string, TokenId> lookup_;
    std::size_t max_piece_len_ = 1;
    TokenId eot_ = 0;
    TokenId unk_ = 0;
};

}  // namespace pal::lm
