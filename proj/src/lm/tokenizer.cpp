#include "pal/lm/tokenizer.h"

#include <algorithm>
#include <cctype>
#include <map>

#include "pal/errors.h"

namespace pal::lm {

Tokenizer Tokenizer::byte_level(std::vector<std::string> pieces) {
    Tokenizer t;
    t.kind_ = Kind::bytes;
    t.pieces_.reserve(258 + pieces.size());
    for (int b = 0; b < 256; ++b) t.pieces_.emplace_back(1, static_cast<char>(b));
    t.eot_ = 256;
    t.unk_ = 257;
    t.pieces_.emplace_back();
    t.pieces_.emplace_back();
    for (auto& p : pieces) {
        if (p.size() < 2) throw UsageError("tokenizer pieces must be at least two bytes");
        t.pieces_.push_back(std::move(p));
    }
    t.index();
    return t;
}

Tokenizer Tokenizer::alphabet(std::string_view chars) {
    Tokenizer t;
    t.kind_ = Kind::alphabet;
    for (char c : chars) {
        std::string s(1, c);
        if (std::find(t.pieces_.begin(), t.pieces_.end(), s) != t.pieces_.end()) {
            throw UsageError("duplicate character in tokenizer alphabet");
        }
        t.pieces_.push_back(std::move(s));
    }
    t.eot_ = static_cast<TokenId>(t.pieces_.size());
    t.unk_ = t.eot_ + 1;
    t.pieces_.emplace_back();
    t.pieces_.emplace_back();
    t.index();
    return t;
}

void Tokenizer::index() {
    lookup_.clear();
    max_piece_len_ = 1;
    for (std::size_t id = 0; id < pieces_.size(); ++id) {
        if (pieces_[id].empty()) continue;
        auto [it, inserted] = lookup_.emplace(pieces_[id], static_cast<TokenId>(id));
        if (!inserted) throw UsageError("duplicate tokenizer piece '" + pieces_[id] + "'");
        max_piece_len_ = std::max(max_piece_len_, pieces_[id].size());
    }
}

std::vector<std::string> Tokenizer::learn_pieces(const std::vector<std::string>& texts, std::size_t max_pieces,
                                                 std::size_t min_count) {
    auto word_byte = [](unsigned char c) { return std::isalnum(c) || c == '\'' || c >= 0x80; };
    std::map<std::string, std::size_t> counts;
    for (const auto& t : texts) {
        std::size_t i = 0;
        while (i < t.size()) {
            std::size_t start = i;
            if (t[i] == ' ' && i + 1 < t.size() && word_byte(static_cast<unsigned char>(t[i + 1]))) ++i;
            if (!word_byte(static_cast<unsigned char>(t[i]))) {
                ++i;
                continue;
            }
            while (i < t.size() && word_byte(static_cast<unsigned char>(t[i]))) ++i;
            if (i - start >= 2) ++counts[t.substr(start, i - start)];
        }
    }
    std::vector<std::pair<std::size_t, std::string>> ranked;
    for (auto& [piece, n] : counts) {
        if (n >= min_count) ranked.emplace_back(n * (piece.size() - 1), piece);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < ranked.size() && out.size() < max_pieces; ++i) out.push_back(ranked[i].second);
    return out;
}

TokenSequence Tokenizer::encode(std::string_view text) const {
    TokenSequence ids;
    ids.reserve(text.size());
    std::size_t i = 0;
    std::string probe;
    while (i < text.size()) {
        std::size_t longest = std::min(max_piece_len_, text.size() - i);
        TokenId found = unk_;
        std::size_t used = 1;
        for (std::size_t len = longest; len >= 1; --len) {
            probe.assign(text.substr(i, len));
            auto it = lookup_.find(probe);
            if (it != lookup_.end()) {
                found = it->second;
                used = len;
                break;
            }
        }
        ids.push_back(found);
        i += used;
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) throw UsageError("token id out of range");
        if (id == eot_) continue;
        if (id == unk_) {
            out += "\xEF\xBF\xBD";
            continue;
        }
        out += pieces_[static_cast<std::size_t>(id)];
    }
    return out;
}

nlohmann::json Tokenizer::to_json() const {
    nlohmann::json j;
    if (kind_ == Kind::bytes) {
        j["kind"] = "byte_level";
        j["pieces"] = std::vector<std::string>(pieces_.begin() + 258, pieces_.end());
    } else {
        std::string chars;
        for (TokenId id = 0; id < eot_; ++id) chars += pieces_[static_cast<std::size_t>(id)];
        j["kind"] = "alphabet";
        j["chars"] = chars;
    }
    return j;
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "byte_level") return byte_level(j.at("pieces").get<std::vector<std::string>>());
    if (kind == "alphabet") return alphabet(j.at("chars").get<std::string>());
    throw ParseError("unknown tokenizer kind '" + kind + "'");
}

}  // namespace pal::lm
