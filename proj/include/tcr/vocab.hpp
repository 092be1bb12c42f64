#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tcr/common.hpp"

namespace tcr {

// WordPiece-style vocabulary. Ids are dense, [PAD] is always 0 and the five
// special tokens occupy ids 0..4.
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;
    static constexpr size_t kNumSpecials = 5;

    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> ids;

    size_t size() const { return tokens.size(); }

    int id_of(std::string_view tok) const {
        auto it = ids.find(std::string(tok));
        return it == ids.end() ? -1 : it->second;
    }

    bool is_special(int id) const {
        return id >= 0 && static_cast<size_t>(id) < kNumSpecials;
    }

    static const std::vector<std::string>& special_tokens() {
        static const std::vector<std::string> s = {"[PAD]", "[UNK]", "[CLS]",
                                                   "[SEP]", "[MASK]"};
        return s;
    }
};

namespace detail {

// Pre-tokenization: whitespace splits, every punctuation character and every
// CJK character becomes its own unit. Matching below never crosses units, so
// sentence boundaries (which sit on terminal punctuation) always align with
// token boundaries.
inline std::vector<std::string> split_units(std::string_view text) {
    std::vector<std::string> units;
    std::string cur;
    size_t pos = 0;
    while (pos < text.size()) {
        const Codepoint cp = utf8_next(text, pos);
        const std::string_view raw = text.substr(pos, cp.bytes);
        if (is_space_cp(cp.value)) {
            if (!cur.empty()) units.emplace_back(std::move(cur));
            cur.clear();
        } else if (is_punct_cp(cp.value) || is_cjk_cp(cp.value)) {
            if (!cur.empty()) units.emplace_back(std::move(cur));
            cur.clear();
            units.emplace_back(raw);
        } else {
            cur.append(raw);
        }
        pos += cp.bytes;
    }
    if (!cur.empty()) units.emplace_back(std::move(cur));
    return units;
}

constexpr size_t kMaxPieceCp = 16;

}  // namespace detail

// Frequency-ranked subword vocabulary over the corpus units. Pieces that
// start a unit keep their surface form; continuations carry the "##" prefix.
// Ties are broken lexicographically so construction is deterministic.
inline Vocab build_vocab(const std::vector<std::string>& corpus,
                         size_t target_size) {
    if (target_size < Vocab::kNumSpecials + 1)
        throw DataError("build_vocab: target size must be at least 6");
    std::map<std::string, uint64_t> unit_counts;
    for (const std::string& line : corpus)
        for (std::string& u : detail::split_units(line))
            unit_counts[std::move(u)] += 1;
    if (unit_counts.empty()) throw DataError("build_vocab: empty corpus");

    std::map<std::string, uint64_t> piece_counts;
    for (const auto& [unit, count] : unit_counts) {
        const std::vector<size_t> off = utf8_offsets(unit);
        const size_t n = off.size() - 1;  // codepoints
        for (size_t i = 0; i < n; ++i) {
            const size_t max_j = std::min(n, i + detail::kMaxPieceCp);
            for (size_t j = i + 1; j <= max_j; ++j) {
                std::string piece = unit.substr(off[i], off[j] - off[i]);
                if (i > 0) piece = "##" + piece;
                piece_counts[piece] += count;
            }
        }
    }

    std::vector<std::pair<std::string, uint64_t>> ranked(piece_counts.begin(),
                                                         piece_counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.tokens = Vocab::special_tokens();
    const size_t room = target_size - Vocab::kNumSpecials;
    for (size_t i = 0; i < ranked.size() && v.tokens.size() - Vocab::kNumSpecials < room; ++i)
        v.tokens.push_back(ranked[i].first);
    for (size_t i = 0; i < v.tokens.size(); ++i)
        v.ids[v.tokens[i]] = static_cast<int>(i);
    return v;
}

// Greedy longest-match-first subword segmentation within each unit. A
// codepoint with no match becomes [UNK] and matching continues after it.
inline std::vector<int> encode(const Vocab& v, std::string_view text) {
    std::vector<int> out;
    for (const std::string& unit : detail::split_units(text)) {
        const std::vector<size_t> off = utf8_offsets(unit);
        const size_t n = off.size() - 1;
        size_t i = 0;
        while (i < n) {
            const size_t max_j = std::min(n, i + detail::kMaxPieceCp);
            int match = -1;
            size_t match_end = i;
            for (size_t j = max_j; j > i; --j) {
                std::string piece = unit.substr(off[i], off[j] - off[i]);
                if (i > 0) piece = "##" + piece;
                if (int id = v.id_of(piece); id >= Vocab::kNumSpecials) {
                    match = id;
                    match_end = j;
                    break;
                }
            }
            if (match < 0) {
                out.push_back(Vocab::kUnk);
                i += 1;
            } else {
                out.push_back(match);
                i = match_end;
            }
        }
    }
    return out;
}

// Inverse of encode up to whitespace normalization; drops [PAD], [CLS],
// [SEP] and [MASK].
inline std::string decode(const Vocab& v, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= v.size())
            throw DataError("decode: token id out of range: " +
                            std::to_string(id));
        if (id == Vocab::kPad || id == Vocab::kCls || id == Vocab::kSep ||
            id == Vocab::kMask)
            continue;
        const std::string& tok = v.tokens[id];
        if (tok.rfind("##", 0) == 0) {
            out.append(tok, 2, std::string::npos);
        } else {
            if (!out.empty()) out.push_back(' ');
            out.append(tok);
        }
    }
    return out;
}

// Canonical surface form used by the round-trip property: units joined by a
// single space.
inline std::string normalize_text(std::string_view text) {
    std::string out;
    for (const std::string& u : detail::split_units(text)) {
        if (!out.empty()) out.push_back(' ');
        out.append(u);
    }
    return out;
}

struct SentenceSpan {
    size_t index = 0;
    size_t tok_begin = 0, tok_end = 0;    // half-open token range
    size_t char_begin = 0, char_end = 0;  // byte range into the source text
};

// Splits on terminal punctuation {。！？!?.;\n} (a run of terminals ends one
// sentence); a trailing unterminated fragment is its own sentence. Sentences
// that contribute no tokens are dropped so the spans exactly cover
// [0, encoded_len).
inline std::vector<SentenceSpan> segment_sentences(const Vocab& v,
                                                   std::string_view text,
                                                   size_t encoded_len) {
    std::vector<std::pair<size_t, size_t>> pieces;
    size_t pos = 0, start = 0;
    bool in_terminal_run = false;
    while (pos < text.size()) {
        const Codepoint cp = utf8_next(text, pos);
        const bool term = is_sentence_terminal_cp(cp.value);
        if (in_terminal_run && !term) {
            pieces.emplace_back(start, pos);
            start = pos;
        }
        in_terminal_run = term;
        pos += cp.bytes;
    }
    if (start < text.size()) pieces.emplace_back(start, text.size());

    std::vector<SentenceSpan> spans;
    size_t tok_cursor = 0;
    for (const auto& [b, e] : pieces) {
        const size_t ntok = encode(v, text.substr(b, e - b)).size();
        if (ntok == 0) continue;
        SentenceSpan s;
        s.index = spans.size();
        s.tok_begin = tok_cursor;
        s.tok_end = tok_cursor + ntok;
        s.char_begin = b;
        s.char_end = e;
        spans.push_back(s);
        tok_cursor += ntok;
    }
    if (tok_cursor != encoded_len)
        throw DataError("segment_sentences: encoded length mismatch (got " +
                        std::to_string(tok_cursor) + ", expected " +
                        std::to_string(encoded_len) + ")");
    return spans;
}

inline void save_vocab(const std::string& path, const Vocab& v) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_vocab: cannot open " + path);
    for (const std::string& t : v.tokens) f << t << '\n';
}

inline Vocab load_vocab(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_vocab: cannot open " + path);
    Vocab v;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        v.tokens.push_back(line);
    }
    for (size_t i = 0; i < Vocab::kNumSpecials; ++i)
        if (v.tokens.size() <= i || v.tokens[i] != Vocab::special_tokens()[i])
            throw DataError("load_vocab: missing special tokens in " + path);
    for (size_t i = 0; i < v.tokens.size(); ++i)
        v.ids[v.tokens[i]] = static_cast<int>(i);
    return v;
}

}  // namespace tcr
