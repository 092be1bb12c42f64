#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcr/common.hpp"

namespace tcr {

using ordered_json = nlohmann::ordered_json;

// Row-major L x d_v frame feature matrix (one row per sampled frame).
struct FrameFeatures {
    uint32_t L = 0, d_v = 0;
    std::vector<float> v;  // L * d_v

    const float* frame(size_t l) const { return v.data() + l * d_v; }
    float* frame(size_t l) { return v.data() + l * d_v; }
};

struct Sample {
    std::string id;
    std::string asr;
    std::string ocr;
    std::string title;
    FrameFeatures frames;
    std::optional<uint32_t> cover_index;

    // ASR then OCR with a single space; either side may be empty.
    std::string combined_text() const {
        if (asr.empty()) return ocr;
        if (ocr.empty()) return asr;
        return asr + " " + ocr;
    }
};

struct DatasetManifest {
    std::vector<Sample> samples;
    std::string split;

    size_t size() const { return samples.size(); }
};

// --------------------------------------------------------------------------
// Frame feature sidecar: "TCRF" magic, then L and d_v as little-endian u32,
// then L*d_v little-endian f32, row-major.
// --------------------------------------------------------------------------

namespace detail {
constexpr char kFrameMagic[4] = {'T', 'C', 'R', 'F'};

inline void write_u32(std::ostream& os, uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x & 0xFF),
                          static_cast<unsigned char>((x >> 8) & 0xFF),
                          static_cast<unsigned char>((x >> 16) & 0xFF),
                          static_cast<unsigned char>((x >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}
}  // namespace detail

inline void save_frame_features(const std::string& path,
                                const FrameFeatures& ff) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_frame_features: cannot open " + path);
    f.write(detail::kFrameMagic, 4);
    detail::write_u32(f, ff.L);
    detail::write_u32(f, ff.d_v);
    f.write(reinterpret_cast<const char*>(ff.v.data()),
            static_cast<std::streamsize>(ff.v.size() * sizeof(float)));
    if (!f) throw DataError("save_frame_features: write failed for " + path);
}

inline FrameFeatures load_frame_features(const std::string& path,
                                         uint32_t expect_L,
                                         uint32_t expect_dv) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_frame_features: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, detail::kFrameMagic, 4) != 0)
        throw DataError("load_frame_features: bad magic in " + path);
    FrameFeatures ff;
    ff.L = detail::read_u32(f);
    ff.d_v = detail::read_u32(f);
    if (!f || ff.L < 1 || ff.d_v < 1)
        throw DataError("load_frame_features: bad header in " + path);
    if (ff.L != expect_L || ff.d_v != expect_dv)
        throw DataError("load_frame_features: shape mismatch in " + path);
    ff.v.resize(static_cast<size_t>(ff.L) * ff.d_v);
    f.read(reinterpret_cast<char*>(ff.v.data()),
           static_cast<std::streamsize>(ff.v.size() * sizeof(float)));
    if (f.gcount() !=
        static_cast<std::streamsize>(ff.v.size() * sizeof(float)))
        throw DataError("load_frame_features: truncated file " + path);
    f.peek();
    if (!f.eof())
        throw DataError("load_frame_features: trailing bytes in " + path);
    if (!all_finite(ff.v))
        throw DataError("load_frame_features: non-finite values in " + path);
    return ff;
}

// --------------------------------------------------------------------------
// Manifest: JSONL, one object per line with keys
// id, asr, ocr, title, frames_path, L, d_v, cover_index (nullable).
// frames_path is resolved relative to the manifest directory.
// --------------------------------------------------------------------------

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_manifest: cannot open " + path);
    const std::filesystem::path base =
        std::filesystem::path(path).parent_path();
    DatasetManifest m;
    std::string line;
    size_t lineno = 0;
    std::unordered_map<std::string, int> seen;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw DataError("load_manifest: malformed line " +
                            std::to_string(lineno) + " in " + path + ": " +
                            e.what());
        }
        Sample s;
        try {
            s.id = j.at("id").get<std::string>();
            s.asr = j.at("asr").get<std::string>();
            s.ocr = j.at("ocr").get<std::string>();
            s.title = j.at("title").get<std::string>();
            const auto frames_path = j.at("frames_path").get<std::string>();
            const auto L = j.at("L").get<uint32_t>();
            const auto d_v = j.at("d_v").get<uint32_t>();
            if (j.at("cover_index").is_null())
                s.cover_index.reset();
            else
                s.cover_index = j.at("cover_index").get<uint32_t>();
            try {
                s.frames = load_frame_features((base / frames_path).string(),
                                               L, d_v);
            } catch (const DataError& e) {
                throw DataError(std::string(e.what()) + " (sample id " +
                                s.id + ")");
            }
        } catch (const ordered_json::exception& e) {
            throw DataError("load_manifest: malformed line " +
                            std::to_string(lineno) + " in " + path + ": " +
                            e.what());
        }
        if (s.cover_index && *s.cover_index >= s.frames.L)
            throw DataError("load_manifest: cover_index out of range for id " +
                            s.id);
        if (seen.count(s.id))
            throw DataError("load_manifest: duplicate id " + s.id);
        seen[s.id] = 1;
        m.samples.push_back(std::move(s));
    }
    return m;
}

// Writes <out_dir>/<name>.jsonl plus frames/<id>.bin sidecars.
inline std::string save_manifest(const std::string& out_dir,
                                 const std::string& name,
                                 const DatasetManifest& m) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "frames");
    const std::string manifest_path =
        (fs::path(out_dir) / (name + ".jsonl")).string();
    std::ofstream f(manifest_path, std::ios::binary);
    if (!f) throw DataError("save_manifest: cannot open " + manifest_path);
    for (const Sample& s : m.samples) {
        const std::string rel = "frames/" + s.id + ".bin";
        save_frame_features((fs::path(out_dir) / rel).string(), s.frames);
        ordered_json j;
        j["id"] = s.id;
        j["asr"] = s.asr;
        j["ocr"] = s.ocr;
        j["title"] = s.title;
        j["frames_path"] = rel;
        j["L"] = s.frames.L;
        j["d_v"] = s.frames.d_v;
        if (s.cover_index)
            j["cover_index"] = *s.cover_index;
        else
            j["cover_index"] = nullptr;
        f << j.dump() << '\n';
    }
    return manifest_path;
}

// --------------------------------------------------------------------------
// Synthetic datasets for desk-scale runs.
//   copy-prefix:   title = first k words of the text.
//   planted-cover: title is a marker word; exactly one frame carries a
//                  feature vector derived from that marker's id.
// --------------------------------------------------------------------------

struct SynthSpec {
    std::string task = "copy-prefix";  // or "planted-cover"
    size_t count = 100;
    std::string id_prefix = "s";

    size_t n_words = 50;      // filler word alphabet size
    size_t text_len = 20;     // words per transcript
    size_t k = 5;             // copy-prefix: title length in words
    size_t sentence_every = 0;  // insert '.' after every N words (0 = never)
    double corrupt_frac = 0.0;  // copy-prefix: fraction with random titles

    uint32_t L = 25;
    uint32_t d_v = 16;

    size_t marker_count = 20;    // planted-cover: marker alphabet size
    float marker_scale = 2.0f;   // planted-cover: codebook vector scale
};

namespace detail {

// Deterministic single-codepoint word list: a..z, A..Z, then Greek letters.
inline std::vector<std::string> word_list(size_t n) {
    std::vector<std::string> words;
    for (char c = 'a'; c <= 'z' && words.size() < n; ++c)
        words.emplace_back(1, c);
    for (char c = 'A'; c <= 'Z' && words.size() < n; ++c)
        words.emplace_back(1, c);
    for (uint32_t cp = 0x3B1; cp <= 0x3C9 && words.size() < n; ++cp) {
        std::string w;
        w.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        w.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        words.push_back(w);
    }
    // Two-letter combos for anything beyond the single-codepoint alphabets.
    for (char a = 'a'; a <= 'z' && words.size() < n; ++a)
        for (char b = 'a'; b <= 'z' && words.size() < n; ++b)
            words.push_back(std::string(1, a) + std::string(1, b));
    if (words.size() < n) throw DataError("word_list: alphabet exhausted");
    return words;
}

// The marker -> feature-vector codebook is keyed by marker id only, so all
// splits of a planted-cover dataset share it.
inline std::vector<float> marker_codebook_vector(size_t marker_id,
                                                 uint32_t d_v, float scale) {
    std::mt19937_64 rng(mix_seed(0xc0deb00cULL, marker_id));
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> v(d_v);
    for (auto& x : v) x = scale * normal(rng);
    return v;
}

}  // namespace detail

inline DatasetManifest synth_dataset(uint64_t seed, const SynthSpec& spec) {
    if (spec.count < 1) throw DataError("synth_dataset: sample count must be >= 1");
    if (spec.task != "copy-prefix" && spec.task != "planted-cover")
        throw DataError("synth_dataset: unknown task '" + spec.task + "'");
    const bool planted = spec.task == "planted-cover";
    if (planted && (spec.marker_count < 1 || spec.L < 1))
        throw DataError("synth_dataset: planted-cover needs markers and frames");

    const std::vector<std::string> fillers = detail::word_list(spec.n_words);
    // Markers come from a disjoint alphabet region so filler text never
    // contains them.
    std::vector<std::string> markers;
    if (planted) {
        auto all = detail::word_list(spec.n_words + spec.marker_count);
        markers.assign(all.begin() + static_cast<long>(spec.n_words), all.end());
    }

    std::mt19937_64 rng(mix_seed(seed, 0x5ab1e5ULL));
    std::uniform_int_distribution<size_t> pick_word(0, fillers.size() - 1);
    std::normal_distribution<float> noise(0.0f, 1.0f);

    DatasetManifest m;
    int width = 1;
    for (size_t c = spec.count; c >= 10; c /= 10) ++width;

    for (size_t idx = 0; idx < spec.count; ++idx) {
        Sample s;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%0*zu", width, idx);
        s.id = spec.id_prefix + buf;

        std::vector<std::string> words(spec.text_len);
        for (auto& w : words) w = fillers[pick_word(rng)];

        std::string text;
        for (size_t i = 0; i < words.size(); ++i) {
            if (i) text += " ";
            text += words[i];
            if (spec.sentence_every > 0 && (i + 1) % spec.sentence_every == 0 &&
                i + 1 < words.size())
                text += ".";
        }

        s.frames.L = spec.L;
        s.frames.d_v = spec.d_v;
        s.frames.v.resize(static_cast<size_t>(spec.L) * spec.d_v);
        for (auto& x : s.frames.v) x = noise(rng);

        if (!planted) {
            const size_t k = std::min(spec.k, words.size());
            std::string title;
            for (size_t i = 0; i < k; ++i) {
                if (i) title += " ";
                title += words[i];
            }
            const bool corrupt =
                spec.corrupt_frac > 0.0 &&
                std::uniform_real_distribution<double>(0.0, 1.0)(rng) <
                    spec.corrupt_frac;
            if (corrupt) {
                title.clear();
                for (size_t i = 0; i < k; ++i) {
                    if (i) title += " ";
                    title += fillers[pick_word(rng)];
                }
                s.id += "-noisy";
            }
            s.title = title;
        } else {
            std::uniform_int_distribution<size_t> pick_marker(
                0, markers.size() - 1);
            std::uniform_int_distribution<uint32_t> pick_frame(0, spec.L - 1);
            const size_t marker_id = pick_marker(rng);
            const uint32_t planted_idx = pick_frame(rng);
            s.title = markers[marker_id];
            const std::vector<float> code = detail::marker_codebook_vector(
                marker_id, spec.d_v, spec.marker_scale);
            std::copy(code.begin(), code.end(), s.frames.frame(planted_idx));
            s.cover_index = planted_idx;
        }
        s.asr = text;
        s.ocr = "";
        m.samples.push_back(std::move(s));
    }
    return m;
}

}  // namespace tcr
