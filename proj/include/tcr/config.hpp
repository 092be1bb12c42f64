#pragma once

#include <cstdlib>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "tcr/common.hpp"

namespace tcr {

using ordered_json = nlohmann::ordered_json;

struct ModelConfig {
    uint32_t layers = 12;
    uint32_t heads = 12;
    uint32_t d_h = 768;
    uint32_t d_v = 16;
    uint32_t max_seq = 512;
    uint32_t vocab_size = 0;  // filled from the vocabulary
    uint32_t m_max = 20;      // maximum generated title length
    float dropout = 0.1f;
    float mask_fraction = 0.2f;
    uint32_t mask_cap = 20;
    bool append_eos = true;   // title region ends with a learned [SEP]
    bool tie_lm_head = false;

    uint32_t ff_dim() const { return 4 * d_h; }
    uint32_t head_dim() const { return d_h / heads; }

    void validate() const {
        if (heads == 0 || d_h % heads != 0)
            throw DataError("ModelConfig: d_h must be divisible by heads");
        if (layers == 0) throw DataError("ModelConfig: layers must be >= 1");
        if (m_max < 1) throw DataError("ModelConfig: m_max must be >= 1");
        if (!(mask_fraction > 0.0f && mask_fraction <= 1.0f))
            throw DataError("ModelConfig: mask_fraction must be in (0, 1]");
        if (max_seq < 8 || max_seq > 4096)
            throw DataError("ModelConfig: max_seq out of range");
        if (!(dropout >= 0.0f && dropout < 1.0f))
            throw DataError("ModelConfig: dropout must be in [0, 1)");
    }
};

struct TrainSchedule {
    uint32_t epochs = 20;
    uint32_t batch_size = 16;
    double lr = 1e-5;
    double warmup_frac = 0.1;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables clipping
};

// Which attention rows feed cover selection and refinement.
// layer == -1 means the final encoder layer; -2 means mean over all layers.
struct AttnAggregation {
    int layer = -1;
    bool max_heads = false;  // false: mean over heads
};

struct DecodeConfig {
    uint32_t beam = 5;
    bool length_norm = false;
    AttnAggregation agg;
    bool teacher_forced_attn = false;
};

struct RefinementConfig {
    uint32_t u = 3;           // top sentences
    uint32_t v = 3;           // top frames
    double keep_fraction = 0.8;
    uint32_t iterations = 1;
    uint32_t beam = 5;

    void validate() const {
        if (u < 1 || v < 1 || iterations < 1)
            throw DataError("RefinementConfig: u, v, iterations must be >= 1");
        if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
            throw DataError("RefinementConfig: keep_fraction must be in (0, 1]");
    }
};

struct RunPaths {
    std::string train_manifest;
    std::string valid_manifest;
    std::string test_manifest;
    std::string vocab;
    std::string checkpoint;
    std::string out_dir;
};

struct RunConfig {
    ModelConfig model;
    TrainSchedule train;
    DecodeConfig decode;
    RefinementConfig refine;
    RunPaths paths;
    uint64_t seed = 42;
    uint32_t vocab_target = 8192;
    uint32_t threads = 1;
};

// --------------------------------------------------------------------------
// Strict JSON (de)serialization: unknown keys are rejected so a config file
// documents exactly one run.
// --------------------------------------------------------------------------

namespace detail {

template <class T>
void get_field(const ordered_json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const ordered_json& j,
                           std::initializer_list<const char*> known,
                           const std::string& scope) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (key == k) ok = true;
        if (!ok)
            throw DataError("config: unknown key '" + scope + key + "'");
    }
}

}  // namespace detail

inline ordered_json to_json(const ModelConfig& c) {
    return ordered_json{{"layers", c.layers},
                        {"heads", c.heads},
                        {"d_h", c.d_h},
                        {"d_v", c.d_v},
                        {"max_seq", c.max_seq},
                        {"vocab_size", c.vocab_size},
                        {"m_max", c.m_max},
                        {"dropout", c.dropout},
                        {"mask_fraction", c.mask_fraction},
                        {"mask_cap", c.mask_cap},
                        {"append_eos", c.append_eos},
                        {"tie_lm_head", c.tie_lm_head}};
}

inline ModelConfig model_config_from_json(const ordered_json& j) {
    detail::reject_unknown(j,
                           {"layers", "heads", "d_h", "d_v", "max_seq",
                            "vocab_size", "m_max", "dropout", "mask_fraction",
                            "mask_cap", "append_eos", "tie_lm_head"},
                           "model.");
    ModelConfig c;
    detail::get_field(j, "layers", c.layers);
    detail::get_field(j, "heads", c.heads);
    detail::get_field(j, "d_h", c.d_h);
    detail::get_field(j, "d_v", c.d_v);
    detail::get_field(j, "max_seq", c.max_seq);
    detail::get_field(j, "vocab_size", c.vocab_size);
    detail::get_field(j, "m_max", c.m_max);
    detail::get_field(j, "dropout", c.dropout);
    detail::get_field(j, "mask_fraction", c.mask_fraction);
    detail::get_field(j, "mask_cap", c.mask_cap);
    detail::get_field(j, "append_eos", c.append_eos);
    detail::get_field(j, "tie_lm_head", c.tie_lm_head);
    return c;
}

inline ordered_json to_json(const TrainSchedule& s) {
    return ordered_json{{"epochs", s.epochs},
                        {"batch_size", s.batch_size},
                        {"lr", s.lr},
                        {"warmup_frac", s.warmup_frac},
                        {"weight_decay", s.weight_decay},
                        {"beta1", s.beta1},
                        {"beta2", s.beta2},
                        {"eps", s.eps},
                        {"clip_norm", s.clip_norm}};
}

inline TrainSchedule train_schedule_from_json(const ordered_json& j) {
    detail::reject_unknown(j,
                           {"epochs", "batch_size", "lr", "warmup_frac",
                            "weight_decay", "beta1", "beta2", "eps",
                            "clip_norm"},
                           "train.");
    TrainSchedule s;
    detail::get_field(j, "epochs", s.epochs);
    detail::get_field(j, "batch_size", s.batch_size);
    detail::get_field(j, "lr", s.lr);
    detail::get_field(j, "warmup_frac", s.warmup_frac);
    detail::get_field(j, "weight_decay", s.weight_decay);
    detail::get_field(j, "beta1", s.beta1);
    detail::get_field(j, "beta2", s.beta2);
    detail::get_field(j, "eps", s.eps);
    detail::get_field(j, "clip_norm", s.clip_norm);
    return s;
}

inline ordered_json to_json(const DecodeConfig& d) {
    return ordered_json{{"beam", d.beam},
                        {"length_norm", d.length_norm},
                        {"attn_layer", d.agg.layer},
                        {"attn_max_heads", d.agg.max_heads},
                        {"teacher_forced_attn", d.teacher_forced_attn}};
}

inline DecodeConfig decode_config_from_json(const ordered_json& j) {
    detail::reject_unknown(
        j, {"beam", "length_norm", "attn_layer", "attn_max_heads",
            "teacher_forced_attn"},
        "decode.");
    DecodeConfig d;
    detail::get_field(j, "beam", d.beam);
    detail::get_field(j, "length_norm", d.length_norm);
    detail::get_field(j, "attn_layer", d.agg.layer);
    detail::get_field(j, "attn_max_heads", d.agg.max_heads);
    detail::get_field(j, "teacher_forced_attn", d.teacher_forced_attn);
    return d;
}

inline ordered_json to_json(const RefinementConfig& r) {
    return ordered_json{{"u", r.u},
                        {"v", r.v},
                        {"keep_fraction", r.keep_fraction},
                        {"iterations", r.iterations},
                        {"beam", r.beam}};
}

inline RefinementConfig refinement_config_from_json(const ordered_json& j) {
    detail::reject_unknown(
        j, {"u", "v", "keep_fraction", "iterations", "beam"}, "refine.");
    RefinementConfig r;
    detail::get_field(j, "u", r.u);
    detail::get_field(j, "v", r.v);
    detail::get_field(j, "keep_fraction", r.keep_fraction);
    detail::get_field(j, "iterations", r.iterations);
    detail::get_field(j, "beam", r.beam);
    return r;
}

inline ordered_json to_json(const RunPaths& p) {
    return ordered_json{{"train_manifest", p.train_manifest},
                        {"valid_manifest", p.valid_manifest},
                        {"test_manifest", p.test_manifest},
                        {"vocab", p.vocab},
                        {"checkpoint", p.checkpoint},
                        {"out_dir", p.out_dir}};
}

inline RunPaths run_paths_from_json(const ordered_json& j) {
    detail::reject_unknown(j,
                           {"train_manifest", "valid_manifest",
                            "test_manifest", "vocab", "checkpoint", "out_dir"},
                           "paths.");
    RunPaths p;
    detail::get_field(j, "train_manifest", p.train_manifest);
    detail::get_field(j, "valid_manifest", p.valid_manifest);
    detail::get_field(j, "test_manifest", p.test_manifest);
    detail::get_field(j, "vocab", p.vocab);
    detail::get_field(j, "checkpoint", p.checkpoint);
    detail::get_field(j, "out_dir", p.out_dir);
    return p;
}

inline ordered_json to_json(const RunConfig& c) {
    return ordered_json{{"model", to_json(c.model)},
                        {"train", to_json(c.train)},
                        {"decode", to_json(c.decode)},
                        {"refine", to_json(c.refine)},
                        {"paths", to_json(c.paths)},
                        {"seed", c.seed},
                        {"vocab_target", c.vocab_target},
                        {"threads", c.threads}};
}

inline RunConfig run_config_from_json(const ordered_json& j) {
    detail::reject_unknown(j,
                           {"model", "train", "decode", "refine", "paths",
                            "seed", "vocab_target", "threads"},
                           "");
    RunConfig c;
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_schedule_from_json(j.at("train"));
    if (j.contains("decode"))
        c.decode = decode_config_from_json(j.at("decode"));
    if (j.contains("refine"))
        c.refine = refinement_config_from_json(j.at("refine"));
    if (j.contains("paths")) c.paths = run_paths_from_json(j.at("paths"));
    detail::get_field(j, "seed", c.seed);
    detail::get_field(j, "vocab_target", c.vocab_target);
    detail::get_field(j, "threads", c.threads);
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("config: cannot open " + path);
    ordered_json j;
    try {
        j = ordered_json::parse(f);
    } catch (const std::exception& e) {
        throw DataError("config: parse error in " + path + ": " + e.what());
    }
    RunConfig c = run_config_from_json(j);
    c.model.validate();
    c.refine.validate();
    return c;
}

// TCR_SEED overrides the config seed when set.
inline void apply_seed_env(RunConfig& c) {
    if (const char* env = std::getenv("TCR_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0')
            throw DataError("TCR_SEED: not an integer: " + std::string(env));
        c.seed = v;
    }
}

}  // namespace tcr
