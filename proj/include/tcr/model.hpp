#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "tcr/config.hpp"
#include "tcr/data.hpp"
#include "tcr/mat.hpp"
#include "tcr/vocab.hpp"

namespace tcr {

struct Span {
    size_t begin = 0, end = 0;
    size_t size() const { return end - begin; }
    bool contains(size_t p) const { return p >= begin && p < end; }
};

// Assembled model input: [CLS] | L frame placeholders | n text tokens |
// [SEP] | title region. Segment 0 covers everything up to and including
// [SEP]; the title region is segment 1.
struct TokenizedInput {
    std::vector<int> ids;
    std::vector<int> positions;
    std::vector<int> segments;
    Span frame_span, text_span, title_span;
    size_t sep_pos = 0;
    std::vector<size_t> masked_positions;  // absolute, sorted
    std::vector<int> masked_targets;       // train mode only
    bool title_truncated = false;

    size_t length() const { return ids.size(); }
    size_t src_len() const { return title_span.begin; }
};

enum class AssemblyMode { kTrain, kDecode };

struct AblationFlags {
    bool use_text = true;
    bool use_visual = true;
};

// Number of masked title positions for a title region of length m_prime.
inline size_t masked_count(const ModelConfig& cfg, size_t m_prime) {
    if (m_prime == 0) return 0;
    size_t cnt = static_cast<size_t>(
        std::ceil(static_cast<double>(cfg.mask_fraction) *
                  static_cast<double>(m_prime)));
    cnt = std::min<size_t>(cnt, cfg.mask_cap);
    cnt = std::min(cnt, m_prime);
    return std::max<size_t>(cnt, 1);
}

// mode == kTrain: the title region holds the gold title (plus [SEP] when
// append_eos is set) with a seeded random 20%-capped subset replaced by
// [MASK]. mode == kDecode: the title region holds *decode_prefix plus a
// single [MASK] at the next position.
inline TokenizedInput assemble_input(const Sample& sample, const Vocab& vocab,
                                     const ModelConfig& cfg, AssemblyMode mode,
                                     uint64_t mask_seed = 0,
                                     const std::vector<int>* decode_prefix =
                                         nullptr,
                                     AblationFlags ablation = {}) {
    TokenizedInput out;

    std::vector<int> title_region;
    if (mode == AssemblyMode::kTrain) {
        std::vector<int> title_ids = encode(vocab, sample.title);
        if (title_ids.size() > cfg.m_max) {
            title_ids.resize(cfg.m_max);
            out.title_truncated = true;
        }
        title_region = std::move(title_ids);
        if (cfg.append_eos) title_region.push_back(Vocab::kSep);
    } else {
        if (decode_prefix) title_region = *decode_prefix;
        title_region.push_back(Vocab::kMask);
    }
    const size_t m_prime = title_region.size();

    const size_t L = ablation.use_visual ? sample.frames.L : 0;
    std::vector<int> text_ids;
    if (ablation.use_text) text_ids = encode(vocab, sample.combined_text());

    const size_t fixed = 1 + L + 1 + m_prime;  // [CLS], frames, [SEP], title
    if (fixed > cfg.max_seq)
        throw DataError("assemble_input: frames+title exceed max_seq");
    if (text_ids.size() > cfg.max_seq - fixed)
        text_ids.resize(cfg.max_seq - fixed);
    const size_t n = text_ids.size();
    if (n == 0 && L == 0)
        throw DataError("assemble_input: no input content to attend to");

    const size_t total = fixed + n;
    out.ids.reserve(total);
    out.ids.push_back(Vocab::kCls);
    out.frame_span = {1, 1 + L};
    for (size_t l = 0; l < L; ++l) out.ids.push_back(Vocab::kUnk);
    out.text_span = {1 + L, 1 + L + n};
    out.ids.insert(out.ids.end(), text_ids.begin(), text_ids.end());
    out.sep_pos = out.ids.size();
    out.ids.push_back(Vocab::kSep);
    out.title_span = {out.ids.size(), out.ids.size() + m_prime};
    out.ids.insert(out.ids.end(), title_region.begin(), title_region.end());

    out.positions.resize(total);
    out.segments.resize(total);
    for (size_t p = 0; p < total; ++p) {
        out.positions[p] = static_cast<int>(p);
        out.segments[p] = out.title_span.contains(p) ? 1 : 0;
    }

    if (mode == AssemblyMode::kTrain) {
        const size_t cnt = masked_count(cfg, m_prime);
        std::vector<size_t> offsets(m_prime);
        for (size_t i = 0; i < m_prime; ++i) offsets[i] = i;
        std::mt19937_64 rng(mask_seed);
        for (size_t i = 0; i < cnt; ++i) {
            std::uniform_int_distribution<size_t> d(i, m_prime - 1);
            std::swap(offsets[i], offsets[d(rng)]);
        }
        offsets.resize(cnt);
        std::sort(offsets.begin(), offsets.end());
        for (size_t off : offsets) {
            const size_t p = out.title_span.begin + off;
            out.masked_positions.push_back(p);
            out.masked_targets.push_back(out.ids[p]);
            out.ids[p] = Vocab::kMask;
        }
    } else {
        out.masked_positions.push_back(out.title_span.end - 1);
    }
    return out;
}

// --------------------------------------------------------------------------
// Parameters
// --------------------------------------------------------------------------

template <class S>
struct Parameters {
    ModelConfig cfg;
    Tensor<S> tok, pos, seg, frame_w, frame_b;
    struct Layer {
        Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<S> ln1_g, ln1_b;
        Tensor<S> ff1_w, ff1_b, ff2_w, ff2_b;
        Tensor<S> ln2_g, ln2_b;
    };
    std::vector<Layer> layers;
    Tensor<S> head_w1, head_b1, head_ln_g, head_ln_b, head_w2, head_b2;

    static Parameters allocate(const ModelConfig& cfg) {
        cfg.validate();
        if (cfg.vocab_size == 0)
            throw DataError("Parameters: vocab_size not set");
        Parameters p;
        p.cfg = cfg;
        const uint32_t d = cfg.d_h, f = cfg.ff_dim(), V = cfg.vocab_size;
        p.tok = Tensor<S>({V, d});
        p.pos = Tensor<S>({cfg.max_seq, d});
        p.seg = Tensor<S>({2, d});
        p.frame_w = Tensor<S>({cfg.d_v, d});
        p.frame_b = Tensor<S>({d});
        p.layers.resize(cfg.layers);
        for (auto& l : p.layers) {
            l.wq = Tensor<S>({d, d});
            l.bq = Tensor<S>({d});
            l.wk = Tensor<S>({d, d});
            l.bk = Tensor<S>({d});
            l.wv = Tensor<S>({d, d});
            l.bv = Tensor<S>({d});
            l.wo = Tensor<S>({d, d});
            l.bo = Tensor<S>({d});
            l.ln1_g = Tensor<S>({d});
            l.ln1_b = Tensor<S>({d});
            l.ff1_w = Tensor<S>({d, f});
            l.ff1_b = Tensor<S>({f});
            l.ff2_w = Tensor<S>({f, d});
            l.ff2_b = Tensor<S>({d});
            l.ln2_g = Tensor<S>({d});
            l.ln2_b = Tensor<S>({d});
        }
        p.head_w1 = Tensor<S>({d, d});
        p.head_b1 = Tensor<S>({d});
        p.head_ln_g = Tensor<S>({d});
        p.head_ln_b = Tensor<S>({d});
        p.head_w2 = Tensor<S>({d, V});
        p.head_b2 = Tensor<S>({V});
        return p;
    }

    template <class F>
    void for_each_tensor(F f) {
        f("tok_embedding", tok);
        f("pos_embedding", pos);
        f("seg_embedding", seg);
        f("frame_proj_w", frame_w);
        f("frame_proj_b", frame_b);
        for (size_t i = 0; i < layers.size(); ++i) {
            const std::string pre = "layer" + std::to_string(i) + ".";
            auto& l = layers[i];
            f(pre + "wq", l.wq);
            f(pre + "bq", l.bq);
            f(pre + "wk", l.wk);
            f(pre + "bk", l.bk);
            f(pre + "wv", l.wv);
            f(pre + "bv", l.bv);
            f(pre + "wo", l.wo);
            f(pre + "bo", l.bo);
            f(pre + "ln1_g", l.ln1_g);
            f(pre + "ln1_b", l.ln1_b);
            f(pre + "ff1_w", l.ff1_w);
            f(pre + "ff1_b", l.ff1_b);
            f(pre + "ff2_w", l.ff2_w);
            f(pre + "ff2_b", l.ff2_b);
            f(pre + "ln2_g", l.ln2_g);
            f(pre + "ln2_b", l.ln2_b);
        }
        f("head_w1", head_w1);
        f("head_b1", head_b1);
        f("head_ln_g", head_ln_g);
        f("head_ln_b", head_ln_b);
        f("head_w2", head_w2);
        f("head_b2", head_b2);
    }

    template <class F>
    void for_each_tensor(F f) const {
        const_cast<Parameters*>(this)->for_each_tensor(
            [&](const std::string& n, Tensor<S>& t) {
                f(n, const_cast<const Tensor<S>&>(t));
            });
    }

    void zero() {
        for_each_tensor([](const std::string&, Tensor<S>& t) { t.zero(); });
    }
};

// Truncated normal (std 0.02, clipped at two sigma), LN gain 1, biases 0.
template <class S>
Parameters<S> init_parameters(const ModelConfig& cfg, uint64_t seed) {
    Parameters<S> p = Parameters<S>::allocate(cfg);
    std::mt19937_64 rng(mix_seed(seed, 0x1417ULL));
    std::normal_distribution<double> normal(0.0, 1.0);
    auto trunc_normal = [&]() {
        double z = normal(rng);
        while (std::abs(z) > 2.0) z = normal(rng);
        return static_cast<S>(0.02 * z);
    };
    p.for_each_tensor([&](const std::string& name, Tensor<S>& t) {
        if (name.find("ln") != std::string::npos) {
            const bool gain = name.find("_g") != std::string::npos;
            std::fill(t.v.begin(), t.v.end(), gain ? S(1) : S(0));
        } else if (t.shape.size() == 1) {
            t.zero();
        } else {
            for (auto& x : t.v) x = trunc_normal();
        }
    });
    if (cfg.tie_lm_head) p.head_w2.zero();
    return p;
}

template <class S>
Parameters<S> cast_parameters(const Parameters<float>& src) {
    Parameters<S> dst = Parameters<S>::allocate(src.cfg);
    std::vector<const Tensor<float>*> in;
    src.for_each_tensor([&](const std::string&, const Tensor<float>& t) {
        in.push_back(&t);
    });
    size_t i = 0;
    dst.for_each_tensor([&](const std::string&, Tensor<S>& t) {
        for (size_t j = 0; j < t.v.size(); ++j)
            t.v[j] = static_cast<S>(in[i]->v[j]);
        ++i;
    });
    return dst;
}

// --------------------------------------------------------------------------
// Embedding: X[p] = tok-or-projected-frame + position + segment. Frame
// positions ignore the placeholder id entirely.
// --------------------------------------------------------------------------

template <class S>
Mat<S> embed(const TokenizedInput& in, const FrameFeatures& frames,
             const Parameters<S>& params) {
    const uint32_t d = params.cfg.d_h;
    Mat<S> x(in.length(), d);
    for (size_t p = 0; p < in.length(); ++p) {
        S* xp = x.row(p);
        if (in.frame_span.contains(p)) {
            const size_t l = p - in.frame_span.begin;
            const float* v = frames.frame(l);
            for (uint32_t j = 0; j < d; ++j) {
                S acc = params.frame_b.v[j];
                for (uint32_t i = 0; i < params.cfg.d_v; ++i)
                    acc += static_cast<S>(v[i]) * params.frame_w.v[i * d + j];
                xp[j] = acc;
            }
        } else {
            const S* row = params.tok.data() +
                           static_cast<size_t>(in.ids[p]) * d;
            for (uint32_t j = 0; j < d; ++j) xp[j] = row[j];
        }
        const S* pr = params.pos.data() +
                      static_cast<size_t>(in.positions[p]) * d;
        const S* sr = params.seg.data() +
                      static_cast<size_t>(in.segments[p]) * d;
        for (uint32_t j = 0; j < d; ++j) xp[j] += pr[j] + sr[j];
    }
    return x;
}

// Additive {0, -inf} mask. Source positions attend bidirectionally among
// themselves and never into the title; title position q sees all source
// positions and title positions <= q.
template <class S>
Mat<S> build_attention_mask(const TokenizedInput& in) {
    const size_t n = in.length(), src = in.src_len();
    const S ninf = -std::numeric_limits<S>::infinity();
    Mat<S> m(n, n);
    for (size_t q = 0; q < n; ++q) {
        S* r = m.row(q);
        for (size_t k = 0; k < n; ++k) {
            const bool k_src = k < src;
            const bool ok = q < src ? k_src : (k_src || k <= q);
            r[k] = ok ? S(0) : ninf;
        }
    }
    return m;
}

// --------------------------------------------------------------------------
// Encoder stack
// --------------------------------------------------------------------------

inline constexpr double kLnEps = 1e-5;

template <class S>
struct LnCache {
    Mat<S> xhat;
    std::vector<S> rstd;
};

template <class S>
void layer_norm(const Mat<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                Mat<S>& out, LnCache<S>& cache) {
    const size_t n = x.cols;
    cache.xhat = Mat<S>(x.rows, n);
    cache.rstd.assign(x.rows, S(0));
    out = Mat<S>(x.rows, n);
    for (size_t r = 0; r < x.rows; ++r) {
        const S* xr = x.row(r);
        S mean = 0;
        for (size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<S>(n);
        S var = 0;
        for (size_t j = 0; j < n; ++j) {
            const S d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<S>(n);
        const S rstd = S(1) / std::sqrt(var + static_cast<S>(kLnEps));
        cache.rstd[r] = rstd;
        S* hr = cache.xhat.row(r);
        S* or_ = out.row(r);
        for (size_t j = 0; j < n; ++j) {
            hr[j] = (xr[j] - mean) * rstd;
            or_[j] = gain.v[j] * hr[j] + bias.v[j];
        }
    }
}

template <class S>
void layer_norm_backward(const Mat<S>& dout, const LnCache<S>& cache,
                         const Tensor<S>& gain, Mat<S>& dx, Tensor<S>& dgain,
                         Tensor<S>& dbias) {
    const size_t n = dout.cols;
    dx = Mat<S>(dout.rows, n);
    for (size_t r = 0; r < dout.rows; ++r) {
        const S* dr = dout.row(r);
        const S* hr = cache.xhat.row(r);
        S sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (size_t j = 0; j < n; ++j) {
            const S dxhat = dr[j] * gain.v[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * hr[j];
            dgain.v[j] += dr[j] * hr[j];
            dbias.v[j] += dr[j];
        }
        const S inv_n = S(1) / static_cast<S>(n);
        S* dxr = dx.row(r);
        for (size_t j = 0; j < n; ++j) {
            const S dxhat = dr[j] * gain.v[j];
            dxr[j] = cache.rstd[r] *
                     (dxhat - sum_dxhat * inv_n - hr[j] * sum_dxhat_xhat * inv_n);
        }
    }
}

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <class S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2)));
    const S pdf = std::exp(S(-0.5) * x * x) *
                  S(0.3989422804014327);  // 1/sqrt(2*pi)
    return cdf + x * pdf;
}

enum class RunMode { kTrain, kEval };

template <class S>
struct LayerCache {
    Mat<S> x_in;
    Mat<S> q, k, v;
    std::vector<Mat<S>> attn;       // per-head, post-softmax, pre-dropout
    std::vector<Mat<S>> attn_used;  // post-dropout; empty in eval mode
    Mat<S> ctx;
    LnCache<S> ln1;
    Mat<S> x1;
    Mat<S> ff_pre, ff_act;
    LnCache<S> ln2;
    Mat<S> x_out;

    const Mat<S>& attn_effective(size_t h) const {
        return attn_used.empty() ? attn[h] : attn_used[h];
    }
};

// Per-layer outputs O_i plus retained attention probabilities A_i.
template <class S>
struct Activations {
    RunMode mode = RunMode::kEval;
    float dropout = 0.0f;
    Mat<S> x0;
    std::vector<LayerCache<S>> layers;

    const Mat<S>& output() const {
        return layers.empty() ? x0 : layers.back().x_out;
    }
    const Mat<S>& layer_output(size_t i) const {  // O_i, i in [0, layers]
        return i == 0 ? x0 : layers[i - 1].x_out;
    }
};

template <class S>
void linear(const Mat<S>& x, const Tensor<S>& w, const Tensor<S>& b,
            Mat<S>& out) {
    out = Mat<S>(x.rows, w.shape[1]);
    gemm(x.v.data(), w.data(), out.v.data(), x.rows, x.cols, w.shape[1]);
    add_bias_rows(out, b.data());
}

// Multi-head self attention + FFN with post-sublayer residual LayerNorm.
// Per-head scale is 1/sqrt(d_h/H). Dropout applies to attention
// probabilities in train mode only; the pre-dropout copy is retained.
template <class S>
Activations<S> encoder_forward(const Mat<S>& x_vt, const Mat<S>& mask,
                               const Parameters<S>& params, RunMode mode,
                               std::mt19937_64* rng = nullptr) {
    const ModelConfig& cfg = params.cfg;
    const size_t n = x_vt.rows;
    const uint32_t d = cfg.d_h, H = cfg.heads, hd = cfg.head_dim();
    const S inv_scale = S(1) / std::sqrt(static_cast<S>(hd));
    const bool drop = mode == RunMode::kTrain && cfg.dropout > 0.0f;
    if (drop && !rng)
        throw DataError("encoder_forward: train mode requires an rng");

    Activations<S> acts;
    acts.mode = mode;
    acts.dropout = cfg.dropout;
    acts.x0 = x_vt;
    acts.layers.resize(cfg.layers);

    const Mat<S>* cur = &acts.x0;
    for (uint32_t li = 0; li < cfg.layers; ++li) {
        LayerCache<S>& lc = acts.layers[li];
        const auto& lp = params.layers[li];
        lc.x_in = *cur;
        linear(lc.x_in, lp.wq, lp.bq, lc.q);
        linear(lc.x_in, lp.wk, lp.bk, lc.k);
        linear(lc.x_in, lp.wv, lp.bv, lc.v);

        lc.attn.assign(H, Mat<S>(n, n));
        if (drop) lc.attn_used.assign(H, Mat<S>(n, n));
        lc.ctx = Mat<S>(n, d);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        const S keep_scale = S(1) / (S(1) - static_cast<S>(cfg.dropout));

        for (uint32_t h = 0; h < H; ++h) {
            Mat<S>& p = lc.attn[h];
            const size_t col = static_cast<size_t>(h) * hd;
            for (size_t qi = 0; qi < n; ++qi) {
                S* pr = p.row(qi);
                const S* qrow = lc.q.row(qi) + col;
                const S* mrow = mask.row(qi);
                S mx = -std::numeric_limits<S>::infinity();
                for (size_t ki = 0; ki < n; ++ki) {
                    const S* krow = lc.k.row(ki) + col;
                    S s = 0;
                    for (uint32_t j = 0; j < hd; ++j) s += qrow[j] * krow[j];
                    s = s * inv_scale + mrow[ki];
                    pr[ki] = s;
                    if (s > mx) mx = s;
                }
                S denom = 0;
                for (size_t ki = 0; ki < n; ++ki) {
                    pr[ki] = std::exp(pr[ki] - mx);
                    denom += pr[ki];
                }
                const S inv = S(1) / denom;
                for (size_t ki = 0; ki < n; ++ki) pr[ki] *= inv;
            }
            const Mat<S>* p_used = &p;
            if (drop) {
                Mat<S>& pd = lc.attn_used[h];
                for (size_t i = 0; i < p.size(); ++i)
                    pd.v[i] = uni(*rng) < cfg.dropout ? S(0)
                                                      : p.v[i] * keep_scale;
                p_used = &pd;
            }
            for (size_t qi = 0; qi < n; ++qi) {
                const S* pr = p_used->row(qi);
                S* cr = lc.ctx.row(qi) + col;
                for (uint32_t j = 0; j < hd; ++j) cr[j] = S(0);
                for (size_t ki = 0; ki < n; ++ki) {
                    const S w = pr[ki];
                    if (w == S(0)) continue;
                    const S* vrow = lc.v.row(ki) + col;
                    for (uint32_t j = 0; j < hd; ++j) cr[j] += w * vrow[j];
                }
            }
        }

        Mat<S> attn_out;
        linear(lc.ctx, lp.wo, lp.bo, attn_out);
        Mat<S> res1(n, d);
        for (size_t i = 0; i < res1.size(); ++i)
            res1.v[i] = lc.x_in.v[i] + attn_out.v[i];
        layer_norm(res1, lp.ln1_g, lp.ln1_b, lc.x1, lc.ln1);

        linear(lc.x1, lp.ff1_w, lp.ff1_b, lc.ff_pre);
        lc.ff_act = Mat<S>(n, cfg.ff_dim());
        for (size_t i = 0; i < lc.ff_pre.size(); ++i)
            lc.ff_act.v[i] = gelu(lc.ff_pre.v[i]);
        Mat<S> ff_out;
        linear(lc.ff_act, lp.ff2_w, lp.ff2_b, ff_out);
        Mat<S> res2(n, d);
        for (size_t i = 0; i < res2.size(); ++i)
            res2.v[i] = lc.x1.v[i] + ff_out.v[i];
        layer_norm(res2, lp.ln2_g, lp.ln2_b, lc.x_out, lc.ln2);

        if (!mat_finite(lc.x_out))
            throw NumericalError("numerical divergence in encoder layer " +
                                 std::to_string(li));
        cur = &lc.x_out;
    }
    return acts;
}

// --------------------------------------------------------------------------
// LM head: Dense -> GELU -> LayerNorm -> Dense over the vocabulary.
// --------------------------------------------------------------------------

template <class S>
struct HeadCache {
    Mat<S> h_in;    // rows at masked positions
    Mat<S> d1;      // pre-GELU
    Mat<S> act;
    LnCache<S> ln;
    Mat<S> ln_out;
    Mat<S> logits;  // rows x |V|
};

template <class S>
HeadCache<S> lm_head(const Mat<S>& hidden_rows, const Parameters<S>& params) {
    HeadCache<S> c;
    c.h_in = hidden_rows;
    linear(c.h_in, params.head_w1, params.head_b1, c.d1);
    c.act = Mat<S>(c.d1.rows, c.d1.cols);
    for (size_t i = 0; i < c.d1.size(); ++i) c.act.v[i] = gelu(c.d1.v[i]);
    layer_norm(c.act, params.head_ln_g, params.head_ln_b, c.ln_out, c.ln);
    if (params.cfg.tie_lm_head) {
        c.logits = Mat<S>(c.ln_out.rows, params.cfg.vocab_size);
        gemm_tB(c.ln_out.v.data(), params.tok.data(), c.logits.v.data(),
                c.ln_out.rows, params.cfg.d_h, params.cfg.vocab_size);
        add_bias_rows(c.logits, params.head_b2.data());
    } else {
        linear(c.ln_out, params.head_w2, params.head_b2, c.logits);
    }
    return c;
}

template <class S>
Mat<S> gather_rows(const Mat<S>& x, const std::vector<size_t>& rows) {
    Mat<S> out(rows.size(), x.cols);
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < x.cols; ++j) out.at(i, j) = x.at(rows[i], j);
    return out;
}

// Mean token-level cross entropy over masked positions, accumulated in
// double regardless of the compute type.
template <class S>
double training_loss(const Mat<S>& logits, const std::vector<int>& targets) {
    if (logits.rows == 0) throw DataError("training_loss: nothing to predict");
    if (targets.size() != logits.rows)
        throw DataError("training_loss: one target per masked position");
    double total = 0;
    for (size_t r = 0; r < logits.rows; ++r) {
        const S* lr = logits.row(r);
        double mx = -std::numeric_limits<double>::infinity();
        for (size_t j = 0; j < logits.cols; ++j)
            mx = std::max(mx, static_cast<double>(lr[j]));
        double denom = 0;
        for (size_t j = 0; j < logits.cols; ++j)
            denom += std::exp(static_cast<double>(lr[j]) - mx);
        const double lse = mx + std::log(denom);
        total += lse - static_cast<double>(lr[targets[r]]);
    }
    const double loss = total / static_cast<double>(logits.rows);
    if (!std::isfinite(loss)) throw NumericalError("non-finite training loss");
    return loss;
}

// dL/dlogits for the mean cross entropy above: (softmax - onehot) / rows.
template <class S>
Mat<S> training_loss_grad(const Mat<S>& logits,
                          const std::vector<int>& targets) {
    Mat<S> d(logits.rows, logits.cols);
    const S inv_rows = S(1) / static_cast<S>(logits.rows);
    for (size_t r = 0; r < logits.rows; ++r) {
        const S* lr = logits.row(r);
        S* dr = d.row(r);
        S mx = lr[0];
        for (size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, lr[j]);
        S denom = 0;
        for (size_t j = 0; j < logits.cols; ++j) {
            dr[j] = std::exp(lr[j] - mx);
            denom += dr[j];
        }
        const S inv = S(1) / denom;
        for (size_t j = 0; j < logits.cols; ++j) dr[j] *= inv * inv_rows;
        dr[targets[r]] -= inv_rows;
    }
    return d;
}

// --------------------------------------------------------------------------
// Backward
// --------------------------------------------------------------------------

namespace detail {

template <class S>
void linear_backward(const Mat<S>& x, const Tensor<S>& w, const Mat<S>& dout,
                     Tensor<S>& dw, Tensor<S>& db, Mat<S>* dx) {
    gemm_acc_tA(x.v.data(), dout.v.data(), dw.data(), x.rows, x.cols,
                dout.cols);
    for (size_t r = 0; r < dout.rows; ++r) {
        const S* dr = dout.row(r);
        for (size_t j = 0; j < dout.cols; ++j) db.v[j] += dr[j];
    }
    if (dx) {
        *dx = Mat<S>(x.rows, x.cols);
        gemm_tB(dout.v.data(), w.data(), dx->v.data(), dout.rows, dout.cols,
                x.cols);
    }
}

}  // namespace detail

// Backward through head + encoder + embedding, accumulating into `grads`
// (which must be allocated and zeroed/accumulated by the caller).
template <class S>
void model_backward(const TokenizedInput& in, const FrameFeatures& frames,
                    const Parameters<S>& params, const Activations<S>& acts,
                    const HeadCache<S>& head, const Mat<S>& dlogits,
                    Parameters<S>& grads) {
    const ModelConfig& cfg = params.cfg;
    const size_t n = in.length();
    const uint32_t d = cfg.d_h, H = cfg.heads, hd = cfg.head_dim();
    const S inv_scale = S(1) / std::sqrt(static_cast<S>(hd));
    const bool drop = acts.mode == RunMode::kTrain && acts.dropout > 0.0f;
    const S keep_scale = S(1) / (S(1) - static_cast<S>(acts.dropout));

    // ---- LM head ----
    Mat<S> d_lnout;
    if (cfg.tie_lm_head) {
        d_lnout = Mat<S>(dlogits.rows, d);
        gemm(dlogits.v.data(), params.tok.data(), d_lnout.v.data(),
             dlogits.rows, dlogits.cols, d);
        gemm_acc_tA(dlogits.v.data(), head.ln_out.v.data(), grads.tok.data(),
                    dlogits.rows, dlogits.cols, d);
        for (size_t r = 0; r < dlogits.rows; ++r)
            for (size_t j = 0; j < dlogits.cols; ++j)
                grads.head_b2.v[j] += dlogits.at(r, j);
    } else {
        detail::linear_backward(head.ln_out, params.head_w2, dlogits,
                                grads.head_w2, grads.head_b2, &d_lnout);
    }
    Mat<S> d_act;
    layer_norm_backward(d_lnout, head.ln, params.head_ln_g, d_act,
                        grads.head_ln_g, grads.head_ln_b);
    Mat<S> d_d1(d_act.rows, d_act.cols);
    for (size_t i = 0; i < d_act.size(); ++i)
        d_d1.v[i] = d_act.v[i] * gelu_grad(head.d1.v[i]);
    Mat<S> d_hrows;
    detail::linear_backward(head.h_in, params.head_w1, d_d1, grads.head_w1,
                            grads.head_b1, &d_hrows);

    // Scatter masked-row gradients into the final encoder output.
    Mat<S> d_out(n, d);
    for (size_t i = 0; i < in.masked_positions.size(); ++i) {
        const size_t p = in.masked_positions[i];
        for (uint32_t j = 0; j < d; ++j) d_out.at(p, j) = d_hrows.at(i, j);
    }

    // ---- Encoder layers, reversed ----
    for (size_t li = acts.layers.size(); li-- > 0;) {
        const LayerCache<S>& lc = acts.layers[li];
        const auto& lp = params.layers[li];
        auto& lg = grads.layers[li];

        Mat<S> d_res2;
        layer_norm_backward(d_out, lc.ln2, lp.ln2_g, d_res2, lg.ln2_g,
                            lg.ln2_b);
        Mat<S> d_x1 = d_res2;  // residual branch

        Mat<S> d_ffact;
        detail::linear_backward(lc.ff_act, lp.ff2_w, d_res2, lg.ff2_w,
                                lg.ff2_b, &d_ffact);
        Mat<S> d_ffpre(d_ffact.rows, d_ffact.cols);
        for (size_t i = 0; i < d_ffact.size(); ++i)
            d_ffpre.v[i] = d_ffact.v[i] * gelu_grad(lc.ff_pre.v[i]);
        Mat<S> d_x1_ff;
        detail::linear_backward(lc.x1, lp.ff1_w, d_ffpre, lg.ff1_w, lg.ff1_b,
                                &d_x1_ff);
        for (size_t i = 0; i < d_x1.size(); ++i) d_x1.v[i] += d_x1_ff.v[i];

        Mat<S> d_res1;
        layer_norm_backward(d_x1, lc.ln1, lp.ln1_g, d_res1, lg.ln1_g,
                            lg.ln1_b);
        Mat<S> d_xin = d_res1;  // residual branch

        Mat<S> d_ctx;
        detail::linear_backward(lc.ctx, lp.wo, d_res1, lg.wo, lg.bo, &d_ctx);

        Mat<S> d_q(n, d), d_k(n, d), d_v(n, d);
        for (uint32_t h = 0; h < H; ++h) {
            const size_t col = static_cast<size_t>(h) * hd;
            const Mat<S>& p_pre = lc.attn[h];
            const Mat<S>& p_used = lc.attn_effective(h);
            for (size_t qi = 0; qi < n; ++qi) {
                const S* dctx = d_ctx.row(qi) + col;
                const S* pu = p_used.row(qi);
                const S* pp = p_pre.row(qi);
                // dV += P_used^T dctx ; dP_used = dctx V^T
                std::vector<S> dp(n, S(0));
                for (size_t ki = 0; ki < n; ++ki) {
                    const S w = pu[ki];
                    const S* vrow = lc.v.row(ki) + col;
                    S acc = 0;
                    for (uint32_t j = 0; j < hd; ++j) acc += dctx[j] * vrow[j];
                    dp[ki] = acc;
                    if (w != S(0)) {
                        S* dvrow = d_v.row(ki) + col;
                        for (uint32_t j = 0; j < hd; ++j)
                            dvrow[j] += w * dctx[j];
                    }
                }
                if (drop) {
                    for (size_t ki = 0; ki < n; ++ki)
                        dp[ki] = pu[ki] > S(0) ? dp[ki] * keep_scale : S(0);
                }
                // softmax backward on the pre-dropout probabilities
                S dot = 0;
                for (size_t ki = 0; ki < n; ++ki) dot += dp[ki] * pp[ki];
                const S* qrow = lc.q.row(qi) + col;
                S* dqrow = d_q.row(qi) + col;
                for (size_t ki = 0; ki < n; ++ki) {
                    const S ds = pp[ki] * (dp[ki] - dot) * inv_scale;
                    if (ds == S(0)) continue;
                    const S* krow = lc.k.row(ki) + col;
                    S* dkrow = d_k.row(ki) + col;
                    for (uint32_t j = 0; j < hd; ++j) {
                        dqrow[j] += ds * krow[j];
                        dkrow[j] += ds * qrow[j];
                    }
                }
            }
        }

        Mat<S> d_tmp;
        detail::linear_backward(lc.x_in, lp.wq, d_q, lg.wq, lg.bq, &d_tmp);
        for (size_t i = 0; i < d_xin.size(); ++i) d_xin.v[i] += d_tmp.v[i];
        detail::linear_backward(lc.x_in, lp.wk, d_k, lg.wk, lg.bk, &d_tmp);
        for (size_t i = 0; i < d_xin.size(); ++i) d_xin.v[i] += d_tmp.v[i];
        detail::linear_backward(lc.x_in, lp.wv, d_v, lg.wv, lg.bv, &d_tmp);
        for (size_t i = 0; i < d_xin.size(); ++i) d_xin.v[i] += d_tmp.v[i];

        d_out = std::move(d_xin);
    }

    // ---- Embedding ----
    for (size_t p = 0; p < n; ++p) {
        const S* dx = d_out.row(p);
        if (in.frame_span.contains(p)) {
            const float* v = frames.frame(p - in.frame_span.begin);
            for (uint32_t i = 0; i < cfg.d_v; ++i) {
                const S vi = static_cast<S>(v[i]);
                S* gw = grads.frame_w.data() + static_cast<size_t>(i) * d;
                for (uint32_t j = 0; j < d; ++j) gw[j] += vi * dx[j];
            }
            for (uint32_t j = 0; j < d; ++j) grads.frame_b.v[j] += dx[j];
        } else {
            S* gt = grads.tok.data() + static_cast<size_t>(in.ids[p]) * d;
            for (uint32_t j = 0; j < d; ++j) gt[j] += dx[j];
        }
        S* gp = grads.pos.data() + static_cast<size_t>(in.positions[p]) * d;
        S* gs = grads.seg.data() + static_cast<size_t>(in.segments[p]) * d;
        for (uint32_t j = 0; j < d; ++j) {
            gp[j] += dx[j];
            gs[j] += dx[j];
        }
    }
}

// --------------------------------------------------------------------------
// Whole-model convenience wrappers
// --------------------------------------------------------------------------

template <class S>
struct ForwardResult {
    Activations<S> acts;
    HeadCache<S> head;
    double loss = 0;
};

// Forward through embedding, encoder and LM head at the masked positions.
// When `grads` is non-null also runs the full backward for the mean
// cross-entropy loss.
template <class S>
ForwardResult<S> masked_lm_step(const Parameters<S>& params,
                                const TokenizedInput& in,
                                const FrameFeatures& frames, RunMode mode,
                                std::mt19937_64* rng = nullptr,
                                Parameters<S>* grads = nullptr) {
    ForwardResult<S> r;
    Mat<S> x = embed(in, frames, params);
    Mat<S> mask = build_attention_mask<S>(in);
    r.acts = encoder_forward(x, mask, params, mode, rng);
    r.head = lm_head(gather_rows(r.acts.output(), in.masked_positions),
                     params);
    if (!in.masked_targets.empty()) {
        r.loss = training_loss(r.head.logits, in.masked_targets);
        if (grads) {
            Mat<S> dlogits =
                training_loss_grad(r.head.logits, in.masked_targets);
            model_backward(in, frames, params, r.acts, r.head, dlogits,
                           *grads);
        }
    }
    return r;
}

}  // namespace tcr
