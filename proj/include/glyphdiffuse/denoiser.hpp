#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "glyphdiffuse/checkpoint.hpp"
#include "glyphdiffuse/conditioning.hpp"
#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/ops.hpp"

// The noise predictor: a small U-Net over latents. Residual blocks carry the
// (timestep + style) embedding, attention-enabled levels add multi-head
// self-attention plus cross-attention over the text context, encoder levels
// downsample by 2, and the decoder mirrors them with concatenated skips.
//
// Parameter discipline: every trainable tensor is reachable through walk(),
// which assigns each a unique, construction-ordered name. attach() must be
// called once per fresh recording tape before predict_noise; inference tapes
// need no attach.

namespace gdf {

struct DenoiserConfig {
    int in_channels = 4;
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2};
    int resnet_blocks_per_level = 1;
    int attention_heads = 2;
    std::vector<int> attention_levels = {1};  // desk default: lowest level only
    int text_dim = 32;
    int max_text_len = 8;
    double pe_base = 1000.0;
    bool text_positional_encoding = true;
    bool text_attention = true;
    bool zero_init_final = true;

    int levels() const { return int(channel_multipliers.size()); }
    int channels_at(int level) const { return base_channels * channel_multipliers[size_t(level)]; }
    int temb_dim() const { return 4 * base_channels; }

    bool has_attention(int level) const {
        for (int l : attention_levels)
            if (l == level) return true;
        return false;
    }

    void validate() const {
        if (in_channels < 1 || base_channels < 1 || text_dim < 1 || max_text_len < 1)
            throw validation_error("denoiser config: counts must be positive");
        if (base_channels % 2 != 0)
            throw validation_error("denoiser config: base_channels must be even for the "
                                   "sinusoidal timestep embedding");
        if (text_positional_encoding && text_dim % 2 != 0)
            throw validation_error("denoiser config: text_dim must be even when positional "
                                   "encoding is enabled");
        if (channel_multipliers.empty())
            throw validation_error("denoiser config: need at least one resolution level");
        for (int m : channel_multipliers)
            if (m < 1) throw validation_error("denoiser config: channel multipliers must be >= 1");
        if (resnet_blocks_per_level < 1)
            throw validation_error("denoiser config: resnet_blocks_per_level must be >= 1");
        if (attention_heads < 1)
            throw validation_error("denoiser config: attention_heads must be >= 1");
        for (int l : attention_levels) {
            if (l < 0 || l >= levels())
                throw validation_error("denoiser config: attention level " + std::to_string(l) +
                                       " out of range");
            if (channels_at(l) % attention_heads != 0)
                throw validation_error("denoiser config: " + std::to_string(attention_heads) +
                                       " heads do not divide width " +
                                       std::to_string(channels_at(l)));
        }
    }
};

namespace unet {

template <class S>
TensorT<S> conv_init(std::vector<int> shape, Rng& rng) {
    const double fan_in = double(shape[1]) * shape[2] * shape[3];
    return TensorT<S>::randn(shape, rng, 1.0 / std::sqrt(fan_in));
}

template <class S>
TensorT<S> linear_init(std::vector<int> shape, Rng& rng) {
    return TensorT<S>::randn(shape, rng, 1.0 / std::sqrt(double(shape[1])));
}

// GN + SiLU + conv, conditioned residual block. The (timestep + style) vector
// enters through a per-block projection after the first convolution.
template <class S>
struct ResBlock {
    int cin = 0, cout = 0;
    TensorT<S> gn1g, gn1b, w1, b1;
    TensorT<S> pw, pb;
    TensorT<S> gn2g, gn2b, w2, b2;
    TensorT<S> sw, sb;  // 1x1 shortcut, only when cin != cout

    void init(int in, int out, int temb_dim, Rng& rng) {
        cin = in;
        cout = out;
        gn1g = TensorT<S>::full({in}, S(1));
        gn1b = TensorT<S>::zeros({in});
        w1 = conv_init<S>({out, in, 3, 3}, rng);
        b1 = TensorT<S>::zeros({out});
        pw = linear_init<S>({out, temb_dim}, rng);
        pb = TensorT<S>::zeros({out});
        gn2g = TensorT<S>::full({out}, S(1));
        gn2b = TensorT<S>::zeros({out});
        w2 = conv_init<S>({out, out, 3, 3}, rng);
        b2 = TensorT<S>::zeros({out});
        if (in != out) {
            sw = conv_init<S>({out, in, 1, 1}, rng);
            sb = TensorT<S>::zeros({out});
        }
    }

    template <class F>
    void walk(const std::string& p, F&& f) {
        f(p + ".gn1.g", gn1g);
        f(p + ".gn1.b", gn1b);
        f(p + ".conv1.w", w1);
        f(p + ".conv1.b", b1);
        f(p + ".proj.w", pw);
        f(p + ".proj.b", pb);
        f(p + ".gn2.g", gn2g);
        f(p + ".gn2.b", gn2b);
        f(p + ".conv2.w", w2);
        f(p + ".conv2.b", b2);
        if (cin != cout) {
            f(p + ".skip.w", sw);
            f(p + ".skip.b", sb);
        }
    }

    TensorT<S> forward(TapeT<S>& tp, const TensorT<S>& x, const TensorT<S>& cond_act) const {
        TensorT<S> h = ops::group_norm(tp, x, gn1g, gn1b, ops::norm_groups_for(cin));
        h = ops::conv2d(tp, ops::silu(tp, h), w1, b1);
        TensorT<S> pv = ops::linear(tp, cond_act, pw, pb);
        h = ops::add_sample_channel(tp, h, pv);
        h = ops::group_norm(tp, h, gn2g, gn2b, ops::norm_groups_for(cout));
        h = ops::conv2d(tp, ops::silu(tp, h), w2, b2);
        TensorT<S> r = cin == cout ? x : ops::conv2d(tp, x, sw, sb);
        return ops::add(tp, h, r);
    }
};

template <class S>
TensorT<S> split_heads(TapeT<S>& tp, const TensorT<S>& x, int heads) {
    const int B = x.dim(0), N = x.dim(1), C = x.dim(2);
    TensorT<S> r = ops::reshape(tp, x, {B, N, heads, C / heads});
    TensorT<S> p = ops::permute4(tp, r, 0, 2, 1, 3);
    return ops::reshape(tp, p, {B * heads, N, C / heads});
}

template <class S>
TensorT<S> merge_heads(TapeT<S>& tp, const TensorT<S>& x, int heads) {
    const int BH = x.dim(0), N = x.dim(1), D = x.dim(2);
    const int B = BH / heads;
    TensorT<S> r = ops::reshape(tp, x, {B, heads, N, D});
    TensorT<S> p = ops::permute4(tp, r, 0, 2, 1, 3);
    return ops::reshape(tp, p, {B, N, heads * D});
}

// Multi-head attention over the spatial grid. Self-attention keys off the
// normalized hidden state; cross-attention keys off the text context rows.
template <class S>
struct AttnBlock {
    int channels = 0, heads = 1, kv_dim = 0;
    bool cross = false;
    TensorT<S> gng, gnb;
    TensorT<S> qw, qb, kw, kb, vw, vb, ow, ob;

    void init(int ch, int nheads, int kv, bool is_cross, Rng& rng) {
        channels = ch;
        heads = nheads;
        kv_dim = kv;
        cross = is_cross;
        gng = TensorT<S>::full({ch}, S(1));
        gnb = TensorT<S>::zeros({ch});
        qw = linear_init<S>({ch, ch}, rng);
        qb = TensorT<S>::zeros({ch});
        kw = linear_init<S>({ch, kv}, rng);
        kb = TensorT<S>::zeros({ch});
        vw = linear_init<S>({ch, kv}, rng);
        vb = TensorT<S>::zeros({ch});
        ow = linear_init<S>({ch, ch}, rng);
        ob = TensorT<S>::zeros({ch});
    }

    template <class F>
    void walk(const std::string& p, F&& f) {
        f(p + ".gn.g", gng);
        f(p + ".gn.b", gnb);
        f(p + ".q.w", qw);
        f(p + ".q.b", qb);
        f(p + ".k.w", kw);
        f(p + ".k.b", kb);
        f(p + ".v.w", vw);
        f(p + ".v.b", vb);
        f(p + ".o.w", ow);
        f(p + ".o.b", ob);
    }

    TensorT<S> forward(TapeT<S>& tp, const TensorT<S>& x, const TensorT<S>* ctx) const {
        const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int N = H * W;
        TensorT<S> n = ops::group_norm(tp, x, gng, gnb, ops::norm_groups_for(C));
        TensorT<S> tok = ops::reshape(tp, ops::permute4(tp, n, 0, 2, 3, 1), {B, N, C});
        TensorT<S> q2 = ops::linear(tp, ops::reshape(tp, tok, {B * N, C}), qw, qb);
        TensorT<S> q = ops::reshape(tp, q2, {B, N, C});
        TensorT<S> k, v;
        if (cross) {
            const int L = ctx->dim(1), D = ctx->dim(2);
            TensorT<S> flat = ops::reshape(tp, *ctx, {B * L, D});
            k = ops::reshape(tp, ops::linear(tp, flat, kw, kb), {B, L, C});
            v = ops::reshape(tp, ops::linear(tp, flat, vw, vb), {B, L, C});
        } else {
            TensorT<S> flat = ops::reshape(tp, tok, {B * N, C});
            k = ops::reshape(tp, ops::linear(tp, flat, kw, kb), {B, N, C});
            v = ops::reshape(tp, ops::linear(tp, flat, vw, vb), {B, N, C});
        }
        const int d = C / heads;
        TensorT<S> qh = split_heads(tp, q, heads);
        TensorT<S> kh = split_heads(tp, k, heads);
        TensorT<S> vh = split_heads(tp, v, heads);
        TensorT<S> scores = ops::scale(tp, ops::bmm(tp, qh, ops::transpose_last2(tp, kh)),
                                       S(1.0 / std::sqrt(double(d))));
        TensorT<S> att = ops::softmax(tp, scores, 2);
        TensorT<S> oh = merge_heads(tp, ops::bmm(tp, att, vh), heads);
        TensorT<S> o2 = ops::linear(tp, ops::reshape(tp, oh, {B * N, C}), ow, ob);
        TensorT<S> o = ops::permute4(tp, ops::reshape(tp, o2, {B, H, W, C}), 0, 3, 1, 2);
        return ops::add(tp, x, o);
    }
};

}  // namespace unet

template <class S>
class DenoiserModelT {
  public:
    DenoiserConfig config;
    StyleTableT<S> style;
    TextEncoderParamsT<S> text;

    DenoiserModelT() = default;

    DenoiserModelT(const DenoiserConfig& cfg, int num_writers, int vocab_size, Rng& rng)
        : config(cfg) {
        config.validate();
        if (num_writers < 1 || vocab_size < 1)
            throw validation_error("denoiser model: need at least one writer and one symbol");
        const int L = config.levels();
        const int temb = config.temb_dim();

        stem_w = unet::conv_init<S>({config.channels_at(0), config.in_channels, 3, 3}, rng);
        stem_b = TensorT<S>::zeros({config.channels_at(0)});
        t1w = unet::linear_init<S>({temb, config.base_channels}, rng);
        t1b = TensorT<S>::zeros({temb});
        t2w = unet::linear_init<S>({temb, temb}, rng);
        t2b = TensorT<S>::zeros({temb});

        enc_res_.resize(size_t(L));
        enc_sa_.resize(size_t(L));
        enc_ca_.resize(size_t(L));
        for (int i = 0; i < L; ++i) {
            int cur = i == 0 ? config.channels_at(0) : config.channels_at(i - 1);
            for (int j = 0; j < config.resnet_blocks_per_level; ++j) {
                unet::ResBlock<S> rb;
                rb.init(cur, config.channels_at(i), temb, rng);
                enc_res_[size_t(i)].push_back(std::move(rb));
                cur = config.channels_at(i);
            }
            if (config.has_attention(i)) {
                enc_sa_[size_t(i)].emplace();
                enc_sa_[size_t(i)]->init(cur, config.attention_heads, cur, false, rng);
                enc_ca_[size_t(i)].emplace();
                enc_ca_[size_t(i)]->init(cur, config.attention_heads, config.text_dim, true, rng);
            }
            if (i + 1 < L) {
                down_w_.push_back(unet::conv_init<S>({cur, cur, 3, 3}, rng));
                down_b_.push_back(TensorT<S>::zeros({cur}));
            }
        }

        up_w_.resize(size_t(L > 0 ? L - 1 : 0));
        up_b_.resize(size_t(L > 0 ? L - 1 : 0));
        dec_res_.resize(size_t(L > 0 ? L - 1 : 0));
        dec_sa_.resize(size_t(L > 0 ? L - 1 : 0));
        dec_ca_.resize(size_t(L > 0 ? L - 1 : 0));
        for (int i = L - 2; i >= 0; --i) {
            const int ch = config.channels_at(i);
            up_w_[size_t(i)] = unet::conv_init<S>({ch, config.channels_at(i + 1), 3, 3}, rng);
            up_b_[size_t(i)] = TensorT<S>::zeros({ch});
            int cur = 2 * ch;  // skip join doubles the channel count
            for (int j = 0; j < config.resnet_blocks_per_level; ++j) {
                unet::ResBlock<S> rb;
                rb.init(cur, ch, temb, rng);
                dec_res_[size_t(i)].push_back(std::move(rb));
                cur = ch;
            }
            if (config.has_attention(i)) {
                dec_sa_[size_t(i)].emplace();
                dec_sa_[size_t(i)]->init(ch, config.attention_heads, ch, false, rng);
                dec_ca_[size_t(i)].emplace();
                dec_ca_[size_t(i)]->init(ch, config.attention_heads, config.text_dim, true, rng);
            }
        }

        out_gn_g = TensorT<S>::full({config.channels_at(0)}, S(1));
        out_gn_b = TensorT<S>::zeros({config.channels_at(0)});
        if (config.zero_init_final)
            out_w = TensorT<S>::zeros({config.in_channels, config.channels_at(0), 3, 3});
        else
            out_w = unet::conv_init<S>({config.in_channels, config.channels_at(0), 3, 3}, rng);
        out_b = TensorT<S>::zeros({config.in_channels});

        style = StyleTableT<S>(num_writers, temb, rng);
        text = TextEncoderParamsT<S>(vocab_size, config.text_dim, rng);
        text.max_len = config.max_text_len;
        text.pe_base = config.pe_base;
        text.use_positional_encoding = config.text_positional_encoding;
        text.use_attention = config.text_attention;
    }

    template <class F>
    void walk(F&& f) {
        f("stem.w", stem_w);
        f("stem.b", stem_b);
        f("temb.l1.w", t1w);
        f("temb.l1.b", t1b);
        f("temb.l2.w", t2w);
        f("temb.l2.b", t2b);
        const int L = config.levels();
        for (int i = 0; i < L; ++i) {
            const std::string lp = "enc." + std::to_string(i);
            for (int j = 0; j < int(enc_res_[size_t(i)].size()); ++j)
                enc_res_[size_t(i)][size_t(j)].walk(lp + ".res." + std::to_string(j), f);
            if (enc_sa_[size_t(i)]) enc_sa_[size_t(i)]->walk(lp + ".sa", f);
            if (enc_ca_[size_t(i)]) enc_ca_[size_t(i)]->walk(lp + ".ca", f);
            if (i + 1 < L) {
                f("down." + std::to_string(i) + ".w", down_w_[size_t(i)]);
                f("down." + std::to_string(i) + ".b", down_b_[size_t(i)]);
            }
        }
        for (int i = L - 2; i >= 0; --i) {
            const std::string lp = "dec." + std::to_string(i);
            f(lp + ".up.w", up_w_[size_t(i)]);
            f(lp + ".up.b", up_b_[size_t(i)]);
            for (int j = 0; j < int(dec_res_[size_t(i)].size()); ++j)
                dec_res_[size_t(i)][size_t(j)].walk(lp + ".res." + std::to_string(j), f);
            if (dec_sa_[size_t(i)]) dec_sa_[size_t(i)]->walk(lp + ".sa", f);
            if (dec_ca_[size_t(i)]) dec_ca_[size_t(i)]->walk(lp + ".ca", f);
        }
        f("out.gn.g", out_gn_g);
        f("out.gn.b", out_gn_b);
        f("out.w", out_w);
        f("out.b", out_b);
        f("style.table", style.weights);
        f("text.embed", text.char_embedding);
        f("text.wq", text.wq);
        f("text.wk", text.wk);
        f("text.wv", text.wv);
    }

    void attach(TapeT<S>& tape) {
        walk([&](const std::string&, TensorT<S>& t) { tape.leaf(t); });
    }

    std::int64_t count_parameters() {
        std::int64_t n = 0;
        walk([&](const std::string&, TensorT<S>& t) { n += t.numel(); });
        return n;
    }

    void save(Checkpoint& ck, const std::string& prefix = "denoiser.") {
        walk([&](const std::string& name, TensorT<S>& t) {
            std::vector<float> vals(size_t(t.numel()));
            for (std::int64_t i = 0; i < t.numel(); ++i) vals[size_t(i)] = float(t.data()[i]);
            ck.put(prefix + name, Tensor(t.shape, std::move(vals)));
        });
    }

    void load(const Checkpoint& ck, const std::string& prefix = "denoiser.") {
        walk([&](const std::string& name, TensorT<S>& t) {
            const Tensor& src = ck.get(prefix + name);
            if (src.shape != t.shape)
                throw io_error("checkpoint tensor " + prefix + name + " has shape " +
                               shape_str(src.shape) + ", model expects " + shape_str(t.shape));
            TensorT<S> dst(t.shape);
            S* d = dst.mutable_data();
            for (std::int64_t i = 0; i < src.numel(); ++i) d[i] = S(src.data()[i]);
            t = std::move(dst);
        });
    }

    // eps_hat for a batch. ctx is the encoded text context [B, max_len, text_dim].
    TensorT<S> predict_noise(TapeT<S>& tp, const TensorT<S>& z_t, const std::vector<int>& t,
                             const std::vector<int>& style_ids, const TensorT<S>& ctx) const {
        if (z_t.ndim() == 4 && int(style_ids.size()) != z_t.dim(0))
            throw shape_error("predict_noise: need one timestep and style id per batch item");
        return predict_noise(tp, z_t, t, style.rows(tp, style_ids), ctx);
    }

    // Same, with explicit style rows [B, temb_dim]; lets callers substitute
    // interpolated or otherwise synthesized style vectors for table rows.
    TensorT<S> predict_noise(TapeT<S>& tp, const TensorT<S>& z_t, const std::vector<int>& t,
                             const TensorT<S>& style_rows, const TensorT<S>& ctx) const {
        const int L = config.levels();
        if (z_t.ndim() != 4 || z_t.dim(1) != config.in_channels)
            throw shape_error("predict_noise: input " + shape_str(z_t.shape) + " must be [B," +
                              std::to_string(config.in_channels) + ",H,W]");
        const int B = z_t.dim(0), H = z_t.dim(2), W = z_t.dim(3);
        const int div = 1 << (L - 1);
        if (H % div != 0 || W % div != 0)
            throw shape_error("predict_noise: spatial extents " + shape_str(z_t.shape) +
                              " not divisible by " + std::to_string(div));
        if (int(t.size()) != B)
            throw shape_error("predict_noise: need one timestep and style id per batch item");
        if (style_rows.ndim() != 2 || style_rows.dim(0) != B || style_rows.dim(1) != style.dim)
            throw shape_error("predict_noise: style rows " + shape_str(style_rows.shape) +
                              " must be [B," + std::to_string(style.dim) + "]");
        if (ctx.ndim() != 3 || ctx.dim(0) != B || ctx.dim(2) != config.text_dim)
            throw shape_error("predict_noise: context " + shape_str(ctx.shape) +
                              " must be [B,len," + std::to_string(config.text_dim) + "]");
        for (int tv : t)
            if (tv < 0) throw validation_error("predict_noise: negative timestep");

        std::vector<double> tpos(t.begin(), t.end());
        TensorT<S> trows = detail::sinusoid_rows<S>(tpos, config.base_channels, 10000.0,
                                                    "timestep_embedding");
        TensorT<S> temb = ops::linear(tp, trows, t1w, t1b);
        temb = ops::linear(tp, ops::silu(tp, temb), t2w, t2b);
        TensorT<S> cond = ops::add(tp, temb, style_rows);
        TensorT<S> cond_act = ops::silu(tp, cond);

        TensorT<S> h = ops::conv2d(tp, z_t, stem_w, stem_b);
        std::vector<TensorT<S>> skips;
        for (int i = 0; i < L; ++i) {
            if (i > 0) h = ops::conv2d(tp, h, down_w_[size_t(i - 1)], down_b_[size_t(i - 1)], 2);
            for (const auto& rb : enc_res_[size_t(i)]) h = rb.forward(tp, h, cond_act);
            if (enc_sa_[size_t(i)]) {
                h = enc_sa_[size_t(i)]->forward(tp, h, nullptr);
                h = enc_ca_[size_t(i)]->forward(tp, h, &ctx);
            }
            if (i + 1 < L) skips.push_back(h);
        }
        for (int i = L - 2; i >= 0; --i) {
            h = ops::upsample_nearest2(tp, h, 2);
            h = ops::conv2d(tp, h, up_w_[size_t(i)], up_b_[size_t(i)]);
            h = ops::concat(tp, h, skips[size_t(i)], 1);
            for (const auto& rb : dec_res_[size_t(i)]) h = rb.forward(tp, h, cond_act);
            if (dec_sa_[size_t(i)]) {
                h = dec_sa_[size_t(i)]->forward(tp, h, nullptr);
                h = dec_ca_[size_t(i)]->forward(tp, h, &ctx);
            }
        }
        h = ops::group_norm(tp, h, out_gn_g, out_gn_b,
                            ops::norm_groups_for(config.channels_at(0)));
        return ops::conv2d(tp, ops::silu(tp, h), out_w, out_b);
    }

  private:
    TensorT<S> stem_w, stem_b;
    TensorT<S> t1w, t1b, t2w, t2b;
    std::vector<std::vector<unet::ResBlock<S>>> enc_res_;
    std::vector<std::optional<unet::AttnBlock<S>>> enc_sa_, enc_ca_;
    std::vector<TensorT<S>> down_w_, down_b_;
    std::vector<TensorT<S>> up_w_, up_b_;
    std::vector<std::vector<unet::ResBlock<S>>> dec_res_;
    std::vector<std::optional<unet::AttnBlock<S>>> dec_sa_, dec_ca_;
    TensorT<S> out_gn_g, out_gn_b, out_w, out_b;
};

using DenoiserModel = DenoiserModelT<float>;

}  // namespace gdf
