#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "glyphdiffuse/checkpoint.hpp"
#include "glyphdiffuse/ops.hpp"
#include "glyphdiffuse/optim.hpp"

// Image <-> latent transport. Three kinds:
//   identity    latents are the pixels
//   pooled(f)   f x f mean pooling, optionally lifted to C channels through a
//               frozen orthonormal 1x1 convolution (decode transposes it)
//   learned     small convolutional autoencoder trained on pixels
// All kinds are deterministic; diffusion always sees standardized latents,
// so per-channel mean/std fitted on the training set travel with the codec.

namespace gdf {

enum class CodecKind { identity = 0, pooled = 1, learned = 2 };

inline bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

template <class S>
struct AutoencoderT {
    int hidden = 0;
    int latent_channels = 0;
    int spatial_factor = 1;

    TensorT<S> e_in_w, e_in_b;
    std::vector<TensorT<S>> e_down_w, e_down_b;  // one stride-2 conv per halving
    TensorT<S> e_out_w, e_out_b;
    TensorT<S> d_in_w, d_in_b;
    std::vector<TensorT<S>> d_up_w, d_up_b;
    TensorT<S> d_out_w, d_out_b;

    AutoencoderT() = default;

    AutoencoderT(int hidden_ch, int latent_ch, int factor, Rng& rng)
        : hidden(hidden_ch), latent_channels(latent_ch), spatial_factor(factor) {
        if (hidden < 1 || latent_channels < 1)
            throw validation_error("autoencoder: channel counts must be positive");
        if (!power_of_two(factor))
            throw validation_error("autoencoder: spatial factor " + std::to_string(factor) +
                                   " is not a power of 2");
        auto conv = [&](int co, int ci, int k) {
            return TensorT<S>::randn({co, ci, k, k}, rng, 1.0 / std::sqrt(double(ci) * k * k));
        };
        e_in_w = conv(hidden, 1, 3);
        e_in_b = TensorT<S>::zeros({hidden});
        int steps = 0;
        for (int f = factor; f > 1; f /= 2) ++steps;
        for (int i = 0; i < steps; ++i) {
            e_down_w.push_back(conv(hidden, hidden, 3));
            e_down_b.push_back(TensorT<S>::zeros({hidden}));
        }
        e_out_w = conv(latent_channels, hidden, 3);
        e_out_b = TensorT<S>::zeros({latent_channels});
        d_in_w = conv(hidden, latent_channels, 3);
        d_in_b = TensorT<S>::zeros({hidden});
        for (int i = 0; i < steps; ++i) {
            d_up_w.push_back(conv(hidden, hidden, 3));
            d_up_b.push_back(TensorT<S>::zeros({hidden}));
        }
        d_out_w = conv(1, hidden, 3);
        d_out_b = TensorT<S>::zeros({1});
    }

    template <class F>
    void walk(F&& f) {
        f("enc.in.w", e_in_w);
        f("enc.in.b", e_in_b);
        for (size_t i = 0; i < e_down_w.size(); ++i) {
            f("enc.down." + std::to_string(i) + ".w", e_down_w[i]);
            f("enc.down." + std::to_string(i) + ".b", e_down_b[i]);
        }
        f("enc.out.w", e_out_w);
        f("enc.out.b", e_out_b);
        f("dec.in.w", d_in_w);
        f("dec.in.b", d_in_b);
        for (size_t i = 0; i < d_up_w.size(); ++i) {
            f("dec.up." + std::to_string(i) + ".w", d_up_w[i]);
            f("dec.up." + std::to_string(i) + ".b", d_up_b[i]);
        }
        f("dec.out.w", d_out_w);
        f("dec.out.b", d_out_b);
    }

    void attach(TapeT<S>& tape) {
        walk([&](const std::string&, TensorT<S>& t) { tape.leaf(t); });
    }

    TensorT<S> encode(TapeT<S>& tp, const TensorT<S>& x) const {
        TensorT<S> h = ops::silu(tp, ops::conv2d(tp, x, e_in_w, e_in_b));
        for (size_t i = 0; i < e_down_w.size(); ++i)
            h = ops::silu(tp, ops::conv2d(tp, h, e_down_w[i], e_down_b[i], 2));
        return ops::conv2d(tp, h, e_out_w, e_out_b);
    }

    TensorT<S> decode(TapeT<S>& tp, const TensorT<S>& z) const {
        TensorT<S> h = ops::silu(tp, ops::conv2d(tp, z, d_in_w, d_in_b));
        for (size_t i = 0; i < d_up_w.size(); ++i) {
            h = ops::upsample_nearest2(tp, h, 2);
            h = ops::silu(tp, ops::conv2d(tp, h, d_up_w[i], d_up_b[i]));
        }
        return ops::conv2d(tp, h, d_out_w, d_out_b);
    }
};

template <class S>
class CodecT {
  public:
    CodecKind kind = CodecKind::identity;
    int spatial_factor = 1;
    int latent_channels = 1;
    TensorT<S> lift;  // pooled with latent_channels > 1: [C,1,1,1], unit column
    AutoencoderT<S> ae;
    TensorT<S> lat_mean, lat_std;  // [C] each once fitted

    static CodecT identity() { return CodecT(); }

    static CodecT pooled(int factor, int channels = 1, std::uint64_t lift_seed = 0) {
        if (!power_of_two(factor))
            throw validation_error("pooled codec: factor " + std::to_string(factor) +
                                   " is not a power of 2");
        if (channels < 1) throw validation_error("pooled codec: need at least one channel");
        CodecT c;
        c.kind = CodecKind::pooled;
        c.spatial_factor = factor;
        c.latent_channels = channels;
        if (channels > 1) {
            Rng rng(lift_seed);
            TensorT<S> w({channels, 1, 1, 1});
            S* d = w.mutable_data();
            double norm = 0.0;
            for (int i = 0; i < channels; ++i) {
                d[i] = S(rng.normal());
                norm += double(d[i]) * double(d[i]);
            }
            norm = std::sqrt(norm);
            for (int i = 0; i < channels; ++i) d[i] = S(double(d[i]) / norm);
            c.lift = w;
        }
        return c;
    }

    std::string kind_str() const {
        switch (kind) {
            case CodecKind::identity: return "identity";
            case CodecKind::pooled: return "pooled(" + std::to_string(spatial_factor) + ")";
            case CodecKind::learned: return "learned(" + std::to_string(spatial_factor) + ")";
        }
        return "?";
    }

    bool has_stats() const {
        return lat_mean.numel() == latent_channels && lat_std.numel() == latent_channels;
    }

    TensorT<S> encode(const TensorT<S>& x) const {
        if (x.ndim() != 4 || x.dim(1) != 1)
            throw shape_error("codec encode: input " + shape_str(x.shape) + " must be [B,1,H,W]");
        if (x.dim(2) % spatial_factor != 0 || x.dim(3) % spatial_factor != 0)
            throw shape_error("codec encode: extents " + shape_str(x.shape) +
                              " not divisible by factor " + std::to_string(spatial_factor));
        TapeT<S> tp = TapeT<S>::inference();
        switch (kind) {
            case CodecKind::identity: return x;
            case CodecKind::pooled: {
                TensorT<S> p = ops::avg_pool2(tp, x, spatial_factor);
                if (latent_channels == 1) return p;
                return ops::conv2d(tp, p, lift, TensorT<S>::zeros({latent_channels}));
            }
            case CodecKind::learned: return ae.encode(tp, x);
        }
        throw contract_error("codec encode: bad kind");
    }

    TensorT<S> decode(const TensorT<S>& z) const {
        if (z.ndim() != 4 || z.dim(1) != latent_channels)
            throw shape_error("codec decode: latent " + shape_str(z.shape) + " must be [B," +
                              std::to_string(latent_channels) + ",h,w]");
        TapeT<S> tp = TapeT<S>::inference();
        switch (kind) {
            case CodecKind::identity: return z;
            case CodecKind::pooled: {
                TensorT<S> p = z;
                if (latent_channels > 1) {
                    TensorT<S> wt({1, latent_channels, 1, 1});
                    std::copy(lift.data(), lift.data() + latent_channels, wt.mutable_data());
                    p = ops::conv2d(tp, z, wt, TensorT<S>::zeros({1}));
                }
                return spatial_factor > 1 ? ops::upsample_nearest2(tp, p, spatial_factor) : p;
            }
            case CodecKind::learned: return ae.decode(tp, z);
        }
        throw contract_error("codec decode: bad kind");
    }

    // Fits per-channel standardization statistics on an image set [N,1,H,W].
    void fit_latent_stats(const TensorT<S>& images, int chunk = 64) {
        if (images.ndim() != 4 || images.dim(0) < 1)
            throw validation_error("fit_latent_stats: need a non-empty image batch");
        const int N = images.dim(0);
        const int C = latent_channels;
        std::vector<double> sum(size_t(C), 0.0), sumsq(size_t(C), 0.0);
        std::int64_t per_channel = 0;
        for (int at = 0; at < N; at += chunk) {
            std::vector<int> ids;
            for (int i = at; i < std::min(N, at + chunk); ++i) ids.push_back(i);
            TensorT<S> z = encode(take_rows(images, ids));
            const std::int64_t hw = std::int64_t(z.dim(2)) * z.dim(3);
            const S* d = z.data();
            for (int b = 0; b < z.dim(0); ++b)
                for (int c = 0; c < C; ++c) {
                    const S* p = d + (std::int64_t(b) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        sum[size_t(c)] += double(p[i]);
                        sumsq[size_t(c)] += double(p[i]) * double(p[i]);
                    }
                }
            per_channel += std::int64_t(z.dim(0)) * hw;
        }
        lat_mean = TensorT<S>({latent_channels});
        lat_std = TensorT<S>({latent_channels});
        for (int c = 0; c < C; ++c) {
            const double m = sum[size_t(c)] / double(per_channel);
            const double var = std::max(0.0, sumsq[size_t(c)] / double(per_channel) - m * m);
            lat_mean.mutable_data()[c] = S(m);
            lat_std.mutable_data()[c] = S(std::max(std::sqrt(var), 1e-6));
        }
    }

    TensorT<S> standardize(const TensorT<S>& z) const { return scale_shift(z, true); }
    TensorT<S> destandardize(const TensorT<S>& z) const { return scale_shift(z, false); }

    void save(Checkpoint& ck, const std::string& prefix = "codec.") {
        Tensor info({4}, std::vector<float>{float(int(kind)), float(spatial_factor),
                                            float(latent_channels), float(ae.hidden)});
        ck.put(prefix + "info", info);
        if (lift.numel() > 0) ck.put(prefix + "lift", to_f32(lift));
        if (has_stats()) {
            ck.put(prefix + "mean", to_f32(lat_mean));
            ck.put(prefix + "std", to_f32(lat_std));
        }
        if (kind == CodecKind::learned) {
            ae.walk([&](const std::string& name, TensorT<S>& t) {
                ck.put(prefix + "ae." + name, to_f32(t));
            });
        }
    }

    static CodecT load(const Checkpoint& ck, const std::string& prefix = "codec.") {
        const Tensor& info = ck.get(prefix + "info");
        if (info.numel() != 4) throw io_error("codec info block has wrong size");
        const int kind_i = int(info.data()[0]);
        const int factor = int(info.data()[1]);
        const int channels = int(info.data()[2]);
        const int hidden = int(info.data()[3]);
        if (kind_i < 0 || kind_i > 2) throw io_error("codec info: unknown kind");
        if (!power_of_two(factor) || channels < 1) throw io_error("codec info: bad geometry");
        CodecT c;
        c.kind = CodecKind(kind_i);
        c.spatial_factor = factor;
        c.latent_channels = channels;
        if (c.kind == CodecKind::pooled && channels > 1) {
            c.lift = from_f32(ck.get(prefix + "lift"));
            if (c.lift.shape != std::vector<int>{channels, 1, 1, 1})
                throw io_error("codec lift has wrong shape " + shape_str(c.lift.shape));
        }
        if (c.kind == CodecKind::learned) {
            Rng rng(0);
            c.ae = AutoencoderT<S>(hidden, channels, factor, rng);
            c.ae.walk([&](const std::string& name, TensorT<S>& t) {
                const Tensor& src = ck.get(prefix + "ae." + name);
                if (src.shape != t.shape)
                    throw io_error("codec tensor " + name + " has shape " + shape_str(src.shape) +
                                   ", expected " + shape_str(t.shape));
                t = from_f32(src);
            });
        }
        const bool has_mean = ck.has(prefix + "mean"), has_std = ck.has(prefix + "std");
        if (has_mean != has_std) throw io_error("codec stats: mean/std must travel together");
        if (has_mean) {
            c.lat_mean = from_f32(ck.get(prefix + "mean"));
            c.lat_std = from_f32(ck.get(prefix + "std"));
            if (c.lat_mean.numel() != channels || c.lat_std.numel() != channels)
                throw io_error("codec stats have wrong channel count");
        }
        return c;
    }

  private:
    static Tensor to_f32(const TensorT<S>& t) {
        std::vector<float> vals(size_t(t.numel()));
        for (std::int64_t i = 0; i < t.numel(); ++i) vals[size_t(i)] = float(t.data()[i]);
        return Tensor(t.shape, std::move(vals));
    }

    static TensorT<S> from_f32(const Tensor& t) {
        TensorT<S> out(t.shape);
        S* d = out.mutable_data();
        for (std::int64_t i = 0; i < t.numel(); ++i) d[i] = S(t.data()[i]);
        return out;
    }

    TensorT<S> scale_shift(const TensorT<S>& z, bool forward) const {
        if (!has_stats())
            throw validation_error("codec: latent statistics not fitted");
        if (z.ndim() != 4 || z.dim(1) != latent_channels)
            throw shape_error("codec standardize: latent " + shape_str(z.shape) +
                              " must be [B," + std::to_string(latent_channels) + ",h,w]");
        TensorT<S> out(z.shape);
        const std::int64_t hw = std::int64_t(z.dim(2)) * z.dim(3);
        const S* src = z.data();
        S* dst = out.mutable_data();
        for (int b = 0; b < z.dim(0); ++b)
            for (int c = 0; c < latent_channels; ++c) {
                const S m = lat_mean.data()[c], s = lat_std.data()[c];
                const std::int64_t off = (std::int64_t(b) * latent_channels + c) * hw;
                if (forward)
                    for (std::int64_t i = 0; i < hw; ++i) dst[off + i] = (src[off + i] - m) / s;
                else
                    for (std::int64_t i = 0; i < hw; ++i) dst[off + i] = src[off + i] * s + m;
            }
        check_finite(out, "codec standardize");
        return out;
    }
};

using Codec = CodecT<float>;

struct AutoencoderTrainConfig {
    int epochs = 80;
    int batch_size = 8;
    double learning_rate = 3e-3;
    double weight_decay = 0.0;
    int hidden = 16;
    int latent_channels = 4;
    int spatial_factor = 2;
};

// Trains the learned codec on pixel reconstruction MSE. Deterministic for a
// fixed seed. Per-epoch mean training loss lands in *epoch_losses if given.
// Statistics are not fitted here; call fit_latent_stats afterwards.
template <class S>
CodecT<S> train_autoencoder(const TensorT<S>& images, const AutoencoderTrainConfig& cfg,
                            std::uint64_t seed, std::vector<double>* epoch_losses = nullptr) {
    if (images.ndim() != 4 || images.dim(1) != 1)
        throw validation_error("train_autoencoder: images must be [N,1,H,W], got " +
                               shape_str(images.shape));
    const int N = images.dim(0);
    if (N < 1) throw validation_error("train_autoencoder: empty dataset");
    if (cfg.epochs < 1 || cfg.batch_size < 1 || cfg.learning_rate <= 0.0)
        throw validation_error("train_autoencoder: bad training config");
    if (!power_of_two(cfg.spatial_factor))
        throw validation_error("train_autoencoder: spatial factor " +
                               std::to_string(cfg.spatial_factor) + " is not a power of 2");
    if (images.dim(2) % cfg.spatial_factor != 0 || images.dim(3) % cfg.spatial_factor != 0)
        throw shape_error("train_autoencoder: extents " + shape_str(images.shape) +
                          " not divisible by factor " + std::to_string(cfg.spatial_factor));

    Rng rng(seed);
    CodecT<S> codec;
    codec.kind = CodecKind::learned;
    codec.spatial_factor = cfg.spatial_factor;
    codec.latent_channels = cfg.latent_channels;
    codec.ae = AutoencoderT<S>(cfg.hidden, cfg.latent_channels, cfg.spatial_factor, rng);

    AdamWConfig ocfg;
    ocfg.lr = cfg.learning_rate;
    ocfg.weight_decay = cfg.weight_decay;
    AdamWT<S> opt(ocfg);
    codec.ae.walk([&](const std::string& name, TensorT<S>& t) {
        opt.add(t, adamw_should_decay(name, t.ndim()));
    });

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order = rng.permutation(N);
        double loss_sum = 0.0;
        std::int64_t seen = 0;
        for (int at = 0; at < N; at += cfg.batch_size) {
            std::vector<int> ids(order.begin() + at,
                                 order.begin() + std::min(N, at + cfg.batch_size));
            TensorT<S> xb = take_rows(images, ids);
            TapeT<S> tape;
            codec.ae.attach(tape);
            TensorT<S> xr = codec.ae.decode(tape, codec.ae.encode(tape, xb));
            TensorT<S> loss = ops::mse(tape, xr, xb);
            tape.backward(loss);
            opt.step(tape);
            loss_sum += double(loss.scalar()) * double(ids.size());
            seen += std::int64_t(ids.size());
        }
        if (epoch_losses) epoch_losses->push_back(loss_sum / double(seen));
    }
    return codec;
}

// Convenience overload for datasets kept as one tensor per image [1,H,W].
template <class S>
CodecT<S> train_autoencoder(const std::vector<TensorT<S>>& images,
                            const AutoencoderTrainConfig& cfg, std::uint64_t seed,
                            std::vector<double>* epoch_losses = nullptr) {
    if (images.empty()) throw validation_error("train_autoencoder: empty dataset");
    for (const auto& im : images)
        if (im.shape != images.front().shape)
            throw shape_error("train_autoencoder: images differ in shape, " +
                              shape_str(im.shape) + " vs " + shape_str(images.front().shape));
    if (images.front().ndim() != 3 || images.front().dim(0) != 1)
        throw validation_error("train_autoencoder: images must be [1,H,W], got " +
                               shape_str(images.front().shape));
    TensorT<S> stack({int(images.size()), 1, images.front().dim(1), images.front().dim(2)});
    S* d = stack.mutable_data();
    const std::int64_t per = images.front().numel();
    for (size_t i = 0; i < images.size(); ++i)
        std::copy(images[i].data(), images[i].data() + per, d + std::int64_t(i) * per);
    return train_autoencoder(stack, cfg, seed, epoch_losses);
}

}  // namespace gdf
