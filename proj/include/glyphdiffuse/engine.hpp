#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "glyphdiffuse/checkpoint.hpp"
#include "glyphdiffuse/codec.hpp"
#include "glyphdiffuse/conditioning.hpp"
#include "glyphdiffuse/dataset.hpp"
#include "glyphdiffuse/denoiser.hpp"
#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/imageio.hpp"
#include "glyphdiffuse/optim.hpp"
#include "glyphdiffuse/rng.hpp"
#include "glyphdiffuse/schedule.hpp"
#include "glyphdiffuse/tape.hpp"
#include "glyphdiffuse/tensor.hpp"

// Orchestration: the denoising training objective, the full training loop,
// ancestral sampling with timestep truncation, and checkpoint bundling.
// Everything random flows through one seeded generator per run.

namespace gdf {

// --------------------------------------------------------------- configs ---

struct TrainConfig {
    int epochs = 10;
    int batch_size = 8;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int log_every = 1;           // epochs between progress lines; 0 silences
    int checkpoint_every = 0;    // epochs between snapshots; 0 disables
    std::string checkpoint_dir;  // where periodic snapshots go

    void validate() const {
        if (epochs < 1) throw validation_error("train config: epochs must be >= 1");
        if (batch_size < 1) throw validation_error("train config: batch_size must be >= 1");
        // learning_rate 0 is allowed: it is the documented null-update case
        if (!(learning_rate >= 0.0))
            throw validation_error("train config: learning_rate must be >= 0");
        if (!(weight_decay >= 0.0))
            throw validation_error("train config: weight_decay must be >= 0");
        if (log_every < 0 || checkpoint_every < 0)
            throw validation_error("train config: intervals must be >= 0");
        if (checkpoint_every > 0 && checkpoint_dir.empty())
            throw validation_error("train config: checkpoint_every needs a checkpoint_dir");
        linear_schedule(timesteps, beta_start, beta_end);  // validates schedule params
    }
};

struct SampleRequest {
    std::string word;
    int writer_id = 0;
    bool interpolate = false;  // when set, blend rows id_a/id_b instead
    int id_a = 0;
    int id_b = 0;
    double lambda = 0.0;
    int T_sample = 0;  // 0 means the full schedule length
    std::uint64_t seed = 0;
};

// Visited reverse-chain timesteps, in execution order.
struct SampleTrace {
    std::vector<int> timesteps;
};

// ------------------------------------------------------------ loss -------

template <class S>
struct DiffusionBatchT {
    TensorT<S> images;            // [B,1,H,W], pixels in [-1,1]
    std::vector<int> writer_ids;  // one per item
    std::vector<std::string> words;
};

using DiffusionBatch = DiffusionBatchT<float>;

// Adapter making a denoiser + vocabulary usable as a loss predictor.
template <class S>
struct DenoiserPredictorT {
    const DenoiserModelT<S>* model = nullptr;
    const Vocabulary* vocab = nullptr;

    TensorT<S> operator()(TapeT<S>& tp, const TensorT<S>& z_t, const std::vector<int>& ts,
                          const std::vector<int>& writer_ids,
                          const std::vector<std::string>& words) const {
        TensorT<S> ctx = encode_text_batch(tp, model->text, *vocab, words);
        return model->predict_noise(tp, z_t, ts, writer_ids, ctx);
    }
};

using DenoiserPredictor = DenoiserPredictorT<float>;

namespace detail {

template <class S>
TensorT<S> nth_item(const TensorT<S>& batch, int i) {
    std::vector<int> shp = batch.shape;
    shp[0] = 1;
    TensorT<S> out(shp);
    const std::int64_t row = batch.numel() / batch.dim(0);
    std::copy(batch.data() + std::int64_t(i) * row, batch.data() + std::int64_t(i + 1) * row,
              out.mutable_data());
    return out;
}

}  // namespace detail

// Mean squared error between the drawn noise and the model's prediction of
// it, on standardized latents with per-item uniform timesteps. The predictor
// is any callable (tape, z_t, ts, writer_ids, words) -> eps_hat.
template <class S, class Predictor>
TensorT<S> training_loss(TapeT<S>& tape, const DiffusionBatchT<S>& batch, Predictor&& predict,
                         const Schedule& sc, const CodecT<S>& codec, Rng& rng) {
    if (batch.images.ndim() != 4 || batch.images.dim(0) < 1)
        throw validation_error("training_loss: batch images must be a non-empty [B,1,H,W]");
    const int B = batch.images.dim(0);
    if (int(batch.writer_ids.size()) != B || int(batch.words.size()) != B)
        throw shape_error("training_loss: need one writer id and word per image");

    TensorT<S> z0 = codec.standardize(codec.encode(batch.images));

    std::vector<int> ts(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) ts[size_t(i)] = int(rng.uniform_int(1, sc.T));
    TensorT<S> eps = TensorT<S>::randn(z0.shape, rng);

    TensorT<S> z_t(z0.shape);
    const std::int64_t row = z0.numel() / B;
    for (int i = 0; i < B; ++i) {
        TensorT<S> one =
            q_sample(sc, detail::nth_item(z0, i), ts[size_t(i)], detail::nth_item(eps, i));
        std::copy(one.data(), one.data() + row, z_t.mutable_data() + std::int64_t(i) * row);
    }

    TensorT<S> eps_hat = predict(tape, z_t, ts, batch.writer_ids, batch.words);
    return ops::mse(tape, eps_hat, eps);
}

// ----------------------------------------------------- checkpoint bundle ---

namespace detail {

inline std::string fmt_full(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string csv_ints(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(v[i]);
    }
    return s;
}

inline std::vector<int> parse_csv_ints(const std::string& s, const std::string& what) {
    std::vector<int> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        try {
            out.push_back(std::stoi(s.substr(pos, comma - pos)));
        } catch (const std::exception&) {
            throw parse_error(what + ": bad integer list '" + s + "'");
        }
        pos = comma + 1;
    }
    return out;
}

inline std::map<std::string, std::string> parse_meta(const std::string& meta) {
    std::map<std::string, std::string> kv;
    size_t pos = 0;
    while (pos < meta.size()) {
        size_t nl = meta.find('\n', pos);
        if (nl == std::string::npos) nl = meta.size();
        const std::string line = meta.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw parse_error("checkpoint meta: line without '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline const std::string& meta_get(const std::map<std::string, std::string>& kv,
                                   const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw parse_error("checkpoint meta: missing key '" + key + "'");
    return it->second;
}

inline int meta_int(const std::map<std::string, std::string>& kv, const std::string& key) {
    try {
        return std::stoi(meta_get(kv, key));
    } catch (const parse_error&) {
        throw;
    } catch (const std::exception&) {
        throw parse_error("checkpoint meta: bad integer for '" + key + "'");
    }
}

inline double meta_double(const std::map<std::string, std::string>& kv, const std::string& key) {
    try {
        return std::stod(meta_get(kv, key));
    } catch (const parse_error&) {
        throw;
    } catch (const std::exception&) {
        throw parse_error("checkpoint meta: bad number for '" + key + "'");
    }
}

}  // namespace detail

// Serializes model + codec + vocabulary + schedule + train config into one
// self-contained container; sampling needs nothing else afterwards.
inline Checkpoint bundle_checkpoint(DenoiserModel& model, Codec& codec, const Vocabulary& vocab,
                                    const TrainConfig& cfg, int image_height, int image_width) {
    Checkpoint ck;
    model.save(ck);
    codec.save(ck);
    std::string m;
    m += "format=glyphdiffuse.bundle.v1\n";
    m += "vocab=" + vocab.to_meta() + "\n";
    m += "data.height=" + std::to_string(image_height) + "\n";
    m += "data.width=" + std::to_string(image_width) + "\n";
    const DenoiserConfig& a = model.config;
    m += "arch.in_channels=" + std::to_string(a.in_channels) + "\n";
    m += "arch.base_channels=" + std::to_string(a.base_channels) + "\n";
    m += "arch.channel_multipliers=" + detail::csv_ints(a.channel_multipliers) + "\n";
    m += "arch.resnet_blocks_per_level=" + std::to_string(a.resnet_blocks_per_level) + "\n";
    m += "arch.attention_heads=" + std::to_string(a.attention_heads) + "\n";
    m += "arch.attention_levels=" + detail::csv_ints(a.attention_levels) + "\n";
    m += "arch.text_dim=" + std::to_string(a.text_dim) + "\n";
    m += "arch.max_text_len=" + std::to_string(a.max_text_len) + "\n";
    m += "arch.pe_base=" + detail::fmt_full(a.pe_base) + "\n";
    m += "arch.text_positional_encoding=" + std::to_string(int(a.text_positional_encoding)) + "\n";
    m += "arch.text_attention=" + std::to_string(int(a.text_attention)) + "\n";
    m += "arch.zero_init_final=" + std::to_string(int(a.zero_init_final)) + "\n";
    m += "train.epochs=" + std::to_string(cfg.epochs) + "\n";
    m += "train.batch_size=" + std::to_string(cfg.batch_size) + "\n";
    m += "train.learning_rate=" + detail::fmt_full(cfg.learning_rate) + "\n";
    m += "train.weight_decay=" + detail::fmt_full(cfg.weight_decay) + "\n";
    m += "train.seed=" + std::to_string(cfg.seed) + "\n";
    m += "train.timesteps=" + std::to_string(cfg.timesteps) + "\n";
    m += "train.beta_start=" + detail::fmt_full(cfg.beta_start) + "\n";
    m += "train.beta_end=" + detail::fmt_full(cfg.beta_end) + "\n";
    m += "train.log_every=" + std::to_string(cfg.log_every) + "\n";
    ck.meta = m;
    return ck;
}

// A deserialized bundle, ready to sample from.
struct TrainedBundle {
    DenoiserConfig arch;
    DenoiserModel model;
    Codec codec;
    Vocabulary vocab;
    Schedule schedule;
    TrainConfig config;
    int image_height = 0;
    int image_width = 0;

    TrainedBundle(const DenoiserConfig& a, int num_writers, int vocab_size)
        : arch(a), model(make_model(a, num_writers, vocab_size)) {}

  private:
    static DenoiserModel make_model(const DenoiserConfig& a, int num_writers, int vocab_size) {
        Rng scratch(0);  // every parameter is overwritten by load()
        return DenoiserModel(a, num_writers, vocab_size, scratch);
    }
};

inline TrainedBundle load_bundle(const Checkpoint& ck) {
    const auto kv = detail::parse_meta(ck.meta);
    if (detail::meta_get(kv, "format") != "glyphdiffuse.bundle.v1")
        throw parse_error("checkpoint meta: unknown bundle format");

    DenoiserConfig a;
    a.in_channels = detail::meta_int(kv, "arch.in_channels");
    a.base_channels = detail::meta_int(kv, "arch.base_channels");
    a.channel_multipliers =
        detail::parse_csv_ints(detail::meta_get(kv, "arch.channel_multipliers"), "checkpoint meta");
    a.resnet_blocks_per_level = detail::meta_int(kv, "arch.resnet_blocks_per_level");
    a.attention_heads = detail::meta_int(kv, "arch.attention_heads");
    a.attention_levels =
        detail::parse_csv_ints(detail::meta_get(kv, "arch.attention_levels"), "checkpoint meta");
    a.text_dim = detail::meta_int(kv, "arch.text_dim");
    a.max_text_len = detail::meta_int(kv, "arch.max_text_len");
    a.pe_base = detail::meta_double(kv, "arch.pe_base");
    a.text_positional_encoding = detail::meta_int(kv, "arch.text_positional_encoding") != 0;
    a.text_attention = detail::meta_int(kv, "arch.text_attention") != 0;
    a.zero_init_final = detail::meta_int(kv, "arch.zero_init_final") != 0;
    a.validate();

    const Tensor& table = ck.get("denoiser.style.table");
    const Tensor& embed = ck.get("denoiser.text.embed");
    Vocabulary vocab = Vocabulary::from_meta(detail::meta_get(kv, "vocab"));
    if (embed.dim(0) != vocab.size())
        throw parse_error("checkpoint meta: vocabulary size " + std::to_string(vocab.size()) +
                          " does not match text embedding rows " + std::to_string(embed.dim(0)));

    TrainedBundle b(a, table.dim(0), embed.dim(0));
    b.model.load(ck);
    b.codec = Codec::load(ck);
    b.vocab = std::move(vocab);
    b.config.epochs = detail::meta_int(kv, "train.epochs");
    b.config.batch_size = detail::meta_int(kv, "train.batch_size");
    b.config.learning_rate = detail::meta_double(kv, "train.learning_rate");
    b.config.weight_decay = detail::meta_double(kv, "train.weight_decay");
    b.config.seed = std::uint64_t(std::stoull(detail::meta_get(kv, "train.seed")));
    b.config.timesteps = detail::meta_int(kv, "train.timesteps");
    b.config.beta_start = detail::meta_double(kv, "train.beta_start");
    b.config.beta_end = detail::meta_double(kv, "train.beta_end");
    b.config.log_every = detail::meta_int(kv, "train.log_every");
    b.schedule = linear_schedule(b.config.timesteps, b.config.beta_start, b.config.beta_end);
    b.image_height = detail::meta_int(kv, "data.height");
    b.image_width = detail::meta_int(kv, "data.width");
    if (b.image_height < 1 || b.image_width < 1)
        throw parse_error("checkpoint meta: bad image geometry");
    return b;
}

// ---------------------------------------------------------------- train ----

inline Checkpoint train(DenoiserModel& model, const Dataset& dataset, Codec codec,
                        const TrainConfig& cfg, std::ostream& log = std::cout,
                        std::vector<double>* epoch_losses = nullptr) {
    cfg.validate();
    if (dataset.records.empty()) throw validation_error("train: empty dataset");

    const int N = int(dataset.records.size());
    const std::vector<int>& shp0 = dataset.records.front().image.shape;
    for (const auto& r : dataset.records) {
        if (r.image.shape != shp0)
            throw validation_error("train: images disagree on shape, " + shape_str(r.image.shape) +
                                   " vs " + shape_str(shp0));
        if (r.writer_id < 0 || r.writer_id >= model.style.num_writers)
            throw index_error("train: writer id " + std::to_string(r.writer_id) +
                              " outside the model's style table");
    }
    const int H = shp0[1], W = shp0[2];

    Vocabulary vocab = dataset.vocabulary();
    if (vocab.size() != model.text.char_embedding.dim(0))
        throw validation_error("train: model was built for vocabulary size " +
                               std::to_string(model.text.char_embedding.dim(0)) +
                               " but the dataset needs " + std::to_string(vocab.size()));
    for (const auto& r : dataset.records)
        tokenize(r.transcription, vocab, model.text.max_len);  // throws on misfit words

    const Schedule sc = linear_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);

    Tensor all({N, 1, H, W});
    {
        const std::int64_t row = std::int64_t(H) * W;
        for (int i = 0; i < N; ++i)
            std::copy(dataset.records[size_t(i)].image.data(),
                      dataset.records[size_t(i)].image.data() + row,
                      all.mutable_data() + std::int64_t(i) * row);
    }
    if (!codec.has_stats()) codec.fit_latent_stats(all);

    Rng rng(cfg.seed);
    AdamWConfig oc;
    oc.lr = cfg.learning_rate;
    oc.weight_decay = cfg.weight_decay;
    AdamW opt(oc);
    model.walk([&](const std::string& name, Tensor& t) {
        opt.add(t, adamw_should_decay(name, t.ndim()));
    });
    DenoiserPredictor pred{&model, &vocab};

    for (int e = 1; e <= cfg.epochs; ++e) {
        const std::vector<int> perm = rng.permutation(N);
        double acc = 0.0;
        for (int at = 0; at < N; at += cfg.batch_size) {
            const int bn = std::min(cfg.batch_size, N - at);
            DiffusionBatch batch;
            std::vector<int> ids(perm.begin() + at, perm.begin() + at + bn);
            batch.images = take_rows(all, ids);
            for (int id : ids) {
                batch.writer_ids.push_back(dataset.records[size_t(id)].writer_id);
                batch.words.push_back(dataset.records[size_t(id)].transcription);
            }
            Tape tape;
            model.attach(tape);
            Tensor loss = training_loss(tape, batch, pred, sc, codec, rng);
            const double lv = double(loss.data()[0]);
            if (!std::isfinite(lv))
                throw numeric_error("train: non-finite loss " + std::to_string(lv) +
                                    " at epoch " + std::to_string(e) + ", item offset " +
                                    std::to_string(at) + "; lowering the learning rate from " +
                                    std::to_string(cfg.learning_rate) + " usually helps");
            tape.backward(loss);
            opt.step(tape);
            acc += lv * bn;
        }
        const double mean = acc / double(N);
        if (epoch_losses) epoch_losses->push_back(mean);
        if (cfg.log_every > 0 && (e % cfg.log_every == 0 || e == cfg.epochs)) {
            char line[64];
            std::snprintf(line, sizeof line, "epoch=%d loss=%.6f", e, mean);
            log << line << "\n";
        }
        if (cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 && e < cfg.epochs) {
            Checkpoint snap = bundle_checkpoint(model, codec, vocab, cfg, H, W);
            snap.save(cfg.checkpoint_dir + "/epoch_" + std::to_string(e) + ".ckpt");
        }
    }
    return bundle_checkpoint(model, codec, vocab, cfg, H, W);
}

// --------------------------------------------------------------- sample ----

// Ancestral sampling, optionally truncated: the reverse chain starts at
// t = T_sample from pure noise and walks every step down to 1.
inline Tensor sample(const TrainedBundle& b, const SampleRequest& req,
                     SampleTrace* trace = nullptr) {
    const Schedule& sc = b.schedule;
    const int Ts = req.T_sample == 0 ? sc.T : req.T_sample;
    if (Ts < 1 || Ts > sc.T)
        throw validation_error("sample: T_sample " + std::to_string(Ts) + " outside [1, " +
                               std::to_string(sc.T) + "]");

    const int f = b.codec.spatial_factor;
    if (b.image_height % f != 0 || b.image_width % f != 0)
        throw validation_error("sample: checkpoint image geometry not divisible by codec factor");
    const int lh = b.image_height / f, lw = b.image_width / f;

    Tape tape = Tape::inference();
    Tensor ctx = encode_text_batch(tape, b.model.text, b.vocab, {req.word});

    Tensor style_row;
    if (req.interpolate) {
        style_row = interpolate_styles(b.model.style, req.id_a, req.id_b, req.lambda)
                        .reshaped({1, b.model.style.dim});
    } else {
        if (req.writer_id < 0 || req.writer_id >= b.model.style.num_writers)
            throw index_error("sample: writer id " + std::to_string(req.writer_id) +
                              " outside [0, " + std::to_string(b.model.style.num_writers) + ")");
        style_row = take_rows(b.model.style.weights, {req.writer_id});
    }

    Rng rng(req.seed);
    Tensor z = Tensor::randn({1, b.codec.latent_channels, lh, lw}, rng);
    const Tensor quiet = Tensor::zeros(z.shape);  // final step draws no noise
    for (int t = Ts; t >= 1; --t) {
        if (trace) trace->timesteps.push_back(t);
        Tensor eps_hat = b.model.predict_noise(tape, z, {t}, style_row, ctx);
        Tensor noise = t > 1 ? Tensor::randn(z.shape, rng) : quiet;
        z = posterior_step(sc, z, eps_hat, t, noise);
    }

    Tensor x = b.codec.decode(b.codec.destandardize(z));
    float* d = x.mutable_data();
    for (std::int64_t i = 0; i < x.numel(); ++i) d[i] = std::clamp(d[i], -1.0f, 1.0f);
    return x.reshaped({1, b.image_height, b.image_width});
}

inline Tensor sample_to_file(const TrainedBundle& b, const SampleRequest& req,
                             const std::string& path) {
    Tensor img = sample(b, req);
    write_gray_image(tensor_to_image(img), path);
    return img;
}

}  // namespace gdf
