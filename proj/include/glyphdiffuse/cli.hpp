#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "glyphdiffuse/config.hpp"
#include "glyphdiffuse/dataset.hpp"
#include "glyphdiffuse/engine.hpp"
#include "glyphdiffuse/imageio.hpp"
#include "glyphdiffuse/metrics.hpp"

// Command-line binding of the whole pipeline. Every subcommand resolves one
// RunConfig (defaults -> --preset -> --config file -> --set overrides ->
// dedicated flags), validates, and delegates to the library. Exit codes:
// 0 success, 1 validation/runtime failure, 2 usage error.

namespace gdf::cli {

inline DenoiserConfig denoiser_config(const RunConfig& cfg) {
    DenoiserConfig d;
    d.in_channels = cfg.denoiser.in_channels;
    d.base_channels = cfg.denoiser.base_channels;
    d.channel_multipliers =
        cfgdetail::split_ints("denoiser.channel_multipliers", cfg.denoiser.channel_multipliers);
    d.resnet_blocks_per_level = cfg.denoiser.resnet_blocks_per_level;
    d.attention_heads = cfg.denoiser.attention_heads;
    d.attention_levels =
        cfgdetail::split_ints("denoiser.attention_levels", cfg.denoiser.attention_levels);
    d.text_dim = cfg.denoiser.text_dim;
    d.max_text_len = cfg.denoiser.max_text_len;
    d.pe_base = cfg.denoiser.pe_base;
    d.text_positional_encoding = cfg.denoiser.text_positional_encoding;
    d.text_attention = cfg.denoiser.text_attention;
    d.zero_init_final = cfg.denoiser.zero_init_final;
    return d;
}

inline TrainConfig train_config(const RunConfig& cfg) {
    TrainConfig t;
    t.epochs = cfg.train.epochs;
    t.batch_size = cfg.train.batch_size;
    t.learning_rate = cfg.train.learning_rate;
    t.weight_decay = cfg.train.weight_decay;
    t.seed = cfg.train.seed;
    t.timesteps = cfg.schedule.timesteps;
    t.beta_start = cfg.schedule.beta_start;
    t.beta_end = cfg.schedule.beta_end;
    t.log_every = cfg.train.log_every;
    t.checkpoint_every = cfg.train.checkpoint_every;
    t.checkpoint_dir = cfg.train.checkpoint_dir;
    return t;
}

inline ToySpec toy_spec(const RunConfig& cfg) {
    ToySpec s;
    s.num_styles = cfg.dataset.num_styles;
    s.words = cfgdetail::split_words(cfg.dataset.words);
    s.height = cfg.dataset.height;
    s.width = cfg.dataset.width;
    s.samples_per_pair = cfg.dataset.samples_per_pair;
    s.seed = cfg.dataset.seed;
    return s;
}

inline StyleTrainConfig style_train_config(const RunConfig& cfg) {
    StyleTrainConfig s;
    s.epochs = cfg.metrics.classifier_epochs;
    s.batch_size = cfg.metrics.classifier_batch_size;
    s.learning_rate = cfg.metrics.classifier_learning_rate;
    s.base_channels = cfg.metrics.classifier_base_channels;
    return s;
}

inline AutoencoderTrainConfig autoencoder_config(const RunConfig& cfg) {
    AutoencoderTrainConfig a;
    a.epochs = cfg.codec.epochs;
    a.batch_size = cfg.codec.batch_size;
    a.learning_rate = cfg.codec.learning_rate;
    a.weight_decay = cfg.codec.weight_decay;
    a.hidden = cfg.codec.hidden;
    a.latent_channels = cfg.codec.latent_channels;
    a.spatial_factor = cfg.codec.spatial_factor;
    return a;
}

inline Dataset load_dataset(const RunConfig& cfg) {
    if (cfg.dataset.kind == "toy") return generate_toy(toy_spec(cfg));
    if (cfg.dataset.kind == "manifest") {
        if (cfg.dataset.manifest.empty())
            throw validation_error("dataset.kind=manifest needs dataset.manifest to point at a "
                                   "manifest.tsv");
        return load_manifest(cfg.dataset.manifest, cfg.dataset.preprocess,
                             cfg.dataset.target_height, cfg.dataset.max_width);
    }
    throw validation_error("dataset.kind must be toy or manifest, got '" + cfg.dataset.kind + "'");
}

// Codec per config: a ready-made kind, or a previously trained one from disk.
inline Codec make_codec(const RunConfig& cfg) {
    if (!cfg.codec.path.empty()) return Codec::load(Checkpoint::load(cfg.codec.path));
    if (cfg.codec.kind == "identity") return Codec::identity();
    if (cfg.codec.kind == "pooled")
        return Codec::pooled(cfg.codec.spatial_factor, cfg.codec.latent_channels,
                             cfg.codec.lift_seed);
    if (cfg.codec.kind == "learned")
        throw validation_error("codec.kind=learned needs codec.path; run train-codec first");
    throw validation_error("codec.kind must be identity, pooled or learned, got '" +
                           cfg.codec.kind + "'");
}

inline Tensor stack_images(const Dataset& ds) {
    const int H = ds.records.front().image.dim(1), W = ds.records.front().image.dim(2);
    Tensor out({int(ds.records.size()), 1, H, W});
    const std::int64_t row = std::int64_t(H) * W;
    for (size_t i = 0; i < ds.records.size(); ++i)
        std::copy(ds.records[i].image.data(), ds.records[i].image.data() + row,
                  out.mutable_data() + std::int64_t(i) * row);
    return out;
}

// ------------------------------------------------------------ commands -----

inline int cmd_gen_toy(const RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
    Dataset ds = generate_toy(toy_spec(cfg));
    const std::string manifest = write_dataset(ds, out_dir);
    out << "wrote " << ds.records.size() << " images for " << ds.num_writers << " writers\n"
        << "manifest " << manifest << "\n";
    return 0;
}

inline int cmd_train_codec(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
    Dataset ds = load_dataset(cfg);
    if (ds.records.empty()) throw validation_error("train-codec: empty dataset");
    Tensor images = stack_images(ds);
    std::vector<double> losses;
    Codec codec = train_autoencoder(images, autoencoder_config(cfg), cfg.codec.seed, &losses);
    codec.fit_latent_stats(images);
    Checkpoint ck;
    ck.meta = "format=glyphdiffuse.codec.v1\n";
    embed_config(ck.meta, cfg);
    codec.save(ck);
    ck.save(out_path);
    out << "codec " << codec.kind_str() << " trained for " << losses.size()
        << " epochs, final loss " << (losses.empty() ? 0.0 : losses.back()) << "\n"
        << "saved " << out_path << "\n";
    return 0;
}

inline int cmd_train(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
    Dataset ds = load_dataset(cfg);
    if (ds.records.empty()) throw validation_error("train: empty dataset");
    Codec codec = make_codec(cfg);
    DenoiserConfig arch = denoiser_config(cfg);
    if (arch.in_channels != codec.latent_channels)
        throw validation_error("train: denoiser.in_channels=" + std::to_string(arch.in_channels) +
                               " does not match the codec's " +
                               std::to_string(codec.latent_channels) + " latent channels");
    const Vocabulary vocab = ds.vocabulary();
    Rng rng(cfg.train.seed);
    DenoiserModel model(arch, ds.num_writers, vocab.size(), rng);
    Checkpoint ck = train(model, ds, codec, train_config(cfg), out);
    embed_config(ck.meta, cfg);
    ck.save(out_path);
    out << "saved " << out_path << "\n";
    return 0;
}

inline SampleRequest sample_request(const RunConfig& cfg, bool interpolate) {
    SampleRequest req;
    req.word = cfg.sample.word;
    req.writer_id = cfg.sample.writer;
    req.interpolate = interpolate;
    req.id_a = cfg.sample.writer_a;
    req.id_b = cfg.sample.writer_b;
    req.lambda = cfg.sample.lambda;
    req.T_sample = cfg.sample.t_sample;
    req.seed = cfg.sample.seed;
    return req;
}

inline int cmd_sample(const RunConfig& cfg, const std::string& ckpt, bool interpolate,
                      std::ostream& out) {
    TrainedBundle b = load_bundle(Checkpoint::load(ckpt));
    sample_to_file(b, sample_request(cfg, interpolate), cfg.sample.out);
    out << "wrote " << cfg.sample.out << "\n";
    return 0;
}

inline int cmd_sweep(const RunConfig& cfg, const std::string& ckpt, const std::string& steps,
                     const std::string& out_dir, std::ostream& out) {
    int lo = 0, hi = 0, step = 0;
    char extra = 0;
    if (std::sscanf(steps.c_str(), "%d:%d:%d%c", &lo, &hi, &step, &extra) != 3 || lo < 1 ||
        hi < lo || step < 1)
        throw validation_error("sweep-timesteps: --steps expects lo:hi:step with 1 <= lo <= hi "
                               "and step >= 1, got '" + steps + "'");
    TrainedBundle b = load_bundle(Checkpoint::load(ckpt));
    std::filesystem::create_directories(out_dir);
    SampleRequest req = sample_request(cfg, false);
    for (int t = lo; t <= hi; t += step) {
        req.T_sample = t;
        const std::string path =
            (std::filesystem::path(out_dir) / ("t" + std::to_string(t) + ".pgm")).string();
        sample_to_file(b, req, path);
        out << "wrote " << path << "\n";
    }
    return 0;
}

inline int cmd_evaluate(const RunConfig& cfg, const std::string& ckpt, std::ostream& out) {
    TrainedBundle b = load_bundle(Checkpoint::load(ckpt));
    Dataset real = load_dataset(cfg);
    if (real.records.empty()) throw validation_error("evaluate: empty dataset");
    const int H = real.records.front().image.dim(1), W = real.records.front().image.dim(2);
    if (H != b.image_height || W != b.image_width)
        throw validation_error("evaluate: dataset images are " + std::to_string(H) + "x" +
                               std::to_string(W) + " but the model was trained on " +
                               std::to_string(b.image_height) + "x" +
                               std::to_string(b.image_width));
    if (real.num_writers > b.model.style.num_writers)
        throw validation_error("evaluate: dataset has more writers than the model's style table");

    StyleTrainReport report;
    StyleClassifier clf =
        train_style_classifier(real, style_train_config(cfg), cfg.metrics.seed, &report);

    const int n_gen = cfg.metrics.n_generated;
    if (n_gen < 1) throw validation_error("evaluate: metrics.n_generated must be >= 1");
    Tensor generated({n_gen, 1, H, W});
    std::vector<int> labels(static_cast<size_t>(n_gen));
    SampleRequest req = sample_request(cfg, false);
    const std::int64_t row = std::int64_t(H) * W;
    for (int i = 0; i < n_gen; ++i) {
        const WordRecord& r = real.records[size_t(i) % real.records.size()];
        req.word = r.transcription;
        req.writer_id = r.writer_id;
        // deterministic per-image seed derived from the run seed
        req.seed = cfg.metrics.seed + 0x9E3779B97F4A7C15ull * std::uint64_t(i + 1);
        Tensor img = sample(b, req);
        std::copy(img.data(), img.data() + row, generated.mutable_data() + std::int64_t(i) * row);
        labels[size_t(i)] = r.writer_id;
    }

    FeatureSet real_fs = extract_features(clf, stack_images(real));
    FeatureSet gen_fs = extract_features(clf, generated);
    const double fid = frechet_distance(real_fs, gen_fs);
    const double acc = style_accuracy(clf, generated, labels);

    out << "classifier_holdout_accuracy=" << cfgdetail::fmt_double(report.held_out_accuracy)
        << "\n";
    out << "fid=" << cfgdetail::fmt_double(fid) << "\n";
    out << "style_accuracy=" << cfgdetail::fmt_double(acc) << "\n";
    out << "n_real=" << real.records.size() << "\n";
    out << "n_generated=" << n_gen << "\n";

    nlohmann::json j;
    j["fid"] = fid;
    j["style_accuracy"] = acc;
    j["n_real"] = int(real.records.size());
    j["n_generated"] = n_gen;
    std::ofstream summary(cfg.metrics.summary, std::ios::binary);
    if (!summary) throw io_error("evaluate: cannot write summary file " + cfg.metrics.summary);
    summary << j.dump(2) << "\n";
    out << "summary " << cfg.metrics.summary << "\n";
    return 0;
}

// ------------------------------------------------------------ dispatch -----

inline int run(std::vector<std::string> args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
    CLI::App app{"glyph-style diffusion: toy data, training, sampling, evaluation"};
    app.name("glyphdiffuse");
    app.require_subcommand(1);

    std::string config_path, preset;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "config file of section.key = value lines");
    app.add_option("--preset", preset, "named preset applied before the config file (paper-iam)");
    app.add_option("--set", sets, "override one key, e.g. --set train.epochs=5")
        ->take_all()
        ->expected(-1);

    auto* gen = app.add_subcommand("gen-toy", "generate the synthetic glyph dataset");
    std::string out_dir;
    gen->add_option("--out-dir", out_dir, "output directory")->required();

    auto* tcodec = app.add_subcommand("train-codec", "train the conv autoencoder codec");
    std::string codec_out = "codec.ckpt";
    tcodec->add_option("--out", codec_out, "output checkpoint path");

    auto* tr = app.add_subcommand("train", "train the denoiser on a dataset");
    std::string train_out = "model.ckpt";
    tr->add_option("--out", train_out, "output checkpoint path");
    std::string codec_path;
    tr->add_option("--codec", codec_path, "checkpoint of a trained codec (sets codec.path)");

    auto* sa = app.add_subcommand("sample", "sample one word image from a checkpoint");
    auto* ip = app.add_subcommand("interpolate", "sample with a blended writer style");
    auto* ev = app.add_subcommand("evaluate", "distribution distance + style accuracy report");
    auto* sw = app.add_subcommand("sweep-timesteps", "sample across several chain truncations");

    std::string ckpt;
    std::string word, writer, writer_a, writer_b, lambda, t_sample, seed, sample_out, n_gen,
        summary;
    for (CLI::App* s : {sa, ip, ev, sw}) s->add_option("--ckpt", ckpt, "model checkpoint")->required();
    for (CLI::App* s : {sa, ip, sw}) {
        s->add_option("--word", word, "text to render");
        s->add_option("--t-sample", t_sample, "reverse-chain start timestep (0 = full)");
    }
    for (CLI::App* s : {sa, ip, ev, sw}) s->add_option("--seed", seed, "sampling seed");
    for (CLI::App* s : {sa, sw}) s->add_option("--writer", writer, "writer id");
    for (CLI::App* s : {sa, ip}) s->add_option("--out", sample_out, "output image (.pgm/.png)");
    ip->add_option("--writer-a", writer_a, "first writer id");
    ip->add_option("--writer-b", writer_b, "second writer id");
    ip->add_option("--lambda", lambda, "blend weight toward writer-b in [0,1]");
    ev->add_option("--n", n_gen, "number of images to generate");
    ev->add_option("--summary", summary, "machine-readable summary path");
    std::string steps = "100:1000:100", sweep_dir = ".";
    sw->add_option("--steps", steps, "lo:hi:step truncation sweep");
    sw->add_option("--out-dir", sweep_dir, "directory for the swept images");

    for (CLI::App* s : {gen, tcodec, tr, sa, ip, ev, sw}) s->fallthrough();

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        RunConfig cfg;
        if (!preset.empty()) apply_preset(cfg, preset);
        if (!config_path.empty()) {
            std::ifstream in(config_path, std::ios::binary);
            if (!in) throw io_error("cannot open config file " + config_path);
            std::stringstream buf;
            buf << in.rdbuf();
            config_apply_text(cfg, buf.str(), config_path);
        }
        for (const std::string& kv : sets) {
            const size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw parse_error("--set expects key=value, got '" + kv + "'");
            config_set(cfg, cfgdetail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
        }
        auto flag = [&](const std::string& key, const std::string& v) {
            if (!v.empty()) config_set(cfg, key, v);
        };
        flag("sample.word", word);
        flag("sample.writer", writer);
        flag("sample.writer_a", writer_a);
        flag("sample.writer_b", writer_b);
        flag("sample.lambda", lambda);
        flag("sample.t_sample", t_sample);
        flag("sample.out", sample_out);
        flag("metrics.n_generated", n_gen);
        flag("metrics.summary", summary);
        if (!codec_path.empty()) config_set(cfg, "codec.path", codec_path);
        if (!seed.empty()) {
            config_set(cfg, "sample.seed", seed);
            config_set(cfg, "metrics.seed", seed);
        }

        if (app.got_subcommand(gen)) return cmd_gen_toy(cfg, out_dir, out);
        if (app.got_subcommand(tcodec)) return cmd_train_codec(cfg, codec_out, out);
        if (app.got_subcommand(tr)) return cmd_train(cfg, train_out, out);
        if (app.got_subcommand(sa)) return cmd_sample(cfg, ckpt, false, out);
        if (app.got_subcommand(ip)) return cmd_sample(cfg, ckpt, true, out);
        if (app.got_subcommand(ev)) return cmd_evaluate(cfg, ckpt, out);
        if (app.got_subcommand(sw)) return cmd_sweep(cfg, ckpt, steps, sweep_dir, out);
        err << "error: no subcommand dispatched\n";
        return 2;
    } catch (const error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace gdf::cli
