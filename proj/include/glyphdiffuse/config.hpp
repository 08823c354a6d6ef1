#pragma once

#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "glyphdiffuse/errors.hpp"

// Declarative run configuration: every tunable of every stage lives in one
// struct, parsed from line-oriented "section.key = value" text. Parsing is
// strict (unknown keys and malformed values are errors) and the canonical
// echo re-parses to an identical config, so checkpoints and reports can
// carry their full provenance.

namespace gdf {

struct RunConfig {
    struct ScheduleSection {
        int timesteps = 1000;
        double beta_start = 1e-4;
        double beta_end = 0.02;
    } schedule;

    struct DenoiserSection {
        int in_channels = 4;
        int base_channels = 32;
        std::string channel_multipliers = "1,2";
        int resnet_blocks_per_level = 1;
        int attention_heads = 2;
        std::string attention_levels = "1";
        int text_dim = 32;
        int max_text_len = 8;
        double pe_base = 1000.0;
        bool text_positional_encoding = true;
        bool text_attention = true;
        bool zero_init_final = true;
    } denoiser;

    struct CodecSection {
        std::string kind = "pooled";  // identity | pooled | learned
        int spatial_factor = 2;
        int latent_channels = 4;
        std::uint64_t lift_seed = 0;
        std::string path;  // checkpoint of a previously trained codec
        // autoencoder training knobs (train-codec)
        int epochs = 80;
        int batch_size = 8;
        double learning_rate = 3e-3;
        double weight_decay = 0.0;
        int hidden = 16;
        std::uint64_t seed = 0;
    } codec;

    struct TrainSection {
        int epochs = 10;
        int batch_size = 8;
        double learning_rate = 1e-4;
        double weight_decay = 0.01;
        std::uint64_t seed = 0;
        int log_every = 1;
        int checkpoint_every = 0;
        std::string checkpoint_dir;
    } train;

    struct DatasetSection {
        std::string kind = "toy";  // toy | manifest
        std::string manifest;      // manifest.tsv path when kind = manifest
        bool preprocess = true;
        int target_height = 64;
        int max_width = 256;
        // toy generator knobs
        int num_styles = 4;
        std::string words = "on,cat,echo,salt,river,branch,glimmer,dust";
        int height = 32;
        int width = 128;
        int samples_per_pair = 4;
        std::uint64_t seed = 0;
    } dataset;

    struct SampleSection {
        std::string word = "on";
        int writer = 0;
        int writer_a = 0;
        int writer_b = 1;
        double lambda = 0.5;
        int t_sample = 0;  // 0 = full schedule
        std::uint64_t seed = 0;
        std::string out = "sample.pgm";
    } sample;

    struct MetricsSection {
        int n_generated = 64;
        int classifier_epochs = 30;
        int classifier_base_channels = 8;
        int classifier_batch_size = 8;
        double classifier_learning_rate = 1e-3;
        std::uint64_t seed = 0;
        std::string summary = "metrics.json";
    } metrics;
};

namespace cfgdetail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline long long parse_ll(const std::string& key, const std::string& v) {
    size_t pos = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &pos);
    } catch (const std::exception&) {
        throw parse_error("config: key " + key + " expects an integer, got '" + v + "'");
    }
    if (pos != v.size())
        throw parse_error("config: key " + key + " expects an integer, got '" + v + "'");
    return x;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    if (!v.empty() && v[0] == '-')
        throw parse_error("config: key " + key + " expects a non-negative integer, got '" + v +
                          "'");
    size_t pos = 0;
    std::uint64_t x = 0;
    try {
        x = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw parse_error("config: key " + key + " expects a non-negative integer, got '" + v +
                          "'");
    }
    if (pos != v.size())
        throw parse_error("config: key " + key + " expects a non-negative integer, got '" + v +
                          "'");
    return x;
}

inline double parse_dbl(const std::string& key, const std::string& v) {
    size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        throw parse_error("config: key " + key + " expects a number, got '" + v + "'");
    }
    if (pos != v.size())
        throw parse_error("config: key " + key + " expects a number, got '" + v + "'");
    return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw parse_error("config: key " + key + " expects true or false, got '" + v + "'");
}

// normalizes "1, 2" to "1,2" and rejects anything that is not an int list
inline std::string parse_int_list(const std::string& key, const std::string& v) {
    std::string out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty())
            throw parse_error("config: key " + key + " has an empty list element in '" + v + "'");
        parse_ll(key, tok);
        if (!out.empty()) out += ',';
        out += tok;
    }
    if (out.empty())
        throw parse_error("config: key " + key + " expects a comma-separated integer list");
    return out;
}

inline std::vector<int> split_ints(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(int(parse_ll(key, trim(tok))));
    return out;
}

inline std::vector<std::string> split_words(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

struct Binding {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<Binding>& bindings() {
    static const std::vector<Binding> table = [] {
        std::vector<Binding> v;
        auto add_int = [&](const char* key, auto acc) {
            std::string k = key;
            v.push_back({k,
                         [acc](const RunConfig& c) {
                             return std::to_string(acc(const_cast<RunConfig&>(c)));
                         },
                         [acc, k](RunConfig& c, const std::string& s) {
                             acc(c) = int(parse_ll(k, s));
                         }});
        };
        auto add_u64 = [&](const char* key, auto acc) {
            std::string k = key;
            v.push_back({k,
                         [acc](const RunConfig& c) {
                             return std::to_string(acc(const_cast<RunConfig&>(c)));
                         },
                         [acc, k](RunConfig& c, const std::string& s) { acc(c) = parse_u64(k, s); }});
        };
        auto add_dbl = [&](const char* key, auto acc) {
            std::string k = key;
            v.push_back({k,
                         [acc](const RunConfig& c) {
                             return fmt_double(acc(const_cast<RunConfig&>(c)));
                         },
                         [acc, k](RunConfig& c, const std::string& s) { acc(c) = parse_dbl(k, s); }});
        };
        auto add_bool = [&](const char* key, auto acc) {
            std::string k = key;
            v.push_back({k,
                         [acc](const RunConfig& c) {
                             return acc(const_cast<RunConfig&>(c)) ? std::string("true")
                                                                   : std::string("false");
                         },
                         [acc, k](RunConfig& c, const std::string& s) {
                             acc(c) = parse_bool(k, s);
                         }});
        };
        auto add_str = [&](const char* key, auto acc) {
            v.push_back({key,
                         [acc](const RunConfig& c) { return acc(const_cast<RunConfig&>(c)); },
                         [acc](RunConfig& c, const std::string& s) { acc(c) = s; }});
        };
        auto add_list = [&](const char* key, auto acc) {
            std::string k = key;
            v.push_back({k,
                         [acc](const RunConfig& c) { return acc(const_cast<RunConfig&>(c)); },
                         [acc, k](RunConfig& c, const std::string& s) {
                             acc(c) = parse_int_list(k, s);
                         }});
        };

        add_int("schedule.timesteps", [](RunConfig& c) -> int& { return c.schedule.timesteps; });
        add_dbl("schedule.beta_start", [](RunConfig& c) -> double& { return c.schedule.beta_start; });
        add_dbl("schedule.beta_end", [](RunConfig& c) -> double& { return c.schedule.beta_end; });

        add_int("denoiser.in_channels", [](RunConfig& c) -> int& { return c.denoiser.in_channels; });
        add_int("denoiser.base_channels",
                [](RunConfig& c) -> int& { return c.denoiser.base_channels; });
        add_list("denoiser.channel_multipliers",
                 [](RunConfig& c) -> std::string& { return c.denoiser.channel_multipliers; });
        add_int("denoiser.resnet_blocks_per_level",
                [](RunConfig& c) -> int& { return c.denoiser.resnet_blocks_per_level; });
        add_int("denoiser.attention_heads",
                [](RunConfig& c) -> int& { return c.denoiser.attention_heads; });
        add_list("denoiser.attention_levels",
                 [](RunConfig& c) -> std::string& { return c.denoiser.attention_levels; });
        add_int("denoiser.text_dim", [](RunConfig& c) -> int& { return c.denoiser.text_dim; });
        add_int("denoiser.max_text_len",
                [](RunConfig& c) -> int& { return c.denoiser.max_text_len; });
        add_dbl("denoiser.pe_base", [](RunConfig& c) -> double& { return c.denoiser.pe_base; });
        add_bool("denoiser.text_positional_encoding",
                 [](RunConfig& c) -> bool& { return c.denoiser.text_positional_encoding; });
        add_bool("denoiser.text_attention",
                 [](RunConfig& c) -> bool& { return c.denoiser.text_attention; });
        add_bool("denoiser.zero_init_final",
                 [](RunConfig& c) -> bool& { return c.denoiser.zero_init_final; });

        add_str("codec.kind", [](RunConfig& c) -> std::string& { return c.codec.kind; });
        add_int("codec.spatial_factor",
                [](RunConfig& c) -> int& { return c.codec.spatial_factor; });
        add_int("codec.latent_channels",
                [](RunConfig& c) -> int& { return c.codec.latent_channels; });
        add_u64("codec.lift_seed", [](RunConfig& c) -> std::uint64_t& { return c.codec.lift_seed; });
        add_str("codec.path", [](RunConfig& c) -> std::string& { return c.codec.path; });
        add_int("codec.epochs", [](RunConfig& c) -> int& { return c.codec.epochs; });
        add_int("codec.batch_size", [](RunConfig& c) -> int& { return c.codec.batch_size; });
        add_dbl("codec.learning_rate",
                [](RunConfig& c) -> double& { return c.codec.learning_rate; });
        add_dbl("codec.weight_decay", [](RunConfig& c) -> double& { return c.codec.weight_decay; });
        add_int("codec.hidden", [](RunConfig& c) -> int& { return c.codec.hidden; });
        add_u64("codec.seed", [](RunConfig& c) -> std::uint64_t& { return c.codec.seed; });

        add_int("train.epochs", [](RunConfig& c) -> int& { return c.train.epochs; });
        add_int("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
        add_dbl("train.learning_rate",
                [](RunConfig& c) -> double& { return c.train.learning_rate; });
        add_dbl("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
        add_u64("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
        add_int("train.log_every", [](RunConfig& c) -> int& { return c.train.log_every; });
        add_int("train.checkpoint_every",
                [](RunConfig& c) -> int& { return c.train.checkpoint_every; });
        add_str("train.checkpoint_dir",
                [](RunConfig& c) -> std::string& { return c.train.checkpoint_dir; });

        add_str("dataset.kind", [](RunConfig& c) -> std::string& { return c.dataset.kind; });
        add_str("dataset.manifest", [](RunConfig& c) -> std::string& { return c.dataset.manifest; });
        add_bool("dataset.preprocess", [](RunConfig& c) -> bool& { return c.dataset.preprocess; });
        add_int("dataset.target_height",
                [](RunConfig& c) -> int& { return c.dataset.target_height; });
        add_int("dataset.max_width", [](RunConfig& c) -> int& { return c.dataset.max_width; });
        add_int("dataset.num_styles", [](RunConfig& c) -> int& { return c.dataset.num_styles; });
        add_str("dataset.words", [](RunConfig& c) -> std::string& { return c.dataset.words; });
        add_int("dataset.height", [](RunConfig& c) -> int& { return c.dataset.height; });
        add_int("dataset.width", [](RunConfig& c) -> int& { return c.dataset.width; });
        add_int("dataset.samples_per_pair",
                [](RunConfig& c) -> int& { return c.dataset.samples_per_pair; });
        add_u64("dataset.seed", [](RunConfig& c) -> std::uint64_t& { return c.dataset.seed; });

        add_str("sample.word", [](RunConfig& c) -> std::string& { return c.sample.word; });
        add_int("sample.writer", [](RunConfig& c) -> int& { return c.sample.writer; });
        add_int("sample.writer_a", [](RunConfig& c) -> int& { return c.sample.writer_a; });
        add_int("sample.writer_b", [](RunConfig& c) -> int& { return c.sample.writer_b; });
        add_dbl("sample.lambda", [](RunConfig& c) -> double& { return c.sample.lambda; });
        add_int("sample.t_sample", [](RunConfig& c) -> int& { return c.sample.t_sample; });
        add_u64("sample.seed", [](RunConfig& c) -> std::uint64_t& { return c.sample.seed; });
        add_str("sample.out", [](RunConfig& c) -> std::string& { return c.sample.out; });

        add_int("metrics.n_generated", [](RunConfig& c) -> int& { return c.metrics.n_generated; });
        add_int("metrics.classifier_epochs",
                [](RunConfig& c) -> int& { return c.metrics.classifier_epochs; });
        add_int("metrics.classifier_base_channels",
                [](RunConfig& c) -> int& { return c.metrics.classifier_base_channels; });
        add_int("metrics.classifier_batch_size",
                [](RunConfig& c) -> int& { return c.metrics.classifier_batch_size; });
        add_dbl("metrics.classifier_learning_rate",
                [](RunConfig& c) -> double& { return c.metrics.classifier_learning_rate; });
        add_u64("metrics.seed", [](RunConfig& c) -> std::uint64_t& { return c.metrics.seed; });
        add_str("metrics.summary", [](RunConfig& c) -> std::string& { return c.metrics.summary; });
        return v;
    }();
    return table;
}

}  // namespace cfgdetail

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& b : cfgdetail::bindings())
        if (b.key == key) {
            b.set(cfg, cfgdetail::trim(value));
            return;
        }
    throw parse_error("config: unknown key '" + key + "'");
}

inline std::string config_get(const RunConfig& cfg, const std::string& key) {
    for (const auto& b : cfgdetail::bindings())
        if (b.key == key) return b.get(cfg);
    throw parse_error("config: unknown key '" + key + "'");
}

// Canonical echo: every key in registry order, one "key = value" line each.
inline std::string config_to_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& b : cfgdetail::bindings()) {
        out += b.key;
        out += " = ";
        out += b.get(cfg);
        out += '\n';
    }
    return out;
}

// Strict parse applied over an existing config (so presets/files/flags can
// layer): unknown or repeated keys and malformed lines are errors. Blank
// lines and '#' comments are allowed. `where` names the source in
// diagnostics (file name, "<echo>", ...).
inline void config_apply_text(RunConfig& cfg, const std::string& text,
                              const std::string& where = "<config>") {
    std::set<std::string> seen;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const std::string t = cfgdetail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw parse_error("config: " + where + ":" + std::to_string(lineno) +
                              ": expected 'key = value', got '" + t + "'");
        const std::string key = cfgdetail::trim(t.substr(0, eq));
        const std::string value = cfgdetail::trim(t.substr(eq + 1));
        if (!seen.insert(key).second)
            throw parse_error("config: " + where + ":" + std::to_string(lineno) +
                              ": key '" + key + "' repeated");
        try {
            config_set(cfg, key, value);
        } catch (const parse_error& e) {
            throw parse_error(where + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig config_from_text(const std::string& text,
                                  const std::string& where = "<config>") {
    RunConfig cfg;
    config_apply_text(cfg, text, where);
    return cfg;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return config_to_text(a) == config_to_text(b);
}
inline bool operator!=(const RunConfig& a, const RunConfig& b) { return !(a == b); }

// Named presets layered over the defaults. "paper-iam" pins the reference
// full-scale recipe: T=1000 with the 1e-4..0.02 beta range, width 320 with
// 4 attention heads, lr 1e-4, batch 224, 1000 epochs.
inline void apply_preset(RunConfig& cfg, const std::string& name) {
    if (name == "paper-iam") {
        cfg.schedule.timesteps = 1000;
        cfg.schedule.beta_start = 1e-4;
        cfg.schedule.beta_end = 0.02;
        cfg.denoiser.base_channels = 320;
        cfg.denoiser.attention_heads = 4;
        cfg.denoiser.text_dim = 320;
        cfg.train.learning_rate = 1e-4;
        cfg.train.batch_size = 224;
        cfg.train.epochs = 1000;
        cfg.dataset.kind = "manifest";
        return;
    }
    throw validation_error("config: unknown preset '" + name + "'");
}

// ------------------------------------------------- checkpoint provenance ---

// The echo is framed by marker lines so it can ride along inside a checkpoint
// meta block next to other key=value lines.
inline constexpr const char* kConfigBegin = "provenance=config-begin";
inline constexpr const char* kConfigEnd = "provenance=config-end";

inline void embed_config(std::string& meta, const RunConfig& cfg) {
    if (!meta.empty() && meta.back() != '\n') meta += '\n';
    meta += kConfigBegin;
    meta += '\n';
    meta += config_to_text(cfg);
    meta += kConfigEnd;
    meta += '\n';
}

inline RunConfig config_from_meta(const std::string& meta) {
    const std::string begin = std::string(kConfigBegin) + "\n";
    const size_t a = meta.find(begin);
    if (a == std::string::npos)
        throw parse_error("config: no embedded provenance block found");
    const size_t body = a + begin.size();
    const size_t b = meta.find(kConfigEnd, body);
    if (b == std::string::npos)
        throw parse_error("config: provenance block is not terminated");
    return config_from_text(meta.substr(body, b - body), "<provenance>");
}

}  // namespace gdf
