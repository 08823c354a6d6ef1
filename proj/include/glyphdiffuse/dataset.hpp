#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "glyphdiffuse/conditioning.hpp"
#include "glyphdiffuse/glyphs.hpp"
#include "glyphdiffuse/imageio.hpp"
#include "glyphdiffuse/tensor.hpp"

// Word-image datasets. Manifests are UTF-8 TSV, one record per line:
//   relative_image_path <TAB> writer_id <TAB> transcription
// Loading filters to 2..7-character words, remaps writer ids densely (sorted
// by original id), and applies the fixed-height preprocessing. The toy
// generator renders deterministic pseudo-handwriting with per-style stroke
// parameters spread far enough apart to stay classifiable.

namespace gdf {

struct WordRecord {
    Tensor image;  // [1,H,W] in [-1,1]
    int writer_id = 0;
    std::string transcription;
};

struct Dataset {
    std::vector<WordRecord> records;
    int num_writers = 0;
    std::vector<int> original_writer_ids;  // dense id -> id as written in the manifest

    Vocabulary vocabulary() const {
        std::vector<std::string> words;
        words.reserve(records.size());
        for (const auto& r : records) words.push_back(r.transcription);
        return Vocabulary::from_words(words);
    }
};

// ----------------------------------------------------------- preprocess ----

// Bilinear resample with half-pixel alignment; same-size calls are identity.
inline Tensor bilinear_resize(const Tensor& img, int oh, int ow) {
    if (img.ndim() != 3 || img.dim(0) != 1)
        throw shape_error("bilinear_resize: need [1,H,W], got " + shape_str(img.shape));
    if (oh < 1 || ow < 1) throw validation_error("bilinear_resize: bad target size");
    const int h = img.dim(1), w = img.dim(2);
    if (oh == h && ow == w) return img;
    Tensor out({1, oh, ow});
    float* d = out.mutable_data();
    const float* s = img.data();
    for (int y = 0; y < oh; ++y) {
        const double fy = (double(y) + 0.5) * h / oh - 0.5;
        const int y0 = std::max(0, std::min(h - 1, int(std::floor(fy))));
        const int y1 = std::min(h - 1, y0 + 1);
        const double wy = std::min(1.0, std::max(0.0, fy - y0));
        for (int x = 0; x < ow; ++x) {
            const double fx = (double(x) + 0.5) * w / ow - 0.5;
            const int x0 = std::max(0, std::min(w - 1, int(std::floor(fx))));
            const int x1 = std::min(w - 1, x0 + 1);
            const double wx = std::min(1.0, std::max(0.0, fx - x0));
            const double v = (1 - wy) * ((1 - wx) * s[y0 * w + x0] + wx * s[y0 * w + x1]) +
                             wy * ((1 - wx) * s[y1 * w + x0] + wx * s[y1 * w + x1]);
            d[y * ow + x] = float(v);
        }
    }
    return out;
}

// Fixed-height geometry: scale to `target_height` keeping aspect, then either
// center-pad with background (+1) or squeeze the width down to `max_width`.
// Output values are clamped to [-1, 1]; the op is idempotent on its output.
inline Tensor preprocess(const Tensor& raw, int target_height = 64, int max_width = 256) {
    if (raw.ndim() != 3 || raw.dim(0) != 1)
        throw shape_error("preprocess: need [1,H,W], got " + shape_str(raw.shape));
    if (target_height < 1 || max_width < 1)
        throw validation_error("preprocess: bad target geometry");
    const int h = raw.dim(1), w = raw.dim(2);
    const int nw = std::max(1, int(std::llround(double(w) * target_height / h)));

    Tensor scaled = bilinear_resize(raw, target_height, std::min(nw, max_width));
    Tensor out;
    if (scaled.dim(2) == max_width) {
        out = scaled;
    } else {
        out = Tensor::full({1, target_height, max_width}, 1.0f);  // white background
        const int left = (max_width - scaled.dim(2)) / 2;
        float* d = out.mutable_data();
        const float* s = scaled.data();
        for (int y = 0; y < target_height; ++y)
            std::copy(s + y * scaled.dim(2), s + (y + 1) * scaled.dim(2),
                      d + y * max_width + left);
    }
    float* d = out.mutable_data();
    for (std::int64_t i = 0; i < out.numel(); ++i)
        d[i] = std::min(1.0f, std::max(-1.0f, d[i]));
    return out;
}

// Raw-image overload so zero-extent inputs fail loudly before tensors exist.
inline Tensor preprocess(const GrayImage& raw, int target_height = 64, int max_width = 256) {
    if (raw.height < 1 || raw.width < 1)
        throw validation_error("preprocess: zero-extent input image");
    return preprocess(image_to_tensor(raw), target_height, max_width);
}

// -------------------------------------------------------------- manifest ---

inline std::int64_t transcription_length(const std::string& word) {
    return std::int64_t(utf8_decode(word).size());
}

inline Dataset load_manifest(const std::string& manifest_path, bool apply_preprocess = true,
                             int target_height = 64, int max_width = 256) {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw io_error("cannot open manifest " + manifest_path);
    const std::filesystem::path root = std::filesystem::path(manifest_path).parent_path();

    struct Row {
        std::string path;
        int writer;
        std::string word;
    };
    std::vector<Row> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto where = manifest_path + ":" + std::to_string(lineno);
        const size_t t1 = line.find('\t');
        const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos ||
            line.find('\t', t2 + 1) != std::string::npos)
            throw parse_error(where + ": expected 3 tab-separated fields");
        Row r;
        r.path = line.substr(0, t1);
        const std::string wid = line.substr(t1 + 1, t2 - t1 - 1);
        r.word = line.substr(t2 + 1);
        if (r.path.empty()) throw parse_error(where + ": empty image path");
        try {
            size_t used = 0;
            r.writer = std::stoi(wid, &used);
            if (used != wid.size() || r.writer < 0) throw std::invalid_argument(wid);
        } catch (const std::exception&) {
            throw parse_error(where + ": bad writer id '" + wid + "'");
        }
        std::int64_t len;
        try {
            len = transcription_length(r.word);
        } catch (const parse_error& e) {
            throw parse_error(where + ": " + e.what());
        }
        if (len < 2 || len > 7) continue;  // the word-length filter
        rows.push_back(std::move(r));
    }

    std::vector<int> ids;
    for (const auto& r : rows) ids.push_back(r.writer);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    std::map<int, int> dense;
    for (size_t i = 0; i < ids.size(); ++i) dense[ids[size_t(i)]] = int(i);

    Dataset ds;
    ds.num_writers = int(ids.size());
    ds.original_writer_ids = ids;
    for (const auto& r : rows) {
        GrayImage im = read_gray_image((root / r.path).string());
        WordRecord rec;
        rec.image = apply_preprocess ? preprocess(im, target_height, max_width)
                                     : image_to_tensor(im);
        rec.writer_id = dense.at(r.writer);
        rec.transcription = r.word;
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

// ------------------------------------------------------------------- toy ---

struct ToySpec {
    int num_styles = 4;
    std::vector<std::string> words = {"on",    "cat",   "echo",    "salt",
                                      "river", "branch", "glimmer", "dust"};
    int height = 32;
    int width = 128;
    int samples_per_pair = 4;
    std::uint64_t seed = 0;
};

// Stroke parameters for style i: anchored on a spread-out grid so any two
// styles differ clearly in at least one parameter, with a small seeded jitter
// on top. Exposed for tests and sampling logs.
inline std::vector<StyleParams> toy_style_params(const ToySpec& spec) {
    Rng rng(spec.seed);
    std::vector<StyleParams> out;
    const double thick[4] = {1.0, 2.1, 1.4, 2.7};
    const double amp[4] = {0.0, 2.2, 1.1, 3.2};
    const double freq[4] = {1.0, 2.0, 3.0, 1.5};
    for (int i = 0; i < spec.num_styles; ++i) {
        StyleParams p;
        const double u = spec.num_styles > 1 ? double(i) / (spec.num_styles - 1) : 0.5;
        p.slant = -0.30 + 0.60 * u + rng.uniform(-0.015, 0.015);
        p.thickness = thick[i % 4] + 0.15 * (i / 4) + rng.uniform(-0.05, 0.05);
        p.wobble_amp = amp[i % 4] + rng.uniform(-0.1, 0.1);
        p.wobble_freq = freq[i % 4];
        out.push_back(p);
    }
    return out;
}

inline Dataset generate_toy(const ToySpec& spec) {
    if (spec.num_styles < 1 || spec.samples_per_pair < 1)
        throw validation_error("generate_toy: counts must be positive");
    if (spec.words.empty()) throw validation_error("generate_toy: no words given");
    if (spec.height < 16 || spec.width < 16)
        throw validation_error("generate_toy: canvas too small");
    for (const auto& w : spec.words)
        for (char c : w)
            if (!glyphs::supported(c))
                throw validation_error(std::string("generate_toy: unsupported character '") + c +
                                       "' in word '" + w + "'");

    const std::vector<StyleParams> styles = toy_style_params(spec);
    Rng base(spec.seed);
    Dataset ds;
    ds.num_writers = spec.num_styles;
    for (int i = 0; i < spec.num_styles; ++i) ds.original_writer_ids.push_back(i);

    for (int s = 0; s < spec.num_styles; ++s)
        for (size_t wi = 0; wi < spec.words.size(); ++wi)
            for (int k = 0; k < spec.samples_per_pair; ++k) {
                Rng rec = base.fork((std::uint64_t(s) << 40) ^ (std::uint64_t(wi) << 20) ^
                                    std::uint64_t(k));
                const double phase = rec.uniform(0.0, 2.0 * M_PI);
                const double jitter = rec.uniform(-1.5, 1.5);
                WordRecord r;
                r.image = render_word(spec.words[wi], styles[size_t(s)], spec.height,
                                      spec.width, phase, jitter);
                r.writer_id = s;
                r.transcription = spec.words[wi];
                ds.records.push_back(std::move(r));
            }
    return ds;
}

// Writes images (PGM) plus manifest.tsv into `dir`; returns the manifest path.
inline std::string write_dataset(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path base(dir);
    std::ofstream manifest(base / "manifest.tsv", std::ios::binary);
    if (!manifest) throw io_error("cannot open " + (base / "manifest.tsv").string());
    int counter = 0;
    for (const auto& r : ds.records) {
        char name[64];
        std::snprintf(name, sizeof name, "im%05d_w%d.pgm", counter++, r.writer_id);
        write_pgm(r.image, (base / name).string());
        const int original = ds.original_writer_ids.empty()
                                 ? r.writer_id
                                 : ds.original_writer_ids[size_t(r.writer_id)];
        manifest << name << '\t' << original << '\t' << r.transcription << '\n';
    }
    manifest.flush();
    if (!manifest) throw io_error("short write to manifest in " + dir);
    return (base / "manifest.tsv").string();
}

}  // namespace gdf
