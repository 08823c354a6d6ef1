#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/ops.hpp"
#include "glyphdiffuse/rng.hpp"
#include "glyphdiffuse/tape.hpp"
#include "glyphdiffuse/tensor.hpp"

// The three condition signals: sinusoidal timestep embedding, writer-style
// embedding rows, and the attention-pooled per-character text context.

namespace gdf {

// ---------------------------------------------------------------- utf-8 ----

inline std::vector<std::uint32_t> utf8_decode(const std::string& s) {
    std::vector<std::uint32_t> out;
    size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = (unsigned char)s[i];
        std::uint32_t cp = 0;
        int extra = 0;
        if (c < 0x80) {
            cp = c;
        } else if ((c >> 5) == 0x6) {
            cp = c & 0x1f;
            extra = 1;
        } else if ((c >> 4) == 0xe) {
            cp = c & 0x0f;
            extra = 2;
        } else if ((c >> 3) == 0x1e) {
            cp = c & 0x07;
            extra = 3;
        } else {
            throw parse_error("malformed UTF-8 at byte " + std::to_string(i));
        }
        if (i + size_t(extra) >= s.size())
            throw parse_error("truncated UTF-8 sequence at byte " + std::to_string(i));
        for (int k = 1; k <= extra; ++k) {
            const unsigned char cc = (unsigned char)s[i + size_t(k)];
            if ((cc >> 6) != 0x2)
                throw parse_error("malformed UTF-8 continuation at byte " +
                                  std::to_string(i + size_t(k)));
            cp = (cp << 6) | (cc & 0x3f);
        }
        out.push_back(cp);
        i += size_t(extra) + 1;
    }
    return out;
}

inline std::string utf8_encode(std::uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s.push_back(char(cp));
    } else if (cp < 0x800) {
        s.push_back(char(0xc0 | (cp >> 6)));
        s.push_back(char(0x80 | (cp & 0x3f)));
    } else if (cp < 0x10000) {
        s.push_back(char(0xe0 | (cp >> 12)));
        s.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
        s.push_back(char(0x80 | (cp & 0x3f)));
    } else {
        s.push_back(char(0xf0 | (cp >> 18)));
        s.push_back(char(0x80 | ((cp >> 12) & 0x3f)));
        s.push_back(char(0x80 | ((cp >> 6) & 0x3f)));
        s.push_back(char(0x80 | (cp & 0x3f)));
    }
    return s;
}

// ----------------------------------------------------------- vocabulary ----

// Dense character index built from a character set, sorted for determinism,
// plus one trailing pad symbol at index size-1.
class Vocabulary {
  public:
    Vocabulary() = default;

    static Vocabulary from_charset(const std::set<std::uint32_t>& chars) {
        Vocabulary v;
        v.chars_.assign(chars.begin(), chars.end());
        return v;
    }

    static Vocabulary from_words(const std::vector<std::string>& words) {
        std::set<std::uint32_t> cs;
        for (const auto& w : words)
            for (std::uint32_t cp : utf8_decode(w)) cs.insert(cp);
        return from_charset(cs);
    }

    int size() const { return int(chars_.size()) + 1; }
    int pad_index() const { return int(chars_.size()); }

    int index_of(std::uint32_t cp) const {
        auto it = std::lower_bound(chars_.begin(), chars_.end(), cp);
        if (it == chars_.end() || *it != cp)
            throw vocab_error("character '" + utf8_encode(cp) + "' not in vocabulary");
        return int(it - chars_.begin());
    }

    std::uint32_t char_at(int idx) const {
        if (idx < 0 || idx >= int(chars_.size()))
            throw index_error("vocabulary index " + std::to_string(idx) + " is not a character");
        return chars_[size_t(idx)];
    }

    // Comma-separated codepoint list; the pad symbol is implicit (last index).
    std::string to_meta() const {
        std::string s;
        for (size_t i = 0; i < chars_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(chars_[i]);
        }
        return s;
    }

    static Vocabulary from_meta(const std::string& s) {
        Vocabulary v;
        size_t pos = 0;
        while (pos < s.size()) {
            size_t comma = s.find(',', pos);
            if (comma == std::string::npos) comma = s.size();
            const std::string tok = s.substr(pos, comma - pos);
            try {
                v.chars_.push_back(std::uint32_t(std::stoul(tok)));
            } catch (const std::exception&) {
                throw parse_error("bad vocabulary codepoint '" + tok + "'");
            }
            pos = comma + 1;
        }
        if (!std::is_sorted(v.chars_.begin(), v.chars_.end()))
            throw parse_error("vocabulary codepoints not sorted");
        return v;
    }

    bool operator==(const Vocabulary& o) const { return chars_ == o.chars_; }

  private:
    std::vector<std::uint32_t> chars_;
};

// ------------------------------------------------------------- tokenize ----

inline std::vector<int> tokenize(const std::string& word, const Vocabulary& vocab, int max_len) {
    std::vector<std::uint32_t> cps = utf8_decode(word);
    if (int(cps.size()) > max_len)
        throw validation_error("word '" + word + "' has " + std::to_string(cps.size()) +
                               " characters, above the " + std::to_string(max_len) + " slot limit");
    std::vector<int> idx;
    idx.reserve(size_t(max_len));
    for (std::uint32_t cp : cps) idx.push_back(vocab.index_of(cp));
    idx.resize(size_t(max_len), vocab.pad_index());
    return idx;
}

inline std::string detokenize(const std::vector<int>& idx, const Vocabulary& vocab) {
    std::string out;
    for (int i : idx) {
        if (i == vocab.pad_index()) continue;
        out += utf8_encode(vocab.char_at(i));
    }
    return out;
}

// -------------------------------------------------------------- sinusoid ---

namespace detail {
template <class S>
TensorT<S> sinusoid_rows(const std::vector<double>& positions, int dim, double base,
                         const char* what) {
    if (dim <= 0 || dim % 2 != 0)
        throw validation_error(std::string(what) + ": dim must be positive and even, got " +
                               std::to_string(dim));
    TensorT<S> out({int(positions.size()), dim});
    S* po = out.mutable_data();
    for (size_t r = 0; r < positions.size(); ++r) {
        const double pos = positions[r];
        for (int i = 0; i < dim / 2; ++i) {
            const double freq = pos / std::pow(base, double(2 * i) / double(dim));
            po[r * size_t(dim) + size_t(2 * i)] = S(std::sin(freq));
            po[r * size_t(dim) + size_t(2 * i + 1)] = S(std::cos(freq));
        }
    }
    check_finite(out, what);
    return out;
}
}  // namespace detail

// element 2i = sin(t / base^(2i/dim)), 2i+1 = cos(...); base 10000.
template <class S>
TensorT<S> timestep_embedding(double t, int dim, double base = 10000.0) {
    if (t < 0) throw validation_error("timestep_embedding: t must be >= 0");
    return detail::sinusoid_rows<S>({t}, dim, base, "timestep_embedding").reshaped({dim});
}

// Same layout per row, pos = 0..seq_len-1; base 1000 unless overridden.
template <class S>
TensorT<S> positional_encoding(int seq_len, int dim, double base = 1000.0) {
    if (seq_len < 1) throw validation_error("positional_encoding: seq_len must be >= 1");
    std::vector<double> pos(static_cast<std::size_t>(seq_len));
    for (int i = 0; i < seq_len; ++i) pos[size_t(i)] = double(i);
    return detail::sinusoid_rows<S>(pos, dim, base, "positional_encoding");
}

// ----------------------------------------------------------- style table ---

template <class S>
struct StyleTableT {
    int num_writers = 0;
    int dim = 0;
    TensorT<S> weights;  // [num_writers, dim]

    StyleTableT() = default;
    StyleTableT(int writers, int d, Rng& rng)
        : num_writers(writers), dim(d), weights(TensorT<S>::randn({writers, d}, rng, 0.02)) {}

    void attach(TapeT<S>& tape) { tape.leaf(weights); }

    // Rows for a batch of writer ids, [B, dim]; gradient flows to the table.
    TensorT<S> rows(TapeT<S>& tape, const std::vector<int>& writer_ids) const {
        for (int id : writer_ids)
            if (id < 0 || id >= num_writers)
                throw index_error("writer id " + std::to_string(id) + " outside [0, " +
                                  std::to_string(num_writers) + ")");
        return ops::embedding(tape, weights, writer_ids);
    }
};

template <class S>
TensorT<S> style_embedding(TapeT<S>& tape, const StyleTableT<S>& table, int writer_id) {
    return table.rows(tape, {writer_id}).reshaped({table.dim});
}

// Linear blend between two writers' style rows. Endpoints return the exact
// stored rows so lambda = 0 / 1 are bitwise-faithful.
template <class S>
TensorT<S> interpolate_styles(const StyleTableT<S>& table, int id_a, int id_b, double lambda) {
    if (id_a < 0 || id_a >= table.num_writers || id_b < 0 || id_b >= table.num_writers)
        throw index_error("interpolate_styles: writer id outside table");
    if (lambda < 0.0 || lambda > 1.0)
        throw validation_error("interpolate_styles: lambda " + std::to_string(lambda) +
                               " outside [0, 1]");
    TensorT<S> out({table.dim});
    S* po = out.mutable_data();
    const S* a = table.weights.data() + std::int64_t(id_a) * table.dim;
    const S* b = table.weights.data() + std::int64_t(id_b) * table.dim;
    if (lambda == 0.0) {
        std::copy(a, a + table.dim, po);
    } else if (lambda == 1.0) {
        std::copy(b, b + table.dim, po);
    } else {
        const S l = S(lambda);
        for (int i = 0; i < table.dim; ++i) po[i] = (S(1) - l) * a[i] + l * b[i];
    }
    check_finite(out, "interpolate_styles");
    return out;
}

// ----------------------------------------------------------- text encoder --

template <class S>
struct TextEncoderParamsT {
    int dim = 0;
    int max_len = 8;
    bool use_positional_encoding = true;
    bool use_attention = true;
    double pe_base = 1000.0;

    TensorT<S> char_embedding;  // [vocab_size, dim]
    TensorT<S> wq, wk, wv;      // [dim, dim], right-multiplied

    TextEncoderParamsT() = default;
    TextEncoderParamsT(int vocab_size, int d, Rng& rng)
        : dim(d),
          char_embedding(TensorT<S>::randn({vocab_size, d}, rng, 0.02)),
          wq(TensorT<S>::randn({d, d}, rng, 1.0 / std::sqrt(double(d)))),
          wk(TensorT<S>::randn({d, d}, rng, 1.0 / std::sqrt(double(d)))),
          wv(TensorT<S>::randn({d, d}, rng, 1.0 / std::sqrt(double(d)))) {}

    void attach(TapeT<S>& tape) {
        tape.leaf(char_embedding);
        tape.leaf(wq);
        tape.leaf(wk);
        tape.leaf(wv);
    }
};

template <class S>
struct TextEncodeDebug {
    TensorT<S> attention;  // [B, max_len, max_len] softmax weights
};

// Batched text context: tokens -> embeddings (+PE) -> single-head dot-product
// self-attention. Output [B, max_len, dim]; ablation flags can bypass the
// PE add and the attention layer.
template <class S>
TensorT<S> encode_text_batch(TapeT<S>& tape, const TextEncoderParamsT<S>& p,
                             const Vocabulary& vocab, const std::vector<std::string>& words,
                             TextEncodeDebug<S>* debug = nullptr) {
    const int B = int(words.size()), L = p.max_len, D = p.dim;
    if (B < 1) throw validation_error("encode_text: empty batch");
    std::vector<int> idx;
    idx.reserve(size_t(B) * size_t(L));
    for (const auto& w : words) {
        std::vector<int> one = tokenize(w, vocab, L);
        idx.insert(idx.end(), one.begin(), one.end());
    }
    TensorT<S> e = ops::embedding(tape, p.char_embedding, idx);  // [B*L, D]
    if (p.use_positional_encoding) {
        TensorT<S> pe = positional_encoding<S>(L, D, p.pe_base);
        TensorT<S> tiled({B * L, D});
        S* pt = tiled.mutable_data();
        for (int b = 0; b < B; ++b)
            std::copy(pe.data(), pe.data() + std::int64_t(L) * D, pt + std::int64_t(b) * L * D);
        e = ops::add(tape, e, tiled);
    }
    if (!p.use_attention) return ops::reshape(tape, e, {B, L, D});
    TensorT<S> q = ops::reshape(tape, ops::matmul(tape, e, p.wq), {B, L, D});
    TensorT<S> k = ops::reshape(tape, ops::matmul(tape, e, p.wk), {B, L, D});
    TensorT<S> v = ops::reshape(tape, ops::matmul(tape, e, p.wv), {B, L, D});
    TensorT<S> scores = ops::scale(tape, ops::bmm(tape, q, ops::transpose_last2(tape, k)),
                                   S(1.0 / std::sqrt(double(D))));
    TensorT<S> att = ops::softmax(tape, scores, 2);
    if (debug) debug->attention = att.detached();
    return ops::bmm(tape, att, v);
}

template <class S>
TensorT<S> encode_text(TapeT<S>& tape, const TextEncoderParamsT<S>& p, const Vocabulary& vocab,
                       const std::string& word, TextEncodeDebug<S>* debug = nullptr) {
    TensorT<S> out = encode_text_batch(tape, p, vocab, {word}, debug);
    return ops::reshape(tape, out, {p.max_len, p.dim});
}

}  // namespace gdf
