#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "glyphdiffuse/checkpoint.hpp"
#include "glyphdiffuse/dataset.hpp"
#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/ops.hpp"
#include "glyphdiffuse/optim.hpp"
#include "glyphdiffuse/rng.hpp"
#include "glyphdiffuse/tape.hpp"
#include "glyphdiffuse/tensor.hpp"

// Evaluation: Frechet distance between fitted feature Gaussians and a small
// convolutional writer-style classifier whose pooled features double as the
// distance's extractor.

namespace gdf {

// -------------------------------------------------------- feature sets -----

struct FeatureSet {
    Tensor features;           // [N, D]
    std::string extractor_id;  // provenance tag; distances require a match
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major, D x D).
// Small and dependency-free; plenty for the feature dimensions used here.
inline void jacobi_eigh(std::vector<double> a, int D, std::vector<double>& evals,
                        std::vector<double>* evecs = nullptr) {
    if (evecs) {
        evecs->assign(size_t(D) * D, 0.0);
        for (int i = 0; i < D; ++i) (*evecs)[size_t(i) * D + i] = 1.0;
    }
    auto at = [&](int r, int c) -> double& { return a[size_t(r) * D + c]; };
    for (int sweep = 0; sweep < 128; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < D; ++p)
            for (int q = p + 1; q < D; ++q) off += at(p, q) * at(p, q);
        if (std::sqrt(off) < 1e-13 * double(D)) break;
        for (int p = 0; p < D; ++p)
            for (int q = p + 1; q < D; ++q) {
                const double apq = at(p, q);
                if (apq == 0.0) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < D; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < D; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                if (evecs)
                    for (int k = 0; k < D; ++k) {
                        const double vkp = (*evecs)[size_t(k) * D + p];
                        const double vkq = (*evecs)[size_t(k) * D + q];
                        (*evecs)[size_t(k) * D + p] = c * vkp - s * vkq;
                        (*evecs)[size_t(k) * D + q] = s * vkp + c * vkq;
                    }
            }
    }
    evals.resize(size_t(D));
    for (int i = 0; i < D; ++i) evals[size_t(i)] = at(i, i);
}

// Eigenvalues below -1e-6 mean the matrix is genuinely indefinite; smaller
// negatives are rounding noise and clamp to zero.
inline std::vector<double> clamped_sqrt_evals(const std::vector<double>& evals,
                                              const char* what) {
    std::vector<double> out(evals.size());
    for (size_t i = 0; i < evals.size(); ++i) {
        if (evals[i] < -1e-6)
            throw numeric_error(std::string(what) + ": eigenvalue " + std::to_string(evals[i]) +
                                " below the -1e-6 tolerance");
        out[i] = std::sqrt(std::max(evals[i], 0.0));
    }
    return out;
}

// Symmetric PSD square root via eigendecomposition, B = V sqrt(L) V^T.
inline std::vector<double> sqrt_psd(const std::vector<double>& m, int D, const char* what) {
    std::vector<double> evals, V;
    jacobi_eigh(m, D, evals, &V);
    std::vector<double> r = clamped_sqrt_evals(evals, what);
    std::vector<double> out(size_t(D) * D, 0.0);
    for (int i = 0; i < D; ++i)
        for (int j = 0; j < D; ++j) {
            double acc = 0.0;
            for (int k = 0; k < D; ++k)
                acc += V[size_t(i) * D + k] * r[size_t(k)] * V[size_t(j) * D + k];
            out[size_t(i) * D + j] = acc;
        }
    return out;
}

inline void mean_cov(const Tensor& f, std::vector<double>& mu, std::vector<double>& cov) {
    const int N = f.dim(0), D = f.dim(1);
    mu.assign(size_t(D), 0.0);
    const float* p = f.data();
    for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d) mu[size_t(d)] += double(p[std::int64_t(n) * D + d]);
    for (double& m : mu) m /= double(N);
    cov.assign(size_t(D) * D, 0.0);
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < D; ++i) {
            const double di = double(p[std::int64_t(n) * D + i]) - mu[size_t(i)];
            for (int j = i; j < D; ++j) {
                const double dj = double(p[std::int64_t(n) * D + j]) - mu[size_t(j)];
                cov[size_t(i) * D + j] += di * dj;
            }
        }
    for (int i = 0; i < D; ++i)
        for (int j = i; j < D; ++j) {
            cov[size_t(i) * D + j] /= double(N - 1);
            cov[size_t(j) * D + i] = cov[size_t(i) * D + j];
        }
}

}  // namespace detail

// ||mu_A - mu_B||^2 + Tr(C_A + C_B - 2 (C_A C_B)^{1/2}), with the cross term
// evaluated as the eigenvalue sum of the symmetrized product S_A C_B S_A.
inline double frechet_distance(const FeatureSet& A, const FeatureSet& B) {
    if (A.extractor_id != B.extractor_id)
        throw contract_error("frechet_distance: feature sets come from different extractors ('" +
                             A.extractor_id + "' vs '" + B.extractor_id + "')");
    if (A.features.ndim() != 2 || B.features.ndim() != 2 ||
        A.features.dim(1) != B.features.dim(1))
        throw contract_error("frechet_distance: feature shapes " + shape_str(A.features.shape) +
                             " and " + shape_str(B.features.shape) + " are incompatible");
    const int D = A.features.dim(1);
    for (const auto* fs : {&A, &B})
        if (fs->features.dim(0) < D + 1)
            throw validation_error("frechet_distance: need at least D+1 = " +
                                   std::to_string(D + 1) + " samples to fit covariance, got " +
                                   std::to_string(fs->features.dim(0)));

    std::vector<double> mu_a, mu_b, ca, cb;
    detail::mean_cov(A.features, mu_a, ca);
    detail::mean_cov(B.features, mu_b, cb);

    double dist = 0.0;
    for (int i = 0; i < D; ++i) {
        const double d = mu_a[size_t(i)] - mu_b[size_t(i)];
        dist += d * d;
    }
    for (int i = 0; i < D; ++i) dist += ca[size_t(i) * D + i] + cb[size_t(i) * D + i];

    const std::vector<double> sa = detail::sqrt_psd(ca, D, "frechet_distance");
    // m = sa * cb * sa, symmetrized against rounding drift
    std::vector<double> tmp(size_t(D) * D, 0.0), m(size_t(D) * D, 0.0);
    for (int i = 0; i < D; ++i)
        for (int k = 0; k < D; ++k) {
            const double v = sa[size_t(i) * D + k];
            if (v == 0.0) continue;
            for (int j = 0; j < D; ++j) tmp[size_t(i) * D + j] += v * cb[size_t(k) * D + j];
        }
    for (int i = 0; i < D; ++i)
        for (int k = 0; k < D; ++k) {
            const double v = tmp[size_t(i) * D + k];
            if (v == 0.0) continue;
            for (int j = 0; j < D; ++j) m[size_t(i) * D + j] += v * sa[size_t(k) * D + j];
        }
    for (int i = 0; i < D; ++i)
        for (int j = i + 1; j < D; ++j) {
            const double s = 0.5 * (m[size_t(i) * D + j] + m[size_t(j) * D + i]);
            m[size_t(i) * D + j] = s;
            m[size_t(j) * D + i] = s;
        }

    std::vector<double> evals;
    detail::jacobi_eigh(m, D, evals);
    for (double r : detail::clamped_sqrt_evals(evals, "frechet_distance")) dist -= 2.0 * r;

    if (dist < -1e-6)
        throw numeric_error("frechet_distance: result " + std::to_string(dist) +
                            " below the -1e-6 tolerance");
    return std::max(dist, 0.0);
}

// ---------------------------------------------------- style classifier -----

// Three stride-2 convolution blocks, global average pool, linear head. The
// pooled vector is also the feature extractor for distribution distances.
template <class S>
struct StyleClassifierT {
    int num_classes = 0;
    int base_channels = 0;

    TensorT<S> w1, b1, w2, b2, w3, b3, fw, fb;

    StyleClassifierT() = default;

    StyleClassifierT(int classes, int base, Rng& rng)
        : num_classes(classes), base_channels(base) {
        if (classes < 2) throw validation_error("style classifier: need at least 2 classes");
        if (base < 1) throw validation_error("style classifier: base_channels must be >= 1");
        auto conv = [&](int out, int in) {
            return TensorT<S>::randn({out, in, 3, 3}, rng, 1.0 / std::sqrt(double(in) * 9.0));
        };
        w1 = conv(base, 1);
        b1 = TensorT<S>::zeros({base});
        w2 = conv(2 * base, base);
        b2 = TensorT<S>::zeros({2 * base});
        w3 = conv(4 * base, 2 * base);
        b3 = TensorT<S>::zeros({4 * base});
        fw = TensorT<S>::randn({classes, 4 * base}, rng, 1.0 / std::sqrt(4.0 * double(base)));
        fb = TensorT<S>::zeros({classes});
    }

    int feature_dim() const { return 4 * base_channels; }

    template <class F>
    void walk(F&& f) {
        f("conv1.w", w1);
        f("conv1.b", b1);
        f("conv2.w", w2);
        f("conv2.b", b2);
        f("conv3.w", w3);
        f("conv3.b", b3);
        f("head.w", fw);
        f("head.b", fb);
    }

    void attach(TapeT<S>& tape) {
        walk([&](const std::string&, TensorT<S>& t) { tape.leaf(t); });
    }

    // Pooled penultimate features, [B, 4*base].
    TensorT<S> features(TapeT<S>& tp, const TensorT<S>& x) const {
        if (x.ndim() != 4 || x.dim(1) != 1)
            throw shape_error("style classifier: input " + shape_str(x.shape) +
                              " must be [B,1,H,W]");
        if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0)
            throw shape_error("style classifier: extents " + shape_str(x.shape) +
                              " must be divisible by 8");
        TensorT<S> h = ops::silu(tp, ops::conv2d(tp, x, w1, b1, 2));
        h = ops::silu(tp, ops::conv2d(tp, h, w2, b2, 2));
        h = ops::silu(tp, ops::conv2d(tp, h, w3, b3, 2));
        return ops::global_avg_pool(tp, h);
    }

    TensorT<S> logits(TapeT<S>& tp, const TensorT<S>& x) const {
        return ops::linear(tp, features(tp, x), fw, fb);
    }

    // Class probabilities, each row summing to one.
    TensorT<S> probabilities(TapeT<S>& tp, const TensorT<S>& x) const {
        return ops::softmax(tp, logits(tp, x), 1);
    }

    std::vector<int> predict(const TensorT<S>& x) const {
        TapeT<S> tp = TapeT<S>::inference();
        TensorT<S> lg = logits(tp, x);
        std::vector<int> out(size_t(lg.dim(0)));
        for (int b = 0; b < lg.dim(0); ++b) {
            const S* row = lg.data() + std::int64_t(b) * num_classes;
            out[size_t(b)] = int(std::max_element(row, row + num_classes) - row);
        }
        return out;
    }

    void save(Checkpoint& ck, const std::string& prefix = "classifier.") {
        Tensor info({2}, std::vector<float>{float(num_classes), float(base_channels)});
        ck.put(prefix + "info", info);
        walk([&](const std::string& name, TensorT<S>& t) {
            std::vector<float> vals(t.data(), t.data() + t.numel());
            ck.put(prefix + name, Tensor(t.shape, std::move(vals)));
        });
    }

    static StyleClassifierT load(const Checkpoint& ck, const std::string& prefix = "classifier.") {
        const Tensor& info = ck.get(prefix + "info");
        if (info.numel() != 2) throw io_error("style classifier: malformed info block");
        StyleClassifierT c;
        c.num_classes = int(info.data()[0]);
        c.base_channels = int(info.data()[1]);
        if (c.num_classes < 2 || c.base_channels < 1)
            throw io_error("style classifier: corrupt class/channel counts");
        Rng scratch(0);
        StyleClassifierT shaped(c.num_classes, c.base_channels, scratch);
        shaped.walk([&](const std::string& name, TensorT<S>& t) {
            const Tensor& src = ck.get(prefix + name);
            if (src.shape != t.shape)
                throw io_error("style classifier: tensor " + name + " has shape " +
                               shape_str(src.shape) + ", expected " + shape_str(t.shape));
            std::copy(src.data(), src.data() + src.numel(), t.mutable_data());
        });
        return shaped;
    }
};

using StyleClassifier = StyleClassifierT<float>;

// A provenance id for feature sets: architecture plus a parameter fingerprint
// so sets from differently trained classifiers never silently mix.
template <class S>
std::string extractor_id_of(StyleClassifierT<S>& clf) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a over parameter bytes
    clf.walk([&](const std::string&, TensorT<S>& t) {
        const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
        for (std::int64_t i = 0; i < t.numel() * std::int64_t(sizeof(S)); ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    });
    char buf[64];
    std::snprintf(buf, sizeof buf, "style-gap-%dc%dk-%016llx", clf.base_channels,
                  clf.num_classes, static_cast<unsigned long long>(h));
    return buf;
}

template <class S>
FeatureSet extract_features(StyleClassifierT<S>& clf, const Tensor& images, int chunk = 32) {
    if (images.ndim() != 4 || images.dim(0) < 1)
        throw validation_error("extract_features: need a non-empty [N,1,H,W] batch");
    const int N = images.dim(0);
    FeatureSet fs;
    fs.extractor_id = extractor_id_of(clf);
    fs.features = Tensor({N, clf.feature_dim()});
    TapeT<S> tp = TapeT<S>::inference();
    for (int at = 0; at < N; at += chunk) {
        const int bn = std::min(chunk, N - at);
        std::vector<int> ids(static_cast<size_t>(bn));
        for (int i = 0; i < bn; ++i) ids[size_t(i)] = at + i;
        TensorT<S> f = clf.features(tp, take_rows(images, ids));
        std::copy(f.data(), f.data() + f.numel(),
                  fs.features.mutable_data() + std::int64_t(at) * clf.feature_dim());
    }
    return fs;
}

// ------------------------------------------------------------- training ----

struct StyleTrainConfig {
    int epochs = 40;
    int batch_size = 8;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    int base_channels = 8;
    int holdout_every = 4;  // every k-th sample of each class is held out
};

struct StyleTrainReport {
    double held_out_accuracy = 0.0;
    int held_out_count = 0;
    std::vector<double> epoch_losses;
};

// Fraction of images whose predicted class matches its conditioning label.
inline double style_accuracy(StyleClassifier& clf, const Tensor& images,
                             const std::vector<int>& labels, int chunk = 32) {
    if (images.ndim() != 4 || images.dim(0) < 1)
        throw validation_error("style_accuracy: need a non-empty [N,1,H,W] batch");
    const int N = images.dim(0);
    if (int(labels.size()) != N)
        throw shape_error("style_accuracy: need one label per image");
    for (int l : labels)
        if (l < 0 || l >= clf.num_classes)
            throw index_error("style_accuracy: label " + std::to_string(l) + " outside [0, " +
                              std::to_string(clf.num_classes) + ")");
    int hits = 0;
    for (int at = 0; at < N; at += chunk) {
        const int bn = std::min(chunk, N - at);
        std::vector<int> ids(static_cast<size_t>(bn));
        for (int i = 0; i < bn; ++i) ids[size_t(i)] = at + i;
        std::vector<int> got = clf.predict(take_rows(images, ids));
        for (int i = 0; i < bn; ++i)
            if (got[size_t(i)] == labels[size_t(at + i)]) ++hits;
    }
    return double(hits) / double(N);
}

inline StyleClassifier train_style_classifier(const Dataset& ds, const StyleTrainConfig& cfg,
                                              std::uint64_t seed,
                                              StyleTrainReport* report = nullptr) {
    if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0))
        throw validation_error("style classifier training: bad epochs/batch/learning rate");
    if (ds.records.empty()) throw validation_error("style classifier training: empty dataset");

    std::map<int, int> per_class;
    for (const auto& r : ds.records) ++per_class[r.writer_id];
    if (per_class.size() < 2)
        throw validation_error("style classifier training: need at least 2 classes, got " +
                               std::to_string(per_class.size()));
    for (const auto& [cls, n] : per_class)
        if (n < 2)
            throw validation_error("style classifier training: class " + std::to_string(cls) +
                                   " has " + std::to_string(n) + " sample(s), need at least 2");

    const std::vector<int>& shp = ds.records.front().image.shape;
    for (const auto& r : ds.records)
        if (r.image.shape != shp)
            throw validation_error("style classifier training: images disagree on shape");
    const int H = shp[1], W = shp[2];

    // deterministic split: every holdout_every-th occurrence of a class
    std::vector<int> train_idx, held_idx;
    std::map<int, int> seen;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const int k = seen[ds.records[i].writer_id]++;
        if (cfg.holdout_every > 0 && k % cfg.holdout_every == cfg.holdout_every - 1)
            held_idx.push_back(int(i));
        else
            train_idx.push_back(int(i));
    }

    auto stack = [&](const std::vector<int>& idx, std::vector<int>& labels) {
        Tensor out({int(idx.size()), 1, H, W});
        const std::int64_t row = std::int64_t(H) * W;
        for (size_t i = 0; i < idx.size(); ++i) {
            const auto& r = ds.records[size_t(idx[i])];
            std::copy(r.image.data(), r.image.data() + row,
                      out.mutable_data() + std::int64_t(i) * row);
            labels.push_back(r.writer_id);
        }
        return out;
    };
    std::vector<int> train_labels, held_labels;
    Tensor train_images = stack(train_idx, train_labels);

    Rng rng(seed);
    StyleClassifier clf(ds.num_writers, cfg.base_channels, rng);
    AdamWConfig oc;
    oc.lr = cfg.learning_rate;
    oc.weight_decay = cfg.weight_decay;
    AdamW opt(oc);
    clf.walk([&](const std::string& name, Tensor& t) {
        opt.add(t, adamw_should_decay(name, t.ndim()));
    });

    const int N = int(train_idx.size());
    for (int e = 1; e <= cfg.epochs; ++e) {
        const std::vector<int> perm = rng.permutation(N);
        double acc = 0.0;
        for (int at = 0; at < N; at += cfg.batch_size) {
            const int bn = std::min(cfg.batch_size, N - at);
            std::vector<int> ids, labels;
            for (int i = 0; i < bn; ++i) {
                ids.push_back(perm[size_t(at + i)]);
                labels.push_back(train_labels[size_t(ids.back())]);
            }
            Tape tape;
            clf.attach(tape);
            Tensor loss = ops::cross_entropy(tape, clf.logits(tape, take_rows(train_images, ids)),
                                             labels);
            const double lv = double(loss.data()[0]);
            if (!std::isfinite(lv))
                throw numeric_error("style classifier training: non-finite loss at epoch " +
                                    std::to_string(e));
            tape.backward(loss);
            opt.step(tape);
            acc += lv * bn;
        }
        if (report) report->epoch_losses.push_back(acc / double(N));
    }

    if (report) {
        if (!held_idx.empty()) {
            Tensor held_images = stack(held_idx, held_labels);
            report->held_out_accuracy = style_accuracy(clf, held_images, held_labels);
            report->held_out_count = int(held_idx.size());
        } else {
            // degenerate split: fall back to training accuracy
            report->held_out_accuracy = style_accuracy(clf, train_images, train_labels);
            report->held_out_count = 0;
        }
    }
    return clf;
}

}  // namespace gdf
