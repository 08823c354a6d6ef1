#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/rng.hpp"

namespace gdf {

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw shape_error("non-positive extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

// Dense row-major tensor. Value-semantic: copies share the buffer until one
// side mutates (mutable_data() clones a shared buffer first). `node` is the
// handle of the tape node that produced this value, or -1 when the value is
// not on any tape.
template <class S>
class TensorT {
  public:
    std::vector<int> shape;
    bool requires_grad = false;
    int node = -1;

    TensorT() : buf_(std::make_shared<std::vector<S>>()) {}

    explicit TensorT(std::vector<int> shp, S fill = S(0))
        : shape(std::move(shp)), buf_(std::make_shared<std::vector<S>>(numel_of(shape), fill)) {}

    TensorT(std::vector<int> shp, std::vector<S> values) : shape(std::move(shp)) {
        if (std::int64_t(values.size()) != numel_of(shape))
            throw shape_error("value count " + std::to_string(values.size()) +
                              " does not fill shape " + shape_str(shape));
        buf_ = std::make_shared<std::vector<S>>(std::move(values));
    }

    std::int64_t numel() const { return std::int64_t(buf_->size()); }
    int dim(int i) const { return shape[size_t(i)]; }
    int ndim() const { return int(shape.size()); }

    const S* data() const { return buf_->data(); }
    const std::vector<S>& values() const { return *buf_; }

    S* mutable_data() {
        if (buf_.use_count() > 1) buf_ = std::make_shared<std::vector<S>>(*buf_);
        return buf_->data();
    }

    S scalar() const {
        if (numel() != 1)
            throw contract_error("scalar() on tensor of shape " + shape_str(shape));
        return (*buf_)[0];
    }

    S at(std::int64_t i) const { return (*buf_)[size_t(i)]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    TensorT reshaped(std::vector<int> shp) const {
        if (numel_of(shp) != numel())
            throw shape_error("reshape " + shape_str(shape) + " -> " + shape_str(shp) +
                              " changes element count");
        TensorT out = *this;
        out.shape = std::move(shp);
        return out;
    }

    // Deep copy detached from any tape.
    TensorT detached() const {
        TensorT out(shape, *buf_);
        return out;
    }

    static TensorT zeros(std::vector<int> shp) { return TensorT(std::move(shp)); }

    static TensorT full(std::vector<int> shp, S v) { return TensorT(std::move(shp), v); }

    static TensorT randn(std::vector<int> shp, Rng& rng, double scale = 1.0) {
        TensorT out(std::move(shp));
        S* d = out.mutable_data();
        for (std::int64_t i = 0; i < out.numel(); ++i) d[i] = S(rng.normal() * scale);
        return out;
    }

  private:
    std::shared_ptr<std::vector<S>> buf_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <class S>
bool all_finite(const S* d, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i)
        if (!std::isfinite(double(d[i]))) return false;
    return true;
}

// NaN/Inf does not travel: every op calls this on its freshly built output
// and raises instead of returning poison.
template <class S>
void check_finite(const TensorT<S>& t, const char* op) {
    if (!all_finite(t.data(), t.numel()))
        throw numeric_error(std::string(op) + " produced a non-finite value (shape " +
                            shape_str(t.shape) + ")");
}

// Copies the selected rows along axis 0 (minibatch gather).
template <class S>
TensorT<S> take_rows(const TensorT<S>& x, const std::vector<int>& ids) {
    if (x.ndim() < 1) throw shape_error("take_rows: need at least 1-D input");
    const std::int64_t row = x.numel() / x.dim(0);
    std::vector<int> shp = x.shape;
    shp[0] = int(ids.size());
    TensorT<S> out(shp);
    S* d = out.mutable_data();
    for (size_t k = 0; k < ids.size(); ++k) {
        if (ids[k] < 0 || ids[k] >= x.dim(0))
            throw index_error("take_rows: row " + std::to_string(ids[k]) + " outside [0, " +
                              std::to_string(x.dim(0)) + ")");
        std::copy(x.data() + ids[k] * row, x.data() + (ids[k] + 1) * row, d + std::int64_t(k) * row);
    }
    return out;
}

}  // namespace gdf
