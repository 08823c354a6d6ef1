#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "glyphdiffuse/errors.hpp"
#include "glyphdiffuse/tensor.hpp"

// Named-tensor checkpoint container. Layout:
//   "GDF1"
//   u64 entry count
//   per entry: u32 name length, name bytes, u32 rank, u32 extents..., f32 values...
//   optional "META" u64 length + UTF-8 text (vocabulary, schedule, config echo)
// All integers and floats little-endian. Tensors are always stored as f32.

namespace gdf {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

class ByteReader {
  public:
    ByteReader(const std::string& buf, const std::string& what) : buf_(buf), what_(what) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    float f32() {
        std::uint32_t v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == buf_.size(); }

  private:
    void need(std::size_t n) {
        if (pos_ + n > buf_.size())
            throw io_error(what_ + ": truncated (need " + std::to_string(n) + " bytes at offset " +
                           std::to_string(pos_) + ")");
    }

    const std::string& buf_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw io_error("cannot open " + path);
    std::string buf;
    char chunk[1 << 16];
    std::size_t n;
    while ((n = std::fread(chunk, 1, sizeof chunk, f)) > 0) buf.append(chunk, n);
    std::fclose(f);
    return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot write " + path);
    const std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (n != bytes.size()) throw io_error("short write to " + path);
}

}  // namespace detail

class Checkpoint {
  public:
    std::string meta;

    void put(const std::string& name, Tensor t) {
        if (find(name) >= 0) throw validation_error("checkpoint: duplicate tensor name " + name);
        entries_.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const { return find(name) >= 0; }

    const Tensor& get(const std::string& name) const {
        int i = find(name);
        if (i < 0) throw index_error("checkpoint: no tensor named " + name);
        return entries_[size_t(i)].second;
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    std::int64_t total_values() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    std::string serialize() const {
        std::string out = "GDF1";
        detail::put_u64(out, entries_.size());
        for (const auto& [name, t] : entries_) {
            detail::put_u32(out, std::uint32_t(name.size()));
            out += name;
            detail::put_u32(out, std::uint32_t(t.ndim()));
            for (int d = 0; d < t.ndim(); ++d) detail::put_u32(out, std::uint32_t(t.dim(d)));
            const float* v = t.data();
            for (std::int64_t i = 0; i < t.numel(); ++i) detail::put_f32(out, v[i]);
        }
        if (!meta.empty()) {
            out += "META";
            detail::put_u64(out, meta.size());
            out += meta;
        }
        return out;
    }

    void save(const std::string& path) const { detail::write_file_bytes(path, serialize()); }

    static Checkpoint deserialize(const std::string& bytes, const std::string& what = "checkpoint") {
        detail::ByteReader r(bytes, what);
        if (r.bytes(4) != "GDF1") throw io_error(what + ": bad magic, not a GDF1 container");
        Checkpoint ck;
        const std::uint64_t count = r.u64();
        for (std::uint64_t e = 0; e < count; ++e) {
            std::string name = r.bytes(r.u32());
            const std::uint32_t rank = r.u32();
            if (rank > 8) throw io_error(what + ": implausible tensor rank");
            std::vector<int> shape(rank);
            std::int64_t numel = 1;
            for (auto& d : shape) {
                d = int(r.u32());
                numel *= d;
            }
            if (numel <= 0) throw io_error(what + ": bad shape for tensor " + name);
            std::vector<float> vals(static_cast<std::size_t>(numel));
            for (auto& v : vals) v = r.f32();
            ck.put(name, Tensor(shape, std::move(vals)));
        }
        if (!r.at_end()) {
            if (r.bytes(4) != "META") throw io_error(what + ": trailing bytes are not a META block");
            ck.meta = r.bytes(r.u64());
            if (!r.at_end()) throw io_error(what + ": garbage after META block");
        }
        return ck;
    }

    static Checkpoint load(const std::string& path) {
        return deserialize(detail::read_file_bytes(path), path);
    }

  private:
    int find(const std::string& name) const {
        for (size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].first == name) return int(i);
        return -1;
    }

    std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace gdf
