#include "helpers.hpp"

#include <cstdio>
#include <cstring>

#include "glyphdiffuse/checkpoint.hpp"
#include "glyphdiffuse/rng.hpp"

using gdf::Checkpoint;
using gdf::Rng;
using gdf::Tensor;

TEST_CASE("checkpoint round-trips names, shapes, values, and meta bitwise") {
    Rng rng(42);
    Checkpoint ck;
    ck.put("unet.stem.w", Tensor::randn({4, 1, 3, 3}, rng));
    ck.put("unet.stem.b", Tensor::randn({4}, rng));
    ck.put("style.table", Tensor::randn({10, 16}, rng));
    ck.meta = "schedule.T = 1000\nvocab = 97,98,99\n";

    const std::string bytes = ck.serialize();
    Checkpoint rt = Checkpoint::deserialize(bytes);

    REQUIRE(rt.entries().size() == 3);
    REQUIRE(rt.entries()[0].first == "unet.stem.w");
    REQUIRE(rt.entries()[2].first == "style.table");
    REQUIRE(rt.meta == ck.meta);
    for (const auto& [name, t] : ck.entries()) {
        const Tensor& u = rt.get(name);
        REQUIRE(u.shape == t.shape);
        REQUIRE(std::memcmp(u.data(), t.data(), size_t(t.numel()) * 4) == 0);
    }
    REQUIRE(rt.total_values() == 4 * 9 + 4 + 160);

    // serialization is deterministic
    REQUIRE(ck.serialize() == bytes);
}

TEST_CASE("checkpoint file save and load") {
    Rng rng(7);
    Checkpoint ck;
    ck.put("a", Tensor::randn({3, 2}, rng));
    ck.meta = "x";
    const std::string path = "ck_test.gdf";
    ck.save(path);
    Checkpoint rt = Checkpoint::load(path);
    REQUIRE(rt.get("a").shape == std::vector<int>{3, 2});
    REQUIRE(std::memcmp(rt.get("a").data(), ck.get("a").data(), 6 * 4) == 0);
    REQUIRE(rt.meta == "x");
    std::remove(path.c_str());
    REQUIRE_THROWS_AS(Checkpoint::load(path), gdf::io_error);
}

TEST_CASE("checkpoint byte layout is the documented GDF1 format") {
    Checkpoint ck;
    ck.put("w", Tensor({1}, std::vector<float>{1.0f}));
    ck.meta = "k = v\n";
    const std::string b = ck.serialize();
    const unsigned char want[] = {
        'G', 'D', 'F', '1',
        1, 0, 0, 0, 0, 0, 0, 0,         // entry count
        1, 0, 0, 0, 'w',                // name
        1, 0, 0, 0,                     // rank
        1, 0, 0, 0,                     // extent
        0x00, 0x00, 0x80, 0x3f,         // 1.0f little-endian
        'M', 'E', 'T', 'A',
        6, 0, 0, 0, 0, 0, 0, 0,
        'k', ' ', '=', ' ', 'v', '\n',
    };
    REQUIRE(b.size() == sizeof want);
    REQUIRE(std::memcmp(b.data(), want, sizeof want) == 0);
}

TEST_CASE("checkpoint rejects duplicates, unknown names, and corrupt bytes") {
    Checkpoint ck;
    ck.put("a", Tensor({1}, 0.0f));
    REQUIRE_THROWS_AS(ck.put("a", Tensor({2}, 0.0f)), gdf::validation_error);
    REQUIRE_THROWS_AS(ck.get("b"), gdf::index_error);
    REQUIRE(ck.has("a"));
    REQUIRE(!ck.has("b"));

    REQUIRE_THROWS_AS(Checkpoint::deserialize("NOPE"), gdf::io_error);
    std::string bytes = ck.serialize();
    bytes.resize(bytes.size() - 2);  // truncate inside the value payload
    REQUIRE_THROWS_AS(Checkpoint::deserialize(bytes), gdf::io_error);
    std::string junk = ck.serialize() + "xx";
    REQUIRE_THROWS_AS(Checkpoint::deserialize(junk), gdf::io_error);
}
