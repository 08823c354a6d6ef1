#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "glyphdiffuse/dataset.hpp"

using namespace gdf;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("glyphdiffuse_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool same_pixels(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data(), b.data(), size_t(a.numel()) * sizeof(float)) == 0;
}

}  // namespace

// ------------------------------------------------------------- image files -

TEST_CASE("pgm writer produces the exact documented bytes") {
    fs::path dir = tmp_dir("pgm_golden");

    write_pgm(Tensor({1, 1, 1}, {-1.0f}), (dir / "lo.pgm").string());
    REQUIRE(file_bytes(dir / "lo.pgm") == std::string("P5\n1 1\n255\n") + '\x00');

    write_pgm(Tensor({1, 1, 1}, {1.0f}), (dir / "hi.pgm").string());
    REQUIRE(file_bytes(dir / "hi.pgm") == std::string("P5\n1 1\n255\n") + '\xff');

    write_pgm(Tensor({1, 1, 1}, {0.0f}), (dir / "mid.pgm").string());
    REQUIRE(file_bytes(dir / "mid.pgm") == std::string("P5\n1 1\n255\n") + '\x80');  // 128
}

TEST_CASE("pixel byte mapping rounds half up and clamps") {
    REQUIRE(pixel_byte(-1.0f) == 0);
    REQUIRE(pixel_byte(1.0f) == 255);
    REQUIRE(pixel_byte(0.0f) == 128);
    REQUIRE(pixel_byte(-3.0f) == 0);
    REQUIRE(pixel_byte(2.5f) == 255);
}

TEST_CASE("all byte values survive a tensor round-trip") {
    GrayImage im;
    im.height = 16;
    im.width = 16;
    im.pixels.resize(256);
    for (int i = 0; i < 256; ++i) im.pixels[size_t(i)] = std::uint8_t(i);
    GrayImage back = tensor_to_image(image_to_tensor(im));
    REQUIRE(back.pixels == im.pixels);
}

TEST_CASE("pgm files round-trip and reject malformed input") {
    fs::path dir = tmp_dir("pgm_rt");
    Rng rng(3);
    Tensor img = Tensor::randn({1, 9, 13}, rng, 0.4);
    write_pgm(img, (dir / "a.pgm").string());
    GrayImage back = read_pgm((dir / "a.pgm").string());
    REQUIRE(back.height == 9);
    REQUIRE(back.width == 13);
    REQUIRE(back.pixels == tensor_to_image(img).pixels);

    // comments in the header are legal
    std::ofstream ok(dir / "c.pgm", std::ios::binary);
    ok << "P5\n# a comment\n2 1\n255\n";
    ok.put('\x01');
    ok.put('\x02');
    ok.close();
    GrayImage c = read_pgm((dir / "c.pgm").string());
    REQUIRE(c.width == 2);
    REQUIRE(c.pixels == std::vector<std::uint8_t>{1, 2});

    std::ofstream bad1(dir / "bad1.pgm", std::ios::binary);
    bad1 << "P6\n1 1\n255\n x";
    bad1.close();
    REQUIRE_THROWS_AS(read_pgm((dir / "bad1.pgm").string()), io_error);

    std::ofstream bad2(dir / "bad2.pgm", std::ios::binary);
    bad2 << "P5\n4 4\n255\nxy";  // raster too short
    bad2.close();
    REQUIRE_THROWS_AS(read_pgm((dir / "bad2.pgm").string()), io_error);

    std::ofstream bad3(dir / "bad3.pgm", std::ios::binary);
    bad3 << "P5\n1 1\n127\n ";
    bad3.close();
    REQUIRE_THROWS_AS(read_pgm((dir / "bad3.pgm").string()), io_error);

    REQUIRE_THROWS_AS(read_pgm((dir / "missing.pgm").string()), io_error);
}

TEST_CASE("png files round-trip grayscale bytes") {
    fs::path dir = tmp_dir("png_rt");
    GrayImage im;
    im.height = 5;
    im.width = 7;
    for (int i = 0; i < 35; ++i) im.pixels.push_back(std::uint8_t(i * 7));
    write_png(im, (dir / "g.png").string());
    GrayImage back = read_png((dir / "g.png").string());
    REQUIRE(back.height == im.height);
    REQUIRE(back.width == im.width);
    REQUIRE(back.pixels == im.pixels);

    REQUIRE_THROWS_AS(read_png((dir / "missing.png").string()), io_error);
    REQUIRE_THROWS_AS(read_gray_image((dir / "what.bmp").string()), io_error);
}

// -------------------------------------------------------------- preprocess -

TEST_CASE("preprocess scales to height 64 and center-pads to width 256") {
    Tensor raw = Tensor::full({1, 80, 100}, -1.0f);  // all ink
    Tensor out = preprocess(raw);
    REQUIRE(out.shape == std::vector<int>{1, 64, 256});
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 256; ++x) {
            const float v = out.data()[y * 256 + x];
            if (x < 88 || x >= 168) {
                REQUIRE(v == 1.0f);  // background padding, 88 columns each side
            } else {
                REQUIRE(std::abs(v - (-1.0f)) < 1e-5f);
            }
        }
}

TEST_CASE("preprocess leaves target-geometry input untouched and is idempotent") {
    StyleParams s;
    s.slant = 0.2;
    s.wobble_amp = 1.5;
    Tensor word = render_word("echo", s, 64, 256);
    Tensor once = preprocess(word);
    REQUIRE(same_pixels(once, word));

    Tensor small = render_word("salt", s, 32, 128);
    Tensor p1 = preprocess(small);
    Tensor p2 = preprocess(p1);
    REQUIRE(same_pixels(p1, p2));
}

TEST_CASE("over-wide input is squeezed to the width cap without padding") {
    Tensor raw = Tensor::full({1, 64, 512}, 0.5f);
    raw.mutable_data()[0] = -1.0f;
    Tensor out = preprocess(raw);
    REQUIRE(out.shape == std::vector<int>{1, 64, 256});
    // no background frame was added
    REQUIRE(out.data()[255] < 1.0f);
}

TEST_CASE("preprocess clamps out-of-range values and rejects empty input") {
    Tensor raw = Tensor::full({1, 64, 256}, 1.5f);
    Tensor out = preprocess(raw);
    for (std::int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == 1.0f);

    GrayImage empty;
    REQUIRE_THROWS_AS(preprocess(empty), validation_error);
}

// ---------------------------------------------------------------- manifest -

TEST_CASE("manifest loading filters word lengths and densifies writer ids") {
    fs::path dir = tmp_dir("manifest");
    StyleParams s;
    for (const char* name : {"a.pgm", "b.pgm", "c.pgm", "d.pgm"})
        write_pgm(render_word("oo", s, 32, 64), (dir / name).string());

    {
        std::ofstream m(dir / "manifest.tsv", std::ios::binary);
        m << "a.pgm\t17\ta\n";            // length 1: dropped
        m << "b.pgm\t204\tabout\n";       // survives
        m << "c.pgm\t17\telephants\n";    // length 9: dropped
        m << "d.pgm\t17\tcat\n";          // survives
    }
    Dataset ds = load_manifest((dir / "manifest.tsv").string());
    REQUIRE(ds.records.size() == 2);
    REQUIRE(ds.num_writers == 2);
    REQUIRE(ds.original_writer_ids == std::vector<int>{17, 204});
    REQUIRE(ds.records[0].transcription == "about");
    REQUIRE(ds.records[0].writer_id == 1);  // 204 -> dense 1 (sorted)
    REQUIRE(ds.records[1].transcription == "cat");
    REQUIRE(ds.records[1].writer_id == 0);  // 17 -> dense 0
    REQUIRE(ds.records[0].image.shape == std::vector<int>{1, 64, 256});

    // boundary lengths: 2 and 7 survive, 1 and 8 do not
    {
        std::ofstream m(dir / "bounds.tsv", std::ios::binary);
        m << "a.pgm\t0\ton\n";
        m << "b.pgm\t0\tglimmer\n";
        m << "c.pgm\t0\tx\n";
        m << "d.pgm\t0\tklmnopqr\n";
    }
    Dataset bounds = load_manifest((dir / "bounds.tsv").string());
    REQUIRE(bounds.records.size() == 2);
    REQUIRE(bounds.records[0].transcription == "on");
    REQUIRE(bounds.records[1].transcription == "glimmer");
}

TEST_CASE("manifest errors carry line numbers and paths") {
    fs::path dir = tmp_dir("manifest_err");
    StyleParams s;
    write_pgm(render_word("oo", s, 32, 64), (dir / "ok.pgm").string());

    {
        std::ofstream m(dir / "twofields.tsv", std::ios::binary);
        m << "ok.pgm\t3\tcat\n";
        m << "ok.pgm\tmissing-word-column\n";
    }
    REQUIRE_THROWS_MATCHES(load_manifest((dir / "twofields.tsv").string()), parse_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("twofields.tsv:2")));

    {
        std::ofstream m(dir / "badwriter.tsv", std::ios::binary);
        m << "ok.pgm\tx7\tcat\n";
    }
    REQUIRE_THROWS_MATCHES(
        load_manifest((dir / "badwriter.tsv").string()), parse_error,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("x7")));

    {
        std::ofstream m(dir / "gone.tsv", std::ios::binary);
        m << "nosuch.pgm\t1\tcat\n";
    }
    REQUIRE_THROWS_MATCHES(
        load_manifest((dir / "gone.tsv").string()), io_error,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("nosuch.pgm")));

    REQUIRE_THROWS_AS(load_manifest((dir / "absent.tsv").string()), io_error);
}

TEST_CASE("a generated dataset survives the disk round-trip") {
    ToySpec spec;
    spec.num_styles = 2;
    spec.words = {"on", "cat"};
    spec.samples_per_pair = 2;
    spec.seed = 5;
    Dataset ds = generate_toy(spec);

    fs::path dir = tmp_dir("toy_rt");
    const std::string manifest = write_dataset(ds, dir.string());
    Dataset back = load_manifest(manifest, /*apply_preprocess=*/false);

    REQUIRE(back.records.size() == ds.records.size());
    REQUIRE(back.num_writers == ds.num_writers);
    for (size_t i = 0; i < ds.records.size(); ++i) {
        REQUIRE(back.records[i].transcription == ds.records[i].transcription);
        REQUIRE(back.records[i].writer_id == ds.records[i].writer_id);
        // PGM quantizes to 8 bits; compare at byte resolution
        REQUIRE(tensor_to_image(back.records[i].image).pixels ==
                tensor_to_image(ds.records[i].image).pixels);
    }
}

// --------------------------------------------------------------- toy data --

TEST_CASE("toy generation is deterministic and counts records exactly") {
    ToySpec spec;
    spec.seed = 7;
    Dataset a = generate_toy(spec);
    Dataset b = generate_toy(spec);
    REQUIRE(a.records.size() == 128);  // 4 styles x 8 words x 4 samples
    REQUIRE(b.records.size() == 128);
    for (size_t i = 0; i < a.records.size(); ++i) {
        REQUIRE(a.records[i].writer_id == b.records[i].writer_id);
        REQUIRE(a.records[i].transcription == b.records[i].transcription);
        REQUIRE(same_pixels(a.records[i].image, b.records[i].image));
    }

    ToySpec other = spec;
    other.seed = 8;
    Dataset c = generate_toy(other);
    bool any_diff = false;
    for (size_t i = 0; i < a.records.size() && !any_diff; ++i)
        if (!same_pixels(a.records[i].image, c.records[i].image)) any_diff = true;
    REQUIRE(any_diff);
}

TEST_CASE("toy spec validation") {
    ToySpec spec;
    spec.words = {"Cat"};
    REQUIRE_THROWS_MATCHES(
        generate_toy(spec), validation_error,
        Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("'C'")));
    spec = {};
    spec.num_styles = 0;
    REQUIRE_THROWS_AS(generate_toy(spec), validation_error);
    spec = {};
    spec.words = {};
    REQUIRE_THROWS_AS(generate_toy(spec), validation_error);
    spec = {};
    spec.height = 4;
    REQUIRE_THROWS_AS(generate_toy(spec), validation_error);
}

TEST_CASE("toy styles are pairwise distinct and samples vary within a pair") {
    ToySpec spec;
    spec.seed = 11;
    auto params = toy_style_params(spec);
    REQUIRE(params.size() == 4);
    for (size_t i = 0; i < params.size(); ++i)
        for (size_t j = i + 1; j < params.size(); ++j) {
            const bool distinct = params[i].slant != params[j].slant ||
                                  params[i].thickness != params[j].thickness ||
                                  params[i].wobble_amp != params[j].wobble_amp ||
                                  params[i].wobble_freq != params[j].wobble_freq;
            REQUIRE(distinct);
        }

    Dataset ds = generate_toy(spec);
    // records 0 and 1 are the same (style, word) pair, different samples
    REQUIRE(ds.records[0].transcription == ds.records[1].transcription);
    REQUIRE(ds.records[0].writer_id == ds.records[1].writer_id);
    REQUIRE_FALSE(same_pixels(ds.records[0].image, ds.records[1].image));

    // images carry both ink and background, inside [-1, 1]
    float lo = 2.0f, hi = -2.0f;
    for (std::int64_t i = 0; i < ds.records[0].image.numel(); ++i) {
        lo = std::min(lo, ds.records[0].image.data()[i]);
        hi = std::max(hi, ds.records[0].image.data()[i]);
    }
    REQUIRE(lo < 0.0f);
    REQUIRE(hi == 1.0f);
    REQUIRE(lo >= -1.0f);
}

TEST_CASE("toy styles separate under a 3-nearest-neighbor probe") {
    ToySpec spec;  // defaults: 4 styles x 8 words x 4 samples
    spec.seed = 0;
    Dataset ds = generate_toy(spec);

    std::vector<const WordRecord*> train, test;
    int counter = 0;
    for (const auto& r : ds.records) {
        // every 4th record of each (style, word) pair is held out
        if (counter % spec.samples_per_pair == spec.samples_per_pair - 1)
            test.push_back(&r);
        else
            train.push_back(&r);
        ++counter;
    }

    int hits = 0;
    for (const auto* q : test) {
        std::vector<std::pair<double, int>> dist;
        for (const auto* t : train) {
            double d = 0.0;
            for (std::int64_t i = 0; i < q->image.numel(); ++i) {
                const double e = double(q->image.data()[i]) - double(t->image.data()[i]);
                d += e * e;
            }
            dist.emplace_back(d, t->writer_id);
        }
        std::partial_sort(dist.begin(), dist.begin() + 3, dist.end());
        std::map<int, int> votes;
        for (int k = 0; k < 3; ++k) ++votes[dist[size_t(k)].second];
        int best = dist[0].second, best_n = 0;
        for (const auto& [cls, n] : votes)
            if (n > best_n) {
                best = cls;
                best_n = n;
            }
        if (best == q->writer_id) ++hits;
    }
    const double acc = double(hits) / double(test.size());
    CAPTURE(hits, test.size());
    REQUIRE(acc >= 0.90);
}

TEST_CASE("dataset vocabulary covers every transcription") {
    ToySpec spec;
    spec.num_styles = 2;
    spec.words = {"cat", "dog"};
    spec.samples_per_pair = 1;
    Dataset ds = generate_toy(spec);
    Vocabulary v = ds.vocabulary();
    for (const auto& r : ds.records)
        REQUIRE_NOTHROW(tokenize(r.transcription, v, 8));
}
