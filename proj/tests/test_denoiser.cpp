#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <string>
#include <vector>

#include "glyphdiffuse/denoiser.hpp"
#include "helpers.hpp"

using namespace gdf;

namespace {

DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.in_channels = 2;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.resnet_blocks_per_level = 1;
    cfg.attention_heads = 2;
    cfg.attention_levels = {1};
    cfg.text_dim = 4;
    cfg.max_text_len = 3;
    cfg.zero_init_final = false;
    return cfg;
}

// One inference forward with the model's own text encoder.
template <class S>
TensorT<S> run(DenoiserModelT<S>& model, const Vocabulary& vocab, const TensorT<S>& z,
               const std::vector<int>& t, const std::vector<int>& styles,
               const std::vector<std::string>& words) {
    TapeT<S> tape = TapeT<S>::inference();
    TensorT<S> ctx = encode_text_batch(tape, model.text, vocab, words);
    return model.predict_noise(tape, z, t, styles, ctx);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

}  // namespace

TEST_CASE("output shape matches the latent input") {
    DenoiserConfig cfg;  // desk defaults: 32 channels, two levels, two heads
    Rng rng(11);
    DenoiserModel model(cfg, 4, 30, rng);
    Vocabulary vocab = Vocabulary::from_words({"abcdefg"});

    Tensor z = Tensor::randn({1, 4, 8, 32}, rng);
    Tensor out = run(model, vocab, z, {500}, {2}, {"fade"});
    REQUIRE(out.shape == z.shape);
}

TEST_CASE("untrained model predicts exactly zero noise") {
    DenoiserConfig cfg = tiny_config();
    cfg.zero_init_final = true;  // the default for real runs
    Rng rng(3);
    DenoiserModel model(cfg, 2, 5, rng);
    Vocabulary vocab = Vocabulary::from_words({"ab"});

    Tensor z = Tensor::randn({2, 2, 4, 8}, rng);
    Tensor out = run(model, vocab, z, {1, 40}, {0, 1}, {"ab", "a"});
    for (std::int64_t i = 0; i < out.numel(); ++i) REQUIRE(out.data()[i] == 0.0f);
}

TEST_CASE("identical inputs give bitwise identical outputs") {
    Rng rng(17);
    DenoiserModel model(tiny_config(), 3, 6, rng);
    Vocabulary vocab = Vocabulary::from_words({"abc"});

    Tensor z = Tensor::randn({2, 2, 8, 8}, rng);
    Tensor a = run(model, vocab, z, {9, 120}, {0, 2}, {"cab", "b"});
    Tensor b = run(model, vocab, z, {9, 120}, {0, 2}, {"cab", "b"});
    REQUIRE(a.shape == b.shape);
    REQUIRE(std::memcmp(a.data(), b.data(), size_t(a.numel()) * sizeof(float)) == 0);
}

TEST_CASE("changing any conditioning input changes the prediction") {
    Rng rng(23);
    DenoiserModel model(tiny_config(), 3, 6, rng);
    Vocabulary vocab = Vocabulary::from_words({"abc"});

    Tensor z = Tensor::randn({1, 2, 4, 8}, rng);
    Tensor base = run(model, vocab, z, {10}, {0}, {"ab"});

    Tensor other_t = run(model, vocab, z, {11}, {0}, {"ab"});
    Tensor other_style = run(model, vocab, z, {10}, {1}, {"ab"});
    Tensor other_text = run(model, vocab, z, {10}, {0}, {"ba"});
    REQUIRE(max_abs_diff(base, other_t) > 0.0);
    REQUIRE(max_abs_diff(base, other_style) > 0.0);
    REQUIRE(max_abs_diff(base, other_text) > 0.0);
}

TEST_CASE("single-level config runs without resampling") {
    DenoiserConfig cfg = tiny_config();
    cfg.channel_multipliers = {1};
    cfg.attention_levels = {0};
    Rng rng(5);
    DenoiserModel model(cfg, 2, 5, rng);
    Vocabulary vocab = Vocabulary::from_words({"ab"});

    Tensor z = Tensor::randn({1, 2, 5, 3}, rng);  // odd extents are fine at one level
    Tensor out = run(model, vocab, z, {4}, {1}, {"b"});
    REQUIRE(out.shape == z.shape);
}

TEST_CASE("bad inputs and configs are rejected") {
    Rng rng(29);
    DenoiserModel model(tiny_config(), 2, 5, rng);
    Vocabulary vocab = Vocabulary::from_words({"ab"});

    SECTION("spatial extents not divisible by the downsampling factor") {
        Tensor z = Tensor::randn({1, 2, 7, 8}, rng);
        REQUIRE_THROWS_AS(run(model, vocab, z, {1}, {0}, {"a"}), shape_error);
    }
    SECTION("wrong channel count") {
        Tensor z = Tensor::randn({1, 3, 8, 8}, rng);
        REQUIRE_THROWS_AS(run(model, vocab, z, {1}, {0}, {"a"}), shape_error);
    }
    SECTION("unknown writer id") {
        Tensor z = Tensor::randn({1, 2, 4, 8}, rng);
        REQUIRE_THROWS_AS(run(model, vocab, z, {1}, {7}, {"a"}), index_error);
    }
    SECTION("batch size mismatch between latents and timesteps") {
        Tensor z = Tensor::randn({2, 2, 4, 8}, rng);
        REQUIRE_THROWS_AS(run(model, vocab, z, {1}, {0, 1}, {"a", "b"}), shape_error);
    }
    SECTION("negative timestep") {
        Tensor z = Tensor::randn({1, 2, 4, 8}, rng);
        REQUIRE_THROWS_AS(run(model, vocab, z, {-1}, {0}, {"a"}), validation_error);
    }
    SECTION("context width mismatch") {
        Tensor z = Tensor::randn({1, 2, 4, 8}, rng);
        Tape tape = Tape::inference();
        Tensor ctx = Tensor::randn({1, 3, 9}, rng);
        REQUIRE_THROWS_AS(model.predict_noise(tape, z, {1}, {0}, ctx), shape_error);
    }
    SECTION("heads must divide the attention width") {
        DenoiserConfig cfg = tiny_config();
        cfg.attention_heads = 3;  // width at the attention level is 8
        REQUIRE_THROWS_AS(DenoiserModel(cfg, 2, 5, rng), validation_error);
    }
    SECTION("attention level out of range") {
        DenoiserConfig cfg = tiny_config();
        cfg.attention_levels = {7};
        REQUIRE_THROWS_AS(DenoiserModel(cfg, 2, 5, rng), validation_error);
    }
    SECTION("odd sinusoid width") {
        DenoiserConfig cfg = tiny_config();
        cfg.base_channels = 5;
        REQUIRE_THROWS_AS(DenoiserModel(cfg, 2, 5, rng), validation_error);
    }
}

TEST_CASE("parameter count matches a walk over the serialized checkpoint") {
    Rng rng(31);
    DenoiserModel model(tiny_config(), 3, 6, rng);

    Checkpoint ck;
    model.save(ck);
    std::int64_t from_ck = 0;
    for (const auto& [name, tensor] : ck.entries()) {
        std::int64_t n = 1;
        for (int e : tensor.shape) n *= e;
        from_ck += n;
    }
    REQUIRE(model.count_parameters() == from_ck);

    // same config and seed -> same count; wider model -> strictly more
    Rng rng2(31);
    DenoiserModel twin(tiny_config(), 3, 6, rng2);
    REQUIRE(twin.count_parameters() == model.count_parameters());

    DenoiserConfig wide = tiny_config();
    wide.base_channels = 8;
    Rng rng3(31);
    DenoiserModel big(wide, 3, 6, rng3);
    REQUIRE(big.count_parameters() > model.count_parameters());
}

TEST_CASE("checkpoint round-trip reproduces predictions bitwise") {
    Rng rng_a(43), rng_b(1000);
    DenoiserModel a(tiny_config(), 3, 6, rng_a);
    DenoiserModel b(tiny_config(), 3, 6, rng_b);
    Vocabulary vocab = Vocabulary::from_words({"abc"});

    Checkpoint ck;
    a.save(ck);
    Checkpoint back = Checkpoint::deserialize(ck.serialize(), "denoiser blob");
    b.load(back);

    Rng rng(77);
    Tensor z = Tensor::randn({2, 2, 4, 8}, rng);
    Tensor ya = run(a, vocab, z, {3, 250}, {0, 2}, {"abc", "c"});
    Tensor yb = run(b, vocab, z, {3, 250}, {0, 2}, {"abc", "c"});
    REQUIRE(std::memcmp(ya.data(), yb.data(), size_t(ya.numel()) * sizeof(float)) == 0);

    // loading into a mismatched architecture fails loudly
    DenoiserConfig wide = tiny_config();
    wide.base_channels = 8;
    Rng rng_c(5);
    DenoiserModel c(wide, 3, 6, rng_c);
    REQUIRE_THROWS_AS(c.load(back), io_error);
}

TEST_CASE("every parameter receives gradient from a mixed batch") {
    Rng rng(53);
    DenoiserModelT<double> model(tiny_config(), 2, 5, rng);
    Vocabulary vocab = Vocabulary::from_words({"ab"});

    Tape64 tape;
    model.attach(tape);
    Tensor64 z = Tensor64::randn({2, 2, 4, 8}, rng);
    Tensor64 target = Tensor64::zeros({2, 2, 4, 8});
    // short word exercises the pad slot, two writers cover the style table
    Tensor64 ctx = encode_text_batch(tape, model.text, vocab, {"a", "ab"});
    Tensor64 out = model.predict_noise(tape, z, {3, 9}, {0, 1}, ctx);
    tape.backward(ops::mse(tape, out, target));

    model.walk([&](const std::string& name, Tensor64& p) {
        Tensor64 g = tape.gradient(p.node);
        double mx = 0.0;
        for (std::int64_t i = 0; i < g.numel(); ++i) mx = std::max(mx, std::abs(g.data()[i]));
        CAPTURE(name);
        REQUIRE(mx > 0.0);
    });
}

TEST_CASE("model gradients match finite differences on sampled parameters") {
    DenoiserConfig cfg = tiny_config();
    cfg.in_channels = 1;
    cfg.max_text_len = 2;
    Rng rng(61);
    DenoiserModelT<double> model(cfg, 2, 5, rng);
    Vocabulary vocab = Vocabulary::from_words({"ab"});

    Tensor64 z = Tensor64::randn({1, 1, 8, 8}, rng);
    Tensor64 target = Tensor64::randn({1, 1, 8, 8}, rng);
    std::vector<int> tsteps{7};
    std::vector<int> styles{1};
    std::vector<std::string> words{"a"};

    auto build = [&](Tape64& tp) -> Tensor64 {
        model.attach(tp);
        Tensor64 ctx = encode_text_batch(tp, model.text, vocab, words);
        Tensor64 out = model.predict_noise(tp, z, tsteps, styles, ctx);
        return ops::mse(tp, out, target);
    };

    std::vector<Tensor64*> params;
    model.walk([&](const std::string&, Tensor64& p) { params.push_back(&p); });
    gdft::fd_gradcheck_sampled(build, params, 0.01, 414243, 1e-3);
}
