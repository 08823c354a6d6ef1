#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "glyphdiffuse/engine.hpp"
#include "helpers.hpp"

using namespace gdf;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("glyphdiffuse_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

bool same_floats(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data(), b.data(), size_t(a.numel()) * sizeof(float)) == 0;
}

// Small end-to-end world: 4 toy records at 16x64, pooled codec, micro U-Net.
struct World {
    ToySpec spec;
    Dataset ds;
    DenoiserConfig arch;
    Codec codec;
    TrainConfig cfg;
    Vocabulary vocab;

    World() {
        spec.num_styles = 2;
        spec.words = {"on", "cat"};
        spec.samples_per_pair = 1;
        spec.height = 16;
        spec.width = 64;
        spec.seed = 9;
        ds = generate_toy(spec);
        vocab = ds.vocabulary();

        arch.in_channels = 4;
        arch.base_channels = 4;
        arch.channel_multipliers = {1, 2};
        arch.attention_heads = 2;
        arch.attention_levels = {1};
        arch.text_dim = 8;
        arch.max_text_len = 8;

        codec = Codec::pooled(2, 4);

        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.learning_rate = 1e-3;
        cfg.timesteps = 20;
        cfg.seed = 3;
        cfg.log_every = 0;
    }

    DenoiserModel fresh_model(std::uint64_t seed = 5) const {
        Rng r(seed);
        return DenoiserModel(arch, ds.num_writers, vocab.size(), r);
    }
};

}  // namespace

// ---------------------------------------------------------- training loss --

TEST_CASE("a predictor that returns the drawn noise has exactly zero loss") {
    Rng gen(2);
    Tensor images = Tensor::randn({4, 1, 8, 16}, gen, 0.3);
    Codec codec = Codec::identity();
    codec.fit_latent_stats(images);
    Schedule sc = linear_schedule(50, 1e-4, 0.02);

    DiffusionBatch batch{images, {0, 1, 0, 1}, {"aa", "bb", "aa", "bb"}};

    // replay the generator to know the noise before training_loss draws it
    Rng rng(42);
    Rng probe = rng;
    for (int i = 0; i < 4; ++i) probe.uniform_int(1, sc.T);
    Tensor expected_eps = Tensor::randn({4, 1, 8, 16}, probe);

    auto stub = [&](Tape&, const Tensor&, const std::vector<int>&, const std::vector<int>&,
                    const std::vector<std::string>&) { return expected_eps; };

    Tape tape = Tape::inference();
    Tensor loss = training_loss(tape, batch, stub, sc, codec, rng);
    REQUIRE(loss.data()[0] == 0.0f);
}

TEST_CASE("a zero predictor scores the mean of squared unit noise") {
    Rng gen(4);
    Tensor images = Tensor::randn({16, 1, 8, 16}, gen, 0.3);  // 2048 noise elements
    Codec codec = Codec::identity();
    codec.fit_latent_stats(images);
    Schedule sc = linear_schedule(50, 1e-4, 0.02);

    DiffusionBatch batch;
    batch.images = images;
    for (int i = 0; i < 16; ++i) {
        batch.writer_ids.push_back(i % 2);
        batch.words.push_back("aa");
    }
    auto zero = [&](Tape&, const Tensor& z_t, const std::vector<int>&, const std::vector<int>&,
                    const std::vector<std::string>&) { return Tensor::zeros(z_t.shape); };

    Tape tape = Tape::inference();
    Rng rng(7);
    const double loss = double(training_loss(tape, batch, zero, sc, codec, rng).data()[0]);
    const double sigma3 = 3.0 * std::sqrt(2.0 / 2048.0);
    CAPTURE(loss, sigma3);
    REQUIRE(std::abs(loss - 1.0) < sigma3);
}

TEST_CASE("training loss rejects malformed batches") {
    Codec codec = Codec::identity();
    Schedule sc = linear_schedule(10, 1e-4, 0.02);
    Rng rng(1);
    auto stub = [&](Tape&, const Tensor& z, const std::vector<int>&, const std::vector<int>&,
                    const std::vector<std::string>&) { return Tensor::zeros(z.shape); };

    DiffusionBatch none;  // default image tensor is not [B,1,H,W]
    Tape tape = Tape::inference();
    REQUIRE_THROWS_AS(training_loss(tape, none, stub, sc, codec, rng), validation_error);

    Rng gen(2);
    DiffusionBatch lopsided{Tensor::randn({2, 1, 4, 4}, gen), {0}, {"aa", "bb"}};
    REQUIRE_THROWS_AS(training_loss(tape, lopsided, stub, sc, codec, rng), shape_error);
}

TEST_CASE("loss gradients match finite differences through the full model") {
    DenoiserConfig micro;
    micro.in_channels = 1;
    micro.base_channels = 4;
    micro.channel_multipliers = {1};
    micro.attention_heads = 2;
    micro.attention_levels = {0};
    micro.text_dim = 4;
    micro.max_text_len = 4;
    micro.zero_init_final = false;

    Vocabulary vocab = Vocabulary::from_words({"ab", "ba"});
    Rng init(3);
    DenoiserModelT<double> model(micro, 2, vocab.size(), init);

    Rng gen(6);
    DiffusionBatchT<double> batch;
    batch.images = Tensor64::randn({2, 1, 4, 8}, gen, 0.5);
    batch.writer_ids = {0, 1};
    batch.words = {"ab", "ba"};

    CodecT<double> codec = CodecT<double>::identity();
    codec.fit_latent_stats(batch.images);
    Schedule sc = linear_schedule(25, 1e-4, 0.02);
    DenoiserPredictorT<double> pred{&model, &vocab};

    std::vector<Tensor64*> params;
    model.walk([&](const std::string&, Tensor64& t) { params.push_back(&t); });

    auto build = [&](Tape64& tp) {
        model.attach(tp);
        Rng rng(7);  // fresh replay: the loss is a pure function of the parameters
        return training_loss(tp, batch, pred, sc, codec, rng);
    };
    gdft::fd_gradcheck_sampled(build, params, 0.02, 99, 1e-3);
}

// ------------------------------------------------------------------ train --

TEST_CASE("identical seeds produce bitwise identical final checkpoints") {
    World w;
    std::ostringstream sink;

    DenoiserModel m1 = w.fresh_model();
    Checkpoint c1 = train(m1, w.ds, w.codec, w.cfg, sink);
    DenoiserModel m2 = w.fresh_model();
    Checkpoint c2 = train(m2, w.ds, w.codec, w.cfg, sink);
    REQUIRE(c1.serialize() == c2.serialize());

    TrainConfig other = w.cfg;
    other.seed = 4;
    DenoiserModel m3 = w.fresh_model();
    Checkpoint c3 = train(m3, w.ds, w.codec, other, sink);
    REQUIRE(c1.serialize() != c3.serialize());
}

TEST_CASE("a zero learning rate leaves every parameter untouched") {
    World w;
    w.cfg.learning_rate = 0.0;
    w.cfg.epochs = 1;
    DenoiserModel model = w.fresh_model();

    std::vector<Tensor> before;  // copy-on-write handles keep the old bytes
    model.walk([&](const std::string&, Tensor& t) { before.push_back(t); });

    std::ostringstream sink;
    train(model, w.ds, w.codec, w.cfg, sink);

    size_t i = 0;
    model.walk([&](const std::string& name, Tensor& t) {
        CAPTURE(name);
        REQUIRE(same_floats(before[i++], t));
    });
}

TEST_CASE("training logs one epoch line per epoch") {
    World w;
    w.cfg.log_every = 1;
    DenoiserModel model = w.fresh_model();
    std::ostringstream log;
    std::vector<double> losses;
    train(model, w.ds, w.codec, w.cfg, log, &losses);

    REQUIRE(losses.size() == 2);
    std::istringstream lines(log.str());
    std::string line;
    int n = 0;
    const std::regex shape(R"(^epoch=\d+ loss=\d+\.\d+$)");
    while (std::getline(lines, line)) {
        CAPTURE(line);
        REQUIRE(std::regex_match(line, shape));
        ++n;
    }
    REQUIRE(n == 2);
    REQUIRE(log.str().substr(0, 8) == "epoch=1 ");
}

TEST_CASE("training rejects bad inputs and aborts on non-finite loss") {
    World w;
    std::ostringstream sink;

    Dataset empty;
    DenoiserModel model = w.fresh_model();
    REQUIRE_THROWS_AS(train(model, empty, w.codec, w.cfg, sink), validation_error);

    TrainConfig bad = w.cfg;
    bad.batch_size = 0;
    REQUIRE_THROWS_AS(train(model, w.ds, w.codec, bad, sink), validation_error);
    bad = w.cfg;
    bad.learning_rate = -1.0;
    REQUIRE_THROWS_AS(train(model, w.ds, w.codec, bad, sink), validation_error);

    // model built for the wrong vocabulary size
    Rng r(1);
    DenoiserModel narrow(w.arch, w.ds.num_writers, 2, r);
    REQUIRE_THROWS_AS(train(narrow, w.ds, w.codec, w.cfg, sink), validation_error);

    // a poisoned weight surfaces as a numeric abort, not a silent NaN run
    DenoiserModel sick = w.fresh_model();
    sick.walk([&](const std::string& name, Tensor& t) {
        if (name == "stem.w") t.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
    });
    REQUIRE_THROWS_AS(train(sick, w.ds, w.codec, w.cfg, sink), numeric_error);
}

TEST_CASE("periodic snapshots appear while training runs") {
    World w;
    w.cfg.epochs = 3;
    w.cfg.checkpoint_every = 1;
    fs::path dir = tmp_dir("snapshots");
    w.cfg.checkpoint_dir = dir.string();

    DenoiserModel model = w.fresh_model();
    std::ostringstream sink;
    Checkpoint final_ck = train(model, w.ds, w.codec, w.cfg, sink);

    REQUIRE(fs::exists(dir / "epoch_1.ckpt"));
    REQUIRE(fs::exists(dir / "epoch_2.ckpt"));
    REQUIRE_FALSE(fs::exists(dir / "epoch_3.ckpt"));  // the final one is returned instead

    TrainedBundle snap = load_bundle(Checkpoint::load((dir / "epoch_2.ckpt").string()));
    REQUIRE(snap.arch.base_channels == w.arch.base_channels);
    REQUIRE(snap.vocab == w.vocab);

    TrainedBundle fin = load_bundle(final_ck);
    REQUIRE(fin.schedule.T == w.cfg.timesteps);
}

TEST_CASE("the checkpoint bundle round-trips every component") {
    World w;
    DenoiserModel model = w.fresh_model();
    std::ostringstream sink;
    Checkpoint ck = train(model, w.ds, w.codec, w.cfg, sink);

    TrainedBundle b = load_bundle(Checkpoint::deserialize(ck.serialize(), "bundle"));
    REQUIRE(b.vocab == w.vocab);
    REQUIRE(b.schedule.T == w.cfg.timesteps);
    REQUIRE(b.schedule.beta_start == w.cfg.beta_start);
    REQUIRE(b.config.learning_rate == w.cfg.learning_rate);  // full-precision echo
    REQUIRE(b.config.seed == w.cfg.seed);
    REQUIRE(b.image_height == 16);
    REQUIRE(b.image_width == 64);
    REQUIRE(b.codec.kind_str() == "pooled(2)");
    REQUIRE(b.codec.has_stats());

    // every trained tensor survives byte for byte
    model.walk([&](const std::string& name, Tensor& t) {
        bool matched = false;
        b.model.walk([&](const std::string& other, Tensor& u) {
            if (other == name) matched = same_floats(t, u);
        });
        CAPTURE(name);
        REQUIRE(matched);
    });
}

// ----------------------------------------------------------------- sample --

namespace {

// Bundle with a non-degenerate (randomly initialized) output head so that
// conditions influence the image even without training.
TrainedBundle live_bundle(const World& w) {
    DenoiserConfig arch = w.arch;
    arch.zero_init_final = false;
    Rng r(21);
    DenoiserModel model(arch, w.ds.num_writers, w.vocab.size(), r);
    Codec codec = w.codec;
    Tensor all({int(w.ds.records.size()), 1, 16, 64});
    for (size_t i = 0; i < w.ds.records.size(); ++i)
        std::copy(w.ds.records[i].image.data(), w.ds.records[i].image.data() + 16 * 64,
                  all.mutable_data() + std::int64_t(i) * 16 * 64);
    codec.fit_latent_stats(all);
    Checkpoint ck = bundle_checkpoint(model, codec, w.vocab, w.cfg, 16, 64);
    return load_bundle(ck);
}

}  // namespace

TEST_CASE("sampling is deterministic and condition-sensitive") {
    World w;
    TrainedBundle b = live_bundle(w);

    SampleRequest req;
    req.word = "cat";
    req.writer_id = 0;
    req.seed = 11;

    Tensor a1 = sample(b, req);
    Tensor a2 = sample(b, req);
    REQUIRE(a1.shape == std::vector<int>{1, 16, 64});
    REQUIRE(same_floats(a1, a2));
    for (std::int64_t i = 0; i < a1.numel(); ++i) {
        REQUIRE(a1.data()[i] >= -1.0f);
        REQUIRE(a1.data()[i] <= 1.0f);
    }

    SampleRequest other = req;
    other.seed = 12;
    REQUIRE_FALSE(same_floats(a1, sample(b, other)));
    other = req;
    other.writer_id = 1;
    REQUIRE_FALSE(same_floats(a1, sample(b, other)));
    other = req;
    other.word = "on";
    REQUIRE_FALSE(same_floats(a1, sample(b, other)));
}

TEST_CASE("interpolated sampling at the endpoints equals plain writer sampling") {
    World w;
    TrainedBundle b = live_bundle(w);
    fs::path dir = tmp_dir("interp");

    SampleRequest plain;
    plain.word = "on";
    plain.writer_id = 0;
    plain.seed = 31;
    Tensor ref = sample_to_file(b, plain, (dir / "plain.pgm").string());

    SampleRequest mix = plain;
    mix.interpolate = true;
    mix.id_a = 0;
    mix.id_b = 1;
    mix.lambda = 0.0;
    Tensor at0 = sample_to_file(b, mix, (dir / "mix0.pgm").string());
    REQUIRE(same_floats(ref, at0));

    // the written artifacts agree byte for byte too
    std::ifstream fa(dir / "plain.pgm", std::ios::binary), fb(dir / "mix0.pgm", std::ios::binary);
    std::string ba((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string bb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    REQUIRE(ba == bb);

    mix.lambda = 1.0;
    plain.writer_id = 1;
    REQUIRE(same_floats(sample(b, plain), sample(b, mix)));

    mix.lambda = 0.5;
    REQUIRE_FALSE(same_floats(sample(b, mix), sample(b, plain)));
}

TEST_CASE("truncated chains visit each timestep once, descending") {
    World w;
    TrainedBundle b = live_bundle(w);

    SampleRequest req;
    req.word = "on";
    req.seed = 2;
    req.T_sample = 5;
    SampleTrace trace;
    sample(b, req, &trace);
    REQUIRE(trace.timesteps == std::vector<int>{5, 4, 3, 2, 1});

    req.T_sample = 0;  // full schedule
    SampleTrace full;
    sample(b, req, &full);
    REQUIRE(int(full.timesteps.size()) == b.schedule.T);
    REQUIRE(full.timesteps.front() == b.schedule.T);
    REQUIRE(full.timesteps.back() == 1);
    for (size_t i = 1; i < full.timesteps.size(); ++i)
        REQUIRE(full.timesteps[i] == full.timesteps[i - 1] - 1);
}

TEST_CASE("sampling validates its request") {
    World w;
    TrainedBundle b = live_bundle(w);

    SampleRequest req;
    req.word = "on";
    req.T_sample = b.schedule.T + 1;
    REQUIRE_THROWS_AS(sample(b, req), validation_error);
    req.T_sample = -2;
    REQUIRE_THROWS_AS(sample(b, req), validation_error);

    req = {};
    req.word = "xq";  // characters outside the vocabulary
    REQUIRE_THROWS_AS(sample(b, req), vocab_error);
    req.word = "notacatto";  // longer than the text window
    REQUIRE_THROWS_AS(sample(b, req), validation_error);

    req = {};
    req.word = "on";
    req.writer_id = 99;
    REQUIRE_THROWS_AS(sample(b, req), index_error);
    req.writer_id = 0;
    req.interpolate = true;
    req.id_a = 0;
    req.id_b = 1;
    req.lambda = 1.5;
    REQUIRE_THROWS_AS(sample(b, req), validation_error);
}

TEST_CASE("an untrained zero-init model still completes truncation sweeps") {
    World w;
    DenoiserModel model = w.fresh_model();  // zero-init output head
    Codec codec = w.codec;
    Tensor probe({1, 1, 16, 64}, 0.5f);
    codec.fit_latent_stats(probe);
    TrainedBundle b = load_bundle(bundle_checkpoint(model, codec, w.vocab, w.cfg, 16, 64));

    for (int steps : {1, 5, 20}) {
        SampleRequest req;
        req.word = "cat";
        req.T_sample = steps;
        req.seed = 100 + steps;
        Tensor img = sample(b, req);
        for (std::int64_t i = 0; i < img.numel(); ++i) REQUIRE(std::isfinite(img.data()[i]));
    }
}

// ---------------------------------------------------------- interpolation --

TEST_CASE("style blends move away from the start row monotonically") {
    Rng rng(13);
    StyleTableT<float> table(4, 16, rng);

    Tensor a = interpolate_styles(table, 2, 3, 0.0);
    Tensor bb = interpolate_styles(table, 2, 3, 1.0);
    REQUIRE(same_floats(a, take_rows(table.weights, {2}).reshaped({16})));
    REQUIRE(same_floats(bb, take_rows(table.weights, {3}).reshaped({16})));

    Tensor mid = interpolate_styles(table, 2, 3, 0.5);
    for (int i = 0; i < 16; ++i)
        REQUIRE(mid.data()[i] ==
                Catch::Approx((a.data()[i] + bb.data()[i]) / 2.0f).margin(1e-6));

    double prev = -1.0;
    for (int k = 0; k <= 10; ++k) {
        Tensor y = interpolate_styles(table, 2, 3, 0.1 * k);
        double d = 0.0;
        for (int i = 0; i < 16; ++i) {
            const double e = double(y.data()[i]) - double(a.data()[i]);
            d += e * e;
        }
        d = std::sqrt(d);
        CAPTURE(k, prev, d);
        REQUIRE(d >= prev - 1e-6);
        prev = d;
    }
}
