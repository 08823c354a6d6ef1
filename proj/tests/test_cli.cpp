#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "glyphdiffuse/cli.hpp"

using namespace gdf;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;

namespace {

std::filesystem::path tmp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("gdf_cli_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct RunResult {
    int rc;
    std::string out;
    std::string err;
};

RunResult run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int rc = cli::run(std::move(args), out, err);
    return {rc, out.str(), err.str()};
}

// tiny-but-real pipeline config shared by the command tests
const std::vector<std::string> kTinyData = {
    "--set", "dataset.num_styles=2",  "--set", "dataset.words=on,cat",
    "--set", "dataset.height=16",     "--set", "dataset.width=64",
    "--set", "dataset.samples_per_pair=4",
};
const std::vector<std::string> kTinyModel = {
    "--set", "denoiser.base_channels=4", "--set", "denoiser.text_dim=8",
    "--set", "schedule.timesteps=10",    "--set", "train.epochs=1",
    "--set", "train.batch_size=4",       "--set", "train.learning_rate=1e-3",
};

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("config echo re-parses to an identical config") {
    RunConfig cfg;
    REQUIRE(config_from_text(config_to_text(cfg)) == cfg);

    cfg.schedule.timesteps = 250;
    cfg.schedule.beta_end = 0.07;
    cfg.denoiser.channel_multipliers = "1,2,4";
    cfg.denoiser.zero_init_final = false;
    cfg.train.learning_rate = 3.000000000000001e-4;
    cfg.train.seed = 18446744073709551615ull;  // max u64 survives the trip
    cfg.train.checkpoint_dir = "";             // empty strings survive too
    cfg.dataset.words = "alpha,beta";
    cfg.sample.lambda = 1.0 / 3.0;
    RunConfig back = config_from_text(config_to_text(cfg));
    REQUIRE(back == cfg);
    REQUIRE(back.train.learning_rate == cfg.train.learning_rate);
    REQUIRE(back.sample.lambda == cfg.sample.lambda);
    REQUIRE(back.train.seed == cfg.train.seed);
}

TEST_CASE("config parsing is strict") {
    REQUIRE_THROWS_MATCHES(config_from_text("schedule.timestps = 5\n", "bad.cfg"), parse_error,
                           MessageMatches(ContainsSubstring("bad.cfg:1") &&
                                          ContainsSubstring("schedule.timestps")));
    REQUIRE_THROWS_MATCHES(
        config_from_text("train.epochs = 1\ntrain.epochs = 2\n"), parse_error,
        MessageMatches(ContainsSubstring("repeated")));
    REQUIRE_THROWS_AS(config_from_text("just some words\n"), parse_error);
    REQUIRE_THROWS_AS(config_from_text("train.epochs = five\n"), parse_error);
    REQUIRE_THROWS_AS(config_from_text("dataset.preprocess = yes\n"), parse_error);
    REQUIRE_THROWS_AS(config_from_text("denoiser.attention_levels = 1,,2\n"), parse_error);
    REQUIRE_THROWS_AS(config_from_text("train.seed = -3\n"), parse_error);

    // comments, blank lines and spacing are fine; lists are normalized
    RunConfig cfg = config_from_text("# comment\n\n  denoiser.channel_multipliers =  1, 2 ,4 \n");
    REQUIRE(cfg.denoiser.channel_multipliers == "1,2,4");
    REQUIRE_THROWS_AS(config_get(cfg, "no.such.key"), parse_error);
    REQUIRE(config_get(cfg, "denoiser.channel_multipliers") == "1,2,4");
}

TEST_CASE("paper preset pins the reference recipe") {
    RunConfig cfg;
    apply_preset(cfg, "paper-iam");
    REQUIRE(cfg.schedule.timesteps == 1000);
    REQUIRE(cfg.schedule.beta_start == 1e-4);
    REQUIRE(cfg.schedule.beta_end == 0.02);
    REQUIRE(cfg.denoiser.base_channels == 320);
    REQUIRE(cfg.denoiser.attention_heads == 4);
    REQUIRE(cfg.denoiser.text_dim == 320);
    REQUIRE(cfg.train.learning_rate == 1e-4);
    REQUIRE(cfg.train.batch_size == 224);
    REQUIRE(cfg.train.epochs == 1000);
    REQUIRE_THROWS_AS(apply_preset(cfg, "desk-gpu"), validation_error);
}

TEST_CASE("config provenance rides inside checkpoint meta") {
    RunConfig cfg;
    cfg.train.epochs = 7;
    cfg.dataset.words = "river";
    std::string meta = "format=glyphdiffuse.bundle.v1\nvocab=101,105\n";
    embed_config(meta, cfg);
    REQUIRE(config_from_meta(meta) == cfg);
    REQUIRE_THROWS_AS(config_from_meta("format=x\n"), parse_error);
}

TEST_CASE("cli usage errors exit with status 2") {
    RunResult r = run_cli({});
    REQUIRE(r.rc == 2);
    REQUIRE_THAT(r.err, ContainsSubstring("Usage") || ContainsSubstring("usage"));

    REQUIRE(run_cli({"no-such-command"}).rc == 2);
    REQUIRE(run_cli({"sample", "--ckpt", "x.ckpt", "--bogus"}).rc == 2);

    RunResult help = run_cli({"--help"});
    REQUIRE(help.rc == 0);
    REQUIRE_THAT(help.out, ContainsSubstring("gen-toy") && ContainsSubstring("sweep-timesteps"));
}

TEST_CASE("cli validation failures exit with status 1 and one diagnostic line") {
    RunResult r = run_cli({"gen-toy", "--out-dir", tmp_dir("v1").string(), "--set",
                           "dataset.num_styles=zero"});
    REQUIRE(r.rc == 1);
    REQUIRE_THAT(r.err, ContainsSubstring("error:"));
    REQUIRE(std::count(r.err.begin(), r.err.end(), '\n') == 1);

    REQUIRE(run_cli({"sample", "--ckpt", "/nonexistent/m.ckpt"}).rc == 1);
    REQUIRE(run_cli({"gen-toy", "--out-dir", tmp_dir("v2").string(), "--set", "noeq"}).rc == 1);
}

TEST_CASE("gen-toy writes a reproducible dataset") {
    const auto d1 = tmp_dir("gen1"), d2 = tmp_dir("gen2");
    RunResult r1 = run_cli(cat({"gen-toy", "--out-dir", d1.string()}, kTinyData));
    RunResult r2 = run_cli(cat({"gen-toy", "--out-dir", d2.string()}, kTinyData));
    REQUIRE(r1.rc == 0);
    REQUIRE(r2.rc == 0);
    REQUIRE_THAT(r1.out, ContainsSubstring("wrote 16 images"));
    REQUIRE(file_bytes(d1 / "manifest.tsv") == file_bytes(d2 / "manifest.tsv"));
    REQUIRE(file_bytes(d1 / "im00000_w0.pgm") == file_bytes(d2 / "im00000_w0.pgm"));

    // the written tree loads back as a dataset
    Dataset ds = load_manifest((d1 / "manifest.tsv").string(), false);
    REQUIRE(int(ds.records.size()) == 16);
    REQUIRE(ds.num_writers == 2);
}

TEST_CASE("cli end-to-end: train, provenance echo, sample, sweep, evaluate") {
    const auto dir = tmp_dir("e2e");
    const std::string ckpt = (dir / "m.ckpt").string();

    RunResult tr = run_cli(cat(cat({"train", "--out", ckpt}, kTinyData), kTinyModel));
    CAPTURE(tr.err);
    REQUIRE(tr.rc == 0);
    REQUIRE_THAT(tr.out, ContainsSubstring("epoch=1 loss=") && ContainsSubstring("saved "));

    SECTION("checkpoint carries the resolved config verbatim") {
        RunConfig want;
        config_set(want, "dataset.num_styles", "2");
        config_set(want, "dataset.words", "on,cat");
        config_set(want, "dataset.height", "16");
        config_set(want, "dataset.width", "64");
        config_set(want, "dataset.samples_per_pair", "4");
        config_set(want, "denoiser.base_channels", "4");
        config_set(want, "denoiser.text_dim", "8");
        config_set(want, "schedule.timesteps", "10");
        config_set(want, "train.epochs", "1");
        config_set(want, "train.batch_size", "4");
        config_set(want, "train.learning_rate", "1e-3");
        REQUIRE(config_from_meta(Checkpoint::load(ckpt).meta) == want);
    }

    SECTION("sampling from the checkpoint is byte-reproducible") {
        const std::string img1 = (dir / "a.pgm").string(), img2 = (dir / "b.pgm").string();
        REQUIRE(run_cli({"sample", "--ckpt", ckpt, "--word", "cat", "--writer", "1", "--t-sample",
                         "6", "--seed", "1", "--out", img1}).rc == 0);
        REQUIRE(run_cli({"sample", "--ckpt", ckpt, "--word", "cat", "--writer", "1", "--t-sample",
                         "6", "--seed", "1", "--out", img2}).rc == 0);
        REQUIRE(file_bytes(img1) == file_bytes(img2));

        RunResult bad = run_cli({"sample", "--ckpt", ckpt, "--word", "cat", "--writer", "9",
                                 "--out", (dir / "x.pgm").string()});
        REQUIRE(bad.rc == 1);
        REQUIRE_THAT(bad.err, ContainsSubstring("writer"));
        REQUIRE(run_cli({"sample", "--ckpt", ckpt, "--word", "zq!",
                         "--out", (dir / "x.pgm").string()}).rc == 1);
    }

    SECTION("interpolation blends writers") {
        const std::string img = (dir / "blend.pgm").string();
        REQUIRE(run_cli({"interpolate", "--ckpt", ckpt, "--word", "on", "--writer-a", "0",
                         "--writer-b", "1", "--lambda", "0.5", "--t-sample", "6", "--seed", "2",
                         "--out", img}).rc == 0);
        REQUIRE(std::filesystem::exists(img));
        REQUIRE(run_cli({"interpolate", "--ckpt", ckpt, "--word", "on", "--lambda", "1.5",
                         "--out", img}).rc == 1);
    }

    SECTION("timestep sweep emits one image per truncation") {
        const auto sdir = dir / "sweep";
        RunResult sw = run_cli({"sweep-timesteps", "--ckpt", ckpt, "--steps", "2:10:2", "--word",
                                "on", "--writer", "0", "--seed", "3", "--out-dir", sdir.string()});
        REQUIRE(sw.rc == 0);
        for (int t : {2, 4, 6, 8, 10})
            REQUIRE(std::filesystem::exists(sdir / ("t" + std::to_string(t) + ".pgm")));
        REQUIRE(run_cli({"sweep-timesteps", "--ckpt", ckpt, "--steps", "10:2:2", "--out-dir",
                         sdir.string()}).rc == 1);
        REQUIRE(run_cli({"sweep-timesteps", "--ckpt", ckpt, "--steps", "weird", "--out-dir",
                         sdir.string()}).rc == 1);
    }

    SECTION("evaluate reports the documented keys and a summary file") {
        const std::string summary = (dir / "eval.json").string();
        RunResult ev = run_cli(cat({"evaluate", "--ckpt", ckpt, "--n", "12", "--seed", "4",
                                    "--summary", summary, "--set", "metrics.classifier_epochs=5",
                                    "--set", "metrics.classifier_base_channels=2", "--set",
                                    "sample.t_sample=4"},
                                   kTinyData));
        CAPTURE(ev.err);
        REQUIRE(ev.rc == 0);
        for (const char* key : {"fid=", "style_accuracy=", "n_real=16", "n_generated=12"})
            REQUIRE_THAT(ev.out, ContainsSubstring(key));

        const nlohmann::json j = nlohmann::json::parse(file_bytes(summary));
        REQUIRE(j.at("n_real") == 16);
        REQUIRE(j.at("n_generated") == 12);
        REQUIRE(j.at("fid").get<double>() >= 0.0);
        const double acc = j.at("style_accuracy").get<double>();
        REQUIRE(acc >= 0.0);
        REQUIRE(acc <= 1.0);
    }
}

TEST_CASE("cli trains and reuses a learned codec") {
    const auto dir = tmp_dir("codec");
    const std::string cpath = (dir / "codec.ckpt").string();
    RunResult tc = run_cli(cat({"train-codec", "--out", cpath, "--set", "codec.kind=learned",
                                "--set", "codec.epochs=2", "--set", "codec.batch_size=8", "--set",
                                "codec.hidden=4", "--set", "codec.latent_channels=2"},
                               kTinyData));
    CAPTURE(tc.err);
    REQUIRE(tc.rc == 0);
    REQUIRE_THAT(tc.out, ContainsSubstring("saved " + cpath));

    // a denoiser expecting 4 channels cannot sit on a 2-channel codec
    RunResult bad = run_cli(cat(cat({"train", "--out", (dir / "m.ckpt").string(), "--codec",
                                     cpath},
                                    kTinyData),
                                kTinyModel));
    REQUIRE(bad.rc == 1);
    REQUIRE_THAT(bad.err, ContainsSubstring("latent channels"));

    RunResult ok = run_cli(cat(cat(cat({"train", "--out", (dir / "m.ckpt").string(), "--codec",
                                        cpath},
                                       kTinyData),
                                   kTinyModel),
                               {"--set", "denoiser.in_channels=2"}));
    CAPTURE(ok.err);
    REQUIRE(ok.rc == 0);

    // the bundle remembers the learned codec
    TrainedBundle b = load_bundle(Checkpoint::load((dir / "m.ckpt").string()));
    REQUIRE_THAT(b.codec.kind_str(), ContainsSubstring("learned"));
}
