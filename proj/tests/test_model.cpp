#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "model_oracle.hpp"
#include "oracles.hpp"
#include "vqt/model.hpp"

namespace fs = std::filesystem;
using vqt::ModelConfig;
using vqt::RawClip;
using vqt::Tensor;

namespace {

RawClip random_clip(const ModelConfig& cfg, uint64_t seed) {
    RawClip clip;
    clip.t = cfg.clip_len;
    clip.h = cfg.height;
    clip.w = cfg.width;
    clip.pixels.resize(clip.t * clip.h * clip.w * 3);
    vqt::Rng rng(seed);
    for (auto& p : clip.pixels) p = static_cast<float>(rng.uniform());
    return clip;
}

ModelConfig micro_config() {
    ModelConfig c = ModelConfig::tiny();
    c.depth = 1;
    c.embed_dim = 8;
    c.heads = 2;
    c.patch = 8;
    c.height = 16;
    c.width = 16;  // N = 4
    c.clip_len = 4;
    return c;
}

fs::path fresh_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("zero head predicts zero; forward is deterministic per seed") {
    auto cfg = micro_config();
    auto model = vqt::build_model<double>(cfg, 3);
    std::fill(model.head_weight.values_mut().begin(), model.head_weight.values_mut().end(), 0.0);
    std::fill(model.head_bias.values_mut().begin(), model.head_bias.values_mut().end(), 0.0);
    const RawClip clip = random_clip(cfg, 1);
    CHECK(vqt::model_forward(model, clip, vqt::Rng(5)).scalar() == 0.0);

    auto model2 = vqt::build_model<double>(cfg, 9);
    const double a = vqt::model_forward(model2, clip, vqt::Rng(11)).scalar();
    const double b = vqt::model_forward(model2, clip, vqt::Rng(11)).scalar();
    CHECK(a == b);

    RawClip wrong = clip;
    wrong.t = 3;
    wrong.pixels.resize(wrong.t * wrong.h * wrong.w * 3);
    CHECK_THROWS_AS((void)vqt::model_forward(model2, wrong, vqt::Rng(1)), vqt::ShapeError);
}

TEST_CASE("tiny forward matches the straight-line oracle in both temporal modes") {
    for (auto temporal : {vqt::TemporalMode::mptn, vqt::TemporalMode::dense}) {
        for (auto mode : {vqt::MptnMode::scatter, vqt::MptnMode::literal}) {
            ModelConfig cfg = ModelConfig::tiny();
            cfg.temporal = temporal;
            cfg.mptn_mode = mode;
            auto model = vqt::build_model<double>(cfg, 21);
            vqt::Rng head_rng(24);
            for (auto& v : model.head_weight.values_mut()) v = head_rng.normal() * 0.3;
            model.head_bias.values_mut()[0] = 0.2;
            const RawClip clip = random_clip(cfg, 22);
            const double got = vqt::model_forward(model, clip, vqt::Rng(23)).scalar();
            const double want = oracle::oracle_model_forward(model, clip, vqt::Rng(23));
            CHECK(std::abs(got - want) < 1e-8);
            if (temporal == vqt::TemporalMode::dense) break;  // mptn_mode is irrelevant
        }
    }
}

TEST_CASE("smooth_l1 values, batching, and derivative continuity") {
    auto pred = [](double v) { return Tensor<double>::from({1}, {v}, true); };
    CHECK(vqt::smooth_l1(pred(3.0), 3.0).scalar() == 0.0);
    CHECK(vqt::smooth_l1(pred(3.5), 3.0).scalar() == doctest::Approx(0.125));
    CHECK(vqt::smooth_l1(pred(5.0), 3.0).scalar() == doctest::Approx(1.5));

    // derivative approaches 1 from both sides of |e| = 1
    auto grad_at = [&](double e) {
        auto p = pred(e);
        p.zero_grad();
        vqt::backward(vqt::smooth_l1(p, 0.0));
        return p.grad()[0];
    };
    CHECK(grad_at(1.0 - 1e-6) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(grad_at(1.0 + 1e-6) == doctest::Approx(1.0).epsilon(1e-5));
    const double left = vqt::smooth_l1(pred(1.0 - 1e-7), 0.0).scalar();
    const double right = vqt::smooth_l1(pred(1.0 + 1e-7), 0.0).scalar();
    CHECK(std::abs(left - right) < 1e-6);

    auto batch = vqt::batch_loss<double>({vqt::smooth_l1(pred(3.5), 3.0), vqt::smooth_l1(pred(5.0), 3.0)});
    CHECK(batch.scalar() == doctest::Approx(0.5 * (0.125 + 1.5)));
}

TEST_CASE("full micro-model gradients pass finite differences (pinned selection)") {
    ModelConfig cfg = micro_config();
    auto model = vqt::build_model<double>(cfg, 31);
    const RawClip clip = random_clip(cfg, 32);
    // a live head so gradients reach every parameter group, and offsets away
    // from the bilinear kink at exact grid alignment
    vqt::Rng kick(33);
    for (auto& v : model.head_weight.values_mut()) v = kick.normal() * 0.3;
    for (size_t i = 0; i < model.params.size(); ++i) {
        const auto& name = model.params.name(i);
        if (name.find("offset") != std::string::npos)
            for (auto& v : model.params.tensor(i).values_mut()) v = kick.uniform(0.05, 0.25);
    }
    const auto pinned = vqt::capture_selections(model, clip, vqt::Rng(34));
    auto make_loss = [&] {
        auto p = vqt::model_forward(model, clip, vqt::Rng(34), &pinned);
        return vqt::smooth_l1(p, 2.7);
    };
    std::vector<Tensor<double>> params;
    for (size_t i = 0; i < model.params.size(); ++i) params.push_back(model.params.tensor(i));
    vqt::Rng rng(35);
    oracle::FdOptions opt;
    opt.probes_per_param = 2;
    const double err = oracle::fd_max_rel_error(make_loss, params, rng, opt);
    CHECK(err < 1e-3);
}

TEST_CASE("pathway parameter sharing registers one set and still trains") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.clip_len = 16;  // two pathways: budgets [4, 8]
    auto owned = vqt::build_model<double>(cfg, 71);
    cfg.share_pathway_params = true;
    auto shared = vqt::build_model<double>(cfg, 71);
    REQUIRE(owned.plan.pathway_count() == 2);
    // one attention parameter set fewer per block (6 tensors each)
    CHECK(owned.params.size() == shared.params.size() + 6 * cfg.depth);
    CHECK(shared.params.has("blocks.0.pathways.0.query_proj"));
    CHECK(!shared.params.has("blocks.0.pathways.1.query_proj"));
    // both pathway views alias the same tensors
    CHECK(shared.blocks[0].pathways[0].query_proj.node() ==
          shared.blocks[0].pathways[1].query_proj.node());

    RawClip clip = random_clip(cfg, 72);
    vqt::Rng head_rng(74);
    for (auto& v : shared.head_weight.values_mut()) v = head_rng.normal() * 0.3;
    auto pred = vqt::model_forward(shared, clip, vqt::Rng(73));
    shared.params.zero_grad();
    vqt::backward(vqt::smooth_l1(pred, 3.0));
    bool any_nonzero = false;
    for (double g : shared.params.at("blocks.0.pathways.0.query_proj").grad())
        any_nonzero = any_nonzero || g != 0.0;
    CHECK(any_nonzero);
}

TEST_CASE("strict selection mode runs end to end with possible zero rows") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.strict_selection = true;
    auto model = vqt::build_model<double>(cfg, 81);
    RawClip clip = random_clip(cfg, 82);
    auto a = vqt::model_forward(model, clip, vqt::Rng(83));
    auto b = vqt::model_forward(model, clip, vqt::Rng(83));
    CHECK(a.scalar() == b.scalar());
    vqt::DiagnosticSink sink;
    vqt::score_clip(model, clip, 83, &sink);
    REQUIRE(!sink.records.empty());
    for (const auto& r : sink.records)
        CHECK(r.selection.indices.size() <= r.budget);  // shortfall allowed
}

TEST_CASE("dumped attention rows are normalized distributions over frames") {
    ModelConfig cfg = ModelConfig::tiny();
    auto model = vqt::build_model<double>(cfg, 91);
    RawClip clip = random_clip(cfg, 92);
    vqt::DiagnosticSink sink;
    vqt::score_clip(model, clip, 93, &sink);
    REQUIRE(!sink.records.empty());
    for (const auto& r : sink.records) {
        const size_t rows = r.attention_rows.size() / r.clip_len;
        CHECK(rows == r.selection.indices.size());
        for (size_t row = 0; row < rows; ++row) {
            double sum = 0;
            for (size_t c = 0; c < r.clip_len; ++c) sum += r.attention_rows[row * r.clip_len + c];
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("checkpoint round-trip, corruption, and mismatch reporting") {
    const fs::path dir = fresh_dir("vqt_test_ckpt");
    const std::string path = (dir / "model.vqtw").string();

    ModelConfig cfg = ModelConfig::tiny();
    auto model = vqt::build_model<float>(cfg, 41);
    vqt::save_checkpoint(model.params, cfg, path);

    // config survives, and a same-architecture model loads to bit-identical forwards
    CHECK(vqt::read_checkpoint_config(path) == cfg);
    auto other = vqt::build_model<float>(cfg, 999);
    vqt::load_checkpoint(other.params, path);
    const RawClip clip = random_clip(cfg, 42);
    CHECK(vqt::model_forward(model, clip, vqt::Rng(1)).scalar() ==
          vqt::model_forward(other, clip, vqt::Rng(1)).scalar());

    // save(load(ckpt)) is byte-identical
    const std::string path2 = (dir / "model2.vqtw").string();
    vqt::save_checkpoint(other.params, cfg, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string bytes1((std::istreambuf_iterator<char>(f1)), {});
    const std::string bytes2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(bytes1 == bytes2);

    // truncation is a corrupt-file error, not a crash
    const std::string cut = (dir / "cut.vqtw").string();
    {
        std::ofstream out(cut, std::ios::binary);
        out.write(bytes1.data(), static_cast<std::streamsize>(bytes1.size() * 3 / 5));
    }
    auto scratch = vqt::build_model<float>(cfg, 7);
    CHECK_THROWS_AS(vqt::load_checkpoint(scratch.params, cut), vqt::DataError);

    // tiny checkpoint into the default config names the first offending key
    ModelConfig big;  // default preset
    auto big_model = vqt::build_model<float>(big, 7);
    try {
        vqt::load_checkpoint(big_model.params, path);
        FAIL("expected DataError");
    } catch (const vqt::DataError& e) {
        CHECK(std::string(e.what()).find("tokenizer.embed_weight") != std::string::npos);
        CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
    }

    // dtype mismatch is its own error
    auto dmodel = vqt::build_model<double>(cfg, 41);
    CHECK_THROWS_WITH_AS(vqt::load_checkpoint(dmodel.params, path),
                         doctest::Contains("dtype mismatch"), vqt::DataError);

    // wrong magic
    const std::string notckpt = (dir / "bogus.vqtw").string();
    {
        std::ofstream out(notckpt, std::ios::binary);
        out << "HELLO WORLD, this is not a checkpoint";
    }
    CHECK_THROWS_WITH_AS(vqt::load_checkpoint(scratch.params, notckpt),
                         doctest::Contains("bad magic"), vqt::DataError);
}

TEST_CASE("training: zero rate is a no-op and one sample is memorized") {
    const fs::path dir = fresh_dir("vqt_test_train");
    const auto ds = vqt::generate_synthetic_dataset(2, 8, 32, 32, 91, dir.string());
    vqt::Manifest manifest = ds.manifest;
    manifest.entries[0].split = "train";
    manifest.entries[1].split = "test";

    ModelConfig cfg = ModelConfig::tiny();
    // lr = 0 leaves every parameter untouched
    {
        auto model = vqt::build_model<float>(cfg, 51);
        std::vector<std::vector<float>> before;
        for (size_t i = 0; i < model.params.size(); ++i) before.push_back(model.params.tensor(i).values());
        vqt::TrainConfig tc;
        tc.epochs = 2;
        tc.batch = 1;
        tc.lr = 0.0;
        tc.weight_decay = 0.0;
        tc.seed = 5;
        vqt::train(model, manifest, dir.string(), tc);
        for (size_t i = 0; i < model.params.size(); ++i)
            CHECK(model.params.tensor(i).values() == before[i]);
    }

    // 200 steps on a single sample drive the loss below 1e-3
    {
        vqt::Manifest solo;
        solo.entries.push_back(manifest.entries[0]);
        solo.entries[0].split = "train";
        auto model = vqt::build_model<float>(cfg, 52);
        vqt::TrainConfig tc;
        tc.epochs = 200;  // one batch per epoch
        tc.batch = 1;
        tc.lr = 8e-3;
        tc.weight_decay = 0.0;
        tc.decay_every = 120;
        tc.decay_factor = 0.2;
        tc.seed = 6;
        const auto result = vqt::train(model, solo, dir.string(), tc);
        CHECK(result.log.back().train_loss < 1e-3);
    }
}

TEST_CASE("training loss is monotone non-increasing on a repeated batch") {
    const fs::path dir = fresh_dir("vqt_test_mono");
    const auto ds = vqt::generate_synthetic_dataset(1, 8, 32, 32, 17, dir.string());
    vqt::Manifest solo = ds.manifest;
    solo.entries[0].split = "train";

    auto model = vqt::build_model<float>(vqt::ModelConfig::tiny(), 61);
    vqt::TrainConfig tc;
    tc.epochs = 40;
    tc.batch = 1;
    tc.lr = 1e-4;
    tc.weight_decay = 0.0;
    tc.seed = 8;
    const auto result = vqt::train(model, solo, dir.string(), tc);
    for (size_t e = 11; e < result.log.size(); ++e)
        CHECK(result.log[e].train_loss <= result.log[e - 1].train_loss + 1e-9);
}

}  // TEST_SUITE
