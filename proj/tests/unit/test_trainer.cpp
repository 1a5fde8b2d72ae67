#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mcomp/shapes.hpp"
#include "mcomp/trainer.hpp"

using namespace mcomp;
namespace ag = mcomp::ag;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 2;
    cfg.total_steps = 4;
    cfg.timesteps = 10;
    cfg.image_size = 8;
    cfg.k_tokens = 2;
    cfg.adaptor_hidden = 8;
    cfg.checkpoint_every = 2;
    cfg.seed = 5;
    cfg.loss.alpha = 2.0;
    cfg.loss.beta = 1.0;
    cfg.loss.canonical_h = cfg.loss.canonical_w = 2;
    cfg.backbone.base_channels = 4;
    cfg.backbone.heads = 2;
    cfg.backbone.groups = 2;
    cfg.backbone.cond_dim = 16;
    cfg.backbone.time_dim = 8;
    return cfg;
}

// Batch gradient computed with one standalone graph per sample, summing the
// per-sample scaled gradients afterwards; mirrors the training pipeline but
// never shares leaves across samples.
std::map<std::string, Tensor> separate_grads(TrainState& state,
                                             const std::vector<TrainingSample>& batch,
                                             const TrainConfig& cfg, const ModelContext& m) {
    const bool capture = cfg.loss.alpha > 0.0 || cfg.loss.beta > 0.0;
    const double inv_n = 1.0 / double(batch.size());
    std::map<std::string, Tensor> acc;
    for (const auto& name : state.params.names)
        acc.emplace(name, Tensor(state.params.get(name).shape));
    for (const auto& sample : batch) {
        ParamVars pv = ParamVars::from(state.params, /*trainable=*/true);
        PreparedExample ex = make_training_example(sample, cfg, m, state.rng_custom,
                                                   state.rng_drop, state.rng_time,
                                                   state.rng_noise);
        std::vector<ObjectTokenBlockVar> blocks;
        for (size_t i = 0; i < ex.object_feats.size(); ++i)
            blocks.push_back({ex.object_ids[i], adaptor_block_ag(pv, ex.object_feats[i])});
        MultimodalEmbeddingVar emb = build_multimodal_embedding_ag(
            ex.tok, ag::constant(ex.text_emb), blocks, ex.n_objects);
        BackboneOut fw =
            forward_denoise_ag(ex.input, emb.sequence, ex.flags.t, m.backbone, pv, capture);
        ag::Var total = denoising_loss_ag(fw.prediction, ag::constant(ex.eps));
        if (capture) {
            MeanAttention mean =
                mean_attention(fw.record, m.loss.canonical_h, m.loss.canonical_w);
            ag::Var l_c = cross_attention_loss_ag(mean.cross_mean, ex.segs, emb.slot_sets);
            ag::Var l_s = self_attention_loss_ag(mean.self_mean, ex.segs);
            total = ag::add(total, ag::add(ag::scale(l_c, cfg.loss.alpha),
                                           ag::scale(l_s, cfg.loss.beta)));
        }
        ag::backward(ag::scale(total, inv_n));
        for (auto& [name, g] : acc) {
            const Tensor& pg = pv.get(name).grad();
            for (int64_t i = 0; i < g.numel(); ++i) g.data[size_t(i)] += pg.data[size_t(i)];
        }
    }
    return acc;
}

}  // namespace

TEST_CASE("rng state serialization round-trips mid-stream", "[trainer][rng]") {
    Rng r(42);
    for (int i = 0; i < 7; ++i) r.uniform01();
    r.normal();  // leaves the Box-Muller spare cached
    Rng q = Rng::state_from_json(r.state_to_json());
    REQUIRE(q == r);
    for (int i = 0; i < 16; ++i) REQUIRE(q.next_u64() == r.next_u64());
    REQUIRE(q.normal() == r.normal());
}

TEST_CASE("customization branch synthesizes the full frame over a blank canvas",
          "[trainer]") {
    const TrainConfig base = small_config();
    const ModelContext m = ModelContext::from(base);
    const TrainingSample sample = make_shapes_dataset(3, 4, 8, 8)[0];

    TrainConfig on = base;
    on.p_customization = 1.0;
    on.p_drop = 0.0;
    Rng rc(1), rd(2), rt(3), rn(4);
    const PreparedExample ex = make_training_example(sample, on, m, rc, rd, rt, rn);
    CHECK(ex.flags.customization);
    CHECK(ex.effective_layout.customization_flag);
    CHECK(ex.effective_layout.global_box == unit_box());
    for (double v : ex.input.masked_background.data) REQUIRE(v == 0.0);
    CHECK_FALSE(ex.flags.text_dropped);
    CHECK_FALSE(ex.flags.images_dropped);
    CHECK(ex.object_feats.size() == sample.layout.object_boxes.size());

    TrainConfig off = base;
    off.p_customization = 0.0;
    off.p_drop = 0.0;
    Rng rc2(1), rd2(2), rt2(3), rn2(4);
    const PreparedExample ex2 = make_training_example(sample, off, m, rc2, rd2, rt2, rn2);
    CHECK_FALSE(ex2.flags.customization);
    CHECK_FALSE(ex2.effective_layout.customization_flag);
    CHECK(ex2.effective_layout.global_box == sample.layout.global_box);
    // Outside the synthesis region the background latent passes through.
    const Tensor bg_latent = m.codec.encode(sample.background);
    const Tensor region =
        mask_to_tensor(rasterize_box(sample.layout.global_box, m.latent_size(), m.latent_size()));
    bool saw_outside = false;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < m.latent_size(); ++y)
            for (int x = 0; x < m.latent_size(); ++x) {
                if (region.at(y, x) != 0.0) {
                    REQUIRE(ex2.input.masked_background.at(c, y, x) == 0.0);
                } else {
                    REQUIRE(ex2.input.masked_background.at(c, y, x) == bg_latent.at(c, y, x));
                    saw_outside = true;
                }
            }
    CHECK(saw_outside);

    // The noisy latent is the scheduled mix of clean latent and stored noise.
    const Tensor clean = m.codec.encode(sample.ground_truth);
    const double abar = m.schedule.alphas_cumprod[size_t(ex2.flags.t)];
    for (int64_t i = 0; i < clean.numel(); ++i)
        REQUIRE(ex2.input.noisy_latent.data[size_t(i)] ==
                Catch::Approx(std::sqrt(abar) * clean.data[size_t(i)] +
                              std::sqrt(1 - abar) * ex2.eps.data[size_t(i)])
                    .margin(1e-12));

    // Segmentations land on the canonical grid, pairwise disjoint.
    REQUIRE(ex2.segs.maps.size() == sample.layout.object_boxes.size());
    for (const auto& sm : ex2.segs.maps)
        REQUIRE(sm.shape == std::vector<int>({2, 2}));
    for (size_t a = 0; a < ex2.segs.maps.size(); ++a)
        for (size_t b = a + 1; b < ex2.segs.maps.size(); ++b)
            for (int64_t i = 0; i < 4; ++i)
                REQUIRE(ex2.segs.maps[a].data[size_t(i)] * ex2.segs.maps[b].data[size_t(i)] ==
                        0.0);
}

TEST_CASE("modality dropout strips conditioning while geometry stays", "[trainer]") {
    const TrainConfig base = small_config();
    const ModelContext m = ModelContext::from(base);
    const TrainingSample sample = make_shapes_dataset(7, 4, 8, 8)[0];

    TrainConfig all = base;
    all.p_customization = 0.0;
    all.p_drop = 1.0;
    Rng rc(1), rd(2), rt(3), rn(4);
    const PreparedExample ex = make_training_example(sample, all, m, rc, rd, rt, rn);
    CHECK(ex.flags.text_dropped);
    CHECK(ex.flags.images_dropped);
    CHECK(ex.tok.tokens == std::vector<std::string>{kEotToken});
    CHECK(ex.object_feats.empty());
    CHECK(ex.n_objects == int(sample.layout.object_boxes.size()));

    TrainConfig guard = all;
    guard.drop_guard = true;
    Rng rc2(1), rd2(2), rt2(3), rn2(4);
    const PreparedExample ex2 = make_training_example(sample, guard, m, rc2, rd2, rt2, rn2);
    CHECK(ex2.flags.text_dropped);
    CHECK_FALSE(ex2.flags.images_dropped);
    CHECK(ex2.object_feats.size() == sample.layout.object_boxes.size());
}

TEST_CASE("branch frequencies match their configured probabilities", "[trainer][slow]") {
    const TrainConfig base = small_config();
    const ModelContext m = ModelContext::from(base);
    const TrainingSample sample = make_shapes_dataset(11, 4, 8, 8)[3];  // single object

    TrainConfig cfg = base;
    cfg.p_customization = 0.5;
    cfg.p_drop = 0.3;
    Rng rc(101), rd(102), rt(103), rn(104);
    const int n = 20000;
    int custom = 0, text = 0, images = 0;
    for (int i = 0; i < n; ++i) {
        const PreparedExample ex = make_training_example(sample, cfg, m, rc, rd, rt, rn);
        custom += ex.flags.customization;
        text += ex.flags.text_dropped;
        images += ex.flags.images_dropped;
    }
    CHECK(std::abs(custom / double(n) - 0.5) < 0.01);
    CHECK(std::abs(text / double(n) - 0.3) < 0.01);
    CHECK(std::abs(images / double(n) - 0.3) < 0.01);
}

TEST_CASE("one optimizer step equals hand-computed moments over separate graphs",
          "[trainer]") {
    TrainConfig cfg = small_config();
    cfg.p_customization = 0.5;
    cfg.p_drop = 0.3;
    const ModelContext m = ModelContext::from(cfg);
    const auto ds = make_shapes_dataset(13, 4, 8, 8);
    const std::vector<TrainingSample> batch = {ds[0], ds[1]};

    const TrainState s0 = TrainState::init(cfg, m);
    TrainState run = s0;
    TrainState replica = s0;
    const StepMetrics met = train_step(run, batch, cfg, m);
    CHECK(std::isfinite(met.loss.total));
    CHECK(run.step == 1);

    const auto grads = separate_grads(replica, batch, cfg, m);
    // Replicated streams drew the same branches.
    REQUIRE(replica.rng_custom == run.rng_custom);
    REQUIRE(replica.rng_noise == run.rng_noise);

    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - b1, bc2 = 1.0 - b2;
    for (const auto& name : s0.params.names) {
        const Tensor& p0 = s0.params.get(name);
        const Tensor& p1 = run.params.get(name);
        const Tensor& g = grads.at(name);
        for (int64_t i = 0; i < p0.numel(); ++i) {
            const double gi = g.data[size_t(i)];
            const double mm = (1.0 - b1) * gi;
            const double vv = (1.0 - b2) * gi * gi;
            const double expect =
                p0.data[size_t(i)] -
                cfg.learning_rate * (mm / bc1) / (std::sqrt(vv / bc2) + eps);
            REQUIRE(p1.data[size_t(i)] == Catch::Approx(expect).margin(1e-12));
        }
        // Moment buffers hold the decayed gradient statistics.
        for (int64_t i = 0; i < p0.numel(); ++i) {
            REQUIRE(run.adam_m.get(name).data[size_t(i)] ==
                    Catch::Approx((1.0 - b1) * g.data[size_t(i)]).margin(1e-15));
        }
    }
}

TEST_CASE("non-finite losses stop training with a diagnosable error", "[trainer]") {
    TrainConfig cfg = small_config();
    const ModelContext m = ModelContext::from(cfg);
    const auto ds = make_shapes_dataset(17, 4, 8, 8);
    TrainState state = TrainState::init(cfg, m);
    state.params.get("head.b").data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(train_step(state, {ds[0]}, cfg, m),
                      Catch::Matchers::ContainsSubstring("not finite"));
    CHECK_THROWS_AS(train_step(state, {}, cfg, m), std::invalid_argument);
}

TEST_CASE("training checkpoints round-trip parameters, moments, step and rng",
          "[trainer]") {
    TrainConfig cfg = small_config();
    const ModelContext m = ModelContext::from(cfg);
    const auto ds = make_shapes_dataset(19, 4, 8, 8);
    TrainState state = TrainState::init(cfg, m);
    train_step(state, {ds[0], ds[1]}, cfg, m);

    const fs::path dir = fs::temp_directory_path() / "mcomp_trainer_ckpt";
    fs::create_directories(dir);
    const std::string path = (dir / "state.bin").string();
    save_train_checkpoint(path, state, cfg);
    TrainConfig cfg_back;
    const TrainState back = load_train_checkpoint(path, &cfg_back);
    CHECK(back.step == state.step);
    CHECK(back.rng_custom == state.rng_custom);
    CHECK(back.rng_drop == state.rng_drop);
    CHECK(back.rng_time == state.rng_time);
    CHECK(back.rng_noise == state.rng_noise);
    CHECK(back.rng_data == state.rng_data);
    REQUIRE(back.params.names.size() == state.params.names.size());
    for (const auto& name : state.params.names) {
        REQUIRE(back.params.get(name).data == state.params.get(name).data);
        REQUIRE(back.adam_m.get(name).data == state.adam_m.get(name).data);
        REQUIRE(back.adam_v.get(name).data == state.adam_v.get(name).data);
    }
    CHECK(cfg_back.image_size == cfg.image_size);
    CHECK(cfg_back.backbone.latent_size == cfg.image_size / 2);
    CHECK(cfg_back.loss.alpha == cfg.loss.alpha);

    // A container of the wrong kind is rejected.
    ckpt::Container other;
    other.meta["kind"] = "something_else";
    const std::string bad = (dir / "bad.bin").string();
    ckpt::save(bad, other);
    CHECK_THROWS_AS(load_train_checkpoint(bad), std::runtime_error);
    fs::remove_all(dir);
}

TEST_CASE("interrupted training resumes to bit-identical parameters", "[trainer][slow]") {
    TrainConfig cfg = small_config();  // 4 steps, checkpoint at step 2
    const auto ds = make_shapes_dataset(23, 4, 8, 8);
    const fs::path root = fs::temp_directory_path() / "mcomp_trainer_resume";
    fs::remove_all(root);
    const std::string full_dir = (root / "full").string();
    const std::string part_dir = (root / "resumed").string();

    const TrainState full = train_loop(cfg, ds, full_dir);
    REQUIRE(full.step == cfg.total_steps);
    REQUIRE(fs::exists(fs::path(full_dir) / "ckpt_2.bin"));
    REQUIRE(fs::exists(fs::path(full_dir) / "ckpt_final.bin"));

    const TrainState resumed =
        train_loop(cfg, ds, part_dir, (fs::path(full_dir) / "ckpt_2.bin").string());
    REQUIRE(resumed.step == cfg.total_steps);
    for (const auto& name : full.params.names) {
        REQUIRE(resumed.params.get(name).data == full.params.get(name).data);
        REQUIRE(resumed.adam_v.get(name).data == full.adam_v.get(name).data);
    }
    REQUIRE(resumed.rng_noise == full.rng_noise);

    // The metric log has one parseable row per step.
    std::ifstream metrics(full_dir + "/metrics.jsonl");
    std::string line;
    std::vector<int64_t> steps;
    while (std::getline(metrics, line)) {
        const auto row = nlohmann::json::parse(line);
        steps.push_back(row.at("step").get<int64_t>());
        CHECK(row.contains("l_d"));
        CHECK(row.contains("l_c"));
        CHECK(row.contains("l_s"));
        CHECK(row.contains("total"));
        CHECK(row.at("flags").contains("customization"));
    }
    CHECK(steps == std::vector<int64_t>{1, 2, 3, 4});
    fs::remove_all(root);
}

TEST_CASE("train config json round-trips and rejects bad values", "[trainer]") {
    TrainConfig cfg = small_config();
    const TrainConfig back = train_config_from_json(train_config_to_json(cfg));
    CHECK(back.learning_rate == cfg.learning_rate);
    CHECK(back.batch_size == cfg.batch_size);
    CHECK(back.p_drop == cfg.p_drop);
    CHECK(back.p_customization == cfg.p_customization);
    CHECK(back.loss.alpha == cfg.loss.alpha);
    CHECK(back.loss.canonical_h == cfg.loss.canonical_h);
    CHECK(back.k_tokens == cfg.k_tokens);
    CHECK(back.backbone.base_channels == cfg.backbone.base_channels);
    CHECK(back.backbone.latent_size == cfg.image_size / 2);

    TrainConfig bad = cfg;
    bad.p_drop = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.total_steps = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    TrainingSample s;
    s.layout.object_boxes.push_back({0.1, 0.1, 0.5, 0.5});
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("manifest records load into training samples by the background rule",
          "[trainer]") {
    const fs::path dir = fs::temp_directory_path() / "mcomp_trainer_load";
    fs::remove_all(dir);
    fs::create_directories(dir);

    Image gt(8, 8, 3);
    Rng rng(0x6c6f6164);
    for (auto& v : gt.data) v = rng.uniform01();
    save_image((dir / "gt.png").string(), gt);
    Image obj(8, 8, 3);
    for (auto& v : obj.data) v = 0.25;
    save_image((dir / "obj0.png").string(), obj);
    Image seg(8, 8, 1);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 4; ++x) seg.at(x, y, 0) = 1.0;
    save_image((dir / "seg0.png").string(), seg);
    Image bg(16, 16, 3);  // deliberately larger: must be resized on load
    for (auto& v : bg.data) v = 0.75;
    save_image((dir / "bg.png").string(), bg);

    DatasetRecord rec;
    rec.source = "topdown";
    rec.ground_truth_path = "gt.png";
    rec.background_rule = kBackgroundRuleGtOutside;
    rec.caption.text = "a thing";
    rec.objects.push_back({"obj0.png", Box{0.1, 0.2, 0.5, 0.8}, "seg0.png"});

    const TrainingSample s = load_training_sample(rec, dir.string(), 8);
    CHECK(s.background.data == s.ground_truth.data);
    REQUIRE(s.layout.object_boxes.size() == 1);
    CHECK(s.layout.object_boxes[0] == Box{0.1, 0.2, 0.5, 0.8});
    CHECK(s.layout.global_box == derive_global_box({Box{0.1, 0.2, 0.5, 0.8}}));
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            CHECK(s.segmentations[0].at(y, x) == (x < 4 ? 1.0 : 0.0));
    CHECK(s.caption.text == "a thing");
    s.validate();

    DatasetRecord with_bg = rec;
    with_bg.background_path = "bg.png";
    const TrainingSample s2 = load_training_sample(with_bg, dir.string(), 8);
    CHECK(s2.background.shape == std::vector<int>({3, 8, 8}));
    CHECK(s2.background.at(0, 0, 0) == Catch::Approx(0.75).margin(1e-2));

    DatasetRecord unknown = rec;
    unknown.background_rule = "no_such_rule";
    CHECK_THROWS_WITH(load_training_sample(unknown, dir.string(), 8),
                      Catch::Matchers::ContainsSubstring("background rule"));
    fs::remove_all(dir);
}
