#ifndef MCOMP_CLI_HPP
#define MCOMP_CLI_HPP

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mcomp/datagen.hpp"
#include "mcomp/eval.hpp"
#include "mcomp/layout.hpp"
#include "mcomp/sampler.hpp"
#include "mcomp/shapes.hpp"
#include "mcomp/trainer.hpp"

namespace mcomp::cli {

namespace detail {

namespace fs = std::filesystem;

// Relative output paths are resolved under MCOMP_OUT_ROOT when it is set.
inline std::string resolve_out(const std::string& p) {
    if (p.empty() || fs::path(p).is_absolute()) return p;
    if (const char* root = std::getenv("MCOMP_OUT_ROOT"); root && *root)
        return (fs::path(root) / p).string();
    return p;
}

inline nlohmann::json read_json_file(const std::string& path, const std::string& what) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(what + ": cannot open " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw std::runtime_error(what + ": " + path + ": " + e.what());
    }
}

// Every command logs the resolved configuration it actually ran with, both
// to stdout and to <dir>/<command>.config.json.
inline void log_config(const std::string& dir, const std::string& command, nlohmann::json cfg) {
    cfg["command"] = command;
    fs::create_directories(dir.empty() ? "." : dir);
    const std::string path =
        (fs::path(dir.empty() ? "." : dir) / (command + ".config.json")).string();
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << cfg.dump(2) << "\n";
    std::cout << "resolved config: " << cfg.dump() << "\n";
}

inline int fail(const std::string& command, const std::exception& e) {
    const nlohmann::json err = {{"command", command}, {"error", e.what()}};
    std::cerr << err.dump() << std::endl;
    return 1;
}

inline Image load_image_square(const std::string& path, int side) {
    Image img = load_image(path);
    if (img.width != side || img.height != side) img = resize_letterbox(img, side, side);
    return img;
}

/*------------------------------ datagen core ------------------------------*/

struct DatagenOptions {
    uint64_t seed = 0;
    int count = 4;  // records attempted per source
    std::string source = "mixed";
    int size = 32;
    std::string out_dir;
};

inline nlohmann::json run_datagen(const DatagenOptions& o) {
    fs::create_directories(o.out_dir);
    std::vector<std::string> sources;
    if (o.source == "mixed")
        sources = {"topdown", "bottomup", "video"};
    else if (o.source == "topdown" || o.source == "bottomup" || o.source == "video" ||
             o.source == "collected")
        sources = {o.source};
    else
        throw std::invalid_argument("datagen: unknown source \"" + o.source + "\"");

    BuilderConfig bcfg;
    bcfg.out_dir = o.out_dir;
    Rng master(o.seed);
    std::vector<DatasetRecord> records;
    nlohmann::json skipped = nlohmann::json::array();
    std::map<std::string, int> written;

    auto audit_json = [](const std::vector<AuditEntry>& audit) {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& e : audit) {
            nlohmann::json row = {{"filter", e.filter}, {"pass", e.pass}};
            if (!e.reason.empty()) row["reason"] = e.reason;
            a.push_back(row);
        }
        return a;
    };

    for (const auto& src : sources) {
        for (int i = 0; i < o.count; ++i) {
            const std::string id = src.substr(0, 2) + "_" + std::to_string(i);
            Rng scene_rng = master.split(src + "_scene_" + std::to_string(i));
            Rng pick_rng = master.split(src + "_pick_" + std::to_string(i));
            BuildOutcome out;
            std::string category;
            if (src == "topdown" || src == "collected") {
                ShapeScene sc = make_shape_scene(scene_rng, o.size, 2);
                category = sc.category;
                std::vector<std::pair<std::string, Box>> ents;
                for (const auto& sh : sc.shapes) ents.emplace_back(sh.name(), sh.box);
                ModelPorts ports;
                ports.segmenter = make_mock_segmenter(ents, o.size);
                ports.vlm_outliner = make_mock_outliner(ents);
                out = build_topdown_record(sc.composed, ports, bcfg, pick_rng, id, src);
            } else if (src == "bottomup") {
                ShapeScene sc = make_shape_scene(scene_rng, o.size, 2);
                category = sc.category;
                std::vector<std::pair<std::string, Box>> ents, phrase_boxes;
                for (const auto& sh : sc.shapes) ents.emplace_back(sh.name(), sh.box);
                for (const auto& sp : sc.caption.spans)
                    phrase_boxes.emplace_back(
                        sc.caption.text.substr(size_t(sp.char_start),
                                               size_t(sp.char_end - sp.char_start)),
                        sc.shapes[size_t(sp.object_index)].box);
                ModelPorts ports;
                ports.grounder = make_mock_grounder(phrase_boxes);
                ports.segmenter = make_mock_segmenter(ents, o.size);
                out = build_bottomup_record(sc.composed, sc.caption, ports, bcfg, pick_rng, id);
            } else {  // video
                VideoClip clip = scene_to_clip(scene_rng, o.size, 4);
                category = (i % 2 == 0) ? kCategoryAction : kCategoryPositional;
                ModelPorts ports;
                ports.captioner = make_mock_captioner();
                ports.view_scorer = make_mock_view_scorer();
                out = build_video_record(clip, ports, bcfg, pick_rng, id);
            }
            if (out.record) {
                out.record->extra["category"] = category;
                records.push_back(std::move(*out.record));
                ++written[src];
            } else {
                skipped.push_back(
                    {{"id", id}, {"source", src}, {"audit", audit_json(out.audit)}});
            }
        }
    }

    const std::string manifest_path = (fs::path(o.out_dir) / "manifest.jsonl").string();
    write_manifest(records, manifest_path);
    {
        std::ofstream sk((fs::path(o.out_dir) / "skipped.jsonl").string(), std::ios::trunc);
        for (const auto& row : skipped) sk << row.dump() << "\n";
    }
    const auto violations = validate_manifest(records, bcfg.rules);
    if (!violations.empty())
        throw std::runtime_error("datagen: emitted manifest fails validation: " + violations[0]);

    nlohmann::json per_source;
    for (const auto& [k, v] : written) per_source[k] = v;
    return {{"manifest", "manifest.jsonl"},
            {"records", int(records.size())},
            {"skipped", int(skipped.size())},
            {"per_source", per_source}};
}

/*------------------------------- train core -------------------------------*/

struct TrainOptions {
    std::string manifest, out_dir, resume;
    TrainConfig cfg;
};

inline nlohmann::json run_train(const TrainOptions& o) {
    const auto records = read_manifest(o.manifest);
    if (records.empty()) throw std::runtime_error("train: manifest has no records");
    std::string mdir = fs::path(o.manifest).parent_path().string();
    if (mdir.empty()) mdir = ".";
    std::vector<TrainingSample> samples;
    for (const auto& r : records)
        samples.push_back(load_training_sample(r, mdir, o.cfg.image_size));
    const TrainState st = train_loop(o.cfg, samples, o.out_dir, o.resume);
    return {{"final_step", st.step},
            {"samples", int(samples.size())},
            {"checkpoint", "ckpt_final.bin"}};
}

/*------------------------------- sample core ------------------------------*/

struct SampleOptions {
    std::string checkpoint, background, layout, caption_file, out_dir;
    std::vector<std::string> objects;
    int steps = 50;
    double guidance = 1.0;
    uint64_t seed = 0;
};

inline nlohmann::json run_sample(const SampleOptions& o) {
    TrainConfig cfg;
    TrainState st = load_train_checkpoint(o.checkpoint, &cfg);
    SamplerModel model{ModelContext::from(cfg), std::move(st.params)};
    const int S = cfg.image_size;

    SampleRequest req;
    req.layout = layout_from_json(read_json_file(o.layout, "sample: layout"));
    req.caption = caption_from_json(read_json_file(o.caption_file, "sample: caption"));
    for (const auto& p : o.objects) req.object_images.push_back(load_image_square(p, S));
    if (req.layout.customization_flag) {
        req.background = Tensor({3, S, S});
    } else {
        if (o.background.empty())
            throw std::invalid_argument("sample: --background required unless the layout sets "
                                        "the customization flag");
        req.background = image_to_chw(load_image_square(o.background, S));
    }
    req.steps = o.steps;
    req.guidance = o.guidance;
    req.seed = o.seed;

    const SampleResult res = sample(req, model);
    fs::create_directories(o.out_dir);
    const std::string out_png = (fs::path(o.out_dir) / "generated.png").string();
    save_image(out_png, chw_to_image(res.image));
    for (const auto& w : res.plan.warnings) std::cout << "warning: " << w << "\n";
    return {{"output", "generated.png"}, {"warnings", res.plan.warnings}};
}

/*-------------------------------- eval core -------------------------------*/

struct EvalOptions {
    std::string manifest, generated_dir, report_path, checkpoint;
    bool sequential = false;
    int sample_steps = 8;
    uint64_t seed = 0;
    int limit = -1;  // evaluate only the first N records when >= 0
    int image_size = 32;
};

inline nlohmann::json run_eval(const EvalOptions& o) {
    auto records = read_manifest(o.manifest);
    if (o.limit >= 0 && int(records.size()) > o.limit) records.resize(size_t(o.limit));
    std::string mdir = fs::path(o.manifest).parent_path().string();
    if (mdir.empty()) mdir = ".";
    const EvalEncoders enc = make_mock_eval_encoders();

    std::vector<EvalItem> items(records.size());
    std::vector<ItemMetrics> rows;
    std::vector<bool> loaded(records.size(), false);
    for (size_t i = 0; i < records.size(); ++i) {
        try {
            TrainingSample s = load_training_sample(records[i], mdir, o.image_size);
            EvalItem it;
            it.background = chw_to_image(s.background);
            it.objects = s.object_images;
            it.layout = s.layout;
            it.caption = s.caption;
            it.category = records[i].extra.value("category", "");
            it.generated = load_image(
                (fs::path(o.generated_dir) / fs::path(records[i].ground_truth_path).filename())
                    .string());
            items[i] = std::move(it);
            loaded[i] = true;
            rows.push_back(score_item(items[i], int(i), enc));
        } catch (const std::exception& e) {
            ItemMetrics m;
            m.index = int(i);
            m.excluded = true;
            m.exclusion_reason = e.what();
            rows.push_back(m);
        }
    }
    const MetricReport report = reduce_report(std::move(rows));
    nlohmann::json rj = report_to_json(report);

    if (o.sequential) {
        if (o.checkpoint.empty())
            throw std::invalid_argument("eval: --sequential requires --checkpoint");
        TrainConfig cfg;
        TrainState st = load_train_checkpoint(o.checkpoint, &cfg);
        SamplerModel model{ModelContext::from(cfg), std::move(st.params)};
        const int S = cfg.image_size;
        auto runner = [&](const EvalItem& item, const std::vector<int>& order) -> Image {
            Image bg = item.background;
            if (bg.width != S || bg.height != S) bg = resize_letterbox(bg, S, S);
            Tensor canvas = image_to_chw(bg);
            for (int idx : order) {
                std::string phrase;
                for (const auto& sp : item.caption.spans)
                    if (sp.object_index == idx)
                        phrase = item.caption.text.substr(size_t(sp.char_start),
                                                          size_t(sp.char_end - sp.char_start));
                if (phrase.empty())
                    throw std::runtime_error("no caption span for object " + std::to_string(idx));
                SampleRequest req;
                req.layout.object_boxes = {item.layout.object_boxes[size_t(idx)]};
                req.layout.global_box = derive_global_box(req.layout.object_boxes);
                req.caption.text = phrase;
                req.caption.spans = {{0, 0, int(phrase.size())}};
                req.object_images = {resize_letterbox(item.objects[size_t(idx)], S, S)};
                req.background = canvas;
                req.steps = o.sample_steps;
                req.seed = o.seed;
                canvas = sample(req, model).image;
            }
            return chw_to_image(canvas);
        };
        nlohmann::json seq = nlohmann::json::array();
        for (size_t i = 0; i < items.size(); ++i) {
            if (!loaded[i]) continue;
            const SequentialResult sr = sequential_average(runner, items[i], enc);
            nlohmann::json e = {{"index", int(i)}, {"runs", sr.runs}};
            if (sr.excluded) {
                e["excluded"] = true;
                e["reason"] = sr.exclusion_reason;
            } else {
                e["mean"] = sr.mean_values;
            }
            seq.push_back(e);
        }
        rj["sequential"] = seq;
    }

    if (const fs::path parent = fs::path(o.report_path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    std::ofstream rf(o.report_path, std::ios::trunc);
    if (!rf) throw std::runtime_error("eval: cannot write " + o.report_path);
    rf << rj.dump(2) << "\n";
    return {{"report", o.report_path},
            {"included", rj["included"]},
            {"excluded", rj["excluded"]}};
}

/*-------------------------------- demo core -------------------------------*/

struct DemoOptions {
    uint64_t seed = 0;
    std::string out_dir;
    int train_steps = 50;
    int count = 3;  // records per source
    int sample_steps = 6;
    int eval_items = 3;
    int size = 32;
    int base_channels = 16;
};

// End-to-end bundled pipeline: synthetic corpus -> short training run ->
// sampling -> metric report. Everything below out_dir is deterministic in
// the seed (paths inside artifacts are relative).
inline nlohmann::json run_demo(const DemoOptions& o) {
    fs::create_directories(o.out_dir);

    DatagenOptions dg;
    dg.seed = o.seed;
    dg.count = o.count;
    dg.source = "mixed";
    dg.size = o.size;
    dg.out_dir = (fs::path(o.out_dir) / "data").string();
    const nlohmann::json dg_summary = run_datagen(dg);

    TrainOptions tr;
    tr.manifest = (fs::path(dg.out_dir) / "manifest.jsonl").string();
    tr.out_dir = (fs::path(o.out_dir) / "train").string();
    tr.cfg.total_steps = o.train_steps;
    tr.cfg.batch_size = 2;
    tr.cfg.checkpoint_every = o.train_steps;  // only the final checkpoint
    tr.cfg.seed = o.seed;
    tr.cfg.image_size = o.size;
    tr.cfg.backbone.base_channels = o.base_channels;
    const nlohmann::json tr_summary = run_train(tr);

    TrainConfig cfg;
    TrainState st = load_train_checkpoint(tr.out_dir + "/ckpt_final.bin", &cfg);
    SamplerModel model{ModelContext::from(cfg), std::move(st.params)};
    auto records = read_manifest(tr.manifest);
    const int limit = std::min<int>(o.eval_items, int(records.size()));
    const std::string gen_dir = (fs::path(o.out_dir) / "generated").string();
    fs::create_directories(gen_dir);
    for (int i = 0; i < limit; ++i) {
        TrainingSample s = load_training_sample(records[size_t(i)], dg.out_dir, cfg.image_size);
        SampleRequest req;
        req.background = s.background;
        req.layout = s.layout;
        req.caption = s.caption;
        req.object_images = s.object_images;
        req.steps = o.sample_steps;
        req.seed = o.seed * 1000003ULL + uint64_t(i);
        const SampleResult res = sample(req, model);
        save_image((fs::path(gen_dir) /
                    fs::path(records[size_t(i)].ground_truth_path).filename())
                       .string(),
                   chw_to_image(res.image));
    }

    EvalOptions ev;
    ev.manifest = tr.manifest;
    ev.generated_dir = gen_dir;
    ev.report_path = (fs::path(o.out_dir) / "report.json").string();
    ev.seed = o.seed;
    ev.limit = limit;
    ev.image_size = cfg.image_size;
    const nlohmann::json ev_summary = run_eval(ev);

    return {{"data", dg_summary},
            {"train", tr_summary},
            {"sampled", limit},
            {"eval", ev_summary}};
}

}  // namespace detail

/*------------------------------- entry point ------------------------------*/

inline int run(const std::vector<std::string>& args_in) {
    CLI::App app{"layout-grounded multi-object compositing pipeline"};
    app.require_subcommand(1);
    int exit_code = 0;

    // encode-layout
    struct {
        std::string layout, out;
        int size = 32;
    } enc;
    auto* sc_enc = app.add_subcommand("encode-layout",
                                      "rasterize a layout JSON file to a value-coded mask PNG");
    sc_enc->add_option("--layout", enc.layout, "layout JSON file")->required();
    sc_enc->add_option("--size", enc.size, "output resolution (pixels per side)");
    sc_enc->add_option("--out", enc.out, "output PNG path")->required();
    sc_enc->callback([&] {
        const std::string cmd = "encode-layout";
        try {
            const std::string out = detail::resolve_out(enc.out);
            const LayoutSpec layout =
                layout_from_json(detail::read_json_file(enc.layout, "encode-layout: layout"));
            if (auto vr = validate_layout(layout); !vr.ok)
                throw std::invalid_argument("encode-layout: invalid layout: " + vr.error);
            const LayoutMask lm = encode_layout(layout, enc.size, enc.size);
            const auto parent = std::filesystem::path(out).parent_path();
            if (!parent.empty()) std::filesystem::create_directories(parent);
            save_image(out, layout_mask_to_image(lm));
            detail::log_config(parent.string(), cmd,
                               {{"layout", enc.layout}, {"size", enc.size}, {"out", enc.out}});
            std::cout << "wrote " << out << "\n";
        } catch (const std::exception& e) {
            exit_code = detail::fail(cmd, e);
        }
    });

    // datagen
    detail::DatagenOptions dg;
    auto* sc_dg = app.add_subcommand("datagen",
                                     "build a paired-data manifest from the bundled synthetic "
                                     "corpus via the mock model ports");
    sc_dg->add_option("--out", dg.out_dir, "output directory")->required();
    sc_dg->add_option("--seed", dg.seed, "generation seed");
    sc_dg->add_option("--count", dg.count, "records attempted per source");
    sc_dg->add_option("--source", dg.source, "topdown|bottomup|video|collected|mixed");
    sc_dg->add_option("--size", dg.size, "scene resolution");
    sc_dg->callback([&] {
        const std::string cmd = "datagen";
        try {
            dg.out_dir = detail::resolve_out(dg.out_dir);
            const nlohmann::json summary = detail::run_datagen(dg);
            detail::log_config(dg.out_dir, cmd,
                               {{"out", dg.out_dir},
                                {"seed", dg.seed},
                                {"count", dg.count},
                                {"source", dg.source},
                                {"size", dg.size}});
            std::cout << summary.dump() << "\n";
        } catch (const std::exception& e) {
            exit_code = detail::fail(cmd, e);
        }
    });

    // train
    detail::TrainOptions tr;
    auto* sc_tr = app.add_subcommand("train", "train the compositing model on a manifest");
    sc_tr->add_option("--manifest", tr.manifest, "dataset manifest (JSONL)")->required();
    sc_tr->add_option("--out", tr.out_dir, "output directory")->required();
    sc_tr->add_option("--resume", tr.resume, "checkpoint to resume from");
    sc_tr->add_option("--steps", tr.cfg.total_steps, "optimizer steps");
    sc_tr->add_option("--batch", tr.cfg.batch_size, "batch size");
    sc_tr->add_option("--accum", tr.cfg.accumulation_steps, "gradient accumulation steps");
    sc_tr->add_option("--lr", tr.cfg.learning_rate, "learning rate");
    sc_tr->add_option("--alpha", tr.cfg.loss.alpha, "identity loss weight");
    sc_tr->add_option("--beta", tr.cfg.loss.beta, "disentanglement loss weight");
    sc_tr->add_option("--p-drop", tr.cfg.p_drop, "per-modality dropout probability");
    sc_tr->add_option("--p-custom", tr.cfg.p_customization, "customization switch probability");
    sc_tr->add_flag("--drop-guard", tr.cfg.drop_guard,
                    "never drop both modalities of one sample");
    sc_tr->add_option("--seed", tr.cfg.seed, "training seed");
    sc_tr->add_option("--ckpt-every", tr.cfg.checkpoint_every, "checkpoint interval");
    sc_tr->add_option("--image-size", tr.cfg.image_size, "training resolution");
    sc_tr->add_option("--base-channels", tr.cfg.backbone.base_channels, "backbone width");
    sc_tr->add_option("--k-tokens", tr.cfg.k_tokens, "image tokens per object");
    sc_tr->callback([&] {
        const std::string cmd = "train";
        try {
            tr.out_dir = detail::resolve_out(tr.out_dir);
            nlohmann::json cfg_json = train_config_to_json(tr.cfg);
            cfg_json["manifest"] = tr.manifest;
            cfg_json["out"] = tr.out_dir;
            if (!tr.resume.empty()) cfg_json["resume"] = tr.resume;
            detail::log_config(tr.out_dir, cmd, cfg_json);
            const nlohmann::json summary = detail::run_train(tr);
            std::cout << summary.dump() << "\n";
        } catch (const std::exception& e) {
            exit_code = detail::fail(cmd, e);
        }
    });

    // sample
    detail::SampleOptions sp;
    auto* sc_sp = app.add_subcommand("sample", "composite objects into a background");
    sc_sp->add_option("--checkpoint", sp.checkpoint, "training checkpoint")->required();
    sc_sp->add_option("--background", sp.background, "background PNG");
    sc_sp->add_option("--layout", sp.layout, "layout JSON file")->required();
    sc_sp->add_option("--caption-file", sp.caption_file, "grounded caption JSON file")
        ->required();
    sc_sp->add_option("--object", sp.objects, "object image PNG (repeat per object)");
    sc_sp->add_option("--steps", sp.steps, "denoising steps");
    sc_sp->add_option("--guidance", sp.guidance, "guidance scale (1 = off)");
    sc_sp->add_option("--seed", sp.seed, "sampling seed");
    sc_sp->add_option("--out", sp.out_dir, "output directory")->required();
    sc_sp->callback([&] {
        const std::string cmd = "sample";
        try {
            sp.out_dir = detail::resolve_out(sp.out_dir);
            const nlohmann::json summary = detail::run_sample(sp);
            detail::log_config(sp.out_dir, cmd,
                               {{"checkpoint", sp.checkpoint},
                                {"background", sp.background},
                                {"layout", sp.layout},
                                {"caption_file", sp.caption_file},
                                {"objects", sp.objects},
                                {"steps", sp.steps},
                                {"guidance", sp.guidance},
                                {"seed", sp.seed},
                                {"out", sp.out_dir}});
            std::cout << summary.dump() << "\n";
        } catch (const std::exception& e) {
            exit_code = detail::fail(cmd, e);
        }
    });

    // eval
    detail::EvalOptions ev;
    auto* sc_ev = app.add_subcommand("eval", "score generated images against a manifest");
    sc_ev->add_option("--manifest", ev.manifest, "dataset manifest (JSONL)")->required();
    sc_ev->add_option("--generated", ev.generated_dir, "directory of generated images")
        ->required();
    sc_ev->add_option("--report", ev.report_path, "output report JSON path")->required();
    sc_ev->add_flag("--sequential", ev.sequential,
                    "also score one-object-at-a-time compositing over all orders");
    sc_ev->add_option("--checkpoint", ev.checkpoint, "checkpoint for --sequential");
    sc_ev->add_option("--sample-steps", ev.sample_steps, "denoising steps for --sequential");
    sc_ev->add_option("--seed", ev.seed, "sampling seed for --sequential");
    sc_ev->add_option("--limit", ev.limit, "evaluate only the first N records");
    sc_ev->callback([&] {
        const std::string cmd = "eval";
        try {
            ev.report_path = detail::resolve_out(ev.report_path);
            const nlohmann::json summary = detail::run_eval(ev);
            const auto parent = std::filesystem::path(ev.report_path).parent_path().string();
            detail::log_config(parent, cmd,
                               {{"manifest", ev.manifest},
                                {"generated", ev.generated_dir},
                                {"report", ev.report_path},
                                {"sequential", ev.sequential},
                                {"checkpoint", ev.checkpoint},
                                {"sample_steps", ev.sample_steps},
                                {"seed", ev.seed},
                                {"limit", ev.limit}});
            std::cout << summary.dump() << "\n";
        } catch (const std::exception& e) {
            exit_code = detail::fail(cmd, e);
        }
    });

    // demo
    detail::DemoOptions dm;
    auto* sc_dm = app.add_subcommand("demo",
                                     "end-to-end pipeline on the bundled synthetic corpus: "
                                     "datagen, short training run, sampling, report");
    sc_dm->add_option("--out", dm.out_dir, "output directory")->required();
    sc_dm->add_option("--seed", dm.seed, "pipeline seed");
    sc_dm->add_option("--train-steps", dm.train_steps, "training steps");
    sc_dm->add_option("--count", dm.count, "records per source");
    sc_dm->add_option("--sample-steps", dm.sample_steps, "denoising steps when sampling");
    sc_dm->add_option("--eval-items", dm.eval_items, "records to sample and score");
    sc_dm->add_option("--size", dm.size, "image resolution");
    sc_dm->add_option("--base-channels", dm.base_channels, "backbone width");
    sc_dm->callback([&] {
        const std::string cmd = "demo";
        try {
            dm.out_dir = detail::resolve_out(dm.out_dir);
            // No paths in the logged config: the directory layout is fixed
            // relative to --out, so reruns into different roots match bytes.
            detail::log_config(dm.out_dir, cmd,
                               {{"seed", dm.seed},
                                {"train_steps", dm.train_steps},
                                {"count", dm.count},
                                {"sample_steps", dm.sample_steps},
                                {"eval_items", dm.eval_items},
                                {"size", dm.size},
                                {"base_channels", dm.base_channels}});
            const nlohmann::json summary = detail::run_demo(dm);
            std::cout << summary.dump() << "\n";
        } catch (const std::exception& e) {
            exit_code = detail::fail(cmd, e);
        }
    });

    std::vector<const char*> argv;
    argv.push_back("mcomp");
    for (const auto& a : args_in) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            std::cout << app.help();
            return 0;
        }
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 2;
    }
    return exit_code;
}

inline int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace mcomp::cli

#endif
