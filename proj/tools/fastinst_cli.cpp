#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fastinst/config/run_config.hpp"
#include "fastinst/data/dataset_io.hpp"
#include "fastinst/testing/suites.hpp"
#include "fastinst/train/bench.hpp"
#include "fastinst/train/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fastinst;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfigError = 2, kMissingCheckpoint = 3 };

struct MissingCheckpoint : std::runtime_error {
    using std::runtime_error::runtime_error;
};

const char* const kModelSections[] = {"data.num_classes", "model.", "pixel.", "query.", "decoder."};

bool is_model_key(const std::string& key) {
    for (const char* prefix : kModelSections)
        if (key.rfind(prefix, 0) == 0) return true;
    return false;
}

/// Layers defaults, the checkpoint's architecture keys, the config file and flags, in that order.
struct Invocation {
    std::string config_file;
    std::map<std::string, std::string> flags;  // only flags given on the command line
    std::optional<std::uint64_t> seed;

    RunConfig resolve(bool use_checkpoint_architecture) const {
        RunConfig cfg;
        auto apply_user = [&](RunConfig& c) {
            if (!config_file.empty()) c.merge_file(config_file);
            if (seed) {
                for (const char* k : {"data.seed", "model.seed", "train.seed"}) c.set(k, *seed);
            }
            for (const auto& [k, v] : flags) c.set_text(k, v);
        };
        apply_user(cfg);
        if (!use_checkpoint_architecture) return cfg;
        const auto path = cfg.text("io.checkpoint");
        if (path.empty()) throw MissingCheckpoint("io.checkpoint is not set");
        if (!fs::exists(path)) throw MissingCheckpoint("checkpoint " + path + " does not exist");
        RunConfig from_ckpt;
        const RunConfig stored = flatten_known(load_checkpoint(path).config());
        for (const auto& [key, value] : stored.flat().items())
            if (is_model_key(key)) from_ckpt.set(key, value);
        apply_user(from_ckpt);
        return from_ckpt;
    }

    static RunConfig flatten_known(const json& nested) {
        RunConfig c;
        std::function<void(const json&, const std::string&)> walk = [&](const json& j, const std::string& prefix) {
            for (const auto& [name, value] : j.items()) {
                const std::string key = prefix.empty() ? name : prefix + "." + name;
                if (value.is_object()) walk(value, key);
                else if (find_config_key(key)) c.set(key, value);
            }
        };
        if (nested.is_object()) walk(nested, "");
        return c;
    }
};

std::vector<SceneSample> load_or_generate(const RunConfig& cfg) {
    const fs::path dir = cfg.text("data.dir");
    if (fs::exists(dir / "manifest.json")) return read_dataset(dir).samples;
    return generate_dataset(cfg.dataset_spec());
}

std::vector<SceneSample> select_images(const std::vector<SceneSample>& all, const RunConfig& cfg) {
    const std::size_t first = cfg.count("io.image"), n = cfg.count("io.count");
    if (first >= all.size()) throw ConfigError("io.image", "index " + std::to_string(first) + " is past the " + std::to_string(all.size()) + " images");
    return {all.begin() + static_cast<std::ptrdiff_t>(first), all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), first + n))};
}

void load_weights(FastInstModel<float>& model, const RunConfig& cfg) {
    restore_checkpoint(load_checkpoint(cfg.text("io.checkpoint")), model.params());
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << j.dump(1) << '\n';
}

json detection_to_json(const Detection& d) {
    return {{"class_id", d.class_id}, {"score", d.score}, {"class_prob", d.class_prob}, {"mask_score", d.mask_score},
            {"query_index", d.query_index}, {"rle", rle_to_json(d.mask)}};
}

Detection detection_from_json(const json& j) {
    Detection d;
    d.class_id = j.at("class_id").get<int>();
    d.score = j.at("score").get<double>();
    d.class_prob = j.value("class_prob", d.score);
    d.mask_score = j.value("mask_score", 1.0);
    d.query_index = j.value("query_index", std::size_t{0});
    d.mask = rle_from_json(j.at("rle"));
    return d;
}

void print_eval(const EvalResult& r) {
    std::printf("%-8s %-8s %-8s %-8s %-8s %-8s %-8s\n", "AP", "AP50", "AP75", "APs", "APm", "APl", "AR@100");
    std::printf("%-8.3f %-8.3f %-8.3f %-8.3f %-8.3f %-8.3f %-8.3f\n", r.ap, r.ap50, r.ap75, r.ap_s, r.ap_m, r.ap_l, r.ar100);
}

constexpr std::array<std::array<float, 3>, 5> kPalette{{{0.95f, 0.2f, 0.2f}, {0.2f, 0.85f, 0.2f}, {0.25f, 0.4f, 1.0f}, {1.0f, 0.85f, 0.1f}, {0.9f, 0.3f, 0.9f}}};

const std::array<float, 3>& class_color(int class_id) { return kPalette[static_cast<std::size_t>(class_id - 1) % kPalette.size()]; }

Tensor<float> overlay(const Tensor<float>& image, const std::vector<Detection>& dets, double min_score) {
    const std::size_t H = image.dim(1), W = image.dim(2);
    auto px = image.to_vector();
    for (auto it = dets.rbegin(); it != dets.rend(); ++it) {
        if (it->score < min_score) continue;
        const auto& c = class_color(it->class_id);
        for (std::size_t p = 0; p < H * W; ++p)
            if (it->mask.bits[p])
                for (std::size_t ch = 0; ch < 3; ++ch) px[ch * H * W + p] = 0.45f * px[ch * H * W + p] + 0.55f * c[ch];
    }
    return Tensor<float>::from(image.shape(), std::move(px));
}

int cmd_gen_data(const RunConfig& cfg) {
    const auto spec = cfg.dataset_spec();
    const fs::path dir = cfg.text("data.dir");
    const auto samples = generate_dataset(spec);
    write_dataset(dir, spec, samples, {{"config", cfg.nested()}});
    std::size_t instances = 0;
    for (const auto& s : samples) instances += s.instances.size();
    std::printf("wrote %zu images with %zu instances to %s\n", samples.size(), instances, dir.string().c_str());
    return kOk;
}

int cmd_train(const RunConfig& cfg) {
    auto data = load_or_generate(cfg);
    FastInstModel<float> model(cfg.model_config());
    if (!cfg.text("io.checkpoint").empty()) {
        if (!fs::exists(cfg.text("io.checkpoint"))) throw MissingCheckpoint("checkpoint " + cfg.text("io.checkpoint") + " does not exist");
        load_weights(model, cfg);
    }
    TrainerOptions opts;
    opts.train = cfg.train_config();
    opts.loss = cfg.loss_config();
    opts.augment = cfg.augment_config();
    opts.out_dir = cfg.text("io.out");
    opts.config_echo = cfg.nested();
    write_json(opts.out_dir / "config.json", cfg.nested());
    Trainer<float> trainer(model, std::move(data), opts);
    const std::size_t total = opts.train.total_iters;
    try {
        const auto result = trainer.run([&](const json& rec) {
            const auto it = rec.at("iter").get<std::size_t>();
            if (it % 50 == 0 || it + 1 == total)
                std::printf("iter %6zu  lr %.2e  loss %.4f\n", it, rec.at("lr").get<double>(), rec.at("loss").get<double>());
        });
        print_eval(result);
        write_json(opts.out_dir / "eval.json", {{"config", cfg.nested()}, {"metrics", eval_to_json(result)}});
    } catch (const TrainingAborted& e) {
        std::fprintf(stderr, "training aborted: %s; last good checkpoint: %s\n", e.what(),
                     e.last_good_checkpoint.empty() ? "none" : e.last_good_checkpoint.c_str());
        return kFailure;
    }
    return kOk;
}

int cmd_eval(const RunConfig& base, const Invocation& inv) {
    const bool from_file = !base.text("io.detections").empty();
    const RunConfig cfg = from_file ? base : inv.resolve(true);
    const auto data = load_or_generate(cfg);
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<InstanceTarget>> gts;
    for (const auto& s : data) gts.push_back(s.instances);
    if (from_file) {
        std::ifstream is(cfg.text("io.detections"));
        if (!is) throw std::runtime_error("cannot open " + cfg.text("io.detections"));
        const json j = json::parse(is);
        std::map<std::int64_t, std::vector<Detection>> by_image;
        for (const auto& img : j.at("images")) {
            auto& list = by_image[img.at("image_id").get<std::int64_t>()];
            for (const auto& d : img.at("detections")) list.push_back(detection_from_json(d));
            std::stable_sort(list.begin(), list.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
        }
        for (const auto& s : data) dets.push_back(by_image[s.image_id]);
    } else {
        FastInstModel<float> model(cfg.model_config());
        load_weights(model, cfg);
        dets.resize(data.size());
        parallel_for(data.size(), [&](std::size_t i) { dets[i] = predict(model, data[i].image); });
    }
    const auto r = evaluate(dets, gts);
    print_eval(r);
    write_json(fs::path(cfg.text("io.out")) / "eval.json", {{"config", cfg.nested()}, {"metrics", eval_to_json(r)}});
    return kOk;
}

int cmd_predict(const RunConfig& cfg) {
    FastInstModel<float> model(cfg.model_config());
    load_weights(model, cfg);
    const auto images = select_images(load_or_generate(cfg), cfg);
    const fs::path out = cfg.text("io.out");
    fs::create_directories(out);
    json doc = {{"config", cfg.nested()}, {"images", json::array()}};
    for (const auto& s : images) {
        const auto dets = predict(model, s.image);
        char name[64];
        std::snprintf(name, sizeof name, "pred_%06lld.ppm", static_cast<long long>(s.image_id));
        write_ppm(out / name, overlay(s.image, dets, 0.0));
        json list = json::array();
        for (const auto& d : dets) list.push_back(detection_to_json(d));
        doc["images"].push_back({{"image_id", s.image_id}, {"overlay", name}, {"detections", list}});
        std::printf("image %lld: %zu detections -> %s\n", static_cast<long long>(s.image_id), dets.size(), (out / name).string().c_str());
    }
    write_json(out / "detections.json", doc);
    return kOk;
}

/// Nearest-neighbor enlargement so single-pixel markers stay visible.
std::vector<float> enlarge(const Tensor<float>& image, std::size_t f) {
    const std::size_t H = image.dim(1), W = image.dim(2);
    std::vector<float> out(3 * H * f * W * f);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < H * f; ++y)
            for (std::size_t x = 0; x < W * f; ++x) out[(c * H * f + y) * W * f + x] = image[(c * H + y / f) * W + x / f];
    return out;
}

int cmd_viz_queries(const RunConfig& cfg) {
    FastInstModel<float> model(cfg.model_config());
    load_weights(model, cfg);
    const auto images = select_images(load_or_generate(cfg), cfg);
    const fs::path out = cfg.text("io.out");
    fs::create_directories(out);
    const std::size_t f = 4, stride = level_stride(model.config().source_level);
    json doc = {{"config", cfg.nested()}, {"images", json::array()}};
    for (const auto& s : images) {
        NoGradGuard no_grad;
        const auto fwd = model.forward(s.image);
        const std::size_t H = s.height() * f, W = s.width() * f;
        auto px = enlarge(s.image, f);
        std::vector<std::size_t> best;
        std::vector<float> score;
        foreground_scores<float>(fwd.activation.probs.data(), fwd.activation.probs.dim(1), best, score);
        json points = json::array();
        for (auto loc : fwd.queries.locations) {
            const std::size_t gy = loc / fwd.queries.grid_w, gx = loc % fwd.queries.grid_w;
            const auto cy = static_cast<long>((gy * stride + stride / 2) * f), cx = static_cast<long>((gx * stride + stride / 2) * f);
            const auto& color = class_color(static_cast<int>(best[loc]) + 1);
            for (long dy = -3; dy <= 3; ++dy)
                for (long dx = -3; dx <= 3; ++dx) {
                    if (dy * dy + dx * dx > 9) continue;
                    const long y = cy + dy, x = cx + dx;
                    if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) continue;
                    const bool ring = dy * dy + dx * dx > 4;
                    for (std::size_t c = 0; c < 3; ++c)
                        px[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)] = ring ? 0.0f : color[c];
                }
            points.push_back({{"cell", loc}, {"y", gy}, {"x", gx}, {"class_id", best[loc] + 1}, {"score", score[loc]}});
        }
        char name[64];
        std::snprintf(name, sizeof name, "queries_%06lld.ppm", static_cast<long long>(s.image_id));
        write_ppm(out / name, Tensor<float>::from({3, H, W}, std::move(px)));
        doc["images"].push_back({{"image_id", s.image_id}, {"file", name}, {"queries", points}});
        std::printf("image %lld: %zu query locations -> %s\n", static_cast<long long>(s.image_id), fwd.queries.locations.size(),
                    (out / name).string().c_str());
    }
    write_json(out / "queries.json", doc);
    return kOk;
}

int cmd_viz_aux_attn(const RunConfig& cfg) {
    FastInstModel<float> model(cfg.model_config());
    if (model.config().layers == 0) throw ConfigError("decoder.d", "auxiliary attention maps need at least one decoder layer");
    if (model.config().nb == 0) throw ConfigError("query.nb", "there are no auxiliary queries to visualize");
    load_weights(model, cfg);
    const auto images = select_images(load_or_generate(cfg), cfg);
    const fs::path out = cfg.text("io.out");
    fs::create_directories(out);
    json doc = {{"config", cfg.nested()}, {"images", json::array()}};
    for (const auto& s : images) {
        NoGradGuard no_grad;
        const auto fwd = model.forward(s.image);
        const std::size_t L = fwd.e3_h * fwd.e3_w, na = model.config().na;
        json files = json::array();
        for (std::size_t b = 0; b < model.config().nb; ++b) {
            std::vector<float> row(fwd.decoder.last_cross_weights.begin() + static_cast<std::ptrdiff_t>((na + b) * L),
                                   fwd.decoder.last_cross_weights.begin() + static_cast<std::ptrdiff_t>((na + b + 1) * L));
            const float mx = *std::max_element(row.begin(), row.end());
            for (auto& v : row) v = mx > 0 ? v / mx : 0.0f;
            const auto up = bilinear_resize(Tensor<float>::from({1, fwd.e3_h, fwd.e3_w}, row), s.height(), s.width());
            char name[64];
            std::snprintf(name, sizeof name, "aux_attn_%06lld_q%02zu.pgm", static_cast<long long>(s.image_id), b);
            write_pgm(out / name, s.height(), s.width(), up.to_vector());
            files.push_back(name);
        }
        doc["images"].push_back({{"image_id", s.image_id}, {"heatmaps", files}});
        std::printf("image %lld: %zu auxiliary attention maps in %s\n", static_cast<long long>(s.image_id), model.config().nb,
                    out.string().c_str());
    }
    write_json(out / "aux_attention.json", doc);
    return kOk;
}

int cmd_bench(const RunConfig& cfg) {
    FastInstModel<float> model(cfg.model_config());
    if (!cfg.text("io.checkpoint").empty()) {
        if (!fs::exists(cfg.text("io.checkpoint"))) throw MissingCheckpoint("checkpoint " + cfg.text("io.checkpoint") + " does not exist");
        load_weights(model, cfg);
    }
    const auto r = benchmark_latency(model, cfg.count("bench.height"), cfg.count("bench.width"), cfg.count("bench.warmup"),
                                     cfg.count("bench.iters"), cfg.nested());
    std::printf("input %zux%zu  iters %zu  mean %.3f ms  median %.3f ms  p95 %.3f ms  fps %.2f  config %s\n", r.input_h, r.input_w, r.iters,
                r.mean_ms, r.median_ms, r.p95_ms, r.fps, r.config_hash.c_str());
    auto j = r.to_json();
    j["config"] = cfg.nested();
    write_json(fs::path(cfg.text("io.out")) / "bench.json", j);
    return kOk;
}

int report(const std::vector<suites::SuiteResult>& results) {
    bool ok = true;
    for (const auto& r : results) {
        std::printf("[%s] %-28s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
        ok = ok && r.passed;
    }
    return ok ? kOk : kFailure;
}

suites::GradientOptions gradient_options(const RunConfig& cfg) {
    suites::GradientOptions g;
    g.coords_per_group = cfg.count("gradcheck.coords");
    g.eps = cfg.real("gradcheck.eps");
    g.tol = cfg.real("gradcheck.tol");
    g.seed = cfg.get("model.seed").get<std::uint64_t>();
    return g;
}

int cmd_gradcheck(const RunConfig& cfg) { return report({suites::gradient_integrity(gradient_options(cfg))}); }

int cmd_selftest(const RunConfig& cfg) {
    std::vector<suites::SuiteResult> results;
    auto run = [&](suites::SuiteResult r) {
        std::printf("[%s] %-28s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
        std::fflush(stdout);
        results.push_back(std::move(r));
    };
    run(suites::hungarian_oracle());
    run(suites::local_max_oracle());
    run(suites::masked_attention());
    run(suites::gt_guided_consistency());
    run(suites::fixed_matching_optimality());
    run(suites::deep_supervision());
    run(suites::evaluator_correctness());
    run(suites::gradient_integrity(gradient_options(cfg)));
    const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
    std::printf("%zu suites, %s\n", results.size(), ok ? "all passed" : "FAILURES");
    return ok ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FastInst: query-based real-time instance segmentation at desk scale"};
    app.require_subcommand(1, 1);
    app.fallthrough();

    Invocation inv;
    app.add_option("--config", inv.config_file, "JSON config file (nested or dotted keys)");
    app.add_option("--seed", "Sets data.seed, model.seed and train.seed together")->each([&](const std::string& v) {
        inv.seed = std::stoull(v);
    });
    for (const auto& key : config_schema()) {
        std::string help = key.help + " [default " + key.fallback.dump() + "]";
        app.add_option("--" + key.key, help)->each([&inv, name = key.key](const std::string& v) { inv.flags[name] = v; });
    }

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "generate the synthetic dataset into data.dir"},
        {"train", "train a model; writes checkpoints and metrics.jsonl into io.out"},
        {"eval", "evaluate io.checkpoint (or io.detections) on the dataset and print the AP table"},
        {"predict", "write mask overlays and detection JSON for io.count images"},
        {"viz-queries", "mark the selected IA-guided query locations on images"},
        {"viz-aux-attn", "write last-layer attention heatmaps of the auxiliary queries"},
        {"bench", "measure batch-1 latency of forward plus post-processing"},
        {"gradcheck", "finite-difference check of the total loss per parameter group"},
        {"selftest", "run every oracle suite"}};
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help] : commands) subs[name] = app.add_subcommand(name, help);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    std::string command;
    for (const auto& [name, sub] : subs)
        if (sub->parsed()) command = name;

    try {
        const bool needs_checkpoint = command == "predict" || command == "viz-queries" || command == "viz-aux-attn";
        const RunConfig cfg = inv.resolve(needs_checkpoint);
        if (command == "gen-data") return cmd_gen_data(cfg);
        if (command == "train") return cmd_train(cfg);
        if (command == "eval") return cmd_eval(cfg, inv);
        if (command == "predict") return cmd_predict(cfg);
        if (command == "viz-queries") return cmd_viz_queries(cfg);
        if (command == "viz-aux-attn") return cmd_viz_aux_attn(cfg);
        if (command == "bench") return cmd_bench(cfg);
        if (command == "gradcheck") return cmd_gradcheck(cfg);
        if (command == "selftest") return cmd_selftest(cfg);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error at %s\n", e.what());
        return kConfigError;
    } catch (const MissingCheckpoint& e) {
        std::fprintf(stderr, "missing checkpoint: %s\n", e.what());
        return kMissingCheckpoint;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kFailure;
    }
    return kFailure;
}
