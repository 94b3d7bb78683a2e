// lssfnet: train / eval / predict / report / selftest / synth
//
// Exit codes: 0 ok, 1 runtime failure, 2 configuration error.
// Seed precedence: --seed flag > config "seed" > LSSF_SEED env > 42.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "lssf/train.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lssf;

namespace {

struct SeedFlag {
    bool set = false;
    uint64_t value = 0;
};

uint64_t resolve_seed(const SeedFlag& flag, const cli::RunConfig& rc) {
    if (flag.set) return flag.value;
    if (rc.seed_from_config) return rc.tc.seed;
    if (const char* env = std::getenv("LSSF_SEED")) return std::strtoull(env, nullptr, 10);
    return 42;
}

cli::RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream f(path);
    if (!f) throw cli::ConfigError("config: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw cli::ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return cli::parse_run_config(j);
}

std::string find_manifest(const std::string& data) {
    if (fs::is_directory(data)) {
        fs::path p = fs::path(data) / "manifest.jsonl";
        if (!fs::exists(p)) throw std::runtime_error("data: no manifest.jsonl in " + data);
        return p.string();
    }
    return data;
}

uint64_t fnv1a_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot hash " + path);
    uint64_t h = 1469598103934665603ULL;
    char c;
    while (f.get(c)) h = (h ^ uint8_t(c)) * 1099511628211ULL;
    return h;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              const std::string& init_from, const SeedFlag& seed_flag) {
    cli::RunConfig rc = load_run_config(config_path);
    uint64_t seed = resolve_seed(seed_flag, rc);
    rc.tc.seed = seed;
    rc.net.seed = seed;

    DatasetManifest manifest = read_manifest(find_manifest(data), rc.net.input_size);
    if (manifest.entries.empty()) throw std::runtime_error("data: empty manifest");
    auto splits = split_manifest(manifest.entries, {1.0 - rc.val_fraction, rc.val_fraction, 0.0}, seed);
    if (splits[0].empty()) splits[0] = manifest.entries;
    if (splits[1].empty()) splits[1] = splits[0];

    SampleBatch<float> train_data = load_batch<float>(splits[0], rc.net.input_size);
    SampleBatch<float> val_data = load_batch<float>(splits[1], rc.net.input_size);

    Checkpoint warm;
    const Checkpoint* init = nullptr;
    if (!init_from.empty()) {
        warm = load_checkpoint(init_from);
        check_config_match(warm, rc.net);
        std::cerr << "warm start from " << init_from << " (fnv1a " << std::hex << fnv1a_file(init_from)
                  << std::dec << ")\n";
        init = &warm;
    }

    TrainResult result = train(rc.net, rc.tc, train_data, val_data, init);

    fs::create_directories(out);
    std::string ckpt = (fs::path(out) / "checkpoint.ckpt").string();
    save_checkpoint(ckpt, result.best);
    write_history_csv((fs::path(out) / "history.csv").string(), result.history);

    MetricsReport report = evaluate(result.best.params, rc.net, val_data, rc.tc.loss);
    json rj = report.to_json();
    rj["schema"] = "lssf-report-1";
    {
        std::ofstream rf(fs::path(out) / "report.json");
        rf << rj.dump(2) << "\n";
    }

    json summary = {{"schema", "lssf-train-1"},
                    {"seed", seed},
                    {"epochs_run", result.history.size()},
                    {"best_epoch", result.best_epoch},
                    {"val_jaccard", report.m.jaccard},
                    {"checkpoint", ckpt}};
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    NetworkConfig net = ck.config.get<NetworkConfig>();
    DatasetManifest manifest = read_manifest(find_manifest(data), net.input_size);
    if (manifest.entries.empty()) throw std::runtime_error("data: empty manifest");
    SampleBatch<float> batch = load_batch<float>(manifest.entries, net.input_size);
    MetricsReport report = evaluate(ck.params, net, batch);
    json j = report.to_json();
    j["schema"] = "lssf-report-1";
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& image, const std::string& out_mask,
                double threshold) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    NetworkConfig net = ck.config.get<NetworkConfig>();
    int ow = 0, oh = 0;
    Tensor<float> img = load_image<float>(image, net.input_size, &ow, &oh);
    Tensor<float> x({1, net.input_size, net.input_size, 3}, std::move(img.data));

    Tape<float> tape;
    Ctx<float> ctx{tape, ck.params, Mode::Infer, nullptr};
    Tensor<float> prob = tape.val(forward(ctx, tape.leaf(x, false), net));
    Tensor<uint8_t> mask = predict_mask(prob, threshold);

    cv::Mat m(net.input_size, net.input_size, CV_8UC1);
    for (int y = 0; y < net.input_size; ++y)
        for (int xx = 0; xx < net.input_size; ++xx)
            m.at<uint8_t>(y, xx) = mask[int64_t(y) * net.input_size + xx] ? 255 : 0;
    cv::resize(m, m, cv::Size(ow, oh), 0, 0, cv::INTER_NEAREST);
    if (!cv::imwrite(out_mask, m)) throw std::runtime_error("cannot write " + out_mask);

    double fg = double(cv::countNonZero(m)) / double(ow) / double(oh);
    json j = {{"schema", "lssf-predict-1"},
              {"out_mask", out_mask},
              {"width", ow},
              {"height", oh},
              {"threshold", threshold},
              {"foreground_fraction", fg}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_report(const std::string& config_path) {
    cli::RunConfig rc = load_run_config(config_path);
    ParamStore<float> ps;
    init_model(ps, rc.net);
    json j = layer_table_json(rc.net);
    j["schema"] = "lssf-layers-1";
    j["registry_params"] = count_params(ps);
    j["params_m"] = double(count_params(ps)) / 1e6;
    j["flops_g"] = double(count_flops(rc.net)) / 1e9;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_synth(int n, int size, const SeedFlag& seed_flag, const std::string& out) {
    uint64_t seed = resolve_seed(seed_flag, {});
    DatasetManifest m = synth_lesions(n, size, seed, out);
    json j = {{"schema", "lssf-synth-1"},
              {"manifest", (fs::path(out) / "manifest.jsonl").string()},
              {"n", int(m.entries.size())},
              {"size", size},
              {"seed", seed}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

// Compact property suites, independent of the unit-test binaries. Each
// suite prints one line; nonzero exit if anything fails.
int cmd_selftest() {
    int failures = 0;
    auto suite = [&failures](const std::string& name, bool ok) {
        std::cout << (ok ? "pass" : "FAIL") << "  " << name << "\n";
        if (!ok) ++failures;
    };

    {  // finite differences through a conv+BN+attention stack, 64-bit
        NetworkConfig net;
        net.input_size = 16;
        net.widths = {2, 4, 6, 8};
        net.sab.dropout_rate = 0.0;
        ParamStore<double> ps;
        init_model(ps, net);
        std::mt19937_64 rng(1);
        Tensor<double> x = random_uniform<double>({1, 16, 16, 3}, rng, 0.0, 1.0);
        Tensor<double> g = Tensor<double>::zeros({1, 16, 16, 1});
        for (int i = 0; i < 256; i += 3) g[i] = 1.0;

        auto loss_at = [&]() {
            Tape<double> tape;
            Ctx<double> ctx{tape, ps, Mode::Train, nullptr};
            Var p = forward(ctx, tape.leaf(x, false), net);
            Var l = combined_loss(tape, p, tape.leaf(g, false));
            return double(tape.val(l)[0]);
        };

        Tape<double> tape;
        Ctx<double> ctx{tape, ps, Mode::Train, nullptr};
        Var p = forward(ctx, tape.leaf(x, false), net);
        Var l = combined_loss(tape, p, tape.leaf(g, false));
        tape.backward(l);

        double max_err = 0.0;
        int probes = 0;
        std::mt19937_64 prng(2);
        for (const auto& name : ps.names()) {
            if (!ps.learnable(name) || probes >= 60) continue;
            Tensor<double>& t = ps.at(name);
            int64_t i = int64_t(prng() % uint64_t(t.size()));
            double orig = t[i];
            const double h = 1e-6;
            t[i] = orig + h;
            double lp = loss_at();
            t[i] = orig - h;
            double lm = loss_at();
            t[i] = orig;
            double numeric = (lp - lm) / (2 * h);
            double analytic = tape.grad(ctx.bindings.at(name))[i];
            double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic) + std::abs(numeric));
            max_err = std::max(max_err, err);
            ++probes;
        }
        suite("gradient finite differences (" + std::to_string(probes) + " probes)", max_err < 1e-4);
    }

    {  // channel shuffle is a bijection for every g | n, n <= 64
        bool ok = true;
        for (int n = 1; n <= 64; ++n)
            for (int g = 1; g <= n; ++g) {
                if (n % g) continue;
                auto perm = shuffle_permutation(n, g);
                std::vector<char> seen(n, 0);
                for (int v : perm) {
                    if (v < 0 || v >= n || seen[v]) ok = false;
                    if (v >= 0 && v < n) seen[v] = 1;
                }
            }
        suite("channel shuffle bijection", ok);
    }

    {  // dice-jaccard identity over random confusion tables
        bool ok = true;
        std::mt19937_64 rng(3);
        for (int t = 0; t < 1000; ++t) {
            ConfusionCounts c{int64_t(rng() % 50), int64_t(rng() % 50), int64_t(rng() % 50),
                              int64_t(rng() % 50)};
            if (c.tp + c.fp + c.fn == 0) continue;
            Metrics m = metrics(c);
            if (std::abs(m.dice - 2 * m.jaccard / (1 + m.jaccard)) > 1e-12) ok = false;
        }
        suite("dice-jaccard identity", ok);
    }

    {  // permuting the batch permutes the outputs
        NetworkConfig net;
        net.input_size = 16;
        net.widths = {2, 4, 6, 8};
        ParamStore<float> ps;
        init_model(ps, net);
        std::mt19937_64 rng(4);
        Tensor<float> x = random_uniform<float>({2, 16, 16, 3}, rng, 0.f, 1.f);
        Tensor<float> sw = x;
        int64_t half = x.size() / 2;
        for (int64_t i = 0; i < half; ++i) std::swap(sw.data[i], sw.data[half + i]);
        Tape<float> ta;
        Ctx<float> c1{ta, ps, Mode::Infer, nullptr};
        Tensor<float> y = ta.val(forward(c1, ta.leaf(x, false), net));
        Tape<float> tb;
        Ctx<float> c2{tb, ps, Mode::Infer, nullptr};
        Tensor<float> ys = tb.val(forward(c2, tb.leaf(sw, false), net));
        bool ok = true;
        int64_t yh = y.size() / 2;
        for (int64_t i = 0; i < yh; ++i)
            if (y[i] != ys[yh + i] || y[yh + i] != ys[i]) ok = false;
        suite("batch permutation consistency", ok);
    }

    {  // loss oracles
        Tape<double> tape;
        Var p = tape.leaf(Tensor<double>::full({4}, 0.5), false);
        Var g = tape.leaf(Tensor<double>({4}, {1, 0, 1, 0}), false);
        bool ok = std::abs(tape.val(bce_loss(tape, p, g))[0] - std::log(2.0)) < 1e-12;
        Tensor<double> a({4}, {1, 0, 1, 0}), b({4}, {0, 1, 0, 1});
        Tape<double> t2;
        double jl = t2.val(jaccard_loss(t2, t2.leaf(a, false), t2.leaf(b, false)))[0];
        ok = ok && std::abs(jl - (1.0 - 1.0 / 5.0)) < 1e-12;
        suite("loss closed forms", ok);
    }

    return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LSSF-Net lightweight skin-lesion segmentation"};
    app.require_subcommand(1);

    SeedFlag seed_flag;
    auto add_seed = [&seed_flag](CLI::App* sub) {
        sub->add_option_function<uint64_t>(
            "--seed",
            [&seed_flag](const uint64_t& v) {
                seed_flag.set = true;
                seed_flag.value = v;
            },
            "global RNG seed (overrides config and LSSF_SEED)");
    };

    std::string config_path, data, out, init_from, ckpt_path, image, out_mask;
    double threshold = 0.5;
    int n = 16, size = 64;

    CLI::App* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config_path, "run config JSON");
    tr->add_option("--data", data, "dataset dir or manifest.jsonl")->required();
    tr->add_option("--out", out, "output directory")->required();
    tr->add_option("--init-from", init_from, "checkpoint to warm start from");
    add_seed(tr);

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    ev->add_option("--data", data, "dataset dir or manifest.jsonl")->required();
    add_seed(ev);

    CLI::App* pr = app.add_subcommand("predict", "predict a mask for one image");
    pr->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
    pr->add_option("--image", image, "input image")->required();
    pr->add_option("--out-mask", out_mask, "output mask PNG")->required();
    pr->add_option("--threshold", threshold, "probability threshold (default 0.5, inclusive)");
    add_seed(pr);

    CLI::App* rp = app.add_subcommand("report", "print the layer/params/FLOPs table");
    rp->add_option("--config", config_path, "run config JSON");
    add_seed(rp);

    CLI::App* st = app.add_subcommand("selftest", "run the built-in property suites");
    add_seed(st);

    CLI::App* sy = app.add_subcommand("synth", "generate a synthetic lesion dataset");
    sy->add_option("--n", n, "number of images");
    sy->add_option("--size", size, "image size (power of two)");
    sy->add_option("--out", out, "output directory")->required();
    add_seed(sy);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (tr->parsed()) return cmd_train(config_path, data, out, init_from, seed_flag);
        if (ev->parsed()) return cmd_eval(ckpt_path, data);
        if (pr->parsed()) return cmd_predict(ckpt_path, image, out_mask, threshold);
        if (rp->parsed()) return cmd_report(config_path);
        if (st->parsed()) return cmd_selftest();
        if (sy->parsed()) return cmd_synth(n, size, seed_flag, out);
    } catch (const cli::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
