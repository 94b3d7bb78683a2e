#pragma once

// Adam, early stopping, checkpoint serialization, and the training and
// evaluation loops.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lssf/data.hpp"
#include "lssf/loss.hpp"
#include "lssf/network.hpp"

namespace lssf {

// ---- Adam ---------------------------------------------------------------

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.90;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    AdamConfig cfg;
    int64_t t = 0;
    std::map<std::string, Tensor<T>> m, v;
};

// Standard bias-corrected Adam. Lazily allocates moments per parameter.
// A non-finite gradient aborts the step before touching any parameter.
template <typename T>
void adam_step(ParamStore<T>& ps, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& st) {
    const auto& c = st.cfg;
    detail::require(c.beta1 >= 0 && c.beta1 < 1 && c.beta2 >= 0 && c.beta2 < 1, "adam: betas must lie in [0,1)");
    for (const auto& [name, g] : grads)
        if (!g.all_finite())
            throw std::runtime_error("adam: non-finite gradient for parameter " + name);

    st.t += 1;
    double bc1 = 1.0 - std::pow(c.beta1, double(st.t));
    double bc2 = 1.0 - std::pow(c.beta2, double(st.t));
    for (const auto& [name, g] : grads) {
        Tensor<T>& p = ps.at(name);
        detail::require(p.shape == g.shape, "adam: gradient shape mismatch for " + name);
        auto mit = st.m.find(name);
        if (mit == st.m.end()) {
            st.m.emplace(name, Tensor<T>::zeros(p.shape));
            st.v.emplace(name, Tensor<T>::zeros(p.shape));
        }
        Tensor<T>& m = st.m.at(name);
        Tensor<T>& v = st.v.at(name);
        for (int64_t i = 0; i < p.size(); ++i) {
            double gi = double(g[i]);
            double mi = c.beta1 * double(m[i]) + (1.0 - c.beta1) * gi;
            double vi = c.beta2 * double(v[i]) + (1.0 - c.beta2) * gi * gi;
            m[i] = T(mi);
            v[i] = T(vi);
            p[i] = T(double(p[i]) - c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps));
        }
    }
}

// ---- early stopping -------------------------------------------------------

struct EarlyStopConfig {
    int patience = 9;
    int start_epoch = 10;  // 1-based epoch at which the monitor arms
    double min_delta = 0.0;
    bool maximize = true;  // jaccard-style monitor; false for loss monitors
};

struct EarlyStopState {
    double best = std::numeric_limits<double>::quiet_NaN();
    int best_epoch = -1;
    int epochs_since_improve = 0;
};

// The monitor arms at start_epoch (its metric seeds `best`); each later
// non-improving epoch increments the counter, and the counter reaching
// patience signals the stop. With a constant metric and the defaults
// (10, 9) the stop fires at epoch 19.
inline bool early_stop_update(EarlyStopState& st, const EarlyStopConfig& cfg, int epoch, double metric) {
    detail::require(cfg.patience >= 1, "early stop: patience must be >= 1");
    if (epoch < cfg.start_epoch) return false;
    bool improved = std::isnan(st.best) ||
                    (cfg.maximize ? metric > st.best + cfg.min_delta : metric < st.best - cfg.min_delta);
    if (improved) {
        st.best = metric;
        st.best_epoch = epoch;
        st.epochs_since_improve = 0;
        return false;
    }
    st.epochs_since_improve += 1;
    return st.epochs_since_improve >= cfg.patience;
}

// ---- checkpoint -----------------------------------------------------------

struct Checkpoint {
    uint32_t version = 1;
    nlohmann::json config;  // serialized NetworkConfig
    uint64_t seed = 0;
    ParamStore<float> params;
    bool has_adam = false;
    AdamState<float> adam;
};

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, uint32_t(s.size()));
    os.write(s.data(), std::streamsize(s.size()));
}
inline void put_tensor(std::ostream& os, const Tensor<float>& t) {
    put_u32(os, uint32_t(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) put_u32(os, uint32_t(t.dim(d)));
    os.write(reinterpret_cast<const char*>(t.data.data()), std::streamsize(t.size() * 4));
}

inline uint32_t get_u32(std::istream& is) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}
inline uint64_t get_u64(std::istream& is) {
    uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}
inline double get_f64(std::istream& is) {
    double v;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}
inline std::string get_str(std::istream& is) {
    uint32_t n = get_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return s;
}
inline Tensor<float> get_tensor(std::istream& is) {
    uint32_t nd = get_u32(is);
    std::vector<int> shape(nd);
    for (auto& d : shape) d = int(get_u32(is));
    Tensor<float> t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.size() * 4));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return t;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'L', 'S', 'S', 'F', 'C', 'K', 'P', 'T'};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(kCheckpointMagic, 8);
    detail::put_u32(os, ck.version);
    detail::put_str(os, ck.config.dump());
    detail::put_u64(os, ck.seed);

    detail::put_u64(os, uint64_t(ck.params.names().size()));
    for (const auto& name : ck.params.names()) {
        detail::put_str(os, name);
        os.put(ck.params.learnable(name) ? 1 : 0);
        detail::put_tensor(os, ck.params.at(name));
    }

    os.put(ck.has_adam ? 1 : 0);
    if (ck.has_adam) {
        detail::put_u64(os, uint64_t(ck.adam.t));
        detail::put_f64(os, ck.adam.cfg.lr);
        detail::put_f64(os, ck.adam.cfg.beta1);
        detail::put_f64(os, ck.adam.cfg.beta2);
        detail::put_f64(os, ck.adam.cfg.eps);
        for (const auto* table : {&ck.adam.m, &ck.adam.v}) {
            detail::put_u64(os, uint64_t(table->size()));
            for (const auto& [name, t] : *table) {
                detail::put_str(os, name);
                detail::put_tensor(os, t);
            }
        }
    }
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint ck;
    ck.version = detail::get_u32(is);
    if (ck.version != 1) throw std::runtime_error("checkpoint: unsupported version");
    ck.config = nlohmann::json::parse(detail::get_str(is));
    ck.seed = detail::get_u64(is);

    uint64_t n = detail::get_u64(is);
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = detail::get_str(is);
        int learnable = is.get();
        ck.params.add(name, detail::get_tensor(is), learnable != 0);
    }

    int has_adam = is.get();
    if (has_adam == 1) {
        ck.has_adam = true;
        ck.adam.t = int64_t(detail::get_u64(is));
        ck.adam.cfg.lr = detail::get_f64(is);
        ck.adam.cfg.beta1 = detail::get_f64(is);
        ck.adam.cfg.beta2 = detail::get_f64(is);
        ck.adam.cfg.eps = detail::get_f64(is);
        for (auto* table : {&ck.adam.m, &ck.adam.v}) {
            uint64_t k = detail::get_u64(is);
            for (uint64_t i = 0; i < k; ++i) {
                std::string name = detail::get_str(is);
                table->emplace(name, detail::get_tensor(is));
            }
        }
    }
    return ck;
}

inline void check_config_match(const Checkpoint& ck, const NetworkConfig& cfg) {
    nlohmann::json want = cfg;
    if (ck.config != want)
        throw std::runtime_error("checkpoint: config mismatch (stored " + ck.config.dump() +
                                 ", requested " + want.dump() + ")");
}

// ---- train / evaluate -------------------------------------------------------

struct TrainConfig {
    int epochs = 30;
    int batch_size = 4;
    AdamConfig adam;
    EarlyStopConfig early;
    LossConfig loss;
    uint64_t seed = 42;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_jaccard = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    Checkpoint best;  // parameters at the monitor's best epoch
    Checkpoint last;  // parameters when the loop ended (warm-start source)
    int best_epoch = 0;
    double final_train_loss = 0.0;  // replay with the next epoch's schedule, no updates
};

namespace detail {

template <typename T>
Tensor<T> gather_samples(const Tensor<T>& src, const std::vector<int>& idx) {
    std::vector<int> shape = src.shape;
    shape[0] = int(idx.size());
    Tensor<T> out(shape);
    int64_t stride = src.size() / src.dim(0);
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(src.data.begin() + idx[i] * stride, src.data.begin() + (idx[i] + 1) * stride,
                  out.data.begin() + int64_t(i) * stride);
    return out;
}

// One pass over the training set in epoch order; updates parameters via
// `step` unless it is null. Returns the mean pre-update loss per sample.
inline double train_epoch(ParamStore<float>& ps, const NetworkConfig& net_cfg, const TrainConfig& cfg,
                          const SampleBatch<float>& data, int epoch, AdamState<float>* opt) {
    int n = data.images.dim(0);
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 erng(cfg.seed * 1000003ULL + uint64_t(epoch));
    std::shuffle(order.begin(), order.end(), erng);

    double loss_sum = 0.0;
    for (int at = 0; at < n; at += cfg.batch_size) {
        std::vector<int> idx(order.begin() + at, order.begin() + std::min(n, at + cfg.batch_size));
        Tensor<float> xb = gather_samples(data.images, idx);
        Tensor<float> yb = gather_samples(data.masks, idx);

        Tape<float> tape;
        Ctx<float> ctx{tape, ps, Mode::Train, &erng};
        Var prob = forward(ctx, tape.leaf(xb, false), net_cfg);
        Var loss = combined_loss(tape, prob, tape.leaf(yb, false), cfg.loss);
        loss_sum += double(tape.val(loss)[0]) * double(idx.size());

        if (opt) {
            tape.backward(loss);
            std::map<std::string, Tensor<float>> grads;
            for (const auto& [name, var] : ctx.bindings)
                if (ps.learnable(name) && tape.has_grad(var)) grads.emplace(name, tape.grad(var));
            adam_step(ps, grads, *opt);
        }
    }
    return loss_sum / double(n);
}

}  // namespace detail

template <typename TStore>
MetricsReport evaluate(ParamStore<TStore>& ps, const NetworkConfig& net_cfg, const SampleBatch<TStore>& data,
                       const LossConfig& loss_cfg = {}, double threshold = 0.5) {
    int n = data.images.dim(0);
    detail::require(n >= 1, "evaluate: empty dataset");
    detail::require(data.images.dim(1) == net_cfg.input_size, "evaluate: image size does not match config");
    std::vector<Metrics> per_image;
    double bce_sum = 0.0, jac_sum = 0.0;
    for (int i = 0; i < n; ++i) {
        Tensor<TStore> x = detail::gather_samples(data.images, {i});
        Tensor<TStore> y = detail::gather_samples(data.masks, {i});
        Tape<TStore> tape;
        Ctx<TStore> ctx{tape, ps, Mode::Infer, nullptr};
        Var prob = forward(ctx, tape.leaf(x, false), net_cfg);
        Var yv = tape.leaf(y, false);
        bce_sum += double(tape.val(bce_loss(tape, prob, yv, TStore(loss_cfg.prob_clamp)))[0]);
        jac_sum += double(tape.val(jaccard_loss(tape, prob, yv, TStore(loss_cfg.smooth_eps)))[0]);

        Tensor<uint8_t> pred = predict_mask(tape.val(prob), threshold);
        Tensor<uint8_t> gt({y.dim(0), y.dim(1), y.dim(2)});
        for (int64_t k = 0; k < y.size(); ++k) gt[k] = uint8_t(y[k]);
        per_image.push_back(metrics(confusion(pred, gt)));
    }
    MetricsReport report;
    report.m = aggregate_mean(per_image);
    report.loss_bce = bce_sum / double(n);
    report.loss_jaccard = jac_sum / double(n);
    report.n_images = n;
    return report;
}

inline TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& cfg, const SampleBatch<float>& train_data,
                         const SampleBatch<float>& val_data, const Checkpoint* init_from = nullptr) {
    detail::require(train_data.images.dim(0) >= 1, "train: empty dataset");
    detail::require(train_data.images.shape == std::vector<int>({train_data.images.dim(0), net_cfg.input_size,
                                                                 net_cfg.input_size, 3}),
                    "train: image tensor does not match config");
    detail::require(train_data.masks.dim(0) == train_data.images.dim(0) &&
                        train_data.masks.dim(1) == net_cfg.input_size,
                    "train: image/mask shape mismatch");
    detail::require(cfg.batch_size >= 1, "train: batch size must be >= 1");

    ParamStore<float> ps;
    if (init_from) {
        check_config_match(*init_from, net_cfg);
        ps = init_from->params;
    } else {
        init_model(ps, net_cfg);
    }
    AdamState<float> opt;
    opt.cfg = cfg.adam;

    TrainResult result;
    EarlyStopState stopper;
    auto snapshot = [&](int epoch) {
        result.best = Checkpoint{};
        result.best.config = net_cfg;
        result.best.seed = cfg.seed;
        result.best.params = ps;
        result.best.has_adam = true;
        result.best.adam = opt;
        result.best_epoch = epoch;
    };
    snapshot(0);

    int last_epoch = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        last_epoch = epoch;
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = detail::train_epoch(ps, net_cfg, cfg, train_data, epoch, &opt);
        MetricsReport val = evaluate(ps, net_cfg, val_data, cfg.loss);
        rec.val_loss = cfg.loss.bce_weight * val.loss_bce + cfg.loss.jaccard_weight * val.loss_jaccard;
        rec.val_jaccard = val.m.jaccard;
        result.history.push_back(rec);

        bool stop = early_stop_update(stopper, cfg.early, epoch, rec.val_jaccard);
        if (stopper.best_epoch == epoch) snapshot(epoch);
        if (stop) break;
    }
    // run ended before the monitor armed: keep the final parameters
    if (result.best_epoch == 0 && last_epoch > 0) snapshot(last_epoch);
    result.last.config = net_cfg;
    result.last.seed = cfg.seed;
    result.last.params = ps;
    result.last.has_adam = true;
    result.last.adam = opt;
    // pre-update loss a warm start would see on its first epoch
    result.final_train_loss =
        detail::train_epoch(ps, net_cfg, cfg, train_data, 1, nullptr);
    return result;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("history: cannot open " + path);
    f << "epoch,train_loss,val_loss,val_jaccard\n";
    for (const auto& r : history)
        f << r.epoch << "," << r.train_loss << "," << r.val_loss << "," << r.val_jaccard << "\n";
}

}  // namespace lssf
