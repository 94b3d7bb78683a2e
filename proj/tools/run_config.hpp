#pragma once

// JSON run configuration for the CLI: network + loss + training
// hyperparameters in one document. Unknown keys are rejected by name so
// typos fail loudly.

#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "lssf/train.hpp"

namespace lssf::cli {

struct RunConfig {
    NetworkConfig net;
    TrainConfig tc;
    double val_fraction = 0.2;
    bool seed_from_config = false;
};

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + where);
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig rc;
    reject_unknown(j, {"network", "loss", "train", "val_fraction", "seed"}, "top level");

    if (j.contains("network")) {
        const auto& n = j["network"];
        reject_unknown(n, {"input_size", "widths", "sab", "gsa", "shuffle_groups", "cfma", "seed"}, "network");
        if (n.contains("input_size")) n["input_size"].get_to(rc.net.input_size);
        if (n.contains("widths")) n["widths"].get_to(rc.net.widths);
        if (n.contains("shuffle_groups")) n["shuffle_groups"].get_to(rc.net.shuffle_groups);
        if (n.contains("seed")) n["seed"].get_to(rc.net.seed);
        if (n.contains("sab")) {
            reject_unknown(n["sab"], {"temperature", "dropout_rate", "learned_projections"}, "network.sab");
            if (n["sab"].contains("temperature")) n["sab"]["temperature"].get_to(rc.net.sab.temperature);
            if (n["sab"].contains("dropout_rate")) n["sab"]["dropout_rate"].get_to(rc.net.sab.dropout_rate);
            if (n["sab"].contains("learned_projections"))
                n["sab"]["learned_projections"].get_to(rc.net.sab.learned_projections);
        }
        if (n.contains("gsa")) {
            reject_unknown(n["gsa"], {"factor"}, "network.gsa");
            if (n["gsa"].contains("factor")) n["gsa"]["factor"].get_to(rc.net.gsa.factor);
        }
        if (n.contains("cfma")) {
            reject_unknown(n["cfma"], {"levels", "mlp_ratio"}, "network.cfma");
            if (n["cfma"].contains("levels")) n["cfma"]["levels"].get_to(rc.net.cfma.levels);
            if (n["cfma"].contains("mlp_ratio")) n["cfma"]["mlp_ratio"].get_to(rc.net.cfma.mlp_ratio);
        }
    }

    if (j.contains("loss")) {
        const auto& l = j["loss"];
        reject_unknown(l, {"bce_weight", "jaccard_weight", "smooth_eps", "prob_clamp"}, "loss");
        if (l.contains("bce_weight")) l["bce_weight"].get_to(rc.tc.loss.bce_weight);
        if (l.contains("jaccard_weight")) l["jaccard_weight"].get_to(rc.tc.loss.jaccard_weight);
        if (l.contains("smooth_eps")) l["smooth_eps"].get_to(rc.tc.loss.smooth_eps);
        if (l.contains("prob_clamp")) l["prob_clamp"].get_to(rc.tc.loss.prob_clamp);
    }

    if (j.contains("train")) {
        const auto& t = j["train"];
        reject_unknown(t,
                       {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "patience", "start_epoch",
                        "min_delta"},
                       "train");
        if (t.contains("epochs")) t["epochs"].get_to(rc.tc.epochs);
        if (t.contains("batch_size")) t["batch_size"].get_to(rc.tc.batch_size);
        if (t.contains("lr")) t["lr"].get_to(rc.tc.adam.lr);
        if (t.contains("beta1")) t["beta1"].get_to(rc.tc.adam.beta1);
        if (t.contains("beta2")) t["beta2"].get_to(rc.tc.adam.beta2);
        if (t.contains("eps")) t["eps"].get_to(rc.tc.adam.eps);
        if (t.contains("patience")) t["patience"].get_to(rc.tc.early.patience);
        if (t.contains("start_epoch")) t["start_epoch"].get_to(rc.tc.early.start_epoch);
        if (t.contains("min_delta")) t["min_delta"].get_to(rc.tc.early.min_delta);
    }

    if (j.contains("val_fraction")) j["val_fraction"].get_to(rc.val_fraction);
    if (j.contains("seed")) {
        uint64_t s;
        j["seed"].get_to(s);
        rc.tc.seed = s;
        rc.net.seed = s;
        rc.seed_from_config = true;
    }
    if (rc.val_fraction < 0.0 || rc.val_fraction >= 1.0)
        throw ConfigError("config: val_fraction must lie in [0,1)");
    return rc;
}

}  // namespace lssf::cli
