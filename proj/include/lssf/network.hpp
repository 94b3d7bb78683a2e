#pragma once

// Full model assembly: stem, three booster encoder stages, attention
// bottleneck, four decoder stages fed attention-refined skips, sigmoid head.
// Also the analytic parameter/FLOP accounting used by reports.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "lssf/attention.hpp"
#include "lssf/cfma.hpp"
#include "lssf/nn.hpp"
#include "lssf/ops.hpp"
#include "lssf/params.hpp"

namespace lssf {

struct NetworkConfig {
    int input_size = 256;
    std::array<int, 4> widths{6, 12, 24, 72};
    SabConfig sab;
    GsaConfig gsa;
    int shuffle_groups = 2;
    CfmaConfig cfma;
    uint64_t seed = 42;
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = {{"input_size", c.input_size},
         {"widths", c.widths},
         {"sab", {{"temperature", c.sab.temperature},
                  {"dropout_rate", c.sab.dropout_rate},
                  {"learned_projections", c.sab.learned_projections}}},
         {"gsa", {{"factor", c.gsa.factor}}},
         {"shuffle_groups", c.shuffle_groups},
         {"cfma", {{"levels", c.cfma.levels}, {"mlp_ratio", c.cfma.mlp_ratio}}},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
    j.at("input_size").get_to(c.input_size);
    j.at("widths").get_to(c.widths);
    j.at("sab").at("temperature").get_to(c.sab.temperature);
    j.at("sab").at("dropout_rate").get_to(c.sab.dropout_rate);
    j.at("sab").at("learned_projections").get_to(c.sab.learned_projections);
    j.at("gsa").at("factor").get_to(c.gsa.factor);
    j.at("shuffle_groups").get_to(c.shuffle_groups);
    j.at("cfma").at("levels").get_to(c.cfma.levels);
    j.at("cfma").at("mlp_ratio").get_to(c.cfma.mlp_ratio);
    j.at("seed").get_to(c.seed);
}

inline bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

inline void validate_config(const NetworkConfig& cfg) {
    detail::require(power_of_two(cfg.input_size) && cfg.input_size >= 16,
                    "config: input_size must be a power of two >= 16");
    for (int w : cfg.widths) detail::require(w >= 1, "config: widths must be positive");
    detail::require(cfg.widths[3] % cfg.gsa.factor == 0, "config: gsa factor must divide the deepest width");
}

template <typename T>
void init_model(ParamStore<T>& ps, const NetworkConfig& cfg) {
    validate_config(cfg);
    std::mt19937_64 rng(cfg.seed);
    const auto& w = cfg.widths;
    init_stem(ps, rng, "stem", 3, w[0]);
    init_encoder_block(ps, rng, "enc1", w[0], w[1]);
    init_encoder_block(ps, rng, "enc2", w[1], w[2]);
    init_encoder_block(ps, rng, "enc3", w[2], w[3]);
    for (int k = 0; k < 4; ++k) init_cfma(ps, rng, "cfma" + std::to_string(k), w[k], cfg.cfma);
    int hw = (cfg.input_size / 16) * (cfg.input_size / 16);
    BottleneckConfig bcfg{cfg.sab, cfg.gsa, cfg.shuffle_groups};
    init_bottleneck(ps, rng, "bot", w[3], hw, bcfg);
    init_decoder_block(ps, rng, "dec1", w[3], w[3]);
    init_decoder_block(ps, rng, "dec2", w[3], w[2]);
    init_decoder_block(ps, rng, "dec3", w[2], w[1]);
    init_decoder_block(ps, rng, "dec4", w[1], w[0]);
    init_output_head(ps, rng, "head", w[0]);
}

template <typename T>
Var forward(Ctx<T>& ctx, Var x, const NetworkConfig& cfg) {
    const auto& xv = ctx.tape.val(x);
    detail::require(xv.ndim() == 4 && xv.dim(3) == 3, "forward: input must be [N,S,S,3]");
    detail::require(xv.dim(1) == cfg.input_size && xv.dim(2) == cfg.input_size,
                    "forward: input spatial size does not match config");
    BottleneckConfig bcfg{cfg.sab, cfg.gsa, cfg.shuffle_groups};

    auto [s0, e0] = initial_stem(ctx, x, "stem");
    auto [s1, e1] = encoder_block(ctx, e0, "enc1");
    auto [s2, e2] = encoder_block(ctx, e1, "enc2");
    auto [s3, e3] = encoder_block(ctx, e2, "enc3");
    Var d = bottleneck(ctx, e3, "bot", bcfg);
    d = decoder_block(ctx, d, cfma(ctx, s3, "cfma3", cfg.cfma), "dec1");
    d = decoder_block(ctx, d, cfma(ctx, s2, "cfma2", cfg.cfma), "dec2");
    d = decoder_block(ctx, d, cfma(ctx, s1, "cfma1", cfg.cfma), "dec3");
    d = decoder_block(ctx, d, cfma(ctx, s0, "cfma0", cfg.cfma), "dec4");
    return output_head(ctx, d, "head");
}

// prob [N,S,S,1] -> {0,1} mask [N,S,S]; the threshold itself maps to 1
template <typename T>
Tensor<uint8_t> predict_mask(const Tensor<T>& prob, double threshold = 0.5) {
    detail::require(threshold > 0.0 && threshold < 1.0, "predict_mask: threshold must lie in (0,1)");
    detail::require(prob.ndim() == 4 && prob.dim(3) == 1, "predict_mask: expected [N,S,S,1]");
    Tensor<uint8_t> mask({prob.dim(0), prob.dim(1), prob.dim(2)});
    for (int64_t i = 0; i < prob.size(); ++i)
        mask[i] = static_cast<double>(prob[i]) >= threshold ? 1 : 0;
    return mask;
}

template <typename T>
int64_t count_params(const ParamStore<T>& ps) {
    return ps.count_learnable();
}

// ---- analytic accounting ------------------------------------------------

struct LayerInfo {
    std::string name;
    std::vector<int> shape;  // output shape, batch 1
    int64_t params = 0;
    int64_t flops = 0;  // multiply-add counted as 2 FLOPs
};

namespace detail {

struct Plan {
    std::vector<LayerInfo> layers;
    void add(std::string name, std::vector<int> shape, int64_t params, int64_t flops) {
        layers.push_back({std::move(name), std::move(shape), params, flops});
    }
    // k x k conv, same padding, stride 1, optional bias
    void conv(const std::string& name, int k, int cin, int cout, int r, bool bias = true) {
        int64_t p = int64_t(k) * k * cin * cout + (bias ? cout : 0);
        int64_t f = 2ll * k * k * cin * cout * r * r + (bias ? int64_t(r) * r * cout : 0);
        add(name, {1, r, r, cout}, p, f);
    }
    void bn(const std::string& name, int c, int r) { add(name, {1, r, r, c}, 2ll * c, 2ll * r * r * c); }
    void ew(const std::string& name, int c, int r, int64_t per_elem = 1) {
        add(name, {1, r, r, c}, 0, per_elem * r * r * c);
    }
    void unit(const std::string& p, int k, int cin, int cout, int r) {
        conv(p, k, cin, cout, r);
        bn(p + ".bn", cout, r);
        ew(p + ".relu", cout, r);
    }
};

inline void plan_encoder(Plan& pl, const std::string& p, int cin, int cout, int r) {
    pl.unit(p + ".skip", 3, cin, cout, r);
    pl.conv(p + ".b1", 3, cout, cout, r);
    pl.bn(p + ".b1bn", cout, r);
    pl.conv(p + ".b2", 3, cout, cout, r);
    pl.bn(p + ".b2bn", cout, r);
    pl.unit(p + ".a1", 3, cin, cout, r);
    pl.unit(p + ".a2", 3, cout, cout, r);
    pl.conv(p + ".a3", 3, cout, cout, r);
    pl.ew(p + ".join", cout, r, 2);  // add + relu
    pl.add(p + ".pool", {1, r / 2, r / 2, cout}, 0, int64_t(r / 2) * (r / 2) * cout);
}

inline void plan_decoder(Plan& pl, const std::string& p, int cin, int cout, int r) {
    pl.add(p + ".up", {1, r, r, cin}, 0, int64_t(r) * r * cin);
    pl.unit(p + ".fuse", 3, cin, cout, r);
    pl.ew(p + ".skipadd", cout, r);
    pl.unit(p + ".a1", 3, cin, cout, r);
    pl.unit(p + ".a2", 3, cout, cout, r);
    pl.conv(p + ".a3", 3, cout, cout, r);
    pl.conv(p + ".b1", 3, cout, cout, r);
    pl.bn(p + ".b1bn", cout, r);
    pl.conv(p + ".b2", 3, cout, cout, r);
    pl.bn(p + ".b2bn", cout, r);
    pl.ew(p + ".join", cout, r, 2);
}

inline void plan_cfma(Plan& pl, const std::string& p, int c, int r, const CfmaConfig& cfg) {
    pl.conv(p + ".fmb.q", 1, c, c, r, false);
    pl.conv(p + ".fmb.ctx", 1, c, c + cfg.levels + 1, r, false);
    for (int l = 1; l <= cfg.levels; ++l) {
        int k = 2 * l + 1;
        std::string nm = p + ".fmb.dw" + std::to_string(l);
        pl.add(nm, {1, r, r, c}, int64_t(k) * k * c, 2ll * k * k * c * r * r);
        pl.ew(nm + ".gelu", c, r);
        pl.ew(nm + ".gate", c, r, 2);  // gate product + accumulate
    }
    pl.ew(p + ".fmb.global", c, r, 3);  // pool, broadcast gate product, accumulate
    pl.conv(p + ".fmb.mod", 1, c, c, r, false);
    pl.ew(p + ".fmb.modmul", c, r);
    pl.conv(p + ".fmb.out", 1, c, c, r, false);
    pl.conv(p + ".post", 3, c, c, r);
    pl.add(p + ".ln", {1, r, r, c}, 2ll * c, 5ll * r * r * c);
    pl.ew(p + ".res1", c, r);
    pl.conv(p + ".mlp1", 1, c, c * cfg.mlp_ratio, r);
    pl.ew(p + ".mlp.gelu", c * cfg.mlp_ratio, r);
    pl.conv(p + ".mlp2", 1, c * cfg.mlp_ratio, c, r);
    pl.ew(p + ".res2", c, r);
}

inline void plan_bottleneck(Plan& pl, const std::string& p, int c, int r, const BottleneckConfig& cfg) {
    int64_t hw = int64_t(r) * r;
    int cr = c / cfg.gsa.factor;
    pl.conv(p + ".gsa.q", 1, c, cr, r, false);
    pl.conv(p + ".gsa.k", 1, c, cr, r, false);
    pl.conv(p + ".gsa.v", 1, c, c, r, false);
    pl.add(p + ".gsa.energy", {1, int(hw), int(hw)}, 0, 2 * hw * hw * cr + hw * hw);
    pl.add(p + ".gsa.apply", {1, int(hw), c}, 0, 2 * hw * hw * c);
    pl.add(p + ".gsa.w", {1, c, int(hw)}, hw * hw, 2 * hw * hw * c);
    pl.ew(p + ".gsa.res", c, r);
    int64_t sab_p = cfg.sab.learned_projections ? 3ll * c * c : 0;
    int64_t sab_proj = cfg.sab.learned_projections ? 3ll * 2 * hw * c * c : 0;
    pl.add(p + ".sab", {1, r, r, c}, sab_p,
           sab_proj + 2 * hw * c * c + int64_t(c) * c + 2 * hw * c * c);
    pl.conv(p + ".fuse", 1, 2 * c, c, r);
}

}  // namespace detail

inline std::vector<LayerInfo> model_plan(const NetworkConfig& cfg) {
    validate_config(cfg);
    detail::Plan pl;
    const auto& w = cfg.widths;
    int s = cfg.input_size;
    pl.unit("stem.s0", 3, 3, w[0], s);
    pl.unit("stem.e1", 3, w[0], w[0], s);
    pl.unit("stem.e2", 3, w[0], w[0], s);
    pl.add("stem.pool", {1, s / 2, s / 2, w[0]}, 0, int64_t(s / 2) * (s / 2) * w[0]);
    detail::plan_encoder(pl, "enc1", w[0], w[1], s / 2);
    detail::plan_encoder(pl, "enc2", w[1], w[2], s / 4);
    detail::plan_encoder(pl, "enc3", w[2], w[3], s / 8);
    int skip_res[4] = {s, s / 2, s / 4, s / 8};
    for (int k = 0; k < 4; ++k) detail::plan_cfma(pl, "cfma" + std::to_string(k), w[k], skip_res[k], cfg.cfma);
    BottleneckConfig bcfg{cfg.sab, cfg.gsa, cfg.shuffle_groups};
    detail::plan_bottleneck(pl, "bot", w[3], s / 16, bcfg);
    detail::plan_decoder(pl, "dec1", w[3], w[3], s / 8);
    detail::plan_decoder(pl, "dec2", w[3], w[2], s / 4);
    detail::plan_decoder(pl, "dec3", w[2], w[1], s / 2);
    detail::plan_decoder(pl, "dec4", w[1], w[0], s);
    pl.unit("head.pre", 3, w[0], w[0], s);
    pl.conv("head.fin", 1, w[0], 1, s);
    pl.ew("head.sigmoid", 1, s, 4);
    return pl.layers;
}

inline int64_t count_flops(const NetworkConfig& cfg) {
    int64_t total = 0;
    for (const auto& l : model_plan(cfg)) total += l.flops;
    return total;
}

inline int64_t plan_params(const NetworkConfig& cfg) {
    int64_t total = 0;
    for (const auto& l : model_plan(cfg)) total += l.params;
    return total;
}

inline nlohmann::json layer_table_json(const NetworkConfig& cfg) {
    nlohmann::json rows = nlohmann::json::array();
    int64_t p = 0, f = 0;
    for (const auto& l : model_plan(cfg)) {
        rows.push_back({{"name", l.name}, {"shape", l.shape}, {"params", l.params}, {"flops", l.flops}});
        p += l.params;
        f += l.flops;
    }
    return {{"flop_convention", "multiply-add = 2 FLOPs"},
            {"total_params", p},
            {"total_flops", f},
            {"layers", rows}};
}

}  // namespace lssf
