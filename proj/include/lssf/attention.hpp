#pragma once

// Bottleneck attention: channel self-attention (SAB), global spatial
// attention (GSA), and their concat -> shuffle -> fuse assembly.

#include <cmath>
#include <random>
#include <string>

#include "lssf/nn.hpp"
#include "lssf/ops.hpp"
#include "lssf/params.hpp"

namespace lssf {

struct SabConfig {
    double temperature = 0.0;  // <= 0 means "use channel count"
    double dropout_rate = 0.1;
    bool learned_projections = false;
};

template <typename T>
void init_sab(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int c, const SabConfig& cfg) {
    if (cfg.learned_projections) {
        ps.add(prefix + ".wq", he_normal<T>({c, c}, rng));
        ps.add(prefix + ".wk", he_normal<T>({c, c}, rng));
        ps.add(prefix + ".wv", he_normal<T>({c, c}, rng));
    }
}

// Scaled dot-product attention over channel similarity: energy is C x C,
// softmax-normalized along its last axis.
template <typename T>
Var sab(Ctx<T>& ctx, Var x, const std::string& prefix, const SabConfig& cfg) {
    const auto& xv = ctx.tape.val(x);
    detail::require(xv.ndim() == 4, "sab: input must be [N,H,W,C]");
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    double temperature = cfg.temperature > 0.0 ? cfg.temperature : static_cast<double>(C);
    detail::require(temperature > 0.0, "sab: temperature must be > 0");

    Var flat = reshape(ctx.tape, x, {N, H * W, C});
    Var query = flat, key = flat, value = flat;
    if (cfg.learned_projections) {
        query = matmul(ctx.tape, flat, ctx.p(prefix + ".wq"));
        key = matmul(ctx.tape, flat, ctx.p(prefix + ".wk"));
        value = matmul(ctx.tape, flat, ctx.p(prefix + ".wv"));
    }
    Var energy = matmul(ctx.tape, permute(ctx.tape, query, {0, 2, 1}), key);  // [N,C,C]
    energy = mul_const(ctx.tape, energy, static_cast<T>(1.0 / std::sqrt(temperature)));
    Var attention = softmax(ctx.tape, energy, -1);
    attention = dropout(ctx.tape, attention, cfg.dropout_rate, ctx.mode, ctx.rng);
    Var out = matmul(ctx.tape, value, attention);  // [N,HW,C]
    return reshape(ctx.tape, out, {N, H, W, C});
}

struct GsaConfig {
    int factor = 2;
};

template <typename T>
void init_gsa(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int c, int hw,
              const GsaConfig& cfg) {
    detail::require(cfg.factor >= 1 && c % cfg.factor == 0, "gsa: factor must divide channels");
    ps.add(prefix + ".q", he_normal<T>({1, 1, c, c / cfg.factor}, rng));
    ps.add(prefix + ".k", he_normal<T>({1, 1, c, c / cfg.factor}, rng));
    ps.add(prefix + ".v", he_normal<T>({1, 1, c, c}, rng));
    ps.add(prefix + ".w", random_normal<T>({hw, hw}, rng, 0.02));
}

// Position-by-position attention over the spatial grid with a trainable
// HWxHW mixing matrix and a residual add.
template <typename T>
Var gsa(Ctx<T>& ctx, Var x, const std::string& prefix, const GsaConfig& cfg) {
    const auto& xv = ctx.tape.val(x);
    detail::require(xv.ndim() == 4, "gsa: input must be [N,H,W,C]");
    int N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    detail::require(C % cfg.factor == 0, "gsa: factor must divide channels");
    int cr = C / cfg.factor;
    int hw = H * W;
    detail::require(ctx.tape.val(ctx.p(prefix + ".w")).dim(0) == hw, "gsa: W matrix size does not match H*W");

    Var q = reshape(ctx.tape, conv2d(ctx.tape, x, ctx.p(prefix + ".q"), Var{}), {N, hw, cr});
    Var k = reshape(ctx.tape, conv2d(ctx.tape, x, ctx.p(prefix + ".k"), Var{}), {N, hw, cr});
    Var energy = matmul(ctx.tape, q, permute(ctx.tape, k, {0, 2, 1}));  // [N,HW,HW]
    Var attention = softmax(ctx.tape, energy, -1);
    Var v = reshape(ctx.tape, conv2d(ctx.tape, x, ctx.p(prefix + ".v"), Var{}), {N, hw, C});
    Var out = matmul(ctx.tape, permute(ctx.tape, v, {0, 2, 1}), attention);  // [N,C,HW]
    out = matmul(ctx.tape, out, ctx.p(prefix + ".w"));
    out = reshape(ctx.tape, permute(ctx.tape, out, {0, 2, 1}), {N, H, W, C});
    return add(ctx.tape, out, x);
}

struct BottleneckConfig {
    SabConfig sab;
    GsaConfig gsa;
    int shuffle_groups = 2;
};

template <typename T>
void init_bottleneck(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int c, int hw,
                     const BottleneckConfig& cfg) {
    init_gsa(ps, rng, prefix + ".gsa", c, hw, cfg.gsa);
    init_sab(ps, rng, prefix + ".sab", c, cfg.sab);
    init_conv(ps, rng, prefix + ".fuse", 1, 2 * c, c);
}

// GSA || SAB -> channel shuffle -> 1x1 fuse back to the bottleneck width.
template <typename T>
Var bottleneck(Ctx<T>& ctx, Var e_last, const std::string& prefix, const BottleneckConfig& cfg) {
    Var g = gsa(ctx, e_last, prefix + ".gsa", cfg.gsa);
    Var s = sab(ctx, e_last, prefix + ".sab", cfg.sab);
    Var mixed = channel_shuffle(ctx.tape, concat(ctx.tape, {g, s}, -1), cfg.shuffle_groups);
    return apply_conv(ctx, mixed, prefix + ".fuse");
}

}  // namespace lssf
