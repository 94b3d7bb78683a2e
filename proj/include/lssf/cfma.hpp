#pragma once

// Context-gated focal modulation applied to encoder skip features: a focal
// modulation body (FMB) followed by a residual conv+LN refinement and a
// residual channel MLP.

#include <random>
#include <string>

#include "lssf/nn.hpp"
#include "lssf/ops.hpp"
#include "lssf/params.hpp"

namespace lssf {

struct CfmaConfig {
    int levels = 2;      // depthwise context levels, kernel 2l+1 at level l
    int mlp_ratio = 2;
};

template <typename T>
void init_fmb(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int c, int levels) {
    detail::require(levels >= 1, "fmb: need at least one level");
    ps.add(prefix + ".q", he_normal<T>({1, 1, c, c}, rng));
    ps.add(prefix + ".ctx", he_normal<T>({1, 1, c, c + levels + 1}, rng));
    for (int l = 1; l <= levels; ++l) {
        int k = 2 * l + 1;
        ps.add(prefix + ".dw" + std::to_string(l), he_normal<T>({k, k, c}, rng));
    }
    ps.add(prefix + ".mod", he_normal<T>({1, 1, c, c}, rng));
    ps.add(prefix + ".out", he_normal<T>({1, 1, c, c}, rng));
}

// Query projection modulated by a gated sum of hierarchical depthwise
// contexts plus one global (pooled) context; all projections are 1x1.
template <typename T>
Var fmb(Ctx<T>& ctx, Var x, const std::string& prefix, int levels) {
    const auto& xv = ctx.tape.val(x);
    detail::require(xv.ndim() == 4, "fmb: input must be [N,H,W,C]");
    int H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);

    Var q = conv2d(ctx.tape, x, ctx.p(prefix + ".q"), Var{});
    Var cg = conv2d(ctx.tape, x, ctx.p(prefix + ".ctx"), Var{});  // [N,H,W,C+L+1]
    Var level = slice_channels(ctx.tape, cg, 0, C);
    Var acc{};
    for (int l = 1; l <= levels; ++l) {
        level = gelu(ctx.tape, depthwise_conv2d(ctx.tape, level, ctx.p(prefix + ".dw" + std::to_string(l))));
        Var gate = slice_channels(ctx.tape, cg, C + l - 1, C + l);
        Var term = mul_gate(ctx.tape, gate, level);
        acc = (l == 1) ? term : add(ctx.tape, acc, term);
    }
    Var global = broadcast_spatial(ctx.tape, global_avg_pool(ctx.tape, level), H, W);
    Var gate = slice_channels(ctx.tape, cg, C + levels, C + levels + 1);
    acc = add(ctx.tape, acc, mul_gate(ctx.tape, gate, global));

    Var modulator = conv2d(ctx.tape, acc, ctx.p(prefix + ".mod"), Var{});
    return conv2d(ctx.tape, mul(ctx.tape, q, modulator), ctx.p(prefix + ".out"), Var{});
}

template <typename T>
void init_cfma(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int c, const CfmaConfig& cfg) {
    init_fmb(ps, rng, prefix + ".fmb", c, cfg.levels);
    init_conv(ps, rng, prefix + ".post", 3, c, c);
    ps.add(prefix + ".ln.g", Tensor<T>::full({c}, T(1)));
    ps.add(prefix + ".ln.be", Tensor<T>::zeros({c}));
    init_conv(ps, rng, prefix + ".mlp1", 1, c, c * cfg.mlp_ratio);
    init_conv(ps, rng, prefix + ".mlp2", 1, c * cfg.mlp_ratio, c);
}

// c1 = x + LN(conv3x3(fmb(x))); out = c1 + mlp(c1)
template <typename T>
Var cfma(Ctx<T>& ctx, Var x, const std::string& prefix, const CfmaConfig& cfg) {
    Var body = apply_conv(ctx, fmb(ctx, x, prefix + ".fmb", cfg.levels), prefix + ".post");
    body = layer_norm(ctx.tape, body, ctx.p(prefix + ".ln.g"), ctx.p(prefix + ".ln.be"));
    Var c1 = add(ctx.tape, x, body);
    Var m = gelu(ctx.tape, apply_conv(ctx, c1, prefix + ".mlp1"));
    m = apply_conv(ctx, m, prefix + ".mlp2");
    return add(ctx.tape, c1, m);
}

}  // namespace lssf
